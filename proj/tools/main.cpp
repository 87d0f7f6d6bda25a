#include <iostream>

#include "mcr/cli.hpp"

int main(int argc, char** argv) { return mcr::run_cli(argc, argv, std::cout, std::cerr); }
