#pragma once

// Small shared helpers: error formatting, byte checksums, whole-file I/O.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcr {

namespace detail {

template <typename... Parts>
std::string concat_msg(Parts&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

}  // namespace detail

// Bad arguments / shapes / config values.  Thrown before any output is
// allocated, so a failed call never leaves partial state behind.
template <typename... Parts>
[[noreturn]] void fail_invalid(Parts&&... parts) {
  throw std::invalid_argument(detail::concat_msg(std::forward<Parts>(parts)...));
}

// Runtime conditions: I/O failures, corrupt files, numeric blow-ups.
template <typename... Parts>
[[noreturn]] void fail_runtime(Parts&&... parts) {
  throw std::runtime_error(detail::concat_msg(std::forward<Parts>(parts)...));
}

// FNV-1a over raw bytes.  Used to fingerprint parameter payloads in tests and
// in the probe's frozen-upstream audit.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("cannot open file for reading: ", path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("cannot open file for writing: ", path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) fail_runtime("short write: ", path.string());
}

}  // namespace mcr
