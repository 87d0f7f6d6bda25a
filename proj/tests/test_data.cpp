#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "mcr/data.hpp"

using mcr::Clip;
using mcr::SyntheticSpec;

namespace {

// Test-side oracle: Goertzel power of one frequency over a sample block.
double goertzel_power(const std::vector<double>& x, double freq, double rate) {
  const double w = 2.0 * std::numbers::pi * freq / rate;
  const double coeff = 2.0 * std::cos(w);
  double s0 = 0.0, s1 = 0.0, s2 = 0.0;
  for (double v : x) {
    s0 = v + coeff * s1 - s2;
    s2 = s1;
    s1 = s0;
  }
  return s1 * s1 + s2 * s2 - coeff * s1 * s2;
}

double band_power(const std::vector<double>& x, double lo, double hi, double rate) {
  double total = 0.0;
  for (double f = lo; f <= hi; f += 10.0) total += goertzel_power(x, f, rate);
  return total;
}

double frame_rms(const std::vector<double>& s, std::size_t frame, std::size_t hop) {
  double sq = 0.0;
  for (std::size_t t = frame * hop; t < (frame + 1) * hop; ++t) sq += s[t] * s[t];
  return std::sqrt(sq / static_cast<double>(hop));
}

}  // namespace

TEST_CASE("synthetic corpus is a pure function of its seed", "[data]") {
  SyntheticSpec spec;
  spec.n_clips = 8;
  auto a = mcr::make_corpus<double>(spec, 160);
  auto b = mcr::make_corpus<double>(spec, 160);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].tone_class == b[i].tone_class);
    REQUIRE(a[i].voiced == b[i].voiced);
    REQUIRE(std::memcmp(a[i].samples.data(), b[i].samples.data(),
                        a[i].samples.size() * sizeof(double)) == 0);
  }
  SyntheticSpec other = spec;
  other.seed = spec.seed + 1;
  auto c = mcr::make_corpus<double>(other, 160);
  REQUIRE(std::memcmp(a[0].samples.data(), c[0].samples.data(),
                      a[0].samples.size() * sizeof(double)) != 0);
}

TEST_CASE("clips carry balanced classes and hop-aligned labels", "[data]") {
  SyntheticSpec spec;
  spec.n_clips = 10;
  auto corpus = mcr::make_corpus<double>(spec, 160);
  std::size_t class1 = 0, voiced = 0, frames = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    REQUIRE(corpus[i].tone_class == i % 2);
    REQUIRE(corpus[i].samples.size() == 1600);
    REQUIRE(corpus[i].voiced.size() == 10);
    class1 += corpus[i].tone_class;
    for (auto v : corpus[i].voiced) {
      REQUIRE((v == 0 || v == 1));
      voiced += v;
      ++frames;
    }
  }
  REQUIRE(class1 == 5);
  // voicing is a fair coin per frame; 100 frames -> 3 sigma = 15
  REQUIRE(voiced > 50 - 16);
  REQUIRE(voiced < 50 + 16);
}

TEST_CASE("voiced frames are separably louder than unvoiced", "[data]") {
  SyntheticSpec spec;
  spec.n_clips = 12;
  auto corpus = mcr::make_corpus<double>(spec, 160);
  double min_voiced = 1e9, max_unvoiced = 0.0;
  for (const auto& clip : corpus)
    for (std::size_t f = 0; f < clip.voiced.size(); ++f) {
      const double rms = frame_rms(clip.samples, f, 160);
      if (clip.voiced[f])
        min_voiced = std::min(min_voiced, rms);
      else
        max_unvoiced = std::max(max_unvoiced, rms);
    }
  REQUIRE(min_voiced > 0.25);
  REQUIRE(max_unvoiced < 0.25);
}

TEST_CASE("tone classes separate in their frequency bands", "[data]") {
  SyntheticSpec spec;
  spec.n_clips = 12;
  auto corpus = mcr::make_corpus<double>(spec, 160);
  for (const auto& clip : corpus) {
    const double low = band_power(clip.samples, 100, 140, 8000);
    const double high = band_power(clip.samples, 320, 420, 8000);
    if (clip.tone_class == 0)
      REQUIRE(low > high);  // fundamental lives in the low band
    else
      REQUIRE(high > low);
  }
}

TEST_CASE("spec validation rejects unusable corpora", "[data]") {
  SyntheticSpec nyq;
  nyq.f0_bands = {{100, 140}, {320, 1400}};  // 3 harmonics cross 4 kHz
  REQUIRE_THROWS_AS(nyq.validate(), std::invalid_argument);
  SyntheticSpec empty;
  empty.f0_bands.clear();
  REQUIRE_THROWS_AS(empty.validate(), std::invalid_argument);
  SyntheticSpec spec;
  REQUIRE_THROWS_AS(mcr::make_clip<double>(spec, 0, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(mcr::make_clip<double>(spec, 7, 0), std::invalid_argument);
}

TEST_CASE("wav roundtrips PCM16 mono exactly on the integer grid", "[data]") {
  // samples already on the 16-bit grid survive write -> read bitwise
  std::vector<double> grid;
  for (int i = -4; i <= 4; ++i) grid.push_back(i * 1024.0 / 32768.0);
  const auto dir = std::filesystem::temp_directory_path() / "mcr_wav_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "tone.wav";
  mcr::write_wav(path, 8000, grid);
  auto back = mcr::read_wav<double>(path);
  REQUIRE(back.sample_rate == 8000);
  REQUIRE(back.samples.size() == grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    REQUIRE(back.samples[i] == Catch::Approx(grid[i]).margin(1.0 / 32767.0));

  // general float samples come back within one quantization step
  std::vector<double> wave(64);
  for (std::size_t i = 0; i < wave.size(); ++i)
    wave[i] = 0.9 * std::sin(0.1 * static_cast<double>(i));
  mcr::write_wav(dir / "sine.wav", 16000, wave);
  auto sine = mcr::read_wav<double>(dir / "sine.wav");
  // write scales by 32767, read by 32768: error <= (0.5 + |x|) / 32768
  for (std::size_t i = 0; i < wave.size(); ++i)
    REQUIRE(std::abs(sine.samples[i] - wave[i]) < 1.5 / 32768.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("wav parser rejects everything but PCM16 mono", "[data]") {
  std::vector<double> wave(16, 0.1);
  auto good = mcr::encode_wav(8000, wave);

  auto stereo = good;
  stereo[22] = 2;  // channel count
  REQUIRE_THROWS_WITH(mcr::parse_wav<double>(stereo, "x"),
                      Catch::Matchers::ContainsSubstring("channels"));

  auto eight_bit = good;
  eight_bit[34] = 8;  // bits per sample
  REQUIRE_THROWS_WITH(mcr::parse_wav<double>(eight_bit, "x"),
                      Catch::Matchers::ContainsSubstring("16"));

  auto ieee = good;
  ieee[20] = 3;  // float format tag
  REQUIRE_THROWS_WITH(mcr::parse_wav<double>(ieee, "x"),
                      Catch::Matchers::ContainsSubstring("PCM"));

  auto rate = good;
  rate[24] = 0x22;  // 44100 & 0xff -> mangle the sample rate
  rate[25] = 0xac;
  REQUIRE_THROWS_WITH(mcr::parse_wav<double>(rate, "x"),
                      Catch::Matchers::ContainsSubstring("sample rate"));

  auto magic = good;
  magic[0] = 'X';
  REQUIRE_THROWS_WITH(mcr::parse_wav<double>(magic, "x"),
                      Catch::Matchers::ContainsSubstring("RIFF"));

  auto cut = good;
  cut.resize(cut.size() - 6);  // truncate inside the data chunk
  REQUIRE_THROWS_WITH(mcr::parse_wav<double>(cut, "x"),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("wav directory loads in sorted order", "[data]") {
  const auto dir = std::filesystem::temp_directory_path() / "mcr_wavdir_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  mcr::write_wav(dir / "b.wav", 8000, std::vector<double>(32, 0.25));
  mcr::write_wav(dir / "a.wav", 8000, std::vector<double>(16, -0.5));
  mcr::write_wav(dir / "c.wav", 16000, std::vector<double>(8, 0.75));
  std::ofstream(dir / "notes.txt") << "ignored";

  auto clips = mcr::load_wav_dir<float>(dir);
  REQUIRE(clips.size() == 3);
  REQUIRE(clips[0].samples.size() == 16);  // a.wav first
  REQUIRE(clips[1].samples.size() == 32);
  REQUIRE(clips[2].sample_rate == 16000);

  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  REQUIRE_THROWS_AS(mcr::load_wav_dir<float>(dir), std::invalid_argument);
  std::filesystem::remove_all(dir);
  REQUIRE_THROWS_AS(mcr::load_wav_dir<float>(dir), std::invalid_argument);
}
