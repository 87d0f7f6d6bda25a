#pragma once

// Training data: a seeded synthetic corpus and a minimal WAV reader.
//
// Synthetic clips are a pure function of (spec, frame hop, clip index).  Each
// clip belongs to a tone class — its fundamental frequency is drawn from that
// class's band — and carries per-frame voiced/unvoiced labels aligned to the
// feature-encoder hop.  Voiced frames hold a harmonic stack plus light noise;
// unvoiced frames hold quieter noise.  Both downstream probe tasks are
// therefore solvable by construction: tone class from spectral content,
// voicing from frame energy.
//
// WAV support is deliberately small: PCM16 mono at 8 or 16 kHz, read whole.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "mcr/rng.hpp"
#include "mcr/util.hpp"

namespace mcr {

struct SyntheticSpec {
  std::size_t n_clips = 96;
  std::size_t clip_len_samples = 1600;
  std::size_t sample_rate = 8000;
  std::uint64_t seed = 1234;
  // One class per band: [low, high) in Hz for the fundamental.
  std::vector<std::array<double, 2>> f0_bands = {{100.0, 140.0}, {320.0, 420.0}};
  std::size_t harmonics = 3;
  double voiced_amp = 0.5;
  double unvoiced_amp = 0.15;
  double noise_level = 0.05;

  void validate() const {
    if (n_clips == 0) fail_invalid("data: n_clips must be positive");
    if (clip_len_samples == 0) fail_invalid("data: clip_len_samples must be positive");
    if (sample_rate == 0) fail_invalid("data: sample_rate must be positive");
    if (f0_bands.empty()) fail_invalid("data: f0_bands has no classes");
    const double nyquist = static_cast<double>(sample_rate) / 2.0;
    for (const auto& b : f0_bands) {
      if (!(b[0] > 0.0 && b[1] > b[0]))
        fail_invalid("data: f0 band [", b[0], ", ", b[1], ") is not a valid range");
      if (b[1] * static_cast<double>(harmonics) >= nyquist)
        fail_invalid("data: band top ", b[1], " Hz with ", harmonics,
                     " harmonics crosses Nyquist ", nyquist, " Hz");
    }
    if (harmonics == 0) fail_invalid("data: harmonics must be positive");
    if (!(voiced_amp > 0.0 && unvoiced_amp >= 0.0 && noise_level >= 0.0))
      fail_invalid("data: amplitudes must be nonnegative (voiced positive)");
  }
};

template <typename Real>
struct Clip {
  std::vector<Real> samples;
  std::size_t tone_class = 0;
  std::vector<std::uint8_t> voiced;  // one flag per feature frame
};

// Draw order per clip (pinned for replay): f0, amplitude jitter, one phase
// per harmonic, one voicing flag per frame, one noise value per sample.
template <typename Real>
Clip<Real> make_clip(const SyntheticSpec& spec, std::size_t frame_hop,
                     std::size_t index) {
  spec.validate();
  if (frame_hop == 0 || spec.clip_len_samples % frame_hop != 0)
    fail_invalid("data: clip length ", spec.clip_len_samples,
                 " is not a multiple of the frame hop ", frame_hop);
  Clip<Real> clip;
  clip.tone_class = index % spec.f0_bands.size();  // balanced by construction

  RngStream rng = RngStream::root(spec.seed).derive("clip").derive(index);
  const auto& band = spec.f0_bands[clip.tone_class];
  const double f0 = band[0] + (band[1] - band[0]) * rng.next_double();
  const double amp = spec.voiced_amp * (0.8 + 0.4 * rng.next_double());
  std::vector<double> phases(spec.harmonics);
  for (auto& ph : phases) ph = 2.0 * std::numbers::pi * rng.next_double();

  const std::size_t n_frames = spec.clip_len_samples / frame_hop;
  clip.voiced.resize(n_frames);
  for (auto& v : clip.voiced) v = rng.next_bernoulli(0.5) ? 1 : 0;

  clip.samples.resize(spec.clip_len_samples);
  const double dt = 1.0 / static_cast<double>(spec.sample_rate);
  for (std::size_t t = 0; t < spec.clip_len_samples; ++t) {
    const double noise = rng.next_normal();  // always one draw per sample
    double x;
    if (clip.voiced[t / frame_hop]) {
      double tone = 0.0;
      for (std::size_t h = 0; h < spec.harmonics; ++h)
        tone += std::sin(2.0 * std::numbers::pi * f0 * (h + 1) * t * dt + phases[h]) /
                static_cast<double>(h + 1);
      x = amp * tone + spec.noise_level * noise;
    } else {
      x = spec.unvoiced_amp * noise;
    }
    clip.samples[t] = static_cast<Real>(x);
  }
  return clip;
}

template <typename Real>
std::vector<Clip<Real>> make_corpus(const SyntheticSpec& spec, std::size_t frame_hop) {
  std::vector<Clip<Real>> corpus;
  corpus.reserve(spec.n_clips);
  for (std::size_t i = 0; i < spec.n_clips; ++i)
    corpus.push_back(make_clip<Real>(spec, frame_hop, i));
  return corpus;
}

// ---------------------------------------------------------------------------
// WAV (RIFF) PCM16 mono

template <typename Real>
struct WavClip {
  std::size_t sample_rate = 0;
  std::vector<Real> samples;  // scaled to [-1, 1)
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void push_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void push_u16le(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

template <typename Real>
WavClip<Real> parse_wav(const std::vector<unsigned char>& bytes, const std::string& what) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    fail_runtime("wav: ", what, " is not a RIFF/WAVE file");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  WavClip<Real> clip;
  bool have_data = false;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t len = detail::read_u32le(bytes.data() + pos + 4);
    pos += 8;
    if (pos + len > bytes.size())
      fail_runtime("wav: ", what, " chunk '", std::string(id, 4),
                   "' runs past end of file (truncated?)");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) fail_runtime("wav: ", what, " fmt chunk too short");
      format = detail::read_u16le(bytes.data() + pos);
      channels = detail::read_u16le(bytes.data() + pos + 2);
      rate = detail::read_u32le(bytes.data() + pos + 4);
      bits = detail::read_u16le(bytes.data() + pos + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) fail_runtime("wav: ", what, " data chunk precedes fmt");
      if (format != 1) fail_runtime("wav: ", what, " is not integer PCM (format ", format, ")");
      if (channels != 1) fail_runtime("wav: ", what, " has ", channels, " channels, want mono");
      if (bits != 16) fail_runtime("wav: ", what, " is ", bits, "-bit, want 16");
      if (rate != 8000 && rate != 16000)
        fail_runtime("wav: ", what, " sample rate ", rate, " unsupported (8000 or 16000)");
      if (len % 2 != 0) fail_runtime("wav: ", what, " data chunk has odd byte count");
      clip.sample_rate = rate;
      clip.samples.resize(len / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(
            detail::read_u16le(bytes.data() + pos + 2 * i));
        clip.samples[i] = static_cast<Real>(raw) / Real(32768);
      }
      have_data = true;
    }
    pos += len + (len % 2);  // chunks are word-aligned
  }
  if (!have_data) fail_runtime("wav: ", what, " has no data chunk");
  return clip;
}

template <typename Real>
WavClip<Real> read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("wav: cannot open ", path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return parse_wav<Real>(bytes, path.string());
}

template <typename Real>
std::vector<unsigned char> encode_wav(std::size_t sample_rate,
                                      const std::vector<Real>& samples) {
  std::vector<unsigned char> out;
  const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  detail::push_u32le(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  detail::push_u32le(out, 16);
  detail::push_u16le(out, 1);  // integer PCM
  detail::push_u16le(out, 1);  // mono
  detail::push_u32le(out, static_cast<std::uint32_t>(sample_rate));
  detail::push_u32le(out, static_cast<std::uint32_t>(sample_rate * 2));  // byte rate
  detail::push_u16le(out, 2);   // block align
  detail::push_u16le(out, 16);  // bits
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  detail::push_u32le(out, data_len);
  for (Real s : samples) {
    double x = static_cast<double>(s);
    x = x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x);
    const auto q = static_cast<std::int16_t>(std::lround(x * 32767.0));
    detail::push_u16le(out, static_cast<std::uint16_t>(q));
  }
  return out;
}

template <typename Real>
void write_wav(const std::filesystem::path& path, std::size_t sample_rate,
               const std::vector<Real>& samples) {
  const auto bytes = encode_wav(sample_rate, samples);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("wav: cannot create ", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_runtime("wav: short write to ", path.string());
}

// Every PCM16 mono WAV in a directory, in sorted filename order so corpus
// composition is stable across filesystems.
template <typename Real>
std::vector<WavClip<Real>> load_wav_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    fail_invalid("wav: ", dir.string(), " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) fail_invalid("wav: no .wav files in ", dir.string());
  std::vector<WavClip<Real>> clips;
  clips.reserve(files.size());
  for (const auto& f : files) clips.push_back(read_wav<Real>(f));
  return clips;
}

}  // namespace mcr
