#pragma once

// Checkpoint container: a versioned binary file holding a JSON metadata
// blob (config echo, step counters, rng state) followed by ordered named
// arrays (parameters, teacher copy, optimizer moments).
//
// Layout, all integers little-endian:
//   8 bytes  magic "MCRCKPT\0"
//   u32      format version (1)
//   u64      metadata length, then that many bytes of UTF-8 JSON
//   u32      array count
//   per array:
//     u32/u8 name length, name bytes, dtype tag (1 = f32, 2 = f64)
//     u32    rank, then u64 per dimension
//     u64    payload byte count, then raw little-endian values
//
// Failure classes are distinct so callers can map them to exit codes:
// wrong magic/version/dtype -> CheckpointVersionError; short or overlong
// files -> CheckpointTruncatedError; wrong array names on install ->
// CheckpointNameMismatchError.  Loading validates the whole file before
// returning, so no caller ever observes partial state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcr/params.hpp"
#include "mcr/tensor.hpp"
#include "mcr/util.hpp"

namespace mcr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload copies assume a little-endian host");

struct CheckpointVersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointTruncatedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointNameMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Real>
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<Real> data;
};

template <typename Real>
struct CheckpointFile {
  nlohmann::json meta;
  std::vector<NamedArray<Real>> arrays;
};

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'C', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename Int>
void put_le(std::vector<unsigned char>& out, Int v) {
  for (std::size_t i = 0; i < sizeof(Int); ++i)
    out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class ByteCursor {
 public:
  ByteCursor(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  template <typename Int>
  Int take_le(const char* what) {
    need(sizeof(Int), what);
    Int v = 0;
    for (std::size_t i = 0; i < sizeof(Int); ++i)
      v |= static_cast<Int>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(Int);
    return v;
  }

  const unsigned char* take_raw(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (size_ - pos_ < n)
      throw CheckpointTruncatedError(std::string("checkpoint: file ends inside ") +
                                     what);
  }
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

template <typename Real>
constexpr std::uint8_t dtype_tag() {
  return sizeof(Real) == 4 ? 1 : 2;
}

}  // namespace detail

template <typename Real>
std::vector<unsigned char> encode_checkpoint(const CheckpointFile<Real>& file) {
  std::vector<unsigned char> out;
  out.insert(out.end(), detail::kCkptMagic, detail::kCkptMagic + 8);
  detail::put_le(out, detail::kCkptVersion);
  const std::string meta = file.meta.dump();
  detail::put_le(out, static_cast<std::uint64_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  detail::put_le(out, static_cast<std::uint32_t>(file.arrays.size()));
  for (const auto& a : file.arrays) {
    if (a.data.size() != shape_numel(a.shape))
      fail_invalid("checkpoint: array ", a.name, " holds ", a.data.size(),
                   " values for shape ", shape_str(a.shape));
    detail::put_le(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    out.push_back(detail::dtype_tag<Real>());
    detail::put_le(out, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) detail::put_le(out, static_cast<std::uint64_t>(d));
    const std::uint64_t bytes = a.data.size() * sizeof(Real);
    detail::put_le(out, bytes);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, a.data.data(), bytes);
  }
  return out;
}

template <typename Real>
CheckpointFile<Real> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteCursor cur(bytes.data(), bytes.size());
  const unsigned char* magic = cur.take_raw(8, "the magic header");
  if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw CheckpointVersionError(
        "checkpoint: bad magic bytes (not a checkpoint, or an incompatible format)");
  const auto version = cur.take_le<std::uint32_t>("the version field");
  if (version != detail::kCkptVersion)
    throw CheckpointVersionError("checkpoint: format version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(detail::kCkptVersion));

  CheckpointFile<Real> file;
  const auto meta_len = cur.take_le<std::uint64_t>("the metadata length");
  const unsigned char* meta = cur.take_raw(meta_len, "the metadata blob");
  file.meta = nlohmann::json::parse(meta, meta + meta_len, nullptr, false);
  if (file.meta.is_discarded())
    throw CheckpointTruncatedError("checkpoint: metadata blob is not valid JSON");

  const auto count = cur.take_le<std::uint32_t>("the array count");
  file.arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray<Real> a;
    const auto name_len = cur.take_le<std::uint32_t>("an array name length");
    const unsigned char* name = cur.take_raw(name_len, "an array name");
    a.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto tag = cur.take_le<std::uint8_t>("a dtype tag");
    if (tag != detail::dtype_tag<Real>())
      throw CheckpointVersionError("checkpoint: array " + a.name + " has dtype tag " +
                                   std::to_string(tag) + ", expected " +
                                   std::to_string(detail::dtype_tag<Real>()));
    const auto rank = cur.take_le<std::uint32_t>("an array rank");
    a.shape.resize(rank);
    for (auto& d : a.shape)
      d = static_cast<std::size_t>(cur.take_le<std::uint64_t>("an array dimension"));
    const auto payload = cur.take_le<std::uint64_t>("an array payload length");
    if (payload != shape_numel(a.shape) * sizeof(Real))
      throw CheckpointTruncatedError("checkpoint: array " + a.name + " payload of " +
                                     std::to_string(payload) +
                                     " bytes does not match its shape");
    const unsigned char* raw = cur.take_raw(payload, "an array payload");
    a.data.resize(payload / sizeof(Real));
    std::memcpy(a.data.data(), raw, payload);
    file.arrays.push_back(std::move(a));
  }
  if (cur.remaining() != 0)
    throw CheckpointTruncatedError("checkpoint: " + std::to_string(cur.remaining()) +
                                   " trailing bytes after the last array");
  return file;
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const CheckpointFile<Real>& file) {
  const auto bytes = encode_checkpoint(file);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("checkpoint: cannot create ", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_runtime("checkpoint: short write to ", path.string());
}

template <typename Real>
CheckpointFile<Real> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("checkpoint: cannot open ", path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_checkpoint<Real>(bytes);
}

// Copies every "<prefix><name>" array into the matching store entry.  The
// name sets must match exactly: anything missing or unexpected aborts with
// the full list before a single value is written.
template <typename Real>
void install_arrays(const CheckpointFile<Real>& file, const std::string& prefix,
                    ParamStore<Real>& store) {
  std::set<std::string> want;
  for (std::size_t i = 0; i < store.size(); ++i) want.insert(prefix + store.name(i));
  std::set<std::string> got;
  for (const auto& a : file.arrays)
    if (a.name.rfind(prefix, 0) == 0) got.insert(a.name);
  if (want != got) {
    std::string detail;
    for (const auto& n : want)
      if (got.find(n) == got.end()) detail += " missing:" + n;
    for (const auto& n : got)
      if (want.find(n) == want.end()) detail += " unexpected:" + n;
    throw CheckpointNameMismatchError("checkpoint: array names do not match under '" +
                                      prefix + "':" + detail);
  }
  for (const auto& a : file.arrays) {
    if (a.name.rfind(prefix, 0) != 0) continue;
    const Tensor<Real>& t = store.at(a.name.substr(prefix.size()));
    if (t.shape() != a.shape)
      throw CheckpointNameMismatchError("checkpoint: array " + a.name + " has shape " +
                                        shape_str(a.shape) + ", store expects " +
                                        shape_str(t.shape()));
  }
  for (const auto& a : file.arrays)
    if (a.name.rfind(prefix, 0) == 0)
      store.at(a.name.substr(prefix.size())).value_mut() = a.data;
}

}  // namespace mcr
