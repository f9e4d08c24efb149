#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "megabyte/data.hpp"
#include "megabyte/params.hpp"
#include "megabyte/run_config.hpp"

namespace megabyte {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::uint8_t kDtypeF64 = 2;

struct Checkpoint {
  RunConfig config;
  Parameters params;
};

namespace detail {

class LeWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  ByteSequence take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  ByteSequence out_;
};

class LeReader {
 public:
  explicit LeReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("checkpoint: truncated payload");
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// "MBCP", u32 version, u32-length config text, u32 tensor count, then per
// tensor: u32 name length, name, u32 rank, u64 dims, u8 dtype, payload. All
// integers and IEEE-754 values little-endian.
inline ByteSequence encode_checkpoint(const RunConfig& config, const Parameters& params) {
  detail::LeWriter w;
  w.bytes("MBCP");
  w.u32(kCheckpointVersion);
  const std::string text = serialize_run_config(config);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    if constexpr (sizeof(real) == 8) {
      w.u8(kDtypeF64);
      for (real v : t.data()) w.u64(std::bit_cast<std::uint64_t>(static_cast<double>(v)));
    } else {
      w.u8(kDtypeF32);
      for (real v : t.data()) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::LeReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MBCP", 4) != 0) throw FormatError("checkpoint: bad magic");
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: version mismatch (file " + std::to_string(version) + ", supported " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config = parse_run_config(r.str(r.u32()));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d != 0 && numel > (std::uint64_t{1} << 40) / d) throw FormatError("checkpoint: implausible shape for " + name);
      numel *= d;
    }
    const std::uint8_t dtype = r.u8();
    std::vector<real> values(numel);
    if (dtype == kDtypeF64) {
      r.need(numel * 8);
      for (auto& v : values) v = static_cast<real>(std::bit_cast<double>(r.u64()));
    } else if (dtype == kDtypeF32) {
      r.need(numel * 4);
      for (auto& v : values) v = static_cast<real>(std::bit_cast<float>(r.u32()));
    } else {
      throw FormatError("checkpoint: unknown dtype " + std::to_string(dtype) + " for " + name);
    }
    ck.params.add(std::move(name), Tensor::from(shape, std::move(values)));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after last tensor");
  ck.params.check_against(ck.config.model);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Parameters& params) {
  write_file_bytes(path, encode_checkpoint(config, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace megabyte
