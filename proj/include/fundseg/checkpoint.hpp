#ifndef FUNDSEG_CHECKPOINT_HPP
#define FUNDSEG_CHECKPOINT_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "model.hpp"

namespace fundseg {

/// Checkpoint file layout, all integers little-endian:
///
///   "FSEG"  u32 version (=1)
///   config: u32 stages, u32 convs[stages], u32 channels[stages],
///           u32 in_channels, u32 out_channels, f64 bn_momentum, f64 bn_epsilon
///   u32 tensor count, then per tensor:
///           u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f64 payload
///
/// Network tensors come first in `Network::visit` order (running statistics
/// included), followed by "meta/epoch" and "meta/val_loss_class_0".."_6",
/// each a rank-1 tensor of length 1.
struct Checkpoint {
  Network net;
  std::size_t epoch = 0;
  std::array<double, kNumClasses> per_class_val_loss{};
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  const std::vector<std::uint8_t>& data() const { return buf_; }

private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::uint64_t uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(uint(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(uint(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  double f64(const char* what) { return std::bit_cast<double>(uint(8, what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(what + " at offset " + std::to_string(pos_));
  }

private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.data()) w.f64(v);
}

} // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes("FSEG");
  w.u32(kCheckpointVersion);
  const NetConfig& cfg = ck.net.config;
  w.u32(static_cast<std::uint32_t>(cfg.stages()));
  for (auto v : cfg.convs_per_stage) w.u32(static_cast<std::uint32_t>(v));
  for (auto v : cfg.channels_per_stage) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(cfg.in_channels));
  w.u32(static_cast<std::uint32_t>(cfg.out_channels));
  w.f64(cfg.bn_momentum);
  w.f64(cfg.bn_epsilon);

  std::uint32_t count = 0;
  Network::visit(ck.net, [&](const std::string&, const Tensor&, bool) { ++count; });
  w.u32(count + 1 + kNumClasses);
  Network::visit(ck.net, [&](const std::string& name, const Tensor& t, bool) { detail::write_tensor(w, name, t); });
  detail::write_tensor(w, "meta/epoch", Tensor::from({1}, {static_cast<double>(ck.epoch)}));
  for (std::size_t c = 0; c < kNumClasses; ++c)
    detail::write_tensor(w, "meta/val_loss_class_" + std::to_string(c), Tensor::from({1}, {ck.per_class_val_loss[c]}));
  return w.data();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4, "magic") != "FSEG") throw FormatError("bad magic at offset 0");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported version " + std::to_string(version) + " at offset 4");

  NetConfig cfg;
  const auto stages = r.u32("stage count");
  if (stages == 0 || stages > 16) r.fail("implausible stage count " + std::to_string(stages));
  cfg.convs_per_stage.clear();
  cfg.channels_per_stage.clear();
  for (std::uint32_t i = 0; i < stages; ++i) cfg.convs_per_stage.push_back(r.u32("convs_per_stage"));
  for (std::uint32_t i = 0; i < stages; ++i) cfg.channels_per_stage.push_back(r.u32("channels_per_stage"));
  cfg.in_channels = r.u32("in_channels");
  cfg.out_channels = r.u32("out_channels");
  cfg.bn_momentum = r.f64("bn_momentum");
  cfg.bn_epsilon = r.f64("bn_epsilon");
  if (cfg.out_channels != kNumClasses) r.fail("checkpoint must have " + std::to_string(kNumClasses) + " outputs");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config block (") + e.what() + ")");
  }

  Checkpoint ck;
  Prng unused(0);
  ck.net = build_network(cfg, unused);
  std::map<std::string, Tensor*> slots;
  Network::visit(ck.net, [&](const std::string& name, Tensor& t, bool) { slots[name] = &t; });
  Tensor epoch_t({1});
  slots["meta/epoch"] = &epoch_t;
  std::array<Tensor, kNumClasses> losses;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    losses[c] = Tensor({1});
    slots["meta/val_loss_class_" + std::to_string(c)] = &losses[c];
  }

  const auto count = r.u32("tensor count");
  if (count != slots.size())
    r.fail("expected " + std::to_string(slots.size()) + " tensors, header says " + std::to_string(count));
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u16("name length");
    const std::string name = r.str(name_len, "tensor name");
    auto it = slots.find(name);
    if (it == slots.end()) r.fail("unexpected tensor '" + name + "'");
    if (seen[name]) r.fail("duplicate tensor '" + name + "'");
    seen[name] = true;
    Tensor& dst = *it->second;
    const auto rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32("dim"));
    if (shape != dst.shape()) r.fail("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(dst.shape()));
    for (auto& v : dst.data()) v = r.f64("payload");
  }
  if (!r.done()) r.fail("trailing bytes");

  const double e = epoch_t[0];
  if (!(e >= 0.0) || e != std::floor(e)) throw FormatError("meta/epoch is not a count");
  ck.epoch = static_cast<std::size_t>(e);
  for (std::size_t c = 0; c < kNumClasses; ++c) ck.per_class_val_loss[c] = losses[c][0];
  return ck;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + std::string(e.what()).substr(14));
  }
}

} // namespace fundseg

#endif
