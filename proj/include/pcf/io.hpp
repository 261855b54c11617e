#pragma once

// Binary cloud files, the plain-text run config and weight checkpoints.
// All binary fields are little-endian regardless of the host.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pcf/errors.hpp"
#include "pcf/geometry.hpp"
#include "pcf/network.hpp"
#include "pcf/training.hpp"

namespace pcf {

namespace io_detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(data_[pos_++])} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<std::uint8_t>(data_[pos_++])} << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    const auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& what() const { return what_; }

  /// Fails early when a declared payload cannot fit, before allocating it.
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) {
      throw IoError(detail::concat(what_, ": truncated at byte offset ", pos_, " (needed ", n,
                                   " more bytes, ", data_.size() - pos_, " available)"));
    }
  }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void dump(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Cloud files

inline constexpr std::string_view kCloudMagic = "PCF1";
inline constexpr std::uint32_t kCloudVersion = 1;

/// Positions and features are stored as f32; labels as u32.
inline std::string encode_cloud(const PointCloud& cloud) {
  io_detail::ByteWriter w;
  w.bytes(kCloudMagic);
  w.u32(kCloudVersion);
  w.u32(static_cast<std::uint32_t>(cloud.size()));
  w.u32(static_cast<std::uint32_t>(cloud.channels));
  w.u8(cloud.has_labels() ? 1 : 0);
  for (const auto& p : cloud.positions)
    for (double v : p) w.f32(static_cast<float>(v));
  for (double v : cloud.features) w.f32(static_cast<float>(v));
  for (int y : cloud.labels) {
    if (y < 0) throw IndexError(detail::concat("negative label ", y, " cannot be stored"));
    w.u32(static_cast<std::uint32_t>(y));
  }
  return w.take();
}

inline PointCloud decode_cloud(std::string_view bytes, const std::string& what = "cloud file") {
  io_detail::ByteReader r(bytes, what);
  if (r.bytes(4) != kCloudMagic) throw IoError(what + ": bad magic (expected PCF1)");
  const std::uint32_t version = r.u32();
  if (version != kCloudVersion) {
    throw VersionError(detail::concat(what, ": cloud format version ", version, ", this build reads ",
                                      kCloudVersion));
  }
  const std::uint64_t n = r.u32(), c = r.u32();
  const std::uint8_t has_labels = r.u8();
  if (has_labels > 1) throw IoError(detail::concat(what, ": has_labels byte is ", int{has_labels}));
  r.need(n * (3 + c) * 4 + (has_labels ? n * 4 : 0));
  std::vector<Vec3> pos(n);
  for (auto& p : pos)
    for (double& v : p) v = r.f32();
  std::vector<double> feats(n * c);
  for (double& v : feats) v = r.f32();
  std::vector<int> labels;
  if (has_labels) {
    labels.resize(n);
    for (int& y : labels) {
      const std::uint32_t v = r.u32();
      if (v > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
        throw IoError(detail::concat(what, ": label ", v, " out of range"));
      }
      y = static_cast<int>(v);
    }
  }
  if (!r.at_end()) {
    throw IoError(detail::concat(what, ": ", bytes.size() - r.offset(), " trailing bytes after offset ",
                                 r.offset()));
  }
  return PointCloud(std::move(pos), std::move(feats), c, std::move(labels));
}

inline void write_cloud(const std::string& path, const PointCloud& cloud) {
  io_detail::dump(path, encode_cloud(cloud));
}

inline PointCloud read_cloud(const std::string& path) {
  return decode_cloud(io_detail::slurp(path), path);
}

/// The cloud as it reads back from disk.
inline PointCloud quantize_f32(const PointCloud& cloud) {
  // Written out of the const source: the in-place range-for over std::array
  // left the final point unrounded under g++ 11 -O3 -march=native.
  const auto f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  PointCloud out = cloud;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t a = 0; a < 3; ++a) out.positions[i][a] = f32(cloud.positions[i][a]);
  }
  std::transform(cloud.features.begin(), cloud.features.end(), out.features.begin(), f32);
  return out;
}

// ---------------------------------------------------------------------------
// Run config

inline constexpr std::uint32_t kConfigVersion = 1;

struct RunConfig {
  NetConfig net;
  TrainConfig train;
};

namespace io_detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

struct Field {
  std::string_view key;
  std::string_view value;
  std::size_t line;

  [[noreturn]] void fail(std::string_view expected) const {
    throw ConfigError(detail::concat("config line ", line, ": key '", key, "' expects ", expected,
                                     ", got '", value, "'"));
  }

  std::size_t count() const {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) fail("a non-negative integer");
    return v;
  }
  std::uint64_t u64() const {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) fail("a non-negative integer");
    return v;
  }
  double real() const {
    double v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size() || !std::isfinite(v)) fail("a number");
    return v;
  }
  bool flag() const {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail("true or false");
  }
  template <class T, class F>
  std::vector<T> list(F item) const {
    std::vector<T> out;
    std::string_view rest = value;
    while (true) {
      const auto comma = rest.find(',');
      Field f{key, trim(rest.substr(0, comma)), line};
      if (f.value.empty()) fail("a comma-separated list");
      out.push_back(item(f));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    return out;
  }
};

}  // namespace io_detail

inline const std::vector<std::string_view>& config_required_keys() {
  static const std::vector<std::string_view> keys{"variant", "num_classes", "epochs"};
  return keys;
}

/// `key = value` lines, `#` starts a comment. Unknown or repeated keys are
/// errors; variant, num_classes and epochs must be present.
inline RunConfig parse_config(std::string_view text) {
  using io_detail::Field;
  RunConfig cfg;
  std::map<std::string, std::size_t, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = io_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(detail::concat("config line ", line_no, ": expected 'key = value', got '", line, "'"));
    }
    const Field f{io_detail::trim(line.substr(0, eq)), io_detail::trim(line.substr(eq + 1)), line_no};
    if (auto [it, fresh] = seen.emplace(std::string(f.key), line_no); !fresh) {
      throw ConfigError(detail::concat("config line ", line_no, ": key '", f.key,
                                       "' already set on line ", it->second));
    }
    NetConfig& n = cfg.net;
    TrainConfig& t = cfg.train;
    const auto& k = f.key;
    if (k == "version") {
      const auto v = f.u64();
      if (v != kConfigVersion) {
        throw VersionError(detail::concat("config version ", v, ", this build reads ", kConfigVersion));
      }
    } else if (k == "variant") {
      n.variant = parse_variant(f.value);
    } else if (k == "activation") {
      n.activation = parse_activation(f.value);
    } else if (k == "in_channels") {
      n.in_channels = f.count();
    } else if (k == "num_classes") {
      n.num_classes = f.count();
    } else if (k == "levels") {
      n.levels = f.count();
    } else if (k == "base_width") {
      n.base_width = f.count();
    } else if (k == "base_grid") {
      n.base_grid = f.real();
    } else if (k == "blocks_per_level") {
      n.blocks_per_level = f.list<std::size_t>([](const Field& x) { return x.count(); });
    } else if (k == "k") {
      n.k = f.count();
    } else if (k == "heads") {
      n.heads = f.count();
    } else if (k == "c_mid") {
      n.c_mid = f.count();
    } else if (k == "psi_depth") {
      n.psi_depth = f.count();
    } else if (k == "bottleneck_ratio") {
      n.bottleneck_ratio = f.real();
    } else if (k == "disable_conv") {
      n.disable_conv = f.flag();
    } else if (k == "use_norm") {
      n.use_norm = f.flag();
    } else if (k == "post_relu") {
      n.post_relu = f.flag();
    } else if (k == "epochs") {
      t.epochs = f.count();
    } else if (k == "initial_lr") {
      t.initial_lr = f.real();
    } else if (k == "decay_factor") {
      t.decay_factor = f.real();
    } else if (k == "decay_every") {
      t.decay_every = f.count();
    } else if (k == "weight_decay") {
      t.weight_decay = f.real();
    } else if (k == "seed") {
      t.seed = f.u64();
    } else if (k == "class_weights") {
      t.class_weights.clear();
      if (f.value != "auto") t.class_weights = f.list<double>([](const Field& x) { return x.real(); });
    } else {
      throw ConfigError(detail::concat("config line ", line_no, ": unknown key '", k, "'"));
    }
  }
  for (auto key : config_required_keys()) {
    if (!seen.contains(key)) throw ConfigError(detail::concat("config is missing required key '", key, "'"));
  }
  cfg.net.validate();
  if (!cfg.train.class_weights.empty() && cfg.train.class_weights.size() != cfg.net.num_classes) {
    throw ConfigError(detail::concat("class_weights has ", cfg.train.class_weights.size(),
                                     " entries for ", cfg.net.num_classes, " classes"));
  }
  return cfg;
}

/// Every key with its resolved value; parses back to the same config.
inline std::string config_to_text(const RunConfig& cfg) {
  using io_detail::fmt;
  const NetConfig& n = cfg.net;
  const TrainConfig& t = cfg.train;
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream os;
  os << "version = " << kConfigVersion << '\n'
     << "variant = " << to_string(n.variant) << '\n'
     << "activation = " << to_string(n.activation) << '\n'
     << "in_channels = " << n.in_channels << '\n'
     << "num_classes = " << n.num_classes << '\n'
     << "levels = " << n.levels << '\n'
     << "base_width = " << n.base_width << '\n'
     << "base_grid = " << fmt(n.base_grid) << '\n'
     << "blocks_per_level = " << io_detail::join(n.blocks_per_level) << '\n'
     << "k = " << n.k << '\n'
     << "heads = " << n.heads << '\n'
     << "c_mid = " << n.c_mid << '\n'
     << "psi_depth = " << n.psi_depth << '\n'
     << "bottleneck_ratio = " << fmt(n.bottleneck_ratio) << '\n'
     << "disable_conv = " << b(n.disable_conv) << '\n'
     << "use_norm = " << b(n.use_norm) << '\n'
     << "post_relu = " << b(n.post_relu) << '\n'
     << "epochs = " << t.epochs << '\n'
     << "initial_lr = " << fmt(t.initial_lr) << '\n'
     << "decay_factor = " << fmt(t.decay_factor) << '\n'
     << "decay_every = " << t.decay_every << '\n'
     << "weight_decay = " << fmt(t.weight_decay) << '\n'
     << "seed = " << t.seed << '\n'
     << "class_weights = " << (t.class_weights.empty() ? "auto" : io_detail::join(t.class_weights)) << '\n';
  return os.str();
}

inline RunConfig read_config(const std::string& path) { return parse_config(io_detail::slurp(path)); }

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::string_view kCheckpointMagic = "PCFW";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  UNet net;
};

/// Magic, version, the resolved config text, then each named tensor (name,
/// rank, dims, f64 values) in the network's canonical order.
inline std::string encode_checkpoint(const UNet& net, const RunConfig& cfg) {
  io_detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const std::string text = config_to_text(cfg);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  const auto tensors = net.named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    w.u32(static_cast<std::uint32_t>(nt.name.size()));
    w.bytes(nt.name);
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) w.u64(d);
    for (double v : nt.tensor.data()) w.f64(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  io_detail::ByteReader r(bytes, what);
  if (r.bytes(4) != kCheckpointMagic) throw IoError(what + ": bad magic (expected PCFW)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(detail::concat(what, ": checkpoint version ", version, ", this build reads ",
                                      kCheckpointVersion));
  }
  const std::uint32_t text_len = r.u32();
  Checkpoint ck{parse_config(r.bytes(text_len)), {}};
  Rng rng(0);
  ck.net = UNet::create(ck.config.net, rng);
  auto tensors = ck.net.named_tensors();
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) {
    throw IoError(detail::concat(what, ": holds ", count, " tensors, the embedded config builds ",
                                 tensors.size()));
  }
  for (auto& nt : tensors) {
    const std::uint32_t name_len = r.u32();
    const std::string_view name = r.bytes(name_len);
    if (name != nt.name) {
      throw IoError(detail::concat(what, ": expected tensor '", nt.name, "', found '", name, "'"));
    }
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != nt.tensor.shape()) {
      throw IoError(detail::concat(what, ": tensor '", name, "' has shape ", shape_str(shape),
                                   ", config expects ", shape_str(nt.tensor.shape())));
    }
    r.need(nt.tensor.numel() * 8);
    for (double& v : nt.tensor.mutable_data()) v = r.f64();
  }
  if (!r.at_end()) throw IoError(detail::concat(what, ": trailing bytes after offset ", r.offset()));
  return ck;
}

inline void save_checkpoint(const std::string& path, const UNet& net, const RunConfig& cfg) {
  io_detail::dump(path, encode_checkpoint(net, cfg));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io_detail::slurp(path), path);
}

}  // namespace pcf
