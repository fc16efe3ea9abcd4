#pragma once

// Trainable networks: a shared-MLP point encoder with max pooling, and a decoder
// that maps a fused feature to coarse centers plus a dense expansion around them.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointpc/errors.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/io.hpp"
#include "pointpc/ndcore.hpp"
#include "pointpc/random.hpp"

namespace pointpc::models {

struct NamedArray {
  std::string name;
  nd::Array value;
  bool operator==(const NamedArray&) const = default;
};

/// Ordered collection of named parameter arrays.
class Parameters {
 public:
  void add(std::string name, nd::Array value) { items_.push_back({std::move(name), std::move(value)}); }

  std::size_t count() const { return items_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& it : items_) n += it.value.size();
    return n;
  }
  const std::vector<NamedArray>& items() const { return items_; }
  std::vector<NamedArray>& items() { return items_; }
  const nd::Array& operator[](std::size_t i) const { return items_[i].value; }
  nd::Array& operator[](std::size_t i) { return items_[i].value; }

  /// Places every array on the tape, as leaves when trainable, else as constants.
  std::vector<nd::Var> bind(nd::Tape& tape, bool trainable) const {
    std::vector<nd::Var> out;
    out.reserve(items_.size());
    for (const auto& it : items_) out.push_back(trainable ? tape.leaf(it.value) : tape.constant(it.value));
    return out;
  }

  /// Flattens every parameter into one vector (order of items, row-major).
  nd::Array flatten() const {
    std::vector<double> flat;
    flat.reserve(scalar_count());
    for (const auto& it : items_) flat.insert(flat.end(), it.value.data().begin(), it.value.data().end());
    return nd::Array::vector(std::move(flat));
  }

  /// Slices a flat variable back into per-parameter views on its tape.
  std::vector<nd::Var> unflatten(const nd::Var& flat) const {
    std::vector<nd::Var> out;
    std::size_t offset = 0;
    for (const auto& it : items_) {
      out.push_back(nd::slice(flat, offset, it.value.shape()));
      offset += it.value.size();
    }
    return out;
  }

  bool operator==(const Parameters&) const = default;

 private:
  std::vector<NamedArray> items_;
};

inline nd::Array uniform_init(nd::Shape shape, std::size_t fan_in, Rng& rng) {
  nd::Array out(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : out.data()) v = rng.uniform(-bound, bound);
  return out;
}

/// y = x W + b on rows of x.
inline nd::Var linear(const nd::Var& x, const nd::Var& w, const nd::Var& b) {
  return nd::add_bias(nd::matmul(x, w), b);
}

struct EncoderConfig {
  std::size_t hidden = 64;
  std::size_t feature_dim = 48;
};

/// Per-point MLP 3 -> h -> h -> C followed by max pooling over points.
class PointEncoder {
 public:
  PointEncoder() = default;

  static PointEncoder initialize(const EncoderConfig& cfg, Rng& rng) {
    PointEncoder e;
    e.cfg_ = cfg;
    const std::size_t dims[4] = {3, cfg.hidden, cfg.hidden, cfg.feature_dim};
    for (std::size_t l = 0; l < 3; ++l) {
      e.params_.add("w" + std::to_string(l + 1), uniform_init({dims[l], dims[l + 1]}, dims[l], rng));
      e.params_.add("b" + std::to_string(l + 1), uniform_init({dims[l + 1]}, dims[l], rng));
    }
    return e;
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t feature_dim() const { return cfg_.feature_dim; }
  const Parameters& params() const { return params_; }
  Parameters& params() { return params_; }

  /// Feature of a [n x 3] cloud variable given bound parameters.
  nd::Var forward(std::span<const nd::Var> p, const nd::Var& cloud) const {
    if (cloud.value().rank() != 2 || cloud.value().extent(1) != 3 || cloud.value().extent(0) == 0) {
      throw ContractError("encode: expected non-empty [n x 3] cloud, got " + nd::shape_string(cloud.shape()));
    }
    nd::Var h = nd::relu(linear(cloud, p[0], p[1]));
    h = nd::relu(linear(h, p[2], p[3]));
    h = linear(h, p[4], p[5]);
    return nd::max(h, 0);
  }

  nd::Var forward(nd::Tape& tape, std::span<const nd::Var> p, const PointCloud& cloud) const {
    if (cloud.empty()) throw ContractError("encode: empty point cloud");
    return forward(p, tape.constant(cloud.to_array()));
  }

  /// Forward-only feature.
  std::vector<double> encode(const PointCloud& cloud) const {
    nd::Tape tape;
    const auto p = params_.bind(tape, false);
    const nd::Var f = forward(tape, p, cloud);
    return f.value().values();
  }

 private:
  EncoderConfig cfg_;
  Parameters params_;
};

inline std::vector<double> encode(const PointEncoder& encoder, const PointCloud& cloud) { return encoder.encode(cloud); }

struct DecoderConfig {
  std::size_t input_dim = 192;
  std::size_t hidden = 256;
  std::size_t centers = 64;
  std::size_t expansion = 8;
};

struct DecodeOutput {
  nd::Var centers;  // [K x 3]
  nd::Var dense;    // [K*e x 3]
};

/// fused -> relu(h) -> relu(h) -> {centers [K x 3], offsets [K*e x 3]};
/// dense = each center repeated e times plus its offsets.
class Decoder {
 public:
  Decoder() = default;

  static Decoder initialize(const DecoderConfig& cfg, Rng& rng) {
    Decoder d;
    d.cfg_ = cfg;
    d.params_.add("w1", uniform_init({cfg.input_dim, cfg.hidden}, cfg.input_dim, rng));
    d.params_.add("b1", uniform_init({cfg.hidden}, cfg.input_dim, rng));
    d.params_.add("w2", uniform_init({cfg.hidden, cfg.hidden}, cfg.hidden, rng));
    d.params_.add("b2", uniform_init({cfg.hidden}, cfg.hidden, rng));
    d.params_.add("w_centers", uniform_init({cfg.hidden, cfg.centers * 3}, cfg.hidden, rng));
    d.params_.add("b_centers", uniform_init({cfg.centers * 3}, cfg.hidden, rng));
    d.params_.add("w_offsets", uniform_init({cfg.hidden, cfg.centers * cfg.expansion * 3}, cfg.hidden, rng));
    d.params_.add("b_offsets", uniform_init({cfg.centers * cfg.expansion * 3}, cfg.hidden, rng));
    return d;
  }

  const DecoderConfig& config() const { return cfg_; }
  std::size_t dense_size() const { return cfg_.centers * cfg_.expansion; }
  const Parameters& params() const { return params_; }
  Parameters& params() { return params_; }

  DecodeOutput forward(std::span<const nd::Var> p, const nd::Var& fused) const {
    if (fused.value().size() != cfg_.input_dim) {
      throw ContractError("decode: fused feature has length " + std::to_string(fused.value().size()) +
                          ", decoder expects " + std::to_string(cfg_.input_dim));
    }
    nd::Var x = nd::reshape(fused, {1, cfg_.input_dim});
    nd::Var h = nd::relu(linear(x, p[0], p[1]));
    h = nd::relu(linear(h, p[2], p[3]));
    nd::Var centers = nd::reshape(linear(h, p[4], p[5]), {cfg_.centers, 3});
    nd::Var offsets = nd::reshape(linear(h, p[6], p[7]), {cfg_.centers * cfg_.expansion, 3});
    nd::Var dense = nd::add(nd::repeat_rows(centers, cfg_.expansion), offsets);
    return {centers, dense};
  }

  /// Forward-only decode of a plain feature vector.
  std::pair<PointCloud, PointCloud> decode(std::span<const double> fused) const {
    nd::Tape tape;
    const auto p = params_.bind(tape, false);
    const auto out = forward(p, tape.constant(nd::Array::vector({fused.begin(), fused.end()})));
    return {PointCloud::from_array(out.centers.value()), PointCloud::from_array(out.dense.value())};
  }

 private:
  DecoderConfig cfg_;
  Parameters params_;
};

// ---------------------------------------------------------------------------
// Optimization

/// Step decay: base * factor^(floor(epoch / every)).
struct LearningRateSchedule {
  double base = 0.01;
  double decay = 0.76;
  std::size_t every = 20;

  double at(std::size_t epoch) const {
    return base * std::pow(decay, static_cast<double>(epoch / std::max<std::size_t>(every, 1)));
  }
};

/// SGD with classical momentum: v <- mu v + g; p <- p - lr v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(Parameters& params, std::span<const nd::Array> grads, double lr) {
    if (grads.size() != params.count()) throw ContractError("SgdMomentum::step: gradient count mismatch");
    if (velocity_.size() != params.count()) {
      velocity_.clear();
      for (const auto& it : params.items()) velocity_.emplace_back(it.value.shape(), 0.0);
    }
    for (std::size_t i = 0; i < params.count(); ++i) {
      nd::Array& p = params[i];
      nd::Array& v = velocity_[i];
      const nd::Array& g = grads[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        p[k] -= lr * v[k];
      }
    }
  }

 private:
  double momentum_;
  std::vector<nd::Array> velocity_;
};

// ---------------------------------------------------------------------------
// Weights file: "PPCW", u16 version, then until EOF: u16 name length, name,
// u8 rank, u32 extents, f64 payload. Little-endian throughout.

inline constexpr std::uint16_t kWeightsVersion = 1;

inline std::vector<char> encode_weights(std::span<const NamedArray> arrays) {
  io::ByteWriter w;
  w.bytes("PPCW");
  w.u16(kWeightsVersion);
  for (const auto& a : arrays) {
    w.u16(static_cast<std::uint16_t>(a.name.size()));
    w.bytes(a.name);
    w.u8(static_cast<std::uint8_t>(a.value.rank()));
    for (std::size_t e : a.value.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : a.value.data()) w.f64(v);
  }
  return w.buffer();
}

inline std::vector<NamedArray> decode_weights(std::vector<char> bytes, const std::string& context) {
  io::ByteReader r(std::move(bytes), context);
  r.expect_magic("PPCW");
  const std::uint16_t version = r.u16();
  if (version != kWeightsVersion) r.fail("unsupported weights version " + std::to_string(version));
  std::vector<NamedArray> out;
  while (!r.at_end()) {
    NamedArray a;
    a.name = r.bytes(r.u16());
    const std::uint8_t rank = r.u8();
    nd::Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    std::vector<double> data(nd::element_count(shape));
    if (r.remaining() < data.size() * 8) r.fail("truncated payload for array \"" + a.name + "\"");
    for (double& v : data) v = r.f64();
    a.value = nd::Array(std::move(shape), std::move(data));
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_weights(const std::filesystem::path& path, std::span<const NamedArray> arrays) {
  io::write_file(path, encode_weights(arrays));
}

inline std::vector<NamedArray> load_weights(const std::filesystem::path& path) {
  return decode_weights(io::read_file(path), path.string());
}

/// Copies arrays named prefix + name into `params`, checking every shape.
inline void assign_named(Parameters& params, const std::string& prefix, std::span<const NamedArray> loaded,
                         const std::string& context) {
  std::map<std::string, const nd::Array*> by_name;
  for (const auto& a : loaded) by_name[a.name] = &a.value;
  for (auto& it : params.items()) {
    const std::string full = prefix + it.name;
    const auto found = by_name.find(full);
    if (found == by_name.end()) throw FormatError(context + ": missing array \"" + full + "\"");
    if (found->second->shape() != it.value.shape()) {
      throw FormatError(context + ": array \"" + full + "\" has shape " + nd::shape_string(found->second->shape()) +
                        ", expected " + nd::shape_string(it.value.shape()));
    }
    it.value = *found->second;
  }
}

inline void append_named(std::vector<NamedArray>& out, const std::string& prefix, const Parameters& params) {
  for (const auto& it : params.items()) out.push_back({prefix + it.name, it.value});
}

/// The three networks of the completion model.
struct CompletionModel {
  PointEncoder partial_encoder;   // E_K
  PointEncoder complete_encoder;  // E_V
  Decoder decoder;

  static CompletionModel initialize(const EncoderConfig& enc, const DecoderConfig& dec, std::uint64_t seed) {
    Rng rk = Rng::stream(seed, 1), rv = Rng::stream(seed, 2), rd = Rng::stream(seed, 3);
    return {PointEncoder::initialize(enc, rk), PointEncoder::initialize(enc, rv), Decoder::initialize(dec, rd)};
  }

  std::vector<NamedArray> named_arrays() const {
    std::vector<NamedArray> out;
    append_named(out, "partial_encoder.", partial_encoder.params());
    append_named(out, "complete_encoder.", complete_encoder.params());
    append_named(out, "decoder.", decoder.params());
    return out;
  }

  void save(const std::filesystem::path& path) const { save_weights(path, named_arrays()); }

  /// Loads into an already-shaped model; any missing or mis-shaped array is a FormatError.
  void load(const std::filesystem::path& path) {
    const auto loaded = load_weights(path);
    assign_named(partial_encoder.params(), "partial_encoder.", loaded, path.string());
    assign_named(complete_encoder.params(), "complete_encoder.", loaded, path.string());
    assign_named(decoder.params(), "decoder.", loaded, path.string());
  }
};

}  // namespace pointpc::models
