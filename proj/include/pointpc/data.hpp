#pragma once

// Synthetic shape generation, the viewpoint-crop partial protocol, cloud files and
// dataset manifests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointpc/errors.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/io.hpp"
#include "pointpc/random.hpp"

namespace pointpc::data {

enum class Family { sphere, box, cylinder, cone, torus, capsule };

inline const std::array<std::string, 6>& family_names() {
  static const std::array<std::string, 6> names{"sphere", "box", "cylinder", "cone", "torus", "capsule"};
  return names;
}

inline std::string to_string(Family f) { return family_names()[static_cast<std::size_t>(f)]; }

inline Family family_from_string(const std::string& name) {
  const auto& names = family_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<Family>(i);
  }
  throw ContractError("unknown shape family \"" + name + "\"");
}

/// Parametric surface plus pose. Parameter meaning by family:
///   sphere {radius}, box {x, y, z side lengths}, cylinder {radius, height},
///   cone {base radius, height}, torus {major radius, minor radius},
///   capsule {radius, straight-section length}.
struct ShapeSpec {
  Family family = Family::sphere;
  std::array<double, 3> params{1.0, 1.0, 1.0};
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> rotation{0.0, 0.0, 0.0};  // radians about x, y, z
  std::string category;
};

namespace detail {

inline void check_positive(const ShapeSpec& s, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    if (!(s.params[i] > 0.0) || !std::isfinite(s.params[i])) {
      throw ContractError("ShapeSpec(" + to_string(s.family) + "): parameter " + std::to_string(i) + " must be positive");
    }
  }
  for (double v : s.scale) {
    if (!(v > 0.0)) throw ContractError("ShapeSpec: scale factors must be positive");
  }
}

inline Point3 on_sphere(Rng& rng, double r) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * s * std::cos(phi), r * s * std::sin(phi), r * z};
}

/// Picks an index with probability proportional to weights.
inline std::size_t pick(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

}  // namespace detail

/// Samples n points uniformly by area on the un-posed parametric surface.
inline PointCloud sample_surface(const ShapeSpec& s, std::size_t n, Rng& rng) {
  require(n >= 1, "sample_surface: n_points must be at least 1");
  const double pi = std::numbers::pi;
  PointCloud out;
  out.points.reserve(n);
  switch (s.family) {
    case Family::sphere: {
      detail::check_positive(s, 1);
      for (std::size_t i = 0; i < n; ++i) out.points.push_back(detail::on_sphere(rng, s.params[0]));
      break;
    }
    case Family::box: {
      detail::check_positive(s, 3);
      const double a = s.params[0], b = s.params[1], c = s.params[2];
      // faces: +-x (b*c), +-y (a*c), +-z (a*b)
      const double areas[6] = {b * c, b * c, a * c, a * c, a * b, a * b};
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t f = detail::pick(rng, areas);
        const double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
        const double side = (f % 2 == 0) ? 0.5 : -0.5;
        switch (f / 2) {
          case 0: out.points.push_back({side * a, u * b, v * c}); break;
          case 1: out.points.push_back({u * a, side * b, v * c}); break;
          default: out.points.push_back({u * a, v * b, side * c}); break;
        }
      }
      break;
    }
    case Family::cylinder: {
      detail::check_positive(s, 2);
      const double r = s.params[0], h = s.params[1];
      const double areas[3] = {2 * pi * r * h, pi * r * r, pi * r * r};
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t f = detail::pick(rng, areas);
        const double phi = rng.uniform(0.0, 2 * pi);
        if (f == 0) {
          out.points.push_back({r * std::cos(phi), r * std::sin(phi), rng.uniform(-h / 2, h / 2)});
        } else {
          const double rad = r * std::sqrt(rng.uniform());
          out.points.push_back({rad * std::cos(phi), rad * std::sin(phi), f == 1 ? h / 2 : -h / 2});
        }
      }
      break;
    }
    case Family::cone: {
      detail::check_positive(s, 2);
      const double r = s.params[0], h = s.params[1];
      const double areas[2] = {pi * r * std::sqrt(r * r + h * h), pi * r * r};
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t f = detail::pick(rng, areas);
        const double phi = rng.uniform(0.0, 2 * pi);
        const double t = std::sqrt(rng.uniform());  // area grows linearly with distance from apex / centre
        if (f == 0) {
          out.points.push_back({t * r * std::cos(phi), t * r * std::sin(phi), h / 2 - t * h});
        } else {
          out.points.push_back({t * r * std::cos(phi), t * r * std::sin(phi), -h / 2});
        }
      }
      break;
    }
    case Family::torus: {
      detail::check_positive(s, 2);
      const double R = s.params[0], r = s.params[1];
      require(r < R, "sample_surface: torus minor radius must be below major radius");
      for (std::size_t i = 0; i < n; ++i) {
        double theta = 0.0;
        // tube angle density proportional to (R + r cos theta)
        do {
          theta = rng.uniform(0.0, 2 * pi);
        } while (rng.uniform() * (R + r) > R + r * std::cos(theta));
        const double phi = rng.uniform(0.0, 2 * pi);
        const double w = R + r * std::cos(theta);
        out.points.push_back({w * std::cos(phi), w * std::sin(phi), r * std::sin(theta)});
      }
      break;
    }
    case Family::capsule: {
      detail::check_positive(s, 2);
      const double r = s.params[0], h = s.params[1];
      const double areas[2] = {2 * pi * r * h, 4 * pi * r * r};
      for (std::size_t i = 0; i < n; ++i) {
        if (detail::pick(rng, areas) == 0) {
          const double phi = rng.uniform(0.0, 2 * pi);
          out.points.push_back({r * std::cos(phi), r * std::sin(phi), rng.uniform(-h / 2, h / 2)});
        } else {
          Point3 p = detail::on_sphere(rng, r);
          p[2] += p[2] >= 0.0 ? h / 2 : -h / 2;
          out.points.push_back(p);
        }
      }
      break;
    }
  }
  return out;
}

/// Centers the bounding box at the origin and scales the longest side to 1.
inline PointCloud normalize_to_unit_cube(PointCloud c) {
  require(!c.empty(), "normalize_to_unit_cube: empty cloud");
  Point3 lo = c[0], hi = c[0];
  for (const auto& p : c) {
    for (int d = 0; d < 3; ++d) {
      lo[d] = std::min(lo[d], p[d]);
      hi[d] = std::max(hi[d], p[d]);
    }
  }
  const double span = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  const double s = span > 0.0 ? 1.0 / span : 1.0;
  for (auto& p : c.points) {
    for (int d = 0; d < 3; ++d) p[d] = (p[d] - 0.5 * (lo[d] + hi[d])) * s;
  }
  return c;
}

inline Point3 rotate(const Point3& p, const std::array<double, 3>& angles) {
  Point3 q = p;
  const auto rot = [&q](int i, int j, double a) {
    const double c = std::cos(a), s = std::sin(a);
    const double qi = q[i], qj = q[j];
    q[i] = c * qi - s * qj;
    q[j] = s * qi + c * qj;
  };
  rot(1, 2, angles[0]);
  rot(2, 0, angles[1]);
  rot(0, 1, angles[2]);
  return q;
}

/// Complete cloud: area-uniform samples, posed, normalized into the unit cube and
/// rounded to float precision (the on-disk precision).
inline PointCloud generate_shape(const ShapeSpec& spec, std::size_t n_points, Rng& rng) {
  PointCloud c = sample_surface(spec, n_points, rng);
  for (auto& p : c.points) {
    for (int d = 0; d < 3; ++d) p[d] *= spec.scale[d];
    p = rotate(p, spec.rotation);
  }
  c = normalize_to_unit_cube(std::move(c));
  for (auto& p : c.points) {
    for (double& v : p) v = static_cast<double>(static_cast<float>(v));
  }
  return c;
}

/// Random member of a family: parameter ranges, anisotropic scale in [0.7, 1.3]
/// and rotations up to `max_rotation` radians per axis.
inline ShapeSpec random_spec(Family family, Rng& rng, double max_rotation = 0.35) {
  ShapeSpec s;
  s.family = family;
  s.category = to_string(family);
  switch (family) {
    case Family::sphere: s.params = {1.0, 0.0, 0.0}; break;
    case Family::box: s.params = {rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)}; break;
    case Family::cylinder: s.params = {rng.uniform(0.15, 0.5), rng.uniform(0.4, 1.2), 0.0}; break;
    case Family::cone: s.params = {rng.uniform(0.2, 0.6), rng.uniform(0.4, 1.2), 0.0}; break;
    case Family::torus: s.params = {rng.uniform(0.5, 0.8), rng.uniform(0.1, 0.35), 0.0}; break;
    case Family::capsule: s.params = {rng.uniform(0.15, 0.4), rng.uniform(0.3, 1.0), 0.0}; break;
  }
  for (double& v : s.scale) v = rng.uniform(0.7, 1.3);
  for (double& v : s.rotation) v = rng.uniform(-max_rotation, max_rotation);
  return s;
}

// ---------------------------------------------------------------------------
// Partial protocol

inline constexpr std::size_t kViewpointCount = 8;

/// Cube-corner directions (+-1, +-1, +-1)/sqrt(3). Index bits (x, y, z) from most to
/// least significant; a set bit means the negative sign.
inline Viewpoint fixed_viewpoint(std::size_t index) {
  require(index < kViewpointCount, "fixed_viewpoint: index " + std::to_string(index) + " not in [0, 8)");
  return Viewpoint({(index & 4) ? -1.0 : 1.0, (index & 2) ? -1.0 : 1.0, (index & 1) ? -1.0 : 1.0});
}

/// Crops to the `fraction` of points nearest the viewpoint, then FPS-downsamples
/// to partial_size (seeded at the first kept point).
inline PointCloud make_partial(const PointCloud& complete, std::size_t viewpoint_index, double fraction,
                               std::size_t partial_size) {
  require(fraction > 0.0 && fraction <= 1.0, "make_partial: fraction must lie in (0, 1]");
  const Viewpoint vp = fixed_viewpoint(viewpoint_index);
  const auto keep = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(complete.size())));
  require(keep >= partial_size && partial_size >= 1,
          "make_partial: crop keeps " + std::to_string(keep) + " points, fewer than partial size " +
              std::to_string(partial_size));
  return fps(viewpoint_crop(complete, vp, keep), partial_size, 0);
}

// ---------------------------------------------------------------------------
// Files

/// "NPC1", u32 count, f32 xyz triples, little-endian.
inline std::vector<char> encode_cloud(const PointCloud& c) {
  io::ByteWriter w;
  w.bytes("NPC1");
  w.u32(static_cast<std::uint32_t>(c.size()));
  for (const auto& p : c) {
    for (double v : p) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

inline PointCloud decode_cloud(std::vector<char> bytes, const std::string& context) {
  io::ByteReader r(std::move(bytes), context);
  r.expect_magic("NPC1");
  const std::uint32_t n = r.u32();
  if (n == 0) r.fail("cloud has zero points");
  if (r.remaining() != std::size_t{n} * 12) r.fail("expected " + std::to_string(n) + " points, size does not match");
  PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points) {
    for (double& v : p) v = r.f32();
  }
  return c;
}

inline void write_cloud(const std::filesystem::path& path, const PointCloud& c) { io::write_file(path, encode_cloud(c)); }

inline PointCloud read_cloud(const std::filesystem::path& path) { return decode_cloud(io::read_file(path), path.string()); }

/// Plain-text export, one "x y z" line per point.
inline void write_xyz(const std::filesystem::path& path, const PointCloud& c) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& p : c) os << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  io::write_text(path, os.str());
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetConfig {
  std::vector<std::string> categories{"box", "cone", "torus"};
  std::size_t samples_per_category = 80;
  std::size_t complete_points = 512;
  std::size_t partial_points = 128;
  double train_fraction = 0.8;
  double max_rotation = 0.35;
  std::uint64_t seed = 7;
};

struct Sample {
  std::string id;
  std::string category;
  PointCloud complete;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Sample> samples;
  std::vector<std::size_t> train;  // indices into samples
  std::vector<std::size_t> test;
};

/// Deterministic in-memory generation; each sample has its own seeded stream.
inline Dataset generate_dataset(const DatasetConfig& cfg) {
  require(!cfg.categories.empty() && cfg.samples_per_category >= 1, "generate_dataset: empty configuration");
  require(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0, "generate_dataset: train_fraction must lie in (0, 1)");
  Dataset ds;
  ds.config = cfg;
  for (std::size_t c = 0; c < cfg.categories.size(); ++c) {
    const Family family = family_from_string(cfg.categories[c]);
    Rng split_rng = Rng::stream(cfg.seed, 1'000'000 + c);
    std::vector<std::size_t> order(cfg.samples_per_category);
    for (std::size_t s = 0; s < order.size(); ++s) order[s] = s;
    split_rng.shuffle(order);
    const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(order.size())));
    std::vector<bool> is_train(order.size(), false);
    for (std::size_t k = 0; k < n_train; ++k) is_train[order[k]] = true;
    for (std::size_t s = 0; s < cfg.samples_per_category; ++s) {
      Rng rng = Rng::stream(cfg.seed, c * 100'000 + s);
      const ShapeSpec spec = random_spec(family, rng, cfg.max_rotation);
      std::ostringstream id;
      id << cfg.categories[c] << '_' << std::setw(4) << std::setfill('0') << s;
      (is_train[s] ? ds.train : ds.test).push_back(ds.samples.size());
      ds.samples.push_back({id.str(), cfg.categories[c], generate_shape(spec, cfg.complete_points, rng)});
    }
  }
  return ds;
}

inline nlohmann::json config_to_json(const DatasetConfig& c) {
  return {{"categories", c.categories},         {"samples_per_category", c.samples_per_category},
          {"complete_points", c.complete_points}, {"partial_points", c.partial_points},
          {"train_fraction", c.train_fraction},   {"max_rotation", c.max_rotation},
          {"seed", c.seed}};
}

inline constexpr int kManifestVersion = 1;

/// Writes clouds/<id>.npc for every sample and manifest.json into `dir`.
inline nlohmann::json build_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir) {
  const Dataset ds = generate_dataset(cfg);
  nlohmann::json manifest;
  manifest["version"] = kManifestVersion;
  manifest["generator"] = config_to_json(cfg);
  nlohmann::json viewpoints = nlohmann::json::array();
  for (std::size_t v = 0; v < kViewpointCount; ++v) {
    const auto& d = fixed_viewpoint(v).direction();
    viewpoints.push_back({d[0], d[1], d[2]});
  }
  manifest["protocol"] = {{"viewpoints", viewpoints},
                          {"eval_fractions", {0.75, 0.5, 0.25}},
                          {"complete_points", cfg.complete_points},
                          {"partial_points", cfg.partial_points}};
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const std::string file = "clouds/" + s.id + ".npc";
    write_cloud(dir / file, s.complete);
    samples.push_back({{"id", s.id}, {"category", s.category}, {"file", file}});
  }
  manifest["samples"] = samples;
  nlohmann::json train = nlohmann::json::array(), test = nlohmann::json::array();
  for (std::size_t i : ds.train) train.push_back(ds.samples[i].id);
  for (std::size_t i : ds.test) test.push_back(ds.samples[i].id);
  manifest["train"] = train;
  manifest["test"] = test;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

/// Loads a dataset written by build_dataset; every referenced file must exist.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("dataset manifest not found: " + path.string());
  nlohmann::json m;
  try {
    const std::vector<char> bytes = io::read_file(path);
    m = nlohmann::json::parse(std::string(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  try {
    if (m.at("version").get<int>() != kManifestVersion) throw FormatError(path.string() + ": unsupported manifest version");
    Dataset ds;
    const auto& g = m.at("generator");
    ds.config.categories = g.at("categories").get<std::vector<std::string>>();
    ds.config.samples_per_category = g.at("samples_per_category").get<std::size_t>();
    ds.config.complete_points = g.at("complete_points").get<std::size_t>();
    ds.config.partial_points = g.at("partial_points").get<std::size_t>();
    ds.config.train_fraction = g.at("train_fraction").get<double>();
    ds.config.max_rotation = g.at("max_rotation").get<double>();
    ds.config.seed = g.at("seed").get<std::uint64_t>();
    std::map<std::string, std::size_t> index;
    for (const auto& s : m.at("samples")) {
      const auto file = dir / s.at("file").get<std::string>();
      if (!std::filesystem::exists(file)) throw IoError("dataset file missing: " + file.string());
      index[s.at("id").get<std::string>()] = ds.samples.size();
      ds.samples.push_back({s.at("id").get<std::string>(), s.at("category").get<std::string>(), read_cloud(file)});
    }
    const auto resolve = [&](const nlohmann::json& ids, std::vector<std::size_t>& out) {
      for (const auto& id : ids) {
        const auto it = index.find(id.get<std::string>());
        if (it == index.end()) throw FormatError(path.string() + ": split references unknown sample " + id.dump());
        out.push_back(it->second);
      }
    };
    resolve(m.at("train"), ds.train);
    resolve(m.at("test"), ds.test);
    std::vector<bool> in_train(ds.samples.size(), false);
    for (std::size_t i : ds.train) in_train[i] = true;
    for (std::size_t i : ds.test) {
      if (in_train[i]) throw FormatError(path.string() + ": sample " + ds.samples[i].id + " is in both splits");
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace pointpc::data
