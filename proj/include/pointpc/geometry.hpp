#pragma once

// Point-cloud kernels: nearest neighbours, Chamfer variants, sampling, cropping
// and the evaluation metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointpc/errors.hpp"
#include "pointpc/ndcore.hpp"

namespace pointpc {

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Point3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Point3& operator[](std::size_t i) const { return points[i]; }
  Point3& operator[](std::size_t i) { return points[i]; }
  auto begin() const { return points.begin(); }
  auto end() const { return points.end(); }

  nd::Array to_array() const {
    std::vector<double> data;
    data.reserve(points.size() * 3);
    for (const auto& p : points) data.insert(data.end(), p.begin(), p.end());
    return nd::Array(nd::Shape{points.size(), 3}, std::move(data));
  }

  static PointCloud from_array(const nd::Array& a) {
    if (a.rank() != 2 || a.extent(1) != 3) {
      throw ContractError("PointCloud::from_array: expected [n x 3], got " + nd::shape_string(a.shape()));
    }
    PointCloud out;
    out.points.resize(a.extent(0));
    for (std::size_t i = 0; i < out.size(); ++i) out.points[i] = {a[3 * i], a[3 * i + 1], a[3 * i + 2]};
    return out;
  }

  bool operator==(const PointCloud&) const = default;
};

/// A viewing direction; its crop anchor sits at radius 2, outside the unit cube.
class Viewpoint {
 public:
  static constexpr double kAnchorRadius = 2.0;

  explicit Viewpoint(Point3 direction) {
    const double n = std::sqrt(direction[0] * direction[0] + direction[1] * direction[1] + direction[2] * direction[2]);
    if (!(n > 0.0)) throw DomainError("Viewpoint: zero direction");
    for (auto& c : direction) c /= n;
    direction_ = direction;
  }

  const Point3& direction() const { return direction_; }
  Point3 anchor() const {
    return {direction_[0] * kAnchorRadius, direction_[1] * kAnchorRadius, direction_[2] * kAnchorRadius};
  }

 private:
  Point3 direction_{};
};

enum class Norm { squared_l2, l1 };

inline double distance(const Point3& a, const Point3& b, Norm norm) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  if (norm == Norm::l1) return std::abs(dx) + std::abs(dy) + std::abs(dz);
  return dx * dx + dy * dy + dz * dz;
}

struct Neighbor {
  std::size_t index = 0;
  double distance = std::numeric_limits<double>::infinity();
};

/// Exact nearest-neighbour search over a fixed cloud. Exhaustive scan for small
/// clouds, uniform grid with expanding shells otherwise. Ties resolve to the lowest
/// index in both modes, so results never depend on the mode chosen.
class NeighborIndex {
 public:
  static constexpr std::size_t kGridThreshold = 512;

  explicit NeighborIndex(const PointCloud& cloud) : cloud_(&cloud) {
    if (cloud.size() >= kGridThreshold) build_grid();
  }

  bool uses_grid() const { return !cells_.empty(); }

  Neighbor nearest(const Point3& q, Norm norm) const {
    if (!uses_grid()) return scan(q, norm);
    std::array<long, 3> home{};
    for (int d = 0; d < 3; ++d) home[d] = cell_coord(q[d], d);
    Neighbor best;
    const long max_ring = std::max({res_[0], res_[1], res_[2]});
    for (long r = 0; r <= max_ring; ++r) {
      for (long dx = -r; dx <= r; ++dx) {
        const long cx = home[0] + dx;
        if (cx < 0 || cx >= res_[0]) continue;
        for (long dy = -r; dy <= r; ++dy) {
          const long cy = home[1] + dy;
          if (cy < 0 || cy >= res_[1]) continue;
          for (long dz = -r; dz <= r; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            const long cz = home[2] + dz;
            if (cz < 0 || cz >= res_[2]) continue;
            const std::size_t c = static_cast<std::size_t>((cx * res_[1] + cy) * res_[2] + cz);
            for (std::size_t k = starts_[c]; k < starts_[c + 1]; ++k) consider(q, cells_[k], norm, best);
          }
        }
      }
      // Any point outside shell r is at least r * cell away along some axis.
      const double bound = static_cast<double>(r) * cell_ * (1.0 - 1e-12);
      const double bound_metric = norm == Norm::l1 ? bound : bound * bound;
      if (best.distance < bound_metric) break;
    }
    return best;
  }

 private:
  Neighbor scan(const Point3& q, Norm norm) const {
    Neighbor best;
    for (std::size_t i = 0; i < cloud_->size(); ++i) consider(q, i, norm, best);
    return best;
  }

  void consider(const Point3& q, std::size_t i, Norm norm, Neighbor& best) const {
    const double d = distance(q, (*cloud_)[i], norm);
    if (d < best.distance || (d == best.distance && i < best.index)) best = {i, d};
  }

  long cell_coord(double v, int axis) const {
    const long c = static_cast<long>(std::floor((v - lo_[axis]) / cell_));
    return std::clamp(c, 0L, res_[axis] - 1);
  }

  void build_grid() {
    const auto& pts = cloud_->points;
    Point3 hi{};
    for (int d = 0; d < 3; ++d) {
      lo_[d] = hi[d] = pts[0][d];
      for (const auto& p : pts) {
        lo_[d] = std::min(lo_[d], p[d]);
        hi[d] = std::max(hi[d], p[d]);
      }
    }
    const double span = std::max({hi[0] - lo_[0], hi[1] - lo_[1], hi[2] - lo_[2]});
    const double target = std::cbrt(static_cast<double>(pts.size()) / 2.0);
    cell_ = span > 0.0 ? span / std::max(1.0, std::floor(target)) : 1.0;
    for (int d = 0; d < 3; ++d) {
      res_[d] = std::max(1L, static_cast<long>(std::floor((hi[d] - lo_[d]) / cell_)) + 1);
    }
    const std::size_t ncells = static_cast<std::size_t>(res_[0] * res_[1] * res_[2]);
    std::vector<std::size_t> cell_of(pts.size());
    starts_.assign(ncells + 1, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const long cx = cell_coord(pts[i][0], 0), cy = cell_coord(pts[i][1], 1), cz = cell_coord(pts[i][2], 2);
      cell_of[i] = static_cast<std::size_t>((cx * res_[1] + cy) * res_[2] + cz);
      ++starts_[cell_of[i] + 1];
    }
    std::partial_sum(starts_.begin(), starts_.end(), starts_.begin());
    cells_.resize(pts.size());
    std::vector<std::size_t> fill(starts_.begin(), starts_.end() - 1);
    for (std::size_t i = 0; i < pts.size(); ++i) cells_[fill[cell_of[i]]++] = i;
  }

  const PointCloud* cloud_;
  Point3 lo_{};
  double cell_ = 1.0;
  std::array<long, 3> res_{1, 1, 1};
  std::vector<std::size_t> starts_;
  std::vector<std::size_t> cells_;
};

namespace detail {

inline void require_nonempty(const PointCloud& a, const PointCloud& b, const char* op) {
  if (a.empty() || b.empty()) throw ContractError(std::string(op) + ": empty point cloud");
}

inline std::vector<Neighbor> nearest_all(const PointCloud& from, const PointCloud& to, Norm norm) {
  const NeighborIndex index(to);
  std::vector<Neighbor> out(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) out[i] = index.nearest(from[i], norm);
  return out;
}

template <typename F>
double mean_over(const std::vector<Neighbor>& nn, F f) {
  double s = 0.0;
  for (const auto& n : nn) s += f(n.distance);
  return s / static_cast<double>(nn.size());
}

}  // namespace detail

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ContractError("cosine_similarity: length mismatch");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (!(nu > 0.0) || !(nv > 0.0)) throw DomainError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

/// Mean squared nearest-neighbour distance, summed over both directions.
inline double chamfer_l2(const PointCloud& a, const PointCloud& b) {
  detail::require_nonempty(a, b, "chamfer_l2");
  const auto id = [](double d) { return d; };
  return detail::mean_over(detail::nearest_all(a, b, Norm::squared_l2), id) +
         detail::mean_over(detail::nearest_all(b, a, Norm::squared_l2), id);
}

/// Half the sum of the two directional mean Euclidean nearest-neighbour distances.
inline double chamfer_l1_metric(const PointCloud& a, const PointCloud& b) {
  detail::require_nonempty(a, b, "chamfer_l1_metric");
  const auto root = [](double d) { return std::sqrt(d); };
  return 0.5 * (detail::mean_over(detail::nearest_all(a, b, Norm::squared_l2), root) +
                detail::mean_over(detail::nearest_all(b, a, Norm::squared_l2), root));
}

/// Chamfer distance under the coordinate l1 norm (training loss form).
inline double chamfer_l1_literal(const PointCloud& a, const PointCloud& b) {
  detail::require_nonempty(a, b, "chamfer_l1_literal");
  const auto id = [](double d) { return d; };
  return detail::mean_over(detail::nearest_all(a, b, Norm::l1), id) +
         detail::mean_over(detail::nearest_all(b, a, Norm::l1), id);
}

/// Differentiable l1-literal Chamfer between two [n x 3] variables on one tape.
inline nd::Var chamfer_l1_literal(const nd::Var& a, const nd::Var& b) {
  const PointCloud pa = PointCloud::from_array(a.value());
  const PointCloud pb = PointCloud::from_array(b.value());
  detail::require_nonempty(pa, pb, "chamfer_l1_literal");
  if (&a.tape() != &b.tape()) throw ContractError("chamfer_l1_literal: operands live on different tapes");
  auto ab = detail::nearest_all(pa, pb, Norm::l1);
  auto ba = detail::nearest_all(pb, pa, Norm::l1);
  const auto id = [](double d) { return d; };
  const double value = detail::mean_over(ab, id) + detail::mean_over(ba, id);
  const nd::NodeId ai = a.id(), bi = b.id();
  std::vector<std::size_t> ab_idx(ab.size()), ba_idx(ba.size());
  for (std::size_t i = 0; i < ab.size(); ++i) ab_idx[i] = ab[i].index;
  for (std::size_t i = 0; i < ba.size(); ++i) ba_idx[i] = ba[i].index;
  return a.tape().record(
      nd::Array::scalar(value), {ai, bi},
      [ai, bi, ab_idx = std::move(ab_idx), ba_idx = std::move(ba_idx)](nd::Tape& tp, nd::NodeId self) {
        const double g = tp.upstream(self).item();
        const nd::Array& av = tp.value(ai);
        const nd::Array& bv = tp.value(bi);
        nd::Array* ga = tp.grad_target(ai);
        nd::Array* gb = tp.grad_target(bi);
        const auto sign = [](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); };
        // direction (from, to, nn, weight)
        const auto pass = [&](const nd::Array& from, const nd::Array& to, nd::Array* gfrom, nd::Array* gto,
                              const std::vector<std::size_t>& nn) {
          const double w = g / static_cast<double>(nn.size());
          for (std::size_t i = 0; i < nn.size(); ++i) {
            for (std::size_t c = 0; c < 3; ++c) {
              const double s = w * sign(from[3 * i + c] - to[3 * nn[i] + c]);
              if (gfrom) (*gfrom)[3 * i + c] += s;
              if (gto) (*gto)[3 * nn[i] + c] -= s;
            }
          }
        };
        pass(av, bv, ga, gb, ab_idx);
        pass(bv, av, gb, ga, ba_idx);
      });
}

enum class ChamferKind { l2, l1_metric, l1_literal };

inline double chamfer(const PointCloud& a, const PointCloud& b, ChamferKind kind) {
  switch (kind) {
    case ChamferKind::l2: return chamfer_l2(a, b);
    case ChamferKind::l1_metric: return chamfer_l1_metric(a, b);
    case ChamferKind::l1_literal: return chamfer_l1_literal(a, b);
  }
  throw ContractError("chamfer: unknown kind");
}

/// Greedy farthest-point selection starting at seed_index; indices in selection order.
inline std::vector<std::size_t> fps_indices(const PointCloud& c, std::size_t m, std::size_t seed_index) {
  if (m < 1 || m > c.size()) {
    throw ContractError("fps: requested " + std::to_string(m) + " of " + std::to_string(c.size()) + " points");
  }
  if (seed_index >= c.size()) throw ContractError("fps: seed index out of range");
  std::vector<std::size_t> chosen{seed_index};
  chosen.reserve(m);
  std::vector<double> mind(c.size(), std::numeric_limits<double>::infinity());
  std::size_t last = seed_index;
  while (chosen.size() < m) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      mind[i] = std::min(mind[i], distance(c[i], c[last], Norm::squared_l2));
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    chosen.push_back(best);
    last = best;
  }
  return chosen;
}

inline PointCloud fps(const PointCloud& c, std::size_t m, std::size_t seed_index = 0) {
  PointCloud out;
  for (std::size_t i : fps_indices(c, m, seed_index)) out.points.push_back(c[i]);
  return out;
}

/// Keeps the keep_n points nearest to the viewpoint anchor, in their original order.
inline PointCloud viewpoint_crop(const PointCloud& c, const Viewpoint& vp, std::size_t keep_n) {
  if (keep_n < 1 || keep_n > c.size()) {
    throw ContractError("viewpoint_crop: keep_n " + std::to_string(keep_n) + " outside [1, " +
                        std::to_string(c.size()) + "]");
  }
  const Point3 anchor = vp.anchor();
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> d(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) d[i] = distance(c[i], anchor, Norm::squared_l2);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return d[x] < d[y]; });
  order.resize(keep_n);
  std::sort(order.begin(), order.end());
  PointCloud out;
  out.points.reserve(keep_n);
  for (std::size_t i : order) out.points.push_back(c[i]);
  return out;
}

/// Harmonic mean of precision (pred near gt) and recall (gt near pred) at Euclidean
/// distance threshold d (strict).
inline double f_score(const PointCloud& pred, const PointCloud& gt, double d = 0.01) {
  detail::require_nonempty(pred, gt, "f_score");
  if (!(d > 0.0)) throw ContractError("f_score: threshold must be positive");
  const double d2 = d * d;
  const auto within = [d2](const std::vector<Neighbor>& nn) {
    std::size_t hits = 0;
    for (const auto& n : nn) hits += n.distance < d2 ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(nn.size());
  };
  const double precision = within(detail::nearest_all(pred, gt, Norm::squared_l2));
  const double recall = within(detail::nearest_all(gt, pred, Norm::squared_l2));
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

/// Mean Euclidean distance from each input point to its nearest output point.
inline double fidelity(const PointCloud& input, const PointCloud& output) {
  detail::require_nonempty(input, output, "fidelity");
  return detail::mean_over(detail::nearest_all(input, output, Norm::squared_l2), [](double d) { return std::sqrt(d); });
}

/// Smallest Chamfer distance from `output` to any member of the reference set.
inline double mmd(const PointCloud& output, std::span<const PointCloud> references,
                  ChamferKind kind = ChamferKind::l2) {
  if (references.empty()) throw ContractError("mmd: empty reference set");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ref : references) best = std::min(best, chamfer(output, ref, kind));
  return best;
}

}  // namespace pointpc
