#pragma once

// Runtime self-test: library metrics against exhaustive loops, and analytic
// gradients of every training loss against central differences.

#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pointpc/causal.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/models.hpp"
#include "pointpc/pretrain.hpp"
#include "pointpc/random.hpp"

namespace pointpc::selfcheck {

namespace detail {

inline PointCloud random_cloud(Rng& rng, std::size_t n) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)});
  return c;
}

// Exhaustive one-directional mean of f(nearest distance) under `sq` or l1.
inline double brute_mean(const PointCloud& a, const PointCloud& b, bool l1, const std::function<double(double)>& f) {
  double total = 0.0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      double d = 0.0;
      for (int k = 0; k < 3; ++k) d += l1 ? std::abs(p[k] - q[k]) : (p[k] - q[k]) * (p[k] - q[k]);
      best = std::min(best, d);
    }
    total += f(best);
  }
  return total / static_cast<double>(a.size());
}

inline double brute_fscore(const PointCloud& pred, const PointCloud& gt, double t) {
  const auto frac = [&](const PointCloud& a, const PointCloud& b) {
    double hit = 0.0;
    for (const auto& p : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : b) best = std::min(best, std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                                              (p[2] - q[2]) * (p[2] - q[2])));
      hit += best < t ? 1.0 : 0.0;
    }
    return hit / static_cast<double>(a.size());
  };
  const double p = frac(pred, gt), r = frac(gt, pred);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

struct Tally {
  std::ostream& out;
  bool ok = true;

  void report(const std::string& name, bool passed, const std::string& detail) {
    out << (passed ? "ok   " : "FAIL ") << name << "  " << detail << "\n";
    ok = ok && passed;
  }
};

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

}  // namespace detail

/// Prints one line per check; true when every check passes.
inline bool run(std::ostream& out, std::uint64_t seed = 1) {
  detail::Tally tally{out};
  Rng rng(seed);

  // Metrics. Sizes up to 64 use the exhaustive scan; 600 exercises the grid.
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t na = trial < 57 ? 1 + rng.index(64) : 600, nb = trial < 57 ? 1 + rng.index(64) : 600;
    const PointCloud a = detail::random_cloud(rng, na), b = detail::random_cloud(rng, nb);
    const auto id = [](double d) { return d; };
    const auto root = [](double d) { return std::sqrt(d); };
    const double l2 = detail::brute_mean(a, b, false, id) + detail::brute_mean(b, a, false, id);
    const double l1m = 0.5 * (detail::brute_mean(a, b, false, root) + detail::brute_mean(b, a, false, root));
    const double l1l = detail::brute_mean(a, b, true, id) + detail::brute_mean(b, a, true, id);
    const double fid = detail::brute_mean(a, b, false, root);
    worst = std::max({worst, std::abs(chamfer_l2(a, b) - l2), std::abs(chamfer_l1_metric(a, b) - l1m),
                      std::abs(chamfer_l1_literal(a, b) - l1l), std::abs(fidelity(a, b) - fid),
                      std::abs(f_score(a, b, 0.1) - detail::brute_fscore(a, b, 0.1))});
  }
  tally.report("metrics-vs-exhaustive", worst < 1e-9, "max abs diff " + detail::fmt(worst));

  const auto check = [&](const std::string& name, const std::function<nd::Var(nd::Var)>& f, const nd::Array& x) {
    const auto r = nd::gradient_check(f, x);
    tally.report("grad-" + name, r.passed,
                 "max rel err " + detail::fmt(r.max_error) + ", kinks excluded " + std::to_string(r.excluded) + "/" +
                     std::to_string(x.size()));
  };
  const auto random_array = [&](std::size_t n) {
    nd::Array a(nd::Shape{n});
    for (double& v : a.data()) v = rng.uniform(-1, 1);
    return a;
  };

  {
    const PointCloud truth = detail::random_cloud(rng, 7);
    check("chamfer-l1-literal",
          [&](nd::Var v) { return chamfer_l1_literal(nd::reshape(v, {6, 3}), v.tape().constant(truth.to_array())); },
          random_array(18));
  }
  {
    const std::size_t n = 3, c = 4;
    for (int which = 0; which < 2; ++which) {
      check(which == 0 ? "intra-loss" : "cross-loss",
            [&](nd::Var v) {
              const pretrain::ContrastiveBatch b{nd::slice(v, 0, {n, c}), nd::slice(v, n * c, {n, c}),
                                                 nd::slice(v, 2 * n * c, {n, c}), 0.1};
              return which == 0 ? pretrain::intra_loss(b) : pretrain::cross_loss(b);
            },
            random_array(3 * n * c));
    }
  }
  {
    const models::EncoderConfig ec{6, 4};
    Rng init(seed + 1);
    const auto enc = models::PointEncoder::initialize(ec, init);
    const auto dec = models::Decoder::initialize({12, 6, 2, 2}, init);
    const PointCloud partial = detail::random_cloud(rng, 9), truth = detail::random_cloud(rng, 6);
    const std::vector<double> prior = random_array(8).values();
    const auto sel = causal::make_selection(prior, 2, causal::median_threshold(prior));
    const std::size_t ne = enc.params().flatten().size();
    const nd::Array de = dec.params().flatten();
    std::vector<double> flat = enc.params().flatten().values();
    flat.insert(flat.end(), de.data().begin(), de.data().end());
    check("decoder-chamfer",
          [&](nd::Var v) {
            nd::Tape& t = v.tape();
            const nd::Var in = t.constant(nd::Array::vector([&] {
              std::vector<double> f(4, 0.25);
              f.insert(f.end(), prior.begin(), prior.end());
              return f;
            }()));
            return chamfer_l1_literal(dec.forward(dec.params().unflatten(v), in).dense, t.constant(truth.to_array()));
          },
          de);
    check("causal-loss",
          [&](nd::Var v) {
            nd::Tape& t = v.tape();
            const auto dp = dec.params().unflatten(nd::slice(v, 0, {de.size()}));
            const nd::Var fi = nd::slice(v, de.size(), {4});
            return causal::causal_loss(fi, t.constant(nd::Array::vector(prior)), sel, dec, dp, t.constant(truth.to_array()));
          },
          [&] {
            std::vector<double> x = de.values();
            const auto extra = random_array(4);
            x.insert(x.end(), extra.data().begin(), extra.data().end());
            return nd::Array::vector(x);
          }());
    check("combined-end-to-end",
          [&](nd::Var v) {
            nd::Tape& t = v.tape();
            const auto kp = enc.params().unflatten(nd::slice(v, 0, {ne}));
            const auto dp = dec.params().unflatten(nd::slice(v, ne, {de.size()}));
            const nd::Var fi = enc.forward(t, kp, partial);
            const nd::Var fv = t.constant(nd::Array::vector(prior));
            const nd::Var g = t.constant(truth.to_array());
            const auto out = dec.forward(dp, causal::fuse(fi, fv));
            return causal::combined_loss(causal::causal_loss(fi, fv, sel, dec, dp, g), chamfer_l1_literal(out.centers, g), 0.5);
          },
          nd::Array::vector(flat));
  }
  out << (tally.ok ? "selfcheck passed" : "selfcheck FAILED") << "\n";
  return tally.ok;
}

}  // namespace pointpc::selfcheck
