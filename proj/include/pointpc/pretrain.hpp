#pragma once

// Contrastive alignment of the partial encoder E_K and complete encoder E_V:
// NT-Xent between two partial views of a shape (intra-modality) and between the
// mean partial feature and the complete feature (cross-modality).

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointpc/data.hpp"
#include "pointpc/errors.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/models.hpp"
#include "pointpc/ndcore.hpp"
#include "pointpc/parallel.hpp"
#include "pointpc/random.hpp"

namespace pointpc::pretrain {

struct ViewConfig {
  double min_fraction = 0.25;
  double max_fraction = 0.75;
  std::size_t partial_size = 128;
};

struct ViewPair {
  std::array<PointCloud, 2> partials;
  std::array<std::size_t, 2> viewpoints{};
  std::array<std::size_t, 2> keep_counts{};
};

/// Two independent crops of `source` from random fixed viewpoints with keep
/// fractions uniform in the configured range, each FPS-reduced to partial_size.
inline ViewPair make_view_pair(const PointCloud& source, Rng& rng, const ViewConfig& cfg = {}) {
  const auto min_keep = static_cast<std::size_t>(std::ceil(cfg.min_fraction * static_cast<double>(source.size())));
  require(cfg.partial_size >= 1 && min_keep >= cfg.partial_size,
          "make_view_pair: source of " + std::to_string(source.size()) + " points too small for partial size " +
              std::to_string(cfg.partial_size));
  ViewPair pair;
  for (std::size_t v = 0; v < 2; ++v) {
    pair.viewpoints[v] = rng.index(data::kViewpointCount);
    const double fraction = rng.uniform(cfg.min_fraction, cfg.max_fraction);
    const auto keep = std::clamp(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(source.size()))),
                                 min_keep, source.size());
    pair.keep_counts[v] = keep;
    pair.partials[v] = fps(viewpoint_crop(source, data::fixed_viewpoint(pair.viewpoints[v]), keep), cfg.partial_size, 0);
  }
  return pair;
}

/// Features of one batch, rows are samples: views [N x C] each, complete [N x C].
struct ContrastiveBatch {
  nd::Var view1;
  nd::Var view2;
  nd::Var complete;
  double temperature = 0.1;
};

namespace detail {

inline void check_batch(const nd::Var& a, const nd::Var& b, double temperature) {
  require(a.value().rank() == 2 && a.shape() == b.shape(), "contrastive loss: feature matrices must share a shape");
  require(a.value().extent(0) >= 2, "contrastive loss: batch needs at least 2 samples");
  require(temperature > 0.0, "contrastive loss: temperature must be positive");
}

/// Sum over i of l(i; a, b) = -s(a_i, b_i)/tau
///   + log( sum_{j != i} exp(s(a_i, a_j)/tau) + sum_j exp(s(a_i, b_j)/tau) ),
/// with s the cosine similarity. The second sum keeps j = i.
inline nd::Var directional_terms(const nd::Var& a, const nd::Var& b, double temperature) {
  nd::Tape& t = a.tape();
  const std::size_t n = a.value().extent(0);
  const nd::Var an = nd::normalize_rows(a);
  const nd::Var bn = nd::normalize_rows(b);
  const nd::Var s_aa = nd::scale(nd::matmul(an, nd::transpose(an)), 1.0 / temperature);
  const nd::Var s_ab = nd::scale(nd::matmul(an, nd::transpose(bn)), 1.0 / temperature);
  nd::Array off_diagonal(nd::Shape{n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) off_diagonal(i, i) = 0.0;
  const nd::Var negatives = nd::add(nd::sum(nd::mul(nd::exp(s_aa), t.constant(off_diagonal)), 1),
                                    nd::sum(nd::exp(s_ab), 1));
  const nd::Var positives = nd::sum(nd::mul(s_ab, t.constant(nd::Array::identity(n))), 1);
  return nd::sum(nd::sub(nd::log(negatives), positives));
}

inline nd::Var symmetric_nt_xent(const nd::Var& a, const nd::Var& b, double temperature) {
  check_batch(a, b, temperature);
  const double n = static_cast<double>(a.value().extent(0));
  return nd::scale(nd::add(directional_terms(a, b, temperature), directional_terms(b, a, temperature)), 1.0 / (2.0 * n));
}

}  // namespace detail

inline nd::Var intra_loss(const ContrastiveBatch& batch) {
  return detail::symmetric_nt_xent(batch.view1, batch.view2, batch.temperature);
}

/// The partial side is the mean of the two view features.
inline nd::Var cross_loss(const ContrastiveBatch& batch) {
  require(batch.view1.shape() == batch.complete.shape(), "cross_loss: complete features must match view features");
  const nd::Var mean_partial = nd::scale(nd::add(batch.view1, batch.view2), 0.5);
  return detail::symmetric_nt_xent(mean_partial, batch.complete, batch.temperature);
}

struct PretrainLosses {
  nd::Var intra;
  nd::Var cross;
  nd::Var total;
};

inline PretrainLosses pretrain_loss(const ContrastiveBatch& batch) {
  const nd::Var intra = intra_loss(batch);
  const nd::Var cross = cross_loss(batch);
  return {intra, cross, nd::add(intra, cross)};
}

// ---------------------------------------------------------------------------
// Training loop

struct PretrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double temperature = 0.1;
  models::LearningRateSchedule schedule{0.01, 0.76, 20};
  double momentum = 0.9;
  double grad_clip = 5.0;
  ViewConfig views;
  std::uint64_t seed = 7;
  std::size_t threads = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double l_intra = 0.0;
  double l_cross = 0.0;
  double l_pre = 0.0;
};

/// Scales every gradient so their joint l2 norm is at most max_norm (0 disables).
inline void clip_gradients(std::span<std::vector<nd::Array>> groups, double max_norm) {
  if (!(max_norm > 0.0)) return;
  double sq = 0.0;
  for (const auto& g : groups)
    for (const auto& a : g)
      for (double v : a.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (auto& g : groups)
    for (auto& a : g)
      for (double& v : a.data()) v *= f;
}

namespace detail {

struct SampleForward {
  std::unique_ptr<nd::Tape> tape;
  std::vector<nd::Var> k_params;
  std::vector<nd::Var> v_params;
  std::array<nd::Var, 3> features;  // view1, view2, complete
};

inline void add_into(std::vector<nd::Array>& acc, const nd::Tape& tape, std::span<const nd::Var> vars) {
  if (acc.empty()) {
    for (const auto& v : vars) acc.push_back(tape.grad(v));
    return;
  }
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const nd::Array g = tape.grad(vars[i]);
    for (std::size_t k = 0; k < g.size(); ++k) acc[i][k] += g[k];
  }
}

}  // namespace detail

/// Jointly trains both encoders on view pairs of `clouds`. Per-sample encoder
/// passes run on independent tapes; the batch loss sits on its own tape and its
/// feature gradients seed each sample's reverse sweep.
inline std::vector<EpochRecord> pretrain(models::PointEncoder& partial_encoder, models::PointEncoder& complete_encoder,
                                         std::span<const PointCloud> clouds, const PretrainConfig& cfg) {
  require(clouds.size() >= 2, "pretrain: need at least two training shapes");
  require(cfg.batch_size >= 2, "pretrain: batch size must be at least 2");
  require(partial_encoder.feature_dim() == complete_encoder.feature_dim(), "pretrain: encoder widths differ");
  const std::size_t dim = partial_encoder.feature_dim();
  models::SgdMomentum opt_k(cfg.momentum), opt_v(cfg.momentum);
  Rng order_rng = Rng::stream(cfg.seed, 0x5052'4554);
  std::vector<EpochRecord> trace;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(clouds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    const double lr = cfg.schedule.at(epoch);
    EpochRecord rec{epoch, 0.0, 0.0, 0.0};
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<detail::SampleForward> fw(n);
      parallel_for(n, cfg.threads, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        Rng rng = Rng::stream(cfg.seed, (epoch + 1) * 1'000'003 + idx);
        const ViewPair pair = make_view_pair(clouds[idx], rng, cfg.views);
        auto& s = fw[b];
        s.tape = std::make_unique<nd::Tape>();
        s.k_params = partial_encoder.params().bind(*s.tape, true);
        s.v_params = complete_encoder.params().bind(*s.tape, true);
        s.features[0] = partial_encoder.forward(*s.tape, s.k_params, pair.partials[0]);
        s.features[1] = partial_encoder.forward(*s.tape, s.k_params, pair.partials[1]);
        s.features[2] = complete_encoder.forward(*s.tape, s.v_params, clouds[idx]);
      });

      nd::Tape batch_tape;
      std::array<nd::Var, 3> mats;
      for (std::size_t f = 0; f < 3; ++f) {
        std::vector<double> rows;
        rows.reserve(n * dim);
        for (const auto& s : fw) rows.insert(rows.end(), s.features[f].value().data().begin(), s.features[f].value().data().end());
        mats[f] = batch_tape.leaf(nd::Array(nd::Shape{n, dim}, std::move(rows)));
      }
      const PretrainLosses losses = pretrain_loss({mats[0], mats[1], mats[2], cfg.temperature});
      batch_tape.backward(losses.total);
      std::array<nd::Array, 3> feature_grads{batch_tape.grad(mats[0]), batch_tape.grad(mats[1]), batch_tape.grad(mats[2])};

      std::vector<std::vector<nd::Array>> gk(n), gv(n);
      parallel_for(n, cfg.threads, [&](std::size_t b) {
        auto& s = fw[b];
        nd::Var joined = nd::concat(std::span<const nd::Var>(s.features.data(), 3));
        std::vector<double> seed;
        seed.reserve(3 * dim);
        for (std::size_t f = 0; f < 3; ++f) {
          seed.insert(seed.end(), feature_grads[f].data().begin() + static_cast<std::ptrdiff_t>(b * dim),
                      feature_grads[f].data().begin() + static_cast<std::ptrdiff_t>((b + 1) * dim));
        }
        s.tape->backward(joined, nd::Array::vector(std::move(seed)));
        detail::add_into(gk[b], *s.tape, s.k_params);
        detail::add_into(gv[b], *s.tape, s.v_params);
        s.tape.reset();
      });
      std::vector<std::vector<nd::Array>> total(2);
      for (std::size_t b = 0; b < n; ++b) {
        if (b == 0) {
          total[0] = std::move(gk[0]);
          total[1] = std::move(gv[0]);
          continue;
        }
        for (std::size_t i = 0; i < total[0].size(); ++i)
          for (std::size_t k = 0; k < total[0][i].size(); ++k) total[0][i][k] += gk[b][i][k];
        for (std::size_t i = 0; i < total[1].size(); ++i)
          for (std::size_t k = 0; k < total[1][i].size(); ++k) total[1][i][k] += gv[b][i][k];
      }
      clip_gradients(total, cfg.grad_clip);
      opt_k.step(partial_encoder.params(), total[0], lr);
      opt_v.step(complete_encoder.params(), total[1], lr);

      rec.l_intra += losses.intra.item();
      rec.l_cross += losses.cross.item();
      rec.l_pre += losses.total.item();
      ++batches;
    }
    if (batches > 0) {
      rec.l_intra /= static_cast<double>(batches);
      rec.l_cross /= static_cast<double>(batches);
      rec.l_pre /= static_cast<double>(batches);
    }
    trace.push_back(rec);
  }
  return trace;
}

/// Top-1 retrieval: each partial (every viewpoint x fraction) of each cloud is
/// matched by cosine similarity against the complete features of all clouds;
/// returns the fraction retrieving its own shape.
inline double retrieval_accuracy(const models::PointEncoder& partial_encoder,
                                 const models::PointEncoder& complete_encoder, std::span<const PointCloud> clouds,
                                 std::span<const double> fractions, std::size_t partial_size, std::size_t threads = 1) {
  require(!clouds.empty(), "retrieval_accuracy: no shapes");
  std::vector<std::vector<double>> keys(clouds.size());
  parallel_for(clouds.size(), threads, [&](std::size_t i) { keys[i] = complete_encoder.encode(clouds[i]); });
  const std::size_t per_shape = data::kViewpointCount * fractions.size();
  std::vector<std::size_t> hits(clouds.size(), 0);
  parallel_for(clouds.size(), threads, [&](std::size_t i) {
    for (std::size_t v = 0; v < data::kViewpointCount; ++v) {
      for (double f : fractions) {
        const auto q = partial_encoder.encode(data::make_partial(clouds[i], v, f, partial_size));
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t j = 0; j < keys.size(); ++j) {
          const double s = cosine_similarity(q, keys[j]);
          if (s > best_sim) {
            best_sim = s;
            best = j;
          }
        }
        hits[i] += best == i ? 1 : 0;
      }
    }
  });
  std::size_t total = 0;
  for (std::size_t h : hits) total += h;
  return static_cast<double>(total) / static_cast<double>(clouds.size() * per_shape);
}

}  // namespace pointpc::pretrain
