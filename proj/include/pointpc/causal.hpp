#pragma once

// Prior-feature selection by backdoor adjustment. The concatenated prior feature
// is cut into n equal contiguous strata; each stratum, intersected with the set of
// large-magnitude entries, masks the prior before fusion. The loss averages the
// Chamfer error of all n masked decodes with uniform weight 1/n.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pointpc/errors.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/models.hpp"
#include "pointpc/ndcore.hpp"

namespace pointpc::causal {

using IndexSet = std::vector<std::size_t>;

struct StratumSelection {
  std::size_t total_dim = 0;
  std::vector<IndexSet> strata;  // H_1..H_n
  IndexSet selected;             // S_t
  double threshold = 0.0;        // t

  /// c_m = H_m intersected with S_t.
  IndexSet intersection(std::size_t m) const {
    IndexSet out;
    std::set_intersection(strata.at(m).begin(), strata.at(m).end(), selected.begin(), selected.end(),
                          std::back_inserter(out));
    return out;
  }
};

/// Contiguous blocks of total_dim / n indices.
inline std::vector<IndexSet> partition(std::size_t total_dim, std::size_t n) {
  require(n >= 1, "partition: need at least one stratum");
  require(total_dim % n == 0, "partition: " + std::to_string(n) + " strata do not divide " + std::to_string(total_dim));
  const std::size_t width = total_dim / n;
  std::vector<IndexSet> out(n);
  for (std::size_t m = 0; m < n; ++m) {
    for (std::size_t k = 0; k < width; ++k) out[m].push_back(m * width + k);
  }
  return out;
}

/// Indices whose magnitude strictly exceeds t.
inline IndexSet threshold_set(std::span<const double> prior, double t) {
  require(t >= 0.0, "threshold_set: threshold must be non-negative");
  IndexSet out;
  for (std::size_t k = 0; k < prior.size(); ++k) {
    if (std::abs(prior[k]) > t) out.push_back(k);
  }
  return out;
}

/// Lower median of |prior|, so that about half the entries exceed it.
inline double median_threshold(std::span<const double> prior) {
  if (prior.empty()) return 0.0;
  std::vector<double> mags(prior.size());
  for (std::size_t k = 0; k < prior.size(); ++k) mags[k] = std::abs(prior[k]);
  const auto mid = mags.begin() + static_cast<std::ptrdiff_t>((mags.size() - 1) / 2);
  std::nth_element(mags.begin(), mid, mags.end());
  return *mid;
}

inline StratumSelection make_selection(std::span<const double> prior, std::size_t n, double t) {
  return {prior.size(), partition(prior.size(), n), threshold_set(prior, t), t};
}

/// 0/1 mask of H_m intersected with S_t over the full prior width.
inline nd::Array selection_mask(std::size_t total_dim, const IndexSet& stratum, const IndexSet& selected) {
  nd::Array mask(nd::Shape{total_dim}, 0.0);
  std::vector<bool> in_s(total_dim, false);
  for (std::size_t k : selected) in_s.at(k) = true;
  for (std::size_t k : stratum) {
    if (in_s.at(k)) mask[k] = 1.0;
  }
  return mask;
}

/// The prior restricted to c_m, zero elsewhere (width preserved).
inline std::vector<double> select(std::span<const double> prior, const IndexSet& stratum, const IndexSet& selected) {
  const nd::Array mask = selection_mask(prior.size(), stratum, selected);
  std::vector<double> out(prior.size());
  for (std::size_t k = 0; k < prior.size(); ++k) out[k] = prior[k] * mask[k];
  return out;
}

inline nd::Var select(const nd::Var& prior, const IndexSet& stratum, const IndexSet& selected) {
  return nd::mul(prior, prior.tape().constant(selection_mask(prior.value().size(), stratum, selected)));
}

inline nd::Var fuse(const nd::Var& partial, const nd::Var& prior) {
  return nd::concat({partial, prior});
}

/// Mean over strata of the l1-literal Chamfer between each masked decode's dense
/// output and the ground truth.
inline nd::Var causal_loss(const nd::Var& partial, const nd::Var& prior, const StratumSelection& sel,
                           const models::Decoder& decoder, std::span<const nd::Var> decoder_params,
                           const nd::Var& truth) {
  require(prior.value().size() == sel.total_dim, "causal_loss: prior width does not match the selection");
  require(!sel.strata.empty(), "causal_loss: no strata");
  nd::Var total;
  for (const auto& stratum : sel.strata) {
    const auto out = decoder.forward(decoder_params, fuse(partial, select(prior, stratum, sel.selected)));
    const nd::Var term = chamfer_l1_literal(out.dense, truth);
    total = total.valid() ? nd::add(total, term) : term;
  }
  return nd::scale(total, 1.0 / static_cast<double>(sel.strata.size()));
}

/// Reconstruction loss of the unmasked fusion (no stratification).
inline nd::Var fused_loss(const nd::Var& partial, const nd::Var& prior, const models::Decoder& decoder,
                          std::span<const nd::Var> decoder_params, const nd::Var& truth) {
  const auto out = decoder.forward(decoder_params, fuse(partial, prior));
  return chamfer_l1_literal(out.dense, truth);
}

/// lambda * causal + (1 - lambda) * recon.
inline nd::Var combined_loss(const nd::Var& causal, const nd::Var& recon, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "combined_loss: lambda must lie in [0, 1]");
  return nd::add(nd::scale(causal, lambda), nd::scale(recon, 1.0 - lambda));
}

inline double combined_loss(double causal, double recon, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "combined_loss: lambda must lie in [0, 1]");
  return lambda * causal + (1.0 - lambda) * recon;
}

/// Completion with the union mask c = S_t in one decode.
inline PointCloud infer(std::span<const double> partial, std::span<const double> prior, const IndexSet& selected,
                        const models::Decoder& decoder) {
  IndexSet all(prior.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  std::vector<double> fused(partial.begin(), partial.end());
  const std::vector<double> masked = select(prior, all, selected);
  fused.insert(fused.end(), masked.begin(), masked.end());
  return decoder.decode(fused).second;
}

}  // namespace pointpc::causal
