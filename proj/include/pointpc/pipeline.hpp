#pragma once

// End-to-end orchestration: contrastive pretraining, memory seeding, completion
// training with memory updates, evaluation on the 8-viewpoint x 3-fraction
// protocol, and the ablation matrix.

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointpc/causal.hpp"
#include "pointpc/config.hpp"
#include "pointpc/data.hpp"
#include "pointpc/errors.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/io.hpp"
#include "pointpc/memory.hpp"
#include "pointpc/models.hpp"
#include "pointpc/parallel.hpp"
#include "pointpc/pretrain.hpp"
#include "pointpc/random.hpp"

namespace pointpc::pipeline {

inline std::size_t worker_count(const ExperimentConfig& cfg) {
  return cfg.threads == 0 ? default_thread_count() : cfg.threads;
}

inline std::vector<PointCloud> split_clouds(const data::Dataset& ds, const std::vector<std::size_t>& split) {
  std::vector<PointCloud> out;
  out.reserve(split.size());
  for (std::size_t i : split) out.push_back(ds.samples.at(i).complete);
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainResult {
  models::CompletionModel model;  // encoders trained, decoder untouched
  std::vector<pretrain::EpochRecord> trace;
};

inline pretrain::PretrainConfig pretrain_config(const ExperimentConfig& cfg) {
  pretrain::PretrainConfig p;
  p.epochs = cfg.pretrain.epochs;
  p.batch_size = cfg.pretrain.batch_size;
  p.temperature = cfg.temperature;
  p.schedule = cfg.pretrain.schedule();
  p.momentum = cfg.pretrain.momentum;
  p.grad_clip = cfg.pretrain.grad_clip;
  p.views.partial_size = cfg.data.partial_points;
  p.seed = cfg.seed;
  p.threads = worker_count(cfg);
  return p;
}

inline PretrainResult run_pretrain(const ExperimentConfig& cfg, const data::Dataset& ds) {
  cfg.validate();
  PretrainResult r{models::CompletionModel::initialize(cfg.encoder_config(), cfg.decoder_config(), cfg.seed), {}};
  const auto clouds = split_clouds(ds, ds.train);
  r.trace = pretrain::pretrain(r.model.partial_encoder, r.model.complete_encoder, clouds, pretrain_config(cfg));
  return r;
}

// ---------------------------------------------------------------------------
// Completion with memory priors

/// Training-split complete clouds, uniformly subsampled down to capacity,
/// keyed by their complete-encoder features.
inline memory::MemoryBank seed_bank(const ExperimentConfig& cfg, const data::Dataset& ds,
                                    const models::PointEncoder& complete_encoder) {
  std::vector<std::size_t> chosen = ds.train;
  if (chosen.size() > cfg.memory_capacity) {
    Rng rng = Rng::stream(cfg.seed, 0x4d45'4d53);
    rng.shuffle(chosen);
    chosen.resize(cfg.memory_capacity);
    std::sort(chosen.begin(), chosen.end());
  }
  std::vector<PointCloud> clouds;
  for (std::size_t i : chosen) clouds.push_back(ds.samples[i].complete);
  std::vector<std::vector<double>> features(clouds.size());
  parallel_for(clouds.size(), worker_count(cfg), [&](std::size_t i) { features[i] = complete_encoder.encode(clouds[i]); });
  memory::MemoryBank bank(cfg.memory_capacity, cfg.delta, cfg.top_k);
  bank.seed(clouds, features);
  return bank;
}

/// Complete-encoder features of every slot value, indexed like the bank.
inline std::vector<std::vector<double>> slot_features(const memory::MemoryBank& bank,
                                                      const models::PointEncoder& complete_encoder,
                                                      std::size_t threads) {
  std::vector<std::vector<double>> out(bank.size());
  parallel_for(bank.size(), threads, [&](std::size_t i) { out[i] = complete_encoder.encode(bank.slot(i).value); });
  return out;
}

inline double selection_threshold(const ExperimentConfig& cfg, std::span<const double> prior) {
  return cfg.threshold_rule == ThresholdRule::median ? causal::median_threshold(prior) : cfg.threshold;
}

/// Frozen inference state: the model, the bank and the cached slot features.
class Completer {
 public:
  Completer(const ExperimentConfig& cfg, const models::CompletionModel& model, const memory::MemoryBank* bank)
      : cfg_(cfg), model_(&model), bank_(bank) {
    if (cfg_.prior_count() > 0) {
      if (bank_ == nullptr || bank_->empty()) throw StateError("completion: memory is on but no memory bank is loaded");
      if (cfg_.prior_count() > bank_->size()) throw StateError("completion: bank holds fewer slots than top_k");
      features_ = slot_features(*bank_, model.complete_encoder, worker_count(cfg_));
    }
  }

  /// Concatenated prior features for a partial feature (empty with memory off).
  std::vector<double> prior_feature(std::span<const double> partial_feature) const {
    std::vector<double> prior;
    if (cfg_.prior_count() == 0) return prior;
    const auto hits = bank_->query(partial_feature, cfg_.prior_count());
    for (std::size_t s : hits.slots) prior.insert(prior.end(), features_[s].begin(), features_[s].end());
    return prior;
  }

  PointCloud complete(const PointCloud& partial) const {
    const std::vector<double> fi = model_->partial_encoder.encode(partial);
    const std::vector<double> prior = prior_feature(fi);
    if (cfg_.flags.causal && !prior.empty()) {
      return causal::infer(fi, prior, causal::threshold_set(prior, selection_threshold(cfg_, prior)), model_->decoder);
    }
    std::vector<double> fused = fi;
    fused.insert(fused.end(), prior.begin(), prior.end());
    return model_->decoder.decode(fused).second;
  }

 private:
  ExperimentConfig cfg_;
  const models::CompletionModel* model_;
  const memory::MemoryBank* bank_;
  std::vector<std::vector<double>> features_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double l_caus = 0.0;   // stratified loss, or the unmasked dense loss with causal off
  double l_recon = 0.0;  // centers against ground truth
  std::size_t positive_updates = 0;
  std::size_t negative_updates = 0;
};

struct TrainResult {
  models::CompletionModel model;
  std::optional<memory::MemoryBank> bank;
  std::vector<TrainRecord> trace;
};

/// Random training crop: fixed viewpoint, keep fraction uniform in [0.25, 0.75].
inline PointCloud training_partial(const PointCloud& complete, std::size_t partial_points, Rng& rng) {
  const std::size_t vp = rng.index(data::kViewpointCount);
  const double fraction = rng.uniform(0.25, 0.75);
  const auto keep = std::clamp(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(complete.size()))),
                               partial_points, complete.size());
  return fps(viewpoint_crop(complete, data::fixed_viewpoint(vp), keep), partial_points, 0);
}

/// Prior slots for one training sample. With exclude_self, slots whose value is
/// the sample's own ground truth are skipped, so training sees the same kind of
/// neighbours as evaluation, where the test shape is never in the bank.
inline std::vector<std::size_t> training_priors(const memory::MemoryBank& bank, std::span<const double> feature,
                                               const PointCloud& truth, const ExperimentConfig& cfg) {
  const std::size_t k = cfg.prior_count();
  if (!cfg.exclude_self) return bank.query(feature, k).slots;
  const auto ranked = bank.query(feature, bank.size());
  std::vector<std::size_t> out;
  for (std::size_t s : ranked.slots) {
    if (out.size() == k) break;
    if (bank.slot(s).value != truth) out.push_back(s);
  }
  if (out.size() < k) throw StateError("train: too few memory slots besides the sample's own shape");
  return out;
}

namespace detail {

struct SampleStep {
  std::vector<nd::Array> grads;  // partial encoder, decoder, complete encoder (if trained)
  std::vector<double> partial_feature;
  double loss = 0.0;
  double l_caus = 0.0;
  double l_recon = 0.0;
};

inline void accumulate(std::vector<nd::Array>& acc, std::vector<nd::Array>&& add) {
  if (acc.empty()) {
    acc = std::move(add);
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    for (std::size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += add[i][k];
}

}  // namespace detail

/// Full training stage. `pretrained` supplies the encoders when the pretrain flag
/// is on; the decoder always starts from its seeded initialization.
inline TrainResult train_run(const ExperimentConfig& cfg, const data::Dataset& ds,
                             const models::CompletionModel* pretrained = nullptr) {
  cfg.validate();
  require(!ds.train.empty(), "train_run: empty training split");
  TrainResult r{models::CompletionModel::initialize(cfg.encoder_config(), cfg.decoder_config(), cfg.seed), {}, {}};
  if (cfg.flags.pretrain) {
    if (pretrained == nullptr) throw StateError("train: pretrained encoder weights missing; run the pretrain stage first");
    r.model.partial_encoder = pretrained->partial_encoder;
    r.model.complete_encoder = pretrained->complete_encoder;
  }
  const bool use_memory = cfg.prior_count() > 0;
  // Freezing only applies to a pretrained E_V; a fresh one is trained jointly.
  const bool train_prior_encoder = use_memory && (!cfg.freeze_prior_encoder || !cfg.flags.pretrain);
  const std::size_t threads = worker_count(cfg);
  std::vector<std::vector<double>> features;
  if (use_memory) {
    r.bank = seed_bank(cfg, ds, r.model.complete_encoder);
    require(cfg.prior_count() <= r.bank->size(), "train_run: fewer memory slots than top_k");
    features = slot_features(*r.bank, r.model.complete_encoder, threads);
  }

  models::SgdMomentum opt_k(cfg.train.momentum), opt_d(cfg.train.momentum), opt_v(cfg.train.momentum);
  const auto schedule = cfg.train.schedule();
  Rng order_rng = Rng::stream(cfg.seed, 0x5452'4149);
  std::vector<std::size_t> order = ds.train;

  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    order_rng.shuffle(order);
    TrainRecord rec;
    rec.epoch = epoch;
    rec.lr = schedule.at(epoch);
    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
      const std::size_t n = std::min(cfg.train.batch_size, order.size() - start);
      std::vector<detail::SampleStep> steps(n);
      std::vector<PointCloud> truths(n);
      parallel_for(n, threads, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        const PointCloud& truth_cloud = ds.samples[idx].complete;
        truths[b] = truth_cloud;
        Rng rng = Rng::stream(cfg.seed, 0x1000'0000 + epoch * 1'000'003 + idx);
        const PointCloud partial = training_partial(truth_cloud, cfg.data.partial_points, rng);

        nd::Tape tape;
        const auto kp = r.model.partial_encoder.params().bind(tape, true);
        const auto dp = r.model.decoder.params().bind(tape, true);
        const auto vp = r.model.complete_encoder.params().bind(tape, train_prior_encoder);
        const nd::Var fi = r.model.partial_encoder.forward(tape, kp, partial);
        const nd::Var truth = tape.constant(truth_cloud.to_array());

        std::optional<nd::Var> prior;
        if (use_memory) {
          const auto slots = training_priors(*r.bank, fi.value().data(), truth_cloud, cfg);
          if (train_prior_encoder) {
            std::vector<nd::Var> parts;
            for (std::size_t s : slots) parts.push_back(r.model.complete_encoder.forward(tape, vp, r.bank->slot(s).value));
            prior = nd::concat(std::span<const nd::Var>(parts));
          } else {
            std::vector<double> flat;
            for (std::size_t s : slots) flat.insert(flat.end(), features[s].begin(), features[s].end());
            prior = tape.constant(nd::Array::vector(std::move(flat)));
          }
        }
        const nd::Var fused = prior ? causal::fuse(fi, *prior) : fi;
        const auto out = r.model.decoder.forward(dp, fused);
        const nd::Var l_recon = chamfer_l1_literal(out.centers, truth);
        nd::Var l_caus;
        if (prior && cfg.flags.causal) {
          const auto values = prior->value().values();
          const auto sel = causal::make_selection(values, cfg.strata, selection_threshold(cfg, values));
          l_caus = causal::causal_loss(fi, *prior, sel, r.model.decoder, dp, truth);
        } else {
          l_caus = chamfer_l1_literal(out.dense, truth);
        }
        const nd::Var loss = causal::combined_loss(l_caus, l_recon, cfg.lambda);
        tape.backward(loss);

        auto& st = steps[b];
        for (const auto& v : kp) st.grads.push_back(tape.grad(v));
        for (const auto& v : dp) st.grads.push_back(tape.grad(v));
        if (train_prior_encoder)
          for (const auto& v : vp) st.grads.push_back(tape.grad(v));
        st.partial_feature = fi.value().values();
        st.loss = loss.item();
        st.l_caus = l_caus.item();
        st.l_recon = l_recon.item();
      });

      std::vector<nd::Array> total;
      for (auto& st : steps) {
        detail::accumulate(total, std::move(st.grads));
        rec.loss += st.loss;
        rec.l_caus += st.l_caus;
        rec.l_recon += st.l_recon;
      }
      for (auto& g : total)
        for (double& v : g.data()) v /= static_cast<double>(n);
      std::vector<std::vector<nd::Array>> groups(1, std::move(total));
      pretrain::clip_gradients(groups, cfg.train.grad_clip);
      const std::vector<nd::Array>& g = groups[0];
      const std::size_t nk = r.model.partial_encoder.params().count();
      const std::size_t nd_ = r.model.decoder.params().count();
      opt_k.step(r.model.partial_encoder.params(), std::span(g).subspan(0, nk), rec.lr);
      opt_d.step(r.model.decoder.params(), std::span(g).subspan(nk, nd_), rec.lr);
      if (train_prior_encoder) opt_v.step(r.model.complete_encoder.params(), std::span(g).subspan(nk + nd_), rec.lr);

      if (use_memory) {
        for (std::size_t b = 0; b < n; ++b) {
          const auto outcome = r.bank->update(steps[b].partial_feature, truths[b]);
          if (outcome.kind == memory::MatchKind::positive) {
            ++rec.positive_updates;
          } else {
            ++rec.negative_updates;
            if (!train_prior_encoder) features[outcome.slot] = r.model.complete_encoder.encode(r.bank->slot(outcome.slot).value);
          }
        }
        if (train_prior_encoder) features = slot_features(*r.bank, r.model.complete_encoder, threads);
      }
    }
    const double count = static_cast<double>(order.size());
    rec.loss /= count;
    rec.l_caus /= count;
    rec.l_recon /= count;
    r.trace.push_back(rec);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Difficulty { simple, moderate, hard };

inline constexpr std::array<Difficulty, 3> kDifficulties{Difficulty::simple, Difficulty::moderate, Difficulty::hard};

/// Fraction of the complete cloud kept by the viewpoint crop.
inline double keep_fraction(Difficulty d) {
  switch (d) {
    case Difficulty::simple: return 0.75;
    case Difficulty::moderate: return 0.5;
    case Difficulty::hard: return 0.25;
  }
  return 0.0;
}

inline std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::simple: return "simple";
    case Difficulty::moderate: return "moderate";
    case Difficulty::hard: return "hard";
  }
  return "?";
}

/// CD values are reported x1000; fidelity is a raw mean distance.
struct Metrics {
  double cd_l1 = 0.0;
  double cd_l2 = 0.0;
  double fscore = 0.0;
  double fidelity = 0.0;
  std::optional<double> mmd;
};

struct EvalRecord {
  std::string sample_id;
  std::size_t viewpoint = 0;
  Difficulty difficulty = Difficulty::simple;
  Metrics metrics;
};

struct MetricMeans {
  Metrics mean;
  std::size_t count = 0;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  MetricMeans overall;
  std::array<MetricMeans, 3> by_difficulty;  // simple, moderate, hard
};

inline MetricMeans mean_of(const std::vector<const EvalRecord*>& rs) {
  MetricMeans m;
  m.count = rs.size();
  if (rs.empty()) return m;
  const bool has_mmd = rs.front()->metrics.mmd.has_value();
  double mmd = 0.0;
  for (const auto* r : rs) {
    m.mean.cd_l1 += r->metrics.cd_l1;
    m.mean.cd_l2 += r->metrics.cd_l2;
    m.mean.fscore += r->metrics.fscore;
    m.mean.fidelity += r->metrics.fidelity;
    if (has_mmd) mmd += r->metrics.mmd.value();
  }
  const double n = static_cast<double>(rs.size());
  m.mean.cd_l1 /= n;
  m.mean.cd_l2 /= n;
  m.mean.fscore /= n;
  m.mean.fidelity /= n;
  if (has_mmd) m.mean.mmd = mmd / n;
  return m;
}

inline void summarize(EvalReport& report) {
  std::vector<const EvalRecord*> all;
  std::array<std::vector<const EvalRecord*>, 3> groups;
  for (const auto& r : report.records) {
    all.push_back(&r);
    groups[static_cast<std::size_t>(r.difficulty)].push_back(&r);
  }
  report.overall = mean_of(all);
  for (std::size_t d = 0; d < 3; ++d) report.by_difficulty[d] = mean_of(groups[d]);
}

/// Maps (partial, ground truth) to a completed cloud. Must be safe to call
/// concurrently.
using Predictor = std::function<PointCloud(const PointCloud& partial, const PointCloud& truth)>;

struct EvalOptions {
  std::size_t partial_points = 128;
  double fscore_threshold = 0.01;
  std::span<const PointCloud> mmd_references;  // empty: MMD not computed
  ChamferKind mmd_chamfer = ChamferKind::l2;
  std::size_t threads = 1;
};

/// Scores every (sample, viewpoint, difficulty) cell of `split`.
inline EvalReport evaluate(const data::Dataset& ds, const std::vector<std::size_t>& split, const Predictor& predict,
                           const EvalOptions& opt) {
  require(!split.empty(), "evaluate: split is empty");
  const std::size_t per_sample = data::kViewpointCount * kDifficulties.size();
  EvalReport report;
  report.records.resize(split.size() * per_sample);
  parallel_for(report.records.size(), opt.threads, [&](std::size_t cell) {
    const auto& sample = ds.samples.at(split[cell / per_sample]);
    const std::size_t vp = (cell % per_sample) / kDifficulties.size();
    const Difficulty d = kDifficulties[cell % kDifficulties.size()];
    const PointCloud partial = data::make_partial(sample.complete, vp, keep_fraction(d), opt.partial_points);
    const PointCloud out = predict(partial, sample.complete);
    EvalRecord& r = report.records[cell];
    r.sample_id = sample.id;
    r.viewpoint = vp;
    r.difficulty = d;
    r.metrics.cd_l1 = 1000.0 * chamfer_l1_metric(out, sample.complete);
    r.metrics.cd_l2 = 1000.0 * chamfer_l2(out, sample.complete);
    r.metrics.fscore = f_score(out, sample.complete, opt.fscore_threshold);
    r.metrics.fidelity = fidelity(partial, out);
    if (!opt.mmd_references.empty()) r.metrics.mmd = 1000.0 * mmd(out, opt.mmd_references, opt.mmd_chamfer);
  });
  for (const auto& r : report.records) {
    const auto& m = r.metrics;
    if (!std::isfinite(m.cd_l1) || !std::isfinite(m.cd_l2) || !std::isfinite(m.fscore) || !std::isfinite(m.fidelity) ||
        (m.mmd && !std::isfinite(*m.mmd))) {
      throw EvaluationError("evaluate: non-finite metric for " + r.sample_id);
    }
  }
  summarize(report);
  return report;
}

inline EvalOptions eval_options(const ExperimentConfig& cfg, std::span<const PointCloud> references = {}) {
  EvalOptions o;
  o.partial_points = cfg.data.partial_points;
  o.fscore_threshold = cfg.fscore_threshold;
  if (cfg.eval_mmd) o.mmd_references = references;
  o.mmd_chamfer = cfg.mmd_chamfer;
  o.threads = worker_count(cfg);
  return o;
}

/// Evaluates a trained model on the test split with the bank frozen.
inline EvalReport evaluate_model(const ExperimentConfig& cfg, const data::Dataset& ds,
                                 const models::CompletionModel& model, const memory::MemoryBank* bank) {
  const Completer completer(cfg, model, bank);
  const auto references = cfg.eval_mmd ? split_clouds(ds, ds.train) : std::vector<PointCloud>{};
  return evaluate(ds, ds.test, [&](const PointCloud& partial, const PointCloud&) { return completer.complete(partial); },
                  eval_options(cfg, references));
}

inline Predictor identity_predictor() {
  return [](const PointCloud&, const PointCloud& truth) { return truth; };
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationCell {
  std::string name;   // "A".."F", "k=3", "delta=0.0015"
  std::string group;  // setting, top_k, delta
  ExperimentConfig config;
  EvalReport report;
  std::vector<TrainRecord> trace;
};

struct AblationPlan {
  std::string settings = "ABCDEF";
  std::vector<std::size_t> top_ks{0, 1, 2, 3, 4, 5};
  std::vector<double> deltas{0.0005, 0.001, 0.0015, 0.002, 0.0025};
};

/// Flags of the settings A..F: none, memory, pretrain, memory+pretrain,
/// memory+causal, all.
inline AblationFlags setting_flags(char setting) {
  switch (setting) {
    case 'A': return {false, false, false};
    case 'B': return {true, false, false};
    case 'C': return {false, true, false};
    case 'D': return {true, true, false};
    case 'E': return {true, false, true};
    case 'F': return {true, true, true};
    default: throw ContractError(std::string("ablation: unknown setting '") + setting + "'");
  }
}

/// Pretraining is shared by every cell that needs it; cells whose effective
/// configuration coincides (k=0 and memory off, k=3 and setting F, ...) are run once.
inline std::vector<AblationCell> ablation_matrix(const ExperimentConfig& base, const data::Dataset& ds,
                                                 const AblationPlan& plan,
                                                 const std::function<void(const AblationCell&)>& on_cell = {}) {
  base.validate();
  std::vector<AblationCell> cells;
  for (char s : plan.settings) {
    ExperimentConfig c = base;
    c.flags = setting_flags(s);
    cells.push_back({std::string(1, s), "setting", c, {}, {}});
  }
  for (std::size_t k : plan.top_ks) {
    ExperimentConfig c = base;
    c.top_k = k;
    cells.push_back({"k=" + std::to_string(k), "top_k", c, {}, {}});
  }
  for (double d : plan.deltas) {
    ExperimentConfig c = base;
    c.delta = d;
    std::ostringstream name;
    name << "delta=" << d;
    cells.push_back({name.str(), "delta", c, {}, {}});
  }
  for (auto& cell : cells) cell.config.validate();

  std::optional<PretrainResult> pre;
  std::map<std::string, std::size_t> done;
  const auto key = [](const ExperimentConfig& c) {
    // Irrelevant knobs are normalized so equivalent cells share one run.
    ExperimentConfig k = c;
    if (k.prior_count() == 0) {
      k.flags.memory = false;
      k.flags.causal = false;
      k.top_k = 0;
      k.delta = 0.0015;
    }
    k.out_dir.clear();
    return to_json(k).dump();
  };
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& cell = cells[i];
    const std::string k = key(cell.config);
    if (const auto it = done.find(k); it != done.end()) {
      cell.report = cells[it->second].report;
      cell.trace = cells[it->second].trace;
    } else {
      if (cell.config.flags.pretrain && !pre) pre = run_pretrain(base, ds);
      const TrainResult tr = train_run(cell.config, ds, pre ? &pre->model : nullptr);
      cell.report = evaluate_model(cell.config, ds, tr.model, tr.bank ? &*tr.bank : nullptr);
      cell.trace = tr.trace;
      done[k] = i;
    }
    if (on_cell) on_cell(cell);
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Artifact output

inline nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json j = {{"cd_l1", m.cd_l1}, {"cd_l2", m.cd_l2}, {"fscore", m.fscore}, {"fidelity", m.fidelity}};
  if (m.mmd) j["mmd"] = *m.mmd;
  return j;
}

inline std::string trace_jsonl(const std::vector<TrainRecord>& trace) {
  std::string out;
  for (const auto& r : trace) {
    nlohmann::json j = {{"epoch", r.epoch},     {"lr", r.lr},
                        {"loss", r.loss},       {"l_caus", r.l_caus},
                        {"l_recon", r.l_recon}, {"positive_updates", r.positive_updates},
                        {"negative_updates", r.negative_updates}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string trace_jsonl(const std::vector<pretrain::EpochRecord>& trace) {
  std::string out;
  for (const auto& r : trace) {
    out += nlohmann::json{{"epoch", r.epoch}, {"l_intra", r.l_intra}, {"l_cross", r.l_cross}, {"l_pre", r.l_pre}}.dump() + "\n";
  }
  return out;
}

/// One line per record, then one summary line per difficulty and overall.
inline std::string report_jsonl(const EvalReport& report) {
  std::string out;
  for (const auto& r : report.records) {
    nlohmann::json j = {{"sample", r.sample_id}, {"viewpoint", r.viewpoint}, {"difficulty", to_string(r.difficulty)}};
    j.update(metrics_json(r.metrics));
    out += j.dump() + "\n";
  }
  for (std::size_t d = 0; d < 3; ++d) {
    nlohmann::json j = {{"summary", to_string(kDifficulties[d])}, {"count", report.by_difficulty[d].count}};
    j.update(metrics_json(report.by_difficulty[d].mean));
    out += j.dump() + "\n";
  }
  nlohmann::json j = {{"summary", "overall"}, {"count", report.overall.count}};
  j.update(metrics_json(report.overall.mean));
  out += j.dump() + "\n";
  return out;
}

inline std::string format_number(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

/// CSV with columns setting, cd_l1, cd_l2, fscore, cd_s, cd_m, cd_h; the
/// per-difficulty columns are CD-l2 x1000.
inline std::string summary_csv(const std::vector<std::pair<std::string, const EvalReport*>>& rows) {
  std::string out = "setting,cd_l1,cd_l2,fscore,cd_s,cd_m,cd_h\n";
  for (const auto& [name, r] : rows) {
    out += name + "," + format_number(r->overall.mean.cd_l1) + "," + format_number(r->overall.mean.cd_l2) + "," +
           format_number(r->overall.mean.fscore) + "," + format_number(r->by_difficulty[0].mean.cd_l2) + "," +
           format_number(r->by_difficulty[1].mean.cd_l2) + "," + format_number(r->by_difficulty[2].mean.cd_l2) + "\n";
  }
  return out;
}

/// Writes config.json (loadable with --config, so a rerun from it reproduces the
/// run) and run_<stage>.json describing the stage and its artifacts.
inline void write_run_manifest(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& stage,
                               const std::vector<std::string>& artifacts) {
  io::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  nlohmann::json run = {{"version", 1}, {"stage", stage}, {"config", to_json(cfg)}, {"artifacts", artifacts}};
  io::write_text(dir / ("run_" + stage + ".json"), run.dump(2) + "\n");
}

}  // namespace pointpc::pipeline
