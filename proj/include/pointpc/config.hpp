#pragma once

// ExperimentConfig: every hyperparameter of a run, its JSON form, validation and
// dot-path overrides ("memory.delta=0.002").

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointpc/data.hpp"
#include "pointpc/errors.hpp"
#include "pointpc/io.hpp"
#include "pointpc/models.hpp"

namespace pointpc {

struct OptimizerConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr = 0.05;
  double momentum = 0.9;
  double decay = 0.76;
  std::size_t decay_every = 20;
  double grad_clip = 5.0;  // global l2 norm; 0 disables

  models::LearningRateSchedule schedule() const { return {lr, decay, decay_every}; }
};

struct AblationFlags {
  bool memory = true;
  bool pretrain = true;
  bool causal = true;
};

enum class ThresholdRule { median, fixed };

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 0;  // 0: hardware concurrency

  data::DatasetConfig data;

  std::size_t feature_dim = 48;
  std::size_t encoder_hidden = 64;
  std::size_t decoder_hidden = 256;
  std::size_t centers = 64;
  std::size_t expansion = 8;

  std::size_t memory_capacity = 256;
  double delta = 0.0015;
  std::size_t top_k = 3;
  bool exclude_self = true;  // training queries skip slots holding the sample's own shape

  double temperature = 0.1;
  OptimizerConfig pretrain{30, 16, 0.01, 0.9, 0.76, 20, 5.0};
  OptimizerConfig train;

  double lambda = 0.5;
  std::size_t strata = 6;
  ThresholdRule threshold_rule = ThresholdRule::median;
  double threshold = 0.0;
  bool freeze_prior_encoder = true;

  AblationFlags flags;

  double fscore_threshold = 0.01;
  ChamferKind mmd_chamfer = ChamferKind::l2;
  bool eval_mmd = false;

  std::string dataset_dir = "data";
  std::string out_dir = "runs/default";

  /// Priors fed to the decoder. With memory off (or top_k = 0) there is no prior
  /// feature at all; a zero block would add nothing to forward or gradient.
  std::size_t prior_count() const { return flags.memory ? top_k : 0; }
  std::size_t prior_dim() const { return feature_dim * prior_count(); }

  /// Decoder input width: partial feature plus the concatenated prior features.
  std::size_t fused_dim() const { return feature_dim + prior_dim(); }

  models::EncoderConfig encoder_config() const { return {encoder_hidden, feature_dim}; }
  models::DecoderConfig decoder_config() const { return {fused_dim(), decoder_hidden, centers, expansion}; }

  void validate() const {
    require(feature_dim >= 1 && encoder_hidden >= 1 && decoder_hidden >= 1, "config: network sizes must be positive");
    require(centers >= 1 && expansion >= 1, "config: centers and expansion must be positive");
    require(temperature > 0.0, "config: temperature must be positive");
    require(delta > 0.0, "config: memory.delta must be positive");
    require(lambda >= 0.0 && lambda <= 1.0, "config: lambda must lie in [0, 1]");
    require(strata >= 1, "config: strata must be at least 1");
    require(prior_dim() % strata == 0, "config: strata (" + std::to_string(strata) +
                                           ") must divide top_k * feature_dim (" + std::to_string(prior_dim()) + ")");
    require(memory_capacity >= 1, "config: memory capacity must be positive");
    require(top_k <= memory_capacity, "config: top_k exceeds memory capacity");
    require(threshold >= 0.0, "config: threshold must be non-negative");
    require(fscore_threshold > 0.0, "config: fscore threshold must be positive");
    require(pretrain.batch_size >= 2, "config: pretrain batch size must be at least 2");
    require(train.batch_size >= 1, "config: train batch size must be positive");
    require(data.partial_points >= 1 && data.partial_points <= data.complete_points,
            "config: partial_points must lie in [1, complete_points]");
    require(static_cast<double>(data.partial_points) <= 0.25 * static_cast<double>(data.complete_points) + 0.5,
            "config: partial_points must fit the hardest crop (25% of complete_points)");
  }
};

namespace detail {

inline nlohmann::json optimizer_json(const OptimizerConfig& o) {
  return {{"epochs", o.epochs}, {"batch_size", o.batch_size}, {"lr", o.lr},
          {"momentum", o.momentum}, {"decay", o.decay}, {"decay_every", o.decay_every},
          {"grad_clip", o.grad_clip}};
}

inline std::string chamfer_name(ChamferKind k) {
  switch (k) {
    case ChamferKind::l2: return "l2";
    case ChamferKind::l1_metric: return "l1_metric";
    case ChamferKind::l1_literal: return "l1_literal";
  }
  return "l2";
}

inline ChamferKind chamfer_from_name(const std::string& s) {
  if (s == "l2") return ChamferKind::l2;
  if (s == "l1_metric") return ChamferKind::l1_metric;
  if (s == "l1_literal") return ChamferKind::l1_literal;
  throw ContractError("config: unknown chamfer kind \"" + s + "\"");
}

/// Reads `key` from object `j` into `out` when present; unknown keys are rejected
/// by the caller through `known`.
template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, std::vector<std::string>& known) {
  known.emplace_back(key);
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ContractError("config: unknown key \"" + where + k + "\"");
    }
  }
}

inline void read_optimizer(const nlohmann::json& j, OptimizerConfig& o, const std::string& where) {
  std::vector<std::string> known;
  read_key(j, "epochs", o.epochs, known);
  read_key(j, "batch_size", o.batch_size, known);
  read_key(j, "lr", o.lr, known);
  read_key(j, "momentum", o.momentum, known);
  read_key(j, "decay", o.decay, known);
  read_key(j, "decay_every", o.decay_every, known);
  read_key(j, "grad_clip", o.grad_clip, known);
  reject_unknown(j, known, where);
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["data"] = data::config_to_json(c.data);
  j["data"].erase("seed");
  j["data"]["dir"] = c.dataset_dir;
  j["model"] = {{"feature_dim", c.feature_dim}, {"encoder_hidden", c.encoder_hidden},
                {"decoder_hidden", c.decoder_hidden}, {"centers", c.centers}, {"expansion", c.expansion}};
  j["memory"] = {{"capacity", c.memory_capacity}, {"delta", c.delta}, {"top_k", c.top_k}, {"exclude_self", c.exclude_self}};
  j["pretrain"] = detail::optimizer_json(c.pretrain);
  j["pretrain"]["temperature"] = c.temperature;
  j["train"] = detail::optimizer_json(c.train);
  j["train"]["lambda"] = c.lambda;
  j["train"]["freeze_prior_encoder"] = c.freeze_prior_encoder;
  j["causal"] = {{"strata", c.strata},
                 {"threshold_rule", c.threshold_rule == ThresholdRule::median ? "median" : "fixed"},
                 {"threshold", c.threshold}};
  j["ablation"] = {{"memory", c.flags.memory}, {"pretrain", c.flags.pretrain}, {"causal", c.flags.causal}};
  j["eval"] = {{"fscore_threshold", c.fscore_threshold}, {"mmd", c.eval_mmd},
               {"mmd_chamfer", detail::chamfer_name(c.mmd_chamfer)}};
  j["out_dir"] = c.out_dir;
  return j;
}

/// Applies every key present in `j` on top of `base`. Unknown keys are errors.
inline ExperimentConfig from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
  ExperimentConfig c = std::move(base);
  try {
    std::vector<std::string> known;
    detail::read_key(j, "seed", c.seed, known);
    detail::read_key(j, "threads", c.threads, known);
    detail::read_key(j, "out_dir", c.out_dir, known);
    for (const char* section : {"data", "model", "memory", "pretrain", "train", "causal", "ablation", "eval"}) {
      known.emplace_back(section);
    }
    detail::reject_unknown(j, known, "");
    if (j.contains("data")) {
      const auto& d = j.at("data");
      std::vector<std::string> k;
      detail::read_key(d, "dir", c.dataset_dir, k);
      detail::read_key(d, "categories", c.data.categories, k);
      detail::read_key(d, "samples_per_category", c.data.samples_per_category, k);
      detail::read_key(d, "complete_points", c.data.complete_points, k);
      detail::read_key(d, "partial_points", c.data.partial_points, k);
      detail::read_key(d, "train_fraction", c.data.train_fraction, k);
      detail::read_key(d, "max_rotation", c.data.max_rotation, k);
      detail::reject_unknown(d, k, "data.");
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      std::vector<std::string> k;
      detail::read_key(m, "feature_dim", c.feature_dim, k);
      detail::read_key(m, "encoder_hidden", c.encoder_hidden, k);
      detail::read_key(m, "decoder_hidden", c.decoder_hidden, k);
      detail::read_key(m, "centers", c.centers, k);
      detail::read_key(m, "expansion", c.expansion, k);
      detail::reject_unknown(m, k, "model.");
    }
    if (j.contains("memory")) {
      const auto& m = j.at("memory");
      std::vector<std::string> k;
      detail::read_key(m, "capacity", c.memory_capacity, k);
      detail::read_key(m, "delta", c.delta, k);
      detail::read_key(m, "top_k", c.top_k, k);
      detail::read_key(m, "exclude_self", c.exclude_self, k);
      detail::reject_unknown(m, k, "memory.");
    }
    if (j.contains("pretrain")) {
      nlohmann::json p = j.at("pretrain");
      if (p.contains("temperature")) {
        c.temperature = p.at("temperature").get<double>();
        p.erase("temperature");
      }
      detail::read_optimizer(p, c.pretrain, "pretrain.");
    }
    if (j.contains("train")) {
      nlohmann::json t = j.at("train");
      if (t.contains("lambda")) {
        c.lambda = t.at("lambda").get<double>();
        t.erase("lambda");
      }
      if (t.contains("freeze_prior_encoder")) {
        c.freeze_prior_encoder = t.at("freeze_prior_encoder").get<bool>();
        t.erase("freeze_prior_encoder");
      }
      detail::read_optimizer(t, c.train, "train.");
    }
    if (j.contains("causal")) {
      const auto& m = j.at("causal");
      std::vector<std::string> k;
      detail::read_key(m, "strata", c.strata, k);
      detail::read_key(m, "threshold", c.threshold, k);
      std::string rule = c.threshold_rule == ThresholdRule::median ? "median" : "fixed";
      detail::read_key(m, "threshold_rule", rule, k);
      if (rule != "median" && rule != "fixed") throw ContractError("config: causal.threshold_rule must be median or fixed");
      c.threshold_rule = rule == "median" ? ThresholdRule::median : ThresholdRule::fixed;
      detail::reject_unknown(m, k, "causal.");
    }
    if (j.contains("ablation")) {
      const auto& m = j.at("ablation");
      std::vector<std::string> k;
      detail::read_key(m, "memory", c.flags.memory, k);
      detail::read_key(m, "pretrain", c.flags.pretrain, k);
      detail::read_key(m, "causal", c.flags.causal, k);
      detail::reject_unknown(m, k, "ablation.");
    }
    if (j.contains("eval")) {
      const auto& m = j.at("eval");
      std::vector<std::string> k;
      detail::read_key(m, "fscore_threshold", c.fscore_threshold, k);
      detail::read_key(m, "mmd", c.eval_mmd, k);
      std::string kind = detail::chamfer_name(c.mmd_chamfer);
      detail::read_key(m, "mmd_chamfer", kind, k);
      c.mmd_chamfer = detail::chamfer_from_name(kind);
      detail::reject_unknown(m, k, "eval.");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  c.data.seed = c.seed;
  return c;
}

/// Sets one dot-path key from text; the value is parsed as JSON when possible,
/// otherwise taken as a string.
inline ExperimentConfig apply_override(const ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ContractError("override \"" + assignment + "\" is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json patch = nlohmann::json::object();
  nlohmann::json* cursor = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ContractError("override \"" + assignment + "\" has an empty key segment");
    if (dot == std::string::npos) {
      (*cursor)[key] = value;
      break;
    }
    cursor = &(*cursor)[key];
    start = dot + 1;
  }
  return from_json(patch, c);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const std::vector<char> bytes = io::read_file(path);
  nlohmann::json j = nlohmann::json::parse(std::string(bytes.begin(), bytes.end()), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ContractError(path.string() + ": config is not a JSON object");
  return from_json(j);
}

}  // namespace pointpc
