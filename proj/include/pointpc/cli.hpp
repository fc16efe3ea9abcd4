#pragma once

// Command-line front end. Every subcommand resolves an ExperimentConfig from
// defaults, an optional --config file, PPC_SEED and --set overrides, echoes it to
// the error stream, then runs one pipeline stage.
//
// Exit status: 0 success, 1 library error (contract, domain, format, io, state,
// evaluation), 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pointpc/config.hpp"
#include "pointpc/data.hpp"
#include "pointpc/memory.hpp"
#include "pointpc/pipeline.hpp"
#include "pointpc/selfcheck.hpp"

namespace pointpc::cli {

namespace fs = std::filesystem;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t threads = 0;
  bool threads_given = false;
};

inline void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "override a config key, e.g. --set memory.delta=0.002")->allow_extra_args(false);
  cmd->add_option("--threads", o.threads, "cap on worker threads")->check(CLI::PositiveNumber);
}

inline ExperimentConfig resolve_config(const CommonOptions& o, const CLI::App* cmd) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (const char* env = std::getenv("PPC_SEED"); env != nullptr && *env != '\0') {
    cfg = apply_override(cfg, std::string("seed=") + env);
  }
  for (const auto& s : o.overrides) cfg = apply_override(cfg, s);
  if (cmd->count("--threads") > 0) cfg.threads = o.threads;
  cfg.validate();
  return cfg;
}

inline models::CompletionModel blank_model(const ExperimentConfig& cfg) {
  return models::CompletionModel::initialize(cfg.encoder_config(), cfg.decoder_config(), cfg.seed);
}

inline data::Dataset load_dataset_for(const ExperimentConfig& cfg, std::ostream& err) {
  data::Dataset ds = data::load_dataset(cfg.dataset_dir);
  if (ds.config.partial_points != cfg.data.partial_points || ds.config.complete_points != cfg.data.complete_points) {
    err << "warning: dataset in " << cfg.dataset_dir << " was generated with different point counts than the config\n";
  }
  return ds;
}

/// Pretrained encoders only; the decoder shape depends on the memory settings
/// of the later stage.
inline void save_encoders(const models::CompletionModel& m, const fs::path& path) {
  std::vector<models::NamedArray> arrays;
  models::append_named(arrays, "partial_encoder.", m.partial_encoder.params());
  models::append_named(arrays, "complete_encoder.", m.complete_encoder.params());
  models::save_weights(path, arrays);
}

inline void load_encoders(models::CompletionModel& m, const fs::path& path) {
  const auto loaded = models::load_weights(path);
  models::assign_named(m.partial_encoder.params(), "partial_encoder.", loaded, path.string());
  models::assign_named(m.complete_encoder.params(), "complete_encoder.", loaded, path.string());
}

inline std::optional<memory::MemoryBank> load_bank_if_needed(const ExperimentConfig& cfg, const std::string& path) {
  if (cfg.prior_count() == 0) return std::nullopt;
  if (path.empty() || !fs::exists(path)) {
    throw StateError("memory is enabled but no memory bank file was found" + (path.empty() ? "" : " at " + path) +
                     "; pass --bank or disable memory with --set ablation.memory=false");
  }
  return memory::MemoryBank::load(path, cfg.delta, cfg.top_k);
}

inline std::string summary_line(const pipeline::EvalReport& r) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << "cd_l1 " << r.overall.mean.cd_l1 << "  cd_l2 " << r.overall.mean.cd_l2
    << "  fscore " << r.overall.mean.fscore << "  cd_s " << r.by_difficulty[0].mean.cd_l2 << "  cd_m "
    << r.by_difficulty[1].mean.cd_l2 << "  cd_h " << r.by_difficulty[2].mean.cd_l2;
  return s.str();
}

inline void memory_dump(const memory::MemoryBank& bank, std::size_t top_pairs, std::ostream& out) {
  out << "slots " << bank.size() << " capacity " << bank.capacity() << "\n";
  out << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& s = bank.slot(i);
    double sq = 0.0;
    for (double v : s.key) sq += v * v;
    out << "slot " << i << " age " << s.age << " key_norm " << std::sqrt(sq) << " points " << s.value.size() << "\n";
  }
  struct Pair {
    double sim;
    std::size_t i, j;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < bank.size(); ++i)
    for (std::size_t j = i + 1; j < bank.size(); ++j)
      pairs.push_back({cosine_similarity(bank.slot(i).key, bank.slot(j).key), i, j});
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.sim > b.sim; });
  pairs.resize(std::min(pairs.size(), top_pairs));
  out << "top key similarities\n";
  out << std::setprecision(6);
  for (const auto& p : pairs) out << "pair " << p.i << " " << p.j << " cos " << p.sim << "\n";
}

/// Entry point shared by the executable and the tests. `args` excludes argv[0].
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Point-cloud completion with shape-prior memory", "pointpc"};
  app.require_subcommand(1);
  app.fallthrough(false);

  CommonOptions common;
  std::string in_path, out_path, weights_path, bank_path, pretrained_path;
  std::string settings = "ABCDEF";
  std::vector<std::size_t> top_ks{0, 1, 2, 3, 4, 5};
  std::vector<double> deltas{0.0005, 0.001, 0.0015, 0.002, 0.0025};
  std::size_t top_pairs = 5;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset into data.dir");
  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of both encoders");
  auto* train = app.add_subcommand("train", "train the completion model (and memory bank)");
  auto* eval = app.add_subcommand("eval", "evaluate trained weights on the test split");
  auto* complete = app.add_subcommand("complete", "complete one partial cloud");
  auto* ablate = app.add_subcommand("ablate", "run the ablation matrix");
  auto* dump = app.add_subcommand("memory-dump", "list the slots of a memory bank");
  auto* check = app.add_subcommand("selfcheck", "gradient checks and metric oracles");
  for (auto* c : {gen, pre, train, eval, complete, ablate, dump, check}) add_common(c, common);

  train->add_option("--pretrained", pretrained_path, "pretrained encoders (default <out_dir>/pretrain.ppcw)");
  eval->add_option("--weights", weights_path, "weights (default <out_dir>/weights.ppcw)");
  eval->add_option("--bank", bank_path, "memory bank (default <out_dir>/memory.ppcm)");
  complete->add_option("--in", in_path, "partial cloud (NPC1)")->required()->check(CLI::ExistingFile);
  complete->add_option("--weights", weights_path, "weights file")->required();
  complete->add_option("--bank", bank_path, "memory bank (required when memory is on)");
  complete->add_option("--out", out_path, "output cloud; .xyz writes text, anything else NPC1")->required();
  ablate->add_option("--settings", settings, "settings to run, subset of ABCDEF");
  ablate->add_option("--top-ks", top_ks, "prior counts to sweep")->delimiter(',');
  ablate->add_option("--deltas", deltas, "delta values to sweep")->delimiter(',');
  dump->add_option("--bank", bank_path, "memory bank file")->required();
  dump->add_option("--top", top_pairs, "number of most similar key pairs to list");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  CLI::App* cmd = app.get_subcommands().front();

  try {
    const ExperimentConfig cfg = resolve_config(common, cmd);
    err << "config " << to_json(cfg).dump() << "\n";
    const fs::path run_dir = cfg.out_dir;

    if (cmd == gen) {
      const auto manifest = data::build_dataset(cfg.data, cfg.dataset_dir);
      out << "wrote " << manifest["samples"].size() << " clouds (" << manifest["train"].size() << " train, "
          << manifest["test"].size() << " test) to " << cfg.dataset_dir << "\n";
    } else if (cmd == pre) {
      const auto ds = load_dataset_for(cfg, err);
      const auto result = pipeline::run_pretrain(cfg, ds);
      fs::create_directories(run_dir);
      save_encoders(result.model, run_dir / "pretrain.ppcw");
      io::write_text(run_dir / "pretrain_trace.jsonl", pipeline::trace_jsonl(result.trace));
      pipeline::write_run_manifest(run_dir, cfg, "pretrain", {"pretrain.ppcw", "pretrain_trace.jsonl"});
      if (!result.trace.empty()) {
        const auto& last = result.trace.back();
        out << "pretrain epochs " << result.trace.size() << "  l_intra " << last.l_intra << "  l_cross " << last.l_cross
            << "\n";
      }
    } else if (cmd == train) {
      const auto ds = load_dataset_for(cfg, err);
      std::optional<models::CompletionModel> encoders;
      if (cfg.flags.pretrain) {
        const fs::path p = pretrained_path.empty() ? run_dir / "pretrain.ppcw" : fs::path(pretrained_path);
        if (!fs::exists(p)) {
          throw StateError("train: pretrained encoder weights missing at " + p.string() +
                           "; run the pretrain stage first or --set ablation.pretrain=false");
        }
        encoders = blank_model(cfg);
        load_encoders(*encoders, p);
      }
      const auto result = pipeline::train_run(cfg, ds, encoders ? &*encoders : nullptr);
      fs::create_directories(run_dir);
      result.model.save(run_dir / "weights.ppcw");
      std::vector<std::string> artifacts{"weights.ppcw", "train_trace.jsonl"};
      if (result.bank) {
        result.bank->save(run_dir / "memory.ppcm");
        artifacts.push_back("memory.ppcm");
      }
      io::write_text(run_dir / "train_trace.jsonl", pipeline::trace_jsonl(result.trace));
      pipeline::write_run_manifest(run_dir, cfg, "train", artifacts);
      if (!result.trace.empty()) out << "train epochs " << result.trace.size() << "  loss " << result.trace.back().loss << "\n";
    } else if (cmd == eval) {
      const auto ds = load_dataset_for(cfg, err);
      auto model = blank_model(cfg);
      model.load(weights_path.empty() ? run_dir / "weights.ppcw" : fs::path(weights_path));
      const auto bank = load_bank_if_needed(cfg, bank_path.empty() ? (run_dir / "memory.ppcm").string() : bank_path);
      const auto report = pipeline::evaluate_model(cfg, ds, model, bank ? &*bank : nullptr);
      fs::create_directories(run_dir);
      io::write_text(run_dir / "eval.jsonl", pipeline::report_jsonl(report));
      io::write_text(run_dir / "summary.csv", pipeline::summary_csv({{"eval", &report}}));
      pipeline::write_run_manifest(run_dir, cfg, "eval", {"eval.jsonl", "summary.csv"});
      out << summary_line(report) << "\n";
    } else if (cmd == complete) {
      auto model = blank_model(cfg);
      model.load(weights_path);
      const auto bank = load_bank_if_needed(cfg, bank_path);
      const pipeline::Completer completer(cfg, model, bank ? &*bank : nullptr);
      const PointCloud result = completer.complete(data::read_cloud(in_path));
      if (fs::path(out_path).extension() == ".xyz") {
        data::write_xyz(out_path, result);
      } else {
        data::write_cloud(out_path, result);
      }
      out << "wrote " << result.size() << " points to " << out_path << "\n";
    } else if (cmd == ablate) {
      const auto ds = load_dataset_for(cfg, err);
      pipeline::AblationPlan plan{settings, top_ks, deltas};
      fs::create_directories(run_dir);
      std::string cells_jsonl;
      const auto cells = pipeline::ablation_matrix(cfg, ds, plan, [&](const pipeline::AblationCell& c) {
        err << "cell " << c.name << "  " << summary_line(c.report) << "\n";
        nlohmann::json j = {{"cell", c.name}, {"group", c.group}, {"overall", pipeline::metrics_json(c.report.overall.mean)}};
        for (std::size_t d = 0; d < 3; ++d) {
          j[pipeline::to_string(pipeline::kDifficulties[d])] = pipeline::metrics_json(c.report.by_difficulty[d].mean);
        }
        cells_jsonl += j.dump() + "\n";
      });
      std::vector<std::pair<std::string, const pipeline::EvalReport*>> rows;
      for (const auto& c : cells) rows.emplace_back(c.name, &c.report);
      const std::string csv = pipeline::summary_csv(rows);
      io::write_text(run_dir / "ablation.csv", csv);
      io::write_text(run_dir / "ablation.jsonl", cells_jsonl);
      pipeline::write_run_manifest(run_dir, cfg, "ablate", {"ablation.csv", "ablation.jsonl"});
      out << csv;
    } else if (cmd == dump) {
      memory_dump(memory::MemoryBank::load(bank_path, cfg.delta, cfg.top_k), top_pairs, out);
    } else if (cmd == check) {
      return selfcheck::run(out, cfg.seed) ? 0 : 1;
    }
    return 0;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const StateError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const EvaluationError& e) {
    err << "error: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace pointpc::cli
