#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "granage/checkpoint.hpp"
#include "granage/config.hpp"
#include "granage/data.hpp"
#include "granage/eval.hpp"
#include "granage/model.hpp"
#include "granage/train.hpp"
#include "granage/verify.hpp"

namespace granage::cli {

// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

namespace detail {

inline std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& sets) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ValueError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

// Ladder tokens name branches by class count: "100+20+10+5+mse".
inline losses::LossConfig parse_ladder_token(const std::string& token, double lambda) {
  losses::LossConfig cfg;
  cfg.lambda = lambda;
  size_t start = 0;
  while (start <= token.size()) {
    const size_t pos = token.find('+', start);
    const std::string part =
        token.substr(start, pos == std::string::npos ? pos : pos - start);
    if (part == "mse") {
      cfg.use_regression = true;
    } else if (part == "100" || part == "20" || part == "10" || part == "5") {
      cfg.granularities.push_back(100 / std::stoi(part));
    } else {
      throw ValueError("ladder: unknown part '" + part + "' in '" + token +
                       "' (parts: 100, 20, 10, 5, mse)");
    }
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  std::sort(cfg.granularities.begin(), cfg.granularities.end());
  losses::validate(cfg);
  return cfg;
}

inline std::vector<std::string> default_ladder() {
  return {"100", "100+20", "100+20+10", "100+20+10+5", "100+20+10+5+mse"};
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

inline data::ManifestDataset open_dataset(const std::string& manifest, const config::RunConfig& cfg) {
  data::ManifestDataset ds(manifest, cfg.model.input_size, cfg.norm, cfg.cache, cfg.images_root);
  for (const auto& f : ds.failures()) std::cerr << "warning: " << f << "\n";
  if (ds.clamped_age_rows() > 0)
    std::cerr << "warning: " << ds.clamped_age_rows() << " rows have ages outside [1,100]"
              << " (clamped at quantization)\n";
  return ds;
}

inline std::string eval_report_csv(const eval::EvalReport& r) {
  auto g17 = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string out = "policy,sample_count,mae,mae_ce100,mae_ce20,mae_ce10,mae_ce5,mae_mse\n";
  out += r.policy + "," + std::to_string(r.sample_count) + "," + g17(r.mae);
  for (const char* b : {"ce100", "ce20", "ce10", "ce5", "mse"}) {
    auto it = r.per_branch_mae.find(b);
    out += ",";
    if (it != r.per_branch_mae.end()) out += g17(it->second);
  }
  return out + "\n";
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw RuntimeError("cannot write: " + path);
  os << content;
}

}  // namespace detail

inline int run(std::vector<std::string> args) {
  CLI::App app{"multi-granularity age estimation trainer"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset (images + manifest)");
  int synth_n = 0;
  uint64_t synth_seed = 0;
  int synth_size = 32;
  std::string synth_out = config::default_out_root() + "/synth";
  synth->add_option("--n", synth_n, "number of images")->required()->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--size", synth_size, "image side length")->check(CLI::Range(32, 4096));
  synth->add_option("--out", synth_out, "output directory");

  // train
  auto* tr = app.add_subcommand("train", "train a model from a config file");
  std::string tr_config, tr_resume;
  std::vector<std::string> tr_sets;
  tr->add_option("--config", tr_config, "run config file")->required();
  tr->add_option("--set", tr_sets, "override a config key (key=value)");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string ev_config, ev_ckpt, ev_policy;
  std::vector<std::string> ev_sets;
  ev->add_option("--config", ev_config, "run config file")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--policy", ev_policy, "expected_value | argmax_representative | regression");
  ev->add_option("--set", ev_sets, "override a config key (key=value)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate a ladder of loss combinations");
  std::string ab_config;
  std::vector<std::string> ab_ladder, ab_sets;
  int ab_parallel = 1;
  ab->add_option("--config", ab_config, "run config file")->required();
  ab->add_option("--ladder", ab_ladder, "ladder rows, e.g. 100 100+20 100+20+10+5+mse")
      ->expected(-1);
  ab->add_option("--parallel", ab_parallel, "concurrent cells")->check(CLI::PositiveNumber);
  ab->add_option("--set", ab_sets, "override a config key (key=value)");

  // verify
  auto* vf = app.add_subcommand("verify", "run the built-in invariant checks");
  std::vector<std::string> vf_families;
  vf->add_option("--families", vf_families, "subset of: quantize hierarchy gradcheck composition scheduler mae")
      ->expected(-1);

  std::vector<const char*> argv;
  argv.push_back("granage");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (synth->parsed()) {
    return detail::guarded([&] {
      const std::string manifest =
          data::export_synth_dataset(synth_n, synth_seed, synth_size, synth_out);
      std::cout << "wrote " << synth_n << " images under " << synth_out << "\n"
                << "manifest: " << manifest << "\n";
      return kExitOk;
    });
  }

  if (tr->parsed()) {
    return detail::guarded([&] {
      auto cfg = config::parse_run_config(tr_config, detail::parse_overrides(tr_sets));
      config::validate_for_training(cfg);
      auto train_set = detail::open_dataset(cfg.train_manifest, cfg);
      auto val_set = detail::open_dataset(cfg.val_manifest, cfg);

      model::Model m;
      std::optional<train::Checkpoint> resume;
      if (!tr_resume.empty()) {
        resume = train::load_checkpoint(tr_resume);
        m = resume->model;
        std::cout << "resuming from " << tr_resume << " at epoch "
                  << resume->history.epochs.size() << "\n";
      } else {
        m = model::build_model(cfg.model, cfg.train.seed);
      }

      auto result = train::train(std::move(m), train_set, val_set, cfg.train, cfg.augment,
                                 std::move(resume));
      for (const auto& r : result.history.epochs)
        std::printf("epoch %3d/%d  lr %.2e  train %.5f  val %.5f  (%.1fs)\n", r.epoch,
                    cfg.train.max_epochs, r.lr, r.train_loss, r.val_loss, r.seconds);
      const auto& last = result.history.epochs.back();
      std::printf("final validation loss: %.6f after %zu epochs; outputs in %s\n",
                  last.val_loss, result.history.epochs.size(), cfg.out_dir.c_str());
      return kExitOk;
    });
  }

  if (ev->parsed()) {
    return detail::guarded([&] {
      auto cfg = config::parse_run_config(ev_config, detail::parse_overrides(ev_sets));
      if (cfg.test_manifest.empty())
        throw ConfigError({"data.test_manifest: required for evaluation"});
      auto ckpt = train::load_checkpoint(ev_ckpt);
      // The checkpoint defines the model; the config supplies data + policy.
      config::RunConfig data_cfg = cfg;
      data_cfg.model.input_size = ckpt.model.spec().input_size;
      auto test_set = detail::open_dataset(cfg.test_manifest, data_cfg);
      const model::Policy policy =
          model::parse_policy(ev_policy.empty() ? cfg.eval_policy : ev_policy);

      eval::EvalOptions opts;
      opts.per_branch = true;
      const auto report = eval::evaluate(ckpt.model, test_set, policy, opts);
      std::printf("MAE %.4f over %zu samples (policy %s)\n", report.mae, report.sample_count,
                  report.policy.c_str());
      for (const auto& [branch, value] : report.per_branch_mae)
        std::printf("  branch %-6s MAE %.4f\n", branch.c_str(), value);
      std::filesystem::create_directories(cfg.out_dir);
      detail::write_file(cfg.out_dir + "/eval_report.csv", detail::eval_report_csv(report));
      std::cout << "report: " << cfg.out_dir << "/eval_report.csv\n";
      return kExitOk;
    });
  }

  if (ab->parsed()) {
    return detail::guarded([&] {
      auto cfg = config::parse_run_config(ab_config, detail::parse_overrides(ab_sets));
      {
        std::vector<std::string> missing;
        if (cfg.train_manifest.empty()) missing.push_back("data.train_manifest: required for ablation");
        if (cfg.val_manifest.empty()) missing.push_back("data.val_manifest: required for ablation");
        if (cfg.test_manifest.empty()) missing.push_back("data.test_manifest: required for ablation");
        if (!missing.empty()) throw ConfigError(missing);
      }
      std::vector<losses::LossConfig> combos;
      for (const auto& token : ab_ladder.empty() ? detail::default_ladder() : ab_ladder)
        combos.push_back(detail::parse_ladder_token(token, cfg.loss.lambda));
      eval::check_baseline(combos);

      auto train_set = detail::open_dataset(cfg.train_manifest, cfg);
      auto val_set = detail::open_dataset(cfg.val_manifest, cfg);
      auto test_set = detail::open_dataset(cfg.test_manifest, cfg);

      eval::AblationOptions opts;
      opts.parallel = ab_parallel;
      opts.out_dir = cfg.out_dir;
      opts.policy = model::parse_policy(cfg.eval_policy);
      const auto rows = eval::run_ablation(cfg.train, cfg.model, combos, train_set, val_set,
                                           test_set, cfg.augment, opts);

      std::cout << eval::ablation_table(rows);
      std::cout << "note: desk-scale synthetic-data results; absolute errors are not"
                   " comparable to full-scale trainings on real data.\n";
      std::filesystem::create_directories(cfg.out_dir);
      detail::write_file(cfg.out_dir + "/ablation.csv", eval::ablation_csv(rows));
      std::cout << "report: " << cfg.out_dir << "/ablation.csv\n";

      size_t failed = 0;
      for (const auto& r : rows)
        if (r.failed) {
          ++failed;
          std::cerr << "cell failed: " << r.label << ": " << r.error << "\n";
        }
      return failed == rows.size() ? kExitRuntime : kExitOk;
    });
  }

  if (vf->parsed()) {
    return detail::guarded([&] {
      const auto results = verify::run_families(vf_families);
      bool all_ok = true;
      for (const auto& r : results) {
        all_ok = all_ok && r.passed;
        std::printf("%s %-12s (%ld checks, %.2fs)%s%s\n", r.passed ? "PASS" : "FAIL",
                    r.family.c_str(), r.checks, r.seconds, r.passed ? "" : ": ",
                    r.detail.c_str());
      }
      return all_ok ? kExitOk : kExitRuntime;
    });
  }

  return kExitUsage;
}

inline int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace granage::cli
