#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "granage/common.hpp"
#include "granage/data.hpp"
#include "granage/losses.hpp"
#include "granage/model.hpp"
#include "granage/optim.hpp"

namespace granage::config {

// Resolved run configuration: every key has either a documented default or
// is checked by the command that needs it.
struct RunConfig {
  model::ModelSpec model;
  losses::LossConfig loss{{1, 5, 10, 20}, true, 1.0};
  train::TrainConfig train;
  data::AugmentConfig augment;
  data::Normalization norm;
  std::string train_manifest;
  std::string val_manifest;
  std::string test_manifest;
  std::string images_root;
  bool cache = true;
  std::string out_dir;
  std::string eval_policy = "expected_value";
};

inline std::string default_out_root() {
  const char* env = std::getenv("GRANAGE_OUT");
  return env && *env ? env : "granage-out";
}

namespace detail {

struct Problems {
  std::vector<std::string> list;
  void add(const std::string& key, const std::string& msg) { list.push_back(key + ": " + msg); }
};

inline std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes") { out = true; return true; }
  if (v == "false" || v == "0" || v == "no") { out = false; return true; }
  return false;
}

inline bool parse_int(const std::string& v, int64_t& out) {
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size();
}

inline bool parse_u64(const std::string& v, uint64_t& out) {
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && p == v.data() + v.size();
}

inline bool parse_double(const std::string& v, double& out) {
  char* end = nullptr;
  out = std::strtod(v.c_str(), &end);
  return end == v.c_str() + v.size() && !v.empty() && std::isfinite(out);
}

// Comma-separated bin widths, e.g. "1,5,10,20".
inline bool parse_widths(const std::string& v, std::vector<int>& out, std::string& bad) {
  out.clear();
  size_t start = 0;
  while (start <= v.size()) {
    const size_t pos = v.find(',', start);
    const std::string tok = strip(v.substr(start, pos == std::string::npos ? pos : pos - start));
    if (!tok.empty()) {
      int64_t w = 0;
      if (!parse_int(tok, w) || !is_canonical_width(static_cast<int>(w))) {
        bad = tok;
        return false;
      }
      out.push_back(static_cast<int>(w));
    }
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    bad = "duplicate width";
    return false;
  }
  return !out.empty();
}

}  // namespace detail

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "model.backbone", "model.input_size", "model.branch_widths", "model.with_regression",
      "model.pretrained", "model.pretrained_path",
      "loss.granularities", "loss.use_regression", "loss.lambda",
      "train.optimizer", "train.initial_lr", "train.plateau_patience", "train.lr_decay_factor",
      "train.max_epochs", "train.batch_size", "train.seed", "train.early_stop_patience",
      "augment.enabled", "augment.pad", "augment.flip_prob",
      "data.train_manifest", "data.val_manifest", "data.test_manifest", "data.images_root",
      "data.cache", "data.normalize_mean", "data.normalize_std",
      "out.dir", "eval.policy"};
  return keys;
}

// Flat `key = value` file; '#' starts a comment; unknown and duplicate keys
// are rejected. Overrides (from --set flags) are applied after the file.
inline std::map<std::string, std::string> read_key_values(
    const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides,
    detail::Problems& problems) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw RuntimeError("config: cannot open: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::strip(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        problems.add("line " + std::to_string(line_no), "expected 'key = value'");
        continue;
      }
      const std::string key = detail::strip(line.substr(0, eq));
      const std::string value = detail::strip(line.substr(eq + 1));
      if (!known_keys().count(key)) {
        problems.add(key, "unknown key (line " + std::to_string(line_no) + ")");
        continue;
      }
      if (kv.count(key)) {
        problems.add(key, "duplicate key (line " + std::to_string(line_no) + ")");
        continue;
      }
      kv[key] = value;
    }
  }
  for (const auto& [key, value] : overrides) {
    if (!known_keys().count(key)) {
      problems.add(key, "unknown key (--set)");
      continue;
    }
    kv[key] = value;  // flag wins over file
  }
  return kv;
}

inline RunConfig parse_run_config(const std::string& path,
                                  const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  detail::Problems problems;
  auto kv = read_key_values(path, overrides, problems);
  RunConfig cfg;
  cfg.out_dir = default_out_root();

  auto take = [&](const char* key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };
  auto get_bool = [&](const char* key, bool& out) {
    if (auto v = take(key); v && !detail::parse_bool(*v, out))
      problems.add(key, "expected true/false, got '" + *v + "'");
  };
  auto get_int = [&](const char* key, int& out, int min_value) {
    if (auto v = take(key)) {
      int64_t parsed = 0;
      if (!detail::parse_int(*v, parsed) || parsed < min_value)
        problems.add(key, "expected integer >= " + std::to_string(min_value) + ", got '" + *v + "'");
      else
        out = static_cast<int>(parsed);
    }
  };
  auto get_double = [&](const char* key, double& out) -> bool {
    if (auto v = take(key)) {
      double parsed = 0;
      if (!detail::parse_double(*v, parsed)) {
        problems.add(key, "expected number, got '" + *v + "'");
        return false;
      }
      out = parsed;
      return true;
    }
    return false;
  };
  auto get_string = [&](const char* key, std::string& out) {
    if (auto v = take(key)) out = *v;
  };
  auto get_widths = [&](const char* key, std::vector<int>& out) {
    if (auto v = take(key)) {
      std::string bad;
      if (!detail::parse_widths(*v, out, bad))
        problems.add(key, "bad bin width '" + bad + "' in '" + *v +
                              "' (valid widths: 1, 5, 10, 20)");
    }
  };

  get_string("model.backbone", cfg.model.backbone_id);
  if (!model::backbone_registry().count(cfg.model.backbone_id))
    problems.add("model.backbone", "unknown backbone '" + cfg.model.backbone_id + "'");
  get_int("model.input_size", cfg.model.input_size, 32);
  get_widths("model.branch_widths", cfg.model.branch_widths);
  get_bool("model.with_regression", cfg.model.with_regression);
  get_bool("model.pretrained", cfg.model.pretrained);
  get_string("model.pretrained_path", cfg.model.pretrained_path);

  get_widths("loss.granularities", cfg.loss.granularities);
  get_bool("loss.use_regression", cfg.loss.use_regression);
  if (double v = 0; get_double("loss.lambda", v)) {
    if (v > 0)
      cfg.loss.lambda = v;
    else
      problems.add("loss.lambda", "must be > 0");
  }

  get_string("train.optimizer", cfg.train.optimizer_id);
  if (cfg.train.optimizer_id != "adam" && cfg.train.optimizer_id != "sgd")
    problems.add("train.optimizer", "unknown optimizer '" + cfg.train.optimizer_id + "'");
  if (double v = 0; get_double("train.initial_lr", v)) {
    if (v >= 0)
      cfg.train.initial_lr = v;
    else
      problems.add("train.initial_lr", "must be >= 0");
  }
  get_int("train.plateau_patience", cfg.train.plateau_patience_epochs, 1);
  if (double v = 0; get_double("train.lr_decay_factor", v)) {
    if (v > 1)
      cfg.train.lr_decay_factor = v;
    else
      problems.add("train.lr_decay_factor", "must be > 1");
  }
  get_int("train.max_epochs", cfg.train.max_epochs, 1);
  get_int("train.batch_size", cfg.train.batch_size, 1);
  if (auto v = take("train.seed")) {
    uint64_t parsed = 0;
    if (!detail::parse_u64(*v, parsed))
      problems.add("train.seed", "expected unsigned integer, got '" + *v + "'");
    else
      cfg.train.seed = parsed;
  }
  get_int("train.early_stop_patience", cfg.train.early_stop_patience, 0);

  get_bool("augment.enabled", cfg.augment.enabled);
  get_int("augment.pad", cfg.augment.pad_pixels, 0);
  if (double v = 0; get_double("augment.flip_prob", v)) {
    if (v >= 0.0 && v <= 1.0)
      cfg.augment.horizontal_flip_probability = v;
    else
      problems.add("augment.flip_prob", "must be in [0,1]");
  }

  get_string("data.train_manifest", cfg.train_manifest);
  get_string("data.val_manifest", cfg.val_manifest);
  get_string("data.test_manifest", cfg.test_manifest);
  get_string("data.images_root", cfg.images_root);
  get_bool("data.cache", cfg.cache);
  get_double("data.normalize_mean", cfg.norm.mean);
  if (double v = 0; get_double("data.normalize_std", v)) {
    if (v > 0)
      cfg.norm.std = v;
    else
      problems.add("data.normalize_std", "must be > 0");
  }

  get_string("out.dir", cfg.out_dir);
  get_string("eval.policy", cfg.eval_policy);
  if (cfg.eval_policy != "expected_value" && cfg.eval_policy != "argmax_representative" &&
      cfg.eval_policy != "regression")
    problems.add("eval.policy", "unknown policy '" + cfg.eval_policy + "'");

  cfg.train.loss = cfg.loss;
  cfg.train.out_dir = cfg.out_dir;

  if (!problems.list.empty()) throw ConfigError(problems.list);
  return cfg;
}

// Cross-field checks needed before a training run; reports every problem.
inline void validate_for_training(const RunConfig& cfg) {
  detail::Problems problems;
  if (cfg.train_manifest.empty()) problems.add("data.train_manifest", "required for training");
  if (cfg.val_manifest.empty()) problems.add("data.val_manifest", "required for training");
  for (int w : cfg.loss.granularities)
    if (!std::count(cfg.model.branch_widths.begin(), cfg.model.branch_widths.end(), w))
      problems.add("model.branch_widths",
                   "missing width " + std::to_string(w) + " required by loss.granularities");
  if (cfg.loss.use_regression && !cfg.model.with_regression)
    problems.add("model.with_regression", "loss.use_regression requires the regression head");
  if (!problems.list.empty()) throw ConfigError(problems.list);
}

}  // namespace granage::config
