#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "granage/branches.hpp"
#include "granage/common.hpp"
#include "granage/data.hpp"
#include "granage/losses.hpp"
#include "granage/model.hpp"
#include "granage/train.hpp"

namespace granage::eval {

// Mean absolute error, compensated summation.
inline double mae(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size())
    throw ValueError("mae: length mismatch: " + std::to_string(predictions.size()) + " vs " +
                     std::to_string(targets.size()));
  if (predictions.empty()) throw ValueError("mae: empty input");
  double sum = 0.0, comp = 0.0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    const double term = std::abs(predictions[i] - targets[i]);
    const double y = term - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return sum / static_cast<double>(predictions.size());
}

struct EvalReport {
  double mae = 0.0;
  size_t sample_count = 0;
  std::string policy;
  std::map<std::string, double> per_branch_mae;  // ce100/ce20/ce10/ce5/mse
};

struct EvalOptions {
  int batch_size = 64;
  bool per_branch = false;
};

// Forward + decode over a dataset with augmentation off. Reported predictions
// are clamped to the label range; the raw regression output stays unbounded
// elsewhere.
template <class ModelLike, class Dataset>
EvalReport evaluate(const ModelLike& model, const Dataset& ds, model::Policy policy,
                    EvalOptions opts = {}) {
  const size_t n = ds.size();
  if (n == 0) throw ValueError("evaluate: empty dataset");
  const int s = model.spec().input_size;
  const GranularitySpec full = make_spec(1);

  std::vector<double> preds, targets;
  preds.reserve(n);
  targets.reserve(n);
  std::map<std::string, std::vector<double>> branch_preds;

  for (size_t start = 0; start < n; start += static_cast<size_t>(opts.batch_size)) {
    const size_t b = std::min(static_cast<size_t>(opts.batch_size), n - start);
    Tensor batch({static_cast<int64_t>(b), 3, s, s});
    for (size_t i = 0; i < b; ++i) {
      data::Sample sample = ds.sample(start + i);
      train::detail::stack_into(batch, i, sample.image);
      targets.push_back(sample.age);
    }
    const auto outs = model.forward(batch);
    for (size_t i = 0; i < b; ++i) {
      double p;
      try {
        p = model::predict_age(outs[i], policy);
      } catch (const ValueError& e) {
        throw ValueError("evaluate: sample " + std::to_string(start + i) + ": " + e.what());
      }
      preds.push_back(std::clamp(p, static_cast<double>(full.age_min),
                                 static_cast<double>(full.age_max)));
      if (opts.per_branch) {
        for (const auto& [w, logits] : outs[i].class_logits)
          branch_preds[branch_label(w)].push_back(
              model::expected_age(logits, spec_for_width(w)));
        if (outs[i].regression)
          branch_preds["mse"].push_back(std::clamp(*outs[i].regression,
                                                   static_cast<double>(full.age_min),
                                                   static_cast<double>(full.age_max)));
      }
    }
  }

  EvalReport report;
  report.mae = mae(preds, targets);
  report.sample_count = n;
  report.policy = model::policy_name(policy);
  for (const auto& [label, bp] : branch_preds) report.per_branch_mae[label] = mae(bp, targets);
  return report;
}

// ---------------------------------------------------------------------------
// Ablation: one trained model per loss combination, evaluated on the test
// split, with improvement columns relative to the first (baseline) row.
// ---------------------------------------------------------------------------

struct AblationRow {
  losses::LossConfig loss;
  std::string label;
  double mae = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> improvement;
  std::optional<double> relative_improvement;
  bool best = false;
  bool failed = false;
  std::string error;
};

inline void check_baseline(const std::vector<losses::LossConfig>& combos) {
  if (combos.empty()) throw ValueError("ablation: no loss combinations given");
  const auto& first = combos.front();
  if (first.granularities != std::vector<int>{1} || first.use_regression)
    throw ValueError("ablation: first combination must be the ce100-only baseline");
  for (const auto& c : combos) losses::validate(c);
}

// Core runner over an injectable cell function (index, config) -> test MAE.
// Cells are independent; `parallel` > 1 runs them on a small thread pool and
// rows are merged by index, so the report does not depend on scheduling.
inline std::vector<AblationRow> run_ablation_cells(
    const std::vector<losses::LossConfig>& combos,
    const std::function<double(size_t, const losses::LossConfig&)>& cell, int parallel) {
  check_baseline(combos);
  std::vector<AblationRow> rows(combos.size());
  for (size_t i = 0; i < combos.size(); ++i) {
    rows[i].loss = combos[i];
    rows[i].label = losses::describe(combos[i]);
  }

  std::atomic<size_t> next{0};
  auto worker = [&] {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= combos.size()) return;
      try {
        rows[i].mae = cell(i, combos[i]);
      } catch (const std::exception& e) {
        rows[i].failed = true;
        rows[i].error = e.what();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(parallel, static_cast<int>(combos.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  const AblationRow& baseline = rows.front();
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].failed || baseline.failed) continue;
    rows[i].improvement = baseline.mae - rows[i].mae;
    rows[i].relative_improvement = (baseline.mae - rows[i].mae) / baseline.mae;
  }
  double best = std::numeric_limits<double>::infinity();
  size_t best_idx = rows.size();
  for (size_t i = 0; i < rows.size(); ++i)
    if (!rows[i].failed && rows[i].mae < best) {
      best = rows[i].mae;
      best_idx = i;
    }
  if (best_idx < rows.size()) rows[best_idx].best = true;
  return rows;
}

struct AblationOptions {
  int parallel = 1;
  std::string out_dir;  // when set, per-cell checkpoints + history CSVs go under cell_<i>/
  model::Policy policy = model::Policy::ExpectedValue;
};

// Full protocol: every cell builds a fresh model covering exactly its
// combination, from the same seed, trains with the shared config and
// evaluates on the test split.
template <class TrainSet, class ValSet, class TestSet>
std::vector<AblationRow> run_ablation(const train::TrainConfig& base,
                                      const model::ModelSpec& base_model,
                                      const std::vector<losses::LossConfig>& combos,
                                      const TrainSet& train_set, const ValSet& val_set,
                                      const TestSet& test_set,
                                      const data::AugmentConfig& augment_cfg,
                                      AblationOptions opts = {}) {
  auto cell = [&](size_t index, const losses::LossConfig& combo) {
    model::ModelSpec spec = base_model;
    spec.branch_widths = combo.granularities;
    spec.with_regression = combo.use_regression;
    model::Model m = model::build_model(spec, base.seed);

    train::TrainConfig cfg = base;
    cfg.loss = combo;
    cfg.out_dir = opts.out_dir.empty() ? std::string{}
                                       : opts.out_dir + "/cell_" + std::to_string(index);
    auto result = train::train(std::move(m), train_set, val_set, cfg, augment_cfg);
    return evaluate(result.model, test_set, opts.policy).mae;
  };
  return run_ablation_cells(combos, cell, opts.parallel);
}

// ---------------------------------------------------------------------------
// Report emission: machine CSV (full precision) and an aligned text table
// with the same column block as the reference protocol (per-branch checks,
// MAE, improvement, relative). Output is byte-stable for identical rows.
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt(const char* spec, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}
inline std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}
}  // namespace detail

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "row,ce100,ce20,ce10,ce5,mse,mae,improvement,relative_improvement,best,status,error\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out += std::to_string(i);
    for (int w : kCanonicalWidths)
      out += std::count(r.loss.granularities.begin(), r.loss.granularities.end(), w) ? ",1" : ",0";
    out += r.loss.use_regression ? ",1" : ",0";
    out += ",";
    if (!r.failed) out += detail::fmt("%.17g", r.mae);
    out += ",";
    if (r.improvement) out += detail::fmt("%.17g", *r.improvement);
    out += ",";
    if (r.relative_improvement) out += detail::fmt("%.17g", *r.relative_improvement);
    out += r.best ? ",1" : ",0";
    out += r.failed ? ",failed" : ",ok";
    out += "," + detail::sanitize(r.error) + "\n";
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line, "%-28s %5s %4s %4s %3s %3s  %8s %12s %9s\n",
                "combination", "ce100", "ce20", "ce10", "ce5", "mse", "MAE",
                "improvement", "relative");
  out += line;
  for (const auto& r : rows) {
    auto mark = [&](int w) {
      return std::count(r.loss.granularities.begin(), r.loss.granularities.end(), w) ? "x" : "";
    };
    std::string mae_s = r.failed ? "failed" : detail::fmt("%.2f", r.mae);
    if (r.best) mae_s += "*";
    const std::string imp = r.improvement ? detail::fmt("%.2f", *r.improvement) : "";
    const std::string rel =
        r.relative_improvement
            ? std::to_string(std::lround(*r.relative_improvement * 100.0)) + "%"
            : "";
    std::snprintf(line, sizeof line, "%-28s %5s %4s %4s %3s %3s  %8s %12s %9s\n",
                  r.label.c_str(), mark(1), mark(5), mark(10), mark(20),
                  r.loss.use_regression ? "x" : "", mae_s.c_str(), imp.c_str(), rel.c_str());
    out += line;
  }
  return out;
}

}  // namespace granage::eval
