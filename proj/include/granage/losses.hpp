#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "granage/branches.hpp"
#include "granage/common.hpp"
#include "granage/granularity.hpp"

namespace granage::losses {

// Which loss terms are active and how the regression term is weighted.
// One LossConfig is one row of the ablation ladder.
struct LossConfig {
  std::vector<int> granularities;  // active bin widths, ascending
  bool use_regression = false;
  double lambda = 1.0;
};

inline void validate(const LossConfig& cfg) {
  if (cfg.granularities.empty() && !cfg.use_regression)
    throw ValueError("loss config: at least one term must be active");
  if (!(cfg.lambda > 0.0))
    throw ValueError("loss config: lambda must be > 0, got " + std::to_string(cfg.lambda));
  int prev = 0;
  for (int w : cfg.granularities) {
    if (!is_canonical_width(w))
      throw ValueError("loss config: granularity " + std::to_string(w) +
                       " is not one of {1,5,10,20}");
    if (w <= prev)
      throw ValueError("loss config: granularities must be strictly ascending");
    prev = w;
  }
}

// Human-readable tag, e.g. "ce100+ce20+mse".
inline std::string describe(const LossConfig& cfg) {
  std::string out;
  for (int w : cfg.granularities) {
    if (!out.empty()) out += "+";
    out += branch_label(w);
  }
  if (cfg.use_regression) out += out.empty() ? "mse" : "+mse";
  return out;
}

// Per-branch loss values. `classification` holds the unweighted cross-entropy
// terms keyed by bin width; `regression` is the raw MSE term. The aggregate
// is sum(CE) + lambda * MSE; inactive branches are simply absent.
struct LossBreakdown {
  std::map<int, double> classification;
  std::optional<double> regression;
  double aggregate = 0.0;
};

inline void check_finite(std::span<const double> logits) {
  for (double v : logits)
    if (!std::isfinite(v)) throw ValueError("loss: non-finite logit");
}

// Stable softmax (max-shifted).
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ValueError("loss: empty logit vector");
  check_finite(logits);
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// -log softmax(logits)[target], computed as logsumexp(logits) - logits[target].
inline double cross_entropy(std::span<const double> logits, int target_index) {
  if (logits.empty()) throw ValueError("loss: empty logit vector");
  if (target_index < 0 || static_cast<size_t>(target_index) >= logits.size())
    throw ValueError("loss: target index " + std::to_string(target_index) +
                     " out of range [0, " + std::to_string(logits.size()) + ")");
  check_finite(logits);
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  // z >= 1 because the max term contributes exp(0), so the result is >= 0.
  return m + std::log(z) - logits[target_index];
}

inline double mse(double prediction, double target) {
  if (!std::isfinite(prediction) || !std::isfinite(target))
    throw ValueError("loss: non-finite mse input");
  const double d = prediction - target;
  return d * d;
}

inline double mse_batch(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size() || predictions.empty())
    throw ValueError("loss: mse batch needs equal, non-zero lengths");
  double acc = 0.0;
  for (size_t i = 0; i < predictions.size(); ++i) acc += mse(predictions[i], targets[i]);
  return acc / static_cast<double>(predictions.size());
}

inline const std::vector<double>& require_logits(const BranchOutputs& out, int width) {
  auto it = out.class_logits.find(width);
  if (it == out.class_logits.end())
    throw ValueError("loss: outputs missing branch " + branch_label(width));
  const auto expected = static_cast<size_t>(spec_for_width(width).num_classes);
  if (it->second.size() != expected)
    throw ValueError("loss: branch " + branch_label(width) + " has " +
                     std::to_string(it->second.size()) + " logits, expected " +
                     std::to_string(expected));
  return it->second;
}

// Aggregate loss for one sample: the sum of the active cross-entropy terms
// plus lambda times the regression MSE.
inline LossBreakdown aggregate_loss(const BranchOutputs& outputs, AgeLabel age,
                                    const LossConfig& config) {
  validate(config);
  LossBreakdown bd;
  for (int w : config.granularities) {
    const auto& logits = require_logits(outputs, w);
    const GranularitySpec spec = spec_for_width(w);
    const double term = cross_entropy(logits, quantize(age, spec));
    bd.classification[w] = term;
    bd.aggregate += term;
  }
  if (config.use_regression) {
    if (!outputs.regression)
      throw ValueError("loss: outputs missing branch regression");
    const double term = mse(*outputs.regression, age.apparent_age);
    bd.regression = term;
    bd.aggregate += config.lambda * term;
  }
  return bd;
}

// Closed-form gradient of aggregate_loss w.r.t. the outputs. Active
// classification branches get softmax - onehot; the regression output gets
// lambda * 2 * (prediction - age). Branches present in `outputs` but inactive
// in the config get zero gradients of matching shape.
inline BranchGradients loss_gradients(const BranchOutputs& outputs, AgeLabel age,
                                      const LossConfig& config) {
  validate(config);
  BranchGradients g;
  for (const auto& [w, logits] : outputs.class_logits)
    g.logit_grads[w] = std::vector<double>(logits.size(), 0.0);
  if (outputs.regression) g.regression_grad = 0.0;

  for (int w : config.granularities) {
    const auto& logits = require_logits(outputs, w);
    const GranularitySpec spec = spec_for_width(w);
    const int target = quantize(age, spec);
    std::vector<double> grad = softmax(logits);
    grad[target] -= 1.0;
    g.logit_grads[w] = std::move(grad);
  }
  if (config.use_regression) {
    if (!outputs.regression)
      throw ValueError("loss: outputs missing branch regression");
    g.regression_grad = config.lambda * 2.0 * (*outputs.regression - age.apparent_age);
  }
  return g;
}

}  // namespace granage::losses
