#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "granage/common.hpp"
#include "granage/granularity.hpp"

namespace granage {

// Canonical branch grid: bin widths {1,5,10,20} over ages 1..100, i.e. the
// 100/20/10/5-class heads.
inline constexpr std::array<int, 4> kCanonicalWidths{1, 5, 10, 20};

inline bool is_canonical_width(int w) {
  return w == 1 || w == 5 || w == 10 || w == 20;
}

inline GranularitySpec spec_for_width(int bin_width) { return make_spec(bin_width); }

// Branches are labelled by class count, matching the usual L100/L20/... names.
inline std::string branch_label(int bin_width) {
  return "ce" + std::to_string(make_spec(bin_width).num_classes);
}

// Per-sample network outputs: one logit vector per classification branch
// (keyed by bin width) plus the optional regression scalar.
struct BranchOutputs {
  std::map<int, std::vector<double>> class_logits;
  std::optional<double> regression;
};

// Gradient of a scalar loss w.r.t. BranchOutputs; same shape by construction.
struct BranchGradients {
  std::map<int, std::vector<double>> logit_grads;
  std::optional<double> regression_grad;
};

}  // namespace granage
