#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "granage/branches.hpp"
#include "granage/common.hpp"
#include "granage/data.hpp"
#include "granage/eval.hpp"
#include "granage/granularity.hpp"
#include "granage/losses.hpp"
#include "granage/optim.hpp"

namespace granage::verify {

// Implementations under test; replaceable so the harness can inject faults
// and watch the matching family fail.
struct Hooks {
  std::function<int(AgeLabel, const GranularitySpec&)> quantize =
      [](AgeLabel a, const GranularitySpec& s) { return granage::quantize(a, s); };
  std::function<int(int, const GranularitySpec&, const GranularitySpec&)> coarsen =
      [](int i, const GranularitySpec& f, const GranularitySpec& c) {
        return granage::coarsen(i, f, c);
      };
  std::function<losses::LossBreakdown(const BranchOutputs&, AgeLabel, const losses::LossConfig&)>
      aggregate = [](const BranchOutputs& o, AgeLabel a, const losses::LossConfig& c) {
        return losses::aggregate_loss(o, a, c);
      };
  std::function<BranchGradients(const BranchOutputs&, AgeLabel, const losses::LossConfig&)>
      gradients = [](const BranchOutputs& o, AgeLabel a, const losses::LossConfig& c) {
        return losses::loss_gradients(o, a, c);
      };
  std::function<double(std::span<const double>, std::span<const double>)> mae =
      [](std::span<const double> p, std::span<const double> t) { return eval::mae(p, t); };
  std::function<double(const train::TrainHistory&, const train::TrainConfig&)> plateau =
      [](const train::TrainHistory& h, const train::TrainConfig& c) {
        return train::plateau_lr(h, c);
      };
};

struct FamilyResult {
  std::string family;
  bool passed = true;
  long checks = 0;
  double seconds = 0.0;
  std::string detail;  // first failure, or empty

  void fail(const std::string& msg) {
    if (passed) detail = msg;
    passed = false;
  }
};

namespace detail {

// Independent oracle: linear scan over the bin intervals.
inline int quantize_by_scan(int age, const GranularitySpec& spec) {
  for (int k = 0; k < spec.num_classes; ++k) {
    const int lo = spec.age_min + k * spec.bin_width;
    const int hi = lo + spec.bin_width - 1;
    if (age >= lo && age <= hi) return k;
  }
  return -1;
}

inline BranchOutputs random_outputs(Rng& rng, bool with_regression) {
  BranchOutputs out;
  for (int w : kCanonicalWidths) {
    const int k = spec_for_width(w).num_classes;
    auto& logits = out.class_logits[w];
    logits.resize(k);
    for (double& v : logits) v = rng.uniform(-4.0, 4.0);
  }
  if (with_regression) out.regression = rng.uniform(-10.0, 110.0);
  return out;
}

}  // namespace detail

// Family "quantize": brute-force interval oracle over every integer age and
// canonical width, plus the 44 -> (43, 8, 4, 2) worked example.
inline FamilyResult check_quantize(const Hooks& hooks) {
  FamilyResult r{"quantize"};
  for (int w : kCanonicalWidths) {
    const GranularitySpec spec = make_spec(w);
    for (int age = spec.age_min; age <= spec.age_max; ++age) {
      ++r.checks;
      const int expected = detail::quantize_by_scan(age, spec);
      const int got = hooks.quantize(AgeLabel{static_cast<double>(age)}, spec);
      if (got != expected)
        r.fail("quantize(" + std::to_string(age) + ", width " + std::to_string(w) + ") = " +
               std::to_string(got) + ", oracle says " + std::to_string(expected));
    }
  }
  const int expected_44[] = {43, 8, 4, 2};
  for (size_t i = 0; i < kCanonicalWidths.size(); ++i) {
    ++r.checks;
    const int got = hooks.quantize(AgeLabel{44.0}, make_spec(kCanonicalWidths[i]));
    if (got != expected_44[i])
      r.fail("age 44 at width " + std::to_string(kCanonicalWidths[i]) + " gave class " +
             std::to_string(got) + ", expected " + std::to_string(expected_44[i]));
  }
  return r;
}

// Family "hierarchy": coarsen(quantize(a, fine)) == quantize(a, coarse) for
// every integer age and nested width pair, exact.
inline FamilyResult check_hierarchy(const Hooks& hooks) {
  FamilyResult r{"hierarchy"};
  for (int fw : kCanonicalWidths) {
    for (int cw : kCanonicalWidths) {
      if (cw <= fw || cw % fw != 0) continue;
      const GranularitySpec fine = make_spec(fw), coarse = make_spec(cw);
      for (int age = fine.age_min; age <= fine.age_max; ++age) {
        ++r.checks;
        const AgeLabel label{static_cast<double>(age)};
        const int via_fine = hooks.coarsen(hooks.quantize(label, fine), fine, coarse);
        const int direct = hooks.quantize(label, coarse);
        if (via_fine != direct)
          r.fail("age " + std::to_string(age) + ": coarsen " + std::to_string(fw) + "->" +
                 std::to_string(cw) + " gave " + std::to_string(via_fine) + ", direct " +
                 std::to_string(direct));
      }
    }
  }
  return r;
}

// Family "gradcheck": closed-form gradients vs central finite differences of
// the aggregate loss, step 1e-5, relative error <= 1e-4 per coordinate.
// Instances are drawn at unit scale (logits within +-2, regression output a
// few years off the target) so the difference quotient itself carries well
// under 1e-4 of double-precision cancellation noise.
inline FamilyResult check_gradients(const Hooks& hooks, int cases_per_k = 100) {
  FamilyResult r{"gradcheck"};
  const double h = 1e-5;
  const double tol = 1e-4;
  Rng rng = Rng::derive(20240601, {0x67726164ULL});

  auto relative_error = [](double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    if (scale < 1e-6) return std::abs(a - b) > 1e-8 ? 1.0 : 0.0;
    return std::abs(a - b) / scale;
  };

  for (int w : kCanonicalWidths) {
    const int k = spec_for_width(w).num_classes;
    for (int c = 0; c < cases_per_k; ++c) {
      losses::LossConfig cfg;
      cfg.granularities = {w};
      cfg.use_regression = true;
      cfg.lambda = rng.uniform(0.5, 2.0);
      BranchOutputs out;
      auto& logits = out.class_logits[w];
      logits.resize(k);
      for (double& v : logits) v = rng.uniform(-2.0, 2.0);
      const AgeLabel age{rng.uniform(1.0, 100.0)};
      out.regression = age.apparent_age + rng.uniform(-3.0, 3.0);

      const BranchGradients g = hooks.gradients(out, age, cfg);
      for (int j = 0; j < k; ++j) {
        ++r.checks;
        BranchOutputs plus = out, minus = out;
        plus.class_logits[w][j] += h;
        minus.class_logits[w][j] -= h;
        const double fd = (hooks.aggregate(plus, age, cfg).aggregate -
                           hooks.aggregate(minus, age, cfg).aggregate) /
                          (2.0 * h);
        const double err = relative_error(g.logit_grads.at(w)[j], fd);
        if (err > tol)
          r.fail("K=" + std::to_string(k) + " logit " + std::to_string(j) +
                 ": relative error " + std::to_string(err));
      }
      ++r.checks;
      BranchOutputs plus = out, minus = out;
      *plus.regression += h;
      *minus.regression -= h;
      const double fd = (hooks.aggregate(plus, age, cfg).aggregate -
                         hooks.aggregate(minus, age, cfg).aggregate) /
                        (2.0 * h);
      if (relative_error(*g.regression_grad, fd) > tol)
        r.fail("K=" + std::to_string(k) + " regression gradient mismatch");
    }
  }
  return r;
}

// Family "composition": with lambda = 1 and all branches active the aggregate
// equals the independently summed terms within 8 ulps; the ladder's masked
// combinations leave inactive terms out entirely.
inline FamilyResult check_composition(const Hooks& hooks, int cases = 1000) {
  FamilyResult r{"composition"};
  Rng rng = Rng::derive(20240601, {0x636f6d70ULL});
  losses::LossConfig full;
  full.granularities = {1, 5, 10, 20};
  full.use_regression = true;
  full.lambda = 1.0;

  for (int c = 0; c < cases; ++c) {
    const BranchOutputs out = detail::random_outputs(rng, true);
    const AgeLabel age{rng.uniform(1.0, 100.0)};
    const losses::LossBreakdown bd = hooks.aggregate(out, age, full);
    // Independent per-term evaluation, summed in the opposite order.
    double expected = losses::mse(*out.regression, age.apparent_age);
    for (auto it = full.granularities.rbegin(); it != full.granularities.rend(); ++it)
      expected += losses::cross_entropy(out.class_logits.at(*it),
                                        quantize(age, spec_for_width(*it)));
    ++r.checks;
    const uint64_t ulps = ulp_distance(bd.aggregate, expected);
    if (ulps > 8)
      r.fail("case " + std::to_string(c) + ": aggregate differs from term sum by " +
             std::to_string(ulps) + " ulps");
  }

  // The five ladder rows: active terms present, inactive terms absent.
  const std::vector<losses::LossConfig> ladder = {
      {{1}, false, 1.0},
      {{1, 5}, false, 1.0},
      {{1, 5, 10}, false, 1.0},
      {{1, 5, 10, 20}, false, 1.0},
      {{1, 5, 10, 20}, true, 1.0},
  };
  const BranchOutputs out = detail::random_outputs(rng, true);
  const AgeLabel age{44.0};
  for (const auto& cfg : ladder) {
    ++r.checks;
    const losses::LossBreakdown bd = hooks.aggregate(out, age, cfg);
    if (bd.classification.size() != cfg.granularities.size())
      r.fail(losses::describe(cfg) + ": breakdown has " +
             std::to_string(bd.classification.size()) + " classification terms");
    for (int w : cfg.granularities)
      if (!bd.classification.count(w)) r.fail(losses::describe(cfg) + ": missing term");
    if (bd.regression.has_value() != cfg.use_regression)
      r.fail(losses::describe(cfg) + ": regression term presence mismatch");
    double sum = 0.0;
    for (const auto& [w, v] : bd.classification) sum += v;
    if (bd.regression) sum += cfg.lambda * *bd.regression;
    if (ulp_distance(sum, bd.aggregate) > 8)
      r.fail(losses::describe(cfg) + ": aggregate does not match active terms");
  }
  return r;
}

// Family "scheduler": the plateau rule on hand-built histories.
inline FamilyResult check_scheduler(const Hooks& hooks) {
  FamilyResult r{"scheduler"};
  train::TrainConfig cfg;
  cfg.loss.granularities = {1};

  auto history_of = [](std::initializer_list<double> vals) {
    train::TrainHistory h;
    int e = 0;
    for (double v : vals) {
      train::EpochRecord rec;
      rec.epoch = ++e;
      rec.val_loss = v;
      h.epochs.push_back(rec);
    }
    return h;
  };

  ++r.checks;
  if (hooks.plateau(train::TrainHistory{}, cfg) != 1e-3) r.fail("empty history lr != 1e-3");

  // Best at epoch 1, flat through epoch 9: decay lands exactly at epoch 10.
  train::TrainHistory flat;
  for (int e = 1; e <= 9; ++e) {
    train::EpochRecord rec;
    rec.epoch = e;
    rec.val_loss = 1.0;
    flat.epochs.push_back(rec);
    train::TrainHistory prefix{std::vector<train::EpochRecord>(
        flat.epochs.begin(), flat.epochs.begin() + e - 1)};
    ++r.checks;
    if (hooks.plateau(prefix, cfg) != 1e-3)
      r.fail("epoch " + std::to_string(e) + " lr decayed early");
  }
  ++r.checks;
  if (hooks.plateau(flat, cfg) != 1e-3 / 10.0) r.fail("epoch 10 lr is not 1e-4");

  // Strictly decreasing validation loss never decays.
  train::TrainHistory down;
  for (int e = 1; e <= 20; ++e) {
    train::EpochRecord rec;
    rec.epoch = e;
    rec.val_loss = 10.0 - e * 0.1;
    down.epochs.push_back(rec);
  }
  ++r.checks;
  if (hooks.plateau(down, cfg) != 1e-3) r.fail("decreasing history decayed");

  // Long flat run: rates step through exactly {1e-3, 1e-4, 1e-5, ...}.
  train::TrainHistory longflat = history_of({1.0});
  double expected = 1e-3;
  double prev = expected;
  for (int e = 2; e <= 40; ++e) {
    train::EpochRecord rec;
    rec.epoch = e;
    rec.val_loss = 1.0;
    longflat.epochs.push_back(rec);
    const double lr = hooks.plateau(longflat, cfg);
    ++r.checks;
    if (lr > prev) r.fail("learning rate increased");
    if (lr != prev && lr != prev / cfg.lr_decay_factor)
      r.fail("decay is not exactly the configured factor");
    prev = lr;
  }
  ++r.checks;
  if (prev >= 1e-4) r.fail("long plateau never reached 1e-5");
  return r;
}

// Family "mae": long-double brute force within 4 ulps, plus the constant
// midpoint predictor on the synthetic label distribution (MAE 25 +- 1).
inline FamilyResult check_mae(const Hooks& hooks) {
  FamilyResult r{"mae"};
  Rng rng = Rng::derive(20240601, {0x6d6165ULL});
  for (int c = 0; c < 200; ++c) {
    const int n = static_cast<int>(rng.uniform_int(1, 2000));
    std::vector<double> p(n), t(n);
    for (int i = 0; i < n; ++i) {
      p[i] = rng.uniform(-120.0, 120.0);
      t[i] = rng.uniform(1.0, 100.0);
    }
    long double acc = 0.0L;
    for (int i = 0; i < n; ++i) acc += std::abs(static_cast<long double>(p[i]) - t[i]);
    const double oracle = static_cast<double>(acc / n);
    ++r.checks;
    const uint64_t ulps = ulp_distance(hooks.mae(p, t), oracle);
    if (ulps > 4)
      r.fail("case " + std::to_string(c) + ": mae differs from brute force by " +
             std::to_string(ulps) + " ulps");
  }

  constexpr int kN = 10000;
  std::vector<double> preds(kN, 50.5), targets(kN);
  for (int i = 0; i < kN; ++i) targets[i] = static_cast<double>(data::synth_label(7, i));
  ++r.checks;
  const double mid = hooks.mae(preds, targets);
  if (std::abs(mid - 25.0) > 1.0)
    r.fail("constant-midpoint MAE " + std::to_string(mid) + " outside 25 +- 1");
  return r;
}

inline const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names = {"quantize", "hierarchy", "gradcheck",
                                                 "composition", "scheduler", "mae"};
  return names;
}

inline std::vector<FamilyResult> run_families(const std::vector<std::string>& filter = {},
                                              const Hooks& hooks = {}) {
  auto wanted = [&](const std::string& name) {
    if (filter.empty()) return true;
    for (const auto& f : filter)
      if (f == name) return true;
    return false;
  };
  for (const auto& f : filter) {
    bool known = false;
    for (const auto& name : family_names()) known = known || name == f;
    if (!known) throw ValueError("verify: unknown family '" + f + "'");
  }

  std::vector<FamilyResult> results;
  auto run = [&](const std::string& name, auto&& fn) {
    if (!wanted(name)) return;
    const auto t0 = std::chrono::steady_clock::now();
    FamilyResult r = fn();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results.push_back(std::move(r));
  };
  run("quantize", [&] { return check_quantize(hooks); });
  run("hierarchy", [&] { return check_hierarchy(hooks); });
  run("gradcheck", [&] { return check_gradients(hooks); });
  run("composition", [&] { return check_composition(hooks); });
  run("scheduler", [&] { return check_scheduler(hooks); });
  run("mae", [&] { return check_mae(hooks); });
  return results;
}

}  // namespace granage::verify
