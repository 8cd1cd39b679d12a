#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "granage/branches.hpp"
#include "granage/common.hpp"
#include "granage/losses.hpp"

using namespace granage;
using losses::LossConfig;

namespace {

BranchOutputs uniform_outputs(double regression) {
  BranchOutputs out;
  for (int w : kCanonicalWidths)
    out.class_logits[w] = std::vector<double>(spec_for_width(w).num_classes, 0.0);
  out.regression = regression;
  return out;
}

BranchOutputs random_outputs(Rng& rng) {
  BranchOutputs out;
  for (int w : kCanonicalWidths) {
    auto& logits = out.class_logits[w];
    logits.resize(spec_for_width(w).num_classes);
    for (double& v : logits) v = rng.uniform(-4.0, 4.0);
  }
  out.regression = rng.uniform(-10.0, 110.0);
  return out;
}

const LossConfig kFull{{1, 5, 10, 20}, true, 1.0};

}  // namespace

TEST_CASE("cross entropy of uniform logits is log K") {
  const std::vector<double> u100(100, 0.0), u5(5, 3.25);
  CHECK_THAT(losses::cross_entropy(u100, 17), Catch::Matchers::WithinAbs(std::log(100.0), 1e-12));
  CHECK_THAT(losses::cross_entropy(u5, 0), Catch::Matchers::WithinAbs(std::log(5.0), 1e-12));
  CHECK_THAT(losses::cross_entropy(u100, 0), Catch::Matchers::WithinAbs(4.60517, 1e-5));
}

TEST_CASE("cross entropy matches the arbitrary-precision value for a peaked case") {
  // -log(e^10 / (e^10 + 2)), frozen from an arbitrary-precision evaluation.
  const double expected = 9.0795737467244446e-05;
  CHECK_THAT(losses::cross_entropy(std::vector<double>{10.0, 0.0, 0.0}, 0),
             Catch::Matchers::WithinRel(expected, 1e-12));
}

TEST_CASE("cross entropy stays finite for extreme logits") {
  std::vector<double> logits(100, -1000.0);
  logits[42] = 1000.0;
  CHECK(losses::cross_entropy(logits, 42) == 0.0);
  CHECK(std::isfinite(losses::cross_entropy(logits, 3)));
  CHECK(losses::cross_entropy(logits, 3) >= 0.0);
}

TEST_CASE("cross entropy rejects bad input") {
  const std::vector<double> logits{1.0, 2.0};
  CHECK_THROWS_AS(losses::cross_entropy(logits, 2), ValueError);
  CHECK_THROWS_AS(losses::cross_entropy(logits, -1), ValueError);
  CHECK_THROWS_AS(losses::cross_entropy(std::vector<double>{1.0, std::nan("")}, 0), ValueError);
  CHECK_THROWS_AS(losses::cross_entropy(std::vector<double>{}, 0), ValueError);
}

TEST_CASE("cross entropy is invariant to logit shifts") {
  Rng rng(7);
  for (int c = 0; c < 200; ++c) {
    const int k = static_cast<int>(rng.uniform_int(2, 100));
    std::vector<double> logits(k);
    for (double& v : logits) v = rng.uniform(-5.0, 5.0);
    const int target = static_cast<int>(rng.uniform_int(0, k - 1));
    const double base = losses::cross_entropy(logits, target);
    const double shift = rng.uniform(-100.0, 100.0);
    for (double& v : logits) v += shift;
    REQUIRE_THAT(losses::cross_entropy(logits, target),
                 Catch::Matchers::WithinAbs(base, 1e-10));
  }
}

TEST_CASE("mse basics") {
  CHECK(losses::mse(44.0, 44.0) == 0.0);
  CHECK(losses::mse(40.0, 44.0) == 16.0);
  const std::vector<double> p{40.0, 44.0}, t{44.0, 44.0};
  CHECK(losses::mse_batch(p, t) == 8.0);
  CHECK_THROWS_AS(losses::mse(std::nan(""), 1.0), ValueError);
  CHECK_THROWS_AS(losses::mse(1.0, INFINITY), ValueError);
}

TEST_CASE("aggregate of zero-loss branches is zero") {
  BranchOutputs out;
  const AgeLabel age{44.0};
  for (int w : kCanonicalWidths) {
    auto& logits = out.class_logits[w];
    logits.assign(spec_for_width(w).num_classes, -800.0);
    logits[quantize(age, spec_for_width(w))] = 800.0;
  }
  out.regression = 44.0;
  const auto bd = losses::aggregate_loss(out, age, kFull);
  CHECK(bd.aggregate == 0.0);
  for (const auto& [w, v] : bd.classification) CHECK(v == 0.0);
  CHECK(*bd.regression == 0.0);
}

TEST_CASE("aggregate of uniform logits plus a 2-year regression error") {
  // ln100 + ln20 + ln10 + ln5 + 2^2, frozen from an arbitrary-precision sum.
  const auto bd = losses::aggregate_loss(uniform_outputs(46.0), AgeLabel{44.0}, kFull);
  CHECK_THAT(bd.aggregate, Catch::Matchers::WithinRel(15.51292546497022842, 1e-14));
}

TEST_CASE("single-branch config aggregates to exactly that branch") {
  Rng rng(3);
  const auto out = random_outputs(rng);
  const LossConfig only100{{1}, false, 1.0};
  const auto bd = losses::aggregate_loss(out, AgeLabel{31.0}, only100);
  CHECK(bd.aggregate == bd.classification.at(1));
  CHECK(bd.classification.size() == 1);
  CHECK_FALSE(bd.regression.has_value());
}

TEST_CASE("aggregate rejects missing branches by name") {
  BranchOutputs out;
  out.class_logits[1] = std::vector<double>(100, 0.0);
  CHECK_THROWS_WITH(losses::aggregate_loss(out, AgeLabel{10.0}, kFull),
                    Catch::Matchers::ContainsSubstring("ce20"));
  LossConfig reg_only{{1}, true, 1.0};
  CHECK_THROWS_WITH(losses::aggregate_loss(out, AgeLabel{10.0}, reg_only),
                    Catch::Matchers::ContainsSubstring("regression"));
}

TEST_CASE("aggregate rejects wrong logit lengths") {
  BranchOutputs out;
  out.class_logits[1] = std::vector<double>(99, 0.0);
  CHECK_THROWS_AS(losses::aggregate_loss(out, AgeLabel{10.0}, LossConfig{{1}, false, 1.0}),
                  ValueError);
}

TEST_CASE("loss config validation") {
  CHECK_THROWS_AS(losses::validate(LossConfig{{}, false, 1.0}), ValueError);
  CHECK_THROWS_AS(losses::validate(LossConfig{{1}, false, 0.0}), ValueError);
  CHECK_THROWS_AS(losses::validate(LossConfig{{7}, false, 1.0}), ValueError);
  CHECK_THROWS_AS(losses::validate(LossConfig{{5, 1}, false, 1.0}), ValueError);
  CHECK_NOTHROW(losses::validate(LossConfig{{}, true, 1.0}));
}

TEST_CASE("gradient of uniform logits is softmax minus onehot") {
  BranchOutputs out;
  out.class_logits[20] = std::vector<double>(5, 1.0);
  const LossConfig cfg{{20}, false, 1.0};
  const auto g = losses::loss_gradients(out, AgeLabel{representative(2, make_spec(20))}, cfg);
  const std::vector<double> expected{0.2, 0.2, -0.8, 0.2, 0.2};
  for (int i = 0; i < 5; ++i)
    REQUIRE_THAT(g.logit_grads.at(20)[i], Catch::Matchers::WithinAbs(expected[i], 1e-15));
}

TEST_CASE("regression gradient is lambda * 2 * (prediction - age)") {
  BranchOutputs out;
  out.regression = 40.0;
  const auto g = losses::loss_gradients(out, AgeLabel{44.0}, LossConfig{{}, true, 1.0});
  CHECK(*g.regression_grad == -8.0);
  const auto g2 = losses::loss_gradients(out, AgeLabel{44.0}, LossConfig{{}, true, 2.5});
  CHECK(*g2.regression_grad == -20.0);
}

TEST_CASE("saturated logits give a vanishing gradient") {
  BranchOutputs out;
  auto& logits = out.class_logits[1];
  logits.assign(100, -800.0);
  logits[43] = 800.0;
  const auto g = losses::loss_gradients(out, AgeLabel{44.0}, LossConfig{{1}, false, 1.0});
  for (double v : g.logit_grads.at(1)) REQUIRE(std::abs(v) <= 1e-300);
}

TEST_CASE("inactive branches in outputs receive zero gradients of matching shape") {
  Rng rng(5);
  const auto out = random_outputs(rng);
  const auto g = losses::loss_gradients(out, AgeLabel{60.0}, LossConfig{{1}, false, 1.0});
  REQUIRE(g.logit_grads.size() == out.class_logits.size());
  for (int w : {5, 10, 20}) {
    REQUIRE(g.logit_grads.at(w).size() == out.class_logits.at(w).size());
    for (double v : g.logit_grads.at(w)) REQUIRE(v == 0.0);
  }
  REQUIRE(*g.regression_grad == 0.0);
}

TEST_CASE("gradients match central finite differences") {
  Rng rng(11);
  const double h = 1e-5;
  for (int w : kCanonicalWidths) {
    const int k = spec_for_width(w).num_classes;
    for (int c = 0; c < 10; ++c) {
      LossConfig cfg{{w}, true, rng.uniform(0.5, 2.0)};
      BranchOutputs out;
      auto& logits = out.class_logits[w];
      logits.resize(k);
      for (double& v : logits) v = rng.uniform(-2.0, 2.0);
      const AgeLabel age{rng.uniform(1.0, 100.0)};
      out.regression = age.apparent_age + rng.uniform(-3.0, 3.0);
      const auto g = losses::loss_gradients(out, age, cfg);

      for (int j = 0; j < k; ++j) {
        BranchOutputs plus = out, minus = out;
        plus.class_logits[w][j] += h;
        minus.class_logits[w][j] -= h;
        const double fd = (losses::aggregate_loss(plus, age, cfg).aggregate -
                           losses::aggregate_loss(minus, age, cfg).aggregate) /
                          (2 * h);
        const double got = g.logit_grads.at(w)[j];
        const double scale = std::max({std::abs(fd), std::abs(got), 1e-6});
        REQUIRE(std::abs(fd - got) / scale <= 1e-4);
      }
      BranchOutputs plus = out, minus = out;
      *plus.regression += h;
      *minus.regression -= h;
      const double fd = (losses::aggregate_loss(plus, age, cfg).aggregate -
                         losses::aggregate_loss(minus, age, cfg).aggregate) /
                        (2 * h);
      REQUIRE_THAT(*g.regression_grad, Catch::Matchers::WithinRel(fd, 1e-4));
    }
  }
}

TEST_CASE("removing a term never increases the aggregate") {
  Rng rng(13);
  for (int c = 0; c < 100; ++c) {
    const auto out = random_outputs(rng);
    const AgeLabel age{rng.uniform(1.0, 100.0)};
    const double full = losses::aggregate_loss(out, age, kFull).aggregate;
    for (int drop : kCanonicalWidths) {
      LossConfig cfg = kFull;
      std::erase(cfg.granularities, drop);
      REQUIRE(losses::aggregate_loss(out, age, cfg).aggregate <= full);
    }
    LossConfig no_reg = kFull;
    no_reg.use_regression = false;
    REQUIRE(losses::aggregate_loss(out, age, no_reg).aggregate <= full);
  }
}

TEST_CASE("aggregate equals the independent term sum within 8 ulps") {
  Rng rng(17);
  for (int c = 0; c < 1000; ++c) {
    const auto out = random_outputs(rng);
    const AgeLabel age{rng.uniform(1.0, 100.0)};
    const auto bd = losses::aggregate_loss(out, age, kFull);
    double expected = losses::mse(*out.regression, age.apparent_age);
    for (auto it = kFull.granularities.rbegin(); it != kFull.granularities.rend(); ++it)
      expected += losses::cross_entropy(out.class_logits.at(*it),
                                        quantize(age, spec_for_width(*it)));
    REQUIRE(ulp_distance(bd.aggregate, expected) <= 8);
  }
}
