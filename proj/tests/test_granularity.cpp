#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "granage/common.hpp"
#include "granage/granularity.hpp"

using namespace granage;

namespace {

// Test-local oracle: find the bin by scanning the interval list.
int oracle_quantize(int age, const GranularitySpec& spec) {
  for (int k = 0; k < spec.num_classes; ++k) {
    const int lo = spec.age_min + k * spec.bin_width;
    if (age >= lo && age <= lo + spec.bin_width - 1) return k;
  }
  FAIL("age outside grid");
  return -1;
}

// Test-local oracle: average of the integer ages in the bin.
double oracle_representative(int k, const GranularitySpec& spec) {
  double sum = 0.0;
  for (int a = 0; a < spec.bin_width; ++a) sum += spec.age_min + k * spec.bin_width + a;
  return sum / spec.bin_width;
}

const int kWidths[] = {1, 5, 10, 20};

}  // namespace

TEST_CASE("make_spec canonical widths") {
  CHECK(make_spec(1).num_classes == 100);
  CHECK(make_spec(5).num_classes == 20);
  CHECK(make_spec(10).num_classes == 10);
  CHECK(make_spec(20).num_classes == 5);
  CHECK(make_spec(5).age_min == 1);
  CHECK(make_spec(5).age_max == 100);
}

TEST_CASE("make_spec rejects non-divisors") {
  CHECK_THROWS_AS(make_spec(7), ValueError);
  CHECK_THROWS_AS(make_spec(0), ValueError);
  CHECK_THROWS_AS(make_spec(-5), ValueError);
  CHECK_THROWS_WITH(make_spec(7), Catch::Matchers::ContainsSubstring("divide"));
}

TEST_CASE("quantize matches the worked age-44 example") {
  CHECK(quantize(AgeLabel{44.0}, make_spec(1)) == 43);
  CHECK(quantize(AgeLabel{44.0}, make_spec(5)) == 8);
  CHECK(quantize(AgeLabel{44.0}, make_spec(10)) == 4);
  CHECK(quantize(AgeLabel{44.0}, make_spec(20)) == 2);
}

TEST_CASE("quantize edge ages") {
  for (int w : kWidths) CHECK(quantize(AgeLabel{1.0}, make_spec(w)) == 0);
  CHECK(quantize(AgeLabel{100.0}, make_spec(20)) == 4);
  CHECK(quantize(AgeLabel{100.0}, make_spec(1)) == 99);
}

TEST_CASE("quantize agrees with the interval-scan oracle on every age") {
  for (int w : kWidths) {
    const auto spec = make_spec(w);
    for (int age = 1; age <= 100; ++age)
      REQUIRE(quantize(AgeLabel{static_cast<double>(age)}, spec) == oracle_quantize(age, spec));
  }
}

TEST_CASE("quantize rounds half away from zero and clamps") {
  const auto spec1 = make_spec(1);
  CHECK(quantize(AgeLabel{43.5}, spec1) == 43);   // rounds to 44
  CHECK(quantize(AgeLabel{43.49}, spec1) == 42);  // rounds to 43
  CHECK(quantize(AgeLabel{0.0}, spec1) == 0);     // clamped to age 1
  CHECK(quantize(AgeLabel{-7.0}, spec1) == 0);
  CHECK(quantize(AgeLabel{150.0}, spec1) == 99);  // clamped to age 100
  CHECK(quantize(AgeLabel{150.0}, make_spec(20)) == 4);
}

TEST_CASE("quantize rejects non-finite ages") {
  CHECK_THROWS_AS(quantize(AgeLabel{std::nan("")}, make_spec(1)), ValueError);
  CHECK_THROWS_AS(quantize(AgeLabel{INFINITY}, make_spec(5)), ValueError);
}

TEST_CASE("representative decodes bin means") {
  CHECK(representative(8, make_spec(5)) == 43.0);    // ages 41..45
  CHECK(representative(43, make_spec(1)) == 44.0);   // singleton bin
  CHECK(representative(2, make_spec(20)) == 50.5);   // ages 41..60
  for (int w : kWidths) {
    const auto spec = make_spec(w);
    for (int k = 0; k < spec.num_classes; ++k)
      REQUIRE(representative(k, spec) == oracle_representative(k, spec));
  }
}

TEST_CASE("representative rejects out-of-range indices") {
  CHECK_THROWS_AS(representative(-1, make_spec(5)), ValueError);
  CHECK_THROWS_AS(representative(20, make_spec(5)), ValueError);
}

TEST_CASE("coarsen follows the label chain of the age-44 example") {
  CHECK(coarsen(43, make_spec(1), make_spec(5)) == 8);
  CHECK(coarsen(8, make_spec(5), make_spec(20)) == 2);
  CHECK(coarsen(43, make_spec(1), make_spec(10)) == 4);
  for (int fw : kWidths)
    for (int cw : kWidths)
      if (cw % fw == 0) CHECK(coarsen(0, make_spec(fw), make_spec(cw)) == 0);
}

TEST_CASE("coarsen rejects non-nested specs") {
  CHECK_THROWS_AS(coarsen(0, make_spec(10), make_spec(5)), ValueError);
  CHECK_THROWS_AS(coarsen(0, make_spec(20), make_spec(10)), ValueError);
  CHECK_THROWS_AS(coarsen(100, make_spec(1), make_spec(5)), ValueError);
}

TEST_CASE("coarsen(quantize) equals quantize at the coarse width, exhaustively") {
  for (int fw : kWidths) {
    for (int cw : kWidths) {
      if (cw <= fw || cw % fw != 0) continue;
      const auto fine = make_spec(fw), coarse = make_spec(cw);
      for (int age = 1; age <= 100; ++age) {
        const AgeLabel label{static_cast<double>(age)};
        REQUIRE(coarsen(quantize(label, fine), fine, coarse) == quantize(label, coarse));
      }
    }
  }
}

TEST_CASE("representative stays within half a bin of the rounded age") {
  for (int w : kWidths) {
    const auto spec = make_spec(w);
    for (int age = 1; age <= 100; ++age) {
      const double rep = representative(quantize(AgeLabel{static_cast<double>(age)}, spec), spec);
      REQUIRE(std::abs(rep - age) <= (w - 1) / 2.0);
    }
  }
}

TEST_CASE("quantize is monotone in age") {
  Rng rng(42);
  for (int w : kWidths) {
    const auto spec = make_spec(w);
    int prev = 0;
    for (int age = 1; age <= 100; ++age) {
      const int q = quantize(AgeLabel{static_cast<double>(age)}, spec);
      REQUIRE(q >= prev);
      prev = q;
    }
    for (int i = 0; i < 500; ++i) {
      double a = rng.uniform(-10.0, 120.0), b = rng.uniform(-10.0, 120.0);
      if (a > b) std::swap(a, b);
      REQUIRE(quantize(AgeLabel{a}, spec) <= quantize(AgeLabel{b}, spec));
    }
  }
}

TEST_CASE("quantize inverts representative on every class") {
  for (int w : kWidths) {
    const auto spec = make_spec(w);
    for (int k = 0; k < spec.num_classes; ++k)
      REQUIRE(quantize(AgeLabel{representative(k, spec)}, spec) == k);
  }
}
