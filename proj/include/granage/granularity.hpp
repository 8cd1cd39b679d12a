#pragma once

#include <cmath>
#include <string>

#include "granage/common.hpp"

namespace granage {

// One age-class grid: the contiguous integer ages [age_min, age_max] cut into
// bins of bin_width years. The canonical widths {1, 5, 10, 20} over [1, 100]
// give the 100/20/10/5-class branches.
struct GranularitySpec {
  int bin_width = 1;
  int num_classes = 100;
  int age_min = 1;
  int age_max = 100;
};

struct AgeLabel {
  double apparent_age = 0.0;
};

inline GranularitySpec make_spec(int bin_width, int age_min = 1, int age_max = 100) {
  const int span = age_max - age_min + 1;
  if (age_max < age_min)
    throw ValueError("granularity: age_max " + std::to_string(age_max) +
                     " precedes age_min " + std::to_string(age_min));
  if (bin_width < 1)
    throw ValueError("granularity: bin_width must be >= 1, got " + std::to_string(bin_width));
  if (span % bin_width != 0)
    throw ValueError("granularity: bin_width " + std::to_string(bin_width) +
                     " does not divide the age span " + std::to_string(span));
  return GranularitySpec{bin_width, span / bin_width, age_min, age_max};
}

// Nearest integer age, half away from zero, clamped into the spec's range.
inline int clamp_age(double apparent_age, const GranularitySpec& spec) {
  if (!std::isfinite(apparent_age))
    throw ValueError("granularity: apparent age is not finite");
  const double r = std::round(apparent_age);
  if (r < spec.age_min) return spec.age_min;
  if (r > spec.age_max) return spec.age_max;
  return static_cast<int>(r);
}

inline int quantize(AgeLabel age, const GranularitySpec& spec) {
  const int a = clamp_age(age.apparent_age, spec);
  return (a - spec.age_min) / spec.bin_width;
}

// Mean of the integer ages inside the bin, e.g. bin 8 at width 5 covers ages
// 41..45 and decodes to 43.
inline double representative(int class_index, const GranularitySpec& spec) {
  if (class_index < 0 || class_index >= spec.num_classes)
    throw ValueError("granularity: class index " + std::to_string(class_index) +
                     " out of range [0, " + std::to_string(spec.num_classes) + ")");
  return spec.age_min + class_index * spec.bin_width + (spec.bin_width - 1) / 2.0;
}

inline int coarsen(int fine_index, const GranularitySpec& fine, const GranularitySpec& coarse) {
  if (fine.age_min != coarse.age_min || fine.age_max != coarse.age_max)
    throw ValueError("granularity: coarsen requires specs over the same age range");
  if (coarse.bin_width % fine.bin_width != 0)
    throw ValueError("granularity: coarse width " + std::to_string(coarse.bin_width) +
                     " is not a multiple of fine width " + std::to_string(fine.bin_width));
  if (fine_index < 0 || fine_index >= fine.num_classes)
    throw ValueError("granularity: class index " + std::to_string(fine_index) +
                     " out of range [0, " + std::to_string(fine.num_classes) + ")");
  return fine_index * fine.bin_width / coarse.bin_width;
}

}  // namespace granage
