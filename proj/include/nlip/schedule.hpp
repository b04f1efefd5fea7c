#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "nlip/errors.hpp"

namespace nlip {

/// Linear warmup from 0 to `base_rate`, then a half-cosine down to `min_rate`.
struct LrSchedule {
  double base_rate = 3e-3;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double min_rate = 0.0;

  void validate() const {
    if (!(base_rate > 0.0)) throw RangeError("learning-rate schedule needs base_rate > 0");
    if (warmup_steps < 0) throw RangeError("learning-rate schedule needs warmup_steps >= 0");
    if (total_steps <= warmup_steps) throw RangeError("learning-rate schedule needs total_steps > warmup_steps");
    if (min_rate < 0.0) throw RangeError("learning-rate schedule needs min_rate >= 0");
  }
};

inline double lr_at(const LrSchedule& schedule, std::int64_t step) {
  schedule.validate();
  if (step < 0 || step > schedule.total_steps)
    throw RangeError("step " + std::to_string(step) + " outside [0, " + std::to_string(schedule.total_steps) + "]");
  if (step < schedule.warmup_steps)
    return schedule.base_rate * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
  const double progress = static_cast<double>(step - schedule.warmup_steps) /
                          static_cast<double>(schedule.total_steps - schedule.warmup_steps);
  return schedule.min_rate +
         (schedule.base_rate - schedule.min_rate) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace nlip
