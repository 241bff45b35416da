#pragma once

#include <cstdint>
#include <vector>

namespace wt {

struct BatchRampEntry {
  int64_t step = 0;
  int64_t batch_tokens = 0;
};

// Warmup-Stable-Decay schedule: linear warmup to peak_lr over W steps, flat
// until the decay start S, then exponential annealing with half-life T,
// floored at min_lr. Batch size follows a step-indexed ramp.
struct ScheduleConfig {
  int64_t warmup_steps = 0;                // W
  int64_t decay_start = 0;                 // S
  int64_t half_life = 5000;                // T
  double peak_lr = 0.01;
  double min_lr = 0.0;
  std::vector<BatchRampEntry> batch_ramp;  // strictly increasing steps

  void validate() const;
};

enum class Stage { kWarmup, kStable, kDecay };

const char* stage_name(Stage s);

double lr_at(const ScheduleConfig& cfg, int64_t step);
int64_t batch_size_at(const ScheduleConfig& cfg, int64_t step);
Stage stage_at(const ScheduleConfig& cfg, int64_t step);

}  // namespace wt
