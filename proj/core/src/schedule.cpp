#include "wt/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace wt {

void ScheduleConfig::validate() const {
  if (warmup_steps < 0 || decay_start < warmup_steps) {
    throw std::invalid_argument("schedule: need 0 <= warmup_steps <= decay_start");
  }
  if (half_life <= 0) throw std::invalid_argument("schedule: half_life must be positive");
  if (min_lr < 0 || peak_lr < min_lr) {
    throw std::invalid_argument("schedule: need 0 <= min_lr <= peak_lr");
  }
  for (size_t i = 1; i < batch_ramp.size(); ++i) {
    if (batch_ramp[i].step <= batch_ramp[i - 1].step) {
      throw std::invalid_argument("schedule: batch_ramp steps must be strictly increasing");
    }
  }
  for (const auto& e : batch_ramp) {
    if (e.batch_tokens <= 0) throw std::invalid_argument("schedule: batch_tokens must be positive");
  }
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kWarmup: return "warmup";
    case Stage::kStable: return "stable";
    case Stage::kDecay: return "decay";
  }
  return "?";
}

double lr_at(const ScheduleConfig& cfg, int64_t step) {
  if (step < 0) throw std::invalid_argument("schedule: step must be >= 0");
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (step < cfg.decay_start) return cfg.peak_lr;
  const double exponent =
      static_cast<double>(step - cfg.decay_start) / static_cast<double>(cfg.half_life);
  return std::max(cfg.min_lr, cfg.peak_lr * std::pow(0.5, exponent));
}

int64_t batch_size_at(const ScheduleConfig& cfg, int64_t step) {
  if (cfg.batch_ramp.empty()) throw std::invalid_argument("schedule: batch_ramp is empty");
  int64_t size = cfg.batch_ramp.front().batch_tokens;
  for (const auto& e : cfg.batch_ramp) {
    if (e.step <= step) size = e.batch_tokens;
    else break;
  }
  return size;
}

Stage stage_at(const ScheduleConfig& cfg, int64_t step) {
  if (step < 0) throw std::invalid_argument("schedule: step must be >= 0");
  if (step < cfg.warmup_steps) return Stage::kWarmup;
  if (step < cfg.decay_start) return Stage::kStable;
  return Stage::kDecay;
}

}  // namespace wt
