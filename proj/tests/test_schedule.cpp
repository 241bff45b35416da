#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "wt/schedule.hpp"

using namespace wt;

namespace {

ScheduleConfig paper_like() {
  ScheduleConfig cfg;
  cfg.warmup_steps = 100;
  cfg.decay_start = 20000;
  cfg.half_life = 5000;
  cfg.peak_lr = 0.01;
  cfg.min_lr = 0.0;
  cfg.batch_ramp = {{0, 2'000'000}, {1000, 4'000'000}};
  cfg.validate();
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("schedule");

TEST_CASE("lr_at warmup, plateau, and half-life decay") {
  auto cfg = paper_like();
  CHECK(lr_at(cfg, 50) == doctest::Approx(0.005).epsilon(1e-15));  // warmup midpoint
  CHECK(lr_at(cfg, cfg.decay_start) == cfg.peak_lr);               // 0.5^0
  CHECK(lr_at(cfg, cfg.decay_start + 5000) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK(lr_at(cfg, cfg.decay_start + 10000) == doctest::Approx(0.0025).epsilon(1e-15));
  CHECK(lr_at(cfg, cfg.decay_start + 15000) == doctest::Approx(0.00125).epsilon(1e-15));
}

TEST_CASE("half-life values are exact in 64-bit for n <= 30") {
  auto cfg = paper_like();
  for (int n = 0; n <= 30; ++n) {
    const double expected = 0.01 * std::ldexp(1.0, -n);
    CHECK(lr_at(cfg, cfg.decay_start + static_cast<int64_t>(n) * cfg.half_life) == expected);
  }
}

TEST_CASE("lr_at is continuous at W and S") {
  auto cfg = paper_like();
  const double at_w = lr_at(cfg, cfg.warmup_steps);
  const double before_w = lr_at(cfg, cfg.warmup_steps - 1);
  CHECK(at_w == cfg.peak_lr);
  CHECK(std::fabs(at_w - before_w) <= cfg.peak_lr / cfg.warmup_steps + 1e-12);
  CHECK(std::fabs(lr_at(cfg, cfg.decay_start) - lr_at(cfg, cfg.decay_start - 1)) <= 1e-12);
}

TEST_CASE("lr_at non-increasing in decay, constant on the plateau") {
  auto cfg = paper_like();
  double prev = lr_at(cfg, cfg.decay_start);
  for (int64_t s = cfg.decay_start + 1; s < cfg.decay_start + 2000; s += 7) {
    const double v = lr_at(cfg, s);
    CHECK(v <= prev);
    prev = v;
  }
  for (int64_t s = cfg.warmup_steps; s < cfg.decay_start; s += 997) {
    CHECK(lr_at(cfg, s) == cfg.peak_lr);
  }
}

TEST_CASE("min_lr floors the decay") {
  auto cfg = paper_like();
  cfg.min_lr = 1e-4;
  CHECK(lr_at(cfg, cfg.decay_start + 100 * cfg.half_life) == doctest::Approx(1e-4));
}

TEST_CASE("batch_size_at follows the ramp") {
  auto cfg = paper_like();
  CHECK(batch_size_at(cfg, 0) == 2'000'000);
  CHECK(batch_size_at(cfg, 999) == 2'000'000);
  CHECK(batch_size_at(cfg, 1000) == 4'000'000);
  CHECK(batch_size_at(cfg, 123456) == 4'000'000);

  ScheduleConfig single = cfg;
  single.batch_ramp = {{0, 3'930'000}};  // stable-stage preset
  CHECK(batch_size_at(single, 0) == 3'930'000);
  CHECK(batch_size_at(single, 1 << 20) == 3'930'000);
}

TEST_CASE("stage_at boundaries") {
  auto cfg = paper_like();
  CHECK(stage_at(cfg, 0) == Stage::kWarmup);
  CHECK(stage_at(cfg, cfg.warmup_steps) == Stage::kStable);
  CHECK(stage_at(cfg, cfg.decay_start - 1) == Stage::kStable);
  CHECK(stage_at(cfg, cfg.decay_start) == Stage::kDecay);

  ScheduleConfig no_warmup = cfg;
  no_warmup.warmup_steps = 0;
  CHECK(stage_at(no_warmup, 0) == Stage::kStable);
}

TEST_CASE("config validation rejects bad ramps and bounds") {
  auto cfg = paper_like();
  cfg.batch_ramp = {{10, 100}, {10, 200}};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = paper_like();
  cfg.min_lr = 1.0;  // above peak
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = paper_like();
  cfg.warmup_steps = 30000;  // beyond decay_start
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_SUITE_END();
