/* Copyright 2026 The frill Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Single-threaded wall-clock latency measurement.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#if defined(__linux__)
#include <sched.h>
#endif

#include "frill/dsp.hpp"
#include "frill/error.hpp"
#include "frill/model.hpp"

namespace frill {

inline constexpr int kDefaultWarmupRuns = 10;
inline constexpr int kMinTimedRuns = 30;

struct LatencyReport {
  std::string config_name;
  int warmup_runs = 0;
  int timed_runs = 0;
  std::vector<double> per_run_ms;
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
};

// q in [0, 1], linear interpolation between closest ranks.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorCode::kShape, "percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

// Restricts the calling thread to the CPU it is running on and restores the
// previous mask on destruction. Best effort: silently inert where the
// platform refuses.
class CpuPin {
 public:
  CpuPin() {
#if defined(__linux__)
    CPU_ZERO(&saved_);
    if (sched_getaffinity(0, sizeof(saved_), &saved_) != 0) return;
    const int cpu = sched_getcpu();
    if (cpu < 0) return;
    cpu_set_t one;
    CPU_ZERO(&one);
    CPU_SET(cpu, &one);
    pinned_ = sched_setaffinity(0, sizeof(one), &one) == 0;
#endif
  }
  ~CpuPin() {
#if defined(__linux__)
    if (pinned_) sched_setaffinity(0, sizeof(saved_), &saved_);
#endif
  }
  CpuPin(const CpuPin&) = delete;
  CpuPin& operator=(const CpuPin&) = delete;

  bool pinned() const { return pinned_; }

 private:
  bool pinned_ = false;
#if defined(__linux__)
  cpu_set_t saved_;
#endif
};

inline LatencyReport measure_callable(const std::string& name, const std::function<void()>& call,
                                      int warmup = kDefaultWarmupRuns, int runs = kMinTimedRuns) {
  if (runs < kMinTimedRuns) {
    fail(ErrorCode::kConfig, "need at least ", kMinTimedRuns, " timed runs, got ", runs);
  }
  if (warmup < 0) fail(ErrorCode::kConfig, "warmup runs must be >= 0");
  using Clock = std::chrono::steady_clock;
  CpuPin pin;
  for (int i = 0; i < warmup; ++i) call();
  LatencyReport r;
  r.config_name = name;
  r.warmup_runs = warmup;
  r.timed_runs = runs;
  r.per_run_ms.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = Clock::now();
    call();
    const auto t1 = Clock::now();
    if (t1 < t0) fail(ErrorCode::kClock, "clock went backwards during run ", i);
    r.per_run_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  r.median_ms = percentile(r.per_run_ms, 0.5);
  r.p10_ms = percentile(r.per_run_ms, 0.1);
  r.p90_ms = percentile(r.per_run_ms, 0.9);
  return r;
}

template <typename T>
LatencyReport measure_latency(const StudentModel<T>& model, const LogMelSpectrogram& input,
                              int warmup = kDefaultWarmupRuns, int runs = kMinTimedRuns) {
  const Tensor<T> x = spectrogram_batch<T>({&input});
  if (x.dim(1) != model.input_frames || x.dim(2) != model.input_bins) {
    fail(ErrorCode::kShape, "model expects a ", model.input_frames, "x", model.input_bins,
         " spectrogram, got ", shape_string(input.frames.shape()));
  }
  volatile T sink = 0;
  return measure_callable(
      model.config.name(),
      [&] {
        const Tensor<T> y = forward_batch(model, x);
        sink = y[0];
      },
      warmup, runs);
}

}  // namespace frill
