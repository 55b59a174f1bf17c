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

#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace frill {

// Every failure surfaced by the library carries one of these codes. The CLI
// reports the code verbatim in its error JSON.
enum class ErrorCode {
  kShape,
  kConfig,
  kRank,
  kSchedule,
  kInputTooShort,
  kResampleRequired,
  kFormat,
  kDivergence,
  kNormalizationUnavailable,
  kNumeric,
  kKey,
  kSingular,
  kDegenerateTarget,
  kBadMagic,
  kBadVersion,
  kChecksum,
  kClock,
  kIo,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape_error";
    case ErrorCode::kConfig: return "config_error";
    case ErrorCode::kRank: return "rank_error";
    case ErrorCode::kSchedule: return "schedule_error";
    case ErrorCode::kInputTooShort: return "input_too_short";
    case ErrorCode::kResampleRequired: return "resample_required";
    case ErrorCode::kFormat: return "format_error";
    case ErrorCode::kDivergence: return "divergence_error";
    case ErrorCode::kNormalizationUnavailable: return "normalization_unavailable";
    case ErrorCode::kNumeric: return "numeric_error";
    case ErrorCode::kKey: return "key_error";
    case ErrorCode::kSingular: return "singularity_error";
    case ErrorCode::kDegenerateTarget: return "degenerate_target";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kBadVersion: return "bad_version";
    case ErrorCode::kChecksum: return "checksum_error";
    case ErrorCode::kClock: return "clock_error";
    case ErrorCode::kIo: return "io_error";
  }
  return "unknown_error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(ErrorCode code, Args&&... args) {
  throw Error(code, detail::concat(std::forward<Args>(args)...));
}

}  // namespace frill
