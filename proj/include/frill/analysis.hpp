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

// Hyperparameter analysis over benchmarked configurations: standardized
// multiple regression of quality / latency / size on the configuration, and
// the quality-vs-latency frontier.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "frill/error.hpp"
#include "frill/eval.hpp"
#include "frill/model.hpp"

namespace frill {

struct BenchRecord {
  ModelConfig config;
  double quality = 0.0;     // aggregate quality, percent
  double latency_ms = 0.0;
  std::uint64_t size_bytes = 0;

  void validate() const {
    if (!std::isfinite(quality) || !std::isfinite(latency_ms)) {
      fail(ErrorCode::kNumeric, "record ", config.name(), " has non-finite values");
    }
    if (!(latency_ms > 0.0)) {
      fail(ErrorCode::kConfig, "record ", config.name(), " latency must be positive");
    }
    if (size_bytes == 0) {
      fail(ErrorCode::kConfig, "record ", config.name(), " size must be positive");
    }
  }
};

inline std::vector<BenchRecord> read_bench_records(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kFormat, "bench CSV is empty");
  if (detail::trim(line) != "config,quality,latency_ms,size_bytes") {
    fail(ErrorCode::kFormat, "bench CSV header must be config,quality,latency_ms,size_bytes");
  }
  std::vector<BenchRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 4) fail(ErrorCode::kFormat, "line ", line_no, " needs 4 fields");
    BenchRecord r;
    r.config = ModelConfig::parse(cells[0]);
    try {
      r.quality = std::stod(cells[1]);
      r.latency_ms = std::stod(cells[2]);
      const long long size = std::stoll(cells[3]);
      if (size < 0) throw std::invalid_argument("negative");
      r.size_bytes = static_cast<std::uint64_t>(size);
    } catch (const std::exception&) {
      fail(ErrorCode::kFormat, "line ", line_no, ": bad numeric field");
    }
    r.validate();
    out.push_back(r);
  }
  return out;
}

inline std::vector<BenchRecord> read_bench_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open ", path);
  return read_bench_records(in);
}

inline void write_bench_records(const std::vector<BenchRecord>& records, std::ostream& out) {
  out << "config,quality,latency_ms,size_bytes\n" << std::setprecision(17);
  for (const auto& r : records) {
    out << r.config.name() << ',' << r.quality << ',' << r.latency_ms << ','
        << r.size_bytes << '\n';
  }
}

inline constexpr std::array<std::string_view, 6> kPredictorNames{
    "size_small", "size_large", "width", "gap", "comp", "qat"};

// Tiny is the reference level of the size dummies.
inline std::array<double, 6> encode_predictors(const ModelConfig& c) {
  return {c.size == Mv3Size::kSmall ? 1.0 : 0.0,
          c.size == Mv3Size::kLarge ? 1.0 : 0.0,
          c.width,
          c.gap ? 1.0 : 0.0,
          c.compressed ? 1.0 : 0.0,
          c.qat ? 1.0 : 0.0};
}

enum class RegressionTarget { kQuality, kLatency, kSize };

inline std::string_view target_name(RegressionTarget t) {
  switch (t) {
    case RegressionTarget::kQuality: return "quality";
    case RegressionTarget::kLatency: return "latency";
    case RegressionTarget::kSize: return "size";
  }
  return "?";
}

struct RegressionResult {
  RegressionTarget target = RegressionTarget::kQuality;
  std::vector<std::string> predictors;
  std::vector<double> weights;  // same order as predictors
  double intercept = 0.0;
  double y_mean = 0.0;
  double y_sd = 1.0;
  Eigen::VectorXd residuals;  // of the standardized target

  double weight(std::string_view name) const {
    for (std::size_t i = 0; i < predictors.size(); ++i) {
      if (predictors[i] == name) return weights[i];
    }
    fail(ErrorCode::kKey, "no predictor named '", name, "'");
  }
};

// Least squares with an intercept column on the z-scored target (sample
// standard deviation). Predictors are used as given.
inline RegressionResult ols_standardized(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                         std::vector<std::string> names = {},
                                         RegressionTarget target = RegressionTarget::kQuality) {
  const auto n = x.rows(), p = x.cols();
  if (y.size() != n) fail(ErrorCode::kShape, "X has ", n, " rows but y has ", y.size());
  if (names.empty()) {
    for (Eigen::Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j));
  }
  if (static_cast<Eigen::Index>(names.size()) != p) {
    fail(ErrorCode::kShape, names.size(), " predictor names for ", p, " columns");
  }
  if (n <= p + 1) {
    fail(ErrorCode::kShape, "need more rows (", n, ") than coefficients (", p + 1, ")");
  }
  if (!x.allFinite() || !y.allFinite()) fail(ErrorCode::kNumeric, "non-finite regression input");

  const double mean = y.mean();
  const double sd = std::sqrt((y.array() - mean).square().sum() / static_cast<double>(n - 1));
  if (!(sd > 0.0) || sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
    fail(ErrorCode::kDegenerateTarget, "regression target is constant (sd = ", sd, ")");
  }
  const Eigen::VectorXd ys = (y.array() - mean) / sd;

  Eigen::MatrixXd design(n, p + 1);
  design.col(0).setOnes();
  design.rightCols(p) = x;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < p + 1) {
    // Name every column that lies in the span of the columns before it.
    std::vector<std::string> collinear;
    for (Eigen::Index j = 0; j <= p; ++j) {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> sub(design.leftCols(j + 1));
      sub.setThreshold(1e-10);
      if (sub.rank() < j + 1) {
        collinear.push_back(j == 0 ? "intercept" : names[static_cast<std::size_t>(j - 1)]);
      }
    }
    std::string list;
    for (const auto& c : collinear) list += (list.empty() ? "" : ", ") + c;
    fail(ErrorCode::kSingular, "design matrix is rank deficient (rank ", qr.rank(), " of ",
         p + 1, "); collinear columns: ", list);
  }
  const Eigen::VectorXd beta = qr.solve(ys);
  RegressionResult r;
  r.target = target;
  r.predictors = std::move(names);
  r.intercept = beta(0);
  r.weights.assign(beta.data() + 1, beta.data() + 1 + p);
  r.y_mean = mean;
  r.y_sd = sd;
  r.residuals = ys - design * beta;
  return r;
}

inline Eigen::MatrixXd design_matrix(const std::vector<BenchRecord>& records) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(records.size()), 6);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto row = encode_predictors(records[i].config);
    for (int j = 0; j < 6; ++j) x(static_cast<Eigen::Index>(i), j) = row[static_cast<std::size_t>(j)];
  }
  return x;
}

// One regression per target, in the order quality, latency, size.
inline std::vector<RegressionResult> regress_all(const std::vector<BenchRecord>& records) {
  for (const auto& r : records) r.validate();
  const Eigen::MatrixXd x = design_matrix(records);
  const std::vector<std::string> names(kPredictorNames.begin(), kPredictorNames.end());
  std::vector<RegressionResult> out;
  for (RegressionTarget t :
       {RegressionTarget::kQuality, RegressionTarget::kLatency, RegressionTarget::kSize}) {
    Eigen::VectorXd y(x.rows());
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      y(static_cast<Eigen::Index>(i)) = t == RegressionTarget::kQuality   ? r.quality
                                        : t == RegressionTarget::kLatency ? r.latency_ms
                                                                          : static_cast<double>(r.size_bytes);
    }
    out.push_back(ols_standardized(x, y, names, t));
  }
  return out;
}

// Records that no other record beats on both axes, by latency ascending with
// quality strictly increasing. Equal (latency, quality) pairs keep the
// smaller file.
inline std::vector<BenchRecord> frontier(std::vector<BenchRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const BenchRecord& a, const BenchRecord& b) {
    if (a.latency_ms != b.latency_ms) return a.latency_ms < b.latency_ms;
    if (a.quality != b.quality) return a.quality > b.quality;
    return a.size_bytes < b.size_bytes;
  });
  std::vector<BenchRecord> out;
  for (const auto& r : records) {
    if (out.empty() || r.quality > out.back().quality) out.push_back(r);
  }
  return out;
}

}  // namespace frill
