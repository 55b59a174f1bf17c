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

// Embedding quality evaluation: per-task linear probes over frozen
// utterance embeddings, optional per-speaker normalization, best-of
// reporting, and the aggregate quality score (mean per-task accuracy delta
// against the teacher).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "frill/error.hpp"

namespace frill {

enum class Split { kTrain, kTest };

struct EmbeddingRow {
  std::string utterance_id;
  std::optional<std::string> speaker_id;
  std::string label;
  Split split = Split::kTrain;
  std::vector<double> embedding;
};

struct EmbeddingTable {
  std::vector<EmbeddingRow> rows;

  std::size_t dim() const { return rows.empty() ? 0 : rows.front().embedding.size(); }

  bool has_speakers() const {
    return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const auto& r) {
             return r.speaker_id.has_value();
           });
  }

  // Throws on structural problems; returns soft issues (test labels unseen
  // in training) as human-readable strings.
  std::vector<std::string> validate() const {
    std::vector<std::string> issues;
    const std::size_t d = dim();
    std::set<std::string> train_labels;
    std::unordered_map<std::string, Split> seen;
    for (const auto& r : rows) {
      if (r.embedding.size() != d || d == 0) {
        fail(ErrorCode::kShape, "row '", r.utterance_id, "' has embedding length ",
             r.embedding.size(), ", expected ", d);
      }
      auto [it, inserted] = seen.emplace(r.utterance_id, r.split);
      if (!inserted && it->second != r.split) {
        fail(ErrorCode::kFormat, "utterance '", r.utterance_id,
             "' appears in both train and test splits");
      }
      if (r.split == Split::kTrain) train_labels.insert(r.label);
    }
    std::set<std::string> flagged;
    for (const auto& r : rows) {
      if (r.split == Split::kTest && !train_labels.count(r.label) &&
          flagged.insert(r.label).second) {
        issues.push_back("test label '" + r.label + "' never appears in train");
      }
    }
    return issues;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

}  // namespace detail

// Header: [task,]utterance_id,speaker_id,label,split,e0,e1,...
// Rows are grouped by the optional task column; without it every row
// belongs to `default_task`.
inline std::map<std::string, EmbeddingTable> read_task_tables(
    std::istream& in, const std::string& default_task = "task") {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kFormat, "embedding CSV is empty");
  const auto header = detail::split_csv_line(detail::trim(line));
  const std::size_t off = !header.empty() && header[0] == "task" ? 1 : 0;
  if (header.size() < off + 5 || header[off] != "utterance_id" ||
      header[off + 1] != "speaker_id" || header[off + 2] != "label" ||
      header[off + 3] != "split") {
    fail(ErrorCode::kFormat,
         "embedding CSV header must be [task,]utterance_id,speaker_id,label,split,e0,...");
  }
  const std::size_t dim = header.size() - off - 4;
  std::map<std::string, EmbeddingTable> tables;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      fail(ErrorCode::kFormat, "line ", line_no, " has ", cells.size(),
           " fields, header has ", header.size());
    }
    EmbeddingRow r;
    r.utterance_id = cells[off];
    if (!cells[off + 1].empty()) r.speaker_id = cells[off + 1];
    r.label = cells[off + 2];
    if (cells[off + 3] == "train") r.split = Split::kTrain;
    else if (cells[off + 3] == "test") r.split = Split::kTest;
    else fail(ErrorCode::kFormat, "line ", line_no, ": split must be train or test");
    r.embedding.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      const std::string& cell = cells[off + 4 + j];
      try {
        std::size_t used = 0;
        r.embedding[j] = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        fail(ErrorCode::kFormat, "line ", line_no, ": bad number '", cell, "'");
      }
    }
    tables[off ? cells[0] : default_task].rows.push_back(std::move(r));
  }
  return tables;
}

inline EmbeddingTable read_embedding_table(std::istream& in) {
  auto tables = read_task_tables(in);
  if (tables.size() > 1) fail(ErrorCode::kFormat, "CSV holds ", tables.size(), " tasks");
  if (tables.empty()) fail(ErrorCode::kFormat, "embedding CSV has no rows");
  return std::move(tables.begin()->second);
}

inline EmbeddingTable read_embedding_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open ", path);
  return read_embedding_table(in);
}

inline void write_embedding_table(const EmbeddingTable& table, std::ostream& out) {
  out << "utterance_id,speaker_id,label,split";
  for (std::size_t j = 0; j < table.dim(); ++j) out << ",e" << j;
  out << '\n';
  out << std::setprecision(17);
  for (const auto& r : table.rows) {
    out << r.utterance_id << ',' << r.speaker_id.value_or("") << ',' << r.label << ','
        << (r.split == Split::kTrain ? "train" : "test");
    for (double v : r.embedding) out << ',' << v;
    out << '\n';
  }
}

// Elementwise mean of the per-context embeddings of one utterance.
inline std::vector<double> time_average(const std::vector<std::vector<double>>& contexts) {
  if (contexts.empty()) fail(ErrorCode::kShape, "time_average needs at least one context");
  std::vector<double> out(contexts.front().size(), 0.0);
  for (const auto& c : contexts) {
    if (c.size() != out.size()) {
      fail(ErrorCode::kShape, "context embeddings differ in length: ", c.size(),
           " vs ", out.size());
    }
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += c[j];
  }
  for (double& v : out) v /= static_cast<double>(contexts.size());
  return out;
}

// Per speaker: subtract the speaker's mean train-split embedding, then scale
// to unit L2 norm. Speakers with no train rows use the mean of their own
// rows. Vectors that are exactly zero after centering pass through.
inline EmbeddingTable speaker_normalize(const EmbeddingTable& table) {
  if (!table.has_speakers()) {
    fail(ErrorCode::kNormalizationUnavailable,
         "speaker normalization needs a speaker_id on every row");
  }
  const std::size_t d = table.dim();
  struct Acc {
    std::vector<double> train_sum, all_sum;
    std::size_t train_n = 0, all_n = 0;
  };
  std::map<std::string, Acc> stats;
  for (const auto& r : table.rows) {
    auto& a = stats[*r.speaker_id];
    if (a.all_sum.empty()) {
      a.train_sum.assign(d, 0.0);
      a.all_sum.assign(d, 0.0);
    }
    for (std::size_t j = 0; j < d; ++j) a.all_sum[j] += r.embedding[j];
    ++a.all_n;
    if (r.split == Split::kTrain) {
      for (std::size_t j = 0; j < d; ++j) a.train_sum[j] += r.embedding[j];
      ++a.train_n;
    }
  }
  EmbeddingTable out = table;
  for (auto& r : out.rows) {
    const auto& a = stats.at(*r.speaker_id);
    const auto& sum = a.train_n ? a.train_sum : a.all_sum;
    const double count = static_cast<double>(a.train_n ? a.train_n : a.all_n);
    double norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      r.embedding[j] -= sum[j] / count;
      norm2 += r.embedding[j] * r.embedding[j];
    }
    if (norm2 > 0.0) {
      const double inv = 1.0 / std::sqrt(norm2);
      for (double& v : r.embedding) v *= inv;
    }
  }
  return out;
}

enum class ProbeKind { kLogReg, kLda };

inline std::string_view probe_name(ProbeKind p) {
  return p == ProbeKind::kLogReg ? "logreg" : "lda";
}

struct TaskResult {
  std::string task_name;
  double accuracy = 0.0;  // fraction of the test split
  ProbeKind probe = ProbeKind::kLogReg;
  bool normalized = false;
};

struct LogRegOptions {
  double l2 = 1e-4;
  int iterations = 500;
};

struct LdaOptions {
  double ridge = 1e-6;
};

namespace detail {

struct ProbeData {
  std::vector<std::string> classes;
  Eigen::MatrixXd train_x, test_x;
  std::vector<int> train_y, test_y;  // test label -1 when unseen in train
};

inline ProbeData probe_data(const EmbeddingTable& table) {
  table.validate();
  ProbeData p;
  std::set<std::string> labels;
  std::size_t n_train = 0, n_test = 0;
  for (const auto& r : table.rows) {
    if (r.split == Split::kTrain) {
      labels.insert(r.label);
      ++n_train;
    } else {
      ++n_test;
    }
  }
  if (labels.size() < 2) {
    fail(ErrorCode::kConfig, "probe training needs at least 2 classes in train, got ",
         labels.size());
  }
  if (n_test == 0) fail(ErrorCode::kConfig, "test split is empty");
  p.classes.assign(labels.begin(), labels.end());
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < p.classes.size(); ++i) index[p.classes[i]] = static_cast<int>(i);
  const auto d = static_cast<Eigen::Index>(table.dim());
  p.train_x.resize(static_cast<Eigen::Index>(n_train), d);
  p.test_x.resize(static_cast<Eigen::Index>(n_test), d);
  Eigen::Index tr = 0, te = 0;
  for (const auto& r : table.rows) {
    Eigen::MatrixXd& dst = r.split == Split::kTrain ? p.train_x : p.test_x;
    const Eigen::Index row = r.split == Split::kTrain ? tr++ : te++;
    for (Eigen::Index j = 0; j < d; ++j) dst(row, j) = r.embedding[static_cast<std::size_t>(j)];
    auto it = index.find(r.label);
    if (r.split == Split::kTrain) p.train_y.push_back(it->second);
    else p.test_y.push_back(it == index.end() ? -1 : it->second);
  }
  return p;
}

inline double accuracy(const Eigen::MatrixXd& scores, const std::vector<int>& y) {
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    if (static_cast<int>(best) == y[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(y.size());
}

}  // namespace detail

// Multinomial logistic regression, full-batch gradient descent with a
// backtracking (Armijo) line search. Features are z-scored with train-split
// statistics.
inline TaskResult train_probe_logreg(const EmbeddingTable& table,
                                     const std::string& task_name = "",
                                     const LogRegOptions& opt = {}) {
  auto p = detail::probe_data(table);
  const Eigen::RowVectorXd mean = p.train_x.colwise().mean();
  Eigen::RowVectorXd sd =
      ((p.train_x.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j) {
    if (sd(j) < 1e-12) sd(j) = 1.0;
  }
  const Eigen::MatrixXd x = (p.train_x.rowwise() - mean).array().rowwise() / sd.array();
  const Eigen::MatrixXd xt = (p.test_x.rowwise() - mean).array().rowwise() / sd.array();
  const auto n = x.rows(), d = x.cols();
  const auto c = static_cast<Eigen::Index>(p.classes.size());
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, p.train_y[static_cast<std::size_t>(i)]) = 1.0;

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, c);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(c);

  auto probs = [&](const Eigen::MatrixXd& ww, const Eigen::RowVectorXd& bb) {
    Eigen::MatrixXd z = (x * ww).rowwise() + bb;
    const Eigen::VectorXd zmax = z.rowwise().maxCoeff();
    z = (z.colwise() - zmax).array().exp();
    const Eigen::VectorXd s = z.rowwise().sum();
    return Eigen::MatrixXd(z.array().colwise() / s.array());
  };
  auto objective = [&](const Eigen::MatrixXd& ww, const Eigen::RowVectorXd& bb) {
    const Eigen::MatrixXd pr = probs(ww, bb);
    double nll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      nll -= std::log(std::max(pr(i, p.train_y[static_cast<std::size_t>(i)]), 1e-300));
    }
    return nll / static_cast<double>(n) + 0.5 * opt.l2 * ww.squaredNorm();
  };

  double step = 1.0;
  double f = objective(w, b);
  for (int it = 0; it < opt.iterations; ++it) {
    const Eigen::MatrixXd resid = probs(w, b) - onehot;
    const Eigen::MatrixXd gw = x.transpose() * resid / static_cast<double>(n) + opt.l2 * w;
    const Eigen::RowVectorXd gb = resid.colwise().mean();
    const double g2 = gw.squaredNorm() + gb.squaredNorm();
    if (g2 < 1e-20) break;
    step = std::min(step * 2.0, 1e4);
    bool accepted = false;
    for (int halvings = 0; halvings < 60; ++halvings) {
      const Eigen::MatrixXd w_new = w - step * gw;
      const Eigen::RowVectorXd b_new = b - step * gb;
      const double f_new = objective(w_new, b_new);
      if (f_new <= f - 1e-4 * step * g2) {
        w = w_new;
        b = b_new;
        f = f_new;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  const Eigen::MatrixXd scores = (xt * w).rowwise() + b;
  return {task_name, detail::accuracy(scores, p.test_y), ProbeKind::kLogReg, false};
}

// Linear discriminant analysis with a pooled covariance, ridge-stabilized on
// the diagonal, and class priors from train frequencies.
inline TaskResult train_probe_lda(const EmbeddingTable& table,
                                  const std::string& task_name = "",
                                  const LdaOptions& opt = {}) {
  auto p = detail::probe_data(table);
  const auto n = p.train_x.rows(), d = p.train_x.cols();
  const auto c = static_cast<Eigen::Index>(p.classes.size());
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(c, d);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = p.train_y[static_cast<std::size_t>(i)];
    means.row(y) += p.train_x.row(i);
    counts(y) += 1.0;
  }
  for (Eigen::Index k = 0; k < c; ++k) means.row(k) /= counts(k);
  Eigen::MatrixXd centered = p.train_x;
  for (Eigen::Index i = 0; i < n; ++i) {
    centered.row(i) -= means.row(p.train_y[static_cast<std::size_t>(i)]);
  }
  const double dof = static_cast<double>(n > c ? n - c : n);
  Eigen::MatrixXd cov = centered.transpose() * centered / dof;
  cov.diagonal().array() += opt.ridge;

  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  const Eigen::VectorXd diag = ldlt.vectorD();
  const double dmax = diag.cwiseAbs().maxCoeff();
  const double dmin = diag.minCoeff();
  if (ldlt.info() != Eigen::Success || !(dmin > dmax * 1e-15)) {
    fail(ErrorCode::kNumeric, "LDA covariance is singular despite ridge ", opt.ridge,
         ": LDL^T pivots span [", dmin, ", ", dmax, "], condition estimate ",
         dmin > 0 ? dmax / dmin : std::numeric_limits<double>::infinity());
  }
  const Eigen::MatrixXd coef = ldlt.solve(means.transpose());  // [d, c]
  Eigen::RowVectorXd intercept(c);
  for (Eigen::Index k = 0; k < c; ++k) {
    intercept(k) = -0.5 * means.row(k).dot(coef.col(k)) +
                   std::log(counts(k) / static_cast<double>(n));
  }
  const Eigen::MatrixXd scores = (p.test_x * coef).rowwise() + intercept;
  return {task_name, detail::accuracy(scores, p.test_y), ProbeKind::kLda, false};
}

// Max accuracy over {logreg, lda} x {raw, speaker-normalized}. Earlier
// variants win ties: (logreg, raw), (lda, raw), (logreg, norm), (lda, norm).
// Variants that fail numerically are skipped.
inline TaskResult best_accuracy(const EmbeddingTable& table, const std::string& task_name = "") {
  std::vector<std::pair<const EmbeddingTable*, bool>> inputs{{&table, false}};
  std::optional<EmbeddingTable> normalized;
  if (table.has_speakers()) {
    normalized = speaker_normalize(table);
    inputs.emplace_back(&*normalized, true);
  }
  std::optional<TaskResult> best;
  std::optional<Error> last_error;
  for (const auto& [t, is_norm] : inputs) {
    for (ProbeKind kind : {ProbeKind::kLogReg, ProbeKind::kLda}) {
      try {
        TaskResult r = kind == ProbeKind::kLogReg ? train_probe_logreg(*t, task_name)
                                                  : train_probe_lda(*t, task_name);
        r.normalized = is_norm;
        if (!best || r.accuracy > best->accuracy) best = r;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNumeric) throw;
        last_error = e;
      }
    }
  }
  if (!best) throw *last_error;
  return *best;
}

struct QualityScore {
  std::map<std::string, double> per_task_delta;  // percentage points
  double aggregate_percent = 0.0;
  double aggregate_fraction = 0.0;
};

// Mean over tasks of (student accuracy - teacher accuracy), both in percent.
inline QualityScore aggregate_quality(const std::map<std::string, double>& student_acc,
                                      const std::map<std::string, double>& teacher_acc) {
  std::vector<std::string> only_student, only_teacher;
  for (const auto& [k, _] : student_acc) {
    if (!teacher_acc.count(k)) only_student.push_back(k);
  }
  for (const auto& [k, _] : teacher_acc) {
    if (!student_acc.count(k)) only_teacher.push_back(k);
  }
  if (!only_student.empty() || !only_teacher.empty()) {
    std::string msg = "task sets differ;";
    if (!only_student.empty()) {
      msg += " student only:";
      for (const auto& k : only_student) msg += " " + k;
    }
    if (!only_teacher.empty()) {
      msg += " teacher only:";
      for (const auto& k : only_teacher) msg += " " + k;
    }
    fail(ErrorCode::kKey, msg);
  }
  if (student_acc.empty()) fail(ErrorCode::kKey, "no tasks to aggregate");
  QualityScore q;
  double sum = 0.0;
  for (const auto& [task, acc] : student_acc) {
    const double delta = acc - teacher_acc.at(task);
    q.per_task_delta[task] = delta;
    sum += delta;
  }
  q.aggregate_percent = sum / static_cast<double>(student_acc.size());
  q.aggregate_fraction = q.aggregate_percent / 100.0;
  return q;
}

struct ModelAccuracyRow {
  std::string model;
  std::map<std::string, double> accuracy_percent;
};

// Aligned text table, one row per model, tasks in the given column order,
// plus the aggregate delta against `teacher_row` when given.
inline std::string format_quality_table(const std::vector<ModelAccuracyRow>& rows,
                                        const std::vector<std::string>& tasks,
                                        const ModelAccuracyRow* teacher_row = nullptr) {
  std::size_t name_w = 5;
  for (const auto& r : rows) name_w = std::max(name_w, r.model.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(name_w)) << "Model";
  for (const auto& t : tasks) {
    out << "  " << std::right << std::setw(static_cast<int>(std::max<std::size_t>(t.size(), 6))) << t;
  }
  if (teacher_row) out << "  " << std::setw(9) << "Aggregate";
  out << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(name_w)) << r.model;
    for (const auto& t : tasks) {
      const auto width = static_cast<int>(std::max<std::size_t>(t.size(), 6));
      auto it = r.accuracy_percent.find(t);
      out << "  " << std::right << std::setw(width);
      if (it == r.accuracy_percent.end()) out << "-";
      else out << std::fixed << std::setprecision(1) << it->second;
    }
    if (teacher_row) {
      const auto q = aggregate_quality(r.accuracy_percent, teacher_row->accuracy_percent);
      out << "  " << std::right << std::setw(9) << std::fixed << std::setprecision(2)
          << q.aggregate_percent;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace frill
