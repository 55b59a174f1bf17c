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

// Knowledge distillation: a student plus a throwaway linear head regresses
// teacher targets under an MSE loss, optimized with Adam on a staircase
// learning-rate schedule. Compression annealing and QAT share the same
// global step counter.

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "frill/dsp.hpp"
#include "frill/error.hpp"
#include "frill/lowrank.hpp"
#include "frill/model.hpp"
#include "frill/quant.hpp"
#include "frill/tensor.hpp"

namespace frill {

inline constexpr int kTeacherDim = 12288;

struct DistillExample {
  LogMelSpectrogram spectrogram;
  std::vector<float> target;
};

struct TrainConfig {
  int batch_size = 128;
  double lr0 = 1e-4;
  double decay_factor = 0.95;
  long long decay_every_steps = 5000;
  int epochs = 50;
  std::uint64_t seed = 0;
  int teacher_dim = kTeacherDim;
  // Stop after this many steps even if epochs remain; 0 disables the cap.
  long long max_steps = 0;
  int anneal_epochs = 10;
  // Fake quantization starts at this (1-indexed) epoch; epoch 1 is a float
  // warmup by default.
  int qat_start_epoch = 2;
  bool train_full_kernel = true;
  // Keep the short final batch of each epoch.
  bool drop_last = false;

  void validate() const {
    if (batch_size <= 0 || lr0 <= 0.0 || decay_every_steps <= 0 || epochs <= 0 ||
        teacher_dim <= 0 || anneal_epochs < 1 || qat_start_epoch < 1 || max_steps < 0) {
      fail(ErrorCode::kConfig, "training configuration values must be positive");
    }
    if (!(decay_factor > 0.0 && decay_factor < 1.0)) {
      fail(ErrorCode::kConfig, "decay_factor must lie in (0, 1), got ", decay_factor);
    }
  }
};

// Staircase exponential decay: lr0 * decay^floor(step / decay_every_steps).
inline double lr_at(const TrainConfig& cfg, long long step) {
  const long long stairs = step / cfg.decay_every_steps;
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(stairs));
}

template <typename T>
double mse_loss(std::span<const T> pred, std::span<const T> target) {
  if (pred.size() != target.size() || pred.empty()) {
    fail(ErrorCode::kShape, "mse_loss length mismatch: ", pred.size(), " vs ",
         target.size());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  long long t = 0;

  static AdamState like(const std::vector<Tensor<T>*>& params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
    return s;
  }
};

// One bias-corrected Adam update over aligned parameter / gradient lists.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<Tensor<T>*>& grads, AdamState<T>& state,
               double lr, const AdamOptions& opt = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    fail(ErrorCode::kShape, "adam_step: ", params.size(), " params, ",
         grads.size(), " grads, ", state.m.size(), " moment slots");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    if (p.shape() != g.shape() || p.shape() != m.shape()) {
      fail(ErrorCode::kShape, "adam_step: parameter ", shape_string(p.shape()),
           " vs gradient ", shape_string(g.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = opt.beta1 * static_cast<double>(m[j]) + (1.0 - opt.beta1) * gj;
      const double vj = opt.beta2 * static_cast<double>(v[j]) + (1.0 - opt.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / c1;
      const double v_hat = vj / c2;
      p[j] = static_cast<T>(static_cast<double>(p[j]) -
                            lr * m_hat / (std::sqrt(v_hat) + opt.epsilon));
    }
  }
}

// Linear projection from the embedding to the teacher space. Exists only
// during training.
template <typename T>
struct DistillHead {
  Tensor<T> kernel;  // [embedding_dim, teacher_dim]
  Tensor<T> bias;    // [teacher_dim]

  static DistillHead init(std::size_t embedding_dim, std::size_t teacher_dim, Rng& rng) {
    return {random_normal<T>({embedding_dim, teacher_dim}, rng,
                             std::sqrt(1.0 / static_cast<double>(embedding_dim))),
            Tensor<T>({teacher_dim})};
  }
};

// Maps a spectrogram to the teacher representation.
using TeacherOracle = std::function<std::vector<float>(const LogMelSpectrogram&)>;

// Toy teacher: a fixed seeded random linear map of the flattened spectrogram.
class LinearTeacher {
 public:
  LinearTeacher(std::size_t input_dim, std::size_t teacher_dim, std::uint64_t seed)
      : weights_({input_dim, teacher_dim}) {
    Rng rng(seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (auto& v : weights_.data()) v = static_cast<float>(stddev * rng.normal());
  }

  std::vector<float> operator()(const LogMelSpectrogram& spec) const {
    if (spec.frames.size() != weights_.dim(0)) {
      fail(ErrorCode::kShape, "teacher expects ", weights_.dim(0),
           " spectrogram values, got ", spec.frames.size());
    }
    return matmul(spec.frames.reshaped({1, spec.frames.size()}), weights_).storage();
  }

 private:
  Tensor<float> weights_;
};

// Seeded spectrograms drawn from a low-dimensional latent space, so a
// linear teacher over them stays learnable by a small student.
inline std::vector<LogMelSpectrogram> synthetic_spectrograms(
    std::size_t count, std::uint64_t seed, std::size_t latent_dim = 8,
    std::size_t frames = FrontendConfig::kContextFrames,
    std::size_t bins = FrontendConfig::kNumMelBins) {
  Rng rng(seed);
  std::vector<Tensor<float>> basis;
  for (std::size_t i = 0; i < latent_dim; ++i) {
    basis.push_back(random_normal<float>({frames, bins}, rng, 1.0));
  }
  std::vector<LogMelSpectrogram> out(count);
  for (auto& s : out) {
    s.frames = Tensor<float>({frames, bins});
    for (std::size_t i = 0; i < latent_dim; ++i) {
      const auto z = static_cast<float>(rng.normal());
      for (std::size_t j = 0; j < s.frames.size(); ++j) s.frames[j] += z * basis[i][j];
    }
  }
  return out;
}

inline std::vector<DistillExample> make_examples(
    const std::vector<LogMelSpectrogram>& specs, const TeacherOracle& teacher) {
  std::vector<DistillExample> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back({s, teacher(s)});
  return out;
}

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  StudentModel<T> model_grads;
  DistillHead<T> head_grads;
};

namespace detail {

template <typename T>
Tensor<T> target_batch(const std::vector<const DistillExample*>& batch,
                       std::size_t teacher_dim) {
  Tensor<T> t({batch.size(), teacher_dim});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (batch[n]->target.size() != teacher_dim) {
      fail(ErrorCode::kShape, "target length ", batch[n]->target.size(),
           " does not match teacher_dim ", teacher_dim);
    }
    for (std::size_t j = 0; j < teacher_dim; ++j) {
      t[n * teacher_dim + j] = static_cast<T>(batch[n]->target[j]);
    }
  }
  return t;
}

}  // namespace detail

template <typename T>
double distill_loss(const StudentModel<T>& m, const DistillHead<T>& head,
                    const std::vector<const DistillExample*>& batch) {
  std::vector<const LogMelSpectrogram*> specs;
  for (const auto* e : batch) specs.push_back(&e->spectrogram);
  const Tensor<T> emb = forward_batch(m, spectrogram_batch<T>(specs));
  const Tensor<T> pred = dense(emb, head.kernel, head.bias);
  const Tensor<T> target = detail::target_batch<T>(batch, head.bias.size());
  return mse_loss<T>(pred.data(), target.data());
}

// Loss and exact gradients for every trainable tensor of student and head.
template <typename T>
LossAndGrads<T> distill_loss_and_grads(const StudentModel<T>& m, const DistillHead<T>& head,
                                       const std::vector<const DistillExample*>& batch) {
  std::vector<const LogMelSpectrogram*> specs;
  for (const auto* e : batch) specs.push_back(&e->spectrogram);
  ForwardTrace<T> trace;
  const Tensor<T> emb = forward_batch(m, spectrogram_batch<T>(specs), &trace);
  const Tensor<T> pred = dense(emb, head.kernel, head.bias);
  const Tensor<T> target = detail::target_batch<T>(batch, head.bias.size());

  LossAndGrads<T> out{mse_loss<T>(pred.data(), target.data()), zeros_like_model(m),
                      {zeros_like(head.kernel), zeros_like(head.bias)}};
  Tensor<T> dpred = pred;
  const T scale = static_cast<T>(2.0 / static_cast<double>(pred.size()));
  for (std::size_t i = 0; i < dpred.size(); ++i) dpred[i] = scale * (pred[i] - target[i]);
  auto hg = dense_backward(emb, head.kernel, dpred);
  out.head_grads.kernel = std::move(hg.dw);
  out.head_grads.bias = std::move(hg.db);
  backward(m, trace, hg.dx, out.model_grads);
  return out;
}

// Pins lambda to 0, drops W and, for QAT configs, swaps in the int8 kernels.
template <typename T>
void finalize_for_export(StudentModel<T>& m) {
  m.fake_quant_active = false;
  if (auto* lr = std::get_if<LowRankDense<T>>(&m.bottleneck)) {
    LowRankDense<T> fin = finalize(std::move(*lr));
    if (m.config.qat) {
      m.bottleneck = QuantizedLowRank<T>{quantize_matrix(fin.u), quantize_matrix(fin.v),
                                         std::move(fin.b)};
    } else {
      m.bottleneck = std::move(fin);
    }
  } else if (auto* d = std::get_if<DenseLayer<T>>(&m.bottleneck)) {
    if (m.config.qat) m.bottleneck = quantize_layer(d->w, d->b);
  }
}

template <typename T>
struct TrainResult {
  StudentModel<T> model;
  std::vector<double> loss_history;  // one entry per step
  std::vector<double> validation_history;  // one entry per epoch, if requested
  long long steps = 0;
};

struct TrainHooks {
  // Called after each step with (step, loss).
  std::function<void(long long, double)> on_step;
  // Held-out examples scored (without updating anything) after every epoch.
  const std::vector<DistillExample>* validation = nullptr;
  std::function<void(int, double)> on_epoch;
};

template <typename T>
TrainResult<T> train(StudentModel<T> model, const std::vector<DistillExample>& data,
                     const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.empty()) fail(ErrorCode::kConfig, "training data is empty");
  for (const auto& e : data) {
    if (e.target.size() != static_cast<std::size_t>(cfg.teacher_dim)) {
      fail(ErrorCode::kShape, "example target has ", e.target.size(),
           " values, teacher_dim is ", cfg.teacher_dim);
    }
  }
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n = data.size();
  const std::size_t full_batches = n / batch;
  const std::size_t steps_per_epoch =
      cfg.drop_last ? full_batches : (n + batch - 1) / batch;
  if (steps_per_epoch == 0) {
    fail(ErrorCode::kConfig, "drop_last with ", n, " examples and batch size ",
         batch, " leaves no batches");
  }
  const CompressionSchedule schedule{cfg.anneal_epochs,
                                     static_cast<long long>(steps_per_epoch)};

  Rng rng(cfg.seed);
  DistillHead<T> head = DistillHead<T>::init(model.embedding_dim(),
                                             static_cast<std::size_t>(cfg.teacher_dim), rng);
  std::vector<Tensor<T>*> params = trainable_tensors(model, cfg.train_full_kernel);
  params.push_back(&head.kernel);
  params.push_back(&head.bias);
  AdamState<T> adam = AdamState<T>::like(params);

  TrainResult<T> result;
  std::vector<std::size_t> order(n);
  long long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      std::vector<const DistillExample*> mb;
      for (std::size_t i = b * batch; i < std::min(n, (b + 1) * batch); ++i) {
        mb.push_back(&data[order[i]]);
      }
      if (auto* lr = std::get_if<LowRankDense<T>>(&model.bottleneck)) {
        lr->lambda = lambda_at(schedule, step);
      }
      model.fake_quant_active = model.config.qat && epoch >= cfg.qat_start_epoch;

      auto lg = distill_loss_and_grads(model, head, mb);
      if (!std::isfinite(lg.loss)) {
        fail(ErrorCode::kDivergence, "loss became non-finite at step ", step);
      }
      std::vector<Tensor<T>*> grads = trainable_tensors(lg.model_grads, cfg.train_full_kernel);
      grads.push_back(&lg.head_grads.kernel);
      grads.push_back(&lg.head_grads.bias);
      params = trainable_tensors(model, cfg.train_full_kernel);
      params.push_back(&head.kernel);
      params.push_back(&head.bias);
      adam_step(params, grads, adam, lr_at(cfg, step));

      result.loss_history.push_back(lg.loss);
      if (hooks.on_step) hooks.on_step(step, lg.loss);
      ++step;
    }
    if (hooks.validation && !hooks.validation->empty()) {
      double total = 0.0;
      const std::size_t vn = hooks.validation->size();
      for (std::size_t i = 0; i < vn; i += batch) {
        std::vector<const DistillExample*> vb;
        for (std::size_t j = i; j < std::min(vn, i + batch); ++j) {
          vb.push_back(&(*hooks.validation)[j]);
        }
        total += distill_loss(model, head, vb) * static_cast<double>(vb.size());
      }
      result.validation_history.push_back(total / static_cast<double>(vn));
      if (hooks.on_epoch) hooks.on_epoch(epoch, result.validation_history.back());
    }
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
  }
  finalize_for_export(model);
  result.model = std::move(model);
  result.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Dataset files.
//
// Binary layout (little-endian): u32 frames, u32 bins, u32 teacher_dim,
// then per example frames*bins f32 spectrogram values followed by
// teacher_dim f32 target values, until end of file.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                     static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  out.write(b, 4);
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline bool get_f32(std::istream& in, float& f) {
  std::uint32_t bits;
  if (!get_u32(in, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

inline std::vector<float> read_csv_floats(const std::filesystem::path& path,
                                          std::size_t* rows = nullptr) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open ", path.string());
  std::vector<float> values;
  std::string line;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++count;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) values.push_back(std::stof(cell));
  }
  if (rows) *rows = count;
  return values;
}

}  // namespace detail

inline void write_distill_dataset(const std::string& path,
                                  const std::vector<DistillExample>& data) {
  if (data.empty()) fail(ErrorCode::kConfig, "refusing to write an empty dataset");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write ", path);
  const auto& first = data.front();
  detail::put_u32(out, static_cast<std::uint32_t>(first.spectrogram.num_frames()));
  detail::put_u32(out, static_cast<std::uint32_t>(first.spectrogram.num_mel_bins()));
  detail::put_u32(out, static_cast<std::uint32_t>(first.target.size()));
  for (const auto& e : data) {
    if (e.spectrogram.frames.shape() != first.spectrogram.frames.shape() ||
        e.target.size() != first.target.size()) {
      fail(ErrorCode::kShape, "dataset examples must share one geometry");
    }
    for (float v : e.spectrogram.frames.data()) detail::put_f32(out, v);
    for (float v : e.target) detail::put_f32(out, v);
  }
}

inline std::vector<DistillExample> read_distill_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open ", path);
  std::uint32_t frames = 0, bins = 0, teacher_dim = 0;
  if (!detail::get_u32(in, frames) || !detail::get_u32(in, bins) ||
      !detail::get_u32(in, teacher_dim)) {
    fail(ErrorCode::kFormat, "dataset header truncated in ", path);
  }
  if (frames == 0 || bins == 0 || teacher_dim == 0) {
    fail(ErrorCode::kFormat, "dataset header has a zero dimension");
  }
  std::vector<DistillExample> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    DistillExample e;
    e.spectrogram.frames = Tensor<float>({frames, bins});
    for (auto& v : e.spectrogram.frames.data()) {
      if (!detail::get_f32(in, v)) fail(ErrorCode::kFormat, "truncated example in ", path);
    }
    e.target.resize(teacher_dim);
    for (auto& v : e.target) {
      if (!detail::get_f32(in, v)) fail(ErrorCode::kFormat, "truncated example in ", path);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// A directory of <id>.spec.csv (one row per frame) and <id>.target.csv
// (one row of teacher values) pairs, taken in sorted id order.
inline std::vector<DistillExample> read_distill_csv_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(ErrorCode::kIo, dir, " is not a directory");
  std::vector<std::string> ids;
  const std::string suffix = ".spec.csv";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<DistillExample> out;
  for (const auto& id : ids) {
    std::size_t rows = 0;
    auto spec = detail::read_csv_floats(fs::path(dir) / (id + ".spec.csv"), &rows);
    if (rows == 0 || spec.size() % rows != 0) {
      fail(ErrorCode::kFormat, "ragged spectrogram CSV for ", id);
    }
    const std::size_t cols = spec.size() / rows;
    DistillExample e;
    e.spectrogram.frames = Tensor<float>({rows, cols}, std::move(spec));
    e.target = detail::read_csv_floats(fs::path(dir) / (id + ".target.csv"));
    out.push_back(std::move(e));
  }
  if (out.empty()) fail(ErrorCode::kFormat, "no *.spec.csv files in ", dir);
  return out;
}

}  // namespace frill
