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

// Acceptance suite. Each criterion prints one PASS/FAIL line; the process
// exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "frill/frill.hpp"
#include "oracles.hpp"

namespace {

using namespace frill;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Reported per-task accuracies in percent: Voxceleb1, Voxforge, Speech
// Commands, CREMA-D, SAVEE, Masked Speech, ESC-50 HS.
const std::vector<std::string> kTasks{"voxceleb1", "voxforge",      "speech_commands", "crema_d",
                                      "savee",     "masked_speech", "esc50_hs"};

std::map<std::string, double> row(const std::vector<double>& acc) {
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < kTasks.size(); ++i) out[kTasks[i]] = acc[i];
  return out;
}

const auto kTrill = row({48.5, 84.5, 81.9, 66.2, 70.0, 66.0, 86.4});
const auto kFrill = row({44.5, 76.9, 79.7, 70.9, 67.5, 65.7, 86.4});          // small_2.0_gap
const auto kSmallQat = row({37.0, 75.3, 76.6, 67.0, 67.5, 63.4, 77.3});       // small_0.5_qat
const auto kTinyCompGap = row({29.2, 68.0, 57.8, 60.8, 59.2, 61.6, 78.8});    // tiny_0.5_comp_gap

// 1. Aggregate quality of the FRILL row against TRILL.
Outcome aggregate_frill() {
  const double q = aggregate_quality(kFrill, kTrill).aggregate_percent;
  return {std::abs(q - -1.70) <= 0.05, "aggregate " + fmt("%.4f", q) + "% (target -1.70 +- 0.05)"};
}

// 2. Aggregates of the two other representative rows.
Outcome aggregate_others() {
  const double small = aggregate_quality(kSmallQat, kTrill).aggregate_percent;
  const double tiny = aggregate_quality(kTinyCompGap, kTrill).aggregate_percent;
  const bool ok_small = std::abs(small - -5.63) <= 0.05;
  const bool ok_tiny = std::abs(tiny - -10.17) <= 0.05;
  return {ok_small && ok_tiny, "small_0.5_qat " + fmt("%.4f", small) + "% (target -5.63 +- 0.05, " +
                                   (ok_small ? "ok" : "off") + "); tiny_0.5_comp_gap " +
                                   fmt("%.4f", tiny) + "% (target -10.17 +- 0.05, " +
                                   (ok_tiny ? "ok" : "off") + ")"};
}

// 3. Compressed bottleneck weight count and serialized size.
Outcome compression_count() {
  Rng rng(3);
  LowRankDense<float> layer{random_normal<float>({2048, 2048}, rng, 0.02),
                            random_normal<float>({2048, 100}, rng, 0.02),
                            random_normal<float>({2048, 100}, rng, 0.02), Tensor<float>({2048}),
                            0.0};
  layer.validate();
  const auto fin = finalize(std::move(layer));
  const std::size_t stored = fin.u.size() + fin.v.size();

  BuildOptions opt{BuildForm::kInference};
  opt.compression_rank = 100;
  const auto plain = inspect(serialize(build<float>(ModelConfig::parse("small_2.0_gap"), 1, opt)));
  const auto comp =
      inspect(serialize(build<float>(ModelConfig::parse("small_2.0_comp_gap"), 1, opt)));
  const double ratio = static_cast<double>(plain.record_bytes("bottleneck/")) /
                       static_cast<double>(comp.record_bytes("bottleneck/"));
  return {stored == 409600 && !fin.w && ratio >= 9.0,
          "stored kernel weights " + std::to_string(stored) + " (want 409600); bottleneck bytes " +
              std::to_string(plain.record_bytes("bottleneck/")) + " -> " +
              std::to_string(comp.record_bytes("bottleneck/")) + ", ratio " + fmt("%.2f", ratio) +
              " (want >= 9)"};
}

double frob_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

// 4. Eckart-Young optimality of the truncated SVD.
Outcome eckart_young() {
  Rng rng(4);
  double worst_rel = 0.0;
  int beaten = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = random_normal<double>({64, 48}, rng);
    const auto f = truncated_svd(w, 10);
    const double err = frob_diff(w, oracle::matmul(f.u, oracle::transpose(f.v)));
    const auto sv = oracle::singular_values(w);
    double tail = 0.0;
    for (std::size_t i = 10; i < sv.size(); ++i) tail += sv[i] * sv[i];
    tail = std::sqrt(tail);
    worst_rel = std::max(worst_rel, std::abs(err - tail) / tail);
    for (int r = 0; r < 200; ++r) {
      Tensor<double> approx;
      if (r % 2 == 0) {
        // Random factors with the best scalar multiple.
        const auto p = oracle::matmul(random_normal<double>({64, 10}, rng),
                                      random_normal<double>({10, 48}, rng));
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          num += p[i] * w[i];
          den += p[i] * p[i];
        }
        approx = p;
        for (auto& v : approx.data()) v *= num / den;
      } else {
        // Small perturbations of the optimal factors.
        auto u = f.u, v = f.v;
        for (auto& e : u.data()) e += 0.01 * rng.normal();
        for (auto& e : v.data()) e += 0.01 * rng.normal();
        approx = oracle::matmul(u, oracle::transpose(v));
      }
      if (err < frob_diff(w, approx)) ++beaten;
    }
  }
  return {worst_rel <= 1e-6 && beaten == 4000,
          "max relative gap to tail norm " + fmt("%.3g", worst_rel) + " (want <= 1e-6); beat " +
              std::to_string(beaten) + "/4000 rank-10 alternatives"};
}

// 5. Mixed forward is the convex blend of the two paths.
Outcome bilinearity() {
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 4 + rng.index(60), n = 4 + rng.index(60);
    const std::size_t k = 1 + rng.index(std::min(m, n));
    auto layer = LowRankDense<float>::from_kernel(random_normal<float>({m, n}, rng),
                                                  random_normal<float>({n}, rng), k);
    for (auto& v : layer.u.data()) v += static_cast<float>(0.2 * rng.normal());
    for (auto& v : layer.v.data()) v += static_cast<float>(0.2 * rng.normal());
    layer.lambda = rng.uniform();
    const auto x = random_normal<float>({1 + rng.index(8), m}, rng);
    const auto full = dense(x, *layer.w, layer.b);
    auto low = matmul_transposed(matmul(x, layer.u), layer.v);
    for (std::size_t i = 0; i < low.size(); ++i) low[i] += layer.b[i % n];
    Tensor<double> expect(full.shape());
    for (std::size_t i = 0; i < full.size(); ++i) {
      expect[i] = layer.lambda * full[i] + (1.0 - layer.lambda) * low[i];
    }
    worst = std::max(worst, oracle::rel_error(oracle::to_double(mixed_forward(layer, x)), expect));
  }
  const CompressionSchedule s{10, 37};
  const double l0 = lambda_at(s, 0), l10 = lambda_at(s, 10 * 37);
  return {worst <= 1e-6 && l0 == 1.0 && l10 == 0.0,
          "max relative deviation " + fmt("%.3g", worst) + " (want <= 1e-6); lambda(0)=" +
              fmt("%g", l0) + ", lambda(10 epochs)=" + fmt("%g", l10)};
}

// 6. Int8 round trip and integer forward.
Outcome quant_bounds() {
  Rng rng(6);
  std::size_t checked = 0, violations = 0;
  double worst_fwd = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 8 + rng.index(120), n = 8 + rng.index(120);
    const auto w = random_normal<float>({m, n}, rng, 0.01 + rng.uniform());
    const auto spec = choose_scale(w);
    const auto q = fake_quant(w, spec);
    for (std::size_t i = 0; i < w.size(); ++i, ++checked) {
      const double e = std::abs(static_cast<double>(q[i]) - static_cast<double>(w[i]));
      // Half a float ulp of slack for the rounding of the product itself.
      if (e > spec.scale / 2.0 + 1e-7 * std::abs(w[i])) ++violations;
    }
    const auto b = random_normal<float>({n}, rng);
    const auto x = random_normal<float>({4, m}, rng);
    const auto layer = quantize_layer(w, b);
    worst_fwd = std::max(worst_fwd, oracle::rel_error(int_forward(layer, x), dense(x, q, b)));
  }
  return {violations == 0 && worst_fwd <= 1e-5,
          std::to_string(violations) + " of " + std::to_string(checked) +
              " weights exceed scale/2; int vs fake-quant forward " + fmt("%.3g", worst_fwd) +
              " (want <= 1e-5)"};
}

// 7. Distillation gradients against central differences.
Outcome gradients() {
  ModelConfig c = ModelConfig::parse("tiny_1.0_comp");
  c.embedding_dim = 12;
  BuildOptions opt;
  opt.input_frames = 24;
  opt.input_bins = 16;
  opt.compression_rank = 5;
  auto m = build_custom<double>(toy_topology(), c, 7, opt);
  auto& lr = std::get<LowRankDense<double>>(m.bottleneck);
  lr.lambda = 0.6;
  const auto specs = synthetic_spectrograms(4, 8, 4, 24, 16);
  const LinearTeacher teacher(24 * 16, 6, 9);
  const auto data = make_examples(specs, [&](const LogMelSpectrogram& s) { return teacher(s); });
  std::vector<const DistillExample*> batch;
  for (const auto& e : data) batch.push_back(&e);
  Rng rng(10);
  auto head = DistillHead<double>::init(12, 6, rng);
  for (auto& v : head.bias.data()) v = 0.1 * rng.normal();
  const auto lg = distill_loss_and_grads(m, head, batch);
  const auto& glr = std::get<LowRankDense<double>>(lg.model_grads.bottleneck);

  struct Param {
    const char* name;
    Tensor<double>* value;
    const Tensor<double>* grad;
  };
  const std::vector<Param> params{{"bottleneck W", &*lr.w, &*glr.w},
                                  {"bottleneck b", &lr.b, &glr.b},
                                  {"factor U", &lr.u, &glr.u},
                                  {"factor V", &lr.v, &glr.v},
                                  {"head kernel", &head.kernel, &lg.head_grads.kernel},
                                  {"head bias", &head.bias, &lg.head_grads.bias}};
  double worst = 0.0;
  std::string worst_name;
  int sampled = 0;
  const double h = 1e-5;
  for (const auto& p : params) {
    for (int s = 0; s < 12; ++s) {
      const std::size_t i = rng.index(p.value->size());
      const double orig = (*p.value)[i];
      (*p.value)[i] = orig + h;
      const double lp = distill_loss(m, head, batch);
      (*p.value)[i] = orig - h;
      const double lm = distill_loss(m, head, batch);
      (*p.value)[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double g = (*p.grad)[i];
      const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6});
      if (rel > worst) {
        worst = rel;
        worst_name = p.name;
      }
      ++sampled;
    }
  }
  return {worst <= 1e-3, std::to_string(sampled) + " sampled weights, max relative error " +
                             fmt("%.3g", worst) + " at " + worst_name + " (want <= 1e-3)"};
}

// 8. Toy distillation run, twice.
Outcome toy_convergence() {
  const auto specs = synthetic_spectrograms(320, 7);
  const LinearTeacher teacher(specs[0].frames.size(), 32, 3);
  auto data = make_examples(specs, [&](const LogMelSpectrogram& s) { return teacher(s); });
  const std::vector<DistillExample> validation(data.begin() + 256, data.end());
  data.resize(256);
  ModelConfig c;
  c.embedding_dim = 64;
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.teacher_dim = 32;
  cfg.epochs = 1000;
  cfg.max_steps = 2000;
  cfg.seed = 11;
  TrainHooks hooks;
  hooks.validation = &validation;
  // Validation loss of the untrained student with the head train() draws
  // first from the same seed.
  double val0 = 0.0;
  {
    const auto init = build_custom<float>(toy_topology(), c, 1);
    Rng head_rng(cfg.seed);
    const auto head = DistillHead<float>::init(64, 32, head_rng);
    std::vector<const DistillExample*> vb;
    for (const auto& e : validation) vb.push_back(&e);
    val0 = distill_loss(init, head, vb);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto a = train(build_custom<float>(toy_topology(), c, 1), data, cfg, hooks);
  const auto b = train(build_custom<float>(toy_topology(), c, 1), data, cfg, hooks);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double first = a.loss_history.front();
  double last = 0.0;
  for (std::size_t i = a.loss_history.size() - 8; i < a.loss_history.size(); ++i) {
    last += a.loss_history[i] / 8.0;
  }
  const bool same = a.loss_history == b.loss_history &&
                    a.validation_history == b.validation_history &&
                    serialize(a.model) == serialize(b.model);
  const double val_drop = val0 / a.validation_history.back();
  return {a.steps == 2000 && last <= 0.01 * first && val_drop >= 10.0 && same,
          "steps " + std::to_string(a.steps) + ", loss " + fmt("%.4g", first) + " -> " +
              fmt("%.4g", last) + " (" + fmt("%.3g", 100.0 * last / first) +
              "% of initial, want <= 1%); validation " + fmt("%.4g", val0) + " -> " +
              fmt("%.4g", a.validation_history.back()) + " (" + fmt("%.3gx", val_drop) +
              ", want >= 10x); runs identical: " + (same ? "yes" : "no") + "; " +
              fmt("%.0f s", secs)};
}

// 9. Grid size, tiny topology, parameter ordering.
Outcome grid_facts() {
  const auto grid = enumerate_grid();
  const auto tiny = reference_topology(Mv3Size::kTiny);
  bool increasing = true;
  std::string broken;
  BuildOptions opt{BuildForm::kInference};
  for (const char* width : {"0.5", "0.75", "1.0", "1.25", "1.5", "2.0"}) {
    for (const char* suffix : {"_gap", "_comp_gap"}) {
      std::size_t prev = 0;
      for (const char* size : {"tiny", "small", "large"}) {
        const std::string name = std::string(size) + "_" + width + suffix;
        const std::size_t p = param_count(build<float>(ModelConfig::parse(name), 1, opt));
        if (p <= prev) {
          increasing = false;
          broken = name;
        }
        prev = p;
      }
    }
  }
  return {grid.size() == 144 && tiny.blocks.size() == 9 && tiny.final_conv == 512 && increasing,
          std::to_string(grid.size()) + " configs; tiny has " + std::to_string(tiny.blocks.size()) +
              " blocks, final conv " + std::to_string(tiny.final_conv) +
              "; param count tiny < small < large at every width: " +
              (increasing ? "yes" : "no, at " + broken)};
}

// 10. Frontier against the quadratic dominance oracle.
Outcome frontier_check() {
  Rng rng(12);
  const auto grid = enumerate_grid();
  int mismatches = 0;
  for (int cloud = 0; cloud < 1000; ++cloud) {
    const std::size_t n = 1 + rng.index(60);
    std::vector<BenchRecord> recs;
    std::vector<oracle::Point> pts;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grids make ties common.
      const double lat = cloud % 2 ? 0.1 + rng.uniform() : 0.5 * (1 + rng.index(8));
      const double q = cloud % 2 ? -20 * rng.uniform() : -1.0 * rng.index(8);
      recs.push_back({grid[i % grid.size()], q, lat, 100});
      pts.push_back({lat, q});
    }
    std::set<std::pair<double, double>> expect, got;
    for (auto i : oracle::non_dominated(pts)) expect.insert({pts[i].latency, pts[i].quality});
    const auto f = frontier(recs);
    for (const auto& r : f) got.insert({r.latency_ms, r.quality});
    if (got != expect || got.size() != f.size()) ++mismatches;
  }
  const double q_frill = aggregate_quality(kFrill, kTrill).aggregate_percent;
  const double q_small = aggregate_quality(kSmallQat, kTrill).aggregate_percent;
  const double q_tiny = aggregate_quality(kTinyCompGap, kTrill).aggregate_percent;
  const std::vector<oracle::Point> students{{8.5, q_frill}, {3.0, q_small}, {0.9, q_tiny}};
  const bool mutual = oracle::non_dominated(students).size() == 3;
  const auto f = frontier({{ModelConfig::parse("small_2.0_gap"), q_frill, 8.5, 1},
                           {ModelConfig::parse("small_0.5_qat"), q_small, 3.0, 1},
                           {ModelConfig::parse("tiny_0.5_comp_gap"), q_tiny, 0.9, 1}});
  return {mismatches == 0 && mutual && f.size() == 3,
          std::to_string(mismatches) + "/1000 clouds disagree with the oracle; student points " +
              (mutual ? "mutually non-dominating" : "dominate each other") + ", " +
              std::to_string(f.size()) + "/3 on the frontier"};
}

// 11. Host latency ordering and repeatability.
Outcome latency_order() {
  const std::vector<std::string> names{"tiny_0.5_comp_gap", "small_0.5_qat", "small_2.0_gap"};
  BuildOptions opt{BuildForm::kInference};
  Rng rng(13);
  LogMelSpectrogram input;
  input.frames = random_normal<float>({96, 64}, rng);
  std::vector<double> first, second;
  for (const auto& n : names) {
    const auto m = build<float>(ModelConfig::parse(n), 1, opt);
    first.push_back(measure_latency(m, input).median_ms);
    second.push_back(measure_latency(m, input).median_ms);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    worst = std::max(worst, std::abs(first[i] - second[i]) / std::min(first[i], second[i]));
  }
  const bool ordered = first[0] < first[1] && first[1] < first[2] && second[0] < second[1] &&
                       second[1] < second[2];
  std::ostringstream d;
  d.precision(3);
  for (std::size_t i = 0; i < 3; ++i) {
    d << names[i] << " " << first[i] << "/" << second[i] << " ms; ";
  }
  d << "max run-to-run change " << 100 * worst << "% (want <= 20%)";
  return {ordered && worst <= 0.2, d.str()};
}

// 12. Standardized OLS on the grid design.
Outcome ols_validity() {
  const auto grid = enumerate_grid();
  const std::vector<double> w_true{1.5, -2.0, 0.75, 3.0, -1.25, 0.5};
  Eigen::MatrixXd x(144, 6);
  Eigen::VectorXd y(144), y_noisy(144);
  Rng rng(14);
  for (Eigen::Index i = 0; i < 144; ++i) {
    const auto e = encode_predictors(grid[static_cast<std::size_t>(i)]);
    double acc = 4.0;
    for (int j = 0; j < 6; ++j) {
      x(i, j) = e[static_cast<std::size_t>(j)];
      acc += w_true[static_cast<std::size_t>(j)] * e[static_cast<std::size_t>(j)];
    }
    y(i) = acc;
    y_noisy(i) = acc + rng.normal();
  }
  const auto r = ols_standardized(x, y);
  double werr = 0.0;
  for (std::size_t j = 0; j < 6; ++j) werr = std::max(werr, std::abs(r.weights[j] * r.y_sd - w_true[j]));
  const auto rn = ols_standardized(x, y_noisy);
  double ortho = std::abs(rn.residuals.sum());
  for (Eigen::Index j = 0; j < 6; ++j) ortho = std::max(ortho, std::abs(rn.residuals.dot(x.col(j))));
  return {werr <= 1e-6 && ortho <= 1e-8, "max weight error " + fmt("%.3g", werr) +
                                             " (want <= 1e-6); max |X^T r| " + fmt("%.3g", ortho) +
                                             " (want <= 1e-8)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"aggregate quality, FRILL vs TRILL", aggregate_frill},
      {"aggregate quality, small_0.5_qat and tiny_0.5_comp_gap", aggregate_others},
      {"compressed bottleneck count law", compression_count},
      {"truncated SVD optimality", eckart_young},
      {"mixed forward blend", bilinearity},
      {"int8 quantization bounds", quant_bounds},
      {"distillation gradients", gradients},
      {"toy distillation convergence", toy_convergence},
      {"grid and topology facts", grid_facts},
      {"frontier correctness", frontier_check},
      {"host latency ordering", latency_order},
      {"standardized OLS", ols_validity},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1 < 10 ? " " : "") << i + 1 << ". "
              << criteria[i].first << ": " << o.detail << " [" << fmt("%.2f", secs) << " s]"
              << std::endl;
  }
  std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size()
            << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
