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

// Distills a two-block toy student against a random linear teacher, exports
// it with a compressed int8 bottleneck and checks the file reloads to the
// same outputs.
//
//   toy_distill [steps] [out.frl]

#include <cstdlib>
#include <iostream>
#include <string>

#include "frill/frill.hpp"

int main(int argc, char** argv) {
  const long long steps = argc > 1 ? std::atoll(argv[1]) : 400;
  const std::string out = argc > 2 ? argv[2] : "toy_student.frl";
  try {
    const std::uint64_t seed = 7;
    auto specs = frill::synthetic_spectrograms(80, seed);
    const frill::LinearTeacher teacher(specs[0].frames.size(), 32, seed + 1);
    auto all = frill::make_examples(specs, teacher);
    std::vector<frill::DistillExample> validation(all.begin() + 64, all.end());
    all.resize(64);

    frill::ModelConfig config = frill::ModelConfig::parse("tiny_0.5_comp_qat");
    config.embedding_dim = 64;
    frill::BuildOptions opt;
    opt.compression_rank = 16;
    auto student = frill::build_custom<float>(frill::toy_topology(), config, seed, opt);

    frill::TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.teacher_dim = 32;
    cfg.epochs = 1000;
    cfg.max_steps = steps;
    cfg.anneal_epochs = 2;
    cfg.seed = seed;
    frill::TrainHooks hooks;
    hooks.on_step = [](long long step, double loss) {
      if (step % 50 == 0) std::cout << "step " << step << "  loss " << loss << '\n';
    };
    hooks.validation = &validation;
    auto result = frill::train(std::move(student), all, cfg, hooks);
    std::cout << "final train loss " << result.loss_history.back() << ", validation loss "
              << result.validation_history.back() << '\n';

    frill::save_model(result.model, out);
    const auto reloaded = frill::load_model(out);
    const auto a = frill::forward(result.model, validation[0].spectrogram);
    const auto b = frill::forward(reloaded, validation[0].spectrogram);
    std::cout << "wrote " << out << " (" << frill::model_size(out) << " bytes, "
              << frill::param_count(result.model) << " parameters); reload "
              << (a == b ? "matches" : "DIFFERS") << '\n';
    return a == b ? 0 : 1;
  } catch (const frill::Error& e) {
    std::cerr << frill::error_code_name(e.code()) << ": " << e.what() << '\n';
    return 1;
  }
}
