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

// frill: command-line driver.
//
//   frill grid      [--list] [--out manifest.json]
//   frill build     --config NAME [--form inference|training] [--rank K] [--toy] --out FILE
//   frill distill   --config NAME (--data FILE | --data-dir DIR | --synthetic N) --out FILE
//   frill embed     --model FILE --manifest CSV --out CSV
//   frill eval      --embeddings CSV... | --student-acc JSON, --teacher-acc JSON
//   frill bench     (--config NAME | --model FILE) [--runs N] [--warmup N] [--threads 1]
//   frill frontier  --records CSV [--out CSV]
//   frill regress   --records CSV [--out JSON]
//   frill frontend  --wav FILE --out CSV
//
// Failures print {"error": {"code": ..., "message": ...}} on stderr and
// exit nonzero. FRILL_SEED, when set, replaces every --seed value.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "frill/frill.hpp"

namespace {

using json = nlohmann::ordered_json;

std::uint64_t resolve_seed(std::uint64_t flag_value) {
  const char* env = std::getenv("FRILL_SEED");
  if (env == nullptr || *env == '\0') return flag_value;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    frill::fail(frill::ErrorCode::kConfig, "FRILL_SEED='", env, "' is not an unsigned integer");
  }
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) frill::fail(frill::ErrorCode::kIo, "cannot write ", path);
  out << text;
  if (!out) frill::fail(frill::ErrorCode::kIo, "short write to ", path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) frill::fail(frill::ErrorCode::kIo, "cannot open ", path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    frill::fail(frill::ErrorCode::kFormat, path, ": ", e.what());
  }
}

// {"task": accuracy_percent, ...}
std::map<std::string, double> read_accuracy_map(const std::string& path) {
  const json j = read_json(path);
  if (!j.is_object()) frill::fail(frill::ErrorCode::kFormat, path, " must hold a JSON object");
  std::map<std::string, double> out;
  for (const auto& [task, value] : j.items()) {
    if (!value.is_number()) {
      frill::fail(frill::ErrorCode::kFormat, path, ": accuracy for '", task, "' is not a number");
    }
    out[task] = value.get<double>();
  }
  return out;
}

json config_json(const frill::ModelConfig& c) {
  return {{"name", c.name()},
          {"size", std::string(frill::size_name(c.size))},
          {"width", c.width},
          {"gap", c.gap},
          {"compressed", c.compressed},
          {"qat", c.qat},
          {"embedding_dim", c.embedding_dim}};
}

std::string bottleneck_kind_name(const frill::Bottleneck<float>& b) {
  static const char* kNames[] = {"dense", "low_rank", "int8_dense", "int8_low_rank"};
  return kNames[b.index()];
}

frill::StudentModel<float> build_model(const std::string& config_name, std::uint64_t seed,
                                       const std::string& form, std::size_t rank, bool toy,
                                       std::size_t frames = frill::FrontendConfig::kContextFrames,
                                       std::size_t bins = frill::FrontendConfig::kNumMelBins) {
  const auto config = frill::ModelConfig::parse(config_name);
  frill::BuildOptions opt;
  if (form == "inference") opt.form = frill::BuildForm::kInference;
  else if (form == "training") opt.form = frill::BuildForm::kTraining;
  else frill::fail(frill::ErrorCode::kConfig, "--form must be inference or training");
  opt.compression_rank = rank;
  opt.input_frames = frames;
  opt.input_bins = bins;
  if (toy) return frill::build_custom<float>(frill::toy_topology(), config, seed, opt);
  return frill::build<float>(config, seed, opt);
}

json model_summary(const frill::StudentModel<float>& m, const std::string& path) {
  json j = config_json(m.config);
  j["bottleneck"] = bottleneck_kind_name(m.bottleneck);
  j["blocks"] = m.num_blocks();
  j["param_count"] = frill::param_count(m);
  j["path"] = path;
  j["size_bytes"] = frill::model_size(path);
  return j;
}

json report_json(const frill::LatencyReport& r) {
  return {{"config_name", r.config_name}, {"warmup_runs", r.warmup_runs},
          {"timed_runs", r.timed_runs},   {"per_run_ms", r.per_run_ms},
          {"median_ms", r.median_ms},     {"p10_ms", r.p10_ms},
          {"p90_ms", r.p90_ms}};
}

// --- subcommands ----------------------------------------------------------

struct GridArgs {
  bool list = false;
  std::string out;
};

void run_grid(const GridArgs& a) {
  const auto grid = frill::enumerate_grid();
  if (a.list) {
    std::ostringstream s;
    for (const auto& c : grid) s << c.name() << '\n';
    emit(s.str(), a.out);
    return;
  }
  json models = json::array();
  for (const auto& c : grid) models.push_back(config_json(c));
  emit(json{{"count", grid.size()}, {"models", models}}.dump(2) + "\n", a.out);
}

struct BuildArgs {
  std::string config, form = "inference", out;
  std::uint64_t seed = 0;
  std::size_t rank = frill::kDefaultCompressionRank;
  bool toy = false;
};

void run_build(const BuildArgs& a) {
  auto m = build_model(a.config, resolve_seed(a.seed), a.form, a.rank, a.toy);
  frill::save_model(m, a.out);
  std::cout << model_summary(m, a.out).dump(2) << '\n';
}

struct DistillArgs {
  std::string config, data, data_dir, validation, out, loss_log;
  std::size_t synthetic = 0;
  int teacher_dim = frill::kTeacherDim;
  int epochs = 50, batch_size = 128;
  double lr = 1e-4;
  long long max_steps = 0;
  std::uint64_t seed = 0;
  std::size_t rank = frill::kDefaultCompressionRank;
  bool toy = false;
};

void run_distill(const DistillArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed);
  const int sources = !a.data.empty() + !a.data_dir.empty() + (a.synthetic > 0);
  if (sources != 1) {
    frill::fail(frill::ErrorCode::kConfig,
                "give exactly one of --data, --data-dir, --synthetic");
  }
  std::vector<frill::DistillExample> train, validation;
  if (!a.data.empty()) {
    train = frill::read_distill_dataset(a.data);
  } else if (!a.data_dir.empty()) {
    train = frill::read_distill_csv_dir(a.data_dir);
  } else {
    // Seeded spectrograms with a seeded linear teacher; one fifth held out.
    const std::size_t held_out = std::max<std::size_t>(1, a.synthetic / 5);
    const auto specs = frill::synthetic_spectrograms(a.synthetic + held_out, seed);
    const frill::LinearTeacher teacher(specs[0].frames.size(),
                                       static_cast<std::size_t>(a.teacher_dim), seed + 1);
    auto all = frill::make_examples(specs, teacher);
    validation.assign(std::make_move_iterator(all.begin() + static_cast<long>(a.synthetic)),
                      std::make_move_iterator(all.end()));
    all.resize(a.synthetic);
    train = std::move(all);
  }
  if (!a.validation.empty()) validation = frill::read_distill_dataset(a.validation);
  if (train.empty()) frill::fail(frill::ErrorCode::kConfig, "no training examples");

  frill::TrainConfig cfg;
  cfg.batch_size = a.batch_size;
  cfg.lr0 = a.lr;
  cfg.epochs = a.epochs;
  cfg.seed = seed;
  cfg.max_steps = a.max_steps;
  cfg.teacher_dim = static_cast<int>(train.front().target.size());
  const auto& first = train.front().spectrogram;
  auto model = build_model(a.config, seed, "training", a.rank, a.toy, first.num_frames(),
                           first.num_mel_bins());

  std::ofstream log;
  if (!a.loss_log.empty()) {
    log.open(a.loss_log);
    if (!log) frill::fail(frill::ErrorCode::kIo, "cannot write ", a.loss_log);
    log << "step,loss\n" << std::setprecision(9);
  }
  frill::TrainHooks hooks;
  hooks.on_step = [&](long long step, double loss) {
    if (log) log << step << ',' << loss << '\n';
  };
  if (!validation.empty()) hooks.validation = &validation;
  auto result = frill::train(std::move(model), train, cfg, hooks);
  frill::save_model(result.model, a.out);

  json j = model_summary(result.model, a.out);
  j["steps"] = result.steps;
  j["initial_loss"] = result.loss_history.empty() ? 0.0 : result.loss_history.front();
  j["final_loss"] = result.loss_history.empty() ? 0.0 : result.loss_history.back();
  if (!result.validation_history.empty()) j["validation_loss"] = result.validation_history;
  std::cout << j.dump(2) << '\n';
}

struct EmbedArgs {
  std::string model, manifest, out;
};

// Manifest columns: [task,]utterance_id,speaker_id,label,split,wav
void run_embed(const EmbedArgs& a) {
  const auto model = frill::load_model(a.model);
  std::ifstream in(a.manifest);
  if (!in) frill::fail(frill::ErrorCode::kIo, "cannot open ", a.manifest);
  std::string line;
  std::getline(in, line);
  const auto header = frill::detail::split_csv_line(frill::detail::trim(line));
  const std::size_t off = !header.empty() && header[0] == "task" ? 1 : 0;
  if (header.size() != off + 5 || header[off + 4] != "wav") {
    frill::fail(frill::ErrorCode::kFormat,
                "manifest header must be [task,]utterance_id,speaker_id,label,split,wav");
  }
  const auto base = std::filesystem::path(a.manifest).parent_path();
  std::ostringstream out;
  out << std::setprecision(9);
  bool wrote_header = false;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = frill::detail::trim(line);
    if (line.empty()) continue;
    const auto cells = frill::detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      frill::fail(frill::ErrorCode::kFormat, "manifest line ", line_no, " has ", cells.size(),
                  " fields");
    }
    std::filesystem::path wav = cells[off + 4];
    if (wav.is_relative()) wav = base / wav;
    const auto contexts = frill::frontend(frill::read_wav(wav.string()));
    std::vector<std::vector<double>> embeddings;
    for (const auto& ctx : contexts) {
      const auto e = frill::forward(model, ctx);
      embeddings.emplace_back(e.begin(), e.end());
    }
    const auto avg = frill::time_average(embeddings);
    if (!wrote_header) {
      if (off) out << "task,";
      out << "utterance_id,speaker_id,label,split";
      for (std::size_t j = 0; j < avg.size(); ++j) out << ",e" << j;
      out << '\n';
      wrote_header = true;
    }
    for (std::size_t c = 0; c < off + 4; ++c) out << (c ? "," : "") << cells[c];
    for (double v : avg) out << ',' << v;
    out << '\n';
  }
  if (!wrote_header) frill::fail(frill::ErrorCode::kFormat, "manifest has no rows");
  emit(out.str(), a.out);
}

struct EvalArgs {
  std::vector<std::string> embeddings;
  std::string student_acc, teacher_acc, out;
};

void run_eval(const EvalArgs& a) {
  if (a.embeddings.empty() == a.student_acc.empty()) {
    frill::fail(frill::ErrorCode::kConfig, "give either --embeddings or --student-acc");
  }
  const auto teacher = read_accuracy_map(a.teacher_acc);
  std::map<std::string, double> student;
  json tasks = json::object();
  if (!a.student_acc.empty()) {
    student = read_accuracy_map(a.student_acc);
    for (const auto& [task, acc] : student) tasks[task] = {{"accuracy", acc}};
  } else {
    for (const auto& path : a.embeddings) {
      std::ifstream in(path);
      if (!in) frill::fail(frill::ErrorCode::kIo, "cannot open ", path);
      const auto tables =
          frill::read_task_tables(in, std::filesystem::path(path).stem().string());
      for (const auto& [task, table] : tables) {
        if (student.count(task)) {
          frill::fail(frill::ErrorCode::kFormat, "task '", task, "' given more than once");
        }
        json issues = json::array();
        for (const auto& issue : table.validate()) issues.push_back(issue);
        const auto r = frill::best_accuracy(table, task);
        student[task] = 100.0 * r.accuracy;
        tasks[task] = {{"accuracy", 100.0 * r.accuracy},
                       {"probe", std::string(frill::probe_name(r.probe))},
                       {"normalized", r.normalized},
                       {"issues", issues}};
      }
    }
  }
  const auto q = frill::aggregate_quality(student, teacher);
  for (const auto& [task, delta] : q.per_task_delta) {
    tasks[task]["teacher_accuracy"] = teacher.at(task);
    tasks[task]["delta"] = delta;
  }
  const json j{{"tasks", tasks},
               {"aggregate_percent", q.aggregate_percent},
               {"aggregate_fraction", q.aggregate_fraction}};
  emit(j.dump(2) + "\n", a.out);
}

struct BenchArgs {
  std::string config, model, wav, out, form = "inference";
  int runs = frill::kMinTimedRuns, warmup = frill::kDefaultWarmupRuns, threads = 1;
  std::uint64_t seed = 0;
  std::size_t rank = frill::kDefaultCompressionRank;
};

void run_bench(const BenchArgs& a) {
  if (a.threads != 1) {
    frill::fail(frill::ErrorCode::kConfig, "bench runs single-threaded; --threads must be 1, got ",
                a.threads);
  }
  if (a.config.empty() == a.model.empty()) {
    frill::fail(frill::ErrorCode::kConfig, "give exactly one of --config, --model");
  }
  const std::uint64_t seed = resolve_seed(a.seed);
  const auto model = a.model.empty() ? build_model(a.config, seed, a.form, a.rank, false)
                                     : frill::load_model(a.model);
  frill::LogMelSpectrogram input;
  if (!a.wav.empty()) {
    input = frill::frontend(frill::read_wav(a.wav)).front();
  } else {
    frill::Rng rng(seed);
    input.frames = frill::random_normal<float>({model.input_frames, model.input_bins}, rng, 1.0);
  }
  const auto report = frill::measure_latency(model, input, a.warmup, a.runs);
  json j = report_json(report);
  j["threads"] = 1;
  j["size_bytes"] = frill::serialize(model).size();
  emit(j.dump(2) + "\n", a.out);
}

struct RecordsArgs {
  std::string records, out;
};

void run_frontier(const RecordsArgs& a) {
  const auto front = frill::frontier(frill::read_bench_records(a.records));
  std::ostringstream s;
  frill::write_bench_records(front, s);
  emit(s.str(), a.out);
}

void run_regress(const RecordsArgs& a) {
  const auto results = frill::regress_all(frill::read_bench_records(a.records));
  json targets = json::array();
  for (const auto& r : results) {
    json weights = json::object();
    for (std::size_t i = 0; i < r.predictors.size(); ++i) weights[r.predictors[i]] = r.weights[i];
    targets.push_back({{"target", std::string(frill::target_name(r.target))},
                       {"intercept", r.intercept},
                       {"y_mean", r.y_mean},
                       {"y_sd", r.y_sd},
                       {"weights", weights}});
  }
  json predictors = json::array();
  for (auto p : frill::kPredictorNames) predictors.push_back(std::string(p));
  emit(json{{"predictors", predictors}, {"targets", targets}}.dump(2) + "\n", a.out);
}

struct FrontendArgs {
  std::string wav, out;
};

// One row per frame, prefixed with the context index.
void run_frontend(const FrontendArgs& a) {
  const auto contexts = frill::frontend(frill::read_wav(a.wav));
  std::ostringstream s;
  s << "context";
  for (int j = 0; j < frill::FrontendConfig::kNumMelBins; ++j) s << ",m" << j;
  s << '\n' << std::setprecision(9);
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    const auto& f = contexts[c].frames;
    for (std::size_t t = 0; t < f.dim(0); ++t) {
      s << c;
      for (std::size_t j = 0; j < f.dim(1); ++j) s << ',' << f(t, j);
      s << '\n';
    }
  }
  emit(s.str(), a.out);
}

void print_error(std::string_view code, const std::string& message) {
  std::cerr << json{{"error", {{"code", std::string(code)}, {"message", message}}}}.dump()
            << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"frill: student speech-embedding models, compression, evaluation, benchmarks"};
  app.require_subcommand(1);

  GridArgs grid;
  auto* grid_cmd = app.add_subcommand("grid", "enumerate the 144 hyperparameter combinations");
  grid_cmd->add_flag("--list", grid.list, "print one config name per line");
  grid_cmd->add_option("--out", grid.out, "output file (default stdout)");

  BuildArgs build;
  auto* build_cmd = app.add_subcommand("build", "build a seeded model and write its file");
  build_cmd->add_option("--config", build.config, "config name, e.g. small_2.0_gap_qat")->required();
  build_cmd->add_option("--out", build.out, "model file")->required();
  build_cmd->add_option("--seed", build.seed, "initialization seed");
  build_cmd->add_option("--form", build.form, "inference or training")
      ->check(CLI::IsMember({"inference", "training"}));
  build_cmd->add_option("--rank", build.rank, "compression rank");
  build_cmd->add_flag("--toy", build.toy, "use the two-block toy trunk");

  DistillArgs distill;
  auto* distill_cmd = app.add_subcommand("distill", "train a student against teacher targets");
  distill_cmd->add_option("--config", distill.config, "config name")->required();
  distill_cmd->add_option("--out", distill.out, "model file")->required();
  distill_cmd->add_option("--data", distill.data, "binary dataset file");
  distill_cmd->add_option("--data-dir", distill.data_dir, "directory of *.spec.csv/*.target.csv");
  distill_cmd->add_option("--synthetic", distill.synthetic,
                          "generate N seeded examples with a linear teacher");
  distill_cmd->add_option("--teacher-dim", distill.teacher_dim, "teacher width for --synthetic");
  distill_cmd->add_option("--validation", distill.validation, "held-out binary dataset");
  distill_cmd->add_option("--epochs", distill.epochs);
  distill_cmd->add_option("--batch-size", distill.batch_size);
  distill_cmd->add_option("--lr", distill.lr, "initial learning rate");
  distill_cmd->add_option("--max-steps", distill.max_steps, "stop after N steps (0 = no cap)");
  distill_cmd->add_option("--seed", distill.seed);
  distill_cmd->add_option("--rank", distill.rank, "compression rank");
  distill_cmd->add_option("--loss-log", distill.loss_log, "write per-step loss CSV");
  distill_cmd->add_flag("--toy", distill.toy, "use the two-block toy trunk");

  EmbedArgs embed;
  auto* embed_cmd = app.add_subcommand("embed", "embed WAV files listed in a manifest");
  embed_cmd->add_option("--model", embed.model, "model file")->required();
  embed_cmd->add_option("--manifest", embed.manifest, "manifest CSV")->required();
  embed_cmd->add_option("--out", embed.out, "embedding CSV (default stdout)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "probe embeddings and score against the teacher");
  eval_cmd->add_option("--embeddings", eval.embeddings, "embedding CSV (repeatable)");
  eval_cmd->add_option("--student-acc", eval.student_acc, "JSON of per-task accuracy (%)");
  eval_cmd->add_option("--teacher-acc", eval.teacher_acc, "JSON of per-task accuracy (%)")
      ->required();
  eval_cmd->add_option("--out", eval.out, "output JSON (default stdout)");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "single-threaded latency of one model");
  bench_cmd->add_option("--config", bench.config, "build this config (seeded)");
  bench_cmd->add_option("--model", bench.model, "or load this model file");
  bench_cmd->add_option("--form", bench.form, "inference or training")
      ->check(CLI::IsMember({"inference", "training"}));
  bench_cmd->add_option("--rank", bench.rank, "compression rank");
  bench_cmd->add_option("--wav", bench.wav, "use the first context of this WAV as input");
  bench_cmd->add_option("--runs", bench.runs, "timed runs (>= 30)");
  bench_cmd->add_option("--warmup", bench.warmup, "untimed warmup runs");
  bench_cmd->add_option("--threads", bench.threads, "must be 1");
  bench_cmd->add_option("--seed", bench.seed);
  bench_cmd->add_option("--out", bench.out, "output JSON (default stdout)");

  RecordsArgs frontier_args;
  auto* frontier_cmd = app.add_subcommand("frontier", "quality/latency frontier of bench records");
  frontier_cmd->add_option("--records", frontier_args.records, "bench CSV")->required();
  frontier_cmd->add_option("--out", frontier_args.out, "output CSV (default stdout)");

  RecordsArgs regress_args;
  auto* regress_cmd = app.add_subcommand("regress", "standardized regression on hyperparameters");
  regress_cmd->add_option("--records", regress_args.records, "bench CSV")->required();
  regress_cmd->add_option("--out", regress_args.out, "output JSON (default stdout)");

  FrontendArgs fe;
  auto* fe_cmd = app.add_subcommand("frontend", "log-mel contexts of a WAV file as CSV");
  fe_cmd->add_option("--wav", fe.wav, "16 kHz mono 16-bit WAV")->required();
  fe_cmd->add_option("--out", fe.out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage_error", e.what());
    return 2;
  }

  try {
    if (*grid_cmd) run_grid(grid);
    else if (*build_cmd) run_build(build);
    else if (*distill_cmd) run_distill(distill);
    else if (*embed_cmd) run_embed(embed);
    else if (*eval_cmd) run_eval(eval);
    else if (*bench_cmd) run_bench(bench);
    else if (*frontier_cmd) run_frontier(frontier_args);
    else if (*regress_cmd) run_regress(regress_args);
    else if (*fe_cmd) run_frontend(fe);
  } catch (const frill::Error& e) {
    print_error(frill::error_code_name(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal_error", e.what());
    return 1;
  }
  return 0;
}
