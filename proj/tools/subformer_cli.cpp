#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "subformer/accounting.hpp"
#include "subformer/checkpoint.hpp"
#include "subformer/errors.hpp"
#include "subformer/gradcheck.hpp"
#include "subformer/model.hpp"
#include "subformer/run_config.hpp"
#include "subformer/training.hpp"

namespace fs = std::filesystem;
using namespace subformer;

namespace {

enum ExitCode { kOk = 0, kConfigFailure = 2, kNumericFailure = 3, kIoFailure = 4 };

constexpr double kGradTolerance = 1e-4;

struct RunSource {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string out_dir;
  std::string data_path;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key=value run description");
    cmd->add_option("--preset", preset, "named run: copy, reverse, sort, copy-unshared, lm, tiny");
    cmd->add_option("--seed", seed, "override the seed");
    cmd->add_option("--steps", steps, "override the step count");
    cmd->add_option("--out", out_dir, "override out_dir");
    cmd->add_option("--data", data_path, "override data_path");
  }

  RunConfig load(const std::string& fallback_preset) const {
    if (!config_path.empty() && !preset.empty()) throw ConfigError("give either --config or --preset, not both");
    RunConfig run = !config_path.empty() ? load_run_config(config_path)
                                         : run_preset(preset.empty() ? fallback_preset : preset);
    if (seed) run.seed = *seed;
    if (steps) run.steps = *steps;
    if (!out_dir.empty()) run.out_dir = out_dir;
    if (!data_path.empty()) run.data_path = data_path;
    return run;
  }
};

// Vocabulary size and dataset for a run. LM runs take their vocabulary from
// the text.
std::unique_ptr<Dataset> make_dataset(RunConfig& run) {
  if (!run.is_lm()) return std::make_unique<TaskDataset>(make_toy_task(run));
  if (run.data_path.empty()) throw ConfigError("task lm requires data_path");
  if (!fs::exists(run.data_path)) throw ConfigError("data_path " + run.data_path + " does not exist");
  CharDataset text = char_lm_dataset(run.data_path, run.model.max_len + 1);
  run.model.vocab_size = text.vocab.size();
  run.model.validate();
  return std::make_unique<CharLmDataset>(std::move(text), run.seed);
}

void print_metrics(const Metrics& m) {
  std::cout << "step,train_loss,eval_loss,token_acc,seq_acc,ppl,ms_per_step\n" << metrics_line(m) << '\n';
}

int cmd_count_params(const std::string& config_path, const std::string& preset, bool csv) {
  std::vector<TableRow> rows;
  if (!config_path.empty()) {
    rows.push_back({fs::path(config_path).stem().string(), load_run_config(config_path).model, std::nullopt});
  } else if (preset == "table1") {
    rows = embedding_table();
  } else if (preset == "table2") {
    rows = sharing_table();
  } else if (preset == "table2-variants") {
    rows = sharing_variants_table();
  } else if (!preset.empty()) {
    rows.push_back({preset, run_preset(preset).model, std::nullopt});
  } else {
    throw ConfigError("count-params needs --config or --preset (table1, table2, table2-variants or a run preset)");
  }
  std::cout << (csv ? format_csv(rows) : format_table(rows));
  return kOk;
}

int cmd_train(RunConfig run, bool timing) {
  std::unique_ptr<Dataset> data = make_dataset(run);
  Rng rng(run.seed);
  Subformer model = build(run.model, rng);
  TrainConfig config = make_train_config(run);
  config.record_timing = timing;
  const fs::path out = run.out_dir;
  fs::create_directories(out);

  std::cerr << "training " << count_actual(model) << " parameters for " << run.steps << " steps\n";
  const TrainResult result = train_loop(model, *data, config);
  save_checkpoint(out / "checkpoint.subf", model, run);
  std::ofstream csv(out / "metrics.csv");
  if (!csv) throw IoError("cannot write " + (out / "metrics.csv").string());
  write_metrics_csv(csv, result.series);
  std::ofstream(out / "config.txt") << format_run_config(run);

  print_metrics(result.series.back());
  if (result.steps_to_threshold) std::cerr << "token accuracy threshold reached at step " << *result.steps_to_threshold << '\n';
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint);
  RunConfig run = loaded.run;
  if (!data_path.empty()) run.data_path = data_path;
  const std::size_t vocab = run.model.vocab_size;
  std::unique_ptr<Dataset> data = make_dataset(run);
  if (run.model.vocab_size != vocab)
    throw ConfigError("data vocabulary has " + std::to_string(run.model.vocab_size) + " bytes, checkpoint expects " +
                      std::to_string(vocab));
  Metrics m = evaluate(loaded.model, data->eval_batches());
  m.step = run.steps;
  print_metrics(m);
  return kOk;
}

int cmd_gradcheck(RunConfig run, double h) {
  if (run.is_lm()) {
    run.data_path.clear();
    run.model.vocab_size = std::max<std::size_t>(run.model.vocab_size, 4);
  }
  Rng rng(run.seed);
  Subformer model = build(run.model, rng);
  Batch batch;
  if (run.is_lm()) {
    Rng ids(Rng::mix(run.seed, 1));
    std::vector<int> seq(std::min<std::size_t>(run.model.max_len, 6) + 1);
    for (int& t : seq) t = static_cast<int>(ids.below(run.model.vocab_size));
    batch.input = TokenBatch::single(std::span<const int>(seq).first(seq.size() - 1));
    batch.labels.assign(seq.begin() + 1, seq.end());
  } else {
    ToyTask task = make_toy_task(run);
    task.max_len = std::min<std::size_t>(task.max_len, 5);
    batch = gen_task_batch(task, 0, 2);
  }
  const double smoothing = run.effective_label_smoothing();

  double worst = 0.0;
  std::size_t failing = 0, total = 0;
  std::printf("%-48s %10s %12s\n", "tensor", "entries", "max_rel_err");
  for (const auto& entry : model.registry.distinct()) {
    std::vector<Tensor> inputs{entry.tensor};
    const GradCheckResult r = grad_check([&] { return batch_loss(model, batch, smoothing); }, inputs, h);
    std::printf("%-48s %10zu %12.3e\n", entry.name.c_str(), r.checked, r.max_relative_error);
    worst = std::max(worst, r.max_relative_error);
    total += r.checked;
    if (r.max_relative_error >= kGradTolerance) ++failing;
  }
  std::printf("max relative error %.3e over %zu entries (%zu tensors at or above %.0e)\n", worst, total, failing,
              kGradTolerance);
  return worst < kGradTolerance ? kOk : kNumericFailure;
}

int cmd_ablate(RunConfig base) {
  if (base.is_lm()) throw ConfigError("ablate runs on a toy seq2seq task");
  base.model.d_sandwich = base.model.d_model;
  base.model.ffn_sandwich = base.model.ffn_model;
  std::printf("%-16s %10s %10s %10s %12s\n", "scheme", "params", "token_acc", "seq_acc", "steps_to_99");
  for (Scheme scheme : kAllSchemes) {
    RunConfig run = base;
    run.model.scheme = scheme;
    const auto problems = run.model.violations();
    if (!problems.empty()) {
      std::printf("%-16s %10s %s\n", to_string(scheme).c_str(), "-", problems.front().c_str());
      continue;
    }
    TaskDataset data(make_toy_task(run));
    Rng rng(run.seed);
    Subformer model = build(run.model, rng);
    const TrainResult result = train_loop(model, data, make_train_config(run));
    const Metrics& m = result.series.back();
    const std::string reached = result.steps_to_threshold ? std::to_string(*result.steps_to_threshold) : "-";
    std::printf("%-16s %10llu %10.4f %10.4f %12s\n", to_string(scheme).c_str(),
                static_cast<unsigned long long>(count_actual(model)), m.token_acc, m.seq_acc, reached.c_str());
    std::fflush(stdout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subformer: factorized embeddings and sandwich weight sharing"};
  app.require_subcommand(1);

  std::string count_config, count_preset;
  bool count_csv = false;
  auto* count = app.add_subcommand("count-params", "parameter breakdown for a config or a published table");
  count->add_option("--config", count_config, "flat key=value model description");
  count->add_option("--preset", count_preset, "table1, table2, table2-variants or a run preset");
  count->add_flag("--csv", count_csv, "exact integer CSV instead of the text table");

  RunSource train_source;
  bool timing = false;
  auto* train = app.add_subcommand("train", "train a model and write metrics.csv and a checkpoint");
  train_source.attach(train);
  train->add_flag("--timing", timing, "record wall-clock ms per step in the metrics");

  std::string eval_checkpoint, eval_data;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on its held-out data");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "text for lm checkpoints");

  RunSource grad_source;
  double grad_h = 2e-3;
  auto* grad = app.add_subcommand("gradcheck", "compare gradients with central finite differences");
  grad_source.attach(grad);
  grad->add_option("--fd-step", grad_h, "finite-difference step");

  RunSource ablate_source;
  auto* ablate = app.add_subcommand("ablate", "train every sharing scheme on a toy task");
  ablate_source.attach(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigFailure;
  }

  try {
    if (count->parsed()) return cmd_count_params(count_config, count_preset, count_csv);
    if (train->parsed()) return cmd_train(train_source.load("copy"), timing);
    if (eval->parsed()) return cmd_eval(eval_checkpoint, eval_data);
    if (grad->parsed()) return cmd_gradcheck(grad_source.load("tiny"), grad_h);
    if (ablate->parsed()) return cmd_ablate(ablate_source.load("copy"));
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return kIoFailure;
  } catch (const DataError& e) {
    std::cerr << "data failure: " << e.what() << '\n';
    return kIoFailure;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return kIoFailure;
  }
  return kOk;
}
