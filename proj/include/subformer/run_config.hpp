#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "subformer/config.hpp"
#include "subformer/training.hpp"

namespace subformer {

// Flat `key=value` run description. Blank lines and lines starting with '#'
// are ignored; unknown keys are rejected.
//
//   task             copy | reverse | sort | lm          (copy)
//   arch             seq2seq | lm                        (seq2seq; lm for task=lm)
//   vocab_size       toy-task vocabulary; lm uses the data's byte vocabulary
//   d_embed d_model d_sandwich ffn_model ffn_sandwich   widths
//   layers_enc layers_dec heads heads_safe              stack shape
//   scheme           none | all | all_indep_ffn | all_except_last | every2 | sandwich
//   embed_mode       standard | linear | linear2 | safe
//   tie              true | false
//   max_len          positions; toy sequences hold up to max_len-2 tokens,
//                    lm windows are max_len+1 bytes
//   dropout seed steps batch lr warmup label_smoothing data_path out_dir
struct RunConfig {
  std::string task = "copy";
  ModelConfig model;
  std::uint64_t seed = 1;
  std::size_t steps = 1000;
  std::size_t batch = 32;
  double lr = 0.03;
  std::size_t warmup = 200;
  std::optional<double> label_smoothing;  // default 0.1 seq2seq, 0 lm
  std::string data_path;
  std::string out_dir = "out";

  bool is_lm() const { return task == "lm"; }
  double effective_label_smoothing() const { return label_smoothing.value_or(is_lm() ? 0.0 : 0.1); }
};

std::vector<std::string> run_config_keys();

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string format_run_config(const RunConfig& config);

// Named configurations: copy, reverse, sort, copy-unshared, lm, tiny.
RunConfig run_preset(std::string_view name);
std::vector<std::string> run_preset_names();

TrainConfig make_train_config(const RunConfig& config);
// Toy sequences hold at most max_len-2 tokens. Throws ConfigError for lm.
ToyTask make_toy_task(const RunConfig& config);

}  // namespace subformer
