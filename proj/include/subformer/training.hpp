#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subformer/model.hpp"
#include "subformer/registry.hpp"
#include "subformer/rng.hpp"

namespace subformer {

// Label value excluded from losses and accuracies.
inline constexpr int kIgnoreLabel = -1;

// ---- toy seq2seq tasks ----------------------------------------------------

enum class TaskKind { copy, reverse, sort };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

struct ToyTask {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab_size = 32;
  std::size_t min_len = 1;
  std::size_t max_len = 12;
  std::uint64_t seed = 1;

  void validate() const;
};

// Target with BOS/EOS for a source sequence: copy, reversal, or ascending
// sort.
std::vector<int> task_target(TaskKind kind, std::span<const int> source);

// One training or evaluation batch. `input` feeds the decoder (or the LM);
// `labels` aligns with `input` positions, kIgnoreLabel where padded.
struct Batch {
  std::optional<TokenBatch> source;
  TokenBatch input;
  std::vector<int> labels;
};

// Teacher-forced batch from sources and full BOS...EOS targets.
Batch make_seq2seq_batch(const std::vector<std::vector<int>>& sources, const std::vector<std::vector<int>>& targets);

// Deterministic in (task.seed, counter).
Batch gen_task_batch(const ToyTask& task, std::uint64_t counter, std::size_t batch);

// ---- character LM data ----------------------------------------------------

// Byte-level vocabulary over the bytes present in the text, ids assigned in
// byte order.
class CharVocab {
 public:
  explicit CharVocab(std::string_view text);

  std::size_t size() const { return bytes_.size(); }
  int id(unsigned char byte) const;
  unsigned char byte(int id) const { return bytes_.at(static_cast<std::size_t>(id)); }
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<unsigned char> bytes_;
  std::array<int, 256> ids_{};
};

struct CharDataset {
  CharVocab vocab;
  std::vector<int> ids;
  std::size_t context_len = 0;

  // Non-overlapping windows of context_len ids.
  std::size_t window_count() const { return ids.size() / context_len; }
  std::span<const int> window(std::size_t i) const { return {ids.data() + i * context_len, context_len}; }
};

CharDataset char_lm_dataset(const std::filesystem::path& path, std::size_t context_len);
CharDataset char_lm_from_text(std::string_view text, std::size_t context_len);

// exp of the empirical unigram entropy of `ids`.
double unigram_perplexity(std::span<const int> ids);

// ---- data sources for the training loop -----------------------------------

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual Batch train_batch(std::uint64_t counter, std::size_t size) const = 0;
  virtual const std::vector<Batch>& eval_batches() const = 0;
};

class TaskDataset final : public Dataset {
 public:
  TaskDataset(ToyTask task, std::size_t eval_sequences = 256, std::size_t eval_batch = 64);
  Batch train_batch(std::uint64_t counter, std::size_t size) const override;
  const std::vector<Batch>& eval_batches() const override { return eval_; }
  const ToyTask& task() const { return task_; }

 private:
  ToyTask task_;
  std::vector<Batch> eval_;
};

// Windows predict their own next ids. The last `eval_fraction` of the windows
// is held out for evaluation; training samples uniformly from the rest.
class CharLmDataset final : public Dataset {
 public:
  CharLmDataset(CharDataset data, std::uint64_t seed, double eval_fraction = 0.1, std::size_t eval_batch = 32);
  Batch train_batch(std::uint64_t counter, std::size_t size) const override;
  const std::vector<Batch>& eval_batches() const override { return eval_; }
  const CharDataset& data() const { return data_; }
  std::size_t train_windows() const { return train_windows_; }
  // Ids of the held-out windows, in order.
  std::vector<int> eval_ids() const;

 private:
  Batch window_batch(std::span<const std::size_t> windows) const;
  CharDataset data_;
  std::uint64_t seed_;
  std::size_t train_windows_ = 0;
  std::vector<Batch> eval_;
};

// ---- optimisation ---------------------------------------------------------

// base * min(step^-0.5, step * warmup^-1.5)
double inverse_sqrt_lr(std::size_t step, std::size_t warmup, double base);

// Bias-corrected Adam with one moment pair per distinct registry tensor.
class Adam {
 public:
  struct Moments {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };

  explicit Adam(const ParameterRegistry& registry, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);
  explicit Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);

  // Throws ContractError when a parameter has no gradient.
  void step(double lr);

  std::size_t steps() const { return step_; }
  const std::vector<Moments>& state() const { return state_; }

 private:
  std::vector<Moments> state_;
  std::size_t step_ = 0;
  double beta1_, beta2_, eps_;
};

double grad_norm(const ParameterRegistry& registry);
// Rescales every gradient so the global norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(const ParameterRegistry& registry, double max_norm);

// ---- training and evaluation ----------------------------------------------

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 32;
  double lr = 0.03;  // base of the inverse-sqrt schedule
  std::size_t warmup = 200;
  double label_smoothing = 0.1;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
  std::uint64_t seed = 1;
  std::size_t eval_interval = 100;
  std::filesystem::path checkpoint_path;  // empty: no checkpoint
  // Wall-clock timings are recorded only on request so that metric series
  // stay byte-identical across runs.
  bool record_timing = false;
  double convergence_threshold = 0.99;  // token accuracy

  void validate() const;
};

struct Metrics {
  std::size_t step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;  // unsmoothed
  double token_acc = 0.0;
  double seq_acc = 0.0;
  double ppl = 0.0;
  double ms_per_step = 0.0;
};

struct TrainResult {
  std::vector<Metrics> series;
  // First evaluated step whose token accuracy reached the threshold.
  std::optional<std::size_t> steps_to_threshold;
  double seconds = 0.0;
};

// Mean label-smoothed loss on one batch (records on the tape).
Tensor batch_loss(const Subformer& model, const Batch& batch, double label_smoothing,
                  const DropoutContext& dropout = {});

Metrics evaluate(const Subformer& model, std::span<const Batch> batches);

TrainResult train_loop(Subformer& model, const Dataset& data, const TrainConfig& config);

// Greedy decoding without caches. Returns the generated ids without BOS and
// EOS; stops at EOS or after max_len ids.
std::vector<int> greedy_decode(const Subformer& model, std::span<const int> source, std::size_t max_len);
// The max_new ids that greedily follow `prefix`. An empty prefix starts from id 0.
std::vector<int> greedy_generate(const Subformer& model, std::span<const int> prefix, std::size_t max_new);

// Header: step,train_loss,eval_loss,token_acc,seq_acc,ppl,ms_per_step
void write_metrics_csv(std::ostream& out, std::span<const Metrics> series);
std::string metrics_line(const Metrics& m);

}  // namespace subformer
