#include "subformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "subformer/checkpoint.hpp"
#include "subformer/errors.hpp"

namespace subformer {

namespace {

// First id available to task payloads; 0..2 are PAD, BOS, EOS.
constexpr int kFirstSymbol = 3;

// Stream offsets keeping evaluation data disjoint from training draws.
constexpr std::uint64_t kEvalStream = 0x5eed0fe7a1ULL;
constexpr std::uint64_t kDropoutStream = 0xd40f0u;

std::size_t argmax(const double* row, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

}  // namespace

// ---- toy tasks ------------------------------------------------------------

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sort: return "sort";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "copy") return TaskKind::copy;
  if (text == "reverse") return TaskKind::reverse;
  if (text == "sort") return TaskKind::sort;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected copy, reverse, sort)");
}

void ToyTask::validate() const {
  if (vocab_size < 4) throw ConfigError("toy task needs vocab_size >= 4, got " + std::to_string(vocab_size));
  if (min_len < 1 || max_len < min_len)
    throw ConfigError("toy task lengths must satisfy 1 <= min_len <= max_len");
}

std::vector<int> task_target(TaskKind kind, std::span<const int> source) {
  std::vector<int> body(source.begin(), source.end());
  if (kind == TaskKind::reverse) std::reverse(body.begin(), body.end());
  if (kind == TaskKind::sort) std::sort(body.begin(), body.end());
  std::vector<int> target;
  target.reserve(body.size() + 2);
  target.push_back(kBosId);
  target.insert(target.end(), body.begin(), body.end());
  target.push_back(kEosId);
  return target;
}

Batch make_seq2seq_batch(const std::vector<std::vector<int>>& sources,
                         const std::vector<std::vector<int>>& targets) {
  if (sources.size() != targets.size() || sources.empty())
    throw DataError("seq2seq batch needs matching, non-empty source and target lists");
  std::vector<std::vector<int>> inputs, labels;
  for (const auto& t : targets) {
    if (t.size() < 2) throw DataError("target must hold at least BOS and EOS");
    inputs.emplace_back(t.begin(), t.end() - 1);
    labels.emplace_back(t.begin() + 1, t.end());
  }
  Batch batch;
  batch.source = TokenBatch::from(sources);
  batch.input = TokenBatch::from(inputs);
  const TokenBatch padded = TokenBatch::from(labels, kIgnoreLabel);
  batch.labels = padded.ids;
  return batch;
}

Batch gen_task_batch(const ToyTask& task, std::uint64_t counter, std::size_t batch) {
  task.validate();
  Rng rng(Rng::mix(task.seed, counter));
  const std::uint64_t symbols = task.vocab_size - kFirstSymbol;
  std::vector<std::vector<int>> sources, targets;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = task.min_len + rng.below(task.max_len - task.min_len + 1);
    std::vector<int> src(len);
    for (int& t : src) t = kFirstSymbol + static_cast<int>(rng.below(symbols));
    targets.push_back(task_target(task.kind, src));
    sources.push_back(std::move(src));
  }
  return make_seq2seq_batch(sources, targets);
}

// ---- character data -------------------------------------------------------

CharVocab::CharVocab(std::string_view text) {
  std::array<bool, 256> seen{};
  for (char c : text) seen[static_cast<unsigned char>(c)] = true;
  ids_.fill(-1);
  for (std::size_t b = 0; b < 256; ++b) {
    if (!seen[b]) continue;
    ids_[b] = static_cast<int>(bytes_.size());
    bytes_.push_back(static_cast<unsigned char>(b));
  }
}

int CharVocab::id(unsigned char byte) const {
  const int id = ids_[byte];
  if (id < 0) throw VocabularyError("byte " + std::to_string(byte) + " is not in the vocabulary");
  return id;
}

std::vector<int> CharVocab::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id(static_cast<unsigned char>(c)));
  return ids;
}

std::string CharVocab::decode(std::span<const int> ids) const {
  std::string text;
  for (int i : ids) {
    if (i < 0 || static_cast<std::size_t>(i) >= bytes_.size())
      throw VocabularyError("id " + std::to_string(i) + " is not in the vocabulary");
    text.push_back(static_cast<char>(bytes_[static_cast<std::size_t>(i)]));
  }
  return text;
}

CharDataset char_lm_from_text(std::string_view text, std::size_t context_len) {
  if (text.empty()) throw DataError("character data is empty");
  if (context_len < 2) throw ConfigError("context length must be at least 2");
  CharVocab vocab(text);
  std::vector<int> ids = vocab.encode(text);
  if (ids.size() < context_len)
    throw DataError("character data holds " + std::to_string(ids.size()) + " bytes, fewer than one window of " +
                    std::to_string(context_len));
  return CharDataset{std::move(vocab), std::move(ids), context_len};
}

CharDataset char_lm_dataset(const std::filesystem::path& path, std::size_t context_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (text.empty()) throw DataError(path.string() + " is empty");
  return char_lm_from_text(text, context_len);
}

double unigram_perplexity(std::span<const int> ids) {
  if (ids.empty()) throw DataError("unigram perplexity of an empty sequence");
  std::vector<std::size_t> counts;
  for (int i : ids) {
    const auto k = static_cast<std::size_t>(i);
    if (k >= counts.size()) counts.resize(k + 1, 0);
    ++counts[k];
  }
  const double n = static_cast<double>(ids.size());
  double entropy = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

// ---- datasets -------------------------------------------------------------

TaskDataset::TaskDataset(ToyTask task, std::size_t eval_sequences, std::size_t eval_batch) : task_(task) {
  task_.validate();
  if (eval_batch == 0) throw ConfigError("eval batch must be positive");
  ToyTask held_out = task_;
  held_out.seed = Rng::mix(task_.seed, kEvalStream);
  for (std::size_t done = 0, k = 0; done < eval_sequences; ++k) {
    const std::size_t n = std::min(eval_batch, eval_sequences - done);
    eval_.push_back(gen_task_batch(held_out, k, n));
    done += n;
  }
}

Batch TaskDataset::train_batch(std::uint64_t counter, std::size_t size) const {
  return gen_task_batch(task_, counter, size);
}

CharLmDataset::CharLmDataset(CharDataset data, std::uint64_t seed, double eval_fraction, std::size_t eval_batch)
    : data_(std::move(data)), seed_(seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval fraction must lie in (0, 1)");
  if (eval_batch == 0) throw ConfigError("eval batch must be positive");
  const std::size_t windows = data_.window_count();
  if (windows < 2)
    throw DataError("character data holds " + std::to_string(windows) + " windows; at least 2 are needed");
  std::size_t held = static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(windows)));
  held = std::clamp<std::size_t>(held, 1, windows - 1);
  train_windows_ = windows - held;

  std::vector<std::size_t> ids;
  for (std::size_t w = train_windows_; w < windows; ++w) {
    ids.push_back(w);
    if (ids.size() == eval_batch || w + 1 == windows) {
      eval_.push_back(window_batch(ids));
      ids.clear();
    }
  }
}

Batch CharLmDataset::window_batch(std::span<const std::size_t> windows) const {
  std::vector<std::vector<int>> inputs, labels;
  for (std::size_t w : windows) {
    const auto span = data_.window(w);
    inputs.emplace_back(span.begin(), span.end() - 1);
    labels.emplace_back(span.begin() + 1, span.end());
  }
  Batch batch;
  batch.input = TokenBatch::from(inputs);
  batch.labels = TokenBatch::from(labels, kIgnoreLabel).ids;
  return batch;
}

Batch CharLmDataset::train_batch(std::uint64_t counter, std::size_t size) const {
  // Windows start at any offset inside the training region.
  Rng rng(Rng::mix(seed_, counter));
  const std::size_t len = data_.context_len;
  const std::size_t region = train_windows_ * len;
  std::vector<std::vector<int>> inputs, labels;
  for (std::size_t b = 0; b < size; ++b) {
    const std::size_t start = rng.below(region - len + 1);
    const int* w = data_.ids.data() + start;
    inputs.emplace_back(w, w + len - 1);
    labels.emplace_back(w + 1, w + len);
  }
  Batch batch;
  batch.input = TokenBatch::from(inputs);
  batch.labels = TokenBatch::from(labels, kIgnoreLabel).ids;
  return batch;
}

std::vector<int> CharLmDataset::eval_ids() const {
  std::vector<int> ids;
  for (std::size_t w = train_windows_; w < data_.window_count(); ++w) {
    const auto span = data_.window(w);
    ids.insert(ids.end(), span.begin(), span.end());
  }
  return ids;
}

// ---- optimisation ---------------------------------------------------------

double inverse_sqrt_lr(std::size_t step, std::size_t warmup, double base) {
  if (step == 0) return 0.0;
  const double s = static_cast<double>(step);
  if (warmup == 0) return base / std::sqrt(s);
  const double w = static_cast<double>(warmup);
  return base * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

Adam::Adam(const ParameterRegistry& registry, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& entry : registry.distinct()) {
    if (!entry.tensor.requires_grad()) continue;
    state_.push_back({entry.tensor, std::vector<double>(entry.tensor.numel(), 0.0),
                      std::vector<double>(entry.tensor.numel(), 0.0)});
  }
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Tensor& p : params) {
    const std::size_t n = p.numel();
    state_.push_back({std::move(p), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

void Adam::step(double lr) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (auto& s : state_) {
    if (!s.param.has_grad()) throw ContractError("Adam step on a parameter without a gradient");
    auto g = s.param.grad();
    auto p = s.param.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
    }
  }
}

double grad_norm(const ParameterRegistry& registry) {
  double total = 0.0;
  for (const auto& entry : registry.distinct()) {
    if (!entry.tensor.has_grad()) continue;
    for (double g : entry.tensor.grad()) total += g * g;
  }
  return std::sqrt(total);
}

double clip_grad_norm(const ParameterRegistry& registry, double max_norm) {
  const double norm = grad_norm(registry);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& entry : registry.distinct()) {
      if (!entry.tensor.has_grad()) continue;
      for (double& g : entry.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---- training -------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (eval_interval == 0) throw ConfigError("eval interval must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip norm must be non-negative");
}

namespace {

Tensor batch_logits(const Subformer& model, const Batch& batch, const DropoutContext& dropout) {
  if (model.config.arch == Arch::seq2seq) {
    if (!batch.source) throw ContractError("seq2seq model needs a source batch");
    return forward(*batch.source, batch.input, model, dropout);
  }
  return lm_forward(batch.input, model, dropout);
}

}  // namespace

Tensor batch_loss(const Subformer& model, const Batch& batch, double label_smoothing,
                  const DropoutContext& dropout) {
  const Tensor logits = batch_logits(model, batch, dropout);
  return cross_entropy(logits, batch.labels, label_smoothing, kIgnoreLabel);
}

Metrics evaluate(const Subformer& model, std::span<const Batch> batches) {
  NoGradGuard guard;
  double loss_sum = 0.0;
  std::size_t tokens = 0, correct = 0, sequences = 0, exact = 0;
  for (const Batch& batch : batches) {
    const Tensor logits = batch_logits(model, batch, {});
    const std::size_t vocab = logits.shape().back();
    const double* data = logits.data().data();
    std::size_t counted = 0;
    for (std::size_t b = 0; b < batch.input.batch; ++b) {
      bool all = true;
      for (std::size_t t = 0; t < batch.input.length; ++t) {
        const std::size_t r = b * batch.input.length + t;
        const int label = batch.labels[r];
        if (label == kIgnoreLabel) continue;
        const bool hit = argmax(data + r * vocab, vocab) == static_cast<std::size_t>(label);
        correct += hit;
        all = all && hit;
        ++counted;
      }
      ++sequences;
      exact += all;
    }
    loss_sum += cross_entropy(logits, batch.labels, 0.0, kIgnoreLabel).item() * static_cast<double>(counted);
    tokens += counted;
  }
  if (tokens == 0) throw DataError("evaluation set holds no labelled tokens");
  Metrics m;
  m.eval_loss = loss_sum / static_cast<double>(tokens);
  m.token_acc = static_cast<double>(correct) / static_cast<double>(tokens);
  m.seq_acc = static_cast<double>(exact) / static_cast<double>(sequences);
  m.ppl = std::exp(m.eval_loss);
  return m;
}

TrainResult train_loop(Subformer& model, const Dataset& data, const TrainConfig& config) {
  config.validate();
  using clock = std::chrono::steady_clock;
  const auto started = clock::now();
  TrainResult result;
  Adam adam(model.registry);
  Rng dropout_rng(Rng::mix(config.seed, kDropoutStream));
  const DropoutContext dropout{model.config.dropout, &dropout_rng};
  Tape& tape = Tape::current();

  auto record = [&](std::size_t step, double train_loss, double ms) {
    Metrics m = evaluate(model, data.eval_batches());
    m.step = step;
    m.train_loss = train_loss;
    m.ms_per_step = config.record_timing ? ms : 0.0;
    if (!result.steps_to_threshold && m.token_acc >= config.convergence_threshold) result.steps_to_threshold = step;
    result.series.push_back(m);
  };

  record(0, std::nan(""), 0.0);
  double loss_sum = 0.0;
  std::size_t since = 0;
  auto window_start = clock::now();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const Batch batch = data.train_batch(step, config.batch);
    tape.clear();
    model.registry.zero_grad();
    const Tensor loss = batch_loss(model, batch, config.label_smoothing, dropout);
    backward(loss);
    tape.clear();
    const double lr = inverse_sqrt_lr(step, config.warmup, config.lr);
    const double norm = clip_grad_norm(model.registry, config.clip_norm);
    if (!std::isfinite(loss.item()) || !std::isfinite(norm)) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "non-finite training state at step %zu (lr %.3g, loss %g, grad norm %g)", step,
                    lr, loss.item(), norm);
      throw NumericError(msg);
    }
    adam.step(lr);
    loss_sum += loss.item();
    ++since;
    if (step % config.eval_interval == 0 || step == config.steps) {
      const auto now = clock::now();
      const double ms = std::chrono::duration<double, std::milli>(now - window_start).count() / since;
      record(step, loss_sum / since, ms);
      loss_sum = 0.0;
      since = 0;
      window_start = clock::now();
    }
  }
  model.registry.zero_grad();

  if (!config.checkpoint_path.empty()) {
    RunConfig run;
    run.task = model.config.arch == Arch::lm ? "lm" : run.task;
    run.seed = config.seed;
    run.steps = config.steps;
    run.batch = config.batch;
    run.lr = config.lr;
    run.warmup = config.warmup;
    run.label_smoothing = config.label_smoothing;
    save_checkpoint(config.checkpoint_path, model, run);
  }
  result.seconds = std::chrono::duration<double>(clock::now() - started).count();
  return result;
}

// ---- decoding -------------------------------------------------------------

std::vector<int> greedy_decode(const Subformer& model, std::span<const int> source, std::size_t max_len) {
  if (model.config.arch != Arch::seq2seq) throw ContractError("greedy_decode needs a seq2seq model");
  NoGradGuard guard;
  const TokenBatch src = TokenBatch::single(source);
  const Tensor memory = encoder_forward(src, model);
  const std::size_t limit = std::min(max_len, model.config.max_len - 1);
  std::vector<int> prefix{kBosId};
  std::vector<int> out;
  while (out.size() < limit) {
    const Tensor hidden = decoder_forward(TokenBatch::single(prefix), memory, src.lengths, model);
    const Tensor logits = output_logits(hidden, model);
    const std::size_t vocab = logits.shape().back();
    const int next = static_cast<int>(argmax(logits.data().data() + (prefix.size() - 1) * vocab, vocab));
    if (next == kEosId) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

std::vector<int> greedy_generate(const Subformer& model, std::span<const int> prefix, std::size_t max_new) {
  if (model.config.arch != Arch::lm) throw ContractError("greedy_generate needs an lm model");
  NoGradGuard guard;
  std::vector<int> ids(prefix.begin(), prefix.end());
  if (ids.empty()) ids.push_back(0);
  const std::size_t given = ids.size();
  const std::size_t window = model.config.max_len;
  for (std::size_t k = 0; k < max_new; ++k) {
    const std::size_t start = ids.size() > window ? ids.size() - window : 0;
    const std::span<const int> context(ids.data() + start, ids.size() - start);
    const Tensor logits = lm_forward(context, model);
    const std::size_t vocab = logits.shape().back();
    ids.push_back(static_cast<int>(argmax(logits.data().data() + (context.size() - 1) * vocab, vocab)));
  }
  return {ids.begin() + static_cast<std::ptrdiff_t>(given), ids.end()};
}

// ---- reporting ------------------------------------------------------------

std::string metrics_line(const Metrics& m) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f", m.step, m.train_loss, m.eval_loss, m.token_acc,
                m.seq_acc, m.ppl, m.ms_per_step);
  return buf;
}

void write_metrics_csv(std::ostream& out, std::span<const Metrics> series) {
  out << "step,train_loss,eval_loss,token_acc,seq_acc,ppl,ms_per_step\n";
  for (const Metrics& m : series) out << metrics_line(m) << '\n';
}

}  // namespace subformer
