#include "subformer/run_config.hpp"

#include <charconv>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "subformer/errors.hpp"

#ifndef SUBFORMER_DATA_DIR
#define SUBFORMER_DATA_DIR "data"
#endif

namespace subformer {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key));
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + " (expected true/false)");
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ec == std::errc() ? ptr : buf);
}

void check_task(std::string_view task) {
  if (task != "copy" && task != "reverse" && task != "sort" && task != "lm")
    throw ConfigError("unknown task '" + std::string(task) + "' (expected copy, reverse, sort, lm)");
}

}  // namespace

std::vector<std::string> run_config_keys() {
  return {"task",       "arch",         "vocab_size", "d_embed",    "d_model",         "d_sandwich",
          "ffn_model",  "ffn_sandwich", "layers_enc", "layers_dec", "heads",           "heads_safe",
          "scheme",     "embed_mode",   "tie",        "max_len",    "dropout",         "seed",
          "steps",      "batch",        "lr",         "warmup",     "label_smoothing", "data_path",
          "out_dir"};
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  std::optional<Arch> arch;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!seen.insert(std::string(key)).second) throw ConfigError("duplicate key '" + std::string(key) + "'");

    ModelConfig& m = c.model;
    if (key == "task") c.task = std::string(value), check_task(value);
    else if (key == "arch") arch = parse_arch(value);
    else if (key == "vocab_size") m.vocab_size = parse_number<std::size_t>(key, value);
    else if (key == "d_embed") m.d_embed = parse_number<std::size_t>(key, value);
    else if (key == "d_model") m.d_model = parse_number<std::size_t>(key, value);
    else if (key == "d_sandwich") m.d_sandwich = parse_number<std::size_t>(key, value);
    else if (key == "ffn_model") m.ffn_model = parse_number<std::size_t>(key, value);
    else if (key == "ffn_sandwich") m.ffn_sandwich = parse_number<std::size_t>(key, value);
    else if (key == "layers_enc") m.layers_enc = parse_number<std::size_t>(key, value);
    else if (key == "layers_dec") m.layers_dec = parse_number<std::size_t>(key, value);
    else if (key == "heads") m.heads = parse_number<std::size_t>(key, value);
    else if (key == "heads_safe") m.heads_safe = parse_number<std::size_t>(key, value);
    else if (key == "scheme") m.scheme = parse_scheme(value);
    else if (key == "embed_mode") m.embed_mode = parse_embed_mode(value);
    else if (key == "tie") m.tie = parse_bool(key, value);
    else if (key == "max_len") m.max_len = parse_number<std::size_t>(key, value);
    else if (key == "dropout") m.dropout = parse_number<double>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "steps") c.steps = parse_number<std::size_t>(key, value);
    else if (key == "batch") c.batch = parse_number<std::size_t>(key, value);
    else if (key == "lr") c.lr = parse_number<double>(key, value);
    else if (key == "warmup") c.warmup = parse_number<std::size_t>(key, value);
    else if (key == "label_smoothing") c.label_smoothing = parse_number<double>(key, value);
    else if (key == "data_path") c.data_path = std::string(value);
    else if (key == "out_dir") c.out_dir = std::string(value);
    else throw ConfigError("unknown key '" + std::string(key) + "'");
  }

  const Arch wanted = c.is_lm() ? Arch::lm : Arch::seq2seq;
  if (arch && *arch != wanted)
    throw ConfigError("task " + c.task + " needs arch=" + to_string(wanted) + ", got arch=" + to_string(*arch));
  c.model.arch = wanted;
  if (!(c.model.dropout >= 0.0 && c.model.dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (c.batch == 0) throw ConfigError("batch must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  c.model.validate();
  if (!c.is_lm() && c.model.max_len < 3) throw ConfigError("toy tasks need max_len >= 3");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_run_config(text);
}

std::string format_run_config(const RunConfig& c) {
  const ModelConfig& m = c.model;
  std::ostringstream out;
  out << "task=" << c.task << '\n'
      << "arch=" << to_string(m.arch) << '\n'
      << "vocab_size=" << m.vocab_size << '\n'
      << "d_embed=" << m.d_embed << '\n'
      << "d_model=" << m.d_model << '\n'
      << "d_sandwich=" << m.d_sandwich << '\n'
      << "ffn_model=" << m.ffn_model << '\n'
      << "ffn_sandwich=" << m.ffn_sandwich << '\n'
      << "layers_enc=" << m.layers_enc << '\n'
      << "layers_dec=" << m.layers_dec << '\n'
      << "heads=" << m.heads << '\n'
      << "heads_safe=" << m.heads_safe << '\n'
      << "scheme=" << to_string(m.scheme) << '\n'
      << "embed_mode=" << to_string(m.embed_mode) << '\n'
      << "tie=" << (m.tie ? "true" : "false") << '\n'
      << "max_len=" << m.max_len << '\n'
      << "dropout=" << format_double(m.dropout) << '\n'
      << "seed=" << c.seed << '\n'
      << "steps=" << c.steps << '\n'
      << "batch=" << c.batch << '\n'
      << "lr=" << format_double(c.lr) << '\n'
      << "warmup=" << c.warmup << '\n';
  if (c.label_smoothing) out << "label_smoothing=" << format_double(*c.label_smoothing) << '\n';
  if (!c.data_path.empty()) out << "data_path=" << c.data_path << '\n';
  out << "out_dir=" << c.out_dir << '\n';
  return out.str();
}

std::vector<std::string> run_preset_names() { return {"copy", "reverse", "sort", "copy-unshared", "lm", "tiny"}; }

RunConfig run_preset(std::string_view name) {
  RunConfig c;
  ModelConfig& m = c.model;
  m.vocab_size = 32;
  m.d_embed = 16;
  m.d_model = 32;
  m.d_sandwich = 48;
  m.ffn_model = 64;
  m.ffn_sandwich = 64;
  m.layers_enc = m.layers_dec = 4;
  m.heads = 2;
  m.heads_safe = 2;
  m.scheme = Scheme::sandwich;
  m.embed_mode = EmbedMode::safe;
  m.tie = true;
  m.max_len = 14;
  c.steps = 3000;
  c.batch = 32;
  c.lr = 0.02;
  c.warmup = 200;

  if (name == "copy" || name == "reverse" || name == "sort") {
    c.task = std::string(name);
  } else if (name == "copy-unshared") {
    m.scheme = Scheme::none;
    m.embed_mode = EmbedMode::standard;
    m.d_embed = m.d_sandwich = m.d_model;
    m.ffn_sandwich = m.ffn_model;
  } else if (name == "lm") {
    c.task = "lm";
    m.arch = Arch::lm;
    m.ffn_sandwich = 96;
    m.layers_dec = 4;
    m.max_len = 48;
    // The bundled corpus is ~10 KB; without dropout held-out ppl turns up after a few hundred steps.
    m.dropout = 0.3;
    c.data_path = std::string(SUBFORMER_DATA_DIR) + "/corpus.txt";
    c.steps = 2000;
    c.batch = 16;
    c.lr = 0.05;
    c.warmup = 200;
  } else if (name == "tiny") {
    m.d_embed = 8;
    m.d_model = 16;
    m.d_sandwich = 24;
    m.ffn_model = 32;
    m.ffn_sandwich = 48;
    m.layers_enc = m.layers_dec = 3;
    m.max_len = 10;
    c.steps = 40;
    c.batch = 8;
    c.warmup = 10;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  m.validate();
  return c;
}

TrainConfig make_train_config(const RunConfig& c) {
  TrainConfig t;
  t.steps = c.steps;
  t.batch = c.batch;
  t.lr = c.lr;
  t.warmup = c.warmup;
  t.label_smoothing = c.effective_label_smoothing();
  t.seed = c.seed;
  t.eval_interval = std::max<std::size_t>(1, std::min<std::size_t>(100, c.steps));
  return t;
}

ToyTask make_toy_task(const RunConfig& c) {
  if (c.is_lm()) throw ConfigError("task lm has no toy task");
  ToyTask task;
  task.kind = parse_task_kind(c.task);
  task.vocab_size = c.model.vocab_size;
  task.min_len = 1;
  task.max_len = c.model.max_len - 2;
  task.seed = c.seed;
  task.validate();
  return task;
}

}  // namespace subformer
