#include "subformer/config.hpp"

#include <set>

#include "subformer/errors.hpp"

namespace subformer {

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::none: return "none";
    case Scheme::all: return "all";
    case Scheme::all_indep_ffn: return "all_indep_ffn";
    case Scheme::all_except_last: return "all_except_last";
    case Scheme::every2: return "every2";
    case Scheme::sandwich: return "sandwich";
  }
  return "?";
}

std::string to_string(EmbedMode mode) {
  switch (mode) {
    case EmbedMode::standard: return "standard";
    case EmbedMode::linear: return "linear";
    case EmbedMode::linear2: return "linear2";
    case EmbedMode::safe: return "safe";
  }
  return "?";
}

std::string to_string(Arch arch) { return arch == Arch::seq2seq ? "seq2seq" : "lm"; }

Scheme parse_scheme(std::string_view text) {
  for (Scheme s : kAllSchemes)
    if (to_string(s) == text) return s;
  throw ConfigError("unknown sharing scheme '" + std::string(text) + "'");
}

EmbedMode parse_embed_mode(std::string_view text) {
  for (EmbedMode m : {EmbedMode::standard, EmbedMode::linear, EmbedMode::linear2, EmbedMode::safe})
    if (to_string(m) == text) return m;
  throw ConfigError("unknown embed_mode '" + std::string(text) + "'");
}

Arch parse_arch(std::string_view text) {
  if (text == "seq2seq") return Arch::seq2seq;
  if (text == "lm") return Arch::lm;
  throw ConfigError("unknown arch '" + std::string(text) + "'");
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> out;
  auto check = [&](bool ok, const char* rule) {
    if (!ok) out.emplace_back(rule);
  };
  check(vocab_size >= 2, "vocab_size must be >= 2");
  check(d_embed > 0 && d_model > 0 && d_sandwich > 0, "widths must be positive");
  check(ffn_model > 0 && ffn_sandwich > 0, "feed-forward widths must be positive");
  check(heads > 0 && heads_safe > 0, "head counts must be positive");
  check(max_len >= 1, "max_len must be >= 1");
  check(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  check(d_embed % 2 == 0, "d_embed must be even for sinusoidal positions");

  std::vector<std::size_t> stacks{layers_dec};
  if (arch == Arch::seq2seq) stacks.push_back(layers_enc);
  for (std::size_t layers : stacks) {
    check(layers >= 1, "every stack needs L >= 1");
    if (scheme == Scheme::sandwich) check(layers >= 3, "sandwich requires L ≥ 3");
    if (scheme == Scheme::every2) check(layers % 2 == 0, "every2 requires even L");
  }
  if (embed_mode == EmbedMode::standard) check(d_embed == d_model, "embed_mode=standard requires d_embed == d_model");
  if (heads > 0) {
    check(d_model % heads == 0, "d_model must be divisible by heads");
    check(d_sandwich % heads == 0, "d_sandwich must be divisible by heads");
  }
  if (heads_safe > 0) check(d_embed % heads_safe == 0, "d_embed must be divisible by heads_safe");
  if (scheme != Scheme::sandwich) check(d_sandwich == d_model, "d_sandwich must equal d_model unless scheme=sandwich");
  return out;
}

void ModelConfig::validate() const {
  const auto problems = violations();
  if (problems.empty()) return;
  std::string message;
  for (const auto& p : problems) {
    if (!message.empty()) message += "; ";
    message += p;
  }
  throw ConfigError(message);
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.vocab_size == b.vocab_size && a.d_embed == b.d_embed && a.d_model == b.d_model &&
         a.d_sandwich == b.d_sandwich && a.ffn_model == b.ffn_model && a.ffn_sandwich == b.ffn_sandwich &&
         a.layers_enc == b.layers_enc && a.layers_dec == b.layers_dec && a.heads == b.heads &&
         a.heads_safe == b.heads_safe && a.scheme == b.scheme && a.embed_mode == b.embed_mode && a.tie == b.tie &&
         a.max_len == b.max_len && a.dropout == b.dropout && a.arch == b.arch;
}

std::vector<int> share_map(Scheme scheme, std::size_t layers) {
  if (layers == 0) throw ConfigError("share_map needs L >= 1");
  if (scheme == Scheme::sandwich && layers < 3) throw ConfigError("sandwich requires L ≥ 3");
  if (scheme == Scheme::every2 && layers % 2 != 0) throw ConfigError("every2 requires even L");
  std::vector<int> groups(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    switch (scheme) {
      case Scheme::none: groups[l] = static_cast<int>(l); break;
      case Scheme::all:
      case Scheme::all_indep_ffn: groups[l] = 0; break;
      case Scheme::all_except_last: groups[l] = l + 1 == layers && layers > 1 ? 1 : 0; break;
      case Scheme::every2: groups[l] = static_cast<int>(l / 2); break;
      case Scheme::sandwich: groups[l] = l == 0 ? 0 : (l + 1 == layers ? 2 : 1); break;
    }
  }
  return groups;
}

std::vector<int> ffn_share_map(Scheme scheme, std::size_t layers) {
  if (scheme != Scheme::all_indep_ffn) return share_map(scheme, layers);
  if (layers == 0) throw ConfigError("share_map needs L >= 1");
  // Layer 1 keeps the shared layer's feed-forward; layers 2..L use a second,
  // separately trained one.
  std::vector<int> groups(layers, 1);
  groups[0] = 0;
  return groups;
}

std::size_t distinct_groups(const std::vector<int>& groups) {
  return std::set<int>(groups.begin(), groups.end()).size();
}

}  // namespace subformer
