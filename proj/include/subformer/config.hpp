#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace subformer {

// Cross-layer sharing patterns.
enum class Scheme {
  none,             // every layer independent
  all,              // one layer reused everywhere
  all_indep_ffn,    // shared attention; layers 2..L get their own feed-forward
  all_except_last,  // layers 1..L-1 shared, layer L independent
  every2,           // pairs [1,2], [3,4], ...
  sandwich,         // layers 1 and L independent, middle layers shared
};

enum class EmbedMode {
  standard,  // E at model width
  linear,    // E at d_e, one d_e -> d_m projection
  linear2,   // d_e -> d_e -> d_m projections
  safe,      // self-attention at d_e then feed-forward to d_m
};

enum class Arch { seq2seq, lm };

std::string to_string(Scheme scheme);
std::string to_string(EmbedMode mode);
std::string to_string(Arch arch);
Scheme parse_scheme(std::string_view text);
EmbedMode parse_embed_mode(std::string_view text);
Arch parse_arch(std::string_view text);

inline constexpr Scheme kAllSchemes[] = {Scheme::none,    Scheme::all,     Scheme::all_indep_ffn,
                                         Scheme::all_except_last, Scheme::every2, Scheme::sandwich};

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t d_embed = 32;
  std::size_t d_model = 32;
  std::size_t d_sandwich = 32;
  std::size_t ffn_model = 64;
  std::size_t ffn_sandwich = 64;
  std::size_t layers_enc = 3;
  std::size_t layers_dec = 3;
  std::size_t heads = 2;
  std::size_t heads_safe = 2;
  Scheme scheme = Scheme::none;
  EmbedMode embed_mode = EmbedMode::standard;
  bool tie = true;
  std::size_t max_len = 64;
  double dropout = 0.0;
  Arch arch = Arch::seq2seq;

  // Throws ConfigError naming every violated rule.
  void validate() const;
  std::vector<std::string> violations() const;

  bool has_projection_pair() const { return scheme == Scheme::sandwich && d_sandwich != d_model; }
  // Tied heads need a d_m -> d_e map when the widths differ.
  bool has_output_projection() const { return tie && d_embed != d_model; }
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// Group id per layer for the attention / norm sub-layers. Ids are 0-based and
// assigned in order of first appearance.
std::vector<int> share_map(Scheme scheme, std::size_t layers);
// Group id per layer for the feed-forward sub-layer. Equal to share_map
// except for all_indep_ffn.
std::vector<int> ffn_share_map(Scheme scheme, std::size_t layers);

std::size_t distinct_groups(const std::vector<int>& groups);

}  // namespace subformer
