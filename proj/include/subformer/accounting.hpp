#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "subformer/config.hpp"
#include "subformer/model.hpp"

namespace subformer {

// Scalar parameter counts per component. Layer counts include the layer's
// own norms; `norms` holds the final norm of each stack.
struct ParamBreakdown {
  std::uint64_t embedding = 0;        // token tables
  std::uint64_t safe_projection = 0;  // d_e -> d_m maps (linear / linear2 / SAFE)
  std::uint64_t encoder_model_layers = 0;
  std::uint64_t encoder_sandwich = 0;
  std::uint64_t decoder_model_layers = 0;
  std::uint64_t decoder_sandwich = 0;
  std::uint64_t projections = 0;  // sandwich up/down bridges, both stacks
  std::uint64_t output_head = 0;
  std::uint64_t norms = 0;
  std::uint64_t total = 0;

  std::uint64_t component_sum() const;
};

// Closed form:
//   attention block  4 (d^2 + d)
//   feed-forward     d_in*h + h + h*d_out + d_out
//   layer norm       2 d
//   embedding        V d_e (once when tied)
//   tied head        d_m d_e + d_e when d_e != d_m; untied d_m V + V
// with the number of distinct layer / feed-forward groups per scheme.
ParamBreakdown count_params(const ModelConfig& config);

// Same widths at every layer position with no sharing: each sandwich
// position holds its own d_s layer, other schemes count as scheme=none.
std::uint64_t count_unshared(const ModelConfig& config);

// Distinct scalars enumerated from the model's registry.
std::uint64_t count_actual(const Subformer& model);

struct TableRow {
  std::string name;
  ModelConfig config;
  std::optional<double> reference_millions;  // published figure, when comparing
};

// Fixed-width text table: name, params (M, one decimal), reference, delta,
// breakdown columns.
std::string format_table(const std::vector<TableRow>& rows);
// Header: name,total,embedding,encoder,decoder,projections,head
std::string format_csv(const std::vector<TableRow>& rows);

// WMT'14-scale dimensions used for the published comparisons: V=32768,
// d_m=d_e=512, ffn 2048, 6+6 layers, 8 heads, tied embeddings.
ModelConfig base_translation_config();

// The six sharing schemes at base dimensions.
std::vector<TableRow> sharing_table();
// Extra sharing rows: all-shared at d_m=768, sandwich with L=8.
std::vector<TableRow> sharing_variants_table();
// Embedding factorisations at base dimensions.
std::vector<TableRow> embedding_table();

}  // namespace subformer
