#include "subformer/accounting.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace subformer {

namespace {

using u64 = std::uint64_t;

u64 attention(u64 d) { return 4 * (d * d + d); }
u64 feed_forward(u64 in, u64 hidden, u64 out) { return in * hidden + hidden + hidden * out + out; }
u64 norm(u64 d) { return 2 * d; }

// Norms and attention sub-layers of one layer group (the ffn counted apart).
u64 layer_core(u64 d, bool cross) {
  u64 total = norm(d) + attention(d) + norm(d);
  if (cross) total += norm(d) + attention(d);
  return total;
}

// Distinct attention groups and feed-forward groups for a non-sandwich stack.
u64 attention_groups(Scheme scheme, u64 layers) {
  switch (scheme) {
    case Scheme::none: return layers;
    case Scheme::all:
    case Scheme::all_indep_ffn: return 1;
    case Scheme::all_except_last: return layers > 1 ? 2 : 1;
    case Scheme::every2: return layers / 2;
    case Scheme::sandwich: return 3;
  }
  return 0;
}

u64 ffn_groups(Scheme scheme, u64 layers) {
  if (scheme == Scheme::all_indep_ffn) return layers > 1 ? 2 : 1;
  return attention_groups(scheme, layers);
}

struct StackCount {
  u64 model_layers = 0;
  u64 sandwich = 0;
  u64 projections = 0;
};

StackCount count_stack(const ModelConfig& c, u64 layers, bool cross) {
  StackCount s;
  const u64 dm = c.d_model, ds = c.d_sandwich;
  if (c.scheme == Scheme::sandwich) {
    s.model_layers = 2 * (layer_core(dm, cross) + feed_forward(dm, c.ffn_model, dm));
    s.sandwich = layer_core(ds, cross) + feed_forward(ds, c.ffn_sandwich, ds);
    if (c.has_projection_pair()) {
      s.projections = norm(dm) + feed_forward(dm, ds, ds) + norm(ds) + feed_forward(ds, dm, dm);
    }
  } else {
    s.model_layers = attention_groups(c.scheme, layers) * layer_core(dm, cross) +
                     ffn_groups(c.scheme, layers) * feed_forward(dm, c.ffn_model, dm);
  }
  return s;
}

u64 embedding_map(const ModelConfig& c) {
  const u64 de = c.d_embed, dm = c.d_model;
  switch (c.embed_mode) {
    case EmbedMode::standard: return 0;
    case EmbedMode::linear: return de * dm + dm;
    case EmbedMode::linear2: return de * de + de + de * dm + dm;
    case EmbedMode::safe: return 2 * norm(de) + attention(de) + feed_forward(de, dm, dm);
  }
  return 0;
}

std::string millions(u64 count) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(count) / 1e6);
  return buf;
}

}  // namespace

u64 ParamBreakdown::component_sum() const {
  return embedding + safe_projection + encoder_model_layers + encoder_sandwich + decoder_model_layers +
         decoder_sandwich + projections + output_head + norms;
}

ParamBreakdown count_params(const ModelConfig& c) {
  c.validate();
  ParamBreakdown b;
  const bool seq2seq = c.arch == Arch::seq2seq;
  const u64 sides = seq2seq ? 2 : 1;
  const u64 tables = seq2seq && !c.tie ? 2 : 1;

  b.embedding = tables * c.vocab_size * c.d_embed;
  b.safe_projection = sides * embedding_map(c);
  if (seq2seq) {
    const StackCount enc = count_stack(c, c.layers_enc, false);
    b.encoder_model_layers = enc.model_layers;
    b.encoder_sandwich = enc.sandwich;
    b.projections += enc.projections;
  }
  const StackCount dec = count_stack(c, c.layers_dec, seq2seq);
  b.decoder_model_layers = dec.model_layers;
  b.decoder_sandwich = dec.sandwich;
  b.projections += dec.projections;

  if (c.tie) {
    b.output_head = c.has_output_projection() ? c.d_model * c.d_embed + c.d_embed : 0;
  } else {
    b.output_head = c.d_model * c.vocab_size + c.vocab_size;
  }
  b.norms = sides * norm(c.d_model);
  b.total = b.component_sum();
  return b;
}

u64 count_unshared(const ModelConfig& c) {
  if (c.scheme != Scheme::sandwich) {
    ModelConfig plain = c;
    plain.scheme = Scheme::none;
    return count_params(plain).total;
  }
  const ParamBreakdown b = count_params(c);
  const u64 extra_enc = c.arch == Arch::seq2seq ? (c.layers_enc - 3) * b.encoder_sandwich : 0;
  return b.total + extra_enc + (c.layers_dec - 3) * b.decoder_sandwich;
}

u64 count_actual(const Subformer& model) { return model.registry.scalar_count(); }

std::string format_table(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-34s %9s %9s %8s %10s %10s %10s %10s %10s\n", "name", "params", "reference",
                "delta", "embedding", "encoder", "decoder", "bridges", "head");
  out << line;
  for (const TableRow& row : rows) {
    const ParamBreakdown b = count_params(row.config);
    const u64 enc_norm = row.config.arch == Arch::seq2seq ? norm(row.config.d_model) : 0;
    std::string reference = "-", delta = "-";
    if (row.reference_millions) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.0fM", *row.reference_millions);
      reference = buf;
      const double diff = (static_cast<double>(b.total) / 1e6 - *row.reference_millions) / *row.reference_millions;
      std::snprintf(buf, sizeof buf, "%+.1f%%", 100.0 * diff);
      delta = buf;
    }
    std::snprintf(line, sizeof line, "%-34s %9s %9s %8s %10s %10s %10s %10s %10s\n", row.name.c_str(),
                  millions(b.total).c_str(), reference.c_str(), delta.c_str(),
                  millions(b.embedding + b.safe_projection).c_str(),
                  millions(b.encoder_model_layers + b.encoder_sandwich + enc_norm).c_str(),
                  millions(b.decoder_model_layers + b.decoder_sandwich + b.norms - enc_norm).c_str(),
                  millions(b.projections).c_str(), millions(b.output_head).c_str());
    out << line;
  }
  return out.str();
}

std::string format_csv(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out << "name,total,embedding,encoder,decoder,projections,head\n";
  for (const TableRow& row : rows) {
    const ParamBreakdown b = count_params(row.config);
    // Each stack's final norm is folded into its column so the columns sum
    // to the total.
    const u64 enc_norm = row.config.arch == Arch::seq2seq ? norm(row.config.d_model) : 0;
    out << row.name << ',' << b.total << ',' << b.embedding + b.safe_projection << ','
        << b.encoder_model_layers + b.encoder_sandwich + enc_norm << ','
        << b.decoder_model_layers + b.decoder_sandwich + (b.norms - enc_norm) << ',' << b.projections << ','
        << b.output_head << '\n';
  }
  return out.str();
}

ModelConfig base_translation_config() {
  ModelConfig c;
  c.vocab_size = 32768;
  c.d_embed = c.d_model = c.d_sandwich = 512;
  c.ffn_model = c.ffn_sandwich = 2048;
  c.layers_enc = c.layers_dec = 6;
  c.heads = 8;
  c.heads_safe = 4;
  c.scheme = Scheme::none;
  c.embed_mode = EmbedMode::standard;
  c.tie = true;
  c.max_len = 1024;
  c.arch = Arch::seq2seq;
  return c;
}

std::vector<TableRow> sharing_table() {
  auto with = [](Scheme s) {
    ModelConfig c = base_translation_config();
    c.scheme = s;
    return c;
  };
  return {
      {"All-Shared", with(Scheme::all), 24.0},
      {"All-Shared (Independent FFN)", with(Scheme::all_indep_ffn), 27.0},
      {"All-Shared (except last)", with(Scheme::all_except_last), 31.0},
      {"Every 2 layers shared", with(Scheme::every2), 38.0},
      {"Sandwich", with(Scheme::sandwich), 38.0},
      {"Transformer-base", with(Scheme::none), 61.0},
  };
}

std::vector<TableRow> sharing_variants_table() {
  ModelConfig wide = base_translation_config();
  wide.scheme = Scheme::all;
  wide.d_embed = wide.d_model = wide.d_sandwich = 768;
  wide.ffn_model = wide.ffn_sandwich = 3072;
  ModelConfig deep = base_translation_config();
  deep.scheme = Scheme::sandwich;
  deep.layers_enc = deep.layers_dec = 8;
  return {
      {"All-Shared, d_m=768", wide, 41.0},
      {"Sandwich, L=8", deep, 38.0},
  };
}

std::vector<TableRow> embedding_table() {
  auto with = [](std::size_t d_e, EmbedMode mode) {
    ModelConfig c = base_translation_config();
    c.d_embed = d_e;
    c.embed_mode = mode;
    return c;
  };
  return {
      {"d_e=128, Linear", with(128, EmbedMode::linear), 48.0},
      {"d_e=256, Linear", with(256, EmbedMode::linear), 53.0},
      {"d_e=256, 2-Layer Linear", with(256, EmbedMode::linear2), 54.0},
      {"d_e=128, SAFE", with(128, EmbedMode::safe), 48.0},
      {"d_e=256, SAFE", with(256, EmbedMode::safe), 54.0},
      {"Transformer-base", with(512, EmbedMode::standard), 61.0},
  };
}

}  // namespace subformer
