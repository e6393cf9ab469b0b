#pragma once

#include <filesystem>
#include <iosfwd>

#include "subformer/model.hpp"
#include "subformer/run_config.hpp"

namespace subformer {

// Binary layout, all integers little-endian:
//
//   "SUBF1"                                  5 bytes
//   u32 config_len, config text              flat key=value echo
//   u32 tensor_count
//   per distinct tensor:
//     u32 name_len, name
//     u32 rank, u64 extent[rank]
//     f64 value[numel]                       IEEE-754 little-endian
//     u32 alias_count, per alias: u32 len, name
//
// Shared tensors are written once under their canonical name; the aliases
// record every other slot that resolves to them. The echoed config is `run`
// with its model section replaced by the model's own config.
void write_checkpoint(std::ostream& out, const Subformer& model, const RunConfig& run = {});
void save_checkpoint(const std::filesystem::path& path, const Subformer& model, const RunConfig& run = {});

struct LoadedCheckpoint {
  RunConfig run;
  Subformer model;
};

// Throws IoError on bad magic, truncation, or a tensor / alias layout that
// does not match the model rebuilt from the echoed config.
LoadedCheckpoint read_checkpoint(std::istream& in);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace subformer
