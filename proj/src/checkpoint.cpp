#include "subformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "subformer/errors.hpp"

namespace subformer {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[5] = {'S', 'U', 'B', 'F', '1'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof value)) throw IoError("checkpoint truncated");
  return value;
}

std::string get_string(std::istream& in, std::size_t limit) {
  const auto len = get<std::uint32_t>(in);
  if (len > limit) throw IoError("checkpoint string length " + std::to_string(len) + " is implausible");
  std::string s(len, '\0');
  if (!in.read(s.data(), len)) throw IoError("checkpoint truncated");
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Subformer& model, const RunConfig& run) {
  RunConfig echo = run;
  echo.model = model.config;
  if (model.config.arch == Arch::lm) echo.task = "lm";
  else if (echo.task == "lm") echo.task = "copy";

  out.write(kMagic, sizeof kMagic);
  put_string(out, format_run_config(echo));
  const auto& entries = model.registry.distinct();
  put(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& entry : entries) {
    put_string(out, entry.name);
    const Shape& shape = entry.tensor.shape();
    put(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t extent : shape) put(out, static_cast<std::uint64_t>(extent));
    const auto data = entry.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    put(out, static_cast<std::uint32_t>(entry.aliases.size()));
    for (const auto& alias : entry.aliases) put_string(out, alias);
  }
  if (!out) throw IoError("checkpoint write failed");
}

void save_checkpoint(const std::filesystem::path& path, const Subformer& model, const RunConfig& run) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_checkpoint(out, model, run);
}

LoadedCheckpoint read_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError("not a checkpoint (bad magic)");
  const std::string text = get_string(in, 1 << 20);
  RunConfig run;
  try {
    run = parse_run_config(text);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config is invalid: ") + e.what());
  }
  Rng rng(0);
  Subformer model = build(run.model, rng);

  const auto count = get<std::uint32_t>(in);
  const auto& entries = model.registry.distinct();
  if (count != entries.size())
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                  std::to_string(entries.size()));
  for (const auto& entry : entries) {
    const std::string name = get_string(in, 4096);
    if (name != entry.name) throw IoError("checkpoint tensor '" + name + "' where '" + entry.name + "' was expected");
    const auto rank = get<std::uint32_t>(in);
    Shape shape;
    for (std::uint32_t r = 0; r < rank && r < 8; ++r) shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in)));
    if (shape != entry.tensor.shape())
      throw IoError("tensor '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                    shape_string(entry.tensor.shape()));
    auto data = Tensor(entry.tensor).mutable_data();
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw IoError("checkpoint truncated");
    const auto aliases = get<std::uint32_t>(in);
    std::vector<std::string> names;
    for (std::uint32_t a = 0; a < aliases && a < (1u << 16); ++a) names.push_back(get_string(in, 4096));
    if (names != entry.aliases) throw IoError("sharing layout of '" + name + "' does not match the model");
  }
  return {std::move(run), std::move(model)};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace subformer
