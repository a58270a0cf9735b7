#include "hicl/models/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "hicl/error.hpp"

namespace hicl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename U>
void to_little(U* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char b[sizeof(U)];
      std::memcpy(b, data + i, sizeof(U));
      for (std::size_t k = 0; k < sizeof(U) / 2; ++k) std::swap(b[k], b[sizeof(U) - 1 - k]);
      std::memcpy(data + i, b, sizeof(U));
    }
  } else {
    (void)data;
    (void)n;
  }
}

void write_file(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename Src, typename T>
NdArray<T> decode(const std::string& blob, std::size_t offset, const Shape& shape) {
  NdArray<Src> raw(shape);
  std::memcpy(raw.ptr(), blob.data() + offset, raw.size() * sizeof(Src));
  to_little(raw.ptr(), raw.size());
  return raw.template cast<T>();
}

}  // namespace

json to_json(const ArchitectureSpec& spec) {
  return {{"variant_id", spec.variant_id},
          {"n_layers", spec.n_layers},
          {"input_dim", spec.input_dim},
          {"output_dim", spec.output_dim},
          {"max_points", spec.max_points},
          {"mamba_layer_multiplier", spec.mamba_layer_multiplier},
          {"prefix_depth", spec.prefix_depth}};
}

json to_json(const BlockConfig& cfg) {
  return {{"embed_dim", cfg.embed_dim},
          {"n_heads", cfg.n_heads},
          {"ffn_hidden_dim", cfg.ffn_hidden_dim},
          {"mamba_state_dim", cfg.mamba_state_dim},
          {"mamba_conv_kernel", cfg.mamba_conv_kernel},
          {"mamba_expand", cfg.mamba_expand},
          {"mamba_dt_rank", cfg.mamba_dt_rank},
          {"rope_base", cfg.rope_base},
          {"norm_epsilon", cfg.norm_epsilon}};
}

ArchitectureSpec architecture_from_json(const json& j) {
  ArchitectureSpec s;
  s.variant_id = j.at("variant_id").get<std::string>();
  s.n_layers = j.at("n_layers").get<std::size_t>();
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.output_dim = j.at("output_dim").get<std::size_t>();
  s.max_points = j.at("max_points").get<std::size_t>();
  s.mamba_layer_multiplier = j.at("mamba_layer_multiplier").get<std::size_t>();
  s.prefix_depth = j.at("prefix_depth").get<std::size_t>();
  return s;
}

BlockConfig block_config_from_json(const json& j) {
  BlockConfig c;
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_hidden_dim = j.at("ffn_hidden_dim").get<std::size_t>();
  c.mamba_state_dim = j.at("mamba_state_dim").get<std::size_t>();
  c.mamba_conv_kernel = j.at("mamba_conv_kernel").get<std::size_t>();
  c.mamba_expand = j.at("mamba_expand").get<std::size_t>();
  c.mamba_dt_rank = j.at("mamba_dt_rank").get<std::size_t>();
  c.rope_base = j.at("rope_base").get<double>();
  c.norm_epsilon = j.at("norm_epsilon").get<double>();
  return c;
}

template <typename T>
void save_checkpoint(const fs::path& dir, const Model<T>& model, const CheckpointMeta& meta) {
  fs::create_directories(dir);
  json tensors = json::array();
  std::string blob;
  for (const auto& [name, arr] : model.params()) {
    NdArray<T> copy = arr;
    to_little(copy.ptr(), copy.size());
    tensors.push_back({{"name", name},
                       {"shape", arr.shape()},
                       {"offset", blob.size()},
                       {"bytes", arr.size() * sizeof(T)}});
    blob.append(reinterpret_cast<const char*>(copy.ptr()), copy.size() * sizeof(T));
  }
  const json manifest = {
      {"format_version", kCheckpointFormat},
      {"architecture", to_json(model.spec())},
      {"block_config", to_json(model.config())},
      {"step", meta.step},
      {"rng",
       {{"algorithm", kRngAlgorithm},
        {"seed", meta.rng.seed},
        {"stream", meta.rng.stream},
        {"block", meta.rng.block},
        {"lane", meta.rng.lane}}},
      {"precision", sizeof(T) * 8},
      {"biases", {{"read_in", true}, {"read_out", true}}},
      {"blob", "params.bin"},
      {"blob_bytes", blob.size()},
      {"tensors", tensors},
      {"extra", meta.extra}};
  // Blob first so a manifest never points at a missing or partial blob.
  write_file(dir / "params.bin", blob);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

json read_manifest(const fs::path& dir) {
  try {
    return json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw CheckpointError("bad manifest in " + dir.string() + ": " + e.what());
  }
}

int checkpoint_precision(const fs::path& dir) {
  return read_manifest(dir).at("precision").get<int>();
}

template <typename T>
Model<T> load_checkpoint(const fs::path& dir, CheckpointMeta* meta) {
  const json m = read_manifest(dir);
  try {
    if (m.at("format_version").get<int>() != kCheckpointFormat) {
      throw CheckpointError("unsupported checkpoint format " + m.at("format_version").dump());
    }
    const int precision = m.at("precision").get<int>();
    if (precision != 32 && precision != 64) {
      throw CheckpointError("unsupported precision " + std::to_string(precision));
    }
    const std::string blob = read_file(dir / m.at("blob").get<std::string>());
    if (blob.size() != m.at("blob_bytes").get<std::size_t>()) {
      throw CheckpointError("blob size " + std::to_string(blob.size()) + " disagrees with manifest");
    }
    const std::size_t width = static_cast<std::size_t>(precision) / 8;
    ParamMap<T> params;
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto bytes = t.at("bytes").get<std::size_t>();
      if (bytes != shape_size(shape) * width || offset + bytes > blob.size()) {
        throw CheckpointError("tensor " + name + " overruns the blob");
      }
      params[name] = precision == 32 ? decode<float, T>(blob, offset, shape)
                                     : decode<double, T>(blob, offset, shape);
    }
    if (meta != nullptr) {
      meta->step = m.at("step").get<std::size_t>();
      const auto& r = m.at("rng");
      if (r.at("algorithm").get<std::string>() != kRngAlgorithm) {
        throw CheckpointError("checkpoint rng algorithm " + r.at("algorithm").dump() +
                              " is not " + kRngAlgorithm);
      }
      meta->rng = {r.at("seed").get<std::uint64_t>(), r.at("stream").get<std::uint64_t>(),
                   r.at("block").get<std::uint64_t>(), r.at("lane").get<std::uint32_t>()};
      meta->extra = m.value("extra", json::object());
    }
    return Model<T>(architecture_from_json(m.at("architecture")),
                    block_config_from_json(m.at("block_config")), std::move(params));
  } catch (const json::exception& e) {
    throw CheckpointError("bad manifest in " + dir.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError("checkpoint " + dir.string() + " does not match its architecture: " +
                          e.what());
  }
}

template void save_checkpoint<float>(const fs::path&, const Model<float>&, const CheckpointMeta&);
template void save_checkpoint<double>(const fs::path&, const Model<double>&, const CheckpointMeta&);
template Model<float> load_checkpoint<float>(const fs::path&, CheckpointMeta*);
template Model<double> load_checkpoint<double>(const fs::path&, CheckpointMeta*);

}  // namespace hicl
