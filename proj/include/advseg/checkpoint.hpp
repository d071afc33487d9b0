// Checkpoint persistence.
//
// Layout: magic "ADVSEG01" | u32 tensor count | per tensor {u16 name length,
// name bytes, u8 rank, u32 dims..., f32 data little-endian} | u32 json length
// | json metadata (model config, step counter, RNG state). Writes go through
// a temp file plus rename so readers never observe a partial checkpoint.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "advseg/models.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'S', 'E', 'G', '0', '1'};

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json meta;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename V>
void write_pod(std::ofstream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& is, const std::string& path, const char* what) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  ADVSEG_CHECK(is.gcount() == static_cast<std::streamsize>(sizeof(V)), FormatError,
               "checkpoint ", path, ": truncated while reading ", what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    ADVSEG_CHECK(os.good(), FormatError, "checkpoint ", path.string(), ": cannot open for write");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      ADVSEG_CHECK(name.size() <= 0xFFFF, FormatError, "checkpoint: tensor name too long");
      detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
      for (int i = 0; i < t.rank(); ++i)
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim(i)));
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    const std::string blob = ckpt.meta.dump();
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(blob.size()));
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    ADVSEG_CHECK(os.good(), FormatError, "checkpoint ", path.string(), ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  ADVSEG_CHECK(is.good(), FormatError, "checkpoint ", path.string(), ": cannot open");
  char magic[8];
  is.read(magic, sizeof(magic));
  ADVSEG_CHECK(is.gcount() == 8, FormatError, "checkpoint ", path.string(),
               ": truncated while reading magic");
  ADVSEG_CHECK(std::memcmp(magic, "ADVSEG", 6) == 0, FormatError, "checkpoint ", path.string(),
               ": bad magic");
  ADVSEG_CHECK(std::memcmp(magic, kCheckpointMagic, 8) == 0, FormatError, "checkpoint ",
               path.string(), ": unsupported format version ", std::string(magic + 6, 2));

  Checkpoint ckpt;
  const auto count = detail::read_pod<std::uint32_t>(is, path.string(), "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint16_t>(is, path.string(), "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    ADVSEG_CHECK(is.gcount() == static_cast<std::streamsize>(name_len), FormatError, "checkpoint ",
                 path.string(), ": truncated while reading name");
    const auto rank = detail::read_pod<std::uint8_t>(is, path.string(), "rank");
    ADVSEG_CHECK(rank >= 1 && rank <= 8, FormatError, "checkpoint ", path.string(),
                 ": implausible tensor rank ", static_cast<int>(rank));
    Shape shape;
    std::int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto dim = detail::read_pod<std::uint32_t>(is, path.string(), "dimension");
      ADVSEG_CHECK(dim >= 1 && dim <= (1u << 28), FormatError, "checkpoint ", path.string(),
                   ": implausible dimension ", dim);
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    std::vector<float> data(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    ADVSEG_CHECK(is.gcount() == static_cast<std::streamsize>(data.size() * sizeof(float)),
                 FormatError, "checkpoint ", path.string(), ": truncated in tensor '", name, "'");
    ckpt.tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
  }
  const auto blob_len = detail::read_pod<std::uint32_t>(is, path.string(), "metadata length");
  std::string blob(blob_len, '\0');
  is.read(blob.data(), blob_len);
  ADVSEG_CHECK(is.gcount() == static_cast<std::streamsize>(blob_len), FormatError, "checkpoint ",
               path.string(), ": truncated metadata");
  try {
    ckpt.meta = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    ADVSEG_THROW(FormatError, "checkpoint ", path.string(), ": bad metadata json: ", e.what());
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint bridging
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
  return {{"image_size", cfg.image_size}, {"in_channels", cfg.in_channels},
          {"n_classes", cfg.n_classes},   {"width_scale", cfg.width_scale},
          {"leaky_slope", cfg.leaky_slope}, {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.image_size = j.at("image_size").get<int>();
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.n_classes = j.at("n_classes").get<int>();
  cfg.width_scale = j.at("width_scale").get<double>();
  cfg.leaky_slope = j.at("leaky_slope").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

inline Checkpoint make_checkpoint(Segmentor& seg, Discriminator* disc, std::int64_t step,
                                  const std::string& rng_state) {
  Checkpoint ckpt;
  seg.for_each_param([&](const std::string& n, Tensor& t) {
    ckpt.tensors.emplace_back("S." + n, t.clone());
  });
  if (disc)
    disc->for_each_param([&](const std::string& n, Tensor& t) {
      ckpt.tensors.emplace_back("D." + n, t.clone());
    });
  ckpt.meta = {{"model", model_config_json(seg.config())},
               {"step", step},
               {"rng_state", rng_state},
               {"has_discriminator", disc != nullptr}};
  return ckpt;
}

template <typename Model>
void restore_params(Model& model, const Checkpoint& ckpt, const std::string& prefix) {
  model.for_each_param([&](const std::string& n, Tensor& t) {
    const Tensor* src = ckpt.find(prefix + n);
    ADVSEG_CHECK(src != nullptr, FormatError, "checkpoint: missing tensor ", prefix + n);
    ADVSEG_CHECK(src->shape() == t.shape(), FormatError, "checkpoint: tensor ", prefix + n,
                 " has shape ", shape_str(src->shape()), ", model expects ", shape_str(t.shape()));
    t.data_vec() = src->data_vec();
  });
}

// Rebuilds the segmentor (and discriminator when present) from a checkpoint.
inline Segmentor segmentor_from_checkpoint(const Checkpoint& ckpt) {
  Segmentor seg(model_config_from_json(ckpt.meta.at("model")));
  restore_params(seg, ckpt, "S.");
  return seg;
}

}  // namespace advseg
