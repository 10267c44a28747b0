#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "leignn/model.hpp"
#include "leignn/training.hpp"

namespace leignn {

namespace ckpt_detail {

inline constexpr std::array<char, 4> kMagic = {'L', 'E', 'I', 'G'};
inline constexpr std::uint32_t kVersion = 1;

inline std::uint32_t crc32(const unsigned char* data, std::size_t length) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int bit = 0; bit < 8; ++bit) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < length; ++i)
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

template <typename Real>
const char* dtype_name() {
  if constexpr (sizeof(Real) == 4) return "f32";
  return "f64";
}

template <typename T>
void append_raw(std::vector<unsigned char>& buffer, const T* values, std::size_t count) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values);
  buffer.insert(buffer.end(), bytes, bytes + count * sizeof(T));
}

inline nlohmann::json hyper_to_json(const Hyperparams& h) {
  return {{"feature_width", h.feature_width},
          {"num_layers", h.num_layers},
          {"cutoff", h.cutoff},
          {"max_neighbors", h.max_neighbors},
          {"num_rbf", h.num_rbf},
          {"use_global", h.use_global},
          {"use_nmu", h.use_nmu},
          {"use_cutoff_envelope", h.use_cutoff_envelope},
          {"element_vocab", h.element_vocab}};
}

inline Hyperparams hyper_from_json(const nlohmann::json& j) {
  Hyperparams h;
  h.feature_width = j.at("feature_width").get<int>();
  h.num_layers = j.at("num_layers").get<int>();
  h.cutoff = j.at("cutoff").get<double>();
  h.max_neighbors = j.at("max_neighbors").get<int>();
  h.num_rbf = j.at("num_rbf").get<int>();
  h.use_global = j.at("use_global").get<bool>();
  h.use_nmu = j.at("use_nmu").get<bool>();
  h.use_cutoff_envelope = j.at("use_cutoff_envelope").get<bool>();
  h.element_vocab = j.at("element_vocab").get<int>();
  return h;
}

}  // namespace ckpt_detail

struct CheckpointMeta {
  int epoch = -1;
  double best_validation_loss = 0.0;
};

/// Adam state captured alongside the parameters.
template <typename Real>
struct OptimizerState {
  std::int64_t step_count = 0;
  double learning_rate = 0.0;
  std::vector<std::string> names;
  std::vector<std::vector<Real>> first_moments;
  std::vector<std::vector<Real>> second_moments;
};

template <typename Real>
struct LoadedCheckpoint {
  ModelParams<Real> params;
  CheckpointMeta meta;
  std::optional<OptimizerState<Real>> optimizer;
};

/// File layout: magic "LEIG", u32 version, u64 header byte count, UTF-8 JSON
/// header (hyperparameters, normalization, metadata, tensor manifest with
/// name/dtype/shape/offset/crc32), then raw little-endian tensor payloads in
/// manifest order. Offsets are relative to the start of the payload section.
template <typename Real>
void save_checkpoint(const std::string& path, const ModelParams<Real>& params,
                     const CheckpointMeta& meta = {},
                     const OptimizerState<Real>* optimizer = nullptr) {
  using nlohmann::json;
  namespace cd = ckpt_detail;

  json manifest = json::array();
  std::vector<unsigned char> payload;
  auto add_tensor = [&](const std::string& name, const std::vector<std::size_t>& shape,
                        const std::vector<Real>& values) {
    const std::size_t offset = payload.size();
    cd::append_raw(payload, values.data(), values.size());
    manifest.push_back(
        {{"name", name},
         {"dtype", cd::dtype_name<Real>()},
         {"shape", shape},
         {"offset", offset},
         {"crc32", cd::crc32(payload.data() + offset, values.size() * sizeof(Real))}});
  };

  params.for_each_param([&](const std::string& name, const Tensor<Real>& t) {
    add_tensor(name, t.shape(), t.data());
  });
  if (optimizer != nullptr) {
    for (std::size_t i = 0; i < optimizer->names.size(); ++i) {
      const std::vector<std::size_t> shape = {optimizer->first_moments[i].size()};
      add_tensor("opt.m." + optimizer->names[i], shape, optimizer->first_moments[i]);
      add_tensor("opt.v." + optimizer->names[i], shape, optimizer->second_moments[i]);
    }
  }

  json header = {
      {"dtype", cd::dtype_name<Real>()},
      {"hyperparams", cd::hyper_to_json(params.hyper)},
      {"normalization",
       {{"species_ref", params.norm.species_ref}, {"scale", params.norm.scale}}},
      {"metadata",
       {{"epoch", meta.epoch}, {"best_validation_loss", meta.best_validation_loss}}},
      {"optimizer",
       {{"present", optimizer != nullptr},
        {"step_count", optimizer ? optimizer->step_count : 0},
        {"learning_rate", optimizer ? optimizer->learning_rate : 0.0}}},
      {"tensors", manifest}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  detail::check(out.good(), "cannot open checkpoint for writing: " + path);
  out.write(cd::kMagic.data(), 4);
  const std::uint32_t version = cd::kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  detail::check(out.good(), "failed writing checkpoint: " + path);
}

/// Header-only view used by `inspect` and by precision dispatch.
struct CheckpointHeader {
  std::uint32_t version = 0;
  std::string dtype;
  Hyperparams hyper;
  nlohmann::json raw;
};

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  namespace cd = ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  detail::check(in.good(), "cannot open checkpoint: " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  detail::check(in.good() && magic == cd::kMagic,
                "checkpoint magic/version mismatch: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  detail::check(in.good() && version == cd::kVersion,
                "unsupported checkpoint version in " + path);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  detail::check(in.good(), "truncated checkpoint header: " + path);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  detail::check(in.good(), "truncated checkpoint header: " + path);

  CheckpointHeader header;
  header.version = version;
  header.raw = nlohmann::json::parse(header_text, nullptr, /*allow_exceptions=*/false);
  detail::check(!header.raw.is_discarded(), "corrupt checkpoint header JSON: " + path);
  header.dtype = header.raw.at("dtype").get<std::string>();
  header.hyper = cd::hyper_from_json(header.raw.at("hyperparams"));
  return header;
}

template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
  namespace cd = ckpt_detail;
  const CheckpointHeader header = read_checkpoint_header(path);
  detail::check(header.dtype == cd::dtype_name<Real>(),
                "checkpoint dtype " + header.dtype + " does not match the requested one");

  std::ifstream in(path, std::ios::binary);
  detail::check(in.good(), "cannot open checkpoint: " + path);
  std::uint64_t header_len = 0;
  in.seekg(8);
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  in.seekg(static_cast<std::streamoff>(16 + header_len));
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());

  struct Entry {
    std::vector<std::size_t> shape;
    std::size_t offset;
    std::uint32_t crc;
  };
  std::unordered_map<std::string, Entry> entries;
  for (const auto& item : header.raw.at("tensors")) {
    detail::check(item.at("dtype").get<std::string>() == header.dtype,
                  "mixed dtypes in checkpoint manifest");
    entries[item.at("name").get<std::string>()] =
        Entry{item.at("shape").get<std::vector<std::size_t>>(),
              item.at("offset").get<std::size_t>(), item.at("crc32").get<std::uint32_t>()};
  }

  auto read_tensor_data = [&](const std::string& name,
                              const std::vector<std::size_t>& expected_shape) {
    const auto it = entries.find(name);
    detail::check(it != entries.end(), "checkpoint missing tensor: " + name);
    detail::check(it->second.shape == expected_shape,
                  "checkpoint tensor " + name + " has mismatched shape");
    std::size_t count = 1;
    for (std::size_t d : it->second.shape) count *= d;
    const std::size_t bytes = count * sizeof(Real);
    detail::check(it->second.offset + bytes <= payload.size(),
                  "truncated checkpoint payload at tensor " + name);
    detail::check(cd::crc32(payload.data() + it->second.offset, bytes) == it->second.crc,
                  "checksum failure for tensor " + name);
    std::vector<Real> values(count);
    std::memcpy(values.data(), payload.data() + it->second.offset, bytes);
    return values;
  };

  LoadedCheckpoint<Real> loaded;
  loaded.params = init_params<Real>(header.hyper, /*seed=*/0);
  loaded.params.for_each_param([&](const std::string& name, Tensor<Real>& t) {
    t.mutable_data() = read_tensor_data(name, t.shape());
  });
  loaded.params.norm.species_ref =
      header.raw.at("normalization").at("species_ref").get<std::vector<double>>();
  loaded.params.norm.scale = header.raw.at("normalization").at("scale").get<double>();
  loaded.meta.epoch = header.raw.at("metadata").at("epoch").get<int>();
  loaded.meta.best_validation_loss =
      header.raw.at("metadata").at("best_validation_loss").get<double>();

  if (header.raw.at("optimizer").at("present").get<bool>()) {
    OptimizerState<Real> opt;
    opt.step_count = header.raw.at("optimizer").at("step_count").get<std::int64_t>();
    opt.learning_rate = header.raw.at("optimizer").at("learning_rate").get<double>();
    loaded.params.for_each_param([&](const std::string& name, Tensor<Real>& t) {
      opt.names.push_back(name);
      opt.first_moments.push_back(read_tensor_data("opt.m." + name, {t.size()}));
      opt.second_moments.push_back(read_tensor_data("opt.v." + name, {t.size()}));
    });
    loaded.optimizer = std::move(opt);
  }
  return loaded;
}

/// Guard for callers that require specific hyperparameters (for example a
/// configured feature width): shapes must match the stored model exactly.
inline void require_matching_hyper(const Hyperparams& stored, const Hyperparams& requested) {
  detail::check(stored == requested,
                "checkpoint hyperparameters do not match the requested configuration "
                "(shape mismatch)");
}

}  // namespace leignn
