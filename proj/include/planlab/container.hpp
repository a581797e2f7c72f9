#pragma once

// PLNL binary tensor container.
//
//   "PLNL" | u32 version | u64 manifest_len | manifest (UTF-8 JSON)
//   | zero pad to 64 | payload region
//
// Manifest: {"spec": ModelSpec?, "metadata": {...},
//            "tensors": [{"name", "dtype": "f32", "shape", "offset", "checksum"}]}
// Offsets are relative to the payload region and multiples of 64. Payloads are
// row-major little-endian f32. checksum is FNV-1a-64 (hex) of the payload bytes.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "planlab/model_spec.hpp"
#include "planlab/util.hpp"

namespace planlab {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kPayloadAlign = 64;

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (element_count(shape) != data.size()) throw Error("Tensor: shape does not match data size");
  }
  explicit Tensor(std::vector<std::size_t> s, float fill = 0.0f) : shape(std::move(s)), data(element_count(shape), fill) {}

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto v : s) n *= v;
    return n;
  }
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }
  const float* row(std::size_t r) const { return data.data() + r * cols(); }
  float* row(std::size_t r) { return data.data() + r * cols(); }

  bool operator==(const Tensor&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  std::optional<ModelSpec> spec;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor* find(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.tensor;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline std::string floats_to_le(const std::vector<float>& data) {
  std::string out(data.size() * 4, '\0');
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  return out;
}

inline std::size_t align_up(std::size_t v) { return (v + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign; }

}  // namespace detail

inline std::string serialize_container(const Container& c) {
  nlohmann::json manifest;
  if (c.spec) manifest["spec"] = *c.spec;
  manifest["metadata"] = c.metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::vector<std::string> payloads;
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    payloads.push_back(detail::floats_to_le(t.tensor.data));
    manifest["tensors"].push_back({{"name", t.name},
                                   {"dtype", "f32"},
                                   {"shape", t.tensor.shape},
                                   {"offset", offset},
                                   {"checksum", hex64(fnv1a64(payloads.back()))}});
    offset = detail::align_up(offset + payloads.back().size());
  }
  const std::string text = manifest.dump();
  std::string out = "PLNL";
  detail::put_u32(out, kContainerVersion);
  detail::put_u64(out, text.size());
  out += text;
  out.resize(detail::align_up(out.size()), '\0');
  const std::size_t region = out.size();
  std::size_t cursor = 0;
  for (const auto& p : payloads) {
    out.resize(region + cursor, '\0');
    out += p;
    cursor = detail::align_up(cursor + p.size());
  }
  return out;
}

inline Container parse_container(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "PLNL") != 0) throw ValidationError("container: bad magic");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kContainerVersion) {
    throw ValidationError("container: unsupported version " + std::to_string(version));
  }
  const auto len = detail::get_le(bytes, 8, 8);
  if (len > bytes.size() - 16) throw ValidationError("container: manifest length exceeds file size");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("container: manifest is not valid JSON: ") + e.what());
  }
  const std::size_t region = detail::align_up(16 + len);
  Container c;
  if (manifest.contains("spec") && !manifest["spec"].is_null()) c.spec = manifest["spec"].get<ModelSpec>();
  c.metadata = manifest.value("metadata", nlohmann::json::object());
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw ValidationError("container: manifest has no tensor table");
  }
  for (const auto& entry : manifest["tensors"]) {
    const auto name = entry.at("name").get<std::string>();
    if (entry.value("dtype", "") != "f32") throw ValidationError("container: tensor '" + name + "' has non-f32 dtype");
    auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t count = Tensor::element_count(shape);
    if (offset % kPayloadAlign != 0) throw ValidationError("container: tensor '" + name + "' is not 64-byte aligned");
    if (region + offset + count * 4 > bytes.size()) {
      throw ValidationError("container: tensor '" + name + "' extends past end of file");
    }
    const std::string_view payload(bytes.data() + region + offset, count * 4);
    if (entry.contains("checksum") && entry["checksum"].get<std::string>() != hex64(fnv1a64(payload))) {
      throw ValidationError("container: checksum mismatch for tensor '" + name + "'");
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, region + offset + i * 4, 4)));
    }
    c.tensors.push_back({name, Tensor(std::move(shape), std::move(data))});
  }
  return c;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline Container load_container(const std::filesystem::path& path) { return parse_container(read_file(path)); }
inline void save_container(const std::filesystem::path& path, const Container& c) {
  write_file(path, serialize_container(c));
}

// Immutable, validated set of model weights.
class WeightStore {
 public:
  WeightStore() = default;

  static WeightStore create(const ModelSpec& spec, std::map<std::string, Tensor> tensors) {
    spec.validate();
    for (const auto& expected : canonical_tensors(spec)) {
      auto it = tensors.find(expected.name);
      if (it == tensors.end()) throw ValidationError("weights: missing tensor '" + expected.name + "'");
      if (it->second.shape != expected.shape) {
        throw ValidationError("weights: tensor '" + expected.name + "' has wrong shape");
      }
    }
    WeightStore w;
    w.tensors_ = std::move(tensors);
    return w;
  }

  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("weights: no tensor '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.contains(name); }
  const std::map<std::string, Tensor>& all() const { return tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

struct Model {
  ModelSpec spec;
  WeightStore weights;
};

inline Container model_to_container(const Model& m, nlohmann::json metadata = nlohmann::json::object()) {
  Container c;
  c.spec = m.spec;
  c.metadata = std::move(metadata);
  for (const auto& t : canonical_tensors(m.spec)) c.tensors.push_back({t.name, m.weights.get(t.name)});
  return c;
}

inline Model model_from_container(const Container& c) {
  if (!c.spec) throw ValidationError("container: no model spec in manifest");
  std::map<std::string, Tensor> tensors;
  for (const auto& t : c.tensors) {
    if (!tensors.emplace(t.name, t.tensor).second) throw ValidationError("container: duplicate tensor '" + t.name + "'");
  }
  return Model{*c.spec, WeightStore::create(*c.spec, std::move(tensors))};
}

inline Model load_model(const std::filesystem::path& path) { return model_from_container(load_container(path)); }

}  // namespace planlab
