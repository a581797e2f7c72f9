#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "planlab/util.hpp"

namespace planlab {

enum class PositionalScheme { learned, rotary };
enum class NormScheme { pre_layernorm, pre_rmsnorm };
enum class Activation { gelu, silu };

struct ModelSpec {
  std::size_t layer_count = 1;
  std::size_t head_count = 1;
  std::size_t model_dim = 1;
  std::size_t head_dim = 1;
  std::size_t mlp_dim = 1;
  std::size_t vocab_size = 1;
  std::size_t max_context = 1;
  PositionalScheme positional_scheme = PositionalScheme::learned;
  NormScheme norm_scheme = NormScheme::pre_layernorm;
  Activation activation = Activation::gelu;
  bool tied_embeddings = false;
  bool gated_mlp = false;
  float norm_eps = 1e-5f;

  void validate() const {
    if (layer_count < 1 || head_count < 1 || model_dim < 1 || head_dim < 1 || mlp_dim < 1 || vocab_size < 1 ||
        max_context < 1) {
      throw ValidationError("ModelSpec: all dimensions must be >= 1");
    }
    if (head_count * head_dim != model_dim) {
      throw ValidationError("ModelSpec: head_count * head_dim (" + std::to_string(head_count * head_dim) +
                            ") != model_dim (" + std::to_string(model_dim) + ")");
    }
    if (positional_scheme == PositionalScheme::rotary && head_dim % 2 != 0) {
      throw ValidationError("ModelSpec: rotary positions need an even head_dim");
    }
    if (!(norm_eps > 0.0f)) throw ValidationError("ModelSpec: norm_eps must be positive");
  }

  bool operator==(const ModelSpec&) const = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(PositionalScheme, {{PositionalScheme::learned, "learned"},
                                                {PositionalScheme::rotary, "rotary"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NormScheme, {{NormScheme::pre_layernorm, "pre_layernorm"},
                                          {NormScheme::pre_rmsnorm, "pre_rmsnorm"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::gelu, "gelu"}, {Activation::silu, "silu"}})

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"layer_count", s.layer_count},
                     {"head_count", s.head_count},
                     {"model_dim", s.model_dim},
                     {"head_dim", s.head_dim},
                     {"mlp_dim", s.mlp_dim},
                     {"vocab_size", s.vocab_size},
                     {"max_context", s.max_context},
                     {"positional_scheme", s.positional_scheme},
                     {"norm_scheme", s.norm_scheme},
                     {"activation", s.activation},
                     {"tied_embeddings", s.tied_embeddings},
                     {"gated_mlp", s.gated_mlp},
                     {"norm_eps", s.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  auto positive = [&](const char* key) {
    if (!j.contains(key)) throw ValidationError(std::string("ModelSpec: missing field '") + key + "'");
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 1) {
      throw ValidationError(std::string("ModelSpec: field '") + key + "' must be a positive integer");
    }
    return v.get<std::size_t>();
  };
  s.layer_count = positive("layer_count");
  s.head_count = positive("head_count");
  s.model_dim = positive("model_dim");
  s.head_dim = positive("head_dim");
  s.mlp_dim = positive("mlp_dim");
  s.vocab_size = positive("vocab_size");
  s.max_context = positive("max_context");
  try {
    s.positional_scheme = j.at("positional_scheme").get<PositionalScheme>();
    s.norm_scheme = j.at("norm_scheme").get<NormScheme>();
    s.activation = j.at("activation").get<Activation>();
    s.tied_embeddings = j.at("tied_embeddings").get<bool>();
    s.gated_mlp = j.value("gated_mlp", false);
    s.norm_eps = j.value("norm_eps", 1e-5f);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("ModelSpec: ") + e.what());
  }
  // Unknown enum strings deserialize to the first enumerator; catch that.
  if (j.at("positional_scheme") != nlohmann::json(s.positional_scheme) ||
      j.at("norm_scheme") != nlohmann::json(s.norm_scheme) || j.at("activation") != nlohmann::json(s.activation)) {
    throw ValidationError("ModelSpec: unknown enum value in positional_scheme/norm_scheme/activation");
  }
  s.validate();
}

struct TensorShape {
  std::string name;
  std::vector<std::size_t> shape;
};

// Canonical tensor names. Linear weights are stored [out, in] row-major.
inline std::vector<TensorShape> canonical_tensors(const ModelSpec& s) {
  const std::size_t d = s.model_dim;
  const bool layernorm = s.norm_scheme == NormScheme::pre_layernorm;
  std::vector<TensorShape> out;
  out.push_back({"tok_embed.weight", {s.vocab_size, d}});
  if (s.positional_scheme == PositionalScheme::learned) out.push_back({"pos_embed.weight", {s.max_context, d}});
  auto norm = [&](const std::string& prefix) {
    out.push_back({prefix + ".weight", {d}});
    if (layernorm) out.push_back({prefix + ".bias", {d}});
  };
  auto linear = [&](const std::string& prefix, std::size_t rows, std::size_t cols) {
    out.push_back({prefix + ".weight", {rows, cols}});
    out.push_back({prefix + ".bias", {rows}});
  };
  for (std::size_t l = 0; l < s.layer_count; ++l) {
    const std::string b = "blocks." + std::to_string(l);
    norm(b + ".norm1");
    linear(b + ".attn.q", d, d);
    linear(b + ".attn.k", d, d);
    linear(b + ".attn.v", d, d);
    linear(b + ".attn.o", d, d);
    norm(b + ".norm2");
    if (s.gated_mlp) linear(b + ".mlp.gate", s.mlp_dim, d);
    linear(b + ".mlp.up", s.mlp_dim, d);
    linear(b + ".mlp.down", d, s.mlp_dim);
  }
  norm("final_norm");
  if (!s.tied_embeddings) out.push_back({"lm_head.weight", {s.vocab_size, d}});
  out.push_back({"lm_head.bias", {s.vocab_size}});
  return out;
}

}  // namespace planlab
