#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "planlab/container.hpp"

namespace planlab::fixtures {

// Dense random model with N(0, scale^2) weights and unit norm gains.
inline Model random_model(const ModelSpec& spec, std::uint64_t seed, float scale = 0.2f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, scale);
  std::map<std::string, Tensor> tensors;
  for (const auto& t : canonical_tensors(spec)) {
    Tensor tensor(t.shape);
    const bool gain = t.name.find("norm") != std::string::npos && t.name.ends_with(".weight");
    for (auto& v : tensor.data) v = gain ? 1.0f + dist(rng) * 0.5f : dist(rng);
    tensors.emplace(t.name, std::move(tensor));
  }
  return Model{spec, WeightStore::create(spec, std::move(tensors))};
}

inline ModelSpec small_spec(PositionalScheme pos = PositionalScheme::learned, NormScheme norm = NormScheme::pre_layernorm,
                            Activation act = Activation::gelu, bool tied = false, bool gated = false) {
  ModelSpec s;
  s.layer_count = 2;
  s.head_count = 2;
  s.head_dim = 4;
  s.model_dim = 8;
  s.mlp_dim = 12;
  s.vocab_size = 11;
  s.max_context = 16;
  s.positional_scheme = pos;
  s.norm_scheme = norm;
  s.activation = act;
  s.tied_embeddings = tied;
  s.gated_mlp = gated;
  return s;
}

// Hand-rolled generator: random token sequence of length in [lo, hi].
inline Tokens random_tokens(std::mt19937_64& rng, std::size_t vocab, std::size_t lo, std::size_t hi) {
  std::uniform_int_distribution<std::size_t> len(lo, hi);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
  Tokens out(len(rng));
  for (auto& t : out) t = tok(rng);
  return out;
}

}  // namespace planlab::fixtures
