#pragma once

// Deterministic CPU forward pass for decoder-only transformers.
//
// Arithmetic contract: activations are stored as f32; every dot product,
// normalization statistic and softmax accumulates in f64. The full forward is
// the incremental (KV-cached) path applied to an empty cache, so cached and
// uncached logits are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "planlab/container.hpp"
#include "planlab/intervention.hpp"
#include "planlab/model_spec.hpp"
#include "planlab/util.hpp"

namespace planlab {

struct CaptureFlags {
  bool residual = false;
  bool attention = false;
  bool head_outputs = false;
};

// x^(l)_k: the residual leaving block l at position k, after interventions.
struct ResidualTrace {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<float>> entries;

  const std::vector<float>& at(std::size_t layer, std::size_t position) const {
    auto it = entries.find({layer, position});
    if (it == entries.end()) {
      throw Error("residual trace: no entry for layer " + std::to_string(layer) + ", position " +
                  std::to_string(position));
    }
    return it->second;
  }
};

struct AttentionTrace {
  // (layer, head, query) -> weights over keys 0..query
  std::map<HeadKey, std::vector<float>> weights;
  // (layer, head, position) -> head output (post-value, pre-projection)
  std::map<HeadKey, std::vector<float>> head_outputs;
};

struct ForwardResult {
  std::vector<std::vector<float>> logits;  // [position][vocab]
  ResidualTrace residual;
  AttentionTrace attention;
};

struct NextTokenDistribution {
  std::vector<double> probs;
};

namespace kernels {

inline double dot(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

// y = W x + b, W is [rows, cols].
inline void linear(const Tensor& w, const Tensor* b, std::span<const float> x, std::span<float> y) {
  const std::size_t rows = w.shape[0];
  const std::size_t cols = w.shape[1];
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = dot(w.row(r), x.data(), cols);
    if (b) acc += static_cast<double>(b->data[r]);
    y[r] = static_cast<float>(acc);
  }
}

inline void normalize(const ModelSpec& spec, const Tensor& weight, const Tensor* bias, std::span<const float> x,
                      std::span<float> y) {
  const std::size_t n = x.size();
  if (spec.norm_scheme == NormScheme::pre_rmsnorm) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + spec.norm_eps);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<float>(x[i] * inv * weight.data[i]);
  } else {
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + spec.norm_eps);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<float>((x[i] - mean) * inv * weight.data[i] + (bias ? bias->data[i] : 0.0f));
    }
  }
}

inline float activate(Activation a, float v) {
  const double x = v;
  if (a == Activation::gelu) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    return static_cast<float>(0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x))));
  }
  return static_cast<float>(x / (1.0 + std::exp(-x)));
}

// Rotate-half rotary embedding on one head slice, base 10000.
inline void rotary(std::span<float> head, std::size_t position) {
  const std::size_t half = head.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(head.size()));
    const double angle = static_cast<double>(position) * freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a = head[i];
    const double b = head[i + half];
    head[i] = static_cast<float>(a * c - b * s);
    head[i + half] = static_cast<float>(b * c + a * s);
  }
}

inline std::vector<double> softmax(std::span<const float> logits, double temperature = 1.0) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace kernels

// Incremental decoder state for one sequence. Copyable: cloning a prefilled
// session lets many rollouts share one prompt pass.
class Session {
 public:
  Session(const Model& model, InterventionPlan plan = {}, CaptureFlags capture = {})
      : model_(&model), plan_(std::move(plan)), capture_(capture), keys_(model.spec.layer_count),
        values_(model.spec.layer_count) {
    model.spec.validate();
    plan_.validate(model.spec);
    const auto& w = model.weights;
    const auto& s = model.spec;
    tok_embed_ = &w.get("tok_embed.weight");
    if (s.positional_scheme == PositionalScheme::learned) pos_embed_ = &w.get("pos_embed.weight");
    const bool ln = s.norm_scheme == NormScheme::pre_layernorm;
    for (std::size_t l = 0; l < s.layer_count; ++l) {
      const std::string b = "blocks." + std::to_string(l);
      Block blk;
      blk.norm1_w = &w.get(b + ".norm1.weight");
      blk.norm1_b = ln ? &w.get(b + ".norm1.bias") : nullptr;
      blk.q_w = &w.get(b + ".attn.q.weight");
      blk.q_b = &w.get(b + ".attn.q.bias");
      blk.k_w = &w.get(b + ".attn.k.weight");
      blk.k_b = &w.get(b + ".attn.k.bias");
      blk.v_w = &w.get(b + ".attn.v.weight");
      blk.v_b = &w.get(b + ".attn.v.bias");
      blk.o_w = &w.get(b + ".attn.o.weight");
      blk.o_b = &w.get(b + ".attn.o.bias");
      blk.norm2_w = &w.get(b + ".norm2.weight");
      blk.norm2_b = ln ? &w.get(b + ".norm2.bias") : nullptr;
      if (s.gated_mlp) {
        blk.gate_w = &w.get(b + ".mlp.gate.weight");
        blk.gate_b = &w.get(b + ".mlp.gate.bias");
      }
      blk.up_w = &w.get(b + ".mlp.up.weight");
      blk.up_b = &w.get(b + ".mlp.up.bias");
      blk.down_w = &w.get(b + ".mlp.down.weight");
      blk.down_b = &w.get(b + ".mlp.down.bias");
      blocks_.push_back(blk);
    }
    final_w_ = &w.get("final_norm.weight");
    final_b_ = ln ? &w.get("final_norm.bias") : nullptr;
    head_w_ = s.tied_embeddings ? tok_embed_ : &w.get("lm_head.weight");
    head_b_ = &w.get("lm_head.bias");
  }

  std::size_t length() const { return length_; }
  const ModelSpec& spec() const { return model_->spec; }
  const InterventionPlan& plan() const { return plan_; }
  const ResidualTrace& residual_trace() const { return residual_; }
  const AttentionTrace& attention_trace() const { return attention_; }

  // Consumes one token and returns the next-token logits at its position.
  std::vector<float> append(TokenId token) {
    const auto& s = model_->spec;
    if (length_ >= s.max_context) {
      throw Error("forward: sequence length exceeds max_context (" + std::to_string(s.max_context) + ")");
    }
    if (token < 0 || static_cast<std::size_t>(token) >= s.vocab_size) {
      throw Error("forward: unknown token id " + std::to_string(token));
    }
    const std::size_t pos = length_;
    const std::size_t d = s.model_dim;
    const std::size_t hd = s.head_dim;
    std::vector<float> x(tok_embed_->row(static_cast<std::size_t>(token)),
                         tok_embed_->row(static_cast<std::size_t>(token)) + d);
    if (pos_embed_) {
      const float* p = pos_embed_->row(pos);
      for (std::size_t i = 0; i < d; ++i) x[i] += p[i];
    }
    std::vector<float> h(d), q(d), k(d), v(d), concat(d), proj(d);
    std::vector<float> up(s.mlp_dim), gate(s.mlp_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t l = 0; l < s.layer_count; ++l) {
      const Block& blk = blocks_[l];
      kernels::normalize(s, *blk.norm1_w, blk.norm1_b, x, h);
      kernels::linear(*blk.q_w, blk.q_b, h, q);
      kernels::linear(*blk.k_w, blk.k_b, h, k);
      kernels::linear(*blk.v_w, blk.v_b, h, v);
      if (s.positional_scheme == PositionalScheme::rotary) {
        for (std::size_t head = 0; head < s.head_count; ++head) {
          kernels::rotary(std::span<float>(q).subspan(head * hd, hd), pos);
          kernels::rotary(std::span<float>(k).subspan(head * hd, hd), pos);
        }
      }
      keys_[l].push_back(k);
      values_[l].push_back(v);
      for (std::size_t head = 0; head < s.head_count; ++head) {
        std::vector<double> scores(pos + 1);
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j <= pos; ++j) {
          if (plan_.blocks(l, pos, j)) {
            scores[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          scores[j] = kernels::dot(q.data() + head * hd, keys_[l][j].data() + head * hd, hd) * scale;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (!any) {
          throw Error("forward: attention ablation blocks every key for query " + std::to_string(pos) +
                      " at layer " + std::to_string(l));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) {
          scores[j] = std::isinf(scores[j]) ? 0.0 : std::exp(scores[j] - mx);
          sum += scores[j];
        }
        for (auto& w : scores) w /= sum;
        float* out = concat.data() + head * hd;
        if (const auto* patch = plan_.find_patch(l, head, pos)) {
          std::copy(patch->replacement.begin(), patch->replacement.end(), out);
        } else {
          for (std::size_t i = 0; i < hd; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j <= pos; ++j) acc += scores[j] * values_[l][j][head * hd + i];
            out[i] = static_cast<float>(acc);
          }
        }
        if (capture_.attention) {
          attention_.weights[{l, head, pos}] = std::vector<float>(scores.begin(), scores.end());
        }
        if (capture_.head_outputs) attention_.head_outputs[{l, head, pos}] = std::vector<float>(out, out + hd);
      }
      kernels::linear(*blk.o_w, blk.o_b, concat, proj);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

      kernels::normalize(s, *blk.norm2_w, blk.norm2_b, x, h);
      kernels::linear(*blk.up_w, blk.up_b, h, up);
      if (s.gated_mlp) {
        kernels::linear(*blk.gate_w, blk.gate_b, h, gate);
        for (std::size_t i = 0; i < s.mlp_dim; ++i) up[i] = kernels::activate(s.activation, gate[i]) * up[i];
      } else {
        for (auto& u : up) u = kernels::activate(s.activation, u);
      }
      kernels::linear(*blk.down_w, blk.down_b, up, proj);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

      if (const auto* add = plan_.find_residual(l, pos)) {
        for (std::size_t i = 0; i < d; ++i) x[i] += add->multiplier * add->vector[i];
      }
      if (capture_.residual) residual_.entries[{l, pos}] = x;
    }
    kernels::normalize(s, *final_w_, final_b_, x, h);
    std::vector<float> logits(s.vocab_size);
    kernels::linear(*head_w_, head_b_, h, logits);
    ++length_;
    return logits;
  }

 private:
  struct Block {
    const Tensor *norm1_w = nullptr, *norm1_b = nullptr;
    const Tensor *q_w = nullptr, *q_b = nullptr, *k_w = nullptr, *k_b = nullptr;
    const Tensor *v_w = nullptr, *v_b = nullptr, *o_w = nullptr, *o_b = nullptr;
    const Tensor *norm2_w = nullptr, *norm2_b = nullptr;
    const Tensor *gate_w = nullptr, *gate_b = nullptr, *up_w = nullptr, *up_b = nullptr;
    const Tensor *down_w = nullptr, *down_b = nullptr;
  };

  const Model* model_;
  InterventionPlan plan_;
  CaptureFlags capture_;
  std::vector<std::vector<std::vector<float>>> keys_;    // [layer][position][model_dim]
  std::vector<std::vector<std::vector<float>>> values_;  // [layer][position][model_dim]
  std::vector<Block> blocks_;
  const Tensor* tok_embed_ = nullptr;
  const Tensor* pos_embed_ = nullptr;
  const Tensor* final_w_ = nullptr;
  const Tensor* final_b_ = nullptr;
  const Tensor* head_w_ = nullptr;
  const Tensor* head_b_ = nullptr;
  std::size_t length_ = 0;
  ResidualTrace residual_;
  AttentionTrace attention_;
};

inline void check_tokens(const ModelSpec& spec, std::span<const TokenId> tokens) {
  if (tokens.size() > spec.max_context) {
    throw Error("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_context " +
                std::to_string(spec.max_context));
  }
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= spec.vocab_size) {
      throw Error("forward: unknown token id " + std::to_string(t));
    }
  }
}

inline ForwardResult forward(const Model& model, std::span<const TokenId> tokens, const InterventionPlan& plan = {},
                             CaptureFlags capture = {}) {
  check_tokens(model.spec, tokens);
  Session session(model, plan, capture);
  ForwardResult result;
  result.logits.reserve(tokens.size());
  for (auto t : tokens) result.logits.push_back(session.append(t));
  result.residual = session.residual_trace();
  result.attention = session.attention_trace();
  return result;
}

inline NextTokenDistribution next_token_distribution(const Model& model, std::span<const TokenId> tokens,
                                                     const InterventionPlan& plan = {}) {
  if (tokens.empty()) throw Error("next_token_distribution: empty token sequence");
  auto result = forward(model, tokens, plan);
  return {kernels::softmax(result.logits.back())};
}

// Entry j is the distribution after consuming tokens 0..j, from one pass.
inline std::vector<NextTokenDistribution> teacher_forced_distributions(const Model& model,
                                                                       std::span<const TokenId> tokens,
                                                                       const InterventionPlan& plan = {}) {
  auto result = forward(model, tokens, plan);
  std::vector<NextTokenDistribution> out;
  out.reserve(result.logits.size());
  for (const auto& row : result.logits) out.push_back({kernels::softmax(row)});
  return out;
}

}  // namespace planlab
