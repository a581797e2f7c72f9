#pragma once

// A two-layer transformer with a hand-built planning circuit, plus an
// independent dense evaluator used as ground truth for the runtime.
//
// Second lines generated by the planted model read `<lead-in><marker><word>\n`.
// The cue word ending the prompt's last line decides the category; a layer-0
// head writes +-alpha along the plan direction d at that line's newline, one
// layer-1 head copies the d component forward, and the unembedding turns it
// into a logit gap on markers and category words.
//
// Residual layout (first nine dimensions are reserved, d lives in the rest):
//   0 constant   1 newline   2 lead-in   3 marker   4 category word
//   5 is-cue     6 cue sign  7 non-cue   8 plan flag

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "planlab/container.hpp"
#include "planlab/corpus.hpp"
#include "planlab/intervention.hpp"
#include "planlab/runtime.hpp"
#include "planlab/tokenizer.hpp"

namespace planlab {

namespace planted_layout {
inline constexpr std::size_t kConst = 0, kNewline = 1, kLead = 2, kMarker = 3, kCategory = 4, kIsCue = 5, kCueSign = 6,
                             kNonCue = 7, kFlag = 8, kPlanBegin = 9;
inline constexpr float kConstValue = 10.0f;
inline constexpr float kTypeLogit = 25.0f;   // logit for the next token type in the chain
inline constexpr float kScoreScale = 70.0f;  // ~25 nats of attention selectivity at head_dim 8
inline constexpr float kAlpha = 1.0f;        // plan written at the cue newline
}  // namespace planted_layout

struct PlantedSpec {
  std::string category_a_id = "-ight";
  std::string category_b_id = "-ain";
  std::vector<std::string> category_a = {" light", " night", " bright", " sight", " flight", " might", " tight", " fight"};
  std::vector<std::string> category_b = {" rain", " train", " plain", " pain", " gain", " main", " chain", " brain"};
  std::vector<std::string> cue_a;  // empty: same as category_a
  std::vector<std::string> cue_b;
  std::string marker_a = " soft";
  std::string marker_b = " cold";
  std::string lead_in = "In";
  std::vector<std::string> filler_starts = {"We", "The", "She", "They", "He"};
  std::vector<std::string> fillers = {" saw", " walked", " through", " the", " old", " quiet", " under",
                                      " far", " we", " kept", " found", " near", " deep", " slow"};
  std::vector<std::string> extra_texts;  // more text whose words become single tokens
  std::vector<float> plan_direction;     // empty: drawn from the seed
  std::size_t copy_layer = 1;
  std::size_t copy_head = 2;
  double logit_gap = 8.0;        // g: category gap carried by the plan
  double marker_strength = 4.0;  // category gap carried by the marker alone
  double noise = 0.02;
  std::uint64_t seed = 1;
  std::size_t model_dim = 32;
  std::size_t head_count = 4;
  std::size_t mlp_dim = 64;
  std::size_t max_context = 64;

  const std::vector<std::string>& cues_a() const { return cue_a.empty() ? category_a : cue_a; }
  const std::vector<std::string>& cues_b() const { return cue_b.empty() ? category_b : cue_b; }

  void validate() const {
    using namespace planted_layout;
    if (category_a.size() < 4 || category_b.size() < 4) throw Error("planted: each category needs >= 4 tokens");
    std::set<std::string> seen;
    auto claim = [&](const std::string& w, const char* what) {
      if (w.empty()) throw Error(std::string("planted: empty ") + what);
      if (!seen.insert(w).second) throw Error("planted: token '" + w + "' used twice (" + what + ")");
    };
    for (const auto& w : category_a) claim(w, "category A");
    for (const auto& w : category_b) claim(w, "category B");
    for (const auto& w : cue_a) {
      if (std::find(category_a.begin(), category_a.end(), w) == category_a.end()) claim(w, "cue A");
    }
    for (const auto& w : cue_b) {
      if (std::find(category_b.begin(), category_b.end(), w) == category_b.end()) claim(w, "cue B");
    }
    claim(marker_a, "marker A");
    claim(marker_b, "marker B");
    claim(lead_in, "lead-in");
    for (const auto& w : filler_starts) {
      if (seen.contains(w)) throw Error("planted: filler '" + w + "' collides with a planted token");
    }
    for (const auto& w : fillers) {
      if (seen.contains(w)) throw Error("planted: filler '" + w + "' collides with a planted token");
    }
    if (!(logit_gap >= 4.0)) throw Error("planted: logit gap must be >= 4");
    if (!(marker_strength >= 0.0)) throw Error("planted: marker strength must be >= 0");
    if (!(noise >= 0.0)) throw Error("planted: noise must be >= 0");
    if (head_count < 2 || model_dim % head_count != 0) throw Error("planted: model_dim must split into >= 2 heads");
    const std::size_t hd = model_dim / head_count;
    if (hd < 2) throw Error("planted: head_dim must be >= 2 to embed the construction");
    if (model_dim < kPlanBegin + 2) {
      throw Error("planted: model_dim " + std::to_string(model_dim) + " too small to embed the construction (need >= " +
                  std::to_string(kPlanBegin + 2) + ")");
    }
    if (copy_layer != 1 || copy_head >= head_count) throw Error("planted: copy head must be (1, h) with h < head_count");
    if (max_context < 16) throw Error("planted: max_context must be >= 16");
    if (!plan_direction.empty()) {
      if (plan_direction.size() != model_dim) throw Error("planted: plan direction length != model_dim");
      double n2 = 0;
      for (std::size_t i = 0; i < model_dim; ++i) {
        if (i < kPlanBegin && plan_direction[i] != 0.0f) throw Error("planted: plan direction must avoid reserved dims 0-8");
        n2 += static_cast<double>(plan_direction[i]) * plan_direction[i];
      }
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-5) throw Error("planted: plan direction must have unit norm");
    }
  }
};

struct GroundTruth {
  std::string category_a_id;
  std::string category_b_id;
  std::vector<float> direction;
  std::size_t plan_layer = 0;
  AnchorKind plan_anchor = AnchorKind::newline;
  std::size_t copy_layer = 1;
  std::size_t copy_head = 2;
  double plan_projection = 0.0;  // measured d . x at the plan site for an A cue
  double unembed_scale = 0.0;    // G: logit per unit of d . h
  double marker_embed = 0.0;     // marker embedding component along d
  TokenId lead_in = 0;
  TokenId marker_a = 0;
  TokenId marker_b = 0;
  std::vector<TokenId> category_a;
  std::vector<TokenId> category_b;
  std::vector<TokenId> cue_a;
  std::vector<TokenId> cue_b;

  // Expected mean-difference vector: (target - source) = -+2 alpha d.
  std::vector<float> expected_steering_vector(bool a_to_b) const {
    std::vector<float> out(direction.size());
    const double sign = a_to_b ? -2.0 : 2.0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(sign * plan_projection * direction[i]);
    return out;
  }

  // Category id suggested by the last cue token of a prompt, if any.
  std::optional<std::string> expected_category(std::span<const TokenId> prompt) const {
    for (std::size_t i = prompt.size(); i-- > 0;) {
      if (std::find(cue_a.begin(), cue_a.end(), prompt[i]) != cue_a.end()) return category_a_id;
      if (std::find(cue_b.begin(), cue_b.end(), prompt[i]) != cue_b.end()) return category_b_id;
    }
    return std::nullopt;
  }

  const std::vector<TokenId>& category_tokens(const std::string& id) const {
    if (id == category_a_id) return category_a;
    if (id == category_b_id) return category_b;
    throw Error("ground truth: unknown category '" + id + "'");
  }
  TokenId marker_for(const std::string& id) const {
    if (id == category_a_id) return marker_a;
    if (id == category_b_id) return marker_b;
    throw Error("ground truth: unknown category '" + id + "'");
  }
};

inline nlohmann::json ground_truth_to_json(const GroundTruth& t) {
  return {{"category_a", t.category_a_id},
          {"category_b", t.category_b_id},
          {"direction", t.direction},
          {"plan_layer", t.plan_layer},
          {"plan_anchor", std::string(anchor_name(t.plan_anchor))},
          {"copy_layer", t.copy_layer},
          {"copy_head", t.copy_head},
          {"plan_projection", t.plan_projection},
          {"unembed_scale", t.unembed_scale},
          {"marker_embed", t.marker_embed},
          {"lead_in", t.lead_in},
          {"marker_a", t.marker_a},
          {"marker_b", t.marker_b},
          {"category_a_tokens", t.category_a},
          {"category_b_tokens", t.category_b},
          {"cue_a_tokens", t.cue_a},
          {"cue_b_tokens", t.cue_b}};
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  GroundTruth t;
  t.category_a_id = j.at("category_a").get<std::string>();
  t.category_b_id = j.at("category_b").get<std::string>();
  t.direction = j.at("direction").get<std::vector<float>>();
  t.plan_layer = j.at("plan_layer").get<std::size_t>();
  t.plan_anchor = parse_anchor(j.at("plan_anchor").get<std::string>());
  t.copy_layer = j.at("copy_layer").get<std::size_t>();
  t.copy_head = j.at("copy_head").get<std::size_t>();
  t.plan_projection = j.at("plan_projection").get<double>();
  t.unembed_scale = j.at("unembed_scale").get<double>();
  t.marker_embed = j.at("marker_embed").get<double>();
  t.lead_in = j.at("lead_in").get<TokenId>();
  t.marker_a = j.at("marker_a").get<TokenId>();
  t.marker_b = j.at("marker_b").get<TokenId>();
  t.category_a = j.at("category_a_tokens").get<std::vector<TokenId>>();
  t.category_b = j.at("category_b_tokens").get<std::vector<TokenId>>();
  t.cue_a = j.at("cue_a_tokens").get<std::vector<TokenId>>();
  t.cue_b = j.at("cue_b_tokens").get<std::vector<TokenId>>();
  return t;
}

struct PlantedModel {
  Model model;
  Vocabulary vocab;
  GroundTruth truth;
};

// ---- dense oracle --------------------------------------------------------------

namespace oracle {

using Matrix = std::vector<std::vector<float>>;

inline Matrix matmul_t(const Matrix& x, const Tensor& w, const Tensor* b) {
  // x [n, in] times w^T, w stored [out, in]
  const std::size_t out_dim = w.shape[0], in_dim = w.shape[1];
  Matrix y(x.size(), std::vector<float>(out_dim));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      for (std::size_t c = 0; c < in_dim; ++c) acc += static_cast<double>(x[i][c]) * w.data[o * in_dim + c];
      if (b) acc += b->data[o];
      y[i][o] = static_cast<float>(acc);
    }
  }
  return y;
}

inline Matrix row_norm(const ModelSpec& s, const Matrix& x, const Tensor& g, const Tensor* b) {
  Matrix y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& r = x[i];
    const double n = static_cast<double>(r.size());
    if (s.norm_scheme == NormScheme::pre_rmsnorm) {
      double ms = 0;
      for (float v : r) ms += static_cast<double>(v) * v;
      const double scale = 1.0 / std::sqrt(ms / n + s.norm_eps);
      for (std::size_t c = 0; c < r.size(); ++c) y[i][c] = static_cast<float>(r[c] * scale * g.data[c]);
    } else {
      double mu = 0;
      for (float v : r) mu += v;
      mu /= n;
      double var = 0;
      for (float v : r) var += (v - mu) * (v - mu);
      const double scale = 1.0 / std::sqrt(var / n + s.norm_eps);
      for (std::size_t c = 0; c < r.size(); ++c) {
        y[i][c] = static_cast<float>((r[c] - mu) * scale * g.data[c] + (b ? b->data[c] : 0.0f));
      }
    }
  }
  return y;
}

inline float nonlinearity(Activation a, float v) {
  const double x = v;
  switch (a) {
    case Activation::gelu: {
      const double inner = std::sqrt(2.0 / 3.14159265358979323846) * (x + 0.044715 * std::pow(x, 3));
      return static_cast<float>(0.5 * x * (1.0 + std::tanh(inner)));
    }
    case Activation::silu: return static_cast<float>(x / (1.0 + std::exp(-x)));
  }
  return v;
}

inline void rotate(std::vector<float>& row, std::size_t offset, std::size_t hd, std::size_t position) {
  const std::size_t half = hd / 2;
  std::vector<float> out(hd);
  for (std::size_t i = 0; i < hd; ++i) {
    const std::size_t pair = i < half ? i : i - half;
    const double theta = static_cast<double>(position) / std::pow(10000.0, 2.0 * static_cast<double>(pair) / hd);
    const double a = row[offset + pair];
    const double b = row[offset + pair + half];
    out[i] = i < half ? static_cast<float>(a * std::cos(theta) - b * std::sin(theta))
                      : static_cast<float>(b * std::cos(theta) + a * std::sin(theta));
  }
  std::copy(out.begin(), out.end(), row.begin() + static_cast<std::ptrdiff_t>(offset));
}

}  // namespace oracle

// Same function as forward(), written as whole-sequence dense loops with no
// cache. Independent of the runtime's kernels.
inline std::vector<std::vector<float>> brute_force_logits(const Model& model, std::span<const TokenId> tokens,
                                                          const InterventionPlan& plan = {}) {
  using oracle::Matrix;
  const auto& s = model.spec;
  const auto& w = model.weights;
  s.validate();
  plan.validate(s);
  check_tokens(s, tokens);
  const std::size_t n = tokens.size(), d = s.model_dim, hd = s.head_dim;
  const bool ln = s.norm_scheme == NormScheme::pre_layernorm;
  auto opt = [&](const std::string& name) -> const Tensor* { return w.contains(name) ? &w.get(name) : nullptr; };

  Matrix x(n, std::vector<float>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      float v = w.get("tok_embed.weight").data[static_cast<std::size_t>(tokens[i]) * d + c];
      if (s.positional_scheme == PositionalScheme::learned) v += w.get("pos_embed.weight").data[i * d + c];
      x[i][c] = v;
    }
  }
  for (std::size_t l = 0; l < s.layer_count; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    const Matrix h = oracle::row_norm(s, x, w.get(p + "norm1.weight"), ln ? opt(p + "norm1.bias") : nullptr);
    Matrix q = oracle::matmul_t(h, w.get(p + "attn.q.weight"), opt(p + "attn.q.bias"));
    Matrix k = oracle::matmul_t(h, w.get(p + "attn.k.weight"), opt(p + "attn.k.bias"));
    const Matrix v = oracle::matmul_t(h, w.get(p + "attn.v.weight"), opt(p + "attn.v.bias"));
    if (s.positional_scheme == PositionalScheme::rotary) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t head = 0; head < s.head_count; ++head) {
          oracle::rotate(q[i], head * hd, hd, i);
          oracle::rotate(k[i], head * hd, hd, i);
        }
      }
    }
    Matrix concat(n, std::vector<float>(d, 0.0f));
    for (std::size_t head = 0; head < s.head_count; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        if (const auto* patch = plan.find_patch(l, head, i)) {
          for (std::size_t c = 0; c < hd; ++c) concat[i][head * hd + c] = patch->replacement[c];
          continue;
        }
        // Masked scores over every key; future and ablated keys get weight 0.
        std::vector<double> weight(n, 0.0);
        double top = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          if (plan.blocks(l, i, j)) continue;
          double dot = 0;
          for (std::size_t c = 0; c < hd; ++c) dot += static_cast<double>(q[i][head * hd + c]) * k[j][head * hd + c];
          weight[j] = dot / std::sqrt(static_cast<double>(hd));
          top = std::max(top, weight[j]);
        }
        if (top == -INFINITY) throw Error("oracle: every key blocked for query " + std::to_string(i));
        double z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          weight[j] = plan.blocks(l, i, j) ? 0.0 : std::exp(weight[j] - top);
          z += weight[j];
        }
        for (std::size_t c = 0; c < hd; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j <= i; ++j) acc += weight[j] / z * v[j][head * hd + c];
          concat[i][head * hd + c] = static_cast<float>(acc);
        }
      }
    }
    const Matrix attn = oracle::matmul_t(concat, w.get(p + "attn.o.weight"), opt(p + "attn.o.bias"));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) x[i][c] += attn[i][c];
    }
    const Matrix h2 = oracle::row_norm(s, x, w.get(p + "norm2.weight"), ln ? opt(p + "norm2.bias") : nullptr);
    Matrix up = oracle::matmul_t(h2, w.get(p + "mlp.up.weight"), opt(p + "mlp.up.bias"));
    if (s.gated_mlp) {
      const Matrix gate = oracle::matmul_t(h2, w.get(p + "mlp.gate.weight"), opt(p + "mlp.gate.bias"));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < s.mlp_dim; ++c) up[i][c] = oracle::nonlinearity(s.activation, gate[i][c]) * up[i][c];
      }
    } else {
      for (auto& row : up) {
        for (auto& u : row) u = oracle::nonlinearity(s.activation, u);
      }
    }
    const Matrix down = oracle::matmul_t(up, w.get(p + "mlp.down.weight"), opt(p + "mlp.down.bias"));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) x[i][c] += down[i][c];
      if (const auto* add = plan.find_residual(l, i)) {
        for (std::size_t c = 0; c < d; ++c) x[i][c] += add->multiplier * add->vector[c];
      }
    }
  }
  const Matrix hf = oracle::row_norm(s, x, w.get("final_norm.weight"), ln ? opt("final_norm.bias") : nullptr);
  const Tensor& out = s.tied_embeddings ? w.get("tok_embed.weight") : w.get("lm_head.weight");
  return oracle::matmul_t(hf, out, opt("lm_head.bias"));
}

// max |a - b| <= tol * max(1, max |b|), row by row.
inline bool logits_match(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b,
                         double tol, double* worst = nullptr) {
  if (a.size() != b.size()) return false;
  double w = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    double scale = 1.0, diff = 0.0;
    for (std::size_t c = 0; c < a[i].size(); ++c) {
      scale = std::max(scale, std::abs(static_cast<double>(b[i][c])));
      diff = std::max(diff, std::abs(static_cast<double>(a[i][c]) - b[i][c]));
    }
    w = std::max(w, diff / scale);
  }
  if (worst) *worst = w;
  return w <= tol;
}

// Copy of the model with one attention head's q/k/v rows and o columns zeroed.
inline Model without_head(const Model& m, std::size_t layer, std::size_t head) {
  if (layer >= m.spec.layer_count || head >= m.spec.head_count) throw Error("without_head: out of range");
  auto tensors = m.weights.all();
  const std::string p = "blocks." + std::to_string(layer) + ".attn.";
  const std::size_t hd = m.spec.head_dim, d = m.spec.model_dim;
  for (const char* name : {"q", "k", "v"}) {
    auto& wt = tensors[p + name + ".weight"];
    auto& bt = tensors[p + name + ".bias"];
    for (std::size_t r = head * hd; r < (head + 1) * hd; ++r) {
      std::fill(wt.row(r), wt.row(r) + d, 0.0f);
      bt.data[r] = 0.0f;
    }
  }
  auto& o = tensors[p + "o.weight"];
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = head * hd; c < (head + 1) * hd; ++c) o.row(r)[c] = 0.0f;
  }
  return Model{m.spec, WeightStore::create(m.spec, std::move(tensors))};
}

// ---- construction ----------------------------------------------------------------

namespace detail {

struct PlantedParams {
  double unembed_scale = 1.0;
  double marker_embed = 0.0;
};

inline std::vector<float> plan_direction(const PlantedSpec& spec) {
  if (!spec.plan_direction.empty()) return spec.plan_direction;
  std::mt19937_64 rng(splitmix64(spec.seed ^ 0x706c616eULL));
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(spec.model_dim, 0.0);
  double norm = 0;
  for (std::size_t i = planted_layout::kPlanBegin; i < spec.model_dim; ++i) {
    v[i] = n(rng);
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  std::vector<float> out(spec.model_dim, 0.0f);
  for (std::size_t i = 0; i < spec.model_dim; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

inline Vocabulary planted_vocabulary(const PlantedSpec& spec) {
  std::set<std::string> words;
  auto add_text = [&](std::string_view text) {
    for (auto& chunk : pretokenize(text)) {
      if (has_letter(chunk) && chunk.size() >= 2) words.insert(chunk);
    }
  };
  add_text(kRhymePreamble);
  for (const auto* list : {&spec.category_a, &spec.category_b, &spec.cue_a, &spec.cue_b, &spec.filler_starts,
                           &spec.fillers, &spec.extra_texts}) {
    for (const auto& w : *list) add_text(w);
  }
  for (const auto* w : {&spec.marker_a, &spec.marker_b, &spec.lead_in}) add_text(*w);
  return make_word_vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

inline TokenId single_token(const Vocabulary& vocab, const std::string& word) {
  const auto ids = vocab.encode(word);
  if (ids.size() != 1) throw Error("planted: '" + word + "' is not a single token");
  return ids[0];
}

inline Model assemble(const PlantedSpec& spec, const Vocabulary& vocab, const GroundTruth& roles,
                      const std::vector<float>& dir, const PlantedParams& params) {
  using namespace planted_layout;
  ModelSpec ms;
  ms.layer_count = 2;
  ms.head_count = spec.head_count;
  ms.model_dim = spec.model_dim;
  ms.head_dim = spec.model_dim / spec.head_count;
  ms.mlp_dim = spec.mlp_dim;
  ms.vocab_size = vocab.size();
  ms.max_context = spec.max_context;
  ms.positional_scheme = PositionalScheme::learned;
  ms.norm_scheme = NormScheme::pre_rmsnorm;
  ms.activation = Activation::gelu;
  ms.tied_embeddings = false;
  const std::size_t D = ms.model_dim, hd = ms.head_dim, V = ms.vocab_size;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise));
  std::map<std::string, Tensor> t;
  for (const auto& shape : canonical_tensors(ms)) t.emplace(shape.name, Tensor(shape.shape));
  auto fill_noise = [&](Tensor& x) {
    for (auto& v : x.data) v = noise(rng);
  };

  // With the constant dimension dominating, RMS normalization is close to the
  // identity when every gain is the typical residual RMS.
  const float gain = std::sqrt((kConstValue * kConstValue + 2.0f) / static_cast<float>(D));

  const std::set<TokenId> cue_a(roles.cue_a.begin(), roles.cue_a.end());
  const std::set<TokenId> cue_b(roles.cue_b.begin(), roles.cue_b.end());
  const std::set<TokenId> cat_a(roles.category_a.begin(), roles.category_a.end());
  const std::set<TokenId> cat_b(roles.category_b.begin(), roles.category_b.end());
  const TokenId newline = single_token(vocab, "\n");

  Tensor& emb = t["tok_embed.weight"];
  for (std::size_t id = 0; id < V; ++id) {
    float* e = emb.row(id);
    // Reserved dims stay exact: the designed heads read them as flags.
    for (std::size_t c = kPlanBegin; c < D; ++c) e[c] = noise(rng);
    double along = 0;
    for (std::size_t c = 0; c < D; ++c) along += static_cast<double>(e[c]) * dir[c];
    for (std::size_t c = 0; c < D; ++c) e[c] -= static_cast<float>(along * dir[c]);
    e[kConst] = kConstValue;
    const auto tok = static_cast<TokenId>(id);
    const bool is_cue = cue_a.contains(tok) || cue_b.contains(tok);
    if (is_cue) {
      e[kIsCue] = 1.0f;
      e[kCueSign] = cue_a.contains(tok) ? 1.0f : -1.0f;
    } else {
      e[kNonCue] = 1.0f;
    }
    if (tok == newline) e[kNewline] = 1.0f;
    if (tok == roles.lead_in) e[kLead] = 1.0f;
    if (tok == roles.marker_a || tok == roles.marker_b) {
      e[kMarker] = 1.0f;
      const float sign = tok == roles.marker_a ? 1.0f : -1.0f;
      for (std::size_t c = kPlanBegin; c < D; ++c) e[c] += sign * static_cast<float>(params.marker_embed) * dir[c];
    }
    if (cat_a.contains(tok) || cat_b.contains(tok)) e[kCategory] = 1.0f;
  }
  fill_noise(t["pos_embed.weight"]);

  // Noise never writes along d: rows of the embeddings and columns of every
  // residual-writing matrix are projected off it, so only the designed heads
  // carry the plan.
  auto project_rows = [&](Tensor& x) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      float* row = x.row(r);
      double along = 0;
      for (std::size_t c = 0; c < D; ++c) along += static_cast<double>(row[c]) * dir[c];
      for (std::size_t c = 0; c < D; ++c) row[c] -= static_cast<float>(along * dir[c]);
    }
  };
  auto project_columns = [&](Tensor& x) {
    for (std::size_t col = 0; col < x.cols(); ++col) {
      double along = 0;
      for (std::size_t r = 0; r < D; ++r) along += static_cast<double>(x.row(r)[col]) * dir[r];
      for (std::size_t r = 0; r < D; ++r) x.row(r)[col] -= static_cast<float>(along * dir[r]);
    }
  };
  project_rows(t["pos_embed.weight"]);
  for (std::size_t r = 0; r < ms.max_context; ++r) std::fill(t["pos_embed.weight"].row(r), t["pos_embed.weight"].row(r) + kPlanBegin, 0.0f);

  for (std::size_t l = 0; l < 2; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    t[p + "norm1.weight"] = Tensor({D}, gain);
    t[p + "norm2.weight"] = Tensor({D}, gain);
    for (const char* name : {"attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight", "mlp.up.weight",
                             "mlp.down.weight"}) {
      fill_noise(t[p + name]);
    }
    project_columns(t[p + "attn.o.weight"]);
    project_columns(t[p + "mlp.down.weight"]);
  }
  auto clear_head = [&](std::size_t layer, std::size_t head) {
    const std::string p = "blocks." + std::to_string(layer) + ".attn.";
    for (const char* name : {"q", "k", "v"}) {
      auto& w = t[p + name + ".weight"];
      for (std::size_t r = head * hd; r < (head + 1) * hd; ++r) std::fill(w.row(r), w.row(r) + D, 0.0f);
    }
    auto& o = t[p + "o.weight"];
    for (std::size_t r = 0; r < D; ++r) {
      for (std::size_t c = head * hd; c < (head + 1) * hd; ++c) o.row(r)[c] = 0.0f;
    }
  };

  // Layer 0, head 0: a newline query looks at cue keys; any other query looks
  // at non-cue keys, so the cue sign only lands on the newline.
  clear_head(0, 0);
  {
    auto& q = t["blocks.0.attn.q.weight"];
    auto& k = t["blocks.0.attn.k.weight"];
    auto& v = t["blocks.0.attn.v.weight"];
    auto& o = t["blocks.0.attn.o.weight"];
    q.row(0)[kNewline] = kScoreScale;
    q.row(1)[kConst] = kScoreScale / kConstValue;
    q.row(1)[kNewline] = -kScoreScale;
    k.row(0)[kIsCue] = 1.0f;
    k.row(1)[kNonCue] = 1.0f;
    v.row(0)[kCueSign] = 1.0f;
    v.row(1)[kIsCue] = 1.0f;
    for (std::size_t c = kPlanBegin; c < D; ++c) o.row(c)[0] = kAlpha * dir[c];
    o.row(kFlag)[1] = 1.0f;
  }
  // Layer 1 copy head: a constant query finds the flagged newline and copies
  // its d component.
  clear_head(1, spec.copy_head);
  {
    const std::size_t base = spec.copy_head * hd;
    auto& q = t["blocks.1.attn.q.weight"];
    auto& k = t["blocks.1.attn.k.weight"];
    auto& v = t["blocks.1.attn.v.weight"];
    auto& o = t["blocks.1.attn.o.weight"];
    q.row(base)[kConst] = kScoreScale / kConstValue;
    k.row(base)[kFlag] = 1.0f;
    for (std::size_t c = kPlanBegin; c < D; ++c) {
      v.row(base)[c] = dir[c];
      o.row(c)[base] = dir[c];
    }
  }

  t["final_norm.weight"] = Tensor({D}, gain);
  Tensor& head = t["lm_head.weight"];
  fill_noise(head);
  auto type_row = [&](TokenId id, std::size_t type_dim, float plan_sign) {
    float* r = head.row(static_cast<std::size_t>(id));
    r[kConst] = 0.0f;  // no constant offset between competing designed tokens
    r[type_dim] += kTypeLogit;
    for (std::size_t c = kPlanBegin; c < D; ++c) r[c] += plan_sign * static_cast<float>(params.unembed_scale) * dir[c];
  };
  type_row(roles.lead_in, kNewline, 0.0f);
  type_row(roles.marker_a, kLead, 1.0f);
  type_row(roles.marker_b, kLead, -1.0f);
  for (auto id : roles.category_a) type_row(id, kMarker, 1.0f);
  for (auto id : roles.category_b) type_row(id, kMarker, -1.0f);
  type_row(newline, kCategory, 0.0f);

  return Model{ms, WeightStore::create(ms, std::move(t))};
}

inline double mean_logit(const std::vector<float>& logits, const std::vector<TokenId>& ids) {
  double s = 0;
  for (auto id : ids) s += logits[static_cast<std::size_t>(id)];
  return s / static_cast<double>(ids.size());
}

}  // namespace detail

// Cue lines `<Start> <fillers...> <cue>` under the rhyme preamble.
inline std::string planted_line(const PlantedSpec& spec, std::mt19937_64& rng, const std::string& cue) {
  std::string line = spec.filler_starts[rng() % spec.filler_starts.size()];
  const std::size_t extra = 1 + rng() % 3;
  for (std::size_t i = 0; i < extra; ++i) line += spec.fillers[rng() % spec.fillers.size()];
  return line + cue;
}

// Rhyme-style dataset for the planted model: lexicons are the category words.
inline Dataset planted_dataset(const PlantedSpec& spec, std::size_t train_per_category = 8,
                               std::size_t test_per_category = 20, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.id = "planted";
  d.task = TaskKind::rhyme;
  d.prompt_template = PromptTemplate::rhyme();
  auto make = [&](const std::string& id, const std::vector<std::string>& words, const std::vector<std::string>& cues) {
    PromptCategory c;
    c.id = id;
    c.kind = CategoryKind::rhyme_family;
    for (const auto& w : words) c.lexicon.insert(lowercase(trim(w)));
    std::set<std::string> used;
    auto draw = [&](std::vector<std::string>& into, std::size_t n) {
      std::size_t guard = 0;
      while (into.size() < n) {
        if (++guard > 100000) throw Error("planted_dataset: cannot draw enough distinct lines");
        auto line = planted_line(spec, rng, cues[rng() % cues.size()]);
        if (used.insert(line).second) into.push_back(std::move(line));
      }
    };
    draw(c.train_prompts, train_per_category);
    draw(c.test_prompts, test_per_category);
    return c;
  };
  d.categories.push_back(make(spec.category_a_id, spec.category_a, spec.cues_a()));
  d.categories.push_back(make(spec.category_b_id, spec.category_b, spec.cues_b()));
  d.pairs = {{spec.category_a_id, spec.category_b_id}, {spec.category_b_id, spec.category_a_id}};
  d.markers = {{spec.category_a_id, {lowercase(trim(spec.marker_a))}},
               {spec.category_b_id, {lowercase(trim(spec.marker_b))}}};
  return d;
}

inline PlantedModel build_planted_model(const PlantedSpec& spec) {
  using namespace planted_layout;
  spec.validate();
  PlantedModel out;
  out.vocab = detail::planted_vocabulary(spec);
  const auto dir = detail::plan_direction(spec);
  GroundTruth& truth = out.truth;
  truth.category_a_id = spec.category_a_id;
  truth.category_b_id = spec.category_b_id;
  truth.direction = dir;
  truth.copy_layer = spec.copy_layer;
  truth.copy_head = spec.copy_head;
  const auto& vocab = out.vocab;
  truth.lead_in = detail::single_token(vocab, spec.lead_in);
  truth.marker_a = detail::single_token(vocab, spec.marker_a);
  truth.marker_b = detail::single_token(vocab, spec.marker_b);
  for (const auto& w : spec.category_a) truth.category_a.push_back(detail::single_token(vocab, w));
  for (const auto& w : spec.category_b) truth.category_b.push_back(detail::single_token(vocab, w));
  for (const auto& w : spec.cues_a()) truth.cue_a.push_back(detail::single_token(vocab, w));
  for (const auto& w : spec.cues_b()) truth.cue_b.push_back(detail::single_token(vocab, w));

  // Calibration prompts: fixed cue lines, one per cue word.
  std::mt19937_64 rng(splitmix64(spec.seed ^ 0x63616c6962ULL));
  std::vector<Tokens> prompts_a, prompts_b;
  for (const auto& cue : spec.cues_a()) {
    prompts_a.push_back(vocab.encode(build_prompt(PromptTemplate::rhyme(), planted_line(spec, rng, cue))));
  }
  for (const auto& cue : spec.cues_b()) {
    prompts_b.push_back(vocab.encode(build_prompt(PromptTemplate::rhyme(), planted_line(spec, rng, cue))));
  }
  auto with = [](Tokens t, std::initializer_list<TokenId> more) {
    t.insert(t.end(), more.begin(), more.end());
    return t;
  };

  // Logits are linear in the unembedding, so one probe at scale 1 fixes G.
  detail::PlantedParams params;
  {
    const Model probe = detail::assemble(spec, vocab, truth, dir, params);
    double gap = 0;
    for (const auto& p : prompts_a) {
      const auto l = forward(probe, with(p, {truth.lead_in})).logits.back();
      gap += detail::mean_logit(l, truth.category_a) - detail::mean_logit(l, truth.category_b);
    }
    for (const auto& p : prompts_b) {
      const auto l = forward(probe, with(p, {truth.lead_in})).logits.back();
      gap -= detail::mean_logit(l, truth.category_a) - detail::mean_logit(l, truth.category_b);
    }
    gap /= static_cast<double>(prompts_a.size() + prompts_b.size());
    if (!(gap > 0)) throw Error("planted: calibration failed (plan does not reach the unembedding)");
    params.unembed_scale = spec.logit_gap / gap;
  }
  // Marker component: the regeneration gap is close to linear in it; a few
  // secant steps absorb the normalization.
  if (spec.marker_strength > 0) {
    auto measure = [&](double m) {
      detail::PlantedParams trial = params;
      trial.marker_embed = m;
      const Model probe = detail::assemble(spec, vocab, truth, dir, trial);
      const auto la = forward(probe, Tokens{truth.lead_in, truth.marker_a}).logits.back();
      const auto lb = forward(probe, Tokens{truth.lead_in, truth.marker_b}).logits.back();
      const double ga = detail::mean_logit(la, truth.category_a) - detail::mean_logit(la, truth.category_b);
      const double gb = detail::mean_logit(lb, truth.category_a) - detail::mean_logit(lb, truth.category_b);
      return (ga - gb) / 2.0;
    };
    const double base = measure(0.0);
    double m = 0.5;
    for (int iter = 0; iter < 4; ++iter) {
      const double got = measure(m) - base;
      if (!(got > 0)) throw Error("planted: marker calibration failed");
      m *= spec.marker_strength / got;
    }
    params.marker_embed = m;
  }
  out.model = detail::assemble(spec, vocab, truth, dir, params);
  truth.unembed_scale = params.unembed_scale;
  truth.marker_embed = params.marker_embed;

  // Plan projection actually present at the plan site.
  double proj = 0;
  std::size_t count = 0;
  for (const auto* set : {&prompts_a, &prompts_b}) {
    const double sign = set == &prompts_a ? 1.0 : -1.0;
    for (const auto& p : *set) {
      const auto r = forward(out.model, p, {}, {.residual = true});
      const auto& x = r.residual.at(0, p.size() - 1);
      double dp = 0;
      for (std::size_t c = 0; c < dir.size(); ++c) dp += static_cast<double>(x[c]) * dir[c];
      proj += sign * dp;
      ++count;
    }
  }
  truth.plan_projection = proj / static_cast<double>(count);
  truth.plan_layer = 0;
  truth.plan_anchor = AnchorKind::newline;
  return out;
}

// Exact probability, along the planted lead-in path, that the second line ends
// in `category`: sum over both markers of P(marker) * P(category | marker),
// each renormalized over the competing token set.
inline double category_probability(const Model& model, const GroundTruth& truth, const Tokens& prompt,
                                   const std::string& category, const InterventionPlan& plan = {}) {
  Tokens seq = prompt;
  seq.push_back(truth.lead_in);
  const auto marker_logits = forward(model, seq, plan).logits.back();
  const auto pm = kernels::softmax(marker_logits);
  const double pa = pm[static_cast<std::size_t>(truth.marker_a)];
  const double pb = pm[static_cast<std::size_t>(truth.marker_b)];
  const auto& want = truth.category_tokens(category);
  double total = 0;
  for (const TokenId marker : {truth.marker_a, truth.marker_b}) {
    Tokens s2 = seq;
    s2.push_back(marker);
    const auto p = kernels::softmax(forward(model, s2, plan).logits.back());
    double hit = 0, all = 0;
    for (auto id : truth.category_a) all += p[static_cast<std::size_t>(id)];
    for (auto id : truth.category_b) all += p[static_cast<std::size_t>(id)];
    for (auto id : want) hit += p[static_cast<std::size_t>(id)];
    total += (marker == truth.marker_a ? pa : pb) / (pa + pb) * (hit / all);
  }
  return total;
}

inline void save_planted(const std::filesystem::path& dir, const PlantedModel& pm, const nlohmann::json& extra = {}) {
  nlohmann::json meta = {{"kind", "planted_model"}, {"ground_truth", ground_truth_to_json(pm.truth)}};
  if (!extra.is_null()) meta["build"] = extra;
  save_container(dir / "model.plnl", model_to_container(pm.model, meta));
  pm.vocab.save(dir);
  write_file(dir / "ground_truth.json", ground_truth_to_json(pm.truth).dump(2) + "\n");
}

}  // namespace planlab
