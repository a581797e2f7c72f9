#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "planlab/runtime.hpp"

namespace planlab {

struct RolloutConfig {
  double temperature = 1.0;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  std::size_t max_new_tokens = 24;
  bool stop_on_newline = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature >= 0.0)) throw Error("rollout: temperature must be >= 0");
    if (top_k && top_p) throw Error("rollout: at most one of top_k / top_p may be set");
    if (top_k && *top_k == 0) throw Error("rollout: top_k must be positive");
    if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw Error("rollout: top_p must lie in (0, 1]");
    if (max_new_tokens == 0) throw Error("rollout: max_new_tokens must be positive");
  }
};

inline TokenId argmax(std::span<const float> logits) {
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Uniform double in [0, 1) from the top 53 bits; portable across standard libraries.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline TokenId sample_token(std::span<const float> logits, const RolloutConfig& config, std::mt19937_64& rng) {
  if (config.temperature == 0.0) return argmax(logits);
  auto probs = kernels::softmax(logits, config.temperature);
  if (config.top_k || config.top_p) {
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    std::size_t keep = order.size();
    if (config.top_k) {
      keep = std::min(keep, *config.top_k);
    } else {
      double cum = 0.0;
      for (std::size_t i = 0; i < order.size(); ++i) {
        cum += probs[order[i]];
        if (cum >= *config.top_p) {
          keep = i + 1;
          break;
        }
      }
    }
    std::vector<double> filtered(probs.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
      filtered[order[i]] = probs[order[i]];
      total += probs[order[i]];
    }
    for (auto& p : filtered) p /= total;
    probs = std::move(filtered);
  }
  const double u = uniform01(rng);
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = i;
    cum += probs[i];
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_positive);
}

// Continues an already-prefilled session. Returns only the new tokens.
inline Tokens sample_from(Session session, std::vector<float> last_logits, const RolloutConfig& config,
                          std::span<const TokenId> stop_tokens) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Tokens out;
  std::vector<float> logits = std::move(last_logits);
  while (out.size() < config.max_new_tokens) {
    const TokenId next = sample_token(logits, config, rng);
    out.push_back(next);
    if (config.stop_on_newline && std::find(stop_tokens.begin(), stop_tokens.end(), next) != stop_tokens.end()) break;
    if (out.size() == config.max_new_tokens || session.length() >= session.spec().max_context) break;
    logits = session.append(next);
  }
  return out;
}

// A prompt consumed once; sample as many continuations from it as needed.
class PrefilledPrompt {
 public:
  PrefilledPrompt(const Model& model, std::span<const TokenId> prompt, const InterventionPlan& plan = {})
      : session_(model, plan) {
    if (prompt.empty()) throw Error("sample_completion: empty prompt");
    check_tokens(model.spec, prompt);
    for (auto t : prompt) last_ = session_.append(t);
  }

  Tokens sample(const RolloutConfig& config, std::span<const TokenId> stop_tokens) const {
    return sample_from(session_, last_, config, stop_tokens);
  }

 private:
  Session session_;
  std::vector<float> last_;
};

inline Tokens sample_completion(const Model& model, std::span<const TokenId> prompt, const RolloutConfig& config,
                                const InterventionPlan& plan = {}, std::span<const TokenId> stop_tokens = {}) {
  return PrefilledPrompt(model, prompt, plan).sample(config, stop_tokens);
}

}  // namespace planlab
