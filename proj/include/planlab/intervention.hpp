#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "json.hpp"
#include "planlab/anchors.hpp"
#include "planlab/model_spec.hpp"
#include "planlab/util.hpp"

namespace planlab {

// Adds multiplier * vector to the residual leaving block `layer` at `position`.
struct ResidualAdd {
  std::size_t layer = 0;
  std::size_t position = 0;
  std::vector<float> vector;
  float multiplier = 1.0f;
  bool operator==(const ResidualAdd&) const = default;
};

// Replaces one head's output (pre output-projection) at one position.
struct HeadOutputPatch {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t position = 0;
  std::vector<float> replacement;
  bool operator==(const HeadOutputPatch&) const = default;
};

// Masks attention to the given key positions from every later query. An empty
// layer set means all layers.
struct AttentionAblation {
  std::set<std::size_t> blocked_key_positions;
  bool include_self = false;
  std::set<std::size_t> layers;
  bool operator==(const AttentionAblation&) const = default;

  bool blocks(std::size_t layer, std::size_t query, std::size_t key) const {
    if (!layers.empty() && !layers.contains(layer)) return false;
    if (!blocked_key_positions.contains(key)) return false;
    return include_self ? query >= key : query > key;
  }
};

using Intervention = std::variant<ResidualAdd, HeadOutputPatch, AttentionAblation>;

class InterventionPlan {
 public:
  InterventionPlan() = default;

  InterventionPlan& add(Intervention iv) {
    if (const auto* r = std::get_if<ResidualAdd>(&iv)) {
      if (find_residual(r->layer, r->position) != nullptr) {
        throw Error("plan: more than one residual addition at layer " + std::to_string(r->layer) + ", position " +
                    std::to_string(r->position));
      }
    }
    items_.push_back(std::move(iv));
    return *this;
  }

  const std::vector<Intervention>& items() const { return items_; }
  bool empty() const { return items_.empty(); }

  const ResidualAdd* find_residual(std::size_t layer, std::size_t position) const {
    for (const auto& iv : items_) {
      if (const auto* r = std::get_if<ResidualAdd>(&iv); r && r->layer == layer && r->position == position) return r;
    }
    return nullptr;
  }

  const HeadOutputPatch* find_patch(std::size_t layer, std::size_t head, std::size_t position) const {
    const HeadOutputPatch* found = nullptr;
    for (const auto& iv : items_) {
      if (const auto* p = std::get_if<HeadOutputPatch>(&iv);
          p && p->layer == layer && p->head == head && p->position == position) {
        found = p;  // last one wins
      }
    }
    return found;
  }

  bool blocks(std::size_t layer, std::size_t query, std::size_t key) const {
    for (const auto& iv : items_) {
      if (const auto* a = std::get_if<AttentionAblation>(&iv); a && a->blocks(layer, query, key)) return true;
    }
    return false;
  }

  bool has_ablation() const {
    for (const auto& iv : items_) {
      if (std::holds_alternative<AttentionAblation>(iv)) return true;
    }
    return false;
  }

  void validate(const ModelSpec& spec) const {
    auto range = [](std::size_t v, std::size_t bound, const char* what) {
      if (v >= bound) {
        throw Error(std::string("plan: ") + what + " " + std::to_string(v) + " out of range (limit " +
                    std::to_string(bound) + ")");
      }
    };
    for (const auto& iv : items_) {
      if (const auto* r = std::get_if<ResidualAdd>(&iv)) {
        range(r->layer, spec.layer_count, "layer");
        range(r->position, spec.max_context, "position");
        if (r->vector.size() != spec.model_dim) throw Error("plan: residual vector length != model_dim");
      } else if (const auto* p = std::get_if<HeadOutputPatch>(&iv)) {
        range(p->layer, spec.layer_count, "layer");
        range(p->head, spec.head_count, "head");
        range(p->position, spec.max_context, "position");
        if (p->replacement.size() != spec.head_dim) throw Error("plan: head patch length != head_dim");
      } else if (const auto* a = std::get_if<AttentionAblation>(&iv)) {
        for (auto k : a->blocked_key_positions) range(k, spec.max_context, "position");
        for (auto l : a->layers) range(l, spec.layer_count, "layer");
      }
    }
  }

 private:
  std::vector<Intervention> items_;
};

// Union of two plans. Residual additions at the same site are merged into a
// single addition of the summed scaled vectors (multiplier 1).
inline InterventionPlan compose(const InterventionPlan& a, const InterventionPlan& b) {
  InterventionPlan out;
  std::map<std::pair<std::size_t, std::size_t>, ResidualAdd> merged;
  std::vector<std::pair<std::size_t, std::size_t>> order;
  auto absorb = [&](const InterventionPlan& p) {
    for (const auto& iv : p.items()) {
      if (const auto* r = std::get_if<ResidualAdd>(&iv)) {
        auto key = std::make_pair(r->layer, r->position);
        std::vector<float> scaled(r->vector.size());
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = r->multiplier * r->vector[i];
        auto it = merged.find(key);
        if (it == merged.end()) {
          merged.emplace(key, ResidualAdd{r->layer, r->position, std::move(scaled), 1.0f});
          order.push_back(key);
        } else {
          if (it->second.vector.size() != scaled.size()) throw Error("compose: residual vector length mismatch");
          for (std::size_t i = 0; i < scaled.size(); ++i) it->second.vector[i] += scaled[i];
        }
      } else {
        out.add(iv);
      }
    }
  };
  absorb(a);
  absorb(b);
  for (const auto& key : order) out.add(merged.at(key));
  return out;
}

// (layer, head, position) -> head output vector.
using HeadKey = std::tuple<std::size_t, std::size_t, std::size_t>;
using ActivationSnapshot = std::map<HeadKey, std::vector<float>>;

inline InterventionPlan patch_plan(const ActivationSnapshot& snapshot) {
  InterventionPlan plan;
  for (const auto& [key, vec] : snapshot) {
    const auto& [layer, head, position] = key;
    plan.add(HeadOutputPatch{layer, head, position, vec});
  }
  return plan;
}

inline InterventionPlan attention_ablation_plan(std::set<std::size_t> blocked, bool include_self = false,
                                                std::set<std::size_t> layers = {}) {
  InterventionPlan plan;
  plan.add(AttentionAblation{std::move(blocked), include_self, std::move(layers)});
  return plan;
}

inline double logit_difference(std::span<const float> logits, TokenId a, TokenId b) {
  const auto n = static_cast<TokenId>(logits.size());
  if (a < 0 || a >= n || b < 0 || b >= n) throw Error("logit_difference: token id out of range");
  return static_cast<double>(logits[static_cast<std::size_t>(a)]) - static_cast<double>(logits[static_cast<std::size_t>(b)]);
}

// Share of the steering-induced logit difference reproduced by a patch, in percent.
inline double patch_recovery_percentage(double unsteered, double patched, double steered) {
  const double denom = steered - unsteered;
  if (denom == 0.0) throw Error("patch_recovery_percentage: steered == unsteered");
  return 100.0 * (patched - unsteered) / denom;
}

inline long rounded_recovery_percentage(double unsteered, double patched, double steered) {
  return std::lround(patch_recovery_percentage(unsteered, patched, steered));
}

// JSON, variant-tagged by "type".
inline void to_json(nlohmann::json& j, const Intervention& iv) {
  if (const auto* r = std::get_if<ResidualAdd>(&iv)) {
    j = {{"type", "residual_add"}, {"layer", r->layer}, {"position", r->position}, {"vector", r->vector},
         {"multiplier", r->multiplier}};
  } else if (const auto* p = std::get_if<HeadOutputPatch>(&iv)) {
    j = {{"type", "head_output_patch"}, {"layer", p->layer}, {"head", p->head}, {"position", p->position},
         {"replacement", p->replacement}};
  } else {
    const auto& a = std::get<AttentionAblation>(iv);
    j = {{"type", "attention_ablation"}, {"blocked_key_positions", a.blocked_key_positions},
         {"include_self", a.include_self}, {"layers", a.layers}};
  }
}

inline void from_json(const nlohmann::json& j, Intervention& iv) {
  const auto type = j.at("type").get<std::string>();
  if (type == "residual_add") {
    iv = ResidualAdd{j.at("layer").get<std::size_t>(), j.at("position").get<std::size_t>(),
                     j.at("vector").get<std::vector<float>>(), j.at("multiplier").get<float>()};
  } else if (type == "head_output_patch") {
    iv = HeadOutputPatch{j.at("layer").get<std::size_t>(), j.at("head").get<std::size_t>(),
                         j.at("position").get<std::size_t>(), j.at("replacement").get<std::vector<float>>()};
  } else if (type == "attention_ablation") {
    iv = AttentionAblation{j.at("blocked_key_positions").get<std::set<std::size_t>>(), j.value("include_self", false),
                           j.value("layers", std::set<std::size_t>{})};
  } else {
    throw ValidationError("plan: unknown intervention type '" + type + "'");
  }
}

inline nlohmann::json plan_to_json(const InterventionPlan& plan) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& iv : plan.items()) arr.push_back(iv);
  return {{"interventions", arr}};
}

inline InterventionPlan plan_from_json(const nlohmann::json& j) {
  InterventionPlan plan;
  for (const auto& item : j.at("interventions")) plan.add(item.get<Intervention>());
  return plan;
}

}  // namespace planlab
