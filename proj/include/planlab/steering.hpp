#pragma once

// Mean-difference steering vectors, their application at one anchor, and the
// layer/anchor sweep used to pick where to steer.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "planlab/anchors.hpp"
#include "planlab/container.hpp"
#include "planlab/intervention.hpp"
#include "planlab/parallel.hpp"
#include "planlab/runtime.hpp"
#include "planlab/tokenizer.hpp"

namespace planlab {

inline constexpr float kDefaultMultiplier = 1.5f;

struct SteeringVector {
  std::vector<float> values;
  std::size_t layer = 0;
  AnchorKind anchor = AnchorKind::newline;
  float multiplier = kDefaultMultiplier;
  std::string source_category;
  std::string target_category;
  std::string train_hash;

  void validate() const {
    if (values.empty()) throw Error("steering vector: empty");
    for (float v : values) {
      if (!std::isfinite(v)) throw Error("steering vector: non-finite entry");
    }
    if (!(multiplier > 0.0f)) throw Error("steering vector: multiplier must be positive");
  }

  SteeringVector negated() const {
    SteeringVector out = *this;
    for (auto& v : out.values) v = -v;
    std::swap(out.source_category, out.target_category);
    return out;
  }
};

// One residual vector x^(layer)_anchor per prompt, from unsteered passes.
inline std::vector<std::vector<float>> collect_anchor_activations(const Model& model, const Vocabulary& vocab,
                                                                  const std::vector<Tokens>& prompts,
                                                                  std::size_t layer, AnchorKind anchor) {
  if (layer >= model.spec.layer_count) throw Error("collect: layer " + std::to_string(layer) + " out of range");
  std::vector<std::vector<float>> out(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    std::size_t pos = 0;
    try {
      pos = locate_anchors(vocab, prompts[i]).resolve(anchor);
    } catch (const Error& e) {
      throw Error("collect: prompt " + std::to_string(i) + ": " + e.what());
    }
    // Positions after the anchor cannot influence it; stop there.
    const auto head = std::span<const TokenId>(prompts[i]).first(pos + 1);
    auto result = forward(model, head, {}, {.residual = true});
    out[i] = result.residual.at(layer, pos);
  });
  return out;
}

namespace detail {

// Mean in f64 over a canonically sorted copy, so input order cannot matter.
inline std::vector<double> sorted_mean(std::vector<std::vector<float>> acts) {
  std::sort(acts.begin(), acts.end());
  std::vector<double> mean(acts.front().size(), 0.0);
  for (const auto& a : acts) {
    for (std::size_t i = 0; i < a.size(); ++i) mean[i] += a[i];
  }
  for (auto& m : mean) m /= static_cast<double>(acts.size());
  return mean;
}

}  // namespace detail

// values = mean(target) - mean(source): steers toward the target category.
inline SteeringVector estimate_steering_vector(const std::vector<std::vector<float>>& acts_source,
                                               const std::vector<std::vector<float>>& acts_target,
                                               float multiplier = kDefaultMultiplier) {
  if (acts_source.empty() || acts_target.empty()) throw Error("estimate: empty activation list");
  const std::size_t d = acts_source.front().size();
  auto check = [d](const std::vector<std::vector<float>>& acts) {
    for (const auto& a : acts) {
      if (a.size() != d) throw Error("estimate: activation dimension mismatch");
    }
  };
  check(acts_source);
  check(acts_target);
  const auto ms = detail::sorted_mean(acts_source);
  const auto mt = detail::sorted_mean(acts_target);
  SteeringVector v;
  v.values.resize(d);
  for (std::size_t i = 0; i < d; ++i) v.values[i] = static_cast<float>(mt[i] - ms[i]);
  v.multiplier = multiplier;
  v.validate();
  return v;
}

inline InterventionPlan steering_plan(const SteeringVector& vector, const PositionAnchors& anchors, AnchorKind kind) {
  InterventionPlan plan;
  plan.add(ResidualAdd{vector.layer, anchors.resolve(kind), vector.values, vector.multiplier});
  return plan;
}

inline InterventionPlan steering_plan(const SteeringVector& vector, const PositionAnchors& anchors) {
  return steering_plan(vector, anchors, vector.anchor);
}

// Hash identifying a train set independent of prompt order.
inline std::string train_set_hash(std::vector<std::string> source, std::vector<std::string> target) {
  std::sort(source.begin(), source.end());
  std::sort(target.begin(), target.end());
  std::uint64_t h = fnv1a64("source");
  for (const auto& s : source) h = fnv1a64(s + '\x1f', h);
  h = fnv1a64("target", h);
  for (const auto& s : target) h = fnv1a64(s + '\x1f', h);
  return hex64(h);
}

// ---- persistence -----------------------------------------------------------

inline Container steering_to_container(const SteeringVector& v) {
  Container c;
  c.metadata = {{"kind", "steering_vector"},
                {"layer", v.layer},
                {"anchor", std::string(anchor_name(v.anchor))},
                {"multiplier", v.multiplier},
                {"source_category", v.source_category},
                {"target_category", v.target_category},
                {"train_hash", v.train_hash}};
  c.tensors.push_back({"steering.values", Tensor({v.values.size()}, v.values)});
  return c;
}

inline SteeringVector steering_from_container(const Container& c) {
  if (c.metadata.value("kind", "") != "steering_vector") throw ValidationError("container: not a steering vector");
  const Tensor* t = c.find("steering.values");
  if (!t || t->shape.size() != 1) throw ValidationError("container: missing 1-D tensor 'steering.values'");
  SteeringVector v;
  try {
    v.values = t->data;
    v.layer = c.metadata.at("layer").get<std::size_t>();
    v.anchor = parse_anchor(c.metadata.at("anchor").get<std::string>());
    v.multiplier = c.metadata.at("multiplier").get<float>();
    v.source_category = c.metadata.value("source_category", "");
    v.target_category = c.metadata.value("target_category", "");
    v.train_hash = c.metadata.value("train_hash", "");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("steering vector metadata: ") + e.what());
  }
  v.validate();
  return v;
}

inline void save_steering_vector(const std::filesystem::path& path, const SteeringVector& v) {
  save_container(path, steering_to_container(v));
}
inline SteeringVector load_steering_vector(const std::filesystem::path& path) {
  return steering_from_container(load_container(path));
}

// ---- sweep -------------------------------------------------------------------

struct SweepCell {
  std::size_t layer = 0;
  AnchorKind anchor = AnchorKind::last_word;
  auto operator<=>(const SweepCell&) const = default;
};

struct SweepResult {
  std::map<SweepCell, double> grid;
  SweepCell best;
};

// Effectiveness of steering at one cell, a fraction in [0, 1].
using CellEvaluator = std::function<double(const SweepCell&)>;

// Ties go to the lowest layer, then anchor order last_word, newline, question_mark.
inline SweepResult sweep(const std::vector<std::size_t>& layers, const std::vector<AnchorKind>& anchors,
                         const CellEvaluator& evaluate) {
  if (layers.empty() || anchors.empty()) throw Error("sweep: empty candidate set");
  std::vector<SweepCell> cells;
  for (auto l : layers) {
    for (auto a : anchors) cells.push_back({l, a});
  }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  SweepResult result;
  bool have_best = false;
  double best_value = 0.0;
  for (const auto& cell : cells) {
    double v = 0.0;
    try {
      v = evaluate(cell);
    } catch (const std::exception& e) {
      throw Error("sweep: cell (layer " + std::to_string(cell.layer) + ", " + std::string(anchor_name(cell.anchor)) +
                  "): " + e.what());
    }
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error("sweep: cell (layer " + std::to_string(cell.layer) + ", " + std::string(anchor_name(cell.anchor)) +
                  ") effectiveness outside [0, 1]");
    }
    result.grid[cell] = v;
    if (!have_best || v > best_value) {
      best_value = v;
      result.best = cell;
      have_best = true;
    }
  }
  return result;
}

// The middle `fraction` of layers (default 80%), as used for QA sweeps.
inline std::vector<std::size_t> middle_layers(std::size_t layer_count, double fraction = 0.8) {
  const double margin = (1.0 - fraction) / 2.0 * static_cast<double>(layer_count);
  const auto lo = static_cast<std::size_t>(std::floor(margin + 1e-9));
  const std::size_t hi = layer_count - lo;
  std::vector<std::size_t> out;
  for (std::size_t l = lo; l < std::min(hi, layer_count); ++l) out.push_back(l);
  if (out.empty()) out.push_back(layer_count / 2);
  return out;
}

// Seeded subsample of `k` items without replacement, order preserved.
template <typename T>
std::vector<T> subsample(const std::vector<T>& items, std::size_t k, std::uint64_t seed) {
  if (k > items.size()) {
    throw Error("subsample: size " + std::to_string(k) + " exceeds available " + std::to_string(items.size()));
  }
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates with our own index draw for portability.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t span = idx.size() - i;
    const std::size_t j = i + static_cast<std::size_t>(rng() % span);
    std::swap(idx[i], idx[j]);
  }
  std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(chosen.begin(), chosen.end());
  std::vector<T> out;
  for (auto i : chosen) out.push_back(items[i]);
  return out;
}

struct CurvePoint {
  std::size_t size = 0;
  std::vector<double> values;  // one per repeat
  double mean() const {
    double s = 0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
};

// Evaluates a subsample size for one repeat: (size, repeat) -> effectiveness.
using CurveEvaluator = std::function<double(std::size_t size, std::size_t repeat)>;

inline std::vector<CurvePoint> train_size_curve(const std::vector<std::size_t>& sizes, std::size_t repeats,
                                                std::size_t available, const CurveEvaluator& evaluate) {
  if (repeats < 1) throw Error("train_size_curve: repeats must be >= 1");
  if (sizes.empty()) throw Error("train_size_curve: no sizes");
  std::vector<CurvePoint> out;
  for (auto n : sizes) {
    if (n == 0 || n > available) {
      throw Error("train_size_curve: size " + std::to_string(n) + " outside [1, " + std::to_string(available) + "]");
    }
    CurvePoint p;
    p.size = n;
    for (std::size_t r = 0; r < repeats; ++r) p.values.push_back(evaluate(n, r));
    out.push_back(std::move(p));
  }
  return out;
}

// Powers of two up to n, plus n itself.
inline std::vector<std::size_t> doubling_sizes(std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t s = 1; s < n; s *= 2) out.push_back(s);
  if (n > 0) out.push_back(n);
  return out;
}

}  // namespace planlab
