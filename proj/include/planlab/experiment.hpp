#pragma once

// Model-driven protocols: collection generation, steering effectiveness,
// sweeps, teacher-forced traces, regeneration, head patching and ablation.

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "planlab/corpus.hpp"
#include "planlab/intervention.hpp"
#include "planlab/metrics.hpp"
#include "planlab/parallel.hpp"
#include "planlab/runtime.hpp"
#include "planlab/sampling.hpp"
#include "planlab/steering.hpp"
#include "planlab/tokenizer.hpp"

namespace planlab {

inline constexpr std::size_t kDefaultSamples = 50;
inline constexpr std::size_t kDefaultSweepSamples = 10;

struct RunConfig {
  std::size_t samples = kDefaultSamples;
  std::uint64_t seed = 0;
  RolloutConfig rollout;
};

// Decides whether a completion lands in a category, per task.
class Judge {
 public:
  explicit Judge(const Dataset& d) : dataset_(&d), index_(d.categories) {}

  bool correct(std::string_view completion, const std::string& category) const {
    if (dataset_->task == TaskKind::rhyme) return index_.classify_line(first_line(completion)) == category;
    return answer_checks(completion, noun(category)).contains_answer;
  }

  std::string noun(const std::string& category) const {
    const auto& lex = dataset_->category(category).lexicon;
    if (lex.empty()) throw Error("judge: category '" + category + "' has no lexicon");
    return *lex.begin();
  }

  const LexiconIndex& index() const { return index_; }

 private:
  const Dataset* dataset_;
  LexiconIndex index_;
};

inline Tokens encode_prompt(const Vocabulary& vocab, const Dataset& d, std::string_view line) {
  return vocab.encode(build_prompt(d.prompt_template, line));
}

inline std::vector<TokenId> stop_tokens(const Vocabulary& vocab) {
  auto out = vocab.newline_ids();
  if (auto eot = vocab.end_of_text()) out.push_back(*eot);
  return out;
}

// Intervention to apply for a given prompt; empty plan for a baseline run.
using PlanFactory = std::function<InterventionPlan(const Tokens& prompt)>;

inline PlanFactory steering_factory(const Vocabulary& vocab, const SteeringVector& v) {
  return [&vocab, v](const Tokens& prompt) { return steering_plan(v, locate_anchors(vocab, prompt)); };
}

// Blocks attention to the anchor position from every later query, all layers.
inline PlanFactory ablation_factory(const Vocabulary& vocab, AnchorKind anchor) {
  return [&vocab, anchor](const Tokens& prompt) {
    return attention_ablation_plan({locate_anchors(vocab, prompt).resolve(anchor)});
  };
}

// samples completions per prompt line; sample s of prompt i uses
// derive_seed(seed, i, s), so results do not depend on thread count.
inline CoupletCollection generate_collection(const Model& model, const Vocabulary& vocab, const Dataset& d,
                                             const std::string& category, const std::vector<std::string>& lines,
                                             const RunConfig& run, const PlanFactory& plan = {},
                                             const std::string& pair_id = "") {
  if (lines.empty()) throw Error("generate: no prompts for category '" + category + "'");
  if (run.samples == 0) throw Error("generate: samples must be positive");
  run.rollout.validate();
  const auto stops = stop_tokens(vocab);
  std::vector<CoupletCollection> per_prompt(lines.size());
  parallel_for(lines.size(), [&](std::size_t i) {
    const Tokens prompt = encode_prompt(vocab, d, lines[i]);
    const PrefilledPrompt prefilled(model, prompt, plan ? plan(prompt) : InterventionPlan{});
    for (std::size_t s = 0; s < run.samples; ++s) {
      RolloutConfig cfg = run.rollout;
      cfg.seed = derive_seed(run.seed, i, s);
      GenerationRecord r;
      r.prompt_id = category + ":" + std::to_string(i);
      r.category = category;
      r.pair = pair_id;
      r.sample_index = s;
      r.seed = cfg.seed;
      r.prompt = lines[i];
      r.prompt_tokens = prompt;
      r.completion_tokens = prefilled.sample(cfg, stops);
      r.completion = vocab.decode(r.completion_tokens);
      per_prompt[i].push_back(std::move(r));
    }
  });
  CoupletCollection out;
  for (auto& c : per_prompt) {
    for (auto& r : c) out.push_back(std::move(r));
  }
  return out;
}

inline double fraction_correct(const CoupletCollection& c, const Judge& judge, const std::string& category) {
  if (c.empty()) throw Error("fraction_correct: empty collection");
  std::size_t hits = 0;
  for (const auto& r : c) hits += judge.correct(r.completion, category) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(c.size());
}

// ---- steering --------------------------------------------------------------------------

inline std::vector<Tokens> encode_lines(const Vocabulary& vocab, const Dataset& d, const std::vector<std::string>& lines) {
  std::vector<Tokens> out;
  for (const auto& l : lines) out.push_back(encode_prompt(vocab, d, l));
  return out;
}

// Mean-difference vector for a pair from the given train lines (default: all).
inline SteeringVector estimate_for_pair(const Model& model, const Vocabulary& vocab, const Dataset& d,
                                        const CategoryPair& pair, std::size_t layer, AnchorKind anchor,
                                        float multiplier = kDefaultMultiplier,
                                        const std::vector<std::string>* source_lines = nullptr,
                                        const std::vector<std::string>* target_lines = nullptr) {
  const auto& src = source_lines ? *source_lines : d.category(pair.source).train_prompts;
  const auto& tgt = target_lines ? *target_lines : d.category(pair.target).train_prompts;
  if (src.empty() || tgt.empty()) throw Error("estimate: pair " + pair.id() + " has an empty train set");
  auto acts_src = collect_anchor_activations(model, vocab, encode_lines(vocab, d, src), layer, anchor);
  auto acts_tgt = collect_anchor_activations(model, vocab, encode_lines(vocab, d, tgt), layer, anchor);
  auto v = estimate_steering_vector(acts_src, acts_tgt, multiplier);
  v.layer = layer;
  v.anchor = anchor;
  v.source_category = pair.source;
  v.target_category = pair.target;
  v.train_hash = train_set_hash(src, tgt);
  return v;
}

// Fraction of steered completions from source test prompts that land in the target.
inline double steering_effectiveness(const Model& model, const Vocabulary& vocab, const Dataset& d,
                                     const SteeringVector& v, const RunConfig& run) {
  const Judge judge(d);
  const auto c = generate_collection(model, vocab, d, v.source_category, d.category(v.source_category).test_prompts,
                                     run, steering_factory(vocab, v), v.source_category + "->" + v.target_category);
  return fraction_correct(c, judge, v.target_category);
}

// Anchors meaningful for a task: question_mark only exists in QA prompts.
inline std::vector<AnchorKind> candidate_anchors(TaskKind task) {
  if (task == TaskKind::rhyme) return {AnchorKind::last_word, AnchorKind::newline};
  return {AnchorKind::last_word, AnchorKind::newline, AnchorKind::question_mark};
}

inline SweepResult sweep_pair(const Model& model, const Vocabulary& vocab, const Dataset& d, const CategoryPair& pair,
                              const std::vector<std::size_t>& layers, const std::vector<AnchorKind>& anchors,
                              float multiplier, const RunConfig& run) {
  return sweep(layers, anchors, [&](const SweepCell& cell) {
    const auto v = estimate_for_pair(model, vocab, d, pair, cell.layer, cell.anchor, multiplier);
    return steering_effectiveness(model, vocab, d, v, run);
  });
}

// Effectiveness against train-set size: per size and repeat, subsample both
// train sets with seed derive_seed(seed, size, repeat).
inline std::vector<CurvePoint> steering_curve(const Model& model, const Vocabulary& vocab, const Dataset& d,
                                              const CategoryPair& pair, std::size_t layer, AnchorKind anchor,
                                              float multiplier, const std::vector<std::size_t>& sizes,
                                              std::size_t repeats, const RunConfig& run) {
  const auto& src = d.category(pair.source).train_prompts;
  const auto& tgt = d.category(pair.target).train_prompts;
  return train_size_curve(sizes, repeats, std::min(src.size(), tgt.size()), [&](std::size_t n, std::size_t r) {
    const auto seed = derive_seed(run.seed, n, r);
    const auto s = subsample(src, n, seed);
    const auto t = subsample(tgt, n, splitmix64(seed));
    const auto v = estimate_for_pair(model, vocab, d, pair, layer, anchor, multiplier, &s, &t);
    return steering_effectiveness(model, vocab, d, v, run);
  });
}

// ---- probability traces -------------------------------------------------------------

// For each baseline record, next-token distributions over its second-line
// positions, unsteered and with the plan applied to the same tokens.
inline DistributionTracePair distribution_traces(const Model& model, const Vocabulary& vocab,
                                                 const CoupletCollection& baseline, const PlanFactory& plan) {
  DistributionTracePair out(baseline.size());
  parallel_for(baseline.size(), [&](std::size_t i) {
    const auto& r = baseline[i];
    Tokens tokens = r.prompt_tokens;
    tokens.insert(tokens.end(), r.completion_tokens.begin(), r.completion_tokens.end());
    SecondLineSpan span;
    try {
      span = second_line_span(vocab, tokens, r.prompt_tokens.size());
    } catch (const Error& e) {
      throw Error("traces: record " + r.prompt_id + "#" + std::to_string(r.sample_index) + ": " + e.what());
    }
    const auto base = teacher_forced_distributions(model, tokens);
    const auto steer = teacher_forced_distributions(model, tokens, plan(r.prompt_tokens));
    for (std::size_t j = span.start; j < span.end; ++j) {
      out[i].baseline.push_back(base[j].probs);
      out[i].steered.push_back(steer[j].probs);
    }
  });
  return out;
}

// ---- regeneration -------------------------------------------------------------------------

struct RegenerationOptions {
  std::size_t samples_per_line = 1;
  bool keep_preamble = false;
};

struct RegenerationResult {
  RegenerationTable rates;                 // reference family -> produced family -> rate
  std::map<std::string, std::size_t> trials;  // per reference family
  std::size_t skipped = 0;                 // second lines with fewer than two words
};

// Regenerates the last word of every second line from the line alone and
// tallies the produced word's family. `reference` names the family each record
// is judged against (its own category for baselines, the target when steered).
inline RegenerationResult regeneration_rates(const Model& model, const Vocabulary& vocab, const Dataset& d,
                                             const CoupletCollection& c,
                                             const std::function<std::string(const GenerationRecord&)>& reference,
                                             const RunConfig& run, const RegenerationOptions& opts = {}) {
  if (c.empty()) throw Error("regeneration: empty collection");
  if (opts.samples_per_line == 0) throw Error("regeneration: samples per line must be positive");
  const LexiconIndex index(d.categories);
  const auto stops = stop_tokens(vocab);
  struct Slot {
    bool skipped = false;
    std::vector<std::optional<std::string>> produced;
  };
  std::vector<Slot> slots(c.size());
  parallel_for(c.size(), [&](std::size_t i) {
    std::string prompt;
    try {
      prompt = build_regeneration_prompt(second_line_text(c[i]));
    } catch (const Error&) {
      slots[i].skipped = true;
      return;
    }
    if (opts.keep_preamble) prompt = d.prompt_template.preamble + prompt;
    const PrefilledPrompt prefilled(model, vocab.encode(prompt));
    for (std::size_t s = 0; s < opts.samples_per_line; ++s) {
      RolloutConfig cfg = run.rollout;
      cfg.seed = derive_seed(run.seed, i, s);
      const auto text = vocab.decode(prefilled.sample(cfg, stops));
      const auto word = first_word(text);
      if (!word) {
        throw Error("regeneration: no word generated for record " + c[i].prompt_id + "#" +
                    std::to_string(c[i].sample_index) + " within " + std::to_string(cfg.max_new_tokens) + " tokens");
      }
      slots[i].produced.push_back(index.classify_word(*word));
    }
  });
  RegenerationResult out;
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (slots[i].skipped) {
      ++out.skipped;
      continue;
    }
    const auto ref = reference(c[i]);
    for (const auto& fam : slots[i].produced) {
      ++out.trials[ref];
      if (fam) ++counts[ref][*fam];
    }
  }
  for (const auto& [ref, n] : out.trials) {
    auto& row = out.rates[ref];
    for (const auto& cat : d.categories) {
      row[cat.id] = static_cast<double>(counts[ref][cat.id]) / static_cast<double>(n);
    }
  }
  return out;
}

// ---- circuit analysis -------------------------------------------------------------------

using HeadSet = std::set<std::pair<std::size_t, std::size_t>>;

// Outputs of the listed heads at the final position of a steered run.
inline ActivationSnapshot record_steered_snapshot(const Model& model, std::span<const TokenId> tokens,
                                                  const InterventionPlan& plan, const HeadSet& heads) {
  for (const auto& [l, h] : heads) {
    if (l >= model.spec.layer_count || h >= model.spec.head_count) {
      throw Error("snapshot: head (" + std::to_string(l) + ", " + std::to_string(h) + ") out of range");
    }
  }
  ActivationSnapshot snap;
  if (heads.empty()) return snap;
  const auto r = forward(model, tokens, plan, {.head_outputs = true});
  const std::size_t last = tokens.size() - 1;
  for (const auto& [l, h] : heads) snap[{l, h, last}] = r.attention.head_outputs.at({l, h, last});
  return snap;
}

inline HeadSet all_heads(const ModelSpec& s) {
  HeadSet out;
  for (std::size_t l = 0; l < s.layer_count; ++l) {
    for (std::size_t h = 0; h < s.head_count; ++h) out.insert({l, h});
  }
  return out;
}

struct HeadPatch {
  std::size_t layer = 0;
  std::size_t head = 0;
  double patched = 0.0;
  double recovery = 0.0;  // percent
};

struct PatchAnalysis {
  Tokens prefix;  // prompt plus the shared completion prefix
  TokenId unsteered_token = 0;
  TokenId steered_token = 0;
  double unsteered = 0.0;  // logit(steered_token) - logit(unsteered_token)
  double steered = 0.0;
  std::vector<HeadPatch> heads;
};

// Greedy unsteered and steered completions are compared; at their first
// divergent token, each head's steered output is patched alone into the
// unsteered run and the recovered share of the logit difference is reported.
inline PatchAnalysis patch_analysis(const Model& model, const Tokens& prompt, const InterventionPlan& steering,
                                    const HeadSet& heads, std::span<const TokenId> stops, std::size_t max_new_tokens = 24) {
  RolloutConfig greedy;
  greedy.temperature = 0.0;
  greedy.max_new_tokens = max_new_tokens;
  const auto base = sample_completion(model, prompt, greedy, {}, stops);
  const auto steer = sample_completion(model, prompt, greedy, steering, stops);
  std::size_t k = 0;
  while (k < base.size() && k < steer.size() && base[k] == steer[k]) ++k;
  if (k == base.size() || k == steer.size()) throw Error("patch: steered and unsteered completions do not diverge");
  PatchAnalysis out;
  out.prefix = prompt;
  out.prefix.insert(out.prefix.end(), base.begin(), base.begin() + static_cast<std::ptrdiff_t>(k));
  out.unsteered_token = base[k];
  out.steered_token = steer[k];
  auto diff = [&](const InterventionPlan& plan) {
    return logit_difference(forward(model, out.prefix, plan).logits.back(), out.steered_token, out.unsteered_token);
  };
  out.unsteered = diff({});
  out.steered = diff(steering);
  const auto snap = record_steered_snapshot(model, out.prefix, steering, heads);
  for (const auto& [key, vec] : snap) {
    ActivationSnapshot one{{key, vec}};
    HeadPatch p;
    p.layer = std::get<0>(key);
    p.head = std::get<1>(key);
    p.patched = diff(patch_plan(one));
    p.recovery = patch_recovery_percentage(out.unsteered, p.patched, out.steered);
    out.heads.push_back(p);
  }
  return out;
}

}  // namespace planlab
