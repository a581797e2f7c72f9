#pragma once

// End-to-end run of the whole pipeline on a planted model, checking every
// prediction the construction makes.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "planlab/experiment.hpp"
#include "planlab/metrics.hpp"
#include "planlab/planted.hpp"
#include "planlab/report.hpp"

namespace planlab {

struct SelfTestConfig {
  PlantedSpec planted;
  std::size_t train_per_category = 8;
  std::size_t test_per_category = 20;
  std::size_t samples = kDefaultSamples;  // 20 test prompts x 50 = 1000 rollouts
  std::size_t sweep_samples = kDefaultSweepSamples;
  std::size_t oracle_prompts = 50;
  float multiplier = kDefaultMultiplier;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"train_per_category", train_per_category},
            {"test_per_category", test_per_category},
            {"samples", samples},
            {"sweep_samples", sweep_samples},
            {"oracle_prompts", oracle_prompts},
            {"multiplier", format_real(multiplier)},
            {"seed", seed},
            {"planted_seed", planted.seed},
            {"logit_gap", format_real(planted.logit_gap)},
            {"marker_strength", format_real(planted.marker_strength)},
            {"noise", format_real(planted.noise)}};
  }
};

struct SelfTestCheck {
  std::string name;
  bool passed = false;
  double value = 0.0;
  std::string expectation;  // e.g. ">= 0.95"
  std::string detail;
};

struct SelfTestReport {
  std::vector<SelfTestCheck> checks;
  std::vector<MetricReport> metrics;
  nlohmann::json config;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const SelfTestCheck& c) { return c.passed; });
  }
  const SelfTestCheck& check(const std::string& name) const {
    for (const auto& c : checks) {
      if (c.name == name) return c;
    }
    throw Error("selftest: no check named '" + name + "'");
  }
};

namespace detail {

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
}

// A random plan mixing all three intervention kinds, valid for `tokens`.
inline InterventionPlan random_plan(const ModelSpec& s, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  InterventionPlan plan;
  std::vector<float> v(s.model_dim);
  for (auto& x : v) x = g(rng);
  plan.add(ResidualAdd{rng() % s.layer_count, rng() % n, v, 1.5f});
  std::vector<float> r(s.head_dim);
  for (auto& x : r) x = g(rng);
  plan.add(HeadOutputPatch{rng() % s.layer_count, rng() % s.head_count, rng() % n, r});
  if (n > 2) plan.add(attention_ablation_plan({1 + rng() % (n - 2)}).items().front());
  return plan;
}

}  // namespace detail

// Oracle equivalence on `count` planted-style prompts, each without and with
// a random intervention plan. Returns the worst relative error.
inline double oracle_worst_error(const PlantedModel& pm, const PlantedSpec& spec, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& cues = (i % 2 == 0) ? spec.cues_a() : spec.cues_b();
    const auto prompt =
        pm.vocab.encode(build_prompt(PromptTemplate::rhyme(), planted_line(spec, rng, cues[rng() % cues.size()])));
    for (bool with_plan : {false, true}) {
      const InterventionPlan plan = with_plan ? detail::random_plan(pm.model.spec, prompt.size(), rng) : InterventionPlan{};
      double w = 0;
      logits_match(forward(pm.model, prompt, plan).logits, brute_force_logits(pm.model, prompt, plan), 0.0, &w);
      worst = std::max(worst, w);
    }
  }
  return worst;
}

inline SelfTestReport self_test(const SelfTestConfig& cfg) {
  SelfTestReport rep;
  rep.config = cfg.to_json();
  const std::string hash = config_hash(rep.config);
  const auto& spec = cfg.planted;

  auto add = [&](std::string name, bool ok, double value, std::string expectation, std::string detail = "") {
    rep.checks.push_back({std::move(name), ok, value, std::move(expectation), std::move(detail)});
  };
  // Pipeline failures become failed checks rather than aborting the run.
  auto guarded = [&](const std::string& name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      add(name, false, 0.0, "no error", e.what());
    }
  };
  auto metric = [&](const std::string& pair, const std::string& category, const std::string& name, double value,
                    std::size_t samples, bool fraction = true) {
    rep.metrics.push_back({"selftest", "planted", pair, category, name, value, samples, cfg.seed, hash, fraction});
  };

  PlantedModel pm;
  try {
    pm = build_planted_model(spec);
  } catch (const std::exception& e) {
    add("build", false, 0.0, "no error", e.what());
    return rep;
  }
  add("build", true, 1.0, "no error");
  const auto& truth = pm.truth;
  const auto& model = pm.model;
  const auto& vocab = pm.vocab;
  const Dataset d = planted_dataset(spec, cfg.train_per_category, cfg.test_per_category, splitmix64(cfg.seed ^ 0x64617461ULL));
  const CategoryPair ab{truth.category_a_id, truth.category_b_id};
  const CategoryPair ba{truth.category_b_id, truth.category_a_id};
  const Judge judge(d);
  RunConfig run;
  run.samples = cfg.samples;
  run.seed = cfg.seed;
  RunConfig sweep_run = run;
  sweep_run.samples = cfg.sweep_samples;

  guarded("oracle_equivalence", [&] {
    const double w = oracle_worst_error(pm, spec, cfg.oracle_prompts, splitmix64(cfg.seed ^ 0x6f7261ULL));
    add("oracle_equivalence", w <= 1e-6, w, "<= 1e-06 relative");
  });

  guarded("greedy_ground_truth", [&] {
    RolloutConfig greedy;
    greedy.temperature = 0.0;
    std::size_t ok = 0, total = 0;
    for (const auto& cat : d.categories) {
      for (const auto& line : cat.test_prompts) {
        const auto prompt = encode_prompt(vocab, d, line);
        const auto out = sample_completion(model, prompt, greedy, {}, stop_tokens(vocab));
        const auto want = truth.expected_category(prompt).value();
        const auto& toks = truth.category_tokens(want);
        ++total;
        ok += out.size() >= 3 && out[0] == truth.lead_in && out[1] == truth.marker_for(want) &&
              std::find(toks.begin(), toks.end(), out[2]) != toks.end();
      }
    }
    const double v = static_cast<double>(ok) / static_cast<double>(total);
    add("greedy_ground_truth", v == 1.0, v, "== 1 (lead-in, own marker, own category)");
  });

  // Baseline collections.
  CoupletCollection base_a, base_b;
  guarded("baseline_category", [&] {
    base_a = generate_collection(model, vocab, d, ab.source, d.category(ab.source).test_prompts, run);
    base_b = generate_collection(model, vocab, d, ba.source, d.category(ba.source).test_prompts, run);
    const double fa = fraction_correct_rhyme_family(base_a, judge.index(), ab.source);
    const double fb = fraction_correct_rhyme_family(base_b, judge.index(), ba.source);
    metric("", ab.source, metric_names::kRhymeFamily, fa, base_a.size());
    metric("", ba.source, metric_names::kRhymeFamily, fb, base_b.size());
    add("baseline_category", std::min(fa, fb) >= 0.99, std::min(fa, fb), ">= 0.99");
  });

  SteeringVector v_ab;
  guarded("steering_cosine", [&] {
    v_ab = estimate_for_pair(model, vocab, d, ab, truth.plan_layer, truth.plan_anchor, cfg.multiplier);
    const double c = detail::cosine(v_ab.values, truth.expected_steering_vector(true));
    add("steering_cosine", c >= 0.99, c, ">= 0.99");
  });

  guarded("sweep_selects_plan_cell", [&] {
    std::vector<std::size_t> layers;
    for (std::size_t l = 0; l < model.spec.layer_count; ++l) layers.push_back(l);
    const auto res = sweep_pair(model, vocab, d, ab, layers, candidate_anchors(d.task), cfg.multiplier, sweep_run);
    const bool ok = res.best.layer == truth.plan_layer && res.best.anchor == truth.plan_anchor;
    std::string detail;
    for (const auto& [cell, value] : res.grid) {
      detail += "(" + std::to_string(cell.layer) + "," + std::string(anchor_name(cell.anchor)) + ")=" +
                format_real(value) + " ";
    }
    add("sweep_selects_plan_cell", ok, res.grid.at(res.best), "best == (plan layer, newline)", detail);
  });

  CoupletCollection steered_a;
  guarded("steering_flip_plan_cell", [&] {
    steered_a = generate_collection(model, vocab, d, ab.source, d.category(ab.source).test_prompts, run,
                                    steering_factory(vocab, v_ab), ab.id());
    const double f = fraction_correct_rhyme_family(steered_a, judge.index(), ab.target);
    metric(ab.id(), ab.target, metric_names::kRhymeFamilySteered, f, steered_a.size());
    add("steering_flip_plan_cell", f >= 0.95, f, ">= 0.95 of " + std::to_string(steered_a.size()) + " rollouts");
  });

  guarded("steering_flip_other_layers", [&] {
    double worst = 0;
    std::string detail;
    for (std::size_t l = 0; l < model.spec.layer_count; ++l) {
      if (l == truth.plan_layer) continue;
      for (auto anchor : candidate_anchors(d.task)) {
        const auto v = estimate_for_pair(model, vocab, d, ab, l, anchor, cfg.multiplier);
        const auto c = generate_collection(model, vocab, d, ab.source, d.category(ab.source).test_prompts, run,
                                           steering_factory(vocab, v), ab.id());
        const double f = fraction_correct_rhyme_family(c, judge.index(), ab.target);
        worst = std::max(worst, f);
        detail += "(" + std::to_string(l) + "," + std::string(anchor_name(anchor)) + ")=" + format_real(f) + " ";
      }
    }
    add("steering_flip_other_layers", worst <= 0.10, worst, "<= 0.10", detail);
  });

  guarded("negated_vector_restores", [&] {
    const auto neg = v_ab.negated();
    const auto c = generate_collection(model, vocab, d, ba.source, d.category(ba.source).test_prompts, run,
                                       steering_factory(vocab, neg), neg.source_category + "->" + neg.target_category);
    const double f = fraction_correct_rhyme_family(c, judge.index(), ab.source);
    add("negated_vector_restores", f >= 0.95, f, ">= 0.95");
  });

  guarded("marker_flip", [&] {
    const auto m = marker_fraction(steered_a, d.markers);
    const double f = m.at(ab.target);
    add("marker_flip", f >= 0.90, f, ">= 0.90");
  });

  guarded("regeneration_close_to_baseline", [&] {
    const auto own = [](const GenerationRecord& r) { return r.category; };
    const auto target = [&](const GenerationRecord&) { return ab.target; };
    auto both = base_a;
    both.insert(both.end(), base_b.begin(), base_b.end());
    const auto base = regeneration_rates(model, vocab, d, both, own, run);
    const auto steer = regeneration_rates(model, vocab, d, steered_a, target, run);
    const double rb = base.rates.at(ab.source).at(ab.source);
    const double rs = steer.rates.at(ab.target).at(ab.target);
    const auto chance = regeneration_chance_baseline(base.rates);
    metric("", ab.source, metric_names::kRegeneration, rb, base.trials.at(ab.source));
    metric(ab.id(), ab.target, metric_names::kRegenerationSteered, rs, steer.trials.at(ab.target));
    metric("", ab.source, metric_names::kRegenerationChance, chance.at(ab.source), base.trials.at(ab.source));
    add("regeneration_close_to_baseline", std::abs(rs - rb) <= 0.10, std::abs(rs - rb), "<= 0.10",
        "baseline " + format_real(rb) + " steered " + format_real(rs));
    add("regeneration_above_chance", rb > chance.at(ab.source), rb - chance.at(ab.source), "> 0");
  });

  guarded("trace_metrics", [&] {
    const auto traces = distribution_traces(model, vocab, base_a, steering_factory(vocab, v_ab));
    const double top1 = fraction_top1_difference(traces);
    const double kl = fraction_high_kl(traces);
    const double after_top1 = tokens_after_first(traces, DivergenceCriterion::top1_diff);
    const double after_kl = tokens_after_first(traces, DivergenceCriterion::high_kl);
    metric(ab.id(), ab.source, metric_names::kTop1, top1, traces.size());
    metric(ab.id(), ab.source, metric_names::kHighKl, kl, traces.size());
    metric(ab.id(), ab.source, metric_names::kAfterTop1, after_top1, traces.size());
    metric(ab.id(), ab.source, metric_names::kAfterHighKl, after_kl, traces.size());
    // The plan is in place before the line starts: the first prediction of the
    // second line already diverges.
    add("divergence_from_line_start", after_top1 >= 0.99, after_top1, ">= 0.99");
  });

  // Circuit analysis on every A-cue test prompt.
  guarded("patch_copy_head", [&] {
    double worst_copy = 100.0, worst_other = 0.0;
    const auto stops = stop_tokens(vocab);
    for (const auto& line : d.category(ab.source).test_prompts) {
      const auto prompt = encode_prompt(vocab, d, line);
      const auto plan = steering_plan(v_ab, locate_anchors(vocab, prompt));
      const auto pa = patch_analysis(model, prompt, plan, all_heads(model.spec), stops);
      for (const auto& h : pa.heads) {
        if (h.layer == truth.copy_layer && h.head == truth.copy_head) {
          worst_copy = std::min(worst_copy, h.recovery);
        } else {
          worst_other = std::max(worst_other, std::abs(h.recovery));
        }
      }
    }
    metric(ab.id(), "", "patch_recovery_copy_head_min", worst_copy, d.category(ab.source).test_prompts.size(), false);
    metric(ab.id(), "", "patch_recovery_other_heads_max_abs", worst_other, d.category(ab.source).test_prompts.size(),
           false);
    add("patch_copy_head", worst_copy >= 95.0, worst_copy, ">= 95 percent");
    add("patch_other_heads", worst_other <= 5.0, worst_other, "<= 5 percent");
  });

  guarded("snapshot_closed_form", [&] {
    // Copy-head output at the lead-in equals the d component of the normalized
    // newline residual, so the steered-minus-plain difference is fixed by the
    // two residuals alone.
    double worst = 0;
    const auto& gain = model.weights.get("blocks.1.norm1.weight");
    const HeadSet copy{{truth.copy_layer, truth.copy_head}};
    for (const auto& line : d.category(ab.source).test_prompts) {
      auto prompt = encode_prompt(vocab, d, line);
      const auto nl = locate_anchors(vocab, prompt).last_newline;
      const auto plan = steering_plan(v_ab, locate_anchors(vocab, prompt));
      prompt.push_back(truth.lead_in);
      const auto s = record_steered_snapshot(model, prompt, plan, copy).begin()->second;
      const auto u = record_steered_snapshot(model, prompt, {}, copy).begin()->second;
      auto d_of_norm = [&](const InterventionPlan& p) {
        const auto r = forward(model, prompt, p, {.residual = true});
        const auto& x = r.residual.at(truth.plan_layer, nl);
        double ss = 0, dx = 0;
        for (std::size_t c = 0; c < x.size(); ++c) {
          ss += static_cast<double>(x[c]) * x[c];
          dx += static_cast<double>(x[c]) * gain.data[c] * truth.direction[c];
        }
        return dx / std::sqrt(ss / static_cast<double>(x.size()) + model.spec.norm_eps);
      };
      const double expected = d_of_norm(plan) - d_of_norm({});
      worst = std::max(worst, std::abs((static_cast<double>(s[0]) - u[0]) - expected));
      for (std::size_t c = 1; c < s.size(); ++c) worst = std::max(worst, std::abs(static_cast<double>(s[c]) - u[c]));
    }
    add("snapshot_closed_form", worst <= 1e-5, worst, "<= 1e-05");
  });

  guarded("ablation_to_chance", [&] {
    double before = 0, after = 0;
    const auto& lines = d.category(ab.source).test_prompts;
    for (const auto& line : lines) {
      const auto prompt = encode_prompt(vocab, d, line);
      const auto plan = attention_ablation_plan({locate_anchors(vocab, prompt).last_newline});
      before += category_probability(model, truth, prompt, ab.source);
      after += category_probability(model, truth, prompt, ab.source, plan);
    }
    before /= static_cast<double>(lines.size());
    after /= static_cast<double>(lines.size());
    const double chance = 1.0 / static_cast<double>(d.categories.size());
    metric("", ab.source, "target_category_probability", before, lines.size());
    metric("", ab.source, "target_category_probability_ablated", after, lines.size());
    add("ablation_to_chance", std::abs(after - chance) <= 0.05, after, "0.5 +- 0.05",
        "unablated " + format_real(before));
  });

  guarded("copy_head_deletion", [&] {
    const Model cut = without_head(model, truth.copy_layer, truth.copy_head);
    double worst = 0;
    for (const auto& cat : d.categories) {
      for (const auto& line : cat.test_prompts) {
        auto prompt = encode_prompt(vocab, d, line);
        prompt.push_back(truth.lead_in);
        const auto l = forward(cut, prompt).logits.back();
        double a = 0, b = 0;
        for (auto id : truth.category_a) a += l[static_cast<std::size_t>(id)];
        for (auto id : truth.category_b) b += l[static_cast<std::size_t>(id)];
        const double gap = a / static_cast<double>(truth.category_a.size()) - b / static_cast<double>(truth.category_b.size());
        worst = std::max(worst, std::abs(gap));
      }
    }
    add("copy_head_deletion", worst < spec.logit_gap / 10.0, worst, "< g/10 = " + format_real(spec.logit_gap / 10.0));
  });

  return rep;
}

inline std::string selftest_csv(const SelfTestReport& rep) {
  std::ostringstream out;
  out << "check,passed,value,expectation,detail,config_hash\n";
  const std::string hash = config_hash(rep.config);
  for (const auto& c : rep.checks) {
    out << c.name << ',' << (c.passed ? "pass" : "FAIL") << ',' << format_real(c.value) << ','
        << csv_field(c.expectation) << ',' << csv_field(c.detail) << ',' << hash << "\n";
  }
  return out.str();
}

inline nlohmann::json selftest_json(const SelfTestReport& rep) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : rep.checks) {
    checks.push_back({{"name", c.name},
                      {"passed", c.passed},
                      {"value", format_real(c.value)},
                      {"expectation", c.expectation},
                      {"detail", c.detail}});
  }
  return {{"passed", rep.passed()},
          {"checks", checks},
          {"config", rep.config},
          {"config_hash", config_hash(rep.config)}};
}

}  // namespace planlab
