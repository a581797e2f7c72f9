#include <gtest/gtest.h>

#include <cstdlib>

#include "planlab/experiment.hpp"
#include "planlab/planted.hpp"

using namespace planlab;

namespace {

struct World {
  PlantedSpec spec;
  PlantedModel pm;
  Dataset d;
  CategoryPair ab;
};

const World& world() {
  static const World w = [] {
    World out;
    out.pm = build_planted_model(out.spec);
    out.d = planted_dataset(out.spec, 8, 6, 11);
    out.ab = {out.pm.truth.category_a_id, out.pm.truth.category_b_id};
    return out;
  }();
  return w;
}

RunConfig small_run(std::size_t samples = 4, std::uint64_t seed = 3) {
  RunConfig r;
  r.samples = samples;
  r.seed = seed;
  return r;
}

class ThreadCap {
 public:
  explicit ThreadCap(const char* value) {
    if (const char* old = std::getenv("PLANLAB_THREADS")) old_ = old;
    setenv("PLANLAB_THREADS", value, 1);
  }
  ~ThreadCap() {
    if (old_) {
      setenv("PLANLAB_THREADS", old_->c_str(), 1);
    } else {
      unsetenv("PLANLAB_THREADS");
    }
  }

 private:
  std::optional<std::string> old_;
};

}  // namespace

TEST(Generate, DeterministicAndThreadIndependent) {
  const auto& w = world();
  const auto& lines = w.d.category(w.ab.source).test_prompts;
  const auto a = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source, lines, small_run());
  const auto b = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source, lines, small_run());
  EXPECT_EQ(a, b);
  CoupletCollection serial;
  {
    ThreadCap cap("1");
    serial = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source, lines, small_run());
  }
  EXPECT_EQ(a, serial);
  ASSERT_EQ(a.size(), lines.size() * 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].seed, derive_seed(3, i / 4, i % 4));
    EXPECT_EQ(a[i].sample_index, i % 4);
  }
  const auto other = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source, lines, small_run(4, 4));
  EXPECT_NE(a, other);
}

TEST(Generate, Errors) {
  const auto& w = world();
  EXPECT_THROW(generate_collection(w.pm.model, w.pm.vocab, w.d, "x", {}, small_run()), Error);
  EXPECT_THROW(generate_collection(w.pm.model, w.pm.vocab, w.d, "x", {"a"}, small_run(0)), Error);
  RunConfig bad = small_run();
  bad.rollout.temperature = -1;
  EXPECT_THROW(generate_collection(w.pm.model, w.pm.vocab, w.d, "x", {"a"}, bad), Error);
}

TEST(Steering, ZeroVectorLeavesGenerationAndTracesUnchanged) {
  const auto& w = world();
  const auto v = estimate_for_pair(w.pm.model, w.pm.vocab, w.d, w.ab, w.pm.truth.plan_layer, w.pm.truth.plan_anchor, 1.5f);
  SteeringVector zero = v;
  std::fill(zero.values.begin(), zero.values.end(), 0.0f);
  const auto& lines = w.d.category(w.ab.source).test_prompts;
  const auto base = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source, lines, small_run());
  auto steered = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source, lines, small_run(),
                                     steering_factory(w.pm.vocab, zero));
  EXPECT_EQ(base, steered);
  const auto t = distribution_traces(w.pm.model, w.pm.vocab, base, steering_factory(w.pm.vocab, zero));
  for (const auto& tr : t) {
    ASSERT_FALSE(tr.baseline.empty());
    EXPECT_EQ(tr.baseline, tr.steered);
  }
  EXPECT_EQ(fraction_high_kl(t), 0.0);
  EXPECT_EQ(tokens_after_first(t, DivergenceCriterion::top1_diff), 0.0);
}

TEST(Steering, EffectivenessAndNegation) {
  const auto& w = world();
  const auto v = estimate_for_pair(w.pm.model, w.pm.vocab, w.d, w.ab, w.pm.truth.plan_layer, w.pm.truth.plan_anchor, 1.5f);
  EXPECT_EQ(v.source_category, w.ab.source);
  EXPECT_EQ(v.target_category, w.ab.target);
  EXPECT_FALSE(v.train_hash.empty());
  EXPECT_GE(steering_effectiveness(w.pm.model, w.pm.vocab, w.d, v, small_run()), 0.95);
  EXPECT_GE(steering_effectiveness(w.pm.model, w.pm.vocab, w.d, v.negated(), small_run()), 0.95);
}

TEST(Steering, CurveIsDeterministic) {
  const auto& w = world();
  const auto sizes = doubling_sizes(8);
  EXPECT_EQ(sizes, (std::vector<std::size_t>{1, 2, 4, 8}));
  const auto run = small_run(2);
  const auto a = steering_curve(w.pm.model, w.pm.vocab, w.d, w.ab, w.pm.truth.plan_layer, w.pm.truth.plan_anchor, 1.5f,
                                sizes, 2, run);
  const auto b = steering_curve(w.pm.model, w.pm.vocab, w.d, w.ab, w.pm.truth.plan_layer, w.pm.truth.plan_anchor, 1.5f,
                                sizes, 2, run);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].size, sizes[i]);
    EXPECT_EQ(a[i].values, b[i].values);
    for (double x : a[i].values) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
  EXPECT_GE(a.back().mean(), 0.95);
}

TEST(Steering, CandidateAnchors) {
  EXPECT_EQ(candidate_anchors(TaskKind::rhyme).size(), 2u);
  EXPECT_EQ(candidate_anchors(TaskKind::qa).back(), AnchorKind::question_mark);
}

TEST(Regeneration, BaselineRegeneratesOwnFamily) {
  const auto& w = world();
  const auto base = generate_collection(w.pm.model, w.pm.vocab, w.d, w.ab.source,
                                        w.d.category(w.ab.source).test_prompts, small_run(2));
  const auto r = regeneration_rates(
      w.pm.model, w.pm.vocab, w.d, base, [](const GenerationRecord& g) { return g.category; }, small_run());
  ASSERT_TRUE(r.rates.contains(w.ab.source));
  double total = 0;
  for (const auto& [fam, rate] : r.rates.at(w.ab.source)) total += rate;
  EXPECT_LE(total, 1.0 + 1e-12);
  EXPECT_GE(r.rates.at(w.ab.source).at(w.ab.source), 0.9);
  EXPECT_EQ(r.trials.at(w.ab.source) + r.skipped, base.size());
  const auto again = regeneration_rates(
      w.pm.model, w.pm.vocab, w.d, base, [](const GenerationRecord& g) { return g.category; }, small_run());
  EXPECT_EQ(r.rates, again.rates);
  EXPECT_THROW(regeneration_rates(w.pm.model, w.pm.vocab, w.d, {}, [](const GenerationRecord&) { return ""; },
                                  small_run()),
               Error);
}

TEST(Circuit, PatchAnalysisAndErrors) {
  const auto& w = world();
  const auto& truth = w.pm.truth;
  const auto v = estimate_for_pair(w.pm.model, w.pm.vocab, w.d, w.ab, truth.plan_layer, truth.plan_anchor, 1.5f);
  const auto prompt = encode_prompt(w.pm.vocab, w.d, w.d.category(w.ab.source).test_prompts[0]);
  const auto plan = steering_factory(w.pm.vocab, v)(prompt);
  const auto stops = stop_tokens(w.pm.vocab);
  const auto p = patch_analysis(w.pm.model, prompt, plan, all_heads(w.pm.model.spec), stops);
  ASSERT_EQ(p.heads.size(), w.pm.model.spec.layer_count * w.pm.model.spec.head_count);
  EXPECT_GT(p.steered, p.unsteered);
  for (const auto& h : p.heads) {
    if (h.layer == truth.copy_layer && h.head == truth.copy_head) {
      EXPECT_GE(h.recovery, 90.0);
    } else {
      EXPECT_LE(std::abs(h.recovery), 5.0);
    }
  }
  EXPECT_THROW(patch_analysis(w.pm.model, prompt, {}, all_heads(w.pm.model.spec), stops), Error);
  EXPECT_THROW(record_steered_snapshot(w.pm.model, prompt, plan, {{9, 0}}), Error);
  EXPECT_TRUE(record_steered_snapshot(w.pm.model, prompt, plan, {}).empty());
}

TEST(Judge, RhymeAndQa) {
  const auto& w = world();
  const Judge judge(w.d);
  EXPECT_TRUE(judge.correct("In soft light\nmore", w.ab.source));
  EXPECT_FALSE(judge.correct("In cold rain", w.ab.source));
  Dataset qa;
  qa.task = TaskKind::qa;
  qa.categories = {{"elephant", CategoryKind::answer_noun, {}, {}, {"elephant"}, Article::an, {}}};
  const Judge q(qa);
  EXPECT_TRUE(q.correct(" an elephant.", "elephant"));
  EXPECT_FALSE(q.correct(" a whale", "elephant"));
  EXPECT_EQ(q.noun("elephant"), "elephant");
  const CoupletCollection c = {GenerationRecord{.completion = " an elephant"}, GenerationRecord{.completion = " x"}};
  EXPECT_EQ(fraction_correct(c, q, "elephant"), 0.5);
  EXPECT_THROW(fraction_correct({}, q, "elephant"), Error);
}
