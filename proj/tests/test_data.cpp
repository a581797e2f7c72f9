#include <gtest/gtest.h>

#include <map>

#include "planlab/corpus.hpp"
#include "planlab/experiment.hpp"
#include "planlab/planted.hpp"

using namespace planlab;

namespace {

Dataset bundled(const std::string& name) { return load_dataset(std::filesystem::path(PLANLAB_DATA_DIR) / (name + ".json")); }

std::size_t errors(const Dataset& d) {
  std::size_t n = 0;
  for (const auto& v : validate(d)) n += v.severity == Severity::error;
  return n;
}

}  // namespace

TEST(BundledRhyme, ShapeAndValidity) {
  const auto d = bundled("rhyme");
  EXPECT_EQ(d.task, TaskKind::rhyme);
  EXPECT_EQ(d.prompt_template.preamble, "A rhyming couplet:\n");
  ASSERT_EQ(d.categories.size(), 10u);
  for (const auto& c : d.categories) {
    EXPECT_EQ(c.train_prompts.size(), 85u) << c.id;
    EXPECT_EQ(c.test_prompts.size(), 20u) << c.id;
  }
  ASSERT_EQ(d.pairs.size(), 20u);
  std::map<std::string, int> first, last;
  for (const auto& p : d.pairs) {
    ++first[p.source];
    ++last[p.target];
  }
  for (const auto& c : d.categories) {
    EXPECT_EQ(first[c.id], 2) << c.id;
    EXPECT_EQ(last[c.id], 2) << c.id;
  }
  EXPECT_EQ(errors(d), 0u);
  for (const auto& v : validate(d)) ADD_FAILURE() << v.category << ": " << v.message;
}

TEST(BundledQa, ShapeAndValidity) {
  const auto d = bundled("qa");
  EXPECT_EQ(d.task, TaskKind::qa);
  ASSERT_EQ(d.categories.size(), 20u);
  EXPECT_EQ(d.pairs.size(), 20u);
  std::size_t an = 0;
  for (const auto& c : d.categories) {
    EXPECT_EQ(c.train_prompts.size(), 13u) << c.id;
    EXPECT_EQ(c.test_prompts.size(), 5u) << c.id;
    EXPECT_EQ(c.neutral_prompts.size(), 7u) << c.id;
    an += c.article == Article::an;
  }
  EXPECT_EQ(an, 10u);
  for (const auto& p : d.pairs) EXPECT_NE(d.category(p.source).article, d.category(p.target).article) << p.id();
  EXPECT_EQ(errors(d), 0u);
  const auto prompt = build_prompt(d.prompt_template, d.categories[0].test_prompts[0]);
  EXPECT_TRUE(prompt.starts_with("Question: What two-wheeled vehicle"));
  EXPECT_TRUE(prompt.ends_with("?\nAnswer:"));
}

TEST(BundledMicro, ShapeAndValidity) {
  const auto d = bundled("micro");
  ASSERT_EQ(d.categories.size(), 2u);
  for (const auto& c : d.categories) {
    EXPECT_EQ(c.train_prompts.size(), 4u);
    EXPECT_EQ(c.test_prompts.size(), 2u);
    EXPECT_GE(c.lexicon.size(), 4u);
  }
  EXPECT_TRUE(validate(d).empty());
  const auto q = bundled("micro_qa");
  EXPECT_EQ(q.pairs.size(), 2u);
  EXPECT_EQ(errors(q), 0u);
}

TEST(Bundled, RoundTrip) {
  for (const char* name : {"rhyme", "qa", "micro", "micro_qa"}) {
    const auto d = bundled(name);
    EXPECT_EQ(dataset_from_json(dataset_to_json(d)), d) << name;
  }
}

// The planted model reads each micro line's final word as its cue.
TEST(BundledMicro, PlantedModelReadsMicroCues) {
  const auto d = bundled("micro");
  PlantedSpec spec;
  for (const auto& c : d.categories) {
    spec.extra_texts.insert(spec.extra_texts.end(), c.train_prompts.begin(), c.train_prompts.end());
    spec.extra_texts.insert(spec.extra_texts.end(), c.test_prompts.begin(), c.test_prompts.end());
  }
  const auto pm = build_planted_model(spec);
  ASSERT_EQ(d.categories[0].id, pm.truth.category_a_id);
  ASSERT_EQ(d.categories[1].id, pm.truth.category_b_id);
  RolloutConfig greedy;
  greedy.temperature = 0.0;
  const Judge judge(d);
  for (const auto& c : d.categories) {
    for (const auto* lines : {&c.train_prompts, &c.test_prompts}) {
      for (const auto& line : *lines) {
        const auto prompt = encode_prompt(pm.vocab, d, line);
        EXPECT_EQ(pm.truth.expected_category(prompt), c.id) << line;
        const auto out = pm.vocab.decode(sample_completion(pm.model, prompt, greedy, {}, stop_tokens(pm.vocab)));
        EXPECT_TRUE(judge.correct(out, c.id)) << line << " -> " << out;
      }
    }
  }
}
