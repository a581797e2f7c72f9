#include <gtest/gtest.h>

#include <filesystem>

#include "planlab/corpus.hpp"

using namespace planlab;

namespace {

PromptCategory family(std::string id, std::set<std::string> lexicon, std::vector<std::string> train,
                      std::vector<std::string> test) {
  PromptCategory c;
  c.id = std::move(id);
  c.kind = CategoryKind::rhyme_family;
  c.lexicon = std::move(lexicon);
  c.train_prompts = std::move(train);
  c.test_prompts = std::move(test);
  return c;
}

std::size_t errors(const std::vector<Violation>& v) {
  return static_cast<std::size_t>(
      std::count_if(v.begin(), v.end(), [](const Violation& x) { return x.severity == Severity::error; }));
}
std::size_t warnings(const std::vector<Violation>& v) { return v.size() - errors(v); }

}  // namespace

TEST(Template, BuildPrompt) {
  EXPECT_EQ(build_prompt(PromptTemplate::rhyme(), "He saw a carrot and had to grab it"),
            "A rhyming couplet:\nHe saw a carrot and had to grab it\n");
  const auto qa = build_prompt(PromptTemplate::qa(), "What is the largest animal in the ocean?");
  EXPECT_TRUE(qa.starts_with("Question: What two-wheeled vehicle do you pedal?\nAnswer: a bicycle\n\n"));
  EXPECT_TRUE(qa.find("What flying vehicle carries passengers in the sky?\nAnswer: an airplane\n\n") !=
              std::string::npos);
  EXPECT_TRUE(qa.ends_with("\n\nQuestion: What is the largest animal in the ocean?\nAnswer:"));
  EXPECT_EQ(build_prompt(PromptTemplate::qa(), ""), std::string(kQaPreamble) + " " + std::string(kQaPostamble));
}

TEST(Validate, LexiconMembershipAndOverlap) {
  auto ick = family("-ick", {"trick", "brick"}, {"And stood for years, enduring every trick"}, {"Built of brick"});
  EXPECT_EQ(errors(validate(ick)), 0u);
  auto ight = family("-ight", {"light"}, {"He saw a carrot and had to grab it"}, {"bathed in light"});
  EXPECT_EQ(errors(validate(ight)), 1u);
  auto overlap = family("-ick", {"trick"}, {"every trick"}, {"every trick"});
  EXPECT_EQ(errors(validate(overlap)), 1u);
  auto empty = family("-ick", {"trick"}, {"  "}, {});
  EXPECT_EQ(errors(validate(empty)), 1u);
}

TEST(Validate, BalanceWarning) {
  std::vector<std::string> train;
  for (int i = 0; i < 40; ++i) train.push_back("line " + std::to_string(i) + " light");
  for (int i = 0; i < 45; ++i) train.push_back("line " + std::to_string(i) + (i % 2 ? " night" : " bright"));
  auto c = family("-ight", {"light", "night", "bright"}, train, {});
  const auto v = validate(c);
  EXPECT_EQ(errors(v), 0u);
  EXPECT_EQ(warnings(v), 1u);
}

TEST(Validate, QaArticleConsistency) {
  PromptCategory c;
  c.id = "elephant";
  c.kind = CategoryKind::answer_noun;
  c.lexicon = {"elephant"};
  c.article = Article::a;
  c.train_prompts = {"What large grey animal has a trunk?"};
  EXPECT_EQ(errors(validate(c)), 1u);
  c.article = Article::an;
  EXPECT_EQ(errors(validate(c)), 0u);
}

TEST(Classify, LastWordRules) {
  const std::vector<PromptCategory> cats = {family("-ight", {"light", "night"}, {}, {}),
                                            family("-ing", {"sing", "ring"}, {}, {})};
  EXPECT_EQ(classify_last_word("Soaring above bathed in a golden light", cats), "-ight");
  EXPECT_EQ(classify_last_word("Soaring above where true joy will sing", cats), "-ing");
  EXPECT_EQ(classify_last_word("And stood for years, enduring every zzz", cats), std::nullopt);
  EXPECT_EQ(classify_last_word("1234", cats), std::nullopt);
  const std::vector<PromptCategory> bad = {family("a", {"light"}, {}, {}), family("b", {"light"}, {}, {})};
  EXPECT_THROW(classify_last_word("light", bad), Error);
}

TEST(AnswerChecks, Rules) {
  auto c = answer_checks(" an elephant", "elephant");
  EXPECT_TRUE(c.contains_answer);
  EXPECT_EQ(c.article, Article::an);
  c = answer_checks(" a whale", "elephant");
  EXPECT_FALSE(c.contains_answer);
  EXPECT_EQ(c.article, Article::a);
  c = answer_checks("The answer is heart.", "heart");
  EXPECT_TRUE(c.contains_answer);
  EXPECT_FALSE(c.article.has_value());
  c = answer_checks(" a whale\nan elephant", "elephant");
  EXPECT_FALSE(c.contains_answer);
  EXPECT_EQ(c.article, Article::a);
  EXPECT_FALSE(answer_checks(" banana", "an").article.has_value());
}

TEST(Dataset, JsonRoundTripAndErrors) {
  Dataset d;
  d.id = "t";
  d.categories = {family("-ight", {"light"}, {"a light"}, {"b light"}), family("-ing", {"sing"}, {"a sing"}, {"b sing"})};
  d.pairs = {{"-ight", "-ing"}};
  d.markers = {{"soft", {"soft"}}};
  const auto j = dataset_to_json(d);
  EXPECT_EQ(dataset_from_json(nlohmann::json::parse(j.dump())), d);

  auto broken = j;
  broken["categories"][1]["train"][0] = 5;
  try {
    dataset_from_json(broken);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("/categories/1/train/0"), std::string::npos);
  }
  auto no_cats = j;
  no_cats["categories"] = nlohmann::json::array();
  EXPECT_THROW(dataset_from_json(no_cats), ValidationError);
  auto bad_pair = j;
  bad_pair["pairs"][0]["target"] = "-ight";
  EXPECT_THROW(dataset_from_json(bad_pair), ValidationError);
  EXPECT_THROW(load_dataset("/nonexistent/x.json"), Error);
}

TEST(Collection, JsonlRoundTrip) {
  CoupletCollection c;
  c.push_back({"-ight/test/0", "-ight", "", 0, 99, "p\n", {1, 2}, "x light\n", {3, 4}});
  c.push_back({"-ight/test/0", "-ight", "-ight->-ing", 1, 100, "p\n", {1, 2}, "y sing", {5}});
  const auto text = collection_to_jsonl(c);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_EQ(collection_from_jsonl(text), c);
  EXPECT_THROW(collection_from_jsonl("{bad"), ValidationError);
}
