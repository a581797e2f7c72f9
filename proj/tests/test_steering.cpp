#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "helpers.hpp"
#include "planlab/steering.hpp"

using namespace planlab;

TEST(Estimate, HandExample) {
  const auto v = estimate_steering_vector({{1, 0}, {3, 0}}, {{0, 2}, {0, 4}});
  ASSERT_EQ(v.values.size(), 2u);
  EXPECT_FLOAT_EQ(v.values[0], -2.0f);
  EXPECT_FLOAT_EQ(v.values[1], 3.0f);
  EXPECT_FLOAT_EQ(v.multiplier, 1.5f);
}

TEST(Estimate, SameSetsGiveZero) {
  const std::vector<std::vector<float>> a = {{0.1f, -3.0f, 2.5f}, {7.0f, 0.3f, -0.2f}};
  const auto v = estimate_steering_vector(a, a);
  for (float x : v.values) EXPECT_EQ(x, 0.0f);
}

TEST(Estimate, AntisymmetricAndOrderFree) {
  std::mt19937_64 rng(42);
  std::normal_distribution<float> n(0.0f, 3.0f);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng() % 16;
    auto make = [&] {
      std::vector<std::vector<float>> acts(1 + rng() % 12, std::vector<float>(d));
      for (auto& a : acts) {
        for (auto& x : a) x = n(rng);
      }
      return acts;
    };
    auto a = make();
    auto b = make();
    const auto ab = estimate_steering_vector(a, b);
    const auto ba = estimate_steering_vector(b, a);
    for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(ab.values[i], -ba.values[i]);
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    EXPECT_EQ(estimate_steering_vector(a, b).values, ab.values);
  }
}

TEST(Estimate, Errors) {
  EXPECT_THROW(estimate_steering_vector({}, {{1.0f}}), Error);
  EXPECT_THROW(estimate_steering_vector({{1.0f}}, {{1.0f, 2.0f}}), Error);
}

TEST(Persistence, RoundTrip) {
  SteeringVector v;
  v.values = {0.25f, -1.0f, 3.5f};
  v.layer = 4;
  v.anchor = AnchorKind::question_mark;
  v.multiplier = 2.0f;
  v.source_category = "-ight";
  v.target_category = "-ain";
  v.train_hash = train_set_hash({"a", "b"}, {"c"});
  const auto path = std::filesystem::temp_directory_path() / "planlab_steer_test.plnl";
  save_steering_vector(path, v);
  const auto back = load_steering_vector(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.values, v.values);
  EXPECT_EQ(back.layer, 4u);
  EXPECT_EQ(back.anchor, AnchorKind::question_mark);
  EXPECT_EQ(back.multiplier, 2.0f);
  EXPECT_EQ(back.source_category, "-ight");
  EXPECT_EQ(back.train_hash, v.train_hash);
}

TEST(Persistence, HashIgnoresOrder) {
  EXPECT_EQ(train_set_hash({"x", "y"}, {"z"}), train_set_hash({"y", "x"}, {"z"}));
  EXPECT_NE(train_set_hash({"x", "y"}, {"z"}), train_set_hash({"z"}, {"x", "y"}));
}

TEST(Plan, AddsAtResolvedAnchor) {
  SteeringVector v;
  v.values = {1, 2};
  v.layer = 1;
  v.anchor = AnchorKind::last_word;
  PositionAnchors a{.last_newline = 5, .last_word_final_token = 4, .question_mark = std::nullopt};
  const auto plan = steering_plan(v, a);
  ASSERT_NE(plan.find_residual(1, 4), nullptr);
  EXPECT_EQ(plan.find_residual(1, 5), nullptr);
  EXPECT_THROW(steering_plan(v, a, AnchorKind::question_mark), Error);
}

TEST(Sweep, TieBreakAndSingleCell) {
  const auto r = sweep({2, 0, 1}, {AnchorKind::newline, AnchorKind::last_word}, [](const SweepCell& c) {
    return c.layer >= 1 ? 0.9 : 0.1;
  });
  EXPECT_EQ(r.grid.size(), 6u);
  EXPECT_EQ(r.best.layer, 1u);
  EXPECT_EQ(r.best.anchor, AnchorKind::last_word);

  const auto one = sweep({3}, {AnchorKind::newline}, [](const SweepCell&) { return 0.0; });
  EXPECT_EQ(one.best.layer, 3u);
  EXPECT_EQ(one.best.anchor, AnchorKind::newline);
}

TEST(Sweep, ErrorsNameTheCell) {
  try {
    sweep({0, 5}, {AnchorKind::question_mark}, [](const SweepCell& c) -> double {
      if (c.layer == 5) throw Error("boom");
      return 0.5;
    });
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("layer 5, question_mark"), std::string::npos);
  }
  EXPECT_THROW(sweep({}, {AnchorKind::newline}, [](const SweepCell&) { return 0.0; }), Error);
  EXPECT_THROW(sweep({0}, {AnchorKind::newline}, [](const SweepCell&) { return 1.5; }), Error);
}

TEST(Subsample, DeterministicAndBounded) {
  std::vector<int> items(20);
  for (int i = 0; i < 20; ++i) items[i] = i;
  const auto a = subsample(items, 7, 11);
  EXPECT_EQ(a, subsample(items, 7, 11));
  EXPECT_EQ(a.size(), 7u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 7u);
  EXPECT_EQ(subsample(items, 20, 3), items);
  EXPECT_THROW(subsample(items, 21, 3), Error);
}

TEST(Curve, SizesAndRepeats) {
  EXPECT_EQ(doubling_sizes(20), (std::vector<std::size_t>{1, 2, 4, 8, 16, 20}));
  EXPECT_EQ(doubling_sizes(1), (std::vector<std::size_t>{1}));
  const auto c = train_size_curve({1, 4}, 3, 10, [](std::size_t n, std::size_t r) { return n * 0.1 + r * 0.01; });
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1].values.size(), 3u);
  EXPECT_NEAR(c[1].mean(), 0.41, 1e-12);
  EXPECT_THROW(train_size_curve({11}, 1, 10, [](std::size_t, std::size_t) { return 0.0; }), Error);
  EXPECT_THROW(train_size_curve({1}, 0, 10, [](std::size_t, std::size_t) { return 0.0; }), Error);
}

TEST(Layers, MiddleEightyPercent) {
  EXPECT_EQ(middle_layers(10), (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(middle_layers(2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(middle_layers(1), (std::vector<std::size_t>{0}));
}

TEST(Collect, MatchesFullForward) {
  const auto vocab = make_word_vocabulary({" cat", " sat"});
  auto spec = fixtures::small_spec();
  spec.vocab_size = vocab.size();
  spec.max_context = 32;
  const auto model = fixtures::random_model(spec, 5);
  const auto prompt = vocab.encode("A cat sat\nthe cat\n");
  const auto acts = collect_anchor_activations(model, vocab, {prompt}, 1, AnchorKind::last_word);
  const auto full = forward(model, prompt, {}, {.residual = true});
  const auto pos = locate_anchors(vocab, prompt).last_word_final_token;
  EXPECT_EQ(acts[0], full.residual.at(1, pos));
  EXPECT_THROW(collect_anchor_activations(model, vocab, {prompt}, 2, AnchorKind::newline), Error);
  EXPECT_THROW(collect_anchor_activations(model, vocab, {prompt}, 0, AnchorKind::question_mark), Error);
}
