#include <gtest/gtest.h>

#include <filesystem>

#include "helpers.hpp"
#include "planlab/container.hpp"

using namespace planlab;

TEST(Container, RoundTripIsBitExact) {
  const auto model = fixtures::random_model(fixtures::small_spec(), 3);
  const auto bytes = serialize_container(model_to_container(model, {{"note", "x"}}));
  ASSERT_EQ(bytes.substr(0, 4), "PLNL");
  const auto back = parse_container(bytes);
  ASSERT_TRUE(back.spec.has_value());
  EXPECT_EQ(*back.spec, model.spec);
  EXPECT_EQ(back.metadata["note"], "x");
  const auto reloaded = model_from_container(back);
  for (const auto& [name, t] : model.weights.all()) EXPECT_EQ(reloaded.weights.get(name), t) << name;
  EXPECT_EQ(serialize_container(back), bytes);
}

TEST(Container, PayloadsAre64ByteAligned) {
  const auto model = fixtures::random_model(fixtures::small_spec(), 4);
  const auto bytes = serialize_container(model_to_container(model));
  const std::uint64_t mlen = detail::get_le(bytes, 8, 8);
  const auto manifest = nlohmann::json::parse(bytes.substr(16, mlen));
  const std::size_t region = detail::align_up(16 + mlen);
  EXPECT_EQ(region % 64, 0u);
  for (const auto& t : manifest["tensors"]) {
    EXPECT_EQ(t["offset"].get<std::size_t>() % 64, 0u);
    EXPECT_EQ(t["dtype"], "f32");
  }
}

TEST(Container, RejectsBadMagicVersionAndCorruption) {
  const auto model = fixtures::random_model(fixtures::small_spec(), 5);
  auto bytes = serialize_container(model_to_container(model));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_container(bad_magic), ValidationError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(parse_container(bad_version), ValidationError);
  auto corrupt = bytes;
  corrupt[corrupt.size() - 3] ^= 0x40;
  EXPECT_THROW(parse_container(corrupt), ValidationError);
  EXPECT_THROW(parse_container(bytes.substr(0, bytes.size() - 8)), ValidationError);
  EXPECT_THROW(parse_container("PL"), ValidationError);
}

TEST(WeightStore, RejectsMissingOrMisshapenTensors) {
  const auto spec = fixtures::small_spec();
  const auto model = fixtures::random_model(spec, 6);
  auto tensors = model.weights.all();
  tensors.erase("blocks.1.attn.q.weight");
  EXPECT_THROW(WeightStore::create(spec, tensors), ValidationError);
  tensors = model.weights.all();
  tensors["lm_head.bias"] = Tensor(std::vector<std::size_t>{spec.vocab_size + 1});
  EXPECT_THROW(WeightStore::create(spec, tensors), ValidationError);
}

TEST(ModelSpec, ValidatesInvariants) {
  auto spec = fixtures::small_spec();
  spec.head_dim = 3;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec = fixtures::small_spec(PositionalScheme::rotary);
  spec.head_count = 8;
  spec.head_dim = 1;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec = fixtures::small_spec();
  spec.max_context = 0;
  EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(ModelSpec, JsonRoundTrip) {
  const auto spec = fixtures::small_spec(PositionalScheme::rotary, NormScheme::pre_rmsnorm, Activation::silu, true, true);
  nlohmann::json j = spec;
  EXPECT_EQ(j.get<ModelSpec>(), spec);
  j["layer_count"] = 0;
  EXPECT_THROW(j.get<ModelSpec>(), ValidationError);
}

TEST(ModelSpec, CanonicalNamesFollowScheme) {
  const auto tied = fixtures::small_spec(PositionalScheme::rotary, NormScheme::pre_rmsnorm, Activation::silu, true, true);
  bool has_head = false, has_pos = false, has_gate = false, has_norm_bias = false;
  for (const auto& t : canonical_tensors(tied)) {
    has_head |= t.name == "lm_head.weight";
    has_pos |= t.name == "pos_embed.weight";
    has_gate |= t.name == "blocks.0.mlp.gate.weight";
    has_norm_bias |= t.name == "final_norm.bias";
  }
  EXPECT_FALSE(has_head);
  EXPECT_FALSE(has_pos);
  EXPECT_TRUE(has_gate);
  EXPECT_FALSE(has_norm_bias);
}
