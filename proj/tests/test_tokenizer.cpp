#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "planlab/tokenizer.hpp"

using namespace planlab;

namespace {

const Vocabulary& word_vocab() {
  static const Vocabulary v = make_word_vocabulary(
      {"A", " rhyming", " couplet", ":\n", "He", " saw", " a", " carrot", " and", " had", " to", " grab", " it", " tight",
       "des", "pair", " despair", " light", "?\n", " sky", "?", "Answer"});
  return v;
}

std::vector<std::string> texts(const Vocabulary& v, const Tokens& ids) {
  std::vector<std::string> out;
  for (auto id : ids) out.push_back(v.token_bytes(id));
  return out;
}

}  // namespace

TEST(Pretokenize, FollowsByteLevelRules) {
  using V = std::vector<std::string>;
  EXPECT_EQ(pretokenize("Hello world"), (V{"Hello", " world"}));
  EXPECT_EQ(pretokenize("a  b"), (V{"a", " ", " b"}));
  EXPECT_EQ(pretokenize("it's"), (V{"it", "'s"}));
  EXPECT_EQ(pretokenize("x\n"), (V{"x", "\n"}));
  EXPECT_EQ(pretokenize("pedal?\nAnswer:"), (V{"pedal", "?", "\n", "Answer", ":"}));
  EXPECT_EQ(pretokenize("in 2024!"), (V{"in", " 2024", "!"}));
  EXPECT_EQ(pretokenize("end  \n"), (V{"end", "  \n"}));
  EXPECT_EQ(pretokenize(""), V{});
}

TEST(Encode, EmptyAndTemplateRoundTrip) {
  const auto& v = word_vocab();
  EXPECT_TRUE(v.encode("").empty());
  const std::string tmpl = "A rhyming couplet:\n";
  const auto ids = v.encode(tmpl);
  EXPECT_EQ(v.decode(ids), tmpl);
  EXPECT_EQ(texts(v, ids), (std::vector<std::string>{"A", " rhyming", " couplet", ":", "\n"}));
}

TEST(Encode, ArbitraryBytesRoundTrip) {
  const auto& v = word_vocab();
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> len(0, 40), byte(0, 255), pick(0, 3);
  const std::string alphabet = " \n?'aeilnrt";
  for (int trial = 0; trial < 500; ++trial) {
    std::string s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) {
      s.push_back(pick(rng) == 0 ? static_cast<char>(byte(rng)) : alphabet[static_cast<std::size_t>(byte(rng)) % alphabet.size()]);
    }
    EXPECT_EQ(v.decode_bytes(v.encode(s)), s);
  }
}

TEST(Encode, MergeRankOrderIsRespected) {
  // merges: (b,c) first, then (a,b): "abc" -> a + bc
  std::map<std::string, TokenId> tokens;
  TokenId next = 0;
  for (int b = 0; b < 256; ++b) {
    std::string sym;
    utf8::append(sym, bytelevel::table().to_cp[static_cast<std::size_t>(b)]);
    tokens.emplace(sym, next++);
  }
  tokens.emplace("bc", next++);
  tokens.emplace("ab", next++);
  const auto v = Vocabulary::create(tokens, {{"b", "c"}, {"a", "b"}});
  EXPECT_EQ(texts(v, v.encode("abc")), (std::vector<std::string>{"a", "bc"}));
  EXPECT_EQ(texts(v, v.encode("abd")), (std::vector<std::string>{"ab", "d"}));
}

TEST(Decode, SplitWordAndLossyReplacement) {
  const auto& v = word_vocab();
  const Tokens ids = {*v.find_text("des"), *v.find_text("pair")};
  EXPECT_EQ(v.decode(ids), "despair");
  EXPECT_TRUE(v.decode({}).empty());
  const Tokens bad = {*v.find_text(std::string(1, '\xff'))};
  EXPECT_EQ(v.decode(bad), "\xEF\xBF\xBD");
  EXPECT_THROW(v.decode(Tokens{static_cast<TokenId>(v.size())}), Error);
}

TEST(Vocabulary, SpecialIdsAndPersistence) {
  const auto& v = word_vocab();
  EXPECT_TRUE(v.end_of_text().has_value());
  EXPECT_TRUE(v.is_newline(*v.find_text("\n")));
  EXPECT_TRUE(v.is_newline(*v.find_text(":\n")) == false);
  EXPECT_TRUE(v.is_question(*v.find_text("?")));
  EXPECT_TRUE(v.is_question(*v.find_text("?\n")));
  const auto dir = std::filesystem::temp_directory_path() / "planlab_vocab_test";
  std::filesystem::create_directories(dir);
  v.save(dir);
  const auto back = Vocabulary::load(dir);
  EXPECT_EQ(back.size(), v.size());
  for (const std::string s : {"A rhyming couplet:\n", "He saw a carrot and had to grab it\n", "x y?\n"}) {
    EXPECT_EQ(back.encode(s), v.encode(s));
  }
  std::filesystem::remove_all(dir);
}

TEST(Vocabulary, RejectsSparseIds) {
  std::map<std::string, TokenId> tokens = {{"a", 0}, {"b", 5}};
  EXPECT_THROW(Vocabulary::create(tokens, {}), ValidationError);
}

TEST(Anchors, RhymePrompt) {
  const auto& v = word_vocab();
  const auto ids = v.encode("A rhyming couplet:\nHe saw a carrot and had to grab it\n");
  const auto a = locate_anchors(v, ids);
  EXPECT_EQ(a.last_newline, ids.size() - 1);
  EXPECT_EQ(v.token_bytes(ids[a.last_word_final_token]), " it");
  EXPECT_FALSE(a.question_mark.has_value());
  EXPECT_LT(a.last_word_final_token, a.last_newline);
}

TEST(Anchors, SingleTokenWordAndPunctuation) {
  const auto& v = word_vocab();
  const auto ids = v.encode("A rhyming couplet:\nHe had to grab it tight.\n");
  const auto a = locate_anchors(v, ids);
  EXPECT_EQ(v.token_bytes(ids[a.last_word_final_token]), " tight");
}

TEST(Anchors, QuestionMarkAndErrors) {
  const auto& v = word_vocab();
  const auto ids = v.encode("in the sky?\nAnswer:");
  const auto a = locate_anchors(v, ids);
  ASSERT_TRUE(a.question_mark.has_value());
  EXPECT_EQ(v.token_bytes(ids[*a.question_mark]), "?");
  EXPECT_EQ(a.resolve(AnchorKind::question_mark), *a.question_mark);
  EXPECT_THROW(locate_anchors(v, v.encode("no newline")), Error);
  EXPECT_THROW(locate_anchors(v, v.encode("42\n")), Error);
  const auto plain = locate_anchors(v, v.encode("He saw\n"));
  EXPECT_THROW(plain.resolve(AnchorKind::question_mark), Error);
}

TEST(SecondLine, SpanRules) {
  const auto& v = word_vocab();
  const auto prompt = v.encode("A rhyming couplet:\nHe saw\n");
  auto couplet = prompt;
  const auto gen = v.encode("He had to grab it\n");
  couplet.insert(couplet.end(), gen.begin(), gen.end());
  const auto span = second_line_span(v, couplet, prompt.size());
  EXPECT_EQ(span.start, prompt.size());
  EXPECT_EQ(span.end, couplet.size() - 1);
  EXPECT_EQ(v.decode(std::span<const TokenId>(couplet).subspan(span.start, span.size())), "He had to grab it");

  auto no_newline = prompt;
  const auto g2 = v.encode("He had");
  no_newline.insert(no_newline.end(), g2.begin(), g2.end());
  EXPECT_EQ(second_line_span(v, no_newline, prompt.size()).end, no_newline.size());

  auto empty_line = prompt;
  empty_line.push_back(*v.find_text("\n"));
  EXPECT_THROW(second_line_span(v, empty_line, prompt.size()), Error);
  EXPECT_THROW(second_line_span(v, prompt, prompt.size()), Error);
}

TEST(Words, LastWordNormalization) {
  EXPECT_EQ(last_word("And stood for years, enduring every trick"), "trick");
  EXPECT_EQ(last_word("bathed in a golden light!"), "light");
  EXPECT_EQ(last_word("Bathed in LIGHT...  "), "light");
  EXPECT_EQ(last_word("it isn't"), "isn't");
  EXPECT_EQ(last_word("the dogs'"), "dogs");
  EXPECT_THROW(last_word("42."), Error);
  EXPECT_THROW(last_word(""), Error);
}

TEST(Words, FirstWordAndWords) {
  EXPECT_EQ(first_word(" an elephant"), "an");
  EXPECT_FALSE(first_word(" 42 ").has_value());
  EXPECT_EQ(words_of("The answer is heart."), (std::vector<std::string>{"the", "answer", "is", "heart"}));
  EXPECT_EQ(first_line("a\nb"), "a");
}
