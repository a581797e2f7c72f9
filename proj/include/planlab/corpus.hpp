#pragma once

// Dataset schemas, lexicons and prompt templates for the rhyming and
// question-answering experiments. See docs/dataset_schema.md.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "planlab/container.hpp"
#include "planlab/tokenizer.hpp"
#include "planlab/util.hpp"

namespace planlab {

enum class CategoryKind { rhyme_family, answer_noun, marker_class };
enum class Article { a, an };
enum class TaskKind { rhyme, qa };

NLOHMANN_JSON_SERIALIZE_ENUM(CategoryKind, {{CategoryKind::rhyme_family, "rhyme_family"},
                                            {CategoryKind::answer_noun, "answer_noun"},
                                            {CategoryKind::marker_class, "marker_class"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Article, {{Article::a, "a"}, {Article::an, "an"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind, {{TaskKind::rhyme, "rhyme"}, {TaskKind::qa, "qa"}})

inline constexpr std::string_view kRhymePreamble = "A rhyming couplet:\n";
inline constexpr std::string_view kQaPreamble =
    "Question: What two-wheeled vehicle do you pedal?\nAnswer: a bicycle\n\n"
    "Question: What flying vehicle carries passengers in the sky?\nAnswer: an airplane\n\nQuestion:";
inline constexpr std::string_view kQaPostamble = "\nAnswer:";

struct PromptTemplate {
  std::string preamble;
  std::string joiner;
  std::string postamble;

  static PromptTemplate rhyme() { return {std::string(kRhymePreamble), "", "\n"}; }
  static PromptTemplate qa() { return {std::string(kQaPreamble), " ", std::string(kQaPostamble)}; }
  bool operator==(const PromptTemplate&) const = default;
};

struct PromptCategory {
  std::string id;
  CategoryKind kind = CategoryKind::rhyme_family;
  std::vector<std::string> train_prompts;
  std::vector<std::string> test_prompts;
  std::set<std::string> lexicon;
  std::optional<Article> article;
  std::vector<std::string> neutral_prompts;
  bool operator==(const PromptCategory&) const = default;
};

struct CategoryPair {
  std::string source;
  std::string target;
  std::string id() const { return source + "->" + target; }
  bool operator==(const CategoryPair&) const = default;
};

struct Dataset {
  std::string id;
  TaskKind task = TaskKind::rhyme;
  PromptTemplate prompt_template = PromptTemplate::rhyme();
  std::vector<PromptCategory> categories;
  std::vector<CategoryPair> pairs;
  std::map<std::string, std::vector<std::string>> markers;  // class -> marker words
  bool operator==(const Dataset&) const = default;

  const PromptCategory& category(const std::string& cid) const {
    for (const auto& c : categories) {
      if (c.id == cid) return c;
    }
    throw Error("dataset: unknown category '" + cid + "'");
  }
};

inline std::string build_prompt(const PromptTemplate& t, std::string_view text) {
  return t.preamble + t.joiner + std::string(text) + t.postamble;
}

// ---- JSON ------------------------------------------------------------------

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(path + ": missing field '" + key + "'");
  return j.at(key);
}

inline std::string as_string(const nlohmann::json& j, const std::string& path) {
  if (!j.is_string()) throw ValidationError(path + ": expected string");
  return j.get<std::string>();
}

inline std::vector<std::string> as_strings(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path + ": expected array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_string(j[i], path + "/" + std::to_string(i)));
  return out;
}

}  // namespace detail

inline nlohmann::json dataset_to_json(const Dataset& d) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : d.categories) {
    nlohmann::json jc = {{"id", c.id}, {"kind", c.kind}, {"lexicon", c.lexicon}, {"train", c.train_prompts},
                         {"test", c.test_prompts}};
    if (c.article) jc["article"] = *c.article;
    if (!c.neutral_prompts.empty()) jc["neutral"] = c.neutral_prompts;
    cats.push_back(std::move(jc));
  }
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : d.pairs) pairs.push_back({{"source", p.source}, {"target", p.target}});
  nlohmann::json j = {{"schema", "planlab-dataset/1"},
                      {"id", d.id},
                      {"task", d.task},
                      {"template",
                       {{"preamble", d.prompt_template.preamble},
                        {"joiner", d.prompt_template.joiner},
                        {"postamble", d.prompt_template.postamble}}},
                      {"categories", cats},
                      {"pairs", pairs}};
  if (!d.markers.empty()) j["markers"] = d.markers;
  return j;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  using detail::as_string;
  using detail::as_strings;
  using detail::require;
  Dataset d;
  if (j.value("schema", "") != "planlab-dataset/1") throw ValidationError("/schema: expected \"planlab-dataset/1\"");
  d.id = as_string(require(j, "id", ""), "/id");
  const auto task = as_string(require(j, "task", ""), "/task");
  if (task == "rhyme") {
    d.task = TaskKind::rhyme;
  } else if (task == "qa") {
    d.task = TaskKind::qa;
  } else {
    throw ValidationError("/task: expected \"rhyme\" or \"qa\"");
  }
  const auto& t = require(j, "template", "");
  d.prompt_template.preamble = as_string(require(t, "preamble", "/template"), "/template/preamble");
  d.prompt_template.joiner = t.contains("joiner") ? as_string(t["joiner"], "/template/joiner") : "";
  d.prompt_template.postamble = as_string(require(t, "postamble", "/template"), "/template/postamble");
  const auto& cats = require(j, "categories", "");
  if (!cats.is_array() || cats.empty()) throw ValidationError("/categories: expected non-empty array");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string path = "/categories/" + std::to_string(i);
    const auto& jc = cats[i];
    PromptCategory c;
    c.id = as_string(require(jc, "id", path), path + "/id");
    const auto kind = as_string(require(jc, "kind", path), path + "/kind");
    if (kind == "rhyme_family") {
      c.kind = CategoryKind::rhyme_family;
    } else if (kind == "answer_noun") {
      c.kind = CategoryKind::answer_noun;
    } else if (kind == "marker_class") {
      c.kind = CategoryKind::marker_class;
    } else {
      throw ValidationError(path + "/kind: unknown category kind '" + kind + "'");
    }
    for (const auto& w : as_strings(require(jc, "lexicon", path), path + "/lexicon")) c.lexicon.insert(lowercase(w));
    c.train_prompts = as_strings(require(jc, "train", path), path + "/train");
    c.test_prompts = as_strings(require(jc, "test", path), path + "/test");
    if (jc.contains("neutral")) c.neutral_prompts = as_strings(jc["neutral"], path + "/neutral");
    if (jc.contains("article") && !jc["article"].is_null()) {
      const auto a = as_string(jc["article"], path + "/article");
      if (a != "a" && a != "an") throw ValidationError(path + "/article: expected \"a\" or \"an\"");
      c.article = a == "a" ? Article::a : Article::an;
    }
    d.categories.push_back(std::move(c));
  }
  if (j.contains("pairs")) {
    const auto& pairs = j["pairs"];
    if (!pairs.is_array()) throw ValidationError("/pairs: expected array");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const std::string path = "/pairs/" + std::to_string(i);
      CategoryPair p;
      p.source = as_string(require(pairs[i], "source", path), path + "/source");
      p.target = as_string(require(pairs[i], "target", path), path + "/target");
      d.pairs.push_back(std::move(p));
    }
  }
  if (j.contains("markers")) {
    const auto& m = j["markers"];
    if (!m.is_object()) throw ValidationError("/markers: expected object");
    for (auto it = m.begin(); it != m.end(); ++it) {
      auto words = as_strings(it.value(), "/markers/" + it.key());
      for (auto& w : words) w = lowercase(w);
      d.markers[it.key()] = std::move(words);
    }
  }
  std::set<std::string> ids;
  for (const auto& c : d.categories) {
    if (!ids.insert(c.id).second) throw ValidationError("/categories: duplicate category id '" + c.id + "'");
  }
  for (std::size_t i = 0; i < d.pairs.size(); ++i) {
    const auto& p = d.pairs[i];
    const std::string path = "/pairs/" + std::to_string(i);
    if (!ids.contains(p.source) || !ids.contains(p.target)) {
      throw ValidationError(path + ": pair references unknown category");
    }
    if (p.source == p.target) throw ValidationError(path + ": source and target must differ");
    if (d.category(p.source).kind != d.category(p.target).kind) {
      throw ValidationError(path + ": source and target must be the same kind");
    }
  }
  return d;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  try {
    return dataset_from_json(j);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  write_file(path, dataset_to_json(d).dump(2) + "\n");
}

// ---- validation --------------------------------------------------------------

enum class Severity { warning, error };

struct Violation {
  Severity severity = Severity::error;
  std::string category;
  std::string message;
};

inline constexpr double kBalanceThreshold = 0.30;

inline std::vector<Violation> validate(const PromptCategory& c) {
  std::vector<Violation> out;
  auto err = [&](std::string msg) { out.push_back({Severity::error, c.id, std::move(msg)}); };
  auto check_lines = [&](const std::vector<std::string>& lines, const char* split) {
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const std::string where = std::string(split) + "[" + std::to_string(i) + "]";
      if (trim(lines[i]).empty()) {
        err(where + ": empty prompt");
        continue;
      }
      if (c.kind != CategoryKind::rhyme_family) continue;
      std::string w;
      try {
        w = last_word(lines[i]);
      } catch (const Error&) {
        err(where + ": no alphabetic last word");
        continue;
      }
      if (!c.lexicon.contains(w)) err(where + ": last word '" + w + "' not in lexicon");
    }
  };
  check_lines(c.train_prompts, "train");
  check_lines(c.test_prompts, "test");
  const std::set<std::string> train(c.train_prompts.begin(), c.train_prompts.end());
  for (const auto& t : c.test_prompts) {
    if (train.contains(t)) err("train/test overlap: '" + t + "'");
  }
  if (c.kind == CategoryKind::answer_noun) {
    if (c.lexicon.size() != 1) err("answer_noun category needs exactly one lexicon entry");
    if (!c.article) {
      err("answer_noun category needs an article");
    } else if (!c.lexicon.empty()) {
      const char first = c.lexicon.begin()->empty() ? 'x' : c.lexicon.begin()->front();
      const bool vowel = std::string_view("aeiou").find(first) != std::string_view::npos;
      if (vowel != (*c.article == Article::an)) err("article inconsistent with initial letter of '" + *c.lexicon.begin() + "'");
    }
  }
  if (c.kind == CategoryKind::rhyme_family && !c.train_prompts.empty()) {
    std::map<std::string, std::size_t> counts;
    for (const auto& line : c.train_prompts) {
      if (has_letter(line)) ++counts[last_word(line)];
    }
    for (const auto& [w, n] : counts) {
      const double share = static_cast<double>(n) / static_cast<double>(c.train_prompts.size());
      if (share > kBalanceThreshold) {
        out.push_back({Severity::warning, c.id,
                       "unbalanced: '" + w + "' ends " + std::to_string(n) + "/" +
                           std::to_string(c.train_prompts.size()) + " train lines"});
      }
    }
  }
  return out;
}

inline std::vector<Violation> validate(const Dataset& d) {
  std::vector<Violation> out;
  for (const auto& c : d.categories) {
    auto v = validate(c);
    out.insert(out.end(), v.begin(), v.end());
  }
  std::map<std::string, std::string> owner;
  for (const auto& c : d.categories) {
    for (const auto& w : c.lexicon) {
      auto [it, inserted] = owner.emplace(w, c.id);
      if (!inserted) {
        out.push_back({Severity::error, c.id, "lexicon word '" + w + "' also in category '" + it->second + "'"});
      }
    }
  }
  return out;
}

inline bool has_errors(const std::vector<Violation>& v) {
  return std::any_of(v.begin(), v.end(), [](const Violation& x) { return x.severity == Severity::error; });
}

// ---- classification ----------------------------------------------------------

class LexiconIndex {
 public:
  explicit LexiconIndex(const std::vector<PromptCategory>& categories) {
    for (const auto& c : categories) {
      for (const auto& w : c.lexicon) {
        auto [it, inserted] = owner_.emplace(w, c.id);
        if (!inserted && it->second != c.id) {
          throw Error("classify: lexicons overlap on '" + w + "' ('" + it->second + "' and '" + c.id + "')");
        }
      }
    }
  }

  std::optional<std::string> classify_word(const std::string& word) const {
    auto it = owner_.find(word);
    if (it == owner_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<std::string> classify_line(std::string_view line) const {
    if (!has_letter(line)) return std::nullopt;
    return classify_word(last_word(line));
  }

 private:
  std::map<std::string, std::string> owner_;
};

inline std::optional<std::string> classify_last_word(std::string_view line,
                                                     const std::vector<PromptCategory>& categories) {
  return LexiconIndex(categories).classify_line(line);
}

struct AnswerCheck {
  bool contains_answer = false;
  std::optional<Article> article;
};

inline AnswerCheck answer_checks(std::string_view answer, std::string_view noun) {
  const auto line = lowercase(first_line(answer));
  AnswerCheck out;
  out.contains_answer = !noun.empty() && line.find(lowercase(noun)) != std::string::npos;
  for (const auto& w : words_of(line)) {
    if (w == "a") {
      out.article = Article::a;
      break;
    }
    if (w == "an") {
      out.article = Article::an;
      break;
    }
  }
  return out;
}

// ---- generation records ------------------------------------------------------

struct GenerationRecord {
  std::string prompt_id;
  std::string category;  // category whose test prompt produced the record
  std::string pair;      // "src->tgt" when steered, empty for baseline
  std::size_t sample_index = 0;
  std::uint64_t seed = 0;
  std::string prompt;
  Tokens prompt_tokens;
  std::string completion;
  Tokens completion_tokens;
  bool operator==(const GenerationRecord&) const = default;
};

inline nlohmann::json record_to_json(const GenerationRecord& r) {
  return {{"prompt_id", r.prompt_id},
          {"category", r.category},
          {"pair", r.pair},
          {"sample_index", r.sample_index},
          {"seed", r.seed},
          {"prompt", r.prompt},
          {"prompt_tokens", r.prompt_tokens},
          {"completion", r.completion},
          {"completion_tokens", r.completion_tokens}};
}

inline GenerationRecord record_from_json(const nlohmann::json& j) {
  GenerationRecord r;
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.category = j.at("category").get<std::string>();
  r.pair = j.value("pair", "");
  r.sample_index = j.at("sample_index").get<std::size_t>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.prompt = j.at("prompt").get<std::string>();
  r.prompt_tokens = j.at("prompt_tokens").get<Tokens>();
  r.completion = j.at("completion").get<std::string>();
  r.completion_tokens = j.at("completion_tokens").get<Tokens>();
  return r;
}

using CoupletCollection = std::vector<GenerationRecord>;

inline std::string collection_to_jsonl(const CoupletCollection& c) {
  std::string out;
  for (const auto& r : c) out += record_to_json(r).dump() + "\n";
  return out;
}

inline CoupletCollection collection_from_jsonl(std::string_view text) {
  CoupletCollection out;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("collection line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void save_collection(const std::filesystem::path& path, const CoupletCollection& c) {
  write_file(path, collection_to_jsonl(c));
}
inline CoupletCollection load_collection(const std::filesystem::path& path) {
  return collection_from_jsonl(read_file(path));
}

}  // namespace planlab
