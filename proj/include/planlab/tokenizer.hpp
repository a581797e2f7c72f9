#pragma once

// Byte-level BPE (GPT-2 conventions) plus the structural parsing the steering
// experiments rely on: anchor positions, second-line spans, last words.

#include <algorithm>
#include <array>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "planlab/anchors.hpp"
#include "planlab/container.hpp"
#include "planlab/util.hpp"

namespace planlab {

namespace bytelevel {

// GPT-2 byte <-> printable code point table.
struct Table {
  std::array<char32_t, 256> to_cp{};
  std::unordered_map<char32_t, unsigned char> to_byte;

  Table() {
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<char32_t> cs(bs.begin(), bs.end());
    int n = 0;
    for (int b = 0; b < 256; ++b) {
      if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
        bs.push_back(b);
        cs.push_back(static_cast<char32_t>(256 + n++));
      }
    }
    for (std::size_t i = 0; i < bs.size(); ++i) {
      to_cp[static_cast<std::size_t>(bs[i])] = cs[i];
      to_byte[cs[i]] = static_cast<unsigned char>(bs[i]);
    }
  }
};

inline const Table& table() {
  static const Table t;
  return t;
}

inline std::string encode_bytes(std::string_view bytes) {
  std::string out;
  for (unsigned char b : bytes) utf8::append(out, table().to_cp[b]);
  return out;
}

// Returns nullopt when the string uses code points outside the byte alphabet
// (special tokens such as <|endoftext|>).
inline std::optional<std::string> decode_symbols(std::string_view symbols) {
  std::string out;
  for (char32_t cp : utf8::codepoints(symbols)) {
    auto it = table().to_byte.find(cp);
    if (it == table().to_byte.end()) return std::nullopt;
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

}  // namespace bytelevel

// GPT-2 pre-tokenization:
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
inline std::vector<std::string> pretokenize(std::string_view text) {
  const auto cps = utf8::codepoints(text);
  // Byte offsets of each code point so chunks keep the original bytes.
  std::vector<std::size_t> offs;
  offs.reserve(cps.size() + 1);
  for (std::size_t i = 0; i < text.size();) {
    offs.push_back(i);
    i += utf8::decode_one(text, i).len;
  }
  offs.push_back(text.size());
  const std::size_t n = cps.size();
  auto cls = [&](std::size_t i) {
    if (is_letter(cps[i])) return 0;
    if (is_digit(cps[i])) return 1;
    if (is_space(cps[i])) return 2;
    return 3;
  };
  std::vector<std::string> out;
  auto emit = [&](std::size_t a, std::size_t b) { out.emplace_back(text.substr(offs[a], offs[b] - offs[a])); };
  std::size_t i = 0;
  while (i < n) {
    if (cps[i] == U'\'' && i + 1 < n) {
      const char32_t c1 = cps[i + 1];
      const char32_t c2 = i + 2 < n ? cps[i + 2] : 0;
      if (c1 == U's' || c1 == U't' || c1 == U'm' || c1 == U'd') {
        emit(i, i + 2);
        i += 2;
        continue;
      }
      if ((c1 == U'r' && c2 == U'e') || (c1 == U'v' && c2 == U'e') || (c1 == U'l' && c2 == U'l')) {
        emit(i, i + 3);
        i += 3;
        continue;
      }
    }
    std::size_t j = i;
    if (cps[i] == U' ' && i + 1 < n && cls(i + 1) != 2) j = i + 1;
    const int c = cls(j);
    if (c != 2) {
      std::size_t e = j + 1;
      while (e < n && cls(e) == c) ++e;
      emit(i, e);
      i = e;
      continue;
    }
    std::size_t e = i;
    while (e < n && cls(e) == 2) ++e;
    if (e == n || e - i == 1) {
      emit(i, e);
      i = e;
    } else {
      emit(i, e - 1);
      i = e - 1;
    }
  }
  return out;
}

class Vocabulary {
 public:
  using Merge = std::pair<std::string, std::string>;

  // `tokens` maps byte-level token strings (GPT-2 alphabet) to ids.
  static Vocabulary create(const std::map<std::string, TokenId>& tokens, const std::vector<Merge>& merges) {
    Vocabulary v;
    const std::size_t n = tokens.size();
    v.id_to_symbols_.assign(n, {});
    v.id_to_bytes_.assign(n, {});
    std::vector<bool> seen(n, false);
    for (const auto& [sym, id] : tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= n || seen[static_cast<std::size_t>(id)]) {
        throw ValidationError("vocab: ids must be dense and unique in [0, " + std::to_string(n) + ")");
      }
      seen[static_cast<std::size_t>(id)] = true;
      v.id_to_symbols_[static_cast<std::size_t>(id)] = sym;
      // "<|...|>" names are control tokens even though their characters are
      // all inside the byte alphabet.
      const bool control = sym.size() > 4 && sym.starts_with("<|") && sym.ends_with("|>");
      auto bytes = control ? std::nullopt : bytelevel::decode_symbols(sym);
      if (bytes) {
        v.id_to_bytes_[static_cast<std::size_t>(id)] = *bytes;
      } else {
        v.id_to_bytes_[static_cast<std::size_t>(id)] = sym;
        v.special_.insert(id);
      }
      v.symbol_to_id_.emplace(sym, id);
    }
    for (int b = 0; b < 256; ++b) {
      std::string sym;
      utf8::append(sym, bytelevel::table().to_cp[static_cast<std::size_t>(b)]);
      if (!v.symbol_to_id_.contains(sym)) {
        throw ValidationError("vocab: missing single-byte token for byte " + std::to_string(b));
      }
    }
    for (std::size_t r = 0; r < merges.size(); ++r) {
      v.merge_rank_.emplace(merges[r].first + " " + merges[r].second, static_cast<int>(r));
    }
    v.merges_ = merges;
    for (std::size_t id = 0; id < n; ++id) {
      const auto& b = v.id_to_bytes_[id];
      if (v.special_.contains(static_cast<TokenId>(id))) {
        if (v.id_to_symbols_[id] == "<|endoftext|>") v.end_of_text_ = static_cast<TokenId>(id);
        continue;
      }
      const bool all_space = !b.empty() && std::all_of(b.begin(), b.end(), [](char c) {
        return c == ' ' || c == '\n' || c == '\r' || c == '\t';
      });
      if (all_space && b.find('\n') != std::string::npos) v.newline_ids_.push_back(static_cast<TokenId>(id));
      const auto t = trim(b);
      if (!t.empty() && t.back() == '?') v.question_ids_.push_back(static_cast<TokenId>(id));
    }
    return v;
  }

  static Vocabulary load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(vocab_json));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("vocab: " + vocab_json.string() + ": " + e.what());
    }
    std::map<std::string, TokenId> tokens;
    for (auto it = j.begin(); it != j.end(); ++it) tokens.emplace(it.key(), it.value().get<TokenId>());
    std::vector<Merge> merges;
    const std::string text = read_file(merges_txt);
    for (const auto& raw : split(text, '\n')) {
      auto line = std::string(trim(raw));
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw ValidationError("merges: malformed line '" + line + "'");
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return create(tokens, merges);
  }

  // Accepts a directory holding vocab.json + merges.txt, or the vocab.json path.
  static Vocabulary load(const std::filesystem::path& path) {
    if (std::filesystem::is_directory(path)) return load(path / "vocab.json", path / "merges.txt");
    return load(path, path.parent_path() / "merges.txt");
  }

  void save(const std::filesystem::path& dir) const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t id = 0; id < id_to_symbols_.size(); ++id) j[id_to_symbols_[id]] = id;
    write_file(dir / "vocab.json", j.dump());
    std::string merges = "#version: 0.2\n";
    for (const auto& [a, b] : merges_) merges += a + " " + b + "\n";
    write_file(dir / "merges.txt", merges);
  }

  std::size_t size() const { return id_to_bytes_.size(); }
  const std::vector<TokenId>& newline_ids() const { return newline_ids_; }
  const std::vector<TokenId>& question_ids() const { return question_ids_; }
  std::optional<TokenId> end_of_text() const { return end_of_text_; }
  bool is_newline(TokenId id) const { return std::find(newline_ids_.begin(), newline_ids_.end(), id) != newline_ids_.end(); }
  bool is_question(TokenId id) const {
    return std::find(question_ids_.begin(), question_ids_.end(), id) != question_ids_.end();
  }

  const std::string& token_bytes(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw Error("decode: unknown token id " + std::to_string(id));
    return id_to_bytes_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find_symbol(const std::string& symbols) const {
    auto it = symbol_to_id_.find(symbols);
    if (it == symbol_to_id_.end()) return std::nullopt;
    return it->second;
  }

  // Id of the token whose bytes are exactly `text`, if any.
  std::optional<TokenId> find_text(std::string_view text) const { return find_symbol(bytelevel::encode_bytes(text)); }

  Tokens encode(std::string_view text) const {
    Tokens out;
    for (const auto& chunk : pretokenize(text)) encode_chunk(chunk, out);
    return out;
  }

  std::string decode_bytes(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) out += token_bytes(id);
    return out;
  }

  // Lossy: invalid UTF-8 becomes U+FFFD.
  std::string decode(std::span<const TokenId> ids) const { return utf8::sanitize(decode_bytes(ids)); }

 private:
  void encode_chunk(const std::string& chunk, Tokens& out) const {
    std::vector<std::string> parts;
    for (unsigned char b : chunk) {
      std::string sym;
      utf8::append(sym, bytelevel::table().to_cp[b]);
      parts.push_back(std::move(sym));
    }
    while (parts.size() > 1) {
      int best = std::numeric_limits<int>::max();
      std::size_t best_i = 0;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        auto it = merge_rank_.find(parts[i] + " " + parts[i + 1]);
        if (it != merge_rank_.end() && it->second < best) {
          best = it->second;
          best_i = i;
        }
      }
      if (best == std::numeric_limits<int>::max()) break;
      const std::string a = parts[best_i];
      const std::string b = parts[best_i + 1];
      std::vector<std::string> merged;
      merged.reserve(parts.size());
      for (std::size_t i = 0; i < parts.size();) {
        if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
          merged.push_back(a + b);
          i += 2;
        } else {
          merged.push_back(parts[i]);
          ++i;
        }
      }
      parts = std::move(merged);
    }
    for (const auto& p : parts) {
      auto it = symbol_to_id_.find(p);
      if (it != symbol_to_id_.end()) {
        out.push_back(it->second);
      } else {
        // Merge product absent from the table: fall back to its bytes.
        for (char32_t cp : utf8::codepoints(p)) {
          std::string sym;
          utf8::append(sym, cp);
          out.push_back(symbol_to_id_.at(sym));
        }
      }
    }
  }

  std::vector<std::string> id_to_symbols_;
  std::vector<std::string> id_to_bytes_;
  std::unordered_map<std::string, TokenId> symbol_to_id_;
  std::unordered_map<std::string, int> merge_rank_;
  std::vector<Merge> merges_;
  std::set<TokenId> special_;
  std::vector<TokenId> newline_ids_;
  std::vector<TokenId> question_ids_;
  std::optional<TokenId> end_of_text_;
};

// Vocabulary of the 256 byte tokens plus one whole-word token per entry of
// `words`, built from left-to-right merge chains. Words should carry their
// leading space (" light") or start a line ("In").
inline Vocabulary make_word_vocabulary(const std::vector<std::string>& words, bool with_end_of_text = true) {
  std::map<std::string, TokenId> tokens;
  std::vector<Vocabulary::Merge> merges;
  std::set<std::string> known;
  TokenId next = 0;
  for (int b = 0; b < 256; ++b) {
    std::string sym;
    utf8::append(sym, bytelevel::table().to_cp[static_cast<std::size_t>(b)]);
    tokens.emplace(sym, next++);
    known.insert(sym);
  }
  std::set<std::pair<std::string, std::string>> merge_set;
  for (const auto& word : words) {
    std::vector<std::string> syms;
    for (unsigned char b : word) {
      std::string sym;
      utf8::append(sym, bytelevel::table().to_cp[b]);
      syms.push_back(sym);
    }
    if (syms.size() < 2) continue;
    std::string acc = syms[0];
    for (std::size_t i = 1; i < syms.size(); ++i) {
      if (merge_set.insert({acc, syms[i]}).second) merges.emplace_back(acc, syms[i]);
      acc += syms[i];
      if (known.insert(acc).second) tokens.emplace(acc, next++);
    }
  }
  if (with_end_of_text) tokens.emplace("<|endoftext|>", next++);
  return Vocabulary::create(tokens, merges);
}

inline bool has_letter(std::string_view text) {
  for (char32_t cp : utf8::codepoints(text)) {
    if (is_letter(cp)) return true;
  }
  return false;
}

inline PositionAnchors locate_anchors(const Vocabulary& vocab, std::span<const TokenId> prompt) {
  std::optional<std::size_t> newline;
  for (std::size_t i = prompt.size(); i-- > 0;) {
    if (vocab.is_newline(prompt[i])) {
      newline = i;
      break;
    }
  }
  if (!newline) throw Error("anchors: prompt contains no newline token");
  PositionAnchors a;
  a.last_newline = *newline;
  bool found = false;
  for (std::size_t i = *newline; i-- > 0;) {
    if (has_letter(vocab.token_bytes(prompt[i]))) {
      a.last_word_final_token = i;
      found = true;
      break;
    }
  }
  if (!found) throw Error("anchors: no alphabetic token before the last newline");
  for (std::size_t i = *newline; i-- > 0;) {
    if (vocab.is_question(prompt[i])) {
      a.question_mark = i;
      break;
    }
  }
  return a;
}

struct SecondLineSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - start; }
};

inline SecondLineSpan second_line_span(const Vocabulary& vocab, std::span<const TokenId> couplet,
                                       std::size_t prompt_length) {
  if (couplet.size() <= prompt_length) throw Error("second_line_span: empty generation");
  std::size_t end = couplet.size();
  for (std::size_t i = prompt_length; i < couplet.size(); ++i) {
    if (vocab.is_newline(couplet[i])) {
      end = i;
      break;
    }
  }
  if (end == prompt_length) throw Error("second_line_span: empty second line");
  return {prompt_length, end};
}

namespace detail {
inline bool is_apostrophe(char32_t cp) { return cp == U'\'' || cp == 0x2019; }
}  // namespace detail

// Final alphabetic run of a line (apostrophes allowed inside), lowercased.
inline std::string last_word(std::string_view line) {
  const auto cps = utf8::codepoints(line);
  std::size_t end = cps.size();
  while (end > 0 && !is_letter(cps[end - 1])) --end;
  if (end == 0) throw Error("last_word: no alphabetic content in '" + std::string(line) + "'");
  std::size_t start = end - 1;
  while (start > 0) {
    const char32_t prev = cps[start - 1];
    if (is_letter(prev)) {
      --start;
    } else if (detail::is_apostrophe(prev) && start >= 2 && is_letter(cps[start - 2])) {
      --start;
    } else {
      break;
    }
  }
  std::string out;
  for (std::size_t i = start; i < end; ++i) utf8::append(out, to_lower(cps[i]));
  return out;
}

// First alphabetic run of a text (apostrophes allowed inside), lowercased.
inline std::optional<std::string> first_word(std::string_view text) {
  const auto cps = utf8::codepoints(text);
  std::size_t i = 0;
  while (i < cps.size() && !is_letter(cps[i])) ++i;
  if (i == cps.size()) return std::nullopt;
  std::string out;
  while (i < cps.size()) {
    if (is_letter(cps[i])) {
      utf8::append(out, to_lower(cps[i]));
    } else if (detail::is_apostrophe(cps[i]) && i + 1 < cps.size() && is_letter(cps[i + 1])) {
      utf8::append(out, cps[i]);
    } else {
      break;
    }
    ++i;
  }
  return out;
}

// Words (letters, digits, inner apostrophes), lowercased, in order.
inline std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  const auto cps = utf8::codepoints(text);
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const char32_t cp = cps[i];
    const bool inner_apos = detail::is_apostrophe(cp) && !cur.empty() && i + 1 < cps.size() && is_letter(cps[i + 1]);
    if (is_letter(cp) || is_digit(cp) || inner_apos) {
      utf8::append(cur, to_lower(cp));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string first_line(std::string_view text) {
  const auto pos = text.find('\n');
  return std::string(pos == std::string_view::npos ? text : text.substr(0, pos));
}

}  // namespace planlab
