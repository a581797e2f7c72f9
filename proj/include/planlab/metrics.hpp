#pragma once

// Metric kernels. Everything here is a pure function of collections, traces or
// rate tables; model-driven protocols live in experiment.hpp.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "planlab/container.hpp"
#include "planlab/corpus.hpp"
#include "planlab/tokenizer.hpp"

namespace planlab {

// Column names are part of the output contract.
namespace metric_names {
inline constexpr const char* kRhymeFamily = "fraction_correct_rhyme_family";
inline constexpr const char* kRhymeFamilySteered = "fraction_correct_rhyme_family_steered";
inline constexpr const char* kRegeneration = "fraction_correct_last_word_regeneration";
inline constexpr const char* kRegenerationSteered = "fraction_correct_last_word_regeneration_steered";
inline constexpr const char* kRegenerationChance = "regeneration_chance_baseline";
inline constexpr const char* kAnswer = "fraction_correct_answer";
inline constexpr const char* kAnswerSteered = "fraction_correct_answer_steered";
inline constexpr const char* kArticleA = "fraction_a";
inline constexpr const char* kArticleAn = "fraction_an";
inline constexpr const char* kArticleASteered = "fraction_a_steered";
inline constexpr const char* kArticleAnSteered = "fraction_an_steered";
inline constexpr const char* kTop1 = "fraction_top1_difference";
inline constexpr const char* kHighKl = "fraction_high_kl_divergence";
inline constexpr const char* kAfterTop1 = "fraction_tokens_after_first_top1_difference";
inline constexpr const char* kAfterHighKl = "fraction_tokens_after_first_high_kl_divergence";
}  // namespace metric_names

struct MetricReport {
  std::string experiment;
  std::string model;
  std::string pair;      // "src->tgt", or empty
  std::string category;  // category id, or empty
  std::string metric;
  double value = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool is_fraction = true;

  void validate() const {
    if (metric.empty()) throw Error("metric report: empty metric name");
    if (samples == 0) throw Error("metric report '" + metric + "': sample count must be positive");
    if (!std::isfinite(value)) throw Error("metric report '" + metric + "': non-finite value");
    if (is_fraction && (value < 0.0 || value > 1.0)) throw Error("metric report '" + metric + "': fraction outside [0, 1]");
  }
};

// ---- rhyme -----------------------------------------------------------------------

// The generated second line: completion text up to its first newline.
inline std::string second_line_text(const GenerationRecord& r) { return first_line(r.completion); }

inline double fraction_correct_rhyme_family(const CoupletCollection& c, const LexiconIndex& index,
                                            const std::string& family) {
  if (c.empty()) throw Error("fraction_correct_rhyme_family: empty collection");
  std::size_t hits = 0;
  for (const auto& r : c) {
    if (index.classify_line(second_line_text(r)) == family) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(c.size());
}

// Second line with its last word removed, no preamble and no first line.
inline std::string build_regeneration_prompt(std::string_view second_line) {
  auto line = std::string(trim(first_line(second_line)));
  const auto words = words_of(line);
  if (words.size() < 2) throw Error("regeneration prompt: second line needs at least two words: '" + line + "'");
  // Cut right before the final alphabetic run.
  const auto cps = utf8::codepoints(line);
  std::size_t end = cps.size();
  while (end > 0 && !is_letter(cps[end - 1])) --end;
  while (end > 0 && (is_letter(cps[end - 1]) ||
                     (detail::is_apostrophe(cps[end - 1]) && end >= 2 && is_letter(cps[end - 2])))) {
    --end;
  }
  std::string out;
  for (std::size_t i = 0; i < end; ++i) utf8::append(out, cps[i]);
  return std::string(trim(out));
}

// rates[F][G]: fraction of F-line regenerations that produced a G word.
using RegenerationTable = std::map<std::string, std::map<std::string, double>>;

// For family F, mean over G != F of rates[F][G].
inline std::map<std::string, double> regeneration_chance_baseline(const RegenerationTable& rates) {
  std::set<std::string> families;
  for (const auto& [f, row] : rates) {
    families.insert(f);
    for (const auto& [g, v] : row) families.insert(g);
  }
  if (families.size() < 2) throw Error("regeneration baseline: needs at least two families");
  std::map<std::string, double> out;
  for (const auto& [f, row] : rates) {
    double sum = 0;
    for (const auto& g : families) {
      if (g == f) continue;
      auto it = row.find(g);
      sum += it == row.end() ? 0.0 : it->second;
    }
    out[f] = sum / static_cast<double>(families.size() - 1);
  }
  return out;
}

// ---- probability traces ------------------------------------------------------------

// Natural-log KL(p || q); terms with p == 0 contribute nothing.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("kl_divergence: dimension mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

struct DistributionTrace {
  std::vector<std::vector<double>> baseline;  // one distribution per second-line position
  std::vector<std::vector<double>> steered;
};
using DistributionTracePair = std::vector<DistributionTrace>;

enum class DivergenceCriterion { top1_diff, high_kl };
inline constexpr double kHighKlThreshold = 1.0;

namespace detail {

inline void check_trace(const DistributionTrace& t) {
  if (t.baseline.empty()) throw Error("trace: empty second-line span");
  if (t.baseline.size() != t.steered.size()) throw Error("trace: baseline and steered spans differ in length");
}

inline std::size_t top1(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline bool meets(const DistributionTrace& t, std::size_t j, DivergenceCriterion c, double threshold) {
  if (c == DivergenceCriterion::top1_diff) return top1(t.baseline[j]) != top1(t.steered[j]);
  return kl_divergence(t.baseline[j], t.steered[j]) > threshold;
}

inline double per_record_mean(const DistributionTracePair& traces, const std::function<double(const DistributionTrace&)>& f) {
  if (traces.empty()) throw Error("trace metric: no records");
  double sum = 0;
  for (const auto& t : traces) {
    check_trace(t);
    sum += f(t);
  }
  return sum / static_cast<double>(traces.size());
}

inline double fraction_meeting(const DistributionTracePair& traces, DivergenceCriterion c, double threshold) {
  return per_record_mean(traces, [&](const DistributionTrace& t) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < t.baseline.size(); ++j) n += meets(t, j, c, threshold) ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(t.baseline.size());
  });
}

}  // namespace detail

// Per record, fraction of positions with KL(baseline, steered) > threshold; mean over records.
inline double fraction_high_kl(const DistributionTracePair& traces, double threshold = kHighKlThreshold) {
  return detail::fraction_meeting(traces, DivergenceCriterion::high_kl, threshold);
}

inline double fraction_top1_difference(const DistributionTracePair& traces) {
  return detail::fraction_meeting(traces, DivergenceCriterion::top1_diff, 0.0);
}

// (span - first) / span for the first qualifying position, 0 when none qualifies.
inline double tokens_after_first(const DistributionTracePair& traces, DivergenceCriterion c,
                                 double threshold = kHighKlThreshold) {
  return detail::per_record_mean(traces, [&](const DistributionTrace& t) {
    const std::size_t n = t.baseline.size();
    for (std::size_t j = 0; j < n; ++j) {
      if (detail::meets(t, j, c, threshold)) return static_cast<double>(n - j) / static_cast<double>(n);
    }
    return 0.0;
  });
}

// ---- QA ------------------------------------------------------------------------------

struct QaFractions {
  double correct_answer = 0.0;
  double a = 0.0;
  double an = 0.0;
};

inline QaFractions qa_fractions(const CoupletCollection& c, const std::string& noun) {
  if (c.empty()) throw Error("qa_fractions: empty collection");
  QaFractions f;
  for (const auto& r : c) {
    const auto check = answer_checks(r.completion, noun);
    f.correct_answer += check.contains_answer ? 1.0 : 0.0;
    f.a += check.article == Article::a ? 1.0 : 0.0;
    f.an += check.article == Article::an ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(c.size());
  f.correct_answer /= n;
  f.a /= n;
  f.an /= n;
  return f;
}

// Per class, the fraction of records whose first line holds one of its words.
inline std::map<std::string, double> marker_fraction(const CoupletCollection& c,
                                                     const std::map<std::string, std::vector<std::string>>& classes) {
  if (c.empty()) throw Error("marker_fraction: empty collection");
  std::map<std::string, std::string> owner;
  for (const auto& [cls, words] : classes) {
    for (const auto& w : words) {
      auto [it, inserted] = owner.emplace(lowercase(w), cls);
      if (!inserted && it->second != cls) throw Error("marker_fraction: classes overlap on '" + w + "'");
    }
  }
  std::map<std::string, double> out;
  for (const auto& [cls, words] : classes) out[cls] = 0.0;
  for (const auto& r : c) {
    std::set<std::string> seen;
    for (const auto& w : words_of(first_line(r.completion))) {
      if (auto it = owner.find(w); it != owner.end()) seen.insert(it->second);
    }
    for (const auto& cls : seen) out[cls] += 1.0;
  }
  for (auto& [cls, v] : out) v /= static_cast<double>(c.size());
  return out;
}

// ---- correlations ---------------------------------------------------------------------

enum class CorrelationGrouping { per_prompt, per_model };

struct CorrelationMatrix {
  std::vector<std::string> metrics;
  std::vector<std::vector<std::optional<double>>> r;  // nullopt: zero variance
};

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Pearson correlation of every metric pair over aligned observations. An
// observation is (model, pair, category) per prompt group, or the model mean.
inline CorrelationMatrix correlation_report(const std::vector<MetricReport>& reports, CorrelationGrouping grouping) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::map<std::string, std::map<Key, std::pair<double, std::size_t>>> table;
  for (const auto& r : reports) {
    const Key key = grouping == CorrelationGrouping::per_prompt ? Key{r.model, r.pair, r.category} : Key{r.model, "", ""};
    auto& cell = table[r.metric][key];
    cell.first += r.value;
    cell.second += 1;
  }
  CorrelationMatrix m;
  for (const auto& [name, rows] : table) m.metrics.push_back(name);
  const std::size_t k = m.metrics.size();
  if (k == 0) throw Error("correlation_report: no reports");
  m.r.assign(k, std::vector<std::optional<double>>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      std::vector<double> x, y;
      const auto& a = table[m.metrics[i]];
      const auto& b = table[m.metrics[j]];
      for (const auto& [key, va] : a) {
        auto it = b.find(key);
        if (it == b.end()) continue;
        x.push_back(va.first / static_cast<double>(va.second));
        y.push_back(it->second.first / static_cast<double>(it->second.second));
      }
      if (x.size() < 3) {
        throw Error("correlation_report: only " + std::to_string(x.size()) + " aligned observations for '" +
                    m.metrics[i] + "' and '" + m.metrics[j] + "' (need >= 3)");
      }
      auto v = pearson(x, y);
      if (i == j && v) v = 1.0;
      m.r[i][j] = v;
      m.r[j][i] = v;
    }
  }
  return m;
}

// ---- token analysis --------------------------------------------------------------------

struct TokenStats {
  std::map<std::string, double> single_token_fraction;        // " word" variant, per category
  std::map<std::string, double> single_token_fraction_bare;   // "word" variant
  double overall = 0.0;
  double overall_bare = 0.0;
  std::optional<double> within_family_cosine;
  std::optional<double> cross_family_cosine;
};

// `embedding` is the [vocab, dim] token embedding table; without it the cosine
// report is skipped only when `require_embedding` is false.
inline TokenStats token_stats(const Vocabulary& vocab, const std::vector<PromptCategory>& categories,
                              const Tensor* embedding, bool require_embedding = true) {
  if (categories.empty()) throw Error("token_stats: no categories");
  if (!embedding && require_embedding) throw Error("token_stats: missing embedding table");
  TokenStats s;
  std::size_t total = 0, single = 0, single_bare = 0;
  std::map<std::string, std::vector<TokenId>> last_tokens;
  for (const auto& c : categories) {
    if (c.lexicon.empty()) throw Error("token_stats: category '" + c.id + "' has no lexicon");
    std::size_t hit = 0, hit_bare = 0;
    for (const auto& w : c.lexicon) {
      const auto spaced = vocab.encode(" " + w);
      const auto bare = vocab.encode(w);
      hit += spaced.size() == 1 ? 1 : 0;
      hit_bare += bare.size() == 1 ? 1 : 0;
      last_tokens[c.id].push_back(spaced.back());
    }
    const auto n = static_cast<double>(c.lexicon.size());
    s.single_token_fraction[c.id] = static_cast<double>(hit) / n;
    s.single_token_fraction_bare[c.id] = static_cast<double>(hit_bare) / n;
    total += c.lexicon.size();
    single += hit;
    single_bare += hit_bare;
  }
  s.overall = static_cast<double>(single) / static_cast<double>(total);
  s.overall_bare = static_cast<double>(single_bare) / static_cast<double>(total);
  if (embedding) {
    if (embedding->shape.size() != 2 || embedding->shape[0] < vocab.size()) {
      throw Error("token_stats: embedding table does not cover the vocabulary");
    }
    auto cosine = [&](TokenId a, TokenId b) {
      const float* x = embedding->row(static_cast<std::size_t>(a));
      const float* y = embedding->row(static_cast<std::size_t>(b));
      double xy = 0, xx = 0, yy = 0;
      for (std::size_t i = 0; i < embedding->shape[1]; ++i) {
        xy += static_cast<double>(x[i]) * y[i];
        xx += static_cast<double>(x[i]) * x[i];
        yy += static_cast<double>(y[i]) * y[i];
      }
      return xx > 0 && yy > 0 ? xy / std::sqrt(xx * yy) : 0.0;
    };
    double within = 0, cross = 0;
    std::size_t nw = 0, nc = 0;
    for (auto ia = last_tokens.begin(); ia != last_tokens.end(); ++ia) {
      const auto& a = ia->second;
      for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = i + 1; j < a.size(); ++j) {
          within += cosine(a[i], a[j]);
          ++nw;
        }
      }
      for (auto ib = std::next(ia); ib != last_tokens.end(); ++ib) {
        for (auto x : a) {
          for (auto y : ib->second) {
            cross += cosine(x, y);
            ++nc;
          }
        }
      }
    }
    if (nw) s.within_family_cosine = within / static_cast<double>(nw);
    if (nc) s.cross_family_cosine = cross / static_cast<double>(nc);
  }
  return s;
}

}  // namespace planlab
