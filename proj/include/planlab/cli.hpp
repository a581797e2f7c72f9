#pragma once

// Command-line surface. Every subcommand writes CSV/JSON into --out; exit code
// 0 on success, 1 on validation failure, 2 on execution error.

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "planlab/corpus.hpp"
#include "planlab/experiment.hpp"
#include "planlab/planted.hpp"
#include "planlab/report.hpp"
#include "planlab/selftest.hpp"

namespace planlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitError = 2;

struct Options {
  std::string model;
  std::string vocab;
  std::string dataset;
  std::vector<std::string> pairs;
  std::vector<std::string> anchors;
  std::string layers;
  float multiplier = kDefaultMultiplier;
  std::size_t samples = kDefaultSamples;
  std::size_t sweep_samples = kDefaultSweepSamples;
  std::uint64_t seed = 0;
  std::string out;
  std::string collections;
  double temperature = 1.0;
  std::size_t max_new_tokens = 24;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  bool svg = false;
  bool per_prompt = false;
  bool baseline_only = false;
  std::size_t repeats = 3;
  std::size_t regen_samples = 1;
  bool keep_preamble = false;
  std::optional<std::size_t> prompts;
  std::vector<std::string> inputs;
  std::string grouping = "per_prompt";
  std::vector<std::string> metrics;
  std::uint64_t planted_seed = 0;
  double marker_strength = 4.0;
  std::size_t max_context = 64;
};

// ---- helpers ---------------------------------------------------------------------------

namespace detail {

namespace fs = std::filesystem;

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a64(read_file(p))); }

// File-name-safe form of a category or pair id.
inline std::string slug(std::string_view id) {
  std::string out;
  for (std::size_t i = 0; i < id.size(); ++i) {
    if (id.substr(i, 2) == "->") {
      out += "__";
      ++i;
    } else {
      const char c = id[i];
      out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    }
  }
  return out;
}

inline fs::path model_file(const Options& o) {
  if (o.model.empty()) throw ValidationError("--model is required");
  fs::path p = o.model;
  if (fs::is_directory(p)) p /= "model.plnl";
  if (!fs::exists(p)) throw ValidationError("model file not found: " + p.string());
  return p;
}

inline fs::path vocab_path(const Options& o) {
  if (!o.vocab.empty()) return o.vocab;
  if (o.model.empty()) throw ValidationError("--vocab is required");
  const fs::path m = o.model;
  return fs::is_directory(m) ? m : m.parent_path();
}

// Report-facing model id: the container's stem, or its directory for model.plnl.
inline std::string model_name(const fs::path& file) {
  if (file.stem() == "model" && file.has_parent_path()) {
    const auto dir = fs::absolute(file).parent_path().filename().string();
    if (!dir.empty()) return dir;
  }
  return file.stem().string();
}

inline fs::path out_dir(const Options& o) {
  if (o.out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw Error("cannot create output directory " + o.out + ": " + ec.message());
  return o.out;
}

inline void write(const fs::path& dir, const std::string& name, const std::string& body) {
  const auto path = dir / name;
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw Error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  write_file(path, body);
}

inline Dataset dataset(const Options& o) {
  if (o.dataset.empty()) throw ValidationError("--dataset is required");
  if (!fs::exists(o.dataset)) throw ValidationError("dataset file not found: " + o.dataset);
  return load_dataset(o.dataset);
}

inline CategoryPair parse_pair(const Dataset& d, const std::string& text) {
  const auto arrow = text.find("->");
  if (arrow == std::string::npos) throw ValidationError("--pair '" + text + "': expected SOURCE->TARGET");
  CategoryPair p{text.substr(0, arrow), text.substr(arrow + 2)};
  try {
    if (d.category(p.source).kind != d.category(p.target).kind) {
      throw ValidationError("--pair '" + text + "': source and target are different kinds");
    }
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw ValidationError("--pair '" + text + "': " + e.what());
  }
  if (p.source == p.target) throw ValidationError("--pair '" + text + "': source and target must differ");
  return p;
}

inline std::vector<CategoryPair> pairs(const Options& o, const Dataset& d) {
  if (o.pairs.empty()) {
    if (d.pairs.empty()) throw ValidationError("dataset declares no pairs; pass --pair=SOURCE->TARGET");
    return d.pairs;
  }
  std::vector<CategoryPair> out;
  for (const auto& p : o.pairs) out.push_back(parse_pair(d, p));
  return out;
}

// "all", "middle", or a comma list of indices and a-b ranges.
inline std::vector<std::size_t> layers(const Options& o, std::size_t layer_count) {
  const std::string s = o.layers.empty() ? "middle" : o.layers;
  if (s == "all") {
    std::vector<std::size_t> out(layer_count);
    for (std::size_t i = 0; i < layer_count; ++i) out[i] = i;
    return out;
  }
  if (s == "middle") return middle_layers(layer_count);
  std::set<std::size_t> out;
  auto number = [&](std::string_view t) -> std::size_t {
    const std::string str(trim(t));
    char* end = nullptr;
    const unsigned long v = std::strtoul(str.c_str(), &end, 10);
    if (str.empty() || *end != '\0') throw ValidationError("--layers: bad layer '" + str + "'");
    if (v >= layer_count) {
      throw ValidationError("--layers: layer " + str + " out of range (model has " + std::to_string(layer_count) + ")");
    }
    return v;
  };
  for (const auto& part : split(s, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.insert(number(part));
    } else {
      const auto lo = number(std::string_view(part).substr(0, dash));
      const auto hi = number(std::string_view(part).substr(dash + 1));
      if (lo > hi) throw ValidationError("--layers: empty range '" + part + "'");
      for (std::size_t l = lo; l <= hi; ++l) out.insert(l);
    }
  }
  return {out.begin(), out.end()};
}

inline std::size_t single_layer(const Options& o, std::size_t layer_count) {
  if (o.layers.empty()) throw ValidationError("--layers must name one layer for this command");
  const auto l = layers(o, layer_count);
  if (l.size() != 1) throw ValidationError("--layers must name exactly one layer for this command");
  return l[0];
}

inline std::vector<AnchorKind> anchors(const Options& o, TaskKind task) {
  if (o.anchors.empty()) return candidate_anchors(task);
  std::vector<AnchorKind> out;
  try {
    for (const auto& a : o.anchors) out.push_back(parse_anchor(a));
  } catch (const Error& e) {
    throw ValidationError(std::string("--anchor: ") + e.what());
  }
  return out;
}

inline AnchorKind single_anchor(const Options& o) {
  if (o.anchors.empty()) return AnchorKind::newline;
  if (o.anchors.size() != 1) throw ValidationError("--anchor must be given once for this command");
  return anchors(o, TaskKind::qa)[0];
}

inline RunConfig run_config(const Options& o) {
  RunConfig r;
  r.samples = o.samples;
  r.seed = o.seed;
  r.rollout.temperature = o.temperature;
  r.rollout.max_new_tokens = o.max_new_tokens;
  r.rollout.top_k = o.top_k;
  r.rollout.top_p = o.top_p;
  try {
    r.rollout.validate();
  } catch (const Error& e) {
    throw ValidationError(e.what());
  }
  if (r.samples == 0) throw ValidationError("--samples must be positive");
  return r;
}

inline nlohmann::json rollout_json(const Options& o) {
  nlohmann::json j = {{"temperature", format_real(o.temperature)}, {"max_new_tokens", o.max_new_tokens}};
  if (o.top_k) j["top_k"] = *o.top_k;
  if (o.top_p) j["top_p"] = format_real(*o.top_p);
  return j;
}

// Loaded model, vocabulary and dataset plus the hashable identity of each.
struct Inputs {
  Model model;
  Vocabulary vocab;
  Dataset data;
  std::string model_id;
  nlohmann::json identity;
};

inline Inputs inputs(const Options& o, bool need_dataset = true) {
  Inputs in;
  const auto mf = model_file(o);
  in.model = load_model(mf);
  in.vocab = Vocabulary::load(vocab_path(o));
  if (in.vocab.size() > in.model.spec.vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(in.vocab.size()) + " tokens but the model only " +
                          std::to_string(in.model.spec.vocab_size));
  }
  in.model_id = model_name(mf);
  in.identity = {{"model", in.model_id}, {"model_hash", file_hash(mf)}};
  if (need_dataset) {
    in.data = dataset(o);
    in.identity["dataset"] = in.data.id;
    in.identity["dataset_hash"] = file_hash(o.dataset);
  }
  return in;
}

inline std::string pairs_text(const std::vector<CategoryPair>& ps) {
  std::string s;
  for (const auto& p : ps) s += (s.empty() ? "" : ",") + p.id();
  return s;
}

inline std::string anchors_text(const std::vector<AnchorKind>& as) {
  std::string s;
  for (auto a : as) s += (s.empty() ? "" : ",") + std::string(anchor_name(a));
  return s;
}

inline std::string layers_text(const std::vector<std::size_t>& ls) {
  std::string s;
  for (auto l : ls) s += (s.empty() ? "" : ",") + std::to_string(l);
  return s;
}

// Long-form CSV, JSON, optional SVG for a report set under `<stem>_metrics.*`.
inline void emit_metrics(const fs::path& dir, const std::string& stem, const std::vector<MetricReport>& reports,
                         const nlohmann::json& config, bool svg) {
  write(dir, stem + "_metrics.csv", long_csv(reports));
  write(dir, stem + ".json", reports_json(reports, config).dump(2) + "\n");
  if (svg) write(dir, stem + ".svg", svg_bars(reports, stem));
}

// Paired CSV: one row per steered pair with the joined baseline value.
// `join_target` picks the target family's baseline, otherwise the source's.
inline std::string paired_csv(const std::vector<MetricReport>& reports, const std::string& base_metric,
                              const std::string& steered_metric, bool join_target) {
  std::map<std::pair<std::string, std::string>, const MetricReport*> base;
  const auto sorted = sorted_reports(reports);
  for (const auto& r : sorted) {
    if (r.metric == base_metric && r.pair.empty()) base[{r.model, r.category}] = &r;
  }
  std::ostringstream out;
  out << "model,pair,source,target," << base_metric << ',' << steered_metric << ",samples,seed,config_hash\n";
  for (const auto& r : sorted) {
    if (r.metric != steered_metric) continue;
    const auto arrow = r.pair.find("->");
    const std::string src = r.pair.substr(0, arrow), tgt = r.pair.substr(arrow + 2);
    const auto it = base.find({r.model, join_target ? tgt : src});
    out << csv_field(r.model) << ',' << csv_field(r.pair) << ',' << csv_field(src) << ',' << csv_field(tgt) << ','
        << (it != base.end() ? format_real(it->second->value) : "") << ',' << format_real(r.value) << ','
        << r.samples << ',' << r.seed << ',' << r.config_hash << "\n";
  }
  return out.str();
}

// ---- generation manifest ----------------------------------------------------------------

struct CollectionEntry {
  std::string kind;  // baseline | steered
  std::string category;
  std::string pair;
  std::string source;
  std::string target;
  std::string file;
  std::string vector;
};

struct Manifest {
  nlohmann::json config;
  std::string config_hash;
  std::string model;
  std::uint64_t seed = 0;
  std::vector<CollectionEntry> entries;
  fs::path dir;

  CoupletCollection load(const CollectionEntry& e) const { return load_collection(dir / e.file); }
  const CollectionEntry* baseline(const std::string& category) const {
    for (const auto& e : entries) {
      if (e.kind == "baseline" && e.category == category) return &e;
    }
    return nullptr;
  }
};

inline nlohmann::json manifest_json(const Manifest& m) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j = {{"kind", e.kind}, {"file", e.file}};
    if (e.kind == "baseline") {
      j["category"] = e.category;
    } else {
      j["pair"] = e.pair;
      j["source"] = e.source;
      j["target"] = e.target;
      j["vector"] = e.vector;
    }
    list.push_back(std::move(j));
  }
  return {{"config", m.config},
          {"config_hash", m.config_hash},
          {"model", m.model},
          {"seed", m.seed},
          {"collections", list}};
}

inline Manifest load_manifest(const Options& o) {
  const fs::path dir = o.collections.empty() ? fs::path(o.out) : fs::path(o.collections);
  const auto path = dir / "generate.json";
  if (!fs::exists(path)) throw ValidationError("no generate.json in " + dir.string() + "; run `generate` first");
  Manifest m;
  m.dir = dir;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    m.config = j.at("config");
    m.config_hash = j.at("config_hash").get<std::string>();
    m.model = j.at("model").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("collections")) {
      CollectionEntry c;
      c.kind = e.at("kind").get<std::string>();
      c.file = e.at("file").get<std::string>();
      if (c.kind == "baseline") {
        c.category = e.at("category").get<std::string>();
      } else {
        c.pair = e.at("pair").get<std::string>();
        c.source = e.at("source").get<std::string>();
        c.target = e.at("target").get<std::string>();
        c.vector = e.at("vector").get<std::string>();
      }
      m.entries.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed manifest: " + e.what());
  }
  return m;
}

inline nlohmann::json eval_config(const std::string& command, const Options& o, const Manifest& m,
                                  const std::string& dataset_hash, nlohmann::json extra = nlohmann::json::object()) {
  extra["command"] = command;
  extra["generate_config_hash"] = m.config_hash;
  extra["dataset_hash"] = dataset_hash;
  extra["seed"] = o.seed;
  return extra;
}

// Records of a collection grouped by prompt index, in index order.
inline std::map<std::size_t, CoupletCollection> by_prompt(const CoupletCollection& c) {
  std::map<std::size_t, CoupletCollection> out;
  for (const auto& r : c) {
    const auto colon = r.prompt_id.rfind(':');
    if (colon == std::string::npos) throw Error("collection: prompt id '" + r.prompt_id + "' has no index");
    out[std::stoul(r.prompt_id.substr(colon + 1))].push_back(r);
  }
  return out;
}

inline std::string prompt_category(const std::string& category, std::size_t index) {
  return category + "#" + std::to_string(index);
}

}  // namespace detail

// ---- commands --------------------------------------------------------------------------

inline int cmd_dataset_validate(const Options& o, std::ostream& out) {
  const auto d = detail::dataset(o);
  const auto violations = validate(d);
  std::size_t errors = 0, warnings = 0;
  std::ostringstream csv;
  csv << "severity,category,message\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& v : violations) {
    const char* sev = v.severity == Severity::error ? "error" : "warning";
    (v.severity == Severity::error ? errors : warnings) += 1;
    out << sev << ' ' << v.category << ": " << v.message << "\n";
    csv << sev << ',' << csv_field(v.category) << ',' << csv_field(v.message) << "\n";
    list.push_back({{"severity", sev}, {"category", v.category}, {"message", v.message}});
  }
  out << d.id << ": " << d.categories.size() << " categories, " << d.pairs.size() << " pairs, " << errors
      << " errors, " << warnings << " warnings\n";
  if (!o.out.empty()) {
    const auto dir = detail::out_dir(o);
    const nlohmann::json config = {{"command", "dataset validate"}, {"dataset_hash", detail::file_hash(o.dataset)}};
    detail::write(dir, "validation.csv", csv.str());
    detail::write(dir, "validation.json",
                  nlohmann::json({{"dataset", d.id},
                                  {"categories", d.categories.size()},
                                  {"pairs", d.pairs.size()},
                                  {"errors", errors},
                                  {"warnings", warnings},
                                  {"violations", list},
                                  {"config", config},
                                  {"config_hash", config_hash(config)}})
                          .dump(2) +
                      "\n");
  }
  return errors ? kExitValidation : kExitOk;
}

inline int cmd_steer_estimate(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto ps = detail::pairs(o, in.data);
  const auto ls = detail::layers(o, in.model.spec.layer_count);
  const auto as = detail::anchors(o, in.data.task);
  const auto dir = detail::out_dir(o);
  nlohmann::json config = in.identity;
  config.update({{"command", "steer estimate"},
                 {"pairs", detail::pairs_text(ps)},
                 {"layers", detail::layers_text(ls)},
                 {"anchors", detail::anchors_text(as)},
                 {"multiplier", format_real(o.multiplier)}});
  const auto hash = config_hash(config);
  std::ostringstream csv;
  csv << "model,pair,layer,anchor,multiplier,norm,train_hash,file,config_hash\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : ps) {
    for (auto l : ls) {
      for (auto a : as) {
        const auto v = estimate_for_pair(in.model, in.vocab, in.data, p, l, a, o.multiplier);
        double norm = 0;
        for (float x : v.values) norm += static_cast<double>(x) * x;
        norm = std::sqrt(norm);
        const std::string file = "vectors/" + detail::slug(p.id()) + "_L" + std::to_string(l) + "_" +
                                 std::string(anchor_name(a)) + ".plnl";
        std::filesystem::create_directories(dir / "vectors");
        save_steering_vector(dir / file, v);
        csv << csv_field(in.model_id) << ',' << csv_field(p.id()) << ',' << l << ',' << anchor_name(a) << ','
            << format_real(o.multiplier) << ',' << format_real(norm) << ',' << v.train_hash << ',' << file << ','
            << hash << "\n";
        list.push_back({{"pair", p.id()},
                        {"layer", l},
                        {"anchor", anchor_name(a)},
                        {"norm", format_real(norm)},
                        {"train_hash", v.train_hash},
                        {"file", file}});
      }
    }
  }
  detail::write(dir, "steer_estimate.csv", csv.str());
  detail::write(dir, "steer_estimate.json",
                nlohmann::json({{"vectors", list}, {"config", config}, {"config_hash", hash}}).dump(2) + "\n");
  out << "estimated " << list.size() << " steering vectors into " << (dir / "vectors").string() << "\n";
  return kExitOk;
}

inline int cmd_steer_sweep(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto ps = detail::pairs(o, in.data);
  const auto ls = detail::layers(o, in.model.spec.layer_count);
  const auto as = detail::anchors(o, in.data.task);
  auto run = detail::run_config(o);
  run.samples = o.sweep_samples;
  if (run.samples == 0) throw ValidationError("--sweep-samples must be positive");
  const auto dir = detail::out_dir(o);
  nlohmann::json config = in.identity;
  config.update({{"command", "steer sweep"},
                 {"pairs", detail::pairs_text(ps)},
                 {"layers", detail::layers_text(ls)},
                 {"anchors", detail::anchors_text(as)},
                 {"multiplier", format_real(o.multiplier)},
                 {"samples", run.samples},
                 {"seed", o.seed},
                 {"rollout", detail::rollout_json(o)}});
  const auto hash = config_hash(config);
  std::ostringstream csv;
  csv << "model,pair,layer,anchor,effectiveness,best,samples,seed,config_hash\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : ps) {
    const auto result = sweep_pair(in.model, in.vocab, in.data, p, ls, as, o.multiplier, run);
    const std::size_t n = in.data.category(p.source).test_prompts.size() * run.samples;
    for (const auto& [cell, value] : result.grid) {
      const bool best = cell.layer == result.best.layer && cell.anchor == result.best.anchor;
      csv << csv_field(in.model_id) << ',' << csv_field(p.id()) << ',' << cell.layer << ',' << anchor_name(cell.anchor)
          << ',' << format_real(value) << ',' << (best ? 1 : 0) << ',' << n << ',' << o.seed << ',' << hash << "\n";
    }
    list.push_back({{"pair", p.id()},
                    {"best_layer", result.best.layer},
                    {"best_anchor", anchor_name(result.best.anchor)},
                    {"best_effectiveness", format_real(result.grid.at(result.best))}});
    out << p.id() << ": best layer " << result.best.layer << " at " << anchor_name(result.best.anchor) << " ("
        << format_real(result.grid.at(result.best)) << ")\n";
  }
  detail::write(dir, "sweep.csv", csv.str());
  detail::write(dir, "sweep.json", nlohmann::json({{"best", list}, {"config", config}, {"config_hash", hash}}).dump(2) + "\n");
  return kExitOk;
}

inline int cmd_steer_curve(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto ps = detail::pairs(o, in.data);
  const auto layer = detail::single_layer(o, in.model.spec.layer_count);
  const auto anchor = detail::single_anchor(o);
  const auto run = detail::run_config(o);
  if (o.repeats == 0) throw ValidationError("--repeats must be positive");
  const auto dir = detail::out_dir(o);
  nlohmann::json config = in.identity;
  config.update({{"command", "steer curve"},
                 {"pairs", detail::pairs_text(ps)},
                 {"layer", layer},
                 {"anchor", anchor_name(anchor)},
                 {"multiplier", format_real(o.multiplier)},
                 {"samples", run.samples},
                 {"repeats", o.repeats},
                 {"seed", o.seed},
                 {"rollout", detail::rollout_json(o)}});
  const auto hash = config_hash(config);
  std::ostringstream csv;
  csv << "model,pair,train_size,repeat,effectiveness,seed,config_hash\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : ps) {
    const auto n = std::min(in.data.category(p.source).train_prompts.size(), in.data.category(p.target).train_prompts.size());
    const auto points = steering_curve(in.model, in.vocab, in.data, p, layer, anchor, o.multiplier, doubling_sizes(n),
                                       o.repeats, run);
    for (const auto& pt : points) {
      for (std::size_t r = 0; r < pt.values.size(); ++r) {
        csv << csv_field(in.model_id) << ',' << csv_field(p.id()) << ',' << pt.size << ',' << r << ','
            << format_real(pt.values[r]) << ',' << o.seed << ',' << hash << "\n";
      }
      csv << csv_field(in.model_id) << ',' << csv_field(p.id()) << ',' << pt.size << ",mean," << format_real(pt.mean())
          << ',' << o.seed << ',' << hash << "\n";
      list.push_back({{"pair", p.id()}, {"train_size", pt.size}, {"mean", format_real(pt.mean())}});
    }
    out << p.id() << ": " << points.size() << " train sizes\n";
  }
  detail::write(dir, "curve.csv", csv.str());
  detail::write(dir, "curve.json", nlohmann::json({{"points", list}, {"config", config}, {"config_hash", hash}}).dump(2) + "\n");
  return kExitOk;
}

inline int cmd_generate(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto ps = detail::pairs(o, in.data);
  const auto run = detail::run_config(o);
  const auto dir = detail::out_dir(o);
  std::optional<std::size_t> layer;
  const auto anchor = detail::single_anchor(o);
  if (!o.baseline_only) layer = detail::single_layer(o, in.model.spec.layer_count);

  detail::Manifest m;
  m.config = in.identity;
  m.config.update({{"command", "generate"},
                   {"pairs", detail::pairs_text(ps)},
                   {"samples", run.samples},
                   {"seed", o.seed},
                   {"rollout", detail::rollout_json(o)}});
  if (layer) {
    m.config.update({{"layer", *layer}, {"anchor", anchor_name(anchor)}, {"multiplier", format_real(o.multiplier)}});
  }
  m.config_hash = config_hash(m.config);
  m.model = in.model_id;
  m.seed = o.seed;

  // Baselines for every category that takes part in a pair.
  std::set<std::string> cats;
  for (const auto& p : ps) {
    cats.insert(p.source);
    cats.insert(p.target);
  }
  std::size_t records = 0;
  for (const auto& c : cats) {
    const auto coll = generate_collection(in.model, in.vocab, in.data, c, in.data.category(c).test_prompts, run);
    const std::string file = "collections/baseline_" + detail::slug(c) + ".jsonl";
    detail::write(dir, file, collection_to_jsonl(coll));
    m.entries.push_back({"baseline", c, "", "", "", file, ""});
    records += coll.size();
  }
  if (layer) {
    for (const auto& p : ps) {
      const auto v = estimate_for_pair(in.model, in.vocab, in.data, p, *layer, anchor, o.multiplier);
      const std::string vfile = "vectors/" + detail::slug(p.id()) + ".plnl";
      std::filesystem::create_directories(dir / "vectors");
      save_steering_vector(dir / vfile, v);
      const auto coll = generate_collection(in.model, in.vocab, in.data, p.source, in.data.category(p.source).test_prompts,
                                            run, steering_factory(in.vocab, v), p.id());
      const std::string file = "collections/steered_" + detail::slug(p.id()) + ".jsonl";
      detail::write(dir, file, collection_to_jsonl(coll));
      m.entries.push_back({"steered", "", p.id(), p.source, p.target, file, vfile});
      records += coll.size();
    }
  }
  detail::write(dir, "generate.json", detail::manifest_json(m).dump(2) + "\n");
  out << "generated " << records << " records in " << m.entries.size() << " collections\n";
  return kExitOk;
}

inline int cmd_eval_rhyme(const Options& o, std::ostream& out) {
  const auto d = detail::dataset(o);
  if (d.task != TaskKind::rhyme) throw ValidationError("eval rhyme needs a rhyme dataset");
  const auto m = detail::load_manifest(o);
  const auto dir = detail::out_dir(o);
  const auto config = detail::eval_config("eval rhyme", o, m, detail::file_hash(o.dataset));
  const auto hash = config_hash(config);
  const LexiconIndex index(d.categories);
  std::vector<MetricReport> reports, per_prompt;
  for (const auto& e : m.entries) {
    const auto c = m.load(e);
    const bool steered = e.kind == "steered";
    const std::string family = steered ? e.target : e.category;
    const char* metric = steered ? metric_names::kRhymeFamilySteered : metric_names::kRhymeFamily;
    reports.push_back({"eval_rhyme", m.model, e.pair, family, metric, fraction_correct_rhyme_family(c, index, family),
                       c.size(), m.seed, hash, true});
    if (o.per_prompt) {
      for (const auto& [i, sub] : detail::by_prompt(c)) {
        per_prompt.push_back({"eval_rhyme", m.model, e.pair, detail::prompt_category(family, i), metric,
                              fraction_correct_rhyme_family(sub, index, family), sub.size(), m.seed, hash, true});
      }
    }
  }
  detail::emit_metrics(dir, "rhyme", reports, config, o.svg);
  const bool any_steered = std::any_of(reports.begin(), reports.end(), [](const auto& r) { return !r.pair.empty(); });
  detail::write(dir, "rhyme.csv",
                any_steered ? detail::paired_csv(reports, metric_names::kRhymeFamily, metric_names::kRhymeFamilySteered, false)
                            : wide_csv(reports, {metric_names::kRhymeFamily}));
  if (o.per_prompt && !per_prompt.empty()) detail::emit_metrics(dir, "rhyme_per_prompt", per_prompt, config, false);
  for (const auto& r : sorted_reports(reports)) {
    out << r.metric << ' ' << (r.pair.empty() ? r.category : r.pair) << ' ' << format_real(r.value) << "\n";
  }
  return kExitOk;
}

inline int cmd_eval_regen(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  if (in.data.task != TaskKind::rhyme) throw ValidationError("eval regen needs a rhyme dataset");
  const auto m = detail::load_manifest(o);
  const auto dir = detail::out_dir(o);
  auto run = detail::run_config(o);
  RegenerationOptions ropts;
  ropts.samples_per_line = o.regen_samples;
  ropts.keep_preamble = o.keep_preamble;
  if (ropts.samples_per_line == 0) throw ValidationError("--regen-samples must be positive");
  const auto config = detail::eval_config(
      "eval regen", o, m, in.identity["dataset_hash"],
      {{"model_hash", in.identity["model_hash"]},
       {"regen_samples", ropts.samples_per_line},
       {"keep_preamble", ropts.keep_preamble},
       {"rollout", detail::rollout_json(o)}});
  const auto hash = config_hash(config);

  std::vector<MetricReport> reports, per_prompt;
  RegenerationTable baseline_table;
  std::ostringstream table_csv;
  table_csv << "model,kind,pair,reference,produced,rate,trials,seed,config_hash\n";
  auto emit_table = [&](const detail::CollectionEntry& e, const RegenerationResult& r) {
    for (const auto& [ref, row] : r.rates) {
      for (const auto& [fam, rate] : row) {
        table_csv << csv_field(m.model) << ',' << e.kind << ',' << csv_field(e.pair) << ',' << csv_field(ref) << ','
                  << csv_field(fam) << ',' << format_real(rate) << ',' << r.trials.at(ref) << ',' << o.seed << ','
                  << hash << "\n";
      }
    }
  };
  for (const auto& e : m.entries) {
    const auto c = m.load(e);
    const bool steered = e.kind == "steered";
    const std::string family = steered ? e.target : e.category;
    const char* metric = steered ? metric_names::kRegenerationSteered : metric_names::kRegeneration;
    const auto reference = [&](const GenerationRecord&) { return family; };
    const auto r = regeneration_rates(in.model, in.vocab, in.data, c, reference, run, ropts);
    emit_table(e, r);
    if (!r.rates.contains(family)) {
      out << "warning: " << (steered ? e.pair : e.category) << ": every second line was too short to regenerate\n";
      continue;
    }
    if (!steered) baseline_table[family] = r.rates.at(family);
    reports.push_back({"eval_regen", m.model, e.pair, family, metric, r.rates.at(family).at(family),
                       r.trials.at(family), o.seed, hash, true});
    if (o.per_prompt) {
      for (const auto& [i, sub] : detail::by_prompt(c)) {
        const auto rs = regeneration_rates(in.model, in.vocab, in.data, sub, reference, run, ropts);
        if (!rs.rates.contains(family)) continue;
        per_prompt.push_back({"eval_regen", m.model, e.pair, detail::prompt_category(family, i), metric,
                              rs.rates.at(family).at(family), rs.trials.at(family), o.seed, hash, true});
      }
    }
  }
  if (baseline_table.empty()) throw Error("eval regen: no baseline collection could be regenerated");
  if (in.data.categories.size() >= 2) {
    for (const auto& [fam, chance] : regeneration_chance_baseline(baseline_table)) {
      std::size_t trials = 0;
      for (const auto& r : reports) {
        if (r.metric == metric_names::kRegeneration && r.category == fam) trials = r.samples;
      }
      reports.push_back({"eval_regen", m.model, "", fam, metric_names::kRegenerationChance, chance, trials, o.seed, hash, true});
    }
  }
  detail::emit_metrics(dir, "regen", reports, config, o.svg);
  const bool any_steered = std::any_of(reports.begin(), reports.end(), [](const auto& r) { return !r.pair.empty(); });
  detail::write(dir, "regen.csv",
                any_steered ? detail::paired_csv(reports, metric_names::kRegeneration, metric_names::kRegenerationSteered, true)
                            : wide_csv(reports, {metric_names::kRegeneration, metric_names::kRegenerationChance}));
  detail::write(dir, "regen_table.csv", table_csv.str());
  if (o.per_prompt && !per_prompt.empty()) detail::emit_metrics(dir, "regen_per_prompt", per_prompt, config, false);
  for (const auto& r : sorted_reports(reports)) {
    out << r.metric << ' ' << (r.pair.empty() ? r.category : r.pair) << ' ' << format_real(r.value) << "\n";
  }
  return kExitOk;
}

inline int cmd_eval_prob(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto m = detail::load_manifest(o);
  const auto dir = detail::out_dir(o);
  const auto config = detail::eval_config("eval prob", o, m, in.identity["dataset_hash"],
                                          {{"model_hash", in.identity["model_hash"]},
                                           {"high_kl_threshold", format_real(kHighKlThreshold)}});
  const auto hash = config_hash(config);
  std::vector<MetricReport> reports, per_prompt;
  auto add = [&](std::vector<MetricReport>& into, const std::string& pair, const std::string& category,
                 const DistributionTracePair& t, std::size_t n) {
    into.push_back({"eval_prob", m.model, pair, category, metric_names::kTop1, fraction_top1_difference(t), n, m.seed, hash, true});
    into.push_back({"eval_prob", m.model, pair, category, metric_names::kHighKl, fraction_high_kl(t), n, m.seed, hash, true});
    into.push_back({"eval_prob", m.model, pair, category, metric_names::kAfterTop1,
                    tokens_after_first(t, DivergenceCriterion::top1_diff), n, m.seed, hash, true});
    into.push_back({"eval_prob", m.model, pair, category, metric_names::kAfterHighKl,
                    tokens_after_first(t, DivergenceCriterion::high_kl), n, m.seed, hash, true});
  };
  for (const auto& e : m.entries) {
    if (e.kind != "steered") continue;
    const auto* base = m.baseline(e.source);
    if (!base) throw ValidationError("eval prob: no baseline collection for '" + e.source + "'");
    const auto v = load_steering_vector(m.dir / e.vector);
    const auto c = m.load(*base);
    const auto plan = steering_factory(in.vocab, v);
    const auto traces = distribution_traces(in.model, in.vocab, c, plan);
    add(reports, e.pair, e.target, traces, c.size());
    if (o.per_prompt) {
      for (const auto& [i, sub] : detail::by_prompt(c)) {
        add(per_prompt, e.pair, detail::prompt_category(e.target, i), distribution_traces(in.model, in.vocab, sub, plan),
            sub.size());
      }
    }
  }
  if (reports.empty()) throw ValidationError("eval prob: the manifest has no steered collections");
  detail::emit_metrics(dir, "prob", reports, config, o.svg);
  detail::write(dir, "prob.csv",
                wide_csv(reports, {metric_names::kTop1, metric_names::kHighKl, metric_names::kAfterTop1,
                                   metric_names::kAfterHighKl}));
  if (o.per_prompt) detail::emit_metrics(dir, "prob_per_prompt", per_prompt, config, false);
  for (const auto& r : sorted_reports(reports)) out << r.metric << ' ' << r.pair << ' ' << format_real(r.value) << "\n";
  return kExitOk;
}

inline int cmd_eval_qa(const Options& o, std::ostream& out) {
  const auto d = detail::dataset(o);
  if (d.task != TaskKind::qa) throw ValidationError("eval qa needs a qa dataset");
  const auto m = detail::load_manifest(o);
  const auto dir = detail::out_dir(o);
  const auto config = detail::eval_config("eval qa", o, m, detail::file_hash(o.dataset));
  const auto hash = config_hash(config);
  const Judge judge(d);
  std::vector<MetricReport> reports, per_prompt;
  auto add = [&](std::vector<MetricReport>& into, const std::string& pair, const std::string& category,
                 const std::string& noun_category, const CoupletCollection& c) {
    const bool steered = !pair.empty();
    const auto f = qa_fractions(c, judge.noun(noun_category));
    using namespace metric_names;
    into.push_back({"eval_qa", m.model, pair, category, steered ? kAnswerSteered : kAnswer, f.correct_answer, c.size(), m.seed, hash, true});
    into.push_back({"eval_qa", m.model, pair, category, steered ? kArticleASteered : kArticleA, f.a, c.size(), m.seed, hash, true});
    into.push_back({"eval_qa", m.model, pair, category, steered ? kArticleAnSteered : kArticleAn, f.an, c.size(), m.seed, hash, true});
  };
  for (const auto& e : m.entries) {
    const auto c = m.load(e);
    const std::string noun = e.kind == "steered" ? e.target : e.category;
    add(reports, e.pair, noun, noun, c);
    if (o.per_prompt) {
      for (const auto& [i, sub] : detail::by_prompt(c)) add(per_prompt, e.pair, detail::prompt_category(noun, i), noun, sub);
    }
  }
  using namespace metric_names;
  detail::emit_metrics(dir, "qa", reports, config, o.svg);
  detail::write(dir, "qa.csv",
                wide_csv(reports, {kAnswer, kArticleA, kArticleAn, kAnswerSteered, kArticleASteered, kArticleAnSteered}));
  if (o.per_prompt && !per_prompt.empty()) detail::emit_metrics(dir, "qa_per_prompt", per_prompt, config, false);
  for (const auto& r : sorted_reports(reports)) {
    out << r.metric << ' ' << (r.pair.empty() ? r.category : r.pair) << ' ' << format_real(r.value) << "\n";
  }
  return kExitOk;
}

inline int cmd_circuit_patch(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto ps = detail::pairs(o, in.data);
  const auto layer = detail::single_layer(o, in.model.spec.layer_count);
  const auto anchor = detail::single_anchor(o);
  const auto dir = detail::out_dir(o);
  nlohmann::json config = in.identity;
  config.update({{"command", "circuit patch"},
                 {"pairs", detail::pairs_text(ps)},
                 {"layer", layer},
                 {"anchor", anchor_name(anchor)},
                 {"multiplier", format_real(o.multiplier)},
                 {"max_new_tokens", o.max_new_tokens}});
  if (o.prompts) config["prompts"] = *o.prompts;
  const auto hash = config_hash(config);
  const auto heads = all_heads(in.model.spec);
  const auto stops = stop_tokens(in.vocab);
  std::ostringstream csv, summary;
  csv << "model,pair,prompt,layer,head,unsteered,steered,patched,recovery_percent,config_hash\n";
  summary << "model,pair,layer,head,mean_recovery_percent,prompts,skipped,config_hash\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : ps) {
    const auto v = estimate_for_pair(in.model, in.vocab, in.data, p, layer, anchor, o.multiplier);
    const auto& lines = in.data.category(p.source).test_prompts;
    const std::size_t n = std::min(lines.size(), o.prompts.value_or(lines.size()));
    std::map<std::pair<std::size_t, std::size_t>, double> total;
    std::size_t used = 0, skipped = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto prompt = encode_prompt(in.vocab, in.data, lines[i]);
      PatchAnalysis a;
      try {
        a = patch_analysis(in.model, prompt, steering_factory(in.vocab, v)(prompt), heads, stops, o.max_new_tokens);
      } catch (const Error&) {
        ++skipped;  // greedy completions never diverge for this prompt
        continue;
      }
      ++used;
      for (const auto& h : a.heads) {
        total[{h.layer, h.head}] += h.recovery;
        csv << csv_field(in.model_id) << ',' << csv_field(p.id()) << ',' << i << ',' << h.layer << ',' << h.head << ','
            << format_real(a.unsteered) << ',' << format_real(a.steered) << ',' << format_real(h.patched) << ','
            << format_real(h.recovery) << ',' << hash << "\n";
      }
    }
    for (const auto& [lh, sum] : total) {
      const double mean = sum / static_cast<double>(used);
      summary << csv_field(in.model_id) << ',' << csv_field(p.id()) << ',' << lh.first << ',' << lh.second << ','
              << format_real(mean) << ',' << used << ',' << skipped << ',' << hash << "\n";
      list.push_back({{"pair", p.id()}, {"layer", lh.first}, {"head", lh.second}, {"mean_recovery_percent", format_real(mean)}});
    }
    out << p.id() << ": " << used << " prompts analysed, " << skipped << " without divergence\n";
  }
  detail::write(dir, "patch.csv", csv.str());
  detail::write(dir, "patch_summary.csv", summary.str());
  detail::write(dir, "patch.json", nlohmann::json({{"heads", list}, {"config", config}, {"config_hash", hash}}).dump(2) + "\n");
  return kExitOk;
}

// Generation with attention to anchor positions blocked: each anchor alone,
// all together, and no ablation.
inline int cmd_circuit_ablate(const Options& o, std::ostream& out) {
  auto in = detail::inputs(o);
  const auto ps = detail::pairs(o, in.data);
  const auto as = detail::anchors(o, in.data.task);
  const auto run = detail::run_config(o);
  const auto dir = detail::out_dir(o);
  nlohmann::json config = in.identity;
  config.update({{"command", "circuit ablate"},
                 {"pairs", detail::pairs_text(ps)},
                 {"anchors", detail::anchors_text(as)},
                 {"samples", run.samples},
                 {"seed", o.seed},
                 {"rollout", detail::rollout_json(o)}});
  const auto hash = config_hash(config);
  std::vector<std::pair<std::string, std::vector<AnchorKind>>> conditions = {{"none", {}}};
  for (auto a : as) conditions.push_back({std::string(anchor_name(a)), {a}});
  if (as.size() > 1) conditions.push_back({"all", as});
  std::set<std::string> cats;
  for (const auto& p : ps) cats.insert(p.source);
  const Judge judge(in.data);
  std::vector<MetricReport> reports;
  for (const auto& [name, blocked] : conditions) {
    PlanFactory plan;
    if (!blocked.empty()) {
      plan = [&in, blocked](const Tokens& prompt) {
        const auto anchors = locate_anchors(in.vocab, prompt);
        std::set<std::size_t> positions;
        for (auto a : blocked) positions.insert(anchors.resolve(a));
        return attention_ablation_plan(positions);
      };
    }
    const std::string pair = "ablate:" + name;
    for (const auto& c : cats) {
      const auto coll = generate_collection(in.model, in.vocab, in.data, c, in.data.category(c).test_prompts, run, plan);
      if (in.data.task == TaskKind::rhyme) {
        reports.push_back({"circuit_ablate", in.model_id, pair, c, metric_names::kRhymeFamily,
                           fraction_correct_rhyme_family(coll, judge.index(), c), coll.size(), o.seed, hash, true});
        const auto r = regeneration_rates(in.model, in.vocab, in.data, coll, [&](const GenerationRecord&) { return c; }, run);
        if (r.rates.contains(c)) {
          reports.push_back({"circuit_ablate", in.model_id, pair, c, metric_names::kRegeneration, r.rates.at(c).at(c),
                             r.trials.at(c), o.seed, hash, true});
        }
      } else {
        reports.push_back({"circuit_ablate", in.model_id, pair, c, metric_names::kAnswer, fraction_correct(coll, judge, c),
                           coll.size(), o.seed, hash, true});
      }
    }
    out << "condition " << name << " done\n";
  }
  detail::emit_metrics(dir, "ablate", reports, config, o.svg);
  detail::write(dir, "ablate.csv",
                wide_csv(reports, in.data.task == TaskKind::rhyme
                                      ? std::vector<std::string>{metric_names::kRhymeFamily, metric_names::kRegeneration}
                                      : std::vector<std::string>{metric_names::kAnswer}));
  return kExitOk;
}

inline std::vector<MetricReport> read_reports(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
  if (!j.contains("reports") || !j["reports"].is_array()) throw ValidationError(path + ": no \"reports\" array");
  std::vector<MetricReport> out;
  for (const auto& r : j["reports"]) {
    try {
      MetricReport m;
      m.experiment = r.at("experiment").get<std::string>();
      m.model = r.at("model").get<std::string>();
      m.pair = r.at("pair").get<std::string>();
      m.category = r.at("category").get<std::string>();
      m.metric = r.at("metric").get<std::string>();
      m.value = std::stod(r.at("value").get<std::string>());
      m.samples = r.at("samples").get<std::size_t>();
      m.seed = r.at("seed").get<std::uint64_t>();
      m.config_hash = r.at("config_hash").get<std::string>();
      m.is_fraction = false;
      out.push_back(std::move(m));
    } catch (const std::exception& e) {
      throw ValidationError(path + ": malformed report: " + e.what());
    }
  }
  return out;
}

inline int cmd_report_correlations(const Options& o, std::ostream& out) {
  if (o.inputs.empty()) throw ValidationError("--input is required (report JSON files)");
  CorrelationGrouping grouping;
  if (o.grouping == "per_prompt") {
    grouping = CorrelationGrouping::per_prompt;
  } else if (o.grouping == "per_model") {
    grouping = CorrelationGrouping::per_model;
  } else {
    throw ValidationError("--grouping: expected per_prompt or per_model");
  }
  std::vector<MetricReport> reports;
  nlohmann::json hashes = nlohmann::json::array();
  for (const auto& path : o.inputs) {
    auto r = read_reports(path);
    reports.insert(reports.end(), r.begin(), r.end());
    hashes.push_back(detail::file_hash(path));
  }
  if (!o.metrics.empty()) {
    const std::set<std::string> keep(o.metrics.begin(), o.metrics.end());
    std::erase_if(reports, [&](const MetricReport& r) { return !keep.contains(r.metric); });
  }
  CorrelationMatrix m;
  try {
    m = correlation_report(reports, grouping);
  } catch (const Error& e) {
    throw Error(std::string(e.what()) + "; restrict to metrics observed on the same keys with --metric");
  }
  const auto dir = detail::out_dir(o);
  const nlohmann::json config = {{"command", "report correlations"}, {"grouping", o.grouping}, {"input_hashes", hashes}};
  detail::write(dir, "correlations.csv", correlation_csv(m));
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < m.metrics.size(); ++i) {
    for (std::size_t j = 0; j < m.metrics.size(); ++j) {
      cells.push_back({{"a", m.metrics[i]},
                       {"b", m.metrics[j]},
                       {"r", m.r[i][j] ? nlohmann::json(format_real(*m.r[i][j])) : nlohmann::json("undefined")}});
    }
  }
  detail::write(dir, "correlations.json",
                nlohmann::json({{"metrics", m.metrics}, {"cells", cells}, {"config", config}, {"config_hash", config_hash(config)}})
                        .dump(2) +
                    "\n");
  out << correlation_csv(m);
  return kExitOk;
}

inline int cmd_tokens_stats(const Options& o, std::ostream& out) {
  const auto d = detail::dataset(o);
  const auto vocab = Vocabulary::load(detail::vocab_path(o));
  std::optional<Model> model;
  nlohmann::json config = {{"command", "tokens stats"}, {"dataset_hash", detail::file_hash(o.dataset)}};
  if (!o.model.empty()) {
    const auto mf = detail::model_file(o);
    model = load_model(mf);
    config["model_hash"] = detail::file_hash(mf);
  }
  const auto s = token_stats(vocab, d.categories, model ? &model->weights.get("tok_embed.weight") : nullptr, false);
  const auto hash = config_hash(config);
  std::ostringstream csv;
  csv << "category,single_token_fraction,single_token_fraction_bare,config_hash\n";
  for (const auto& c : d.categories) {
    csv << csv_field(c.id) << ',' << format_real(s.single_token_fraction.at(c.id)) << ','
        << format_real(s.single_token_fraction_bare.at(c.id)) << ',' << hash << "\n";
  }
  csv << "overall," << format_real(s.overall) << ',' << format_real(s.overall_bare) << ',' << hash << "\n";
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(format_real(*v)) : nlohmann::json(nullptr); };
  const auto dir = detail::out_dir(o);
  detail::write(dir, "tokens.csv", csv.str());
  detail::write(dir, "tokens.json",
                nlohmann::json({{"overall", format_real(s.overall)},
                                {"overall_bare", format_real(s.overall_bare)},
                                {"within_family_cosine", opt(s.within_family_cosine)},
                                {"cross_family_cosine", opt(s.cross_family_cosine)},
                                {"config", config},
                                {"config_hash", hash}})
                        .dump(2) +
                    "\n");
  out << csv.str();
  return kExitOk;
}

inline int cmd_selftest(const Options& o, std::ostream& out) {
  SelfTestConfig cfg;
  cfg.samples = o.samples;
  cfg.sweep_samples = o.sweep_samples;
  cfg.seed = o.seed;
  cfg.multiplier = o.multiplier;
  cfg.planted.seed = o.planted_seed;
  cfg.planted.marker_strength = o.marker_strength;
  if (cfg.samples == 0 || cfg.sweep_samples == 0) throw ValidationError("--samples and --sweep-samples must be positive");
  const auto rep = self_test(cfg);
  for (const auto& c : rep.checks) {
    out << (c.passed ? "pass " : "FAIL ") << c.name << " = " << format_real(c.value) << " (" << c.expectation << ")";
    if (!c.detail.empty()) out << " " << c.detail;
    out << "\n";
  }
  if (!o.out.empty()) {
    const auto dir = detail::out_dir(o);
    detail::write(dir, "selftest.csv", selftest_csv(rep));
    detail::write(dir, "selftest.json", selftest_json(rep).dump(2) + "\n");
    if (!rep.metrics.empty()) {
      detail::write(dir, "metrics.csv", long_csv(rep.metrics));
      detail::write(dir, "metrics.json", reports_json(rep.metrics, rep.config).dump(2) + "\n");
    }
  }
  out << (rep.passed() ? "selftest passed" : "selftest FAILED") << "\n";
  return rep.passed() ? kExitOk : kExitValidation;
}

inline int cmd_planted_build(const Options& o, std::ostream& out) {
  PlantedSpec spec;
  spec.seed = o.planted_seed;
  spec.marker_strength = o.marker_strength;
  spec.max_context = o.max_context;
  nlohmann::json extra = {{"planted_seed", o.planted_seed},
                          {"marker_strength", format_real(o.marker_strength)},
                          {"max_context", o.max_context}};
  if (!o.dataset.empty()) {
    const auto d = detail::dataset(o);
    // QA datasets only contribute vocabulary; rhyme datasets must name the planted families.
    for (const auto& id : {spec.category_a_id, spec.category_b_id}) {
      if (d.task != TaskKind::rhyme) break;
      try {
        d.category(id);
      } catch (const Error&) {
        throw ValidationError("dataset '" + d.id + "' has no category '" + id + "' for the planted model");
      }
    }
    for (const auto& c : d.categories) {
      for (const auto* lines : {&c.train_prompts, &c.test_prompts}) {
        spec.extra_texts.insert(spec.extra_texts.end(), lines->begin(), lines->end());
      }
    }
    extra["dataset_hash"] = detail::file_hash(o.dataset);
  }
  const auto pm = build_planted_model(spec);
  const auto dir = detail::out_dir(o);
  save_planted(dir, pm, extra);
  out << "planted model (" << pm.vocab.size() << " tokens, plan layer " << pm.truth.plan_layer << " at "
      << anchor_name(pm.truth.plan_anchor) << ", copy head " << pm.truth.copy_layer << "." << pm.truth.copy_head
      << ") written to " << dir.string() << "\n";
  return kExitOk;
}

// ---- entry point ---------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"planlab: implicit planning workbench for decoder-only transformers"};
  app.require_subcommand(1);
  Options o;
  std::function<int()> action;

  auto model_opts = [&](CLI::App* s) {
    s->add_option("--model", o.model, "Model container (.plnl) or a directory holding model.plnl");
    s->add_option("--vocab", o.vocab, "vocab.json or its directory (default: next to the model)");
  };
  auto dataset_opt = [&](CLI::App* s) { s->add_option("--dataset", o.dataset, "Dataset JSON"); };
  auto pair_opt = [&](CLI::App* s) {
    s->add_option("--pair", o.pairs, "Category pair SOURCE->TARGET (repeatable; write --pair=SRC->TGT)");
  };
  auto steer_opts = [&](CLI::App* s) {
    s->add_option("--layers", o.layers, "Layers: all, middle, or a list like 0,2-4");
    s->add_option("--anchor", o.anchors, "Anchor: last_word, newline or question_mark (repeatable)");
    s->add_option("--multiplier", o.multiplier, "Steering multiplier")->capture_default_str();
  };
  auto rollout_opts = [&](CLI::App* s) {
    s->add_option("--samples", o.samples, "Samples per prompt")->capture_default_str();
    s->add_option("--seed", o.seed, "Experiment seed")->capture_default_str();
    s->add_option("--temperature", o.temperature, "Sampling temperature (0 = greedy)")->capture_default_str();
    s->add_option("--max-new-tokens", o.max_new_tokens, "Rollout length cap")->capture_default_str();
    s->add_option("--top-k", o.top_k, "Top-k truncation");
    s->add_option("--top-p", o.top_p, "Nucleus truncation");
  };
  auto out_opt = [&](CLI::App* s, bool required = true) {
    auto* opt = s->add_option("--out", o.out, "Output directory");
    if (required) opt->required();
  };
  auto report_opts = [&](CLI::App* s) {
    s->add_flag("--svg", o.svg, "Also write SVG bar charts");
    s->add_flag("--per-prompt", o.per_prompt, "Also write per-prompt reports for correlation analysis");
  };
  auto bind = [&](CLI::App* s, int (*fn)(const Options&, std::ostream&)) {
    s->callback([&action, &o, &out, fn] { action = [&o, &out, fn] { return fn(o, out); }; });
  };

  auto* dataset_cmd = app.add_subcommand("dataset", "Dataset tools")->require_subcommand(1);
  auto* validate_cmd = dataset_cmd->add_subcommand("validate", "Validate a dataset file");
  dataset_opt(validate_cmd);
  out_opt(validate_cmd, false);
  bind(validate_cmd, cmd_dataset_validate);

  auto* steer = app.add_subcommand("steer", "Steering vectors")->require_subcommand(1);
  auto* estimate = steer->add_subcommand("estimate", "Estimate mean-difference steering vectors");
  model_opts(estimate);
  dataset_opt(estimate);
  pair_opt(estimate);
  steer_opts(estimate);
  out_opt(estimate);
  bind(estimate, cmd_steer_estimate);

  auto* sweep_cmd = steer->add_subcommand("sweep", "Layer x anchor sweep of steering effectiveness");
  model_opts(sweep_cmd);
  dataset_opt(sweep_cmd);
  pair_opt(sweep_cmd);
  steer_opts(sweep_cmd);
  rollout_opts(sweep_cmd);
  sweep_cmd->add_option("--sweep-samples", o.sweep_samples, "Samples per prompt in each cell")->capture_default_str();
  out_opt(sweep_cmd);
  bind(sweep_cmd, cmd_steer_sweep);

  auto* curve = steer->add_subcommand("curve", "Steering effectiveness against train-set size");
  model_opts(curve);
  dataset_opt(curve);
  pair_opt(curve);
  steer_opts(curve);
  rollout_opts(curve);
  curve->add_option("--repeats", o.repeats, "Subsamples per size")->capture_default_str();
  out_opt(curve);
  bind(curve, cmd_steer_curve);

  auto* gen = app.add_subcommand("generate", "Generate baseline and steered collections");
  model_opts(gen);
  dataset_opt(gen);
  pair_opt(gen);
  steer_opts(gen);
  rollout_opts(gen);
  gen->add_flag("--baseline-only", o.baseline_only, "Skip steered collections");
  out_opt(gen);
  bind(gen, cmd_generate);

  auto* eval = app.add_subcommand("eval", "Evaluate generated collections")->require_subcommand(1);
  auto eval_common = [&](CLI::App* s) {
    dataset_opt(s);
    s->add_option("--collections", o.collections, "Directory holding generate.json (default: --out)");
    report_opts(s);
    out_opt(s);
  };
  auto* rhyme = eval->add_subcommand("rhyme", "Rhyme-family fractions");
  eval_common(rhyme);
  bind(rhyme, cmd_eval_rhyme);
  auto* regen = eval->add_subcommand("regen", "Last-word regeneration rates");
  eval_common(regen);
  model_opts(regen);
  rollout_opts(regen);
  regen->add_option("--regen-samples", o.regen_samples, "Regenerations per second line")->capture_default_str();
  regen->add_flag("--keep-preamble", o.keep_preamble, "Keep the rhyme preamble in regeneration prompts");
  bind(regen, cmd_eval_regen);
  auto* qa = eval->add_subcommand("qa", "Answer and article fractions");
  eval_common(qa);
  bind(qa, cmd_eval_qa);
  auto* prob = eval->add_subcommand("prob", "Probability-trace divergence metrics");
  eval_common(prob);
  model_opts(prob);
  bind(prob, cmd_eval_prob);

  auto* circuit = app.add_subcommand("circuit", "Circuit analysis")->require_subcommand(1);
  auto* patch = circuit->add_subcommand("patch", "Per-head activation patching of the steering effect");
  model_opts(patch);
  dataset_opt(patch);
  pair_opt(patch);
  steer_opts(patch);
  patch->add_option("--prompts", o.prompts, "Analyse only the first N test prompts");
  patch->add_option("--max-new-tokens", o.max_new_tokens, "Greedy rollout length cap")->capture_default_str();
  out_opt(patch);
  bind(patch, cmd_circuit_patch);
  auto* ablate = circuit->add_subcommand("ablate", "Generation with attention to anchor positions blocked");
  model_opts(ablate);
  dataset_opt(ablate);
  pair_opt(ablate);
  ablate->add_option("--anchor", o.anchors, "Anchors to block (repeatable)");
  rollout_opts(ablate);
  report_opts(ablate);
  out_opt(ablate);
  bind(ablate, cmd_circuit_ablate);

  auto* report = app.add_subcommand("report", "Report tools")->require_subcommand(1);
  auto* corr = report->add_subcommand("correlations", "Pearson correlations between metrics");
  corr->add_option("--input", o.inputs, "Report JSON written by an eval command (repeatable)");
  corr->add_option("--grouping", o.grouping, "per_prompt or per_model")->capture_default_str();
  corr->add_option("--metric", o.metrics, "Restrict to these metrics (repeatable)");
  out_opt(corr);
  bind(corr, cmd_report_correlations);

  auto* tokens = app.add_subcommand("tokens", "Tokenizer analysis")->require_subcommand(1);
  auto* stats = tokens->add_subcommand("stats", "Single-token fractions and embedding cosines of lexicons");
  model_opts(stats);
  dataset_opt(stats);
  out_opt(stats);
  bind(stats, cmd_tokens_stats);

  auto* selftest = app.add_subcommand("selftest", "Self-tests")->require_subcommand(1);
  auto* planted_cmd = selftest->add_subcommand("planted", "Ground-truth checks on a planted-plan model");
  planted_cmd->add_option("--samples", o.samples, "Samples per test prompt")->capture_default_str();
  planted_cmd->add_option("--sweep-samples", o.sweep_samples, "Samples per prompt in each sweep cell")->capture_default_str();
  planted_cmd->add_option("--seed", o.seed, "Experiment seed")->capture_default_str();
  planted_cmd->add_option("--multiplier", o.multiplier, "Steering multiplier")->capture_default_str();
  planted_cmd->add_option("--planted-seed", o.planted_seed, "Seed of the planted construction")->capture_default_str();
  planted_cmd->add_option("--marker-strength", o.marker_strength, "Category signal in marker embeddings")->capture_default_str();
  out_opt(planted_cmd, false);
  bind(planted_cmd, cmd_selftest);

  auto* planted = app.add_subcommand("planted", "Planted-plan models")->require_subcommand(1);
  auto* build = planted->add_subcommand("build", "Write a planted model, vocabulary and ground truth");
  dataset_opt(build);
  build->add_option("--planted-seed", o.planted_seed, "Seed of the planted construction")->capture_default_str();
  build->add_option("--marker-strength", o.marker_strength, "Category signal in marker embeddings")->capture_default_str();
  build->add_option("--max-context", o.max_context, "Context length of the model")->capture_default_str();
  out_opt(build);
  bind(build, cmd_planted_build);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }
  try {
    return action();
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace planlab::cli
