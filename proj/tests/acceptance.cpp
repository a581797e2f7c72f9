// Acceptance suite: one PASS/FAIL line per primary criterion.
//
// usage: acceptance <path-to-planlab-binary>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "planlab/intervention.hpp"
#include "planlab/metrics.hpp"
#include "planlab/planted.hpp"
#include "planlab/selftest.hpp"
#include "planlab/steering.hpp"
#include "trace_fixtures.hpp"

using namespace planlab;
namespace fs = std::filesystem;

namespace {

const std::string kData = PLANLAB_DATA_DIR;

struct Outcome {
  bool passed = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string header(const fs::path& p) {
  const auto text = read_file(p);
  return text.substr(0, text.find('\n'));
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

int run_cli(const std::string& cli, const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = shell_quote(cli);
  for (const auto& a : args) cmd += " " + shell_quote(a);
  cmd += " >>" + shell_quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

// ---- criteria ---------------------------------------------------------------------

Outcome recovery_percentages() {
  Outcome o;
  struct Row {
    double unsteered, patched, steered;
    long expected;
  };
  const Row rows[] = {{-2.6, 4.61, 5.48, 89}, {-3.37, 1.47, 4.77, 59}, {-14.5, 2.06, 3.39, 93}, {-4.94, -1.07, 0.93, 66}};
  std::string got;
  for (const auto& r : rows) {
    const long v = rounded_recovery_percentage(r.unsteered, r.patched, r.steered);
    got += (got.empty() ? "" : ",") + std::to_string(v);
    o.require(v == r.expected, std::to_string(v) + " != " + std::to_string(r.expected));
  }
  o.detail = o.passed ? "got " + got : o.detail;
  return o;
}

Outcome antisymmetry_and_permutation() {
  Outcome o;
  std::mt19937_64 rng(2024);
  std::normal_distribution<float> normal(0.0f, 3.0f);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng() % 64;
    auto make = [&] {
      std::vector<std::vector<float>> acts(1 + rng() % 16, std::vector<float>(d));
      for (auto& a : acts) {
        for (auto& x : a) x = normal(rng);
      }
      return acts;
    };
    auto a = make();
    auto b = make();
    const auto ab = estimate_steering_vector(a, b);
    const auto ba = estimate_steering_vector(b, a);
    for (std::size_t i = 0; i < d; ++i) mismatches += ab.values[i] != -ba.values[i];
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    mismatches += estimate_steering_vector(a, b).values != ab.values;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " bit mismatches");
  if (o.passed) o.detail = "100 activation sets bit-exact";
  return o;
}

Outcome oracle_equivalence() {
  Outcome o;
  PlantedSpec spec;
  const auto pm = build_planted_model(spec);
  const double worst = oracle_worst_error(pm, spec, 50, 7);
  o.require(worst <= 1e-6, "worst relative error " + fmt(worst));
  if (o.passed) o.detail = "worst relative error " + fmt(worst) + " over 50 prompts x {plain, intervened}";
  return o;
}

Outcome from_checks(const SelfTestReport& rep, const std::vector<std::string>& names) {
  Outcome o;
  std::string values;
  for (const auto& n : names) {
    try {
      const auto& c = rep.check(n);
      values += (values.empty() ? "" : ", ") + n + "=" + fmt(c.value) + " (" + c.expectation + ")";
      o.require(c.passed, n + " failed: " + fmt(c.value) + " " + c.expectation + " " + c.detail);
    } catch (const std::exception& e) {
      o.require(false, e.what());
    }
  }
  if (o.passed) o.detail = values;
  return o;
}

Outcome metric_kernels() {
  Outcome o;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng() % 40;
    std::vector<double> p(n), q(n);
    double sp = 0, sq = 0;
    for (std::size_t k = 0; k < n; ++k) {
      p[k] = (rng() % 5 == 0) ? 0.0 : u(rng);
      q[k] = 1e-6 + u(rng);
      sp += p[k];
      sq += q[k];
    }
    if (sp == 0) p[0] = sp = 1;
    for (std::size_t k = 0; k < n; ++k) {
      p[k] /= sp;
      q[k] /= sq;
    }
    worst = std::max(worst, std::abs(kl_divergence(p, q) - fixtures::direct_kl(p, q)));
  }
  o.require(worst <= 1e-9, "KL error " + fmt(worst));
  std::size_t bad = 0;
  for (const auto& f : fixtures::trace_fixtures()) {
    const auto t = fixtures::make_traces(f.records);
    bad += fraction_top1_difference(t) != f.top1;
    bad += fraction_high_kl(t) != f.high_kl;
    bad += tokens_after_first(t, DivergenceCriterion::top1_diff) != f.after_top1;
    bad += tokens_after_first(t, DivergenceCriterion::high_kl) != f.after_kl;
  }
  o.require(fixtures::trace_fixtures().size() == 20, "expected 20 fixtures");
  o.require(bad == 0, std::to_string(bad) + " fixture values differ");
  if (o.passed) o.detail = "worst KL error " + fmt(worst) + " on 1000 pairs; 20 fixtures exact";
  return o;
}

Outcome selftest_determinism(const std::string& cli, const fs::path& root) {
  Outcome o;
  fs::create_directories(root);
  const auto log = root / "determinism.log";
  for (const char* run : {"a", "b"}) {
    const int code = run_cli(cli, {"selftest", "planted", "--out", (root / run).string()}, log);
    o.require(code == 0, std::string("selftest run ") + run + " exited " + std::to_string(code));
  }
  if (!o.passed) return o;
  for (const char* f : {"selftest.csv", "selftest.json", "metrics.csv", "metrics.json"}) {
    const auto a = root / "a" / f;
    o.require(fs::exists(a), std::string(f) + " missing");
    o.require(read_file(a) == read_file(root / "b" / f), std::string(f) + " differs");
  }
  if (o.passed) o.detail = "selftest.csv, selftest.json, metrics.csv, metrics.json byte-identical";
  return o;
}

Outcome micro_pipeline(const std::string& cli, const fs::path& root, double& pipeline_seconds) {
  Outcome o;
  fs::create_directories(root);
  const auto log = root / "pipeline.log";
  const auto model = (root / "model").string();
  const auto out = (root / "run").string();
  const auto micro = kData + "/micro.json";

  const auto start = Clock::now();
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"planted", "build", "--dataset", micro, "--out", model},
           {"generate", "--model", model, "--dataset", micro, "--layers", "0", "--anchor", "newline", "--out", out},
           {"eval", "rhyme", "--dataset", micro, "--out", out},
           {"eval", "regen", "--model", model, "--dataset", micro, "--out", out},
           {"eval", "prob", "--model", model, "--dataset", micro, "--out", out}}) {
    const int code = run_cli(cli, args, log);
    o.require(code == 0, args[0] + " " + args[1] + " exited " + std::to_string(code) + " (see " + log.string() + ")");
    if (!o.passed) return o;
  }
  pipeline_seconds = seconds_since(start);

  using namespace metric_names;
  auto has_columns = [&](const fs::path& file, const std::vector<std::string>& columns) {
    const auto line = header(file);
    for (const auto& c : columns) {
      o.require(("," + line + ",").find("," + c + ",") != std::string::npos, file.filename().string() + " lacks " + c);
    }
  };
  auto has_metrics = [&](const fs::path& file, const std::vector<std::string>& names) {
    const auto text = read_file(file);
    for (const auto& n : names) {
      o.require(text.find("," + n + ",") != std::string::npos, file.filename().string() + " lacks " + n);
    }
  };
  const fs::path dir = out;
  has_columns(dir / "rhyme.csv", {kRhymeFamily, kRhymeFamilySteered, "samples", "seed", "config_hash"});
  has_columns(dir / "regen.csv", {kRegeneration, kRegenerationSteered, "samples", "seed", "config_hash"});
  has_columns(dir / "prob.csv", {kTop1, kHighKl, kAfterTop1, kAfterHighKl});
  has_metrics(dir / "regen_metrics.csv", {kRegenerationChance});

  // The answer/article columns come from the QA half of the pipeline.
  const auto qa_model = (root / "qa_model").string();
  const auto qa_out = (root / "qa_run").string();
  const auto micro_qa = kData + "/micro_qa.json";
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"planted", "build", "--dataset", micro_qa, "--max-context", "256", "--out", qa_model},
           {"generate", "--model", qa_model, "--dataset", micro_qa, "--layers", "0", "--anchor", "newline", "--out", qa_out},
           {"eval", "qa", "--dataset", micro_qa, "--out", qa_out}}) {
    const int code = run_cli(cli, args, log);
    o.require(code == 0, args[0] + " " + args[1] + " (qa) exited " + std::to_string(code) + " (see " + log.string() + ")");
    if (!o.passed) return o;
  }
  has_columns(fs::path(qa_out) / "qa.csv",
              {kAnswer, kArticleA, kArticleAn, kAnswerSteered, kArticleASteered, kArticleAnSteered});
  if (o.passed) o.detail = "rhyme, regeneration, trace and qa columns present";
  return o;
}

struct Line {
  int id;
  std::string title;
  double limit_seconds;  // 0 = no runtime bound
};

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <path-to-planlab-binary>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path root = fs::temp_directory_path() / ("planlab_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);

  int failures = 0;
  auto report = [&](const Line& line, const Outcome& o, double seconds) {
    const bool in_time = line.limit_seconds <= 0 || seconds < line.limit_seconds;
    const bool ok = o.passed && in_time;
    failures += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << line.id << ": " << line.title << " [" << fmt(seconds) << " s";
    if (line.limit_seconds > 0) std::cout << " < " << fmt(line.limit_seconds) << " s";
    std::cout << "]";
    if (!o.detail.empty()) std::cout << " " << o.detail;
    if (!in_time) std::cout << " (over time limit)";
    std::cout << std::endl;
  };
  auto timed = [&](const Line& line, const std::function<Outcome()>& body) {
    const auto start = Clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o.require(false, std::string("error: ") + e.what());
    }
    report(line, o, seconds_since(start));
  };

  timed({1, "recovery percentages 89/59/93/66, exact integers", 0.001}, recovery_percentages);
  timed({2, "steering antisymmetry and permutation invariance, bit-exact", 1.0}, antisymmetry_and_permutation);
  timed({3, "runtime vs brute-force oracle, <= 1e-6 relative", 10.0}, oracle_equivalence);

  // Criteria 4 to 6 share one planted self-test run; each is held to its own
  // limit against the full run time, which is a conservative bound.
  SelfTestReport rep;
  double selftest_seconds = 0;
  std::string selftest_error;
  {
    const auto start = Clock::now();
    try {
      rep = self_test(SelfTestConfig{});
    } catch (const std::exception& e) {
      selftest_error = e.what();
    }
    selftest_seconds = seconds_since(start);
  }
  auto checks = [&](const std::vector<std::string>& names) {
    if (!selftest_error.empty()) {
      Outcome o;
      o.require(false, "self-test error: " + selftest_error);
      return o;
    }
    return from_checks(rep, names);
  };
  report({4, "forward planning: plan cell flips >= 0.95, other layers <= 0.10, sweep picks plan cell", 60.0},
         checks({"steering_flip_plan_cell", "steering_flip_other_layers", "sweep_selects_plan_cell"}), selftest_seconds);
  report({5, "backward planning: marker flips >= 0.90, regeneration within 0.10 of baseline", 60.0},
         checks({"marker_flip", "regeneration_close_to_baseline"}), selftest_seconds);
  report({6, "circuit: copy head >= 95%, other heads <= 5%, ablation to chance +- 0.05", 30.0},
         checks({"patch_copy_head", "patch_other_heads", "ablation_to_chance"}), selftest_seconds);

  timed({7, "metric kernels: KL within 1e-9, 20 trace fixtures exact", 0}, metric_kernels);
  timed({8, "selftest planted twice, byte-identical outputs", 0},
        [&] { return selftest_determinism(cli, root / "determinism"); });

  {
    double pipeline_seconds = 0;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = micro_pipeline(cli, root / "pipeline", pipeline_seconds);
    } catch (const std::exception& e) {
      o.require(false, std::string("error: ") + e.what());
    }
    const double total = seconds_since(start);
    if (o.passed) o.detail += "; qa extension took " + fmt(total - pipeline_seconds) + " s";
    report({9, "micro pipeline generate + eval rhyme/regen/prob emits every metric column", 60.0}, o,
           o.passed ? pipeline_seconds : total);
  }

  if (failures == 0) fs::remove_all(root);
  std::cout << (failures == 0 ? "all primary criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
