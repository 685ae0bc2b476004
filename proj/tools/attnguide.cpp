// Command-line front end. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "attnguide/harness.hpp"
#include "attnguide/selftest.hpp"

using namespace attnguide;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void print_metrics(const char* label, const Metrics& m) {
  std::printf("%-9s accuracy %.4f", label, m.accuracy);
  if (m.f1) std::printf("  precision %.4f  recall %.4f  f1 %.4f", m.precision.value_or(0.0),
                        m.recall.value_or(0.0), *m.f1);
  std::printf("\n");
}

struct TrainArgs {
  std::string task, config, out, patterns;
  std::optional<double> alpha0, lambda, fraction;
};

int cmd_gen_corpus(const std::string& out, std::size_t num, std::uint64_t seed,
                   const std::string& profile) {
  const auto entries = gen_corpus(num, seed, profile);
  if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  write_corpus(os, entries);
  std::printf("wrote %zu snippets to %s\n", entries.size(), out.c_str());
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  ExperimentSpec spec = load_spec_file(a.config);
  spec.task = task_from_string(a.task);
  if (a.alpha0) spec.hyper.alpha0 = *a.alpha0;
  if (a.lambda) spec.hyper.lambda = *a.lambda;
  if (a.fraction) spec.train_fraction = *a.fraction;
  if (!a.patterns.empty()) spec.hyper.patterns = split_list(a.patterns);
  spec.validate();
  const RunResult r = run_experiment(spec);
  write_run(r, a.out);
  print_metrics("baseline", r.baseline);
  print_metrics("guided", r.guided);
  std::printf("fixed %zu broken %zu", r.fixes.fixed, r.fixes.broken);
  if (r.fixes.fix_pct) std::printf(" (%.2f%% of baseline errors)", *r.fixes.fix_pct);
  std::printf("\nwrote %s\n", a.out.c_str());
  return kOk;
}

int cmd_analyze(const std::string& model_dir, const std::string& corpus, const std::string& out) {
  const LoadedModel loaded = load_model_dir(model_dir);
  const auto units = parse_corpus(read_corpus_file(corpus));
  const BiasReport rep = analyze(loaded, units);
  if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  os << to_json(rep).dump(2) << "\n";
  std::printf("%zu instances, accuracy %.4f, wrote %s\n", rep.instances, rep.metrics.accuracy,
              out.c_str());
  return kOk;
}

int cmd_sweep(const std::string& axis_name, const std::string& config, const std::string& out,
              const std::vector<double>& values) {
  const SweepAxis axis = sweep_axis_from_string(axis_name);
  const ExperimentSpec spec = load_spec_file(config);
  const auto rows = sweep(spec, axis, values);
  fs::create_directories(out);
  const fs::path path = fs::path(out) / ("sweep_" + to_string(axis) + ".csv");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_sweep_csv(os, axis, rows);
  write_sweep_csv(std::cout, axis, rows);
  return kOk;
}

int cmd_selftest(bool full) {
  std::vector<int> ids = {1, 2, 3, 4, 5, 6, 7, 8, 10};
  if (full) ids.insert(ids.begin() + 8, 9);
  const auto results = run_checks(ids, {}, [](const CheckResult& r) {
    std::printf("%s\n", format_result(r).c_str());
    std::fflush(stdout);
  });
  std::size_t passed = 0;
  for (const auto& r : results) passed += r.pass;
  std::printf("%zu/%zu checks passed\n", passed, results.size());
  return passed == results.size() ? kOk : kInvalid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention analysis and attention guiding for a toy code model"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic Java-subset corpus (JSONL)");
  std::string gen_out, profile = "mixed";
  std::size_t num = 2000;
  std::uint64_t seed = 7;
  gen->add_option("--out", gen_out, "Output JSONL file")->required();
  gen->add_option("--num", num, "Number of snippets")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--profile", profile, "mixed, methods or statements");

  auto* tr = app.add_subcommand("train", "Train baseline and guided models and write reports");
  TrainArgs ta;
  tr->add_option("--task", ta.task, "cloze or clone")->required();
  tr->add_option("--config", ta.config, "Experiment JSON")->required();
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--alpha0", ta.alpha0, "Initial guiding weight");
  tr->add_option("--lambda", ta.lambda, "Guided share of heads per layer");
  tr->add_option("--patterns", ta.patterns, "Comma list of syntax, ast, global, local");
  tr->add_option("--train-fraction", ta.fraction, "Share of the training split to use");

  auto* an = app.add_subcommand("analyze", "Attention bias report for a trained model");
  std::string model_dir, corpus, report_out;
  an->add_option("--model", model_dir, "Run or arm directory written by train")->required();
  an->add_option("--corpus", corpus, "Corpus JSONL")->required();
  an->add_option("--out", report_out, "Report JSON path")->required();

  auto* sw = app.add_subcommand("sweep", "Sweep one hyperparameter and tabulate metrics");
  std::string axis, sw_config, sw_out;
  std::vector<double> values;
  sw->add_option("--axis", axis, "lambda, alpha0 or fraction")->required();
  sw->add_option("--config", sw_config, "Experiment JSON")->required();
  sw->add_option("--out", sw_out, "Output directory")->required();
  sw->add_option("--values", values, "Grid override")->delimiter(',');

  auto* st = app.add_subcommand("selftest", "Gradient checks and oracle suites");
  bool full = false;
  st->add_flag("--full", full, "Include the guided-training experiment");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(gen_out, num, seed, profile);
    if (tr->parsed()) return cmd_train(ta);
    if (an->parsed()) return cmd_analyze(model_dir, corpus, report_out);
    if (sw->parsed()) return cmd_sweep(axis, sw_config, sw_out, values);
    if (st->parsed()) return cmd_selftest(full);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const UnsupportedConstruct& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const MalformedStatement& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kInvalid;
}
