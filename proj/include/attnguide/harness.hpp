#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnguide/analysis.hpp"
#include "attnguide/model.hpp"

namespace attnguide {

/// Grammar-driven Java-subset snippets. Profiles: "mixed" (methods and
/// statement blocks), "methods", "statements".
std::vector<CorpusEntry> gen_corpus(std::size_t num, std::uint64_t seed,
                                    const std::string& profile = "mixed");

std::vector<CodeUnit> parse_corpus(const std::vector<CorpusEntry>& entries);

/// Consistently renames every identifier except String/System-style type
/// names, using a permutation of the generator's name pool.
CodeUnit rename_identifiers(const CodeUnit& unit, std::uint64_t seed, const std::string& new_id);

struct CorpusParams {
  std::size_t num_snippets = 2000;
  std::uint64_t seed = 7;
  std::string profile = "mixed";
  std::string path;  // read this JSONL file instead of generating
};

struct HyperParams {
  double lr = 3e-3;
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double alpha0 = 1.0;
  double lambda = 0.5;
  std::vector<std::string> patterns{"syntax", "ast"};
};

struct ExperimentSpec {
  Task task = Task::Cloze;
  CorpusParams corpus;
  ModelConfig model;  // vocab_size is taken from the built vocabulary
  HyperParams hyper;
  std::size_t folds = 5;
  double train_fraction = 1.0;
  std::size_t vocab_size = 1024;
  std::size_t cloze_per_unit = 4;
  std::uint64_t seed = 1;  // init, splits, batch order and masks; shared by both arms

  void validate() const;  // throws std::invalid_argument
};

/// Small configuration used by the tests and the acceptance suite.
ExperimentSpec toy_spec();

nlohmann::json to_json(const ExperimentSpec& spec);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentSpec spec_from_json(const nlohmann::json& j);
ExperimentSpec load_spec_file(const std::string& path);

struct Split {
  std::vector<std::size_t> train, test;
};

/// k disjoint test folds over a seeded permutation; one fold means 80/20.
std::vector<Split> kfold_splits(std::size_t n, std::size_t folds, std::uint64_t seed);

/// ceil(fraction * |train|) items; smaller fractions are prefixes of larger ones.
std::vector<std::size_t> train_subset(const std::vector<std::size_t>& train, double fraction,
                                      std::uint64_t seed);

std::vector<CodeUnit> load_units(const CorpusParams& params);

/// Cloze instances for one unit: up to `per_unit` positions whose source
/// token is a single subtoken of one of the eight studied classes.
std::vector<EvalInstance> cloze_instances(const CodeUnit& unit, const Vocab& vocab,
                                          std::size_t max_len, std::size_t per_unit, Rng& rng);

/// Clone pairs: a positive (renamed copy) and a negative (renamed other unit)
/// per anchor unit.
std::vector<EvalInstance> clone_pairs(const std::vector<CodeUnit>& units, const Vocab& vocab,
                                      std::size_t max_len, std::uint64_t seed);

struct ArmResult {
  std::vector<int> predictions, targets;
  std::vector<AttentionRecord> records;
  // Per instance, mean over guided heads of the mass on the pattern's target
  // columns (NaN when no guided head has an included row).
  std::vector<double> target_mass;
  TrainLog log;
};

struct FoldResult {
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  ArmResult baseline, guided;
};

struct RunResult {
  ExperimentSpec spec;
  std::vector<FoldResult> folds;
  Metrics baseline, guided;
  FixAccounting fixes;
  BiasReport baseline_report, guided_report;
  Vocab vocab;  // of the first fold
  GuidedModel baseline_model, guided_model;  // of the first fold
};

RunResult run_cloze(const ExperimentSpec& spec);
RunResult run_clone_toy(const ExperimentSpec& spec);
RunResult run_experiment(const ExperimentSpec& spec);

/// DIR/{baseline,guided}/{model.ckpt,vocab.txt,spec.json,train_log.csv,report.json}
/// plus DIR/summary.json and DIR/fig{3,4,5,6}.csv.
void write_run(const RunResult& run, const std::string& dir);

/// Loads a model directory written by write_run (an arm directory, or the run
/// directory, in which case the guided arm is used).
struct LoadedModel {
  GuidedModel model;
  Vocab vocab;
  ExperimentSpec spec;
};
LoadedModel load_model_dir(const std::string& dir);

/// Evaluates a trained model on a corpus and builds the bias report.
BiasReport analyze(const LoadedModel& loaded, const std::vector<CodeUnit>& units);

enum class SweepAxis { Lambda, Alpha0, TrainFraction };
SweepAxis sweep_axis_from_string(const std::string& s);
std::string to_string(SweepAxis a);
std::vector<double> default_grid(SweepAxis a);

struct SweepRow {
  double value = 0.0;
  std::size_t train_size = 0;  // summed over folds
  Metrics baseline, guided;
};

std::vector<SweepRow> sweep(const ExperimentSpec& spec, SweepAxis axis,
                            std::vector<double> grid = {});
void write_sweep_csv(std::ostream& out, SweepAxis axis, const std::vector<SweepRow>& rows);

}  // namespace attnguide
