#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "attnguide/model.hpp"

namespace attnguide {

// Analysed elements: the eight studied syntax classes and the four statement kinds.
using Element = std::variant<SyntaxClass, AstKind>;

const std::vector<Element>& analysis_elements();
std::string element_name(const Element& e);
bool is_syntax(const Element& e);

struct EvalInstance {
  CodeUnit unit;  // for pairs, concat_units(a, b)
  AlignedSequence seq;
  Example example;  // cloze: exactly one target position
  int target = 0;   // token id (cloze) or label (clone)
};

struct AttentionRecord {
  std::string unit_id;
  std::size_t num_layers = 0;
  std::size_t heads = 0;
  // One vector per (layer, head), index layer * heads + head; entry i is the
  // attention received by source token i.
  std::vector<Eigen::VectorXd> token_weights;
  // Rows follow analysis_elements(), columns (layer, head); NaN when absent.
  Eigen::MatrixXd element_weights;
  std::vector<bool> present;
  int prediction = 0;
  int target = 0;
  bool correct = false;

  double weight(std::size_t element, std::size_t layer, std::size_t head) const {
    return element_weights(static_cast<Eigen::Index>(element),
                           static_cast<Eigen::Index>(layer * heads + head));
  }
  /// Mean over every layer and head.
  double element_mean(std::size_t element) const {
    return element_weights.row(static_cast<Eigen::Index>(element)).mean();
  }
};

/// Attention each real position receives from head (layer, head): the column
/// mean over real query rows.
Eigen::VectorXd received_attention(const ForwardTrace& trace, std::size_t layer, std::size_t head);

AttentionRecord make_record(const ForwardTrace& trace, const EvalInstance& inst, int prediction);

std::vector<AttentionRecord> collect(const GuidedModel& model,
                                     const std::vector<EvalInstance>& instances);

/// Mean over included pattern rows of the attention mass placed on the
/// pattern's non-zero columns.
double pattern_mass(const Eigen::Ref<const Eigen::MatrixXd>& attention, const PatternMatrix& pattern);

enum class TestKind { MannWhitney, PairedT };

struct TestResult {
  std::string element;
  TestKind test = TestKind::MannWhitney;
  double statistic = 0.0;
  double p_value = 1.0;
  bool significant = false;
};

class EmptyGroup : public std::invalid_argument {
 public:
  EmptyGroup() : std::invalid_argument("Mann-Whitney needs two non-empty groups") {}
};

class ZeroVariance : public std::domain_error {
 public:
  ZeroVariance() : std::domain_error("paired differences have zero variance") {}
};

/// U of group a (pairs a > b count 1, ties 1/2) via midranks.
double mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);
/// Two-sided p by enumerating every split of the pooled midranks.
double mann_whitney_exact_p(const std::vector<double>& a, const std::vector<double>& b);
/// Two-sided p by the normal approximation, tie and continuity corrected.
double mann_whitney_normal_p(const std::vector<double>& a, const std::vector<double>& b);
/// Exact when |a| + |b| <= 12, normal approximation otherwise.
TestResult mann_whitney(const std::vector<double>& a, const std::vector<double>& b);

double regularized_incomplete_beta(double a, double b, double x);
/// Two-sided tail probability P(|T| >= |t|) with df degrees of freedom.
double student_t_two_sided(double t, double df);
TestResult paired_t(const std::vector<double>& diffs);

/// Flags p < base_alpha / k.
std::vector<TestResult> bonferroni(std::vector<TestResult> results, double base_alpha, std::size_t k);

enum class Stratum { High, Low, Excluded };

struct Partition {
  std::vector<Stratum> labels;
  std::vector<double> thresholds;  // one per layer
  std::size_t high = 0, low = 0, excluded = 0;
};

Partition partition_high_low(const std::vector<AttentionRecord>& records, std::size_t element);

struct StratifiedAccuracy {
  std::optional<double> acc_high, acc_low;
  std::size_t n_high = 0, n_low = 0;
  std::optional<double> p_value;  // Mann-Whitney on 0/1 correctness
};

StratifiedAccuracy stratified_accuracy(const std::vector<AttentionRecord>& records,
                                       const std::vector<Stratum>& labels);

struct FixAccounting {
  std::size_t correct = 0;  // guided
  std::size_t wrong = 0;    // guided
  std::size_t baseline_correct = 0;
  std::size_t fixed = 0;   // wrong under baseline, correct under guided
  std::size_t broken = 0;  // correct under baseline, wrong under guided
  std::optional<double> fix_pct;
};

FixAccounting fix_accounting(const std::vector<int>& baseline, const std::vector<int>& guided,
                             const std::vector<int>& targets);

struct Metrics {
  double accuracy = 0.0;
  std::optional<double> precision, recall, f1;  // positive class 1
};

Metrics metrics(const std::vector<int>& predictions, const std::vector<int>& targets);

struct ElementReport {
  std::string element;
  bool syntax = true;
  std::size_t n_correct = 0, n_incorrect = 0;
  std::optional<double> mean_correct, mean_incorrect;
  std::optional<TestResult> mann_whitney, paired_t;
  std::string paired_t_error;
  std::size_t high = 0, low = 0, excluded = 0;
  StratifiedAccuracy strata;
};

struct BiasReport {
  std::size_t instances = 0;
  double base_alpha = 0.12;
  std::size_t bonferroni_k = 0;
  std::vector<ElementReport> elements;
  Metrics metrics;
  std::optional<FixAccounting> fixes;
};

BiasReport bias_report(const std::vector<AttentionRecord>& records, double base_alpha = 0.12);

nlohmann::json to_json(const BiasReport& report);
// Plot tables with columns element,group,mean,p.
void write_bias_csv(std::ostream& out, const BiasReport& report, bool syntax);
void write_stratified_csv(std::ostream& out, const BiasReport& report, bool syntax);

}  // namespace attnguide
