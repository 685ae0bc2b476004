#include "attnguide/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace attnguide {

using Eigen::Index;

const std::vector<Element>& analysis_elements() {
  static const std::vector<Element> all = {
      SyntaxClass::Identifier, SyntaxClass::Modifier,  SyntaxClass::Operator,
      SyntaxClass::DataType,   SyntaxClass::Separator, SyntaxClass::Keyword,
      SyntaxClass::StringLit,  SyntaxClass::BooleanLit, AstKind::MethodSignature,
      AstKind::IfElse,         AstKind::While,          AstKind::Return,
  };
  return all;
}

std::string element_name(const Element& e) {
  return std::visit([](auto v) { return std::string(to_string(v)); }, e);
}

bool is_syntax(const Element& e) { return std::holds_alternative<SyntaxClass>(e); }

Eigen::VectorXd received_attention(const ForwardTrace& trace, std::size_t layer, std::size_t head) {
  const auto& a = trace.attention_real(layer, head);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Index>(trace.seq_len()));
  out.head(a.cols()) = a.colwise().mean().transpose();
  return out;
}

AttentionRecord make_record(const ForwardTrace& trace, const EvalInstance& inst, int prediction) {
  const auto& unit = inst.unit;
  const auto& elems = analysis_elements();
  AttentionRecord rec;
  rec.unit_id = unit.id;
  rec.num_layers = trace.num_layers();
  rec.heads = trace.heads();
  rec.prediction = prediction;
  rec.target = inst.target;
  rec.correct = prediction == inst.target;

  // Tokens cut by truncation carry no weight and must not dilute the means.
  std::vector<bool> covered(unit.tokens.size(), false);
  for (const auto& a : inst.seq.alignment)
    if (a) covered[*a] = true;

  std::vector<std::vector<std::size_t>> members(elems.size());
  for (std::size_t e = 0; e < elems.size(); ++e) {
    std::vector<bool> in(unit.tokens.size(), false);
    if (const auto* c = std::get_if<SyntaxClass>(&elems[e])) {
      for (std::size_t i = 0; i < unit.tokens.size(); ++i) in[i] = unit.tokens[i].syntax_class == *c;
    } else {
      in = ast_membership(unit, std::get<AstKind>(elems[e]));
    }
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] && covered[i]) members[e].push_back(i);
  }

  const std::size_t lh = rec.num_layers * rec.heads;
  rec.element_weights.setConstant(static_cast<Index>(elems.size()), static_cast<Index>(lh),
                                  std::numeric_limits<double>::quiet_NaN());
  rec.present.resize(elems.size());
  for (std::size_t e = 0; e < elems.size(); ++e) rec.present[e] = !members[e].empty();

  rec.token_weights.reserve(lh);
  for (std::size_t l = 0; l < rec.num_layers; ++l) {
    for (std::size_t h = 0; h < rec.heads; ++h) {
      const auto agg = aggregate_to_source(received_attention(trace, l, h), inst.seq,
                                           unit.tokens.size());
      for (std::size_t e = 0; e < elems.size(); ++e) {
        if (members[e].empty()) continue;
        double s = 0.0;
        for (std::size_t i : members[e]) s += agg.per_token[static_cast<Index>(i)];
        rec.element_weights(static_cast<Index>(e), static_cast<Index>(l * rec.heads + h)) =
            s / static_cast<double>(members[e].size());
      }
      rec.token_weights.push_back(agg.per_token);
    }
  }
  return rec;
}

std::vector<AttentionRecord> collect(const GuidedModel& model,
                                     const std::vector<EvalInstance>& instances) {
  std::vector<AttentionRecord> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    const ForwardTrace tr = forward(model, inst.example);
    int pred = 0;
    if (model.task == Task::Cloze) {
      if (inst.example.target_positions.size() != 1)
        throw std::invalid_argument("cloze evaluation instances need exactly one target");
      pred = argmax(tr.mlm_logits().row(0));
    } else {
      pred = tr.clone_logit() > 0.0 ? 1 : 0;
    }
    out.push_back(make_record(tr, inst, pred));
  }
  return out;
}

double pattern_mass(const Eigen::Ref<const Eigen::MatrixXd>& attention, const PatternMatrix& pattern) {
  const Index m = std::min<Index>(attention.cols(), static_cast<Index>(pattern.real_len));
  double total = 0.0;
  std::size_t rows = 0;
  for (Index p = 0; p < std::min<Index>(attention.rows(), m); ++p) {
    if (!pattern.row_included[static_cast<std::size_t>(p)]) continue;
    for (Index q = 0; q < m; ++q)
      if (pattern.values(p, q) > 0.0) total += attention(p, q);
    ++rows;
  }
  return rows ? total / static_cast<double>(rows) : 0.0;
}

// ---- Mann-Whitney ----

namespace {

struct Ranked {
  std::vector<double> ranks;  // pooled midranks, a first then b
  double tie_term = 0.0;      // sum of t^3 - t over tie groups
};

Ranked pooled_midranks(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return all[i] < all[j]; });
  Ranked r;
  r.ranks.resize(all.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && all[order[j + 1]] == all[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r.ranks[order[k]] = mid;
    const double t = static_cast<double>(j - i + 1);
    r.tie_term += t * t * t - t;
    i = j + 1;
  }
  return r;
}

void require_groups(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw EmptyGroup();
}

}  // namespace

double mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  require_groups(a, b);
  const auto r = pooled_midranks(a, b);
  const double na = static_cast<double>(a.size());
  const double ra = std::accumulate(r.ranks.begin(), r.ranks.begin() + static_cast<long>(a.size()), 0.0);
  return ra - na * (na + 1.0) / 2.0;
}

double mann_whitney_exact_p(const std::vector<double>& a, const std::vector<double>& b) {
  require_groups(a, b);
  const std::size_t n = a.size() + b.size();
  if (n > 20) throw std::invalid_argument("exact Mann-Whitney limited to 20 observations");
  const auto r = pooled_midranks(a, b);
  const double na = static_cast<double>(a.size());
  const double offset = na * (na + 1.0) / 2.0;
  const double mu = na * static_cast<double>(b.size()) / 2.0;
  const double observed = std::abs(mann_whitney_u(a, b) - mu);
  std::size_t extreme = 0, total = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != a.size()) continue;
    double ra = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) ra += r.ranks[i];
    ++total;
    if (std::abs(ra - offset - mu) >= observed - 1e-9) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

double mann_whitney_normal_p(const std::vector<double>& a, const std::vector<double>& b) {
  require_groups(a, b);
  const auto r = pooled_midranks(a, b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double n = na + nb;
  const double mu = na * nb / 2.0;
  const double var = na * nb / 12.0 * ((n + 1.0) - r.tie_term / (n * (n - 1.0)));
  if (var <= 0.0) return 1.0;
  const double dev = std::max(0.0, std::abs(mann_whitney_u(a, b) - mu) - 0.5);
  return std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0)));
}

TestResult mann_whitney(const std::vector<double>& a, const std::vector<double>& b) {
  TestResult res;
  res.test = TestKind::MannWhitney;
  res.statistic = mann_whitney_u(a, b);
  res.p_value = a.size() + b.size() <= 12 ? mann_whitney_exact_p(a, b) : mann_whitney_normal_p(a, b);
  return res;
}

// ---- t distribution ----

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (df <= 0.0) throw std::invalid_argument("degrees of freedom must be positive");
  if (!std::isfinite(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

TestResult paired_t(const std::vector<double>& diffs) {
  if (diffs.size() < 2) throw std::invalid_argument("paired t-test needs at least two differences");
  const double n = static_cast<double>(diffs.size());
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (!(sd > 0.0)) throw ZeroVariance();
  TestResult res;
  res.test = TestKind::PairedT;
  res.statistic = mean / (sd / std::sqrt(n));
  res.p_value = std::clamp(student_t_two_sided(res.statistic, n - 1.0), 0.0, 1.0);
  return res;
}

std::vector<TestResult> bonferroni(std::vector<TestResult> results, double base_alpha, std::size_t k) {
  if (k == 0) throw std::invalid_argument("Bonferroni k must be positive");
  const double threshold = base_alpha / static_cast<double>(k);
  for (auto& r : results) r.significant = r.p_value < threshold;
  return results;
}

// ---- high / low partition ----

Partition partition_high_low(const std::vector<AttentionRecord>& records, std::size_t element) {
  Partition out;
  out.labels.assign(records.size(), Stratum::Excluded);
  if (records.empty()) return out;
  const std::size_t L = records.front().num_layers, h = records.front().heads;

  // Mean as reference + mean deviation, so constant inputs give the constant
  // back exactly and no head can exceed its own value.
  out.thresholds.assign(L, 0.0);
  std::vector<double> ref(L, 0.0);
  std::size_t with = 0;
  for (const auto& r : records) {
    if (r.num_layers != L || r.heads != h)
      throw std::invalid_argument("records come from differently shaped models");
    if (!r.present[element]) continue;
    if (with++ == 0)
      for (std::size_t l = 0; l < L; ++l) ref[l] = r.weight(element, l, 0);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t j = 0; j < h; ++j) out.thresholds[l] += r.weight(element, l, j) - ref[l];
  }
  if (with == 0) {
    out.excluded = records.size();
    return out;
  }
  for (std::size_t l = 0; l < L; ++l)
    out.thresholds[l] = ref[l] + out.thresholds[l] / static_cast<double>(with * h);

  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.present[element]) continue;
    std::size_t high_layers = 0, categorized = 0;
    for (std::size_t l = 0; l < L; ++l) {
      std::size_t high_heads = 0;
      for (std::size_t j = 0; j < h; ++j) high_heads += r.weight(element, l, j) > out.thresholds[l];
      if (2 * high_heads == h) continue;
      ++categorized;
      high_layers += 2 * high_heads > h;
    }
    if (2 * high_layers > categorized)
      out.labels[i] = Stratum::High;
    else if (2 * high_layers < categorized)
      out.labels[i] = Stratum::Low;
  }
  for (auto s : out.labels) {
    if (s == Stratum::High) ++out.high;
    else if (s == Stratum::Low) ++out.low;
    else ++out.excluded;
  }
  return out;
}

StratifiedAccuracy stratified_accuracy(const std::vector<AttentionRecord>& records,
                                       const std::vector<Stratum>& labels) {
  if (records.size() != labels.size())
    throw std::invalid_argument("one label per record is required");
  std::vector<double> high, low;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double c = records[i].correct ? 1.0 : 0.0;
    if (labels[i] == Stratum::High) high.push_back(c);
    if (labels[i] == Stratum::Low) low.push_back(c);
  }
  auto mean = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  StratifiedAccuracy out;
  out.n_high = high.size();
  out.n_low = low.size();
  out.acc_high = mean(high);
  out.acc_low = mean(low);
  if (!high.empty() && !low.empty()) out.p_value = mann_whitney(high, low).p_value;
  return out;
}

FixAccounting fix_accounting(const std::vector<int>& baseline, const std::vector<int>& guided,
                             const std::vector<int>& targets) {
  if (baseline.size() != targets.size() || guided.size() != targets.size())
    throw std::invalid_argument("prediction and target counts differ");
  FixAccounting out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const bool b = baseline[i] == targets[i];
    const bool g = guided[i] == targets[i];
    out.baseline_correct += b;
    out.correct += g;
    out.fixed += !b && g;
    out.broken += b && !g;
  }
  out.wrong = targets.size() - out.correct;
  const std::size_t baseline_wrong = targets.size() - out.baseline_correct;
  if (baseline_wrong > 0)
    out.fix_pct = 100.0 * static_cast<double>(out.fixed) / static_cast<double>(baseline_wrong);
  return out;
}

Metrics metrics(const std::vector<int>& predictions, const std::vector<int>& targets) {
  if (predictions.size() != targets.size())
    throw std::invalid_argument("prediction and target counts differ");
  if (targets.empty()) throw std::invalid_argument("metrics need at least one instance");
  std::size_t right = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    right += predictions[i] == targets[i];
    tp += predictions[i] == 1 && targets[i] == 1;
    fp += predictions[i] == 1 && targets[i] != 1;
    fn += predictions[i] != 1 && targets[i] == 1;
  }
  Metrics m;
  m.accuracy = static_cast<double>(right) / static_cast<double>(targets.size());
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision && m.recall)
    m.f1 = *m.precision + *m.recall > 0.0
               ? 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall)
               : 0.0;
  return m;
}

// ---- report ----

BiasReport bias_report(const std::vector<AttentionRecord>& records, double base_alpha) {
  BiasReport rep;
  rep.instances = records.size();
  rep.base_alpha = base_alpha;
  const auto& elems = analysis_elements();
  rep.bonferroni_k = elems.size();

  std::vector<int> preds, targets;
  for (const auto& r : records) {
    preds.push_back(r.prediction);
    targets.push_back(r.target);
  }
  if (!records.empty()) rep.metrics.accuracy = metrics(preds, targets).accuracy;

  std::vector<TestResult> mw, pt;
  std::vector<std::size_t> mw_idx, pt_idx;
  for (std::size_t e = 0; e < elems.size(); ++e) {
    ElementReport er;
    er.element = element_name(elems[e]);
    er.syntax = is_syntax(elems[e]);
    std::vector<double> good, bad;
    for (const auto& r : records) {
      if (!r.present[e]) continue;
      (r.correct ? good : bad).push_back(r.element_mean(e));
    }
    er.n_correct = good.size();
    er.n_incorrect = bad.size();
    auto mean = [](const std::vector<double>& v) -> std::optional<double> {
      if (v.empty()) return std::nullopt;
      return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    er.mean_correct = mean(good);
    er.mean_incorrect = mean(bad);

    if (!good.empty() && !bad.empty()) {
      er.mann_whitney = mann_whitney(good, bad);
      er.mann_whitney->element = er.element;
      mw.push_back(*er.mann_whitney);
      mw_idx.push_back(e);

      // Pair per (layer, head): mean weight when correct minus when incorrect.
      const std::size_t lh = records.front().num_layers * records.front().heads;
      std::vector<double> diffs(lh, 0.0);
      for (std::size_t k = 0; k < lh; ++k) {
        double sg = 0.0, sb = 0.0;
        for (const auto& r : records) {
          if (!r.present[e]) continue;
          const double w = r.element_weights(static_cast<Index>(e), static_cast<Index>(k));
          (r.correct ? sg : sb) += w;
        }
        diffs[k] = sg / static_cast<double>(good.size()) - sb / static_cast<double>(bad.size());
      }
      try {
        er.paired_t = paired_t(diffs);
        er.paired_t->element = er.element;
        pt.push_back(*er.paired_t);
        pt_idx.push_back(e);
      } catch (const std::exception& ex) {
        er.paired_t_error = ex.what();
      }
    }

    const Partition part = partition_high_low(records, e);
    er.high = part.high;
    er.low = part.low;
    er.excluded = part.excluded;
    er.strata = stratified_accuracy(records, part.labels);
    rep.elements.push_back(std::move(er));
  }

  mw = bonferroni(std::move(mw), base_alpha, rep.bonferroni_k);
  for (std::size_t i = 0; i < mw.size(); ++i) rep.elements[mw_idx[i]].mann_whitney = mw[i];
  pt = bonferroni(std::move(pt), base_alpha, rep.bonferroni_k);
  for (std::size_t i = 0; i < pt.size(); ++i) rep.elements[pt_idx[i]].paired_t = pt[i];
  return rep;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json test_json(const std::optional<TestResult>& t) {
  if (!t) return nullptr;
  return {{"test", t->test == TestKind::MannWhitney ? "MannWhitney" : "PairedT"},
          {"statistic", t->statistic},
          {"p_value", t->p_value},
          {"significant", t->significant}};
}

std::string num(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

std::optional<double> p_of(const std::optional<TestResult>& t) {
  return t ? std::optional<double>(t->p_value) : std::nullopt;
}

}  // namespace

nlohmann::json to_json(const BiasReport& report) {
  nlohmann::json elems = nlohmann::json::array();
  for (const auto& e : report.elements) {
    nlohmann::json pt = test_json(e.paired_t);
    if (!e.paired_t_error.empty()) pt = {{"error", e.paired_t_error}};
    elems.push_back({
        {"element", e.element},
        {"kind", e.syntax ? "syntax" : "ast"},
        {"n_correct", e.n_correct},
        {"n_incorrect", e.n_incorrect},
        {"mean_correct", opt(e.mean_correct)},
        {"mean_incorrect", opt(e.mean_incorrect)},
        {"tests", {{"mann_whitney", test_json(e.mann_whitney)}, {"paired_t", pt}}},
        {"partition", {{"high", e.high}, {"low", e.low}, {"excluded", e.excluded}}},
        {"strata",
         {{"acc_high", opt(e.strata.acc_high)},
          {"acc_low", opt(e.strata.acc_low)},
          {"n_high", e.strata.n_high},
          {"n_low", e.strata.n_low},
          {"p_value", opt(e.strata.p_value)}}},
    });
  }
  nlohmann::json j = {
      {"instances", report.instances},
      {"bonferroni",
       {{"base_alpha", report.base_alpha},
        {"k", report.bonferroni_k},
        {"threshold", report.base_alpha / static_cast<double>(std::max<std::size_t>(1, report.bonferroni_k))}}},
      {"metrics",
       {{"accuracy", report.metrics.accuracy},
        {"precision", opt(report.metrics.precision)},
        {"recall", opt(report.metrics.recall)},
        {"f1", opt(report.metrics.f1)}}},
      {"elements", elems},
      {"fixes", nullptr},
  };
  if (report.fixes) {
    const auto& f = *report.fixes;
    j["fixes"] = {{"correct", f.correct},
                  {"wrong", f.wrong},
                  {"baseline_correct", f.baseline_correct},
                  {"fixed", f.fixed},
                  {"broken", f.broken},
                  {"fix_pct", opt(f.fix_pct)}};
  }
  return j;
}

void write_bias_csv(std::ostream& out, const BiasReport& report, bool syntax) {
  out << "element,group,mean,p\n";
  for (const auto& e : report.elements) {
    if (e.syntax != syntax) continue;
    const auto p = num(p_of(e.mann_whitney));
    out << e.element << ",correct," << num(e.mean_correct) << ',' << p << '\n';
    out << e.element << ",incorrect," << num(e.mean_incorrect) << ',' << p << '\n';
  }
}

void write_stratified_csv(std::ostream& out, const BiasReport& report, bool syntax) {
  out << "element,group,mean,p\n";
  for (const auto& e : report.elements) {
    if (e.syntax != syntax) continue;
    const auto p = num(e.strata.p_value);
    out << e.element << ",high," << num(e.strata.acc_high) << ',' << p << '\n';
    out << e.element << ",low," << num(e.strata.acc_low) << ',' << p << '\n';
  }
}

}  // namespace attnguide
