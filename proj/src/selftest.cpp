#include "attnguide/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "attnguide/harness.hpp"

namespace attnguide {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- shared toy fixtures ----

const std::vector<CodeUnit>& tiny_units() {
  static const std::vector<CodeUnit> u = {
      parse("t0", "sum = num1 + num2 ;"),
      parse("t1", "return a + b ;"),
      parse("t2", "if ( x > 1 ) y = 2 ;"),
      parse("t3", "String s = \"q\" ;"),
  };
  return u;
}

const Vocab& tiny_vocab() {
  static const Vocab v = build_vocab(tiny_units(), 64);
  return v;
}

ModelConfig tiny_config(std::uint64_t seed = 11) {
  ModelConfig c;
  c.num_layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.vocab_size = tiny_vocab().size();
  c.max_len = 12;
  c.seed = seed;
  return c;
}

std::vector<Example> tiny_batch(Task task, const PatternSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < tiny_units().size(); ++i) {
    TrainItem it;
    it.seq = encode(tiny_units()[i], tiny_vocab(), 12);
    it.patterns.push_back(build_pattern(it.seq, tiny_units()[i], spec));
    it.label = static_cast<int>(i % 2);
    out.push_back(make_example(it, task, 0.3, rng, tiny_vocab().size()));
  }
  return out;
}

// ---- independent oracles ----

// Cell (p, q) is 1/k when q holds a token of class c, k counting such q.
Eigen::MatrixXd brute_force_syntax(const AlignedSequence& seq, const CodeUnit& unit, SyntaxClass c) {
  const std::size_t n = seq.size();
  std::size_t k = 0;
  for (std::size_t q = 0; q < seq.real_len; ++q)
    if (seq.alignment[q] && unit.tokens[*seq.alignment[q]].syntax_class == c) ++k;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  if (k == 0) return out;
  for (std::size_t p = 0; p < seq.real_len; ++p)
    for (std::size_t q = 0; q < seq.real_len; ++q)
      if (seq.alignment[q] && unit.tokens[*seq.alignment[q]].syntax_class == c)
        out(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q)) = 1.0 / static_cast<double>(k);
  return out;
}

double pairwise_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

// Exact two-sided p over every relabelling of the pooled sample.
double brute_exact_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pool(a);
  pool.insert(pool.end(), b.begin(), b.end());
  const double mu = static_cast<double>(a.size() * b.size()) / 2.0;
  const double obs = std::abs(pairwise_u(a, b) - mu);
  std::vector<int> sel(pool.size(), 0);
  std::fill(sel.end() - static_cast<long>(a.size()), sel.end(), 1);
  std::size_t total = 0, extreme = 0;
  do {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < pool.size(); ++i) (sel[i] ? x : y).push_back(pool[i]);
    ++total;
    if (std::abs(pairwise_u(x, y) - mu) >= obs - 1e-9) ++extreme;
  } while (std::next_permutation(sel.begin(), sel.end()));
  return static_cast<double>(extreme) / static_cast<double>(total);
}

// Two-sided t tail by composite Simpson on the density.
double simpson_t_two_sided(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) /
                   std::sqrt(df * std::numbers::pi);
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 200000;
  const double h = std::abs(t) / n;
  double s = pdf(0) + pdf(std::abs(t));
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

AttentionRecord one_element_record(const std::vector<std::vector<double>>& w) {
  AttentionRecord r;
  r.num_layers = w.size();
  r.heads = w.front().size();
  r.element_weights = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(analysis_elements().size()),
                                                static_cast<Eigen::Index>(r.num_layers * r.heads),
                                                std::nan(""));
  r.present.assign(analysis_elements().size(), false);
  r.present[0] = true;
  for (std::size_t l = 0; l < r.num_layers; ++l)
    for (std::size_t h = 0; h < r.heads; ++h)
      r.element_weights(0, static_cast<Eigen::Index>(l * r.heads + h)) = w[l][h];
  r.correct = true;
  return r;
}

struct Failures {
  std::vector<std::string> items;
  void expect(bool ok, const std::string& what) {
    if (!ok) items.push_back(what);
  }
  CheckResult finish(int id, std::string name, std::string ok_detail) const {
    CheckResult r;
    r.id = id;
    r.name = std::move(name);
    r.pass = items.empty();
    if (r.pass) {
      r.detail = std::move(ok_detail);
    } else {
      for (std::size_t i = 0; i < items.size() && i < 3; ++i) r.detail += (i ? "; " : "") + items[i];
      if (items.size() > 3) r.detail += "; +" + std::to_string(items.size() - 3) + " more";
    }
    return r;
  }
};

}  // namespace

CheckResult check_pattern_oracle() {
  Failures f;
  const CodeUnit unit = parse("assign", "sum = num1 + num2 ;");
  const Vocab vocab = build_vocab({unit}, 300);
  const AlignedSequence seq = encode(unit, vocab, 8);
  f.expect(seq.real_len == 8, "snippet should fill 8 positions");

  const auto ident = build_pattern(seq, unit, PatternSpec::syntax(SyntaxClass::Identifier));
  const auto op = build_pattern(seq, unit, PatternSpec::syntax(SyntaxClass::Operator));
  for (Eigen::Index r = 0; r < 8; ++r) {
    f.expect(ident.row_included[static_cast<std::size_t>(r)], "identifier row excluded");
    for (Eigen::Index c = 0; c < 8; ++c) {
      const bool id_col = c == 1 || c == 3 || c == 5;
      const bool op_col = c == 2 || c == 4;
      f.expect(ident.values(r, c) == (id_col ? 1.0 / 3.0 : 0.0), "identifier cell mismatch");
      f.expect(op.values(r, c) == (op_col ? 0.5 : 0.0), "operator cell mismatch");
    }
  }
  for (const auto& spec : pattern_group("syntax")) {
    const auto c = std::get<SyntaxClass>(spec.target());
    f.expect(build_pattern(seq, unit, spec).values == brute_force_syntax(seq, unit, c),
             spec.name() + " differs from brute force");
  }
  return f.finish(1, "pattern oracle",
                  "Identifier rows 1/3 at {1,3,5}, Operator rows 1/2 at {2,4}, brute force bit-exact");
}

CheckResult check_loss_identities() {
  Failures f;
  const CodeUnit unit = parse("assign", "sum = num1 + num2 ;");
  const Vocab vocab = build_vocab({unit}, 300);
  const auto p = build_pattern(encode(unit, vocab, 10), unit, PatternSpec::syntax(SyntaxClass::Identifier));
  const double self = ag_loss(p.values, p);
  f.expect(std::abs(self) <= 1e-12, "ag_loss(P, P) = " + fmt("%.3g", self));

  PatternMatrix counter;
  counter.values = Eigen::MatrixXd{{1.0, 0.0}, {1.0, 0.0}};
  counter.row_included = {true, true};
  counter.real_len = 2;
  const double two = ag_loss(Eigen::MatrixXd{{0.0, 1.0}, {0.0, 1.0}}, counter);
  f.expect(std::abs(two - 2.0) <= 1e-12, "counter-case gives " + fmt("%.17g", two));

  const auto spec = PatternSpec::syntax(SyntaxClass::Operator);
  auto model = GuidedModel::create(tiny_config(), Task::Cloze, assign_heads(2, 2, 0.5, {spec}));
  model.schedule.alpha0 = 3.0;
  const auto batch = tiny_batch(Task::Cloze, spec, 3);
  const auto end = total_loss(model, batch, 1.0);
  f.expect(end.total == end.task, "total at t=1 differs from L_task");
  f.expect(end.sag > 0.0, "guidance term vanished");

  std::vector<TrainItem> data;
  for (std::size_t i = 0; i < 7; ++i) {
    TrainItem it;
    it.seq = encode(tiny_units()[i % 4], tiny_vocab(), 12);
    it.patterns.push_back(build_pattern(it.seq, tiny_units()[i % 4], spec));
    data.push_back(it);
  }
  TrainOptions opt;
  opt.lr = 1e-3;
  opt.epochs = 3;
  opt.batch_size = 2;
  const TrainLog log = train(model, data, opt);
  const std::size_t total_steps = opt.epochs * ((data.size() + opt.batch_size - 1) / opt.batch_size);
  f.expect(log.entries.size() == total_steps, "unexpected number of logged steps");
  for (const auto& e : log.entries) {
    const double t = static_cast<double>(e.step) / static_cast<double>(total_steps);
    f.expect(std::abs(e.alpha - 3.0 * (1.0 - t)) <= 1e-12, "alpha off at step " + std::to_string(e.step));
  }
  return f.finish(2, "loss identities",
                  "ag_loss(P,P)=0, counter-case 2, total(t=1)=L_task, alpha linear over " +
                      std::to_string(log.entries.size()) + " steps");
}

CheckResult check_gradients() {
  Failures f;
  const auto spec = PatternSpec::syntax(SyntaxClass::Identifier);
  std::string detail;
  for (const Task task : {Task::Cloze, Task::Clone}) {
    auto model = GuidedModel::create(tiny_config(), task, assign_heads(2, 2, 0.5, {spec}));
    model.schedule.alpha0 = 1.0;
    const auto batch = tiny_batch(task, spec, 8);
    const auto res = gradient_check(model, batch, 1e-4, 200, 7, 0.0);
    const std::string name(to_string(task));
    f.expect(res.checked + res.skipped_kinks >= 200, name + ": fewer than 200 samples");
    f.expect(res.checked >= 150, name + ": too many samples skipped at ReLU kinks");
    f.expect(res.max_relative_error < 1e-3, name + ": max rel error " + fmt("%.3g", res.max_relative_error));
    detail += (detail.empty() ? "" : ", ") + name + " max rel err " + fmt("%.2e", res.max_relative_error) +
              " over " + std::to_string(res.checked);
  }
  return f.finish(3, "gradient check", detail);
}

CheckResult check_attention_rows() {
  Failures f;
  double worst = 0.0;
  std::size_t pad_seen = 0;
  const std::vector<CodeUnit> units = {
      tiny_units()[0], tiny_units()[1], tiny_units()[2], tiny_units()[3],
      parse("t4", "x = 1 ;"), parse("t5", "while ( i < 3 ) i ++ ;")};
  const Vocab vocab = build_vocab(units, 64);
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    ModelConfig c = tiny_config(seed);
    c.vocab_size = vocab.size();
    c.max_len = 16;
    const auto model = GuidedModel::create(c, Task::Cloze);
    Rng rng(seed);
    TrainItem it;
    it.seq = encode(units[seed % units.size()], vocab, 16);
    const Example ex = make_example(it, Task::Cloze, 0.15, rng, vocab.size());
    const auto tr = forward(model, ex);
    const auto m = static_cast<Eigen::Index>(ex.real_len);
    for (std::size_t l = 0; l < c.num_layers; ++l)
      for (std::size_t h = 0; h < c.heads; ++h) {
        const Eigen::MatrixXd a = tr.attention(l, h);
        for (Eigen::Index r = 0; r < m; ++r) {
          worst = std::max(worst, std::abs(a.row(r).head(m).sum() - 1.0));
          f.expect((a.row(r).head(m).array() >= 0.0).all(), "negative attention weight");
        }
        if (a.cols() > m) {
          pad_seen += static_cast<std::size_t>(a.cols() - m);
          f.expect(a.rightCols(a.cols() - m).isZero(0.0), "pad column carries weight");
        }
      }
  }
  f.expect(worst <= 1e-6, "row sum off by " + fmt("%.3g", worst));
  f.expect(pad_seen > 0, "no padded inputs exercised");
  return f.finish(4, "attention normalization",
                  "100 seeds, max |row sum - 1| = " + fmt("%.2e", worst) + ", pad columns exactly 0");
}

CheckResult check_mask_statistics() {
  Failures f;
  // One long sequence of distinct ids; every interior position is maskable.
  const std::size_t m = 400, vocab_size = Vocab::kNumSpecials + m;
  AlignedSequence seq;
  seq.ids.push_back(Vocab::kCls);
  seq.alignment.push_back(std::nullopt);
  for (std::size_t i = 0; i < m; ++i) {
    seq.ids.push_back(static_cast<TokenId>(Vocab::kNumSpecials + i));
    seq.alignment.push_back(i);
  }
  seq.ids.push_back(Vocab::kEos);
  seq.alignment.push_back(std::nullopt);
  seq.real_len = seq.ids.size();

  Rng rng(2024);
  std::size_t maskable = 0, selected = 0, masked = 0, kept = 0, random = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = apply_mlm_mask(seq, 0.15, rng, vocab_size);
    maskable += m;
    selected += r.positions.size();
    for (std::size_t p : r.positions) {
      if (r.ids[p] == Vocab::kMask)
        ++masked;
      else if (r.ids[p] == seq.ids[p])
        ++kept;
      else
        ++random;
      f.expect(seq.alignment[p].has_value(), "special position selected");
    }
  }
  const double rate = static_cast<double>(selected) / static_cast<double>(maskable);
  const double s = static_cast<double>(selected);
  const double fm = masked / s, fk = kept / s, fr = random / s;
  f.expect(rate >= 0.14 && rate <= 0.16, "selected fraction " + fmt("%.4f", rate));
  f.expect(std::abs(fm - 0.8) <= 0.02, "[MASK] share " + fmt("%.4f", fm));
  f.expect(std::abs(fk - 0.1) <= 0.02, "unchanged share " + fmt("%.4f", fk));
  f.expect(std::abs(fr - 0.1) <= 0.02, "random share " + fmt("%.4f", fr));
  return f.finish(5, "masking statistics",
                  std::to_string(maskable) + " positions, rate " + fmt("%.4f", rate) + ", mask/keep/random " +
                      fmt("%.3f", fm) + "/" + fmt("%.3f", fk) + "/" + fmt("%.3f", fr));
}

CheckResult check_statistics_oracles() {
  Failures f;
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(1 + uniform_index(rng, 6)), b(1 + uniform_index(rng, 6));
    for (auto& x : a) x = static_cast<double>(uniform_index(rng, 8));
    for (auto& x : b) x = static_cast<double>(uniform_index(rng, 8));
    f.expect(mann_whitney_u(a, b) == pairwise_u(a, b), "U differs on trial " + std::to_string(trial));
    f.expect(std::abs(mann_whitney_exact_p(a, b) - brute_exact_p(a, b)) <= 1e-12,
             "exact p differs on trial " + std::to_string(trial));
  }
  const auto sep = mann_whitney({1, 2, 3}, {4, 5, 6});
  f.expect(sep.statistic == 0.0, "U for separated groups");
  f.expect(std::abs(sep.p_value - 0.1) <= 1e-12, "separated groups p = " + fmt("%.6g", sep.p_value));
  f.expect(std::abs(brute_exact_p({1, 2, 3}, {4, 5, 6}) - 0.1) <= 1e-12, "oracle p for separated groups");

  const auto t = paired_t({1, 2, 3});
  const double oracle = simpson_t_two_sided(t.statistic, 2.0);
  f.expect(std::abs(t.statistic - 2.0 * std::sqrt(3.0)) <= 1e-12, "t statistic");
  f.expect(std::abs(t.p_value - oracle) <= 1e-6, "t p vs numeric CDF " + fmt("%.6g", oracle));
  f.expect(std::abs(t.p_value - 0.0742) <= 0.0005, "paired t p = " + fmt("%.6g", t.p_value));

  std::vector<TestResult> rs(3);
  rs[0].p_value = 0.009;
  rs[1].p_value = 0.01;
  rs[2].p_value = 0.0099999;
  const auto flagged = bonferroni(rs, 0.12, 12);
  f.expect(flagged[0].significant && !flagged[1].significant && flagged[2].significant,
           "Bonferroni flags at threshold 0.01");
  return f.finish(6, "statistics oracles",
                  "100 exact-enumeration cases agree, p(123|456)=0.1, paired t p=" + fmt("%.5f", t.p_value) +
                      " (oracle " + fmt("%.5f", oracle) + "), strict < 0.01");
}

CheckResult check_partition_oracle() {
  Failures f;
  const auto hand = partition_high_low(
      {one_element_record({{0.9, 0.8}, {0.7, 0.95}}), one_element_record({{0.1, 0.2}, {0.3, 0.05}})}, 0);
  f.expect(hand.labels == std::vector<Stratum>{Stratum::High, Stratum::Low}, "handcrafted labels");

  Rng rng(5);
  for (int seed = 0; seed < 100; ++seed) {
    const std::size_t n = 1 + uniform_index(rng, 30), layers = 1 + uniform_index(rng, 4),
                      heads = 1 + uniform_index(rng, 4);
    std::vector<AttentionRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::vector<double>> w(layers, std::vector<double>(heads));
      for (auto& row : w)
        for (auto& x : row) x = static_cast<double>(uniform_index(rng, 4)) / 4.0;
      recs.push_back(one_element_record(w));
    }
    const auto p = partition_high_low(recs, 0);
    f.expect(p.high + p.low + p.excluded == n && p.labels.size() == n,
             "conservation fails for tensor " + std::to_string(seed));
  }
  std::vector<AttentionRecord> equal(6, one_element_record({{0.3, 0.3, 0.3}, {0.3, 0.3, 0.3}}));
  const auto eq = partition_high_low(equal, 0);
  f.expect(eq.low == equal.size(), "all-equal tensors should be all Low");
  return f.finish(7, "partition oracle", "handcrafted {High, Low}, conservation on 100 tensors, all-equal all Low");
}

CheckResult check_fix_accounting() {
  Failures f;
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 40);
    std::vector<int> base(n), guided(n), targets(n);
    for (std::size_t i = 0; i < n; ++i) {
      targets[i] = static_cast<int>(uniform_index(rng, 3));
      base[i] = static_cast<int>(uniform_index(rng, 3));
      guided[i] = static_cast<int>(uniform_index(rng, 3));
    }
    std::size_t cb = 0, cg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cb += base[i] == targets[i];
      cg += guided[i] == targets[i];
    }
    const auto fx = fix_accounting(base, guided, targets);
    f.expect(fx.correct == cg && fx.baseline_correct == cb, "counts on trial " + std::to_string(trial));
    f.expect(fx.correct + fx.broken == fx.baseline_correct + fx.fixed,
             "identity fails on trial " + std::to_string(trial));
  }
  return f.finish(8, "fix accounting", "correct_guided = correct_baseline + fixed - broken on 1000 pairs");
}

CheckResult check_guiding_effect(const AcceptanceOptions& options) {
  Failures f;
  std::vector<double> base_mass, guided_mass;
  std::string per_seed;
  for (std::uint64_t seed : options.guiding_seeds) {
    ExperimentSpec spec = toy_spec();
    spec.seed = seed;
    const RunResult r = run_experiment(spec);
    for (const auto& fold : r.folds)
      for (std::size_t i = 0; i < fold.baseline.target_mass.size(); ++i) {
        const double b = fold.baseline.target_mass[i], g = fold.guided.target_mass[i];
        if (std::isnan(b) || std::isnan(g)) continue;
        base_mass.push_back(b);
        guided_mass.push_back(g);
      }
    const double gap = 100.0 * (r.guided.accuracy - r.baseline.accuracy);
    f.expect(gap >= -0.5, "seed " + std::to_string(seed) + ": guided accuracy " +
                              fmt("%.2f", 100 * r.guided.accuracy) + "% vs baseline " +
                              fmt("%.2f", 100 * r.baseline.accuracy) + "%");
    per_seed += (per_seed.empty() ? "" : " ") + fmt("%.1f", 100 * r.baseline.accuracy) + "->" +
                fmt("%.1f", 100 * r.guided.accuracy);
  }
  if (base_mass.empty()) {
    f.expect(false, "no guided head had an active pattern");
    return f.finish(9, "directional guiding effect", "");
  }
  const auto mw = mann_whitney(guided_mass, base_mass);
  double bm = 0.0, gm = 0.0;
  for (double x : base_mass) bm += x;
  for (double x : guided_mass) gm += x;
  bm /= static_cast<double>(base_mass.size());
  gm /= static_cast<double>(guided_mass.size());
  f.expect(gm > bm, "guided mass " + fmt("%.3f", gm) + " not above baseline " + fmt("%.3f", bm));
  f.expect(mw.p_value < 0.01, "Mann-Whitney p = " + fmt("%.3g", mw.p_value));
  return f.finish(9, "directional guiding effect",
                  "target mass " + fmt("%.3f", bm) + " -> " + fmt("%.3f", gm) + " (p=" + fmt("%.2g", mw.p_value) +
                      ", n=" + std::to_string(base_mass.size()) + "), accuracy % " + per_seed);
}

CheckResult check_sweep_plumbing() {
  Failures f;
  ExperimentSpec spec = toy_spec();
  spec.corpus.num_snippets = 60;
  spec.model.num_layers = 1;
  spec.model.heads = 2;
  spec.model.model_dim = 8;
  spec.model.ffn_dim = 16;
  spec.model.max_len = 48;
  spec.hyper.epochs = 1;
  spec.vocab_size = 256;
  const auto rows = sweep(spec, SweepAxis::TrainFraction);
  std::ostringstream csv;
  write_sweep_csv(csv, SweepAxis::TrainFraction, rows);

  const std::vector<double> grid{0.25, 0.5, 0.75, 1.0};
  f.expect(rows.size() == grid.size(), "expected 4 rows");
  for (std::size_t i = 0; i < rows.size() && i < grid.size(); ++i) {
    f.expect(rows[i].value == grid[i], "grid value " + std::to_string(i));
    if (i) f.expect(rows[i].train_size >= rows[i - 1].train_size, "training size decreases");
  }
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  const auto header_fields = std::count(line.begin(), line.end(), ',') + 1;
  std::size_t data_rows = 0;
  std::string sizes;
  while (std::getline(in, line)) {
    ++data_rows;
    f.expect(std::count(line.begin(), line.end(), ',') + 1 == header_fields, "ragged CSV row");
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    f.expect(cells.size() >= 5 && !cells[1].empty() && !cells[2].empty() && !cells[3].empty() &&
                 !cells[4].empty(),
             "missing cell in CSV row " + std::to_string(data_rows));
    if (cells.size() > 2) sizes += (sizes.empty() ? "" : ",") + cells[2];
  }
  f.expect(data_rows == grid.size(), "CSV has " + std::to_string(data_rows) + " data rows");
  return f.finish(10, "sweep plumbing", "fraction grid {0.25,0.5,0.75,1}, train sizes " + sizes);
}

namespace {

// Wall-clock budgets in seconds.
const std::vector<std::pair<int, double>> kTimeLimits = {{1, 1.0}, {3, 60.0}, {9, 900.0}};

}  // namespace

std::vector<CheckResult> run_checks(const std::vector<int>& ids, const AcceptanceOptions& options,
                                    const std::function<void(const CheckResult&)>& on_result) {
  using Fn = std::function<CheckResult()>;
  const std::vector<std::pair<int, Fn>> all = {
      {1, check_pattern_oracle},      {2, check_loss_identities},
      {3, check_gradients},           {4, check_attention_rows},
      {5, check_mask_statistics},     {6, check_statistics_oracles},
      {7, check_partition_oracle},    {8, check_fix_accounting},
      {9, [&] { return check_guiding_effect(options); }},
      {10, check_sweep_plumbing},
  };
  static const char* names[] = {"",
                                "pattern oracle",
                                "loss identities",
                                "gradient check",
                                "attention normalization",
                                "masking statistics",
                                "statistics oracles",
                                "partition oracle",
                                "fix accounting",
                                "directional guiding effect",
                                "sweep plumbing"};
  std::vector<CheckResult> out;
  for (const auto& [id, fn] : all) {
    if (!ids.empty() && std::find(ids.begin(), ids.end(), id) == ids.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r.id = id;
      r.name = names[id];
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (const auto lim = std::find_if(kTimeLimits.begin(), kTimeLimits.end(),
                                      [id = id](const auto& l) { return l.first == id; });
        lim != kTimeLimits.end() && r.seconds >= lim->second) {
      r.pass = false;
      r.detail += "; exceeded the " + fmt("%.0f", lim->second) + " s budget";
    }
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_result(const CheckResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, " (%.2fs)", r.seconds);
  return std::string(r.pass ? "PASS" : "FAIL") + " [" + std::to_string(r.id) + "] " + r.name + ": " +
         r.detail + buf;
}

}  // namespace attnguide
