#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "attnguide/model.hpp"

using namespace attnguide;

namespace {

const std::vector<CodeUnit>& units() {
  static const std::vector<CodeUnit> u = {
      parse("u0", "sum = num1 + num2 ;"),
      parse("u1", "return a + b ;"),
      parse("u2", "if ( x > 1 ) y = 2 ;"),
      parse("u3", "String s = \"q\" ;"),
  };
  return u;
}

const Vocab& vocab() {
  static const Vocab v = build_vocab(units(), 64);
  return v;
}

ModelConfig tiny_config(std::size_t n = 12) {
  ModelConfig c;
  c.num_layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.vocab_size = vocab().size();
  c.max_len = n;
  c.seed = 11;
  return c;
}

TrainItem item(std::size_t i, const std::vector<PatternSpec>& specs, std::size_t n = 12,
               int label = -1) {
  const auto& unit = units()[i % units().size()];
  TrainItem it;
  it.seq = encode(unit, vocab(), n);
  for (const auto& s : specs) it.patterns.push_back(build_pattern(it.seq, unit, s));
  it.label = label;
  return it;
}

std::vector<Example> batch_of(Task task, const std::vector<PatternSpec>& specs, std::uint64_t seed,
                              std::size_t n = 12) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < units().size(); ++i)
    out.push_back(make_example(item(i, specs, n, static_cast<int>(i % 2)), task, 0.3, rng,
                               vocab().size()));
  return out;
}

GuidedModel one_guided_head(Task task, const PatternSpec& spec) {
  auto map = assign_heads(2, 2, 0.5, {spec});
  auto model = GuidedModel::create(tiny_config(), task, map);
  model.schedule.alpha0 = 1.0;
  return model;
}

bool same_params(const Parameters& a, const Parameters& b) {
  bool same = true;
  std::vector<const Eigen::MatrixXd*> ta, tb;
  a.for_each([&](const Eigen::MatrixXd& m) { ta.push_back(&m); });
  b.for_each([&](const Eigen::MatrixXd& m) { tb.push_back(&m); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) same = same && *ta[i] == *tb[i];
  return same;
}

}  // namespace

TEST_CASE("positional encoding values") {
  const auto pe = ops::positional_encoding(1, 2);
  CHECK(pe[0] == doctest::Approx(0.84147).epsilon(1e-5));
  CHECK(pe[1] == doctest::Approx(0.54030).epsilon(1e-5));
  const auto zero = ops::positional_encoding(0, 6);
  for (int k = 0; k < 6; ++k) CHECK(zero[k] == (k % 2 == 0 ? 0.0 : 1.0));
  // Direct formula with an independent exponent computation.
  const auto pe9 = ops::positional_encoding(9, 8);
  for (int k = 0; k < 8; ++k) {
    const double angle = 9.0 * std::exp(-std::log(10000.0) * (2.0 * (k / 2)) / 8.0);
    CHECK(pe9[k] == doctest::Approx(k % 2 ? std::cos(angle) : std::sin(angle)).epsilon(1e-12));
  }
}

TEST_CASE("masked softmax") {
  SUBCASE("equal scores give a uniform row") {
    const auto a = ops::masked_softmax_rows(Eigen::MatrixXd::Constant(2, 4, 3.0), 4);
    CHECK(a.isApproxToConstant(0.25));
  }
  SUBCASE("padded columns get exactly zero") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Constant(3, 5, 0.7);
    s(0, 4) = 1e6;
    const auto a = ops::masked_softmax_rows(s, 3);
    CHECK(a.rightCols(2).isZero(0.0));
    CHECK(a.leftCols(3).isApproxToConstant(1.0 / 3.0));
  }
  SUBCASE("rows sum to one for random scores") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      Eigen::MatrixXd s(6, 6);
      for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = 20.0 * standard_normal(rng);
      const Eigen::Index valid = 1 + static_cast<Eigen::Index>(seed % 6);
      const auto a = ops::masked_softmax_rows(s, valid);
      for (Eigen::Index r = 0; r < 6; ++r) CHECK(std::abs(a.row(r).sum() - 1.0) < 1e-12);
      CHECK((a.array() >= 0.0).all());
    }
  }
}

TEST_CASE("forward attention rows are distributions and pad is untouched") {
  auto model = GuidedModel::create(tiny_config(), Task::Cloze);
  const auto ex = batch_of(Task::Cloze, {}, 1)[1];
  REQUIRE(ex.real_len < ex.ids.size());
  const auto tr = forward(model, ex);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const auto a = tr.attention(l, h);
      CHECK(a.rows() == 12);
      for (std::size_t r = 0; r < 12; ++r) {
        const double sum = a.row(static_cast<Eigen::Index>(r)).sum();
        CHECK(sum == doctest::Approx(r < ex.real_len ? 1.0 : 0.0));
      }
      const auto pad = static_cast<Eigen::Index>(12 - ex.real_len);
      CHECK(a.rightCols(pad).isZero(0.0));
    }
  CHECK(tr.hidden().size() == 3);
}

TEST_CASE("uniform logits give ln V") {
  ModelConfig c = tiny_config();
  c.vocab_size = 16;
  auto model = GuidedModel::create(c, Task::Cloze);
  model.params.mlm_weight.setZero();
  model.params.mlm_bias.setZero();
  Example ex;
  ex.ids = {Vocab::kCls, 7, 8, 9, Vocab::kEos};
  ex.real_len = 5;
  ex.target_positions = {1, 3};
  ex.targets = {7, 9};
  CHECK(mlm_loss(forward(model, ex), ex.targets) == doctest::Approx(std::log(16.0)).epsilon(1e-12));
  CHECK(std::log(16.0) == doctest::Approx(2.7726).epsilon(1e-4));
}

TEST_CASE("clone loss is BCE of the logit") {
  auto model = GuidedModel::create(tiny_config(), Task::Clone);
  const auto ex = batch_of(Task::Clone, {}, 1)[0];
  const auto tr = forward(model, ex);
  const double s = tr.clone_logit();
  const double p = 1.0 / (1.0 + std::exp(-s));
  CHECK(clone_loss(tr, 1) == doctest::Approx(-std::log(p)).epsilon(1e-12));
  CHECK(clone_loss(tr, 0) == doctest::Approx(-std::log(1.0 - p)).epsilon(1e-12));
  CHECK_THROWS(clone_loss(tr, 2));
}

TEST_CASE("attention guidance loss") {
  PatternMatrix p;
  p.values = Eigen::MatrixXd{{1.0, 0.0}, {1.0, 0.0}};
  p.row_included = {true, true};
  p.real_len = 2;
  SUBCASE("opposite one-hot rows") {
    const Eigen::MatrixXd h{{0.0, 1.0}, {0.0, 1.0}};
    CHECK(ag_loss(h, p) == doctest::Approx(2.0).epsilon(1e-15));
  }
  SUBCASE("exact match is zero") { CHECK(ag_loss(p.values, p) == 0.0); }
  SUBCASE("excluded rows do not count") {
    p.row_included = {true, false};
    const Eigen::MatrixXd h{{1.0, 0.0}, {0.0, 1.0}};
    CHECK(ag_loss(h, p) == 0.0);
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(ag_loss(Eigen::MatrixXd::Zero(3, 3), p), DimMismatch); }
  SUBCASE("oracle: explicit double loop") {
    Rng rng(5);
    Eigen::MatrixXd h(2, 2);
    for (int i = 0; i < 4; ++i) h.data()[i] = uniform01(rng);
    double sq = 0;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) sq += (h(r, c) - p.values(r, c)) * (h(r, c) - p.values(r, c));
    CHECK(ag_loss(h, p) == doctest::Approx(std::sqrt(sq)).epsilon(1e-14));
  }
}

TEST_CASE("sag loss sums ag loss over guided heads only") {
  const auto spec = PatternSpec::syntax(SyntaxClass::Identifier);
  auto model = one_guided_head(Task::Cloze, spec);
  const auto ex = batch_of(Task::Cloze, {spec}, 2)[0];
  const auto tr = forward(model, ex);
  const double expected =
      ag_loss(tr.attention(0, 0), ex.patterns[0]) + ag_loss(tr.attention(1, 0), ex.patterns[0]);
  CHECK(sag_loss(tr, model.guiding, ex) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(ag_loss(tr.attention_real(0, 0), ex.patterns[0]) == ag_loss(tr.attention(0, 0), ex.patterns[0]));

  auto unguided = GuidedModel::create(tiny_config(), Task::Cloze);
  CHECK(sag_loss(forward(unguided, ex), unguided.guiding, ex) == 0.0);
}

TEST_CASE("schedule and total loss") {
  const auto spec = PatternSpec::syntax(SyntaxClass::Operator);
  auto model = one_guided_head(Task::Cloze, spec);
  model.schedule.alpha0 = 10.0;
  const auto batch = batch_of(Task::Cloze, {spec}, 3);
  CHECK(model.schedule.at(0.0) == 10.0);
  CHECK(model.schedule.at(0.25) == 7.5);
  CHECK(model.schedule.at(1.0) == 0.0);

  const auto end = total_loss(model, batch, 1.0);
  CHECK(end.alpha == 0.0);
  CHECK(end.total == end.task);
  CHECK(end.sag > 0.0);

  const auto start = total_loss(model, batch, 0.0);
  CHECK(start.total == doctest::Approx(start.task + 10.0 * start.sag).epsilon(1e-12));
}

TEST_CASE("zero alpha reproduces the unguided loss and gradient exactly") {
  const auto spec = PatternSpec::syntax(SyntaxClass::Identifier);
  auto guided = one_guided_head(Task::Cloze, spec);
  guided.schedule.alpha0 = 0.0;
  auto baseline = GuidedModel::create(tiny_config(), Task::Cloze);
  REQUIRE(same_params(guided.params, baseline.params));
  const auto batch = batch_of(Task::Cloze, {spec}, 4);
  Parameters g1, g2;
  const auto a = total_loss(guided, batch, 0.0, &g1);
  const auto b = total_loss(baseline, batch, 0.0, &g2);
  CHECK(a.total == b.total);
  CHECK(same_params(g1, g2));
}

TEST_CASE("analytic gradients match central differences") {
  for (const Task task : {Task::Cloze, Task::Clone}) {
    CAPTURE(to_string(task));
    const auto spec = PatternSpec::syntax(SyntaxClass::Identifier);
    auto model = one_guided_head(task, spec);
    const auto batch = batch_of(task, {spec}, 8);
    const auto res = gradient_check(model, batch, 1e-4, 200, 7, 0.0);
    CHECK(res.checked >= 150);
    CHECK(res.max_relative_error < 1e-3);
  }
}

TEST_CASE("gradient check covers every parameter family") {
  const auto spec = PatternSpec::ast(AstKind::Return);
  auto model = one_guided_head(Task::Cloze, spec);
  model.schedule.alpha0 = 5.0;
  const auto batch = batch_of(Task::Cloze, {spec}, 9);
  const auto res = gradient_check(model, batch, 1e-5, 400, 3, 0.2);
  CHECK(res.max_relative_error < 1e-3);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto model = GuidedModel::create(tiny_config(), Task::Cloze);
  const auto before = model.params;
  std::vector<TrainItem> data;
  for (std::size_t i = 0; i < 4; ++i) data.push_back(item(i, {}));
  TrainOptions opt;
  opt.lr = 0.0;
  opt.epochs = 2;
  opt.batch_size = 2;
  const auto log = train(model, data, opt);
  CHECK(log.entries.size() == 4);
  CHECK(same_params(before, model.params));
}

TEST_CASE("training reduces the loss") {
  const auto spec = PatternSpec::syntax(SyntaxClass::Identifier);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CAPTURE(seed);
    ModelConfig c = tiny_config();
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.seed = seed;
    auto model = GuidedModel::create(c, Task::Clone, assign_heads(2, 2, 0.5, {spec}));
    model.schedule.alpha0 = 1.0;
    std::vector<TrainItem> data;
    for (std::size_t i = 0; i < 4; ++i) data.push_back(item(i, {spec}, 12, static_cast<int>(i % 2)));
    const auto batch = batch_of(Task::Clone, {spec}, 1);
    const double before = total_loss(model, batch, 0.0).total;
    TrainOptions opt;
    opt.lr = 1e-2;
    opt.epochs = 50;
    opt.batch_size = 4;
    opt.seed = seed;
    train(model, data, opt);
    const double after = total_loss(model, batch, 0.0).total;
    CHECK(after < before);
  }
}

TEST_CASE("training is deterministic and the log has one row per step") {
  const auto spec = PatternSpec::syntax(SyntaxClass::Operator);
  std::vector<TrainItem> data;
  for (std::size_t i = 0; i < 6; ++i) data.push_back(item(i, {spec}));
  TrainOptions opt;
  opt.lr = 1e-3;
  opt.epochs = 2;
  opt.batch_size = 4;
  auto a = one_guided_head(Task::Cloze, spec);
  auto b = one_guided_head(Task::Cloze, spec);
  const auto la = train(a, data, opt);
  const auto lb = train(b, data, opt);
  CHECK(same_params(a.params, b.params));
  REQUIRE(la.entries.size() == 4);
  std::ostringstream sa, sb;
  la.write_csv(sa);
  lb.write_csv(sb);
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().rfind("step,L_task,L_SAG,alpha\n0,", 0) == 0);
  CHECK(la.entries[0].alpha == 1.0);
  CHECK(la.entries[2].alpha == 0.5);
}

TEST_CASE("checkpoint round trip is exact") {
  auto model = GuidedModel::create(tiny_config(), Task::Cloze);
  std::stringstream buf;
  save_checkpoint(buf, model);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "SGLM");
  // Header (4 + 4) + config (6 u32 + f64 + u64) + every parameter as f64.
  CHECK(bytes.size() == 8 + 6 * 4 + 8 + 8 + 8 * model.params.count());
  const auto back = load_checkpoint(buf);
  CHECK(back.config == model.config);
  CHECK(same_params(back.params, model.params));
  const auto ex = batch_of(Task::Cloze, {}, 1)[0];
  CHECK(forward(back, ex).mlm_logits() == forward(model, ex).mlm_logits());

  std::stringstream bad("XXXX");
  CHECK_THROWS(load_checkpoint(bad));
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS(load_checkpoint(truncated));
}

TEST_CASE("mask statistics") {
  const auto seq = encode(units()[0], vocab(), 12);
  Rng rng(99);
  std::size_t eligible = 0;
  for (std::size_t p = 0; p < seq.real_len; ++p) eligible += seq.alignment[p].has_value();
  std::size_t selected = 0, masked = 0, kept = 0, replaced = 0;
  constexpr int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    const auto r = apply_mlm_mask(seq, 0.15, rng, vocab().size());
    CHECK_FALSE(r.positions.empty());
    selected += r.positions.size();
    for (std::size_t i = 0; i < r.positions.size(); ++i) {
      const auto p = r.positions[i];
      CHECK(seq.alignment[p].has_value());
      CHECK(r.targets[i] == seq.ids[p]);
      if (r.ids[p] == Vocab::kMask) {
        ++masked;
      } else if (r.ids[p] == seq.ids[p]) {
        ++kept;
      } else {
        ++replaced;
        CHECK_FALSE(Vocab::is_special(r.ids[p]));
      }
    }
  }
  // With 6 eligible positions P(no selection) = 0.85^6; the floor adds one.
  const double p_none = std::pow(0.85, static_cast<double>(eligible));
  const double expected = trials * (0.15 * static_cast<double>(eligible) + p_none);
  CHECK(std::abs(static_cast<double>(selected) - expected) / expected < 0.03);
  const double s = static_cast<double>(selected);
  CHECK(static_cast<double>(masked) / s == doctest::Approx(0.8).epsilon(0.03));
  // A random replacement can coincide with the original id.
  CHECK(static_cast<double>(kept + replaced) / s == doctest::Approx(0.2).epsilon(0.1));
}

TEST_CASE("config validation and argmax") {
  ModelConfig c = tiny_config();
  c.heads = 3;
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.vocab_size = 0;
  CHECK_THROWS(c.validate());
  Eigen::RowVectorXd v(4);
  v << 1.0, 3.0, 3.0, 2.0;
  CHECK(argmax(v) == 1);
  CHECK(task_from_string("clone") == Task::Clone);
  CHECK_THROWS(task_from_string("qa"));
}
