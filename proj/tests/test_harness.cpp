#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "attnguide/harness.hpp"
#include "schema_check.hpp"

using namespace attnguide;
namespace fs = std::filesystem;

namespace {

ExperimentSpec tiny_spec() {
  ExperimentSpec s = toy_spec();
  s.corpus.num_snippets = 40;
  s.model.num_layers = 2;
  s.model.heads = 2;
  s.model.model_dim = 8;
  s.model.ffn_dim = 16;
  s.model.max_len = 48;
  s.hyper.epochs = 1;
  s.hyper.batch_size = 8;
  s.vocab_size = 256;
  s.cloze_per_unit = 2;
  return s;
}

bool same_params(const Parameters& a, const Parameters& b) {
  std::vector<const Eigen::MatrixXd*> ta, tb;
  a.for_each([&](const Eigen::MatrixXd& m) { ta.push_back(&m); });
  b.for_each([&](const Eigen::MatrixXd& m) { tb.push_back(&m); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!(*ta[i] == *tb[i])) return false;
  return true;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("attnguide_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("corpus generation is deterministic per seed") {
  const auto a = gen_corpus(200, 7);
  const auto b = gen_corpus(200, 7);
  std::ostringstream sa, sb;
  write_corpus(sa, a);
  write_corpus(sb, b);
  CHECK(sa.str() == sb.str());
  std::ostringstream sc;
  write_corpus(sc, gen_corpus(200, 8));
  CHECK(sc.str() != sa.str());
  CHECK(a.front().id == "s00000");
}

TEST_CASE("every generated snippet parses and covers each class and statement kind") {
  const auto corpus = gen_corpus(2000, 7);
  REQUIRE(corpus.size() == 2000);
  std::vector<CodeUnit> units;
  for (const auto& e : corpus) REQUIRE_NOTHROW(units.push_back(parse(e.id, e.code)));

  std::map<std::string, std::size_t> snippets_with;
  for (const auto& u : units) {
    std::set<std::string> seen;
    for (const auto& t : u.tokens) seen.insert(std::string(to_string(t.syntax_class)));
    for (const auto& s : u.ast_spans) seen.insert(std::string(to_string(s.kind)));
    for (const auto& k : seen) ++snippets_with[k];
  }
  for (const char* k : {"Identifier", "Modifier", "Operator", "DataType", "Separator", "Keyword",
                        "StringLit", "BooleanLit", "MethodSignature", "IfElse", "While", "Return"}) {
    CAPTURE(k);
    CHECK(snippets_with[k] >= 20);
  }
}

TEST_CASE("corpus profiles") {
  for (const auto& e : gen_corpus(50, 3, "methods")) {
    const auto u = parse(e.id, e.code);
    CHECK(std::any_of(u.ast_spans.begin(), u.ast_spans.end(),
                      [](const AstSpan& s) { return s.kind == AstKind::MethodSignature; }));
  }
  for (const auto& e : gen_corpus(50, 3, "statements")) {
    const auto u = parse(e.id, e.code);
    CHECK(std::none_of(u.ast_spans.begin(), u.ast_spans.end(),
                       [](const AstSpan& s) { return s.kind == AstKind::MethodSignature; }));
  }
  CHECK_THROWS_AS(gen_corpus(5, 1, "poems"), std::invalid_argument);
}

TEST_CASE("renaming is a consistent bijection on identifiers") {
  const auto units = parse_corpus(gen_corpus(100, 5));
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto& u = units[i];
    const auto r = rename_identifiers(u, 1000 + i, u.id + "'");
    REQUIRE(r.tokens.size() == u.tokens.size());
    CHECK(r.id == u.id + "'");
    std::map<std::string, std::string> fwd, back;
    for (std::size_t t = 0; t < u.tokens.size(); ++t) {
      const auto& a = u.tokens[t];
      const auto& b = r.tokens[t];
      REQUIRE(a.syntax_class == b.syntax_class);
      if (a.syntax_class != SyntaxClass::Identifier) {
        CHECK(a.lexeme == b.lexeme);
        continue;
      }
      if (a.lexeme == "System" || a.lexeme == "println" || a.lexeme == "length" || a.lexeme == "out")
        CHECK(b.lexeme == a.lexeme);
      auto [fi, fnew] = fwd.emplace(a.lexeme, b.lexeme);
      CHECK(fi->second == b.lexeme);
      auto [bi, bnew] = back.emplace(b.lexeme, a.lexeme);
      CHECK(bi->second == a.lexeme);
    }
    CHECK(r.ast_spans == u.ast_spans);
  }
}

TEST_CASE("k-fold splits are disjoint and cover every unit") {
  for (std::size_t folds : {2u, 3u, 5u}) {
    const std::size_t n = 103;
    const auto splits = kfold_splits(n, folds, 9);
    REQUIRE(splits.size() == folds);
    std::vector<int> test_count(n, 0);
    for (const auto& s : splits) {
      CHECK(s.train.size() + s.test.size() == n);
      std::set<std::size_t> tr(s.train.begin(), s.train.end());
      for (auto t : s.test) {
        CHECK(tr.count(t) == 0);
        ++test_count[t];
      }
      CHECK(s.test.size() >= n / folds);
      CHECK(s.test.size() <= n / folds + 1);
    }
    CHECK(std::all_of(test_count.begin(), test_count.end(), [](int c) { return c == 1; }));
  }
  const auto one = kfold_splits(100, 1, 9);
  REQUIRE(one.size() == 1);
  CHECK(one[0].test.size() == 20);
  CHECK(one[0].train.size() == 80);
  CHECK(kfold_splits(50, 5, 1)[2].test == kfold_splits(50, 5, 1)[2].test);
  CHECK_THROWS_AS(kfold_splits(10, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(kfold_splits(3, 5, 1), std::invalid_argument);
}

TEST_CASE("training subsets are nested and sized by ceiling") {
  std::vector<std::size_t> train(37);
  for (std::size_t i = 0; i < train.size(); ++i) train[i] = 100 + i;
  std::vector<std::size_t> prev;
  for (double f : {0.25, 0.5, 0.75, 1.0}) {
    const auto sub = train_subset(train, f, 4);
    CHECK(sub.size() == static_cast<std::size_t>(std::ceil(f * 37.0 - 1e-9)));
    CHECK(std::equal(prev.begin(), prev.end(), sub.begin()));
    prev = sub;
  }
  std::vector<std::size_t> all = prev;
  std::sort(all.begin(), all.end());
  CHECK(all == train);
  CHECK(train_subset(train, 0.01, 4).size() == 1);
  CHECK_THROWS_AS(train_subset(train, 0.0, 4), std::invalid_argument);
  CHECK_THROWS_AS(train_subset(train, 1.5, 4), std::invalid_argument);
}

TEST_CASE("experiment spec JSON round trip and validation") {
  ExperimentSpec s = toy_spec();
  s.task = Task::Clone;
  s.hyper.lambda = 0.75;
  s.hyper.patterns = {"syntax", "local"};
  s.train_fraction = 0.5;
  s.corpus.profile = "methods";
  const auto j = to_json(s);
  const auto back = spec_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.task == Task::Clone);
  CHECK(back.hyper.patterns == s.hyper.patterns);

  const auto partial = spec_from_json(nlohmann::json{{"seed", 4}});
  CHECK(partial.seed == 4);
  CHECK(partial.folds == ExperimentSpec{}.folds);

  auto bad = [](nlohmann::json j) { CHECK_THROWS_AS(spec_from_json(j), std::invalid_argument); };
  bad({{"bogus", 1}});
  bad({{"hyper", {{"lambda", 0.3}}}});
  bad({{"hyper", {{"patterns", {"nonsense"}}}}});
  bad({{"hyper", {{"lr", -1.0}}}});
  bad({{"train_fraction", 0.0}});
  bad({{"folds", 0}});
  bad({{"task", "translate"}});
  bad({{"model", {{"model_dim", 30}, {"heads", 4}}}});
  bad({{"seed", "seven"}});
  bad(nlohmann::json::array());
}

TEST_CASE("sweep grids") {
  CHECK(default_grid(SweepAxis::TrainFraction) == std::vector<double>{0.25, 0.5, 0.75, 1.0});
  CHECK(default_grid(SweepAxis::Lambda) == std::vector<double>{0.25, 0.5, 0.75, 1.0});
  CHECK(default_grid(SweepAxis::Alpha0).size() == 3);
  for (auto a : {SweepAxis::Lambda, SweepAxis::Alpha0, SweepAxis::TrainFraction})
    CHECK(sweep_axis_from_string(to_string(a)) == a);
  CHECK_THROWS_AS(sweep_axis_from_string("depth"), std::invalid_argument);
}

TEST_CASE("cloze instances mask one studied single-subtoken position") {
  const auto units = parse_corpus(gen_corpus(60, 2));
  const Vocab vocab = build_vocab(units, 512);
  Rng rng(3);
  std::size_t total = 0;
  for (const auto& u : units) {
    const auto inst = cloze_instances(u, vocab, 64, 3, rng);
    CHECK(inst.size() <= 3);
    for (const auto& i : inst) {
      ++total;
      REQUIRE(i.example.target_positions.size() == 1);
      const auto p = i.example.target_positions[0];
      CHECK(i.example.ids[p] == Vocab::kMask);
      CHECK(i.seq.ids[p] == i.target);
      CHECK(i.example.targets == std::vector<TokenId>{i.target});
      REQUIRE(i.seq.alignment[p].has_value());
      const auto cls = u.tokens[*i.seq.alignment[p]].syntax_class;
      CHECK(cls != SyntaxClass::NumLiteral);
      CHECK(std::count(i.seq.alignment.begin(), i.seq.alignment.end(), i.seq.alignment[p]) == 1);
    }
  }
  CHECK(total > 100);
}

TEST_CASE("clone pairs: one positive and one negative per anchor") {
  const auto units = parse_corpus(gen_corpus(30, 2));
  const Vocab vocab = build_vocab(units, 512);
  const auto pairs = clone_pairs(units, vocab, 128, 5);
  REQUIRE(pairs.size() == 2 * units.size());
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto& pos = pairs[2 * i];
    const auto& neg = pairs[2 * i + 1];
    CHECK(pos.target == 1);
    CHECK(neg.target == 0);
    CHECK(pos.example.label == 1);
    CHECK(neg.example.label == 0);
    CHECK(pos.seq.sep_position().has_value());
    // A positive partner has the anchor's token classes in order.
    const std::size_t k = units[i].tokens.size();
    REQUIRE(pos.unit.tokens.size() == 2 * k);
    for (std::size_t t = 0; t < k; ++t)
      CHECK(pos.unit.tokens[k + t].syntax_class == units[i].tokens[t].syntax_class);
    CHECK(neg.unit.id.substr(0, units[i].id.size()) == units[i].id);
  }
  CHECK_THROWS_AS(clone_pairs({units[0]}, vocab, 64, 1), std::invalid_argument);
}

TEST_CASE("both arms share initial parameters, splits and masks") {
  ExperimentSpec s = tiny_spec();
  s.hyper.alpha0 = 0.0;
  const auto r = run_experiment(s);
  // With the guiding weight at zero the guided arm must reproduce the
  // baseline exactly, which requires identical init, batch order and masks.
  CHECK(same_params(r.baseline_model.params, r.guided_model.params));
  CHECK(r.folds[0].baseline.predictions == r.folds[0].guided.predictions);
  CHECK(r.fixes.fixed == 0);
  CHECK(r.fixes.broken == 0);

  const auto units = load_units(s.corpus);
  ModelConfig cfg = s.model;
  cfg.vocab_size = r.vocab.size();
  cfg.seed = s.seed;
  const auto map = assign_heads(2, 2, s.hyper.lambda, pattern_groups(s.hyper.patterns));
  CHECK(same_params(GuidedModel::create(cfg, Task::Cloze).params,
                    GuidedModel::create(cfg, Task::Cloze, map).params));
}

TEST_CASE("cloze run is deterministic and consistent") {
  const ExperimentSpec s = tiny_spec();
  const auto a = run_experiment(s);
  const auto b = run_experiment(s);
  CHECK(a.baseline.accuracy == b.baseline.accuracy);
  CHECK(a.guided.accuracy == b.guided.accuracy);
  CHECK(same_params(a.guided_model.params, b.guided_model.params));
  REQUIRE(a.folds.size() == 1);
  const auto& f = a.folds[0];
  CHECK(f.train_size == 32);
  CHECK(f.baseline.predictions.size() == f.test_size);
  CHECK(f.guided.records.size() == f.test_size);
  CHECK(a.guided_report.instances == f.test_size);
  REQUIRE(a.guided_report.fixes.has_value());
  CHECK(a.fixes.correct == a.fixes.baseline_correct + a.fixes.fixed - a.fixes.broken);
  CHECK_FALSE(a.guided.f1.has_value());
  CHECK(a.guided_model.guiding.guided_count() > 0);
  CHECK(a.baseline_model.guiding.guided_count() == 0);
}

TEST_CASE("clone toy run reports precision, recall and F1") {
  ExperimentSpec s = tiny_spec();
  s.task = Task::Clone;
  s.model.max_len = 96;
  s.corpus.num_snippets = 30;
  const auto r = run_experiment(s);
  CHECK(r.folds[0].test_size == 12);
  CHECK(r.baseline.accuracy >= 0.0);
  CHECK_THROWS_AS(run_cloze(s), std::invalid_argument);
}

TEST_CASE("k-fold run pools every unit once") {
  ExperimentSpec s = tiny_spec();
  s.folds = 4;
  const auto r = run_experiment(s);
  REQUIRE(r.folds.size() == 4);
  std::size_t test = 0, train = 0;
  for (const auto& f : r.folds) {
    test += f.test_size;
    train += f.train_size;
  }
  CHECK(train == 3 * 40);
  CHECK(r.guided_report.instances == test);
}

TEST_CASE("single-point sweep equals the run output") {
  ExperimentSpec s = tiny_spec();
  s.train_fraction = 0.5;
  const auto run = run_experiment(s);
  const auto rows = sweep(s, SweepAxis::TrainFraction, {0.5});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].value == 0.5);
  CHECK(rows[0].train_size == run.folds[0].train_size);
  CHECK(rows[0].baseline.accuracy == run.baseline.accuracy);
  CHECK(rows[0].guided.accuracy == run.guided.accuracy);

  std::ostringstream csv;
  write_sweep_csv(csv, SweepAxis::TrainFraction, rows);
  CHECK(csv.str() ==
        "axis,value,train_size,baseline_accuracy,guided_accuracy,baseline_f1,guided_f1\n"
        "fraction,0.5,16," +
            [&] {
              char buf[128];
              std::snprintf(buf, sizeof buf, "%.17g,%.17g,,\n", run.baseline.accuracy,
                            run.guided.accuracy);
              return std::string(buf);
            }());
}

TEST_CASE("fraction sweep sizes are non-decreasing") {
  ExperimentSpec s = tiny_spec();
  s.hyper.epochs = 1;
  const auto rows = sweep(s, SweepAxis::TrainFraction);
  REQUIRE(rows.size() == 4);
  const std::vector<std::size_t> expected = {8, 16, 24, 32};
  for (std::size_t i = 0; i < 4; ++i) CHECK(rows[i].train_size == expected[i]);
}

TEST_CASE("written runs validate against the schema and reload") {
  const ExperimentSpec s = tiny_spec();
  const auto r = run_experiment(s);
  const auto dir = scratch_dir("run");
  write_run(r, dir.string());

  const auto schema = schema_check::load_schema("bias_report.schema.json");
  for (const char* arm : {"baseline", "guided"}) {
    CAPTURE(arm);
    for (const char* f : {"model.ckpt", "vocab.txt", "spec.json", "train_log.csv", "report.json"})
      CHECK(fs::exists(dir / arm / f));
    const auto report = nlohmann::json::parse(slurp(dir / arm / "report.json"));
    CHECK(schema_check::validate(report, schema).empty());
  }
  for (const char* f : {"summary.json", "fig3_syntax_bias.csv", "fig4_ast_bias.csv",
                        "fig5_syntax_stratified.csv", "fig6_ast_stratified.csv"})
    CHECK(fs::exists(dir / f));
  CHECK(nlohmann::json::parse(slurp(dir / "guided" / "report.json"))["fixes"].is_object());
  CHECK(nlohmann::json::parse(slurp(dir / "baseline" / "report.json"))["fixes"].is_null());

  const auto loaded = load_model_dir(dir.string());
  CHECK(same_params(loaded.model.params, r.guided_model.params));
  CHECK(loaded.model.guiding.guided_count() == r.guided_model.guiding.guided_count());
  CHECK(loaded.model.schedule.alpha0 == s.hyper.alpha0);
  CHECK(to_json(loaded.spec) == to_json(s));
  const auto base = load_model_dir((dir / "baseline").string());
  CHECK(base.model.guiding.guided_count() == 0);

  const auto units = parse_corpus(gen_corpus(20, 99));
  const auto rep = analyze(loaded, units);
  CHECK(rep.instances > 0);
  CHECK(schema_check::validate(to_json(rep), schema).empty());
  const auto rep2 = analyze(loaded, units);
  CHECK(to_json(rep).dump() == to_json(rep2).dump());

  CHECK_THROWS(load_model_dir((dir / "nowhere").string()));
  fs::remove_all(dir);
}
