#include "attnguide/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace attnguide {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- corpus generator ----

namespace {

enum class Ty { Int, Double, Bool, Str, Long };
constexpr std::array<Ty, 5> kTypes = {Ty::Int, Ty::Double, Ty::Bool, Ty::Str, Ty::Long};

const char* type_name(Ty t) {
  switch (t) {
    case Ty::Int: return "int";
    case Ty::Double: return "double";
    case Ty::Bool: return "boolean";
    case Ty::Str: return "String";
    case Ty::Long: return "long";
  }
  return "int";
}

const std::vector<std::string>& names_for(Ty t) {
  static const std::map<Ty, std::vector<std::string>> pools = {
      {Ty::Int, {"i", "j", "k", "n", "count", "total", "sum", "index", "size", "limit", "step", "max"}},
      {Ty::Double, {"x", "y", "rate", "price", "avg", "ratio", "weight"}},
      {Ty::Bool, {"flag", "done", "found", "valid", "ok", "ready"}},
      {Ty::Str, {"name", "text", "msg", "label", "key", "line"}},
      {Ty::Long, {"id", "big", "stamp", "hash"}},
  };
  return pools.at(t);
}

const std::vector<std::string> kMethodNames = {"compute", "update", "check", "process", "getValue",
                                               "helper",  "run",    "apply", "reset"};
const std::vector<std::string> kStrings = {"\"a\"", "\"hi\"", "\"done\"", "\"error\"",
                                           "\"ok\"", "\"x\"", "\"name\""};
const std::vector<std::string> kDoubles = {"0.5", "1.5", "2.0", "3.25", "0.1"};
constexpr std::size_t kMaxSnippetTokens = 48;
// Identifiers that name library types or members rather than program entities.
const std::set<std::string> kFixedNames = {"String", "System", "out", "println", "length"};

class SnippetGen {
 public:
  explicit SnippetGen(Rng& rng) : rng_(rng) {}

  std::string method() {
    static const std::vector<std::vector<std::string>> mods = {
        {"public"}, {"private"}, {"public", "static"}, {"private", "static"},
        {"protected"}, {"static"}, {"public", "final"}, {}};
    for (const auto& m : mods[pick(mods.size())]) emit(m);
    const bool is_void = chance(0.2);
    const Ty ret = kTypes[pick(kTypes.size())];
    emit(is_void ? "void" : type_name(ret));
    emit(kMethodNames[pick(kMethodNames.size())]);
    emit("(");
    const std::size_t params = pick(4);
    for (std::size_t p = 0; p < params; ++p) {
      if (p) emit(",");
      const Ty t = kTypes[pick(kTypes.size())];
      emit(type_name(t));
      emit(declare(t));
    }
    emit(")");
    emit("{");
    const std::size_t body = 1 + pick(3);
    for (std::size_t s = 0; s < body; ++s) statement(1);
    if (!is_void) {
      emit("return");
      expr(ret, 0);
      emit(";");
    } else if (chance(0.3)) {
      emit("return");
      emit(";");
    }
    emit("}");
    return finish();
  }

  std::string statements() {
    const std::size_t n = 2 + pick(3);
    for (std::size_t s = 0; s < n; ++s) statement(0);
    if (chance(0.3)) {
      const Ty t = kTypes[pick(kTypes.size())];
      emit("return");
      expr(t, 0);
      emit(";");
    }
    return finish();
  }

 private:
  std::size_t pick(std::size_t n) { return uniform_index(rng_, n); }
  bool chance(double p) { return uniform01(rng_) < p; }
  void emit(const std::string& t) { toks_.push_back(t); }

  std::string finish() {
    std::string out;
    for (const auto& t : toks_) {
      if (!out.empty()) out += ' ';
      out += t;
    }
    toks_.clear();
    vars_.clear();
    return out;
  }

  std::optional<std::string> var_of(Ty t) {
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (vars_[i].first == t) c.push_back(i);
    if (c.empty()) return std::nullopt;
    return vars_[c[pick(c.size())]].second;
  }

  std::string declare(Ty t) {
    std::vector<std::string> free;
    for (const auto& n : names_for(t))
      if (std::none_of(vars_.begin(), vars_.end(), [&](const auto& v) { return v.second == n; }))
        free.push_back(n);
    if (free.empty()) free.push_back(names_for(t)[0] + std::to_string(vars_.size()));
    const std::string name = free[pick(free.size())];
    vars_.emplace_back(t, name);
    return name;
  }

  void literal(Ty t) {
    switch (t) {
      case Ty::Int:
      case Ty::Long: emit(std::to_string(pick(21))); break;
      case Ty::Double: emit(kDoubles[pick(kDoubles.size())]); break;
      case Ty::Bool: emit(chance(0.5) ? "true" : "false"); break;
      case Ty::Str: emit(kStrings[pick(kStrings.size())]); break;
    }
  }

  void atom(Ty t) {
    if (auto v = var_of(t); v && chance(0.65)) {
      emit(*v);
    } else if (t == Ty::Int && chance(0.15)) {
      if (auto s = var_of(Ty::Str)) {
        emit(*s), emit("."), emit("length"), emit("("), emit(")");
        return;
      }
      literal(t);
    } else {
      literal(t);
    }
  }

  void expr(Ty t, int depth) {
    const bool nest = depth < 2 && chance(0.4);
    switch (t) {
      case Ty::Int:
      case Ty::Long:
      case Ty::Double: {
        atom(t);
        if (nest) {
          static const std::vector<std::string> ops = {"+", "-", "*", "/", "%"};
          emit(ops[pick(t == Ty::Double ? 4 : 5)]);
          if (chance(0.2)) {
            emit("(");
            expr(t, depth + 1);
            emit(")");
          } else {
            expr(t, depth + 1);
          }
        }
        break;
      }
      case Ty::Bool: {
        const double r = uniform01(rng_);
        if (r < 0.45) {
          static const std::vector<std::string> cmp = {"<", ">", "<=", ">=", "==", "!="};
          const Ty nt = chance(0.7) ? Ty::Int : Ty::Double;
          expr(nt, depth + 1);
          emit(cmp[pick(cmp.size())]);
          atom(nt);
        } else if (r < 0.6) {
          emit("!");
          atom(Ty::Bool);
        } else {
          atom(Ty::Bool);
        }
        if (nest) {
          emit(chance(0.5) ? "&&" : "||");
          expr(Ty::Bool, depth + 1);
        }
        break;
      }
      case Ty::Str: {
        atom(Ty::Str);
        if (nest) {
          emit("+");
          atom(chance(0.5) ? Ty::Str : Ty::Int);
        }
        break;
      }
    }
  }

  void block(int depth) {
    const std::size_t mark = vars_.size();
    emit("{");
    const std::size_t n = 1 + pick(2);
    for (std::size_t s = 0; s < n; ++s) statement(depth + 1);
    emit("}");
    vars_.resize(mark);
  }

  void statement(int depth) {
    const double r = uniform01(rng_);
    if (r < 0.3 || vars_.empty()) {
      const Ty t = kTypes[pick(kTypes.size())];
      emit(type_name(t));
      std::string name;
      {
        // The initializer may not mention the variable being declared.
        const auto saved = vars_;
        const std::size_t at = toks_.size();
        name = declare(t);
        vars_ = saved;
        emit("=");
        expr(t, 0);
        emit(";");
        toks_.insert(toks_.begin() + static_cast<long>(at), name);
        vars_.emplace_back(t, name);
      }
    } else if (r < 0.55) {
      const auto& [t, name] = vars_[pick(vars_.size())];
      const Ty ty = t;
      const std::string n = name;
      if ((ty == Ty::Int || ty == Ty::Long) && chance(0.3)) {
        emit(n);
        emit(chance(0.7) ? "++" : "--");
      } else if (ty != Ty::Bool && ty != Ty::Str && chance(0.3)) {
        emit(n);
        emit(chance(0.6) ? "+=" : "-=");
        expr(ty, 1);
      } else {
        emit(n);
        emit("=");
        expr(ty, 0);
      }
      emit(";");
    } else if (r < 0.72 && depth < 2) {
      emit("if");
      emit("(");
      expr(Ty::Bool, 0);
      emit(")");
      block(depth);
      if (chance(0.5)) {
        emit("else");
        block(depth);
      }
    } else if (r < 0.85 && depth < 2) {
      auto c = var_of(Ty::Int);
      if (!c) {
        emit("int");
        c = declare(Ty::Int);
        emit(*c);
        emit("=");
        emit("0");
        emit(";");
      }
      emit("while");
      emit("(");
      emit(*c);
      emit(chance(0.5) ? "<" : "<=");
      emit(std::to_string(1 + pick(20)));
      emit(")");
      emit("{");
      const std::size_t mark = vars_.size();
      statement(depth + 1);
      emit(*c);
      emit("++");
      emit(";");
      vars_.resize(mark);
      emit("}");
    } else {
      emit("System");
      emit(".");
      emit("out");
      emit(".");
      emit("println");
      emit("(");
      expr(kTypes[pick(kTypes.size())], 1);
      emit(")");
      emit(";");
    }
  }

  Rng& rng_;
  std::vector<std::string> toks_;
  std::vector<std::pair<Ty, std::string>> vars_;
};

}  // namespace

std::vector<CorpusEntry> gen_corpus(std::size_t num, std::uint64_t seed, const std::string& profile) {
  double method_share = 0.0;
  if (profile == "mixed")
    method_share = 0.4;
  else if (profile == "methods")
    method_share = 1.0;
  else if (profile != "statements")
    throw std::invalid_argument("unknown corpus profile '" + profile + "'");
  Rng rng(derive_seed(seed, 0));
  SnippetGen gen(rng);
  std::vector<CorpusEntry> out;
  out.reserve(num);
  char id[32];
  for (std::size_t i = 0; i < num; ++i) {
    std::snprintf(id, sizeof id, "s%05zu", i);
    const bool method = uniform01(rng) < method_share;
    std::string code;
    do {
      code = method ? gen.method() : gen.statements();
    } while (static_cast<std::size_t>(std::count(code.begin(), code.end(), ' ')) + 1 > kMaxSnippetTokens);
    out.push_back({id, std::move(code)});
  }
  return out;
}

std::vector<CodeUnit> parse_corpus(const std::vector<CorpusEntry>& entries) {
  std::vector<CodeUnit> units;
  units.reserve(entries.size());
  for (const auto& e : entries) units.push_back(parse(e.id, e.code));
  return units;
}

CodeUnit rename_identifiers(const CodeUnit& unit, std::uint64_t seed, const std::string& new_id) {
  std::vector<std::string> pool;
  for (Ty t : kTypes)
    for (const auto& n : names_for(t)) pool.push_back(n);
  pool.insert(pool.end(), kMethodNames.begin(), kMethodNames.end());
  Rng rng(seed);
  shuffle(pool, rng);

  std::set<std::string> used;
  for (const auto& t : unit.tokens)
    if (t.syntax_class == SyntaxClass::Identifier) used.insert(t.lexeme);
  std::map<std::string, std::string> rename;
  std::size_t next = 0;
  std::string code;
  for (const auto& t : unit.tokens) {
    std::string lex = t.lexeme;
    if (t.syntax_class == SyntaxClass::Identifier && !kFixedNames.count(lex)) {
      auto it = rename.find(lex);
      if (it == rename.end()) {
        std::string fresh;
        while (next < pool.size() && (used.count(pool[next]) || kFixedNames.count(pool[next]))) ++next;
        fresh = next < pool.size() ? pool[next++] : "v" + std::to_string(rename.size());
        it = rename.emplace(lex, fresh).first;
      }
      lex = it->second;
    }
    if (!code.empty()) code += ' ';
    code += lex;
  }
  return parse(new_id, code);
}

// ---- experiment spec ----

void ExperimentSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("experiment spec: " + m); };
  if (folds == 0) fail("folds must be at least 1");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) fail("train_fraction must lie in (0, 1]");
  if (hyper.lr <= 0.0) fail("lr must be positive");
  if (hyper.epochs == 0) fail("epochs must be positive");
  if (hyper.batch_size == 0) fail("batch_size must be positive");
  if (hyper.alpha0 < 0.0) fail("alpha0 must be non-negative");
  if (hyper.patterns.empty()) fail("at least one pattern group is required");
  if (corpus.path.empty() && corpus.num_snippets < 5) fail("num_snippets must be at least 5");
  if (vocab_size <= Vocab::kNumSpecials) fail("vocab_size too small");
  if (cloze_per_unit == 0) fail("cloze_per_unit must be positive");
  ModelConfig m = model;
  m.vocab_size = vocab_size;
  m.validate();
  assign_heads(m.num_layers, m.heads, hyper.lambda, pattern_groups(hyper.patterns));
}

ExperimentSpec toy_spec() {
  ExperimentSpec s;
  s.task = Task::Cloze;
  s.corpus = {2000, 7, "mixed", ""};
  s.model.num_layers = 2;
  s.model.heads = 4;
  s.model.model_dim = 32;
  s.model.ffn_dim = 64;
  s.model.max_len = 64;
  s.hyper.lr = 3e-3;
  s.hyper.epochs = 8;
  s.hyper.batch_size = 16;
  s.hyper.alpha0 = 1.0;
  s.hyper.lambda = 0.5;
  s.hyper.patterns = {"local"};
  s.folds = 1;
  s.vocab_size = 1024;
  s.cloze_per_unit = 4;
  s.seed = 1;
  return s;
}

json to_json(const ExperimentSpec& s) {
  return {
      {"task", std::string(to_string(s.task))},
      {"seed", s.seed},
      {"folds", s.folds},
      {"train_fraction", s.train_fraction},
      {"vocab_size", s.vocab_size},
      {"cloze_per_unit", s.cloze_per_unit},
      {"corpus",
       {{"num_snippets", s.corpus.num_snippets},
        {"seed", s.corpus.seed},
        {"profile", s.corpus.profile},
        {"path", s.corpus.path}}},
      {"model",
       {{"num_layers", s.model.num_layers},
        {"heads", s.model.heads},
        {"model_dim", s.model.model_dim},
        {"ffn_dim", s.model.ffn_dim},
        {"max_len", s.model.max_len},
        {"mask_rate", s.model.mask_rate}}},
      {"hyper",
       {{"lr", s.hyper.lr},
        {"epochs", s.hyper.epochs},
        {"batch_size", s.hyper.batch_size},
        {"alpha0", s.hyper.alpha0},
        {"lambda", s.hyper.lambda},
        {"patterns", s.hyper.patterns}}},
  };
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw std::invalid_argument("unknown key '" + k + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentSpec spec_from_json(const json& j) {
  ExperimentSpec s;
  try {
    check_keys(j, {"task", "seed", "folds", "train_fraction", "vocab_size", "cloze_per_unit", "corpus",
                   "model", "hyper"},
               "spec");
    if (j.contains("task")) s.task = task_from_string(j.at("task").get<std::string>());
    read(j, "seed", s.seed);
    read(j, "folds", s.folds);
    read(j, "train_fraction", s.train_fraction);
    read(j, "vocab_size", s.vocab_size);
    read(j, "cloze_per_unit", s.cloze_per_unit);
    if (j.contains("corpus")) {
      const auto& c = j.at("corpus");
      check_keys(c, {"num_snippets", "seed", "profile", "path"}, "corpus");
      read(c, "num_snippets", s.corpus.num_snippets);
      read(c, "seed", s.corpus.seed);
      read(c, "profile", s.corpus.profile);
      read(c, "path", s.corpus.path);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, {"num_layers", "heads", "model_dim", "ffn_dim", "max_len", "mask_rate"}, "model");
      read(m, "num_layers", s.model.num_layers);
      read(m, "heads", s.model.heads);
      read(m, "model_dim", s.model.model_dim);
      read(m, "ffn_dim", s.model.ffn_dim);
      read(m, "max_len", s.model.max_len);
      read(m, "mask_rate", s.model.mask_rate);
    }
    if (j.contains("hyper")) {
      const auto& h = j.at("hyper");
      check_keys(h, {"lr", "epochs", "batch_size", "alpha0", "lambda", "patterns"}, "hyper");
      read(h, "lr", s.hyper.lr);
      read(h, "epochs", s.hyper.epochs);
      read(h, "batch_size", s.hyper.batch_size);
      read(h, "alpha0", s.hyper.alpha0);
      read(h, "lambda", s.hyper.lambda);
      read(h, "patterns", s.hyper.patterns);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("experiment spec: ") + e.what());
  }
  s.validate();
  return s;
}

ExperimentSpec load_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return spec_from_json(j);
}

// ---- splits ----

std::vector<Split> kfold_splits(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds == 0) throw std::invalid_argument("folds must be at least 1");
  if (n < 2 || (folds > 1 && n < folds)) throw std::invalid_argument("too few units to split");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 10));
  shuffle(perm, rng);
  std::vector<Split> out;
  if (folds == 1) {
    const std::size_t test = std::max<std::size_t>(1, n / 5);
    out.push_back({{perm.begin() + static_cast<long>(test), perm.end()},
                   {perm.begin(), perm.begin() + static_cast<long>(test)}});
    return out;
  }
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t lo = f * n / folds, hi = (f + 1) * n / folds;
    Split s;
    for (std::size_t i = 0; i < n; ++i) (i >= lo && i < hi ? s.test : s.train).push_back(perm[i]);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::size_t> train_subset(const std::vector<std::size_t>& train, double fraction,
                                      std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  std::vector<std::size_t> perm(train);
  Rng rng(derive_seed(seed, 11));
  shuffle(perm, rng);
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size()) - 1e-9)));
  perm.resize(std::min(keep, perm.size()));
  return perm;
}

std::vector<CodeUnit> load_units(const CorpusParams& params) {
  if (!params.path.empty()) return parse_corpus(read_corpus_file(params.path));
  return parse_corpus(gen_corpus(params.num_snippets, params.seed, params.profile));
}

// ---- instances ----

namespace {

bool studied(SyntaxClass c) { return c != SyntaxClass::NumLiteral; }

}  // namespace

std::vector<EvalInstance> cloze_instances(const CodeUnit& unit, const Vocab& vocab,
                                          std::size_t max_len, std::size_t per_unit, Rng& rng) {
  const AlignedSequence seq = encode(unit, vocab, max_len);
  std::vector<std::size_t> count(unit.tokens.size(), 0);
  for (const auto& a : seq.alignment)
    if (a) ++count[*a];
  std::vector<std::size_t> candidates;
  for (std::size_t p = 0; p < seq.real_len; ++p) {
    const auto& a = seq.alignment[p];
    if (a && count[*a] == 1 && studied(unit.tokens[*a].syntax_class) && seq.ids[p] != Vocab::kUnk)
      candidates.push_back(p);
  }
  shuffle(candidates, rng);
  candidates.resize(std::min(candidates.size(), per_unit));
  std::sort(candidates.begin(), candidates.end());

  std::vector<EvalInstance> out;
  for (std::size_t p : candidates) {
    EvalInstance inst;
    inst.unit = unit;
    inst.seq = seq;
    inst.target = seq.ids[p];
    inst.example.ids = seq.ids;
    inst.example.ids[p] = Vocab::kMask;
    inst.example.real_len = seq.real_len;
    inst.example.target_positions = {p};
    inst.example.targets = {inst.target};
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<EvalInstance> clone_pairs(const std::vector<CodeUnit>& units, const Vocab& vocab,
                                      std::size_t max_len, std::uint64_t seed) {
  if (units.size() < 2) throw std::invalid_argument("clone pairs need at least two units");
  Rng rng(derive_seed(seed, 20));
  std::vector<EvalInstance> out;
  out.reserve(2 * units.size());
  for (std::size_t i = 0; i < units.size(); ++i) {
    std::size_t j = uniform_index(rng, units.size() - 1);
    if (j >= i) ++j;
    for (int label : {1, 0}) {
      const CodeUnit& src = label ? units[i] : units[j];
      const CodeUnit other = rename_identifiers(src, rng(), src.id + "'");
      EvalInstance inst;
      inst.unit = concat_units(units[i], other);
      inst.seq = encode_pair(units[i], other, vocab, max_len);
      inst.target = label;
      inst.example.ids = inst.seq.ids;
      inst.example.real_len = inst.seq.real_len;
      inst.example.label = label;
      out.push_back(std::move(inst));
    }
  }
  return out;
}

// ---- runs ----

namespace {

struct Prepared {
  Vocab vocab;
  ModelConfig config;
  GuidingMap map;
  std::vector<TrainItem> items;
  std::vector<EvalInstance> eval;
  std::size_t train_size = 0;
};

std::vector<PatternMatrix> patterns_for(const AlignedSequence& seq, const CodeUnit& unit,
                                        const std::vector<PatternSpec>& specs) {
  std::vector<PatternMatrix> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(build_pattern(seq, unit, s));
  return out;
}

Prepared prepare(const ExperimentSpec& spec, const std::vector<CodeUnit>& units, const Split& split,
                 std::size_t fold) {
  Prepared p;
  const auto train_idx = train_subset(split.train, spec.train_fraction, spec.seed);
  std::vector<CodeUnit> train_units, test_units;
  for (auto i : train_idx) train_units.push_back(units[i]);
  for (auto i : split.test) test_units.push_back(units[i]);
  p.train_size = train_units.size();

  p.vocab = build_vocab(train_units, spec.vocab_size);
  p.config = spec.model;
  p.config.vocab_size = p.vocab.size();
  p.config.seed = spec.seed;
  p.map = assign_heads(p.config.num_layers, p.config.heads, spec.hyper.lambda,
                       pattern_groups(spec.hyper.patterns));
  const auto specs = p.map.distinct_specs();
  const std::size_t n = p.config.max_len;

  if (spec.task == Task::Cloze) {
    for (const auto& u : train_units) {
      TrainItem it;
      it.seq = encode(u, p.vocab, n);
      it.patterns = patterns_for(it.seq, u, specs);
      p.items.push_back(std::move(it));
    }
    Rng rng(derive_seed(spec.seed, 100 + fold));
    for (const auto& u : test_units) {
      auto inst = cloze_instances(u, p.vocab, n, spec.cloze_per_unit, rng);
      for (auto& i : inst) p.eval.push_back(std::move(i));
    }
  } else {
    for (auto& inst : clone_pairs(train_units, p.vocab, n, derive_seed(spec.seed, 200 + fold))) {
      TrainItem it;
      it.seq = inst.seq;
      it.patterns = patterns_for(inst.seq, inst.unit, specs);
      it.label = inst.target;
      p.items.push_back(std::move(it));
    }
    p.eval = clone_pairs(test_units, p.vocab, n, derive_seed(spec.seed, 300 + fold));
  }
  return p;
}

ArmResult evaluate(const GuidedModel& model, const GuidingMap& guided_map,
                   const std::vector<EvalInstance>& eval) {
  ArmResult arm;
  const auto specs = guided_map.distinct_specs();
  for (const auto& inst : eval) {
    const ForwardTrace tr = forward(model, inst.example);
    const int pred = model.task == Task::Cloze ? argmax(tr.mlm_logits().row(0))
                                               : (tr.clone_logit() > 0.0 ? 1 : 0);
    arm.predictions.push_back(pred);
    arm.targets.push_back(inst.target);
    arm.records.push_back(make_record(tr, inst, pred));

    const auto pats = patterns_for(inst.seq, inst.unit, specs);
    double mass = 0.0;
    std::size_t heads = 0;
    for (std::size_t l = 0; l < guided_map.num_layers(); ++l) {
      for (std::size_t j = 0; j < guided_map.heads_per_layer(); ++j) {
        const auto& s = guided_map.at(l, j);
        if (!s) continue;
        const auto idx = static_cast<std::size_t>(std::find(specs.begin(), specs.end(), *s) - specs.begin());
        if (pats[idx].included_rows() == 0) continue;
        mass += pattern_mass(tr.attention_real(l, j), pats[idx]);
        ++heads;
      }
    }
    arm.target_mass.push_back(heads ? mass / static_cast<double>(heads)
                                    : std::numeric_limits<double>::quiet_NaN());
  }
  return arm;
}

Metrics pooled_metrics(Task task, const std::vector<int>& preds, const std::vector<int>& targets) {
  if (targets.empty()) return {};
  Metrics m = metrics(preds, targets);
  if (task == Task::Cloze) m.precision = m.recall = m.f1 = std::nullopt;
  return m;
}

RunResult run(const ExperimentSpec& spec) {
  spec.validate();
  RunResult out;
  out.spec = spec;
  const auto units = load_units(spec.corpus);
  const auto splits = kfold_splits(units.size(), spec.folds, spec.seed);

  std::vector<int> bp, gp, tg;
  std::vector<AttentionRecord> brec, grec;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    Prepared p = prepare(spec, units, splits[f], f);
    TrainOptions opt;
    opt.lr = spec.hyper.lr;
    opt.epochs = spec.hyper.epochs;
    opt.batch_size = spec.hyper.batch_size;
    opt.seed = spec.seed;

    GuidedModel baseline = GuidedModel::create(p.config, spec.task);
    baseline.schedule.alpha0 = 0.0;
    GuidedModel guided = GuidedModel::create(p.config, spec.task, p.map);
    guided.schedule.alpha0 = spec.hyper.alpha0;

    FoldResult fr;
    fr.train_size = p.train_size;
    fr.test_size = p.eval.size();
    const TrainLog blog = train(baseline, p.items, opt);
    const TrainLog glog = train(guided, p.items, opt);
    fr.baseline = evaluate(baseline, p.map, p.eval);
    fr.guided = evaluate(guided, p.map, p.eval);
    fr.baseline.log = blog;
    fr.guided.log = glog;

    bp.insert(bp.end(), fr.baseline.predictions.begin(), fr.baseline.predictions.end());
    gp.insert(gp.end(), fr.guided.predictions.begin(), fr.guided.predictions.end());
    tg.insert(tg.end(), fr.baseline.targets.begin(), fr.baseline.targets.end());
    brec.insert(brec.end(), fr.baseline.records.begin(), fr.baseline.records.end());
    grec.insert(grec.end(), fr.guided.records.begin(), fr.guided.records.end());
    if (f == 0) {
      out.vocab = p.vocab;
      out.baseline_model = std::move(baseline);
      out.guided_model = std::move(guided);
    }
    out.folds.push_back(std::move(fr));
  }

  out.baseline = pooled_metrics(spec.task, bp, tg);
  out.guided = pooled_metrics(spec.task, gp, tg);
  out.fixes = fix_accounting(bp, gp, tg);
  out.baseline_report = bias_report(brec);
  out.baseline_report.metrics = out.baseline;
  out.guided_report = bias_report(grec);
  out.guided_report.metrics = out.guided;
  out.guided_report.fixes = out.fixes;
  return out;
}

}  // namespace

RunResult run_cloze(const ExperimentSpec& spec) {
  if (spec.task != Task::Cloze) throw std::invalid_argument("run_cloze needs a cloze spec");
  return run(spec);
}

RunResult run_clone_toy(const ExperimentSpec& spec) {
  if (spec.task != Task::Clone) throw std::invalid_argument("run_clone_toy needs a clone spec");
  return run(spec);
}

RunResult run_experiment(const ExperimentSpec& spec) {
  return spec.task == Task::Cloze ? run_cloze(spec) : run_clone_toy(spec);
}

// ---- output ----

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json metrics_json(const Metrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"accuracy", m.accuracy}, {"precision", opt(m.precision)}, {"recall", opt(m.recall)},
          {"f1", opt(m.f1)}};
}

double nan_mean(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (!std::isnan(x)) s += x, ++n;
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

void write_arm(const fs::path& dir, const std::string& arm, const ExperimentSpec& spec,
               const GuidedModel& model, const Vocab& vocab, const TrainLog& log,
               const BiasReport& report) {
  fs::create_directories(dir);
  save_checkpoint_file((dir / "model.ckpt").string(), model);
  vocab.save_file((dir / "vocab.txt").string());
  write_text(dir / "spec.json", json{{"arm", arm}, {"spec", to_json(spec)}}.dump(2) + "\n");
  std::ostringstream csv;
  log.write_csv(csv);
  write_text(dir / "train_log.csv", csv.str());
  write_text(dir / "report.json", to_json(report).dump(2) + "\n");
}

}  // namespace

void write_run(const RunResult& run, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root);
  write_arm(root / "baseline", "baseline", run.spec, run.baseline_model, run.vocab,
            run.folds.front().baseline.log, run.baseline_report);
  write_arm(root / "guided", "guided", run.spec, run.guided_model, run.vocab,
            run.folds.front().guided.log, run.guided_report);

  json folds = json::array();
  for (const auto& f : run.folds) {
    folds.push_back({{"train_size", f.train_size},
                     {"test_size", f.test_size},
                     {"baseline_accuracy", pooled_metrics(run.spec.task, f.baseline.predictions, f.baseline.targets).accuracy},
                     {"guided_accuracy", pooled_metrics(run.spec.task, f.guided.predictions, f.guided.targets).accuracy},
                     {"baseline_target_mass", nan_mean(f.baseline.target_mass)},
                     {"guided_target_mass", nan_mean(f.guided.target_mass)}});
  }
  const auto& fx = run.fixes;
  json summary = {
      {"spec", to_json(run.spec)},
      {"baseline", metrics_json(run.baseline)},
      {"guided", metrics_json(run.guided)},
      {"fixes",
       {{"correct", fx.correct},
        {"wrong", fx.wrong},
        {"baseline_correct", fx.baseline_correct},
        {"fixed", fx.fixed},
        {"broken", fx.broken},
        {"fix_pct", fx.fix_pct ? json(*fx.fix_pct) : json(nullptr)}}},
      {"folds", folds},
  };
  write_text(root / "summary.json", summary.dump(2) + "\n");

  // Bias figures use the baseline model, as in the original analysis; the
  // stratified figures likewise.
  std::ostringstream f3, f4, f5, f6;
  write_bias_csv(f3, run.baseline_report, true);
  write_bias_csv(f4, run.baseline_report, false);
  write_stratified_csv(f5, run.baseline_report, true);
  write_stratified_csv(f6, run.baseline_report, false);
  write_text(root / "fig3_syntax_bias.csv", f3.str());
  write_text(root / "fig4_ast_bias.csv", f4.str());
  write_text(root / "fig5_syntax_stratified.csv", f5.str());
  write_text(root / "fig6_ast_stratified.csv", f6.str());
}

LoadedModel load_model_dir(const std::string& dir) {
  fs::path root(dir);
  if (!fs::exists(root / "model.ckpt") && fs::exists(root / "guided" / "model.ckpt")) root /= "guided";
  if (!fs::exists(root / "model.ckpt")) throw std::runtime_error("no model.ckpt under " + dir);
  LoadedModel out;
  std::ifstream in(root / "spec.json");
  if (!in) throw std::runtime_error("missing spec.json in " + root.string());
  const json meta = json::parse(in);
  out.spec = spec_from_json(meta.at("spec"));
  out.vocab = Vocab::load_file((root / "vocab.txt").string());
  out.model = load_checkpoint_file((root / "model.ckpt").string());
  out.model.task = out.spec.task;
  if (out.model.config.vocab_size != out.vocab.size())
    throw std::runtime_error("vocabulary does not match the checkpoint");
  if (meta.at("arm").get<std::string>() == "guided") {
    out.model.guiding = assign_heads(out.model.config.num_layers, out.model.config.heads,
                                     out.spec.hyper.lambda, pattern_groups(out.spec.hyper.patterns));
    out.model.schedule.alpha0 = out.spec.hyper.alpha0;
  } else {
    out.model.schedule.alpha0 = 0.0;
  }
  return out;
}

BiasReport analyze(const LoadedModel& loaded, const std::vector<CodeUnit>& units) {
  const auto& spec = loaded.spec;
  const std::size_t n = loaded.model.config.max_len;
  std::vector<EvalInstance> instances;
  if (spec.task == Task::Cloze) {
    Rng rng(derive_seed(spec.seed, 400));
    for (const auto& u : units)
      for (auto& i : cloze_instances(u, loaded.vocab, n, spec.cloze_per_unit, rng))
        instances.push_back(std::move(i));
  } else {
    instances = clone_pairs(units, loaded.vocab, n, derive_seed(spec.seed, 500));
  }
  if (instances.empty()) throw std::invalid_argument("corpus yields no evaluation instances");
  const auto records = collect(loaded.model, instances);
  BiasReport rep = bias_report(records);
  std::vector<int> preds, targets;
  for (const auto& r : records) {
    preds.push_back(r.prediction);
    targets.push_back(r.target);
  }
  rep.metrics = pooled_metrics(spec.task, preds, targets);
  return rep;
}

// ---- sweeps ----

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "lambda") return SweepAxis::Lambda;
  if (s == "alpha0") return SweepAxis::Alpha0;
  if (s == "fraction") return SweepAxis::TrainFraction;
  throw std::invalid_argument("unknown sweep axis '" + s + "' (expected lambda|alpha0|fraction)");
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::Lambda: return "lambda";
    case SweepAxis::Alpha0: return "alpha0";
    case SweepAxis::TrainFraction: return "fraction";
  }
  return "";
}

std::vector<double> default_grid(SweepAxis a) {
  switch (a) {
    case SweepAxis::Lambda: return {0.25, 0.5, 0.75, 1.0};
    case SweepAxis::Alpha0: return {1.0, 10.0, 100.0};
    case SweepAxis::TrainFraction: return {0.25, 0.5, 0.75, 1.0};
  }
  return {};
}

std::vector<SweepRow> sweep(const ExperimentSpec& spec, SweepAxis axis, std::vector<double> grid) {
  if (grid.empty()) grid = default_grid(axis);
  std::vector<SweepRow> rows;
  for (double v : grid) {
    ExperimentSpec s = spec;
    switch (axis) {
      case SweepAxis::Lambda: s.hyper.lambda = v; break;
      case SweepAxis::Alpha0: s.hyper.alpha0 = v; break;
      case SweepAxis::TrainFraction: s.train_fraction = v; break;
    }
    const RunResult r = run_experiment(s);
    SweepRow row;
    row.value = v;
    for (const auto& f : r.folds) row.train_size += f.train_size;
    row.baseline = r.baseline;
    row.guided = r.guided;
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, SweepAxis axis, const std::vector<SweepRow>& rows) {
  out << "axis,value,train_size,baseline_accuracy,guided_accuracy,baseline_f1,guided_f1\n";
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  for (const auto& r : rows)
    out << to_string(axis) << ',' << num(r.value) << ',' << r.train_size << ','
        << num(r.baseline.accuracy) << ',' << num(r.guided.accuracy) << ',' << num(r.baseline.f1)
        << ',' << num(r.guided.f1) << '\n';
}

}  // namespace attnguide
