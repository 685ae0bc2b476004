#include "attnguide/patterns.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace attnguide {

namespace {

constexpr std::array<SyntaxClass, 7> kGuidedSyntax = {
    SyntaxClass::Modifier, SyntaxClass::Separator, SyntaxClass::Keyword,  SyntaxClass::Identifier,
    SyntaxClass::DataType, SyntaxClass::Operator,  SyntaxClass::StringLit};

constexpr std::array<AstKind, 3> kGuidedAst = {AstKind::MethodSignature, AstKind::IfElse,
                                               AstKind::Return};

std::string_view global_name(GlobalPos g) {
  switch (g) {
    case GlobalPos::First: return "First";
    case GlobalPos::Cls: return "CLS";
    case GlobalPos::Sep: return "SEP";
  }
  return "";
}

std::string_view local_name(LocalDir d) { return d == LocalDir::Next ? "Next" : "Prev"; }

}  // namespace

PatternSpec PatternSpec::syntax(SyntaxClass c) {
  if (std::find(kGuidedSyntax.begin(), kGuidedSyntax.end(), c) == kGuidedSyntax.end())
    throw std::invalid_argument("syntax class " + std::string(to_string(c)) +
                                " is not a guided class");
  return PatternSpec(c);
}

PatternSpec PatternSpec::ast(AstKind k) {
  if (std::find(kGuidedAst.begin(), kGuidedAst.end(), k) == kGuidedAst.end())
    throw std::invalid_argument("AST kind " + std::string(to_string(k)) + " is not guided");
  return PatternSpec(k);
}

std::string PatternSpec::name() const {
  return std::visit(
      [](auto t) -> std::string {
        using T = decltype(t);
        if constexpr (std::is_same_v<T, SyntaxClass>) return "Syntax(" + std::string(to_string(t)) + ")";
        if constexpr (std::is_same_v<T, AstKind>) return "Ast(" + std::string(to_string(t)) + ")";
        if constexpr (std::is_same_v<T, GlobalPos>) return "Global(" + std::string(global_name(t)) + ")";
        if constexpr (std::is_same_v<T, LocalDir>) return "Local(" + std::string(local_name(t)) + ")";
      },
      target_);
}

PatternSpec PatternSpec::from_string(const std::string& s) {
  const auto open = s.find('(');
  if (open == std::string::npos || s.back() != ')')
    throw std::invalid_argument("bad pattern spec '" + s + "'");
  const std::string kind = s.substr(0, open);
  const std::string arg = s.substr(open + 1, s.size() - open - 2);
  if (kind == "Syntax") {
    if (auto c = syntax_class_from_string(arg)) return syntax(*c);
  } else if (kind == "Ast") {
    if (auto k = ast_kind_from_string(arg)) return ast(*k);
  } else if (kind == "Global") {
    for (auto g : {GlobalPos::First, GlobalPos::Cls, GlobalPos::Sep})
      if (global_name(g) == arg) return global(g);
  } else if (kind == "Local") {
    for (auto d : {LocalDir::Next, LocalDir::Prev})
      if (local_name(d) == arg) return local(d);
  }
  throw std::invalid_argument("bad pattern spec '" + s + "'");
}

std::vector<PatternSpec> pattern_group(const std::string& group) {
  std::vector<PatternSpec> out;
  if (group == "syntax") {
    for (auto c : kGuidedSyntax) out.push_back(PatternSpec::syntax(c));
  } else if (group == "ast") {
    for (auto k : kGuidedAst) out.push_back(PatternSpec::ast(k));
  } else if (group == "global") {
    for (auto g : {GlobalPos::First, GlobalPos::Cls, GlobalPos::Sep})
      out.push_back(PatternSpec::global(g));
  } else if (group == "local") {
    out = {PatternSpec::local(LocalDir::Next), PatternSpec::local(LocalDir::Prev)};
  } else {
    out.push_back(PatternSpec::from_string(group));
  }
  return out;
}

std::vector<PatternSpec> pattern_groups(const std::vector<std::string>& groups) {
  std::vector<PatternSpec> out;
  for (const auto& g : groups) {
    auto specs = pattern_group(g);
    out.insert(out.end(), specs.begin(), specs.end());
  }
  return out;
}

std::size_t PatternMatrix::included_rows() const {
  return static_cast<std::size_t>(std::count(row_included.begin(), row_included.end(), true));
}

PatternMatrix build_pattern(const AlignedSequence& seq, const CodeUnit& unit,
                            const PatternSpec& spec) {
  if (seq.unit_id != unit.id)
    throw SequenceUnitMismatch("sequence of '" + seq.unit_id + "' used with unit '" + unit.id + "'");
  for (const auto& a : seq.alignment)
    if (a && *a >= unit.tokens.size())
      throw SequenceUnitMismatch("alignment index out of range for unit '" + unit.id + "'");

  const auto n = static_cast<Eigen::Index>(seq.size());
  const auto m = static_cast<Eigen::Index>(seq.real_len);
  PatternMatrix out;
  out.values = Eigen::MatrixXd::Zero(n, n);
  out.row_included.assign(seq.size(), false);
  out.spec = spec;
  out.unit_id = unit.id;
  out.real_len = seq.real_len;

  // Columns shared by every row; only the local patterns are row-dependent.
  Eigen::VectorXd columns = Eigen::VectorXd::Zero(n);
  std::visit(
      [&](auto t) {
        using T = decltype(t);
        if constexpr (std::is_same_v<T, SyntaxClass>) {
          for (Eigen::Index p = 0; p < m; ++p)
            if (const auto& a = seq.alignment[p]; a && unit.tokens[*a].syntax_class == t)
              columns[p] = 1.0;
        } else if constexpr (std::is_same_v<T, AstKind>) {
          const auto member = ast_membership(unit, t);
          for (Eigen::Index p = 0; p < m; ++p)
            if (const auto& a = seq.alignment[p]; a && member[*a]) columns[p] = 1.0;
        } else if constexpr (std::is_same_v<T, GlobalPos>) {
          if (t == GlobalPos::Sep) {
            if (auto sep = seq.sep_position()) columns[static_cast<Eigen::Index>(*sep)] = 1.0;
          } else if (m > 0) {
            for (Eigen::Index p = 0; p < m; ++p) {
              if (t == GlobalPos::First || seq.ids[p] == Vocab::kCls) {
                columns[p] = 1.0;
                break;
              }
            }
          }
        }
      },
      spec.target());

  if (const auto* dir = std::get_if<LocalDir>(&spec.target())) {
    for (Eigen::Index p = 0; p < m; ++p) {
      const Eigen::Index q = *dir == LocalDir::Next ? p + 1 : p - 1;
      if (q < 0 || q >= m) continue;
      out.values(p, q) = 1.0;
      out.row_included[p] = true;
    }
    return out;
  }

  const double count = columns.sum();
  if (count == 0.0) return out;
  const Eigen::RowVectorXd row = columns.transpose() / count;
  for (Eigen::Index p = 0; p < m; ++p) {
    out.values.row(p) = row;
    out.row_included[p] = true;
  }
  return out;
}

void write_pattern_csv(std::ostream& out, const PatternMatrix& p) {
  out << p.spec.name() << ',' << p.unit_id << ',' << p.size() << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < p.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.values.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", p.values(r, c));
      if (c) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

InvalidLambda::InvalidLambda(double lambda)
    : std::invalid_argument("lambda must be one of 1/4, 1/2, 3/4, 1 (got " +
                            std::to_string(lambda) + ")") {}

GuidingMap::GuidingMap(std::size_t num_layers, std::size_t heads_per_layer)
    : layers_(num_layers), heads_(heads_per_layer), slots_(num_layers * heads_per_layer) {}

const std::optional<PatternSpec>& GuidingMap::at(std::size_t layer, std::size_t head) const {
  return slots_.at(layer * heads_ + head);
}

void GuidingMap::set(std::size_t layer, std::size_t head, std::optional<PatternSpec> spec) {
  slots_.at(layer * heads_ + head) = std::move(spec);
}

std::size_t GuidingMap::guided_count() const {
  return static_cast<std::size_t>(
      std::count_if(slots_.begin(), slots_.end(), [](const auto& s) { return s.has_value(); }));
}

std::vector<PatternSpec> GuidingMap::distinct_specs() const {
  std::vector<PatternSpec> out;
  for (const auto& s : slots_)
    if (s && std::find(out.begin(), out.end(), *s) == out.end()) out.push_back(*s);
  return out;
}

GuidingMap assign_heads(std::size_t num_layers, std::size_t heads_per_layer, double lambda,
                        const std::vector<PatternSpec>& specs) {
  constexpr std::array<double, 4> allowed = {0.25, 0.5, 0.75, 1.0};
  if (std::none_of(allowed.begin(), allowed.end(),
                   [&](double a) { return std::abs(a - lambda) < 1e-9; }))
    throw InvalidLambda(lambda);
  if (specs.empty()) throw std::invalid_argument("assign_heads needs at least one pattern");

  GuidingMap map(num_layers, heads_per_layer);
  const auto guided =
      static_cast<std::size_t>(std::floor(lambda * static_cast<double>(heads_per_layer) + 1e-9));
  for (std::size_t layer = 0; layer < num_layers; ++layer)
    for (std::size_t j = 0; j < guided; ++j) map.set(layer, j, specs[j % specs.size()]);
  return map;
}

}  // namespace attnguide
