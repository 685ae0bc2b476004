#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "attnguide/code_model.hpp"
#include "attnguide/subtok.hpp"

namespace attnguide {

enum class GlobalPos { First, Cls, Sep };
enum class LocalDir { Next, Prev };

/// What a guided head should attend to. Syntax patterns take one of the seven
/// guided classes (BooleanLit and NumLiteral are analysis-only); AST patterns
/// take MethodSignature, IfElse or Return (While is analysis-only).
class PatternSpec {
 public:
  using Target = std::variant<SyntaxClass, AstKind, GlobalPos, LocalDir>;

  static PatternSpec syntax(SyntaxClass c);
  static PatternSpec ast(AstKind k);
  static PatternSpec global(GlobalPos g) { return PatternSpec(g); }
  static PatternSpec local(LocalDir d) { return PatternSpec(d); }

  /// "Syntax(Identifier)", "Ast(Return)", "Global(First)", "Local(Next)", ...
  static PatternSpec from_string(const std::string& s);
  std::string name() const;

  const Target& target() const { return target_; }
  bool operator==(const PatternSpec&) const = default;

 private:
  explicit PatternSpec(Target t) : target_(t) {}
  Target target_;
};

/// Expands pattern group names ("syntax", "ast", "global", "local") into specs,
/// in the fixed order of each group. Unknown names throw std::invalid_argument.
std::vector<PatternSpec> pattern_group(const std::string& group);
std::vector<PatternSpec> pattern_groups(const std::vector<std::string>& groups);

class SequenceUnitMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PatternMatrix {
  Eigen::MatrixXd values;          // n x n, included rows are distributions
  std::vector<bool> row_included;  // false rows are all-zero
  PatternSpec spec = PatternSpec::global(GlobalPos::First);
  std::string unit_id;
  std::size_t real_len = 0;  // columns >= real_len are [PAD]

  std::size_t size() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t included_rows() const;
};

PatternMatrix build_pattern(const AlignedSequence& seq, const CodeUnit& unit,
                            const PatternSpec& spec);

// Pattern dump: header line "<spec>,<unit_id>,<n>", then n rows of n values.
void write_pattern_csv(std::ostream& out, const PatternMatrix& p);

class InvalidLambda : public std::invalid_argument {
 public:
  explicit InvalidLambda(double lambda);
};

/// Which pattern, if any, guides head (layer, head).
class GuidingMap {
 public:
  GuidingMap() = default;
  GuidingMap(std::size_t num_layers, std::size_t heads_per_layer);

  std::size_t num_layers() const { return layers_; }
  std::size_t heads_per_layer() const { return heads_; }
  const std::optional<PatternSpec>& at(std::size_t layer, std::size_t head) const;
  void set(std::size_t layer, std::size_t head, std::optional<PatternSpec> spec);
  std::size_t guided_count() const;
  bool any_guided() const { return guided_count() > 0; }

  // Distinct specs in first-use order.
  std::vector<PatternSpec> distinct_specs() const;

 private:
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  std::vector<std::optional<PatternSpec>> slots_;
};

/// Guides the first floor(lambda * heads_per_layer) heads of every layer; head
/// j receives specs[j mod |specs|] in all layers.
GuidingMap assign_heads(std::size_t num_layers, std::size_t heads_per_layer, double lambda,
                        const std::vector<PatternSpec>& specs);

}  // namespace attnguide
