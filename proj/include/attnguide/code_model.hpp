#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attnguide {

// Lexical category of a source token. The first eight are the categories the
// bias analysis studies; NumLiteral keeps classification total for integer and
// decimal literals and never matches a guiding pattern.
enum class SyntaxClass {
  Identifier,
  Modifier,
  Operator,
  DataType,
  Separator,
  Keyword,
  StringLit,
  BooleanLit,
  NumLiteral,
};

inline constexpr std::size_t kNumSyntaxClasses = 9;
inline constexpr std::size_t kNumStudiedSyntaxClasses = 8;

enum class AstKind { MethodSignature, IfElse, While, Return };

inline constexpr std::size_t kNumAstKinds = 4;

std::string_view to_string(SyntaxClass c);
std::string_view to_string(AstKind k);
std::optional<SyntaxClass> syntax_class_from_string(std::string_view s);
std::optional<AstKind> ast_kind_from_string(std::string_view s);

struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - begin; }
  bool operator==(const ByteSpan&) const = default;
};

struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const TokenRange&) const = default;
};

struct SourceToken {
  std::string lexeme;
  ByteSpan byte_span;
  SyntaxClass syntax_class = SyntaxClass::Identifier;
  std::size_t index = 0;
  bool operator==(const SourceToken&) const = default;
};

struct AstSpan {
  AstKind kind = AstKind::Return;
  TokenRange token_range;
  bool operator==(const AstSpan&) const = default;
};

struct CodeUnit {
  std::string id;
  std::string raw;
  std::vector<SourceToken> tokens;
  std::vector<AstSpan> ast_spans;
  bool operator==(const CodeUnit&) const = default;
};

class UnsupportedConstruct : public std::runtime_error {
 public:
  UnsupportedConstruct(std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class MalformedStatement : public std::runtime_error {
 public:
  MalformedStatement(std::size_t token_index, const std::string& what);
  std::size_t token_index() const { return index_; }

 private:
  std::size_t index_;
};

/// Lexes the supported Java subset. Comments and whitespace are dropped.
/// Throws UnsupportedConstruct at the byte offset of the first character or
/// reserved word the subset does not cover.
std::vector<SourceToken> lex(std::string_view raw);

/// Recursive-descent statement recognizer over a lexed token stream. Produces
/// MethodSignature, IfElse, While and Return spans, sorted by (begin, kind).
/// Nested statements of the same kind are absorbed into the outermost span.
std::vector<AstSpan> extract_ast_spans(const std::vector<SourceToken>& tokens);

CodeUnit parse(std::string id, std::string raw);

// Tokens of `unit` whose index lies inside any span of kind `kind`.
std::vector<bool> ast_membership(const CodeUnit& unit, AstKind kind);

// Concatenates two units into one token stream (b's indices and byte spans
// shifted past a). Used for paired inputs.
CodeUnit concat_units(const CodeUnit& a, const CodeUnit& b);

// Corpus I/O: JSON lines, one {"id": ..., "code": ...} per line.
struct CorpusEntry {
  std::string id;
  std::string code;
};
std::vector<CorpusEntry> read_corpus(std::istream& in);
std::vector<CorpusEntry> read_corpus_file(const std::string& path);
void write_corpus(std::ostream& out, const std::vector<CorpusEntry>& entries);

}  // namespace attnguide
