#include "attnguide/code_model.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include <json.hpp>

namespace attnguide {

namespace {

constexpr std::array<std::string_view, kNumSyntaxClasses> kClassNames = {
    "Identifier", "Modifier", "Operator",   "DataType",  "Separator",
    "Keyword",    "StringLit", "BooleanLit", "NumLiteral"};

constexpr std::array<std::string_view, kNumAstKinds> kAstNames = {
    "MethodSignature", "IfElse", "While", "Return"};

// Reserved words of the subset, following Javalang's tables: the eight
// primitive types are basic types, `void` is a plain keyword.
const std::unordered_map<std::string_view, SyntaxClass>& word_table() {
  static const std::unordered_map<std::string_view, SyntaxClass> table = {
      {"public", SyntaxClass::Modifier},      {"private", SyntaxClass::Modifier},
      {"protected", SyntaxClass::Modifier},   {"static", SyntaxClass::Modifier},
      {"final", SyntaxClass::Modifier},       {"abstract", SyntaxClass::Modifier},
      {"synchronized", SyntaxClass::Modifier}, {"native", SyntaxClass::Modifier},
      {"transient", SyntaxClass::Modifier},   {"volatile", SyntaxClass::Modifier},
      {"strictfp", SyntaxClass::Modifier},
      {"boolean", SyntaxClass::DataType},     {"byte", SyntaxClass::DataType},
      {"char", SyntaxClass::DataType},        {"short", SyntaxClass::DataType},
      {"int", SyntaxClass::DataType},         {"long", SyntaxClass::DataType},
      {"float", SyntaxClass::DataType},       {"double", SyntaxClass::DataType},
      {"if", SyntaxClass::Keyword},           {"else", SyntaxClass::Keyword},
      {"while", SyntaxClass::Keyword},        {"return", SyntaxClass::Keyword},
      {"void", SyntaxClass::Keyword},         {"class", SyntaxClass::Keyword},
      {"break", SyntaxClass::Keyword},        {"continue", SyntaxClass::Keyword},
      {"this", SyntaxClass::Keyword},         {"null", SyntaxClass::Keyword},
      {"true", SyntaxClass::BooleanLit},      {"false", SyntaxClass::BooleanLit},
  };
  return table;
}

// Java reserved words outside the subset.
bool is_unsupported_word(std::string_view w) {
  static constexpr std::array<std::string_view, 23> words = {
      "assert",  "case",       "catch",     "const",   "default",  "do",
      "enum",    "extends",    "finally",   "for",     "goto",     "implements",
      "import",  "instanceof", "interface", "new",     "package",  "super",
      "switch",  "throw",      "throws",    "try",     "var"};
  return std::find(words.begin(), words.end(), w) != words.end();
}

constexpr std::array<std::string_view, 13> kTwoCharOps = {
    "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%="};

bool is_ident_start(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$';
}
bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_ident_char(char c) { return is_ident_start(c) || is_digit(c); }
bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f'; }

}  // namespace

std::string_view to_string(SyntaxClass c) { return kClassNames[static_cast<std::size_t>(c)]; }
std::string_view to_string(AstKind k) { return kAstNames[static_cast<std::size_t>(k)]; }

std::optional<SyntaxClass> syntax_class_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == s) return static_cast<SyntaxClass>(i);
  return std::nullopt;
}

std::optional<AstKind> ast_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kAstNames.size(); ++i)
    if (kAstNames[i] == s) return static_cast<AstKind>(i);
  return std::nullopt;
}

UnsupportedConstruct::UnsupportedConstruct(std::size_t offset, const std::string& what)
    : std::runtime_error("unsupported construct at byte " + std::to_string(offset) + ": " + what),
      offset_(offset) {}

MalformedStatement::MalformedStatement(std::size_t token_index, const std::string& what)
    : std::runtime_error("malformed statement at token " + std::to_string(token_index) + ": " +
                         what),
      index_(token_index) {}

std::vector<SourceToken> lex(std::string_view raw) {
  std::vector<SourceToken> out;
  std::size_t i = 0;
  const std::size_t n = raw.size();

  auto push = [&](std::size_t begin, std::size_t end, SyntaxClass cls) {
    out.push_back(SourceToken{std::string(raw.substr(begin, end - begin)), {begin, end}, cls,
                              out.size()});
  };

  while (i < n) {
    const char c = raw[i];
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (c == '/' && i + 1 < n && raw[i + 1] == '/') {
      while (i < n && raw[i] != '\n') ++i;
      continue;
    }
    if (c == '/' && i + 1 < n && raw[i + 1] == '*') {
      const auto close = raw.find("*/", i + 2);
      if (close == std::string_view::npos) throw UnsupportedConstruct(i, "unterminated comment");
      i = close + 2;
      continue;
    }
    const std::size_t begin = i;
    if (is_ident_start(c)) {
      while (i < n && is_ident_char(raw[i])) ++i;
      const auto word = raw.substr(begin, i - begin);
      const auto& table = word_table();
      if (auto it = table.find(word); it != table.end()) {
        push(begin, i, it->second);
      } else if (is_unsupported_word(word)) {
        throw UnsupportedConstruct(begin, "reserved word '" + std::string(word) + "'");
      } else {
        push(begin, i, SyntaxClass::Identifier);
      }
      continue;
    }
    if (is_digit(c)) {
      while (i < n && is_digit(raw[i])) ++i;
      if (i + 1 < n && raw[i] == '.' && is_digit(raw[i + 1])) {
        ++i;
        while (i < n && is_digit(raw[i])) ++i;
      }
      if (i < n && (is_ident_char(raw[i]) || raw[i] == '.'))
        throw UnsupportedConstruct(i, "numeric literal suffix");
      push(begin, i, SyntaxClass::NumLiteral);
      continue;
    }
    if (c == '"') {
      ++i;
      bool closed = false;
      while (i < n) {
        if (raw[i] == '\\') {
          if (i + 1 >= n) break;
          i += 2;
          continue;
        }
        if (raw[i] == '\n') break;
        if (raw[i] == '"') {
          ++i;
          closed = true;
          break;
        }
        ++i;
      }
      if (!closed) throw UnsupportedConstruct(begin, "unterminated string literal");
      push(begin, i, SyntaxClass::StringLit);
      continue;
    }
    if (i + 1 < n) {
      const auto two = raw.substr(i, 2);
      if (std::find(kTwoCharOps.begin(), kTwoCharOps.end(), two) != kTwoCharOps.end()) {
        i += 2;
        push(begin, i, SyntaxClass::Operator);
        continue;
      }
    }
    switch (c) {
      case '=': case '+': case '-': case '*': case '/': case '%':
      case '<': case '>': case '!':
        push(begin, ++i, SyntaxClass::Operator);
        continue;
      case ';': case ',': case '(': case ')': case '{': case '}': case '.':
        push(begin, ++i, SyntaxClass::Separator);
        continue;
      default:
        throw UnsupportedConstruct(begin, std::string("character '") + c + "'");
    }
  }
  return out;
}

namespace {

class Recognizer {
 public:
  explicit Recognizer(const std::vector<SourceToken>& tokens) : toks_(tokens) {}

  std::vector<AstSpan> run() {
    while (pos_ < toks_.size()) member_or_statement();
    std::sort(spans_.begin(), spans_.end(), [](const AstSpan& a, const AstSpan& b) {
      return a.token_range.begin != b.token_range.begin ? a.token_range.begin < b.token_range.begin
                                                        : a.kind < b.kind;
    });
    return std::move(spans_);
  }

 private:
  const std::vector<SourceToken>& toks_;
  std::size_t pos_ = 0;
  std::vector<AstSpan> spans_;
  std::array<int, kNumAstKinds> open_{};

  bool at_end(std::size_t i) const { return i >= toks_.size(); }
  bool is_lex(std::size_t i, std::string_view lexeme) const {
    return !at_end(i) && toks_[i].lexeme == lexeme;
  }
  bool is_class(std::size_t i, SyntaxClass c) const {
    return !at_end(i) && toks_[i].syntax_class == c;
  }
  bool is_type(std::size_t i) const {
    return is_class(i, SyntaxClass::DataType) || is_lex(i, "void") ||
           is_class(i, SyntaxClass::Identifier);
  }

  [[noreturn]] void fail(const std::string& what) const {
    const std::string got = at_end(pos_) ? "end of input" : "'" + toks_[pos_].lexeme + "'";
    throw MalformedStatement(pos_, what + ", got " + got);
  }

  void expect(std::string_view lexeme) {
    if (!is_lex(pos_, lexeme)) fail("expected '" + std::string(lexeme) + "'");
    ++pos_;
  }

  void expect_identifier() {
    if (!is_class(pos_, SyntaxClass::Identifier)) fail("expected identifier");
    ++pos_;
  }

  // Spans are recorded on completion; a span opened while another of the same
  // kind is open is absorbed into the outer one.
  template <typename Body>
  void span(AstKind kind, std::size_t begin, Body&& body) {
    auto& open = open_[static_cast<std::size_t>(kind)];
    ++open;
    body();
    --open;
    if (open == 0) spans_.push_back(AstSpan{kind, {begin, pos_}});
  }

  void member_or_statement() {
    const std::size_t start = pos_;
    while (is_class(pos_, SyntaxClass::Modifier)) ++pos_;
    if (is_lex(pos_, "class")) {
      ++pos_;
      expect_identifier();
      expect("{");
      while (!is_lex(pos_, "}")) {
        if (at_end(pos_)) fail("unbalanced '{'");
        member_or_statement();
      }
      ++pos_;
      return;
    }
    if (is_type(pos_) && is_class(pos_ + 1, SyntaxClass::Identifier) && is_lex(pos_ + 2, "(")) {
      method(start);
      return;
    }
    if (pos_ > start) {
      if (!(is_type(pos_) && is_class(pos_ + 1, SyntaxClass::Identifier)))
        fail("expected declaration after modifiers");
      local_declaration();
      return;
    }
    statement();
  }

  void method(std::size_t start) {
    span(AstKind::MethodSignature, start, [&] {
      pos_ += 2;  // type, name
      expect("(");
      if (!is_lex(pos_, ")")) {
        for (;;) {
          if (!is_type(pos_)) fail("expected parameter type");
          ++pos_;
          expect_identifier();
          if (!is_lex(pos_, ",")) break;
          ++pos_;
        }
      }
      expect(")");
    });
    if (is_lex(pos_, ";")) {
      ++pos_;
      return;
    }
    block();
  }

  void block() {
    expect("{");
    while (!is_lex(pos_, "}")) {
      if (at_end(pos_)) fail("unbalanced '{'");
      member_or_statement();
    }
    ++pos_;
  }

  void local_declaration() {
    ++pos_;  // type
    for (;;) {
      expect_identifier();
      if (is_lex(pos_, "=")) {
        ++pos_;
        expression();
      }
      if (!is_lex(pos_, ",")) break;
      ++pos_;
    }
    expect(";");
  }

  void statement() {
    if (at_end(pos_)) fail("expected statement");
    if (is_lex(pos_, "{")) return block();
    if (is_lex(pos_, ";")) {
      ++pos_;
      return;
    }
    if (is_lex(pos_, "if")) {
      span(AstKind::IfElse, pos_, [&] {
        ++pos_;
        condition();
        statement();
        if (is_lex(pos_, "else")) {
          ++pos_;
          statement();
        }
      });
      return;
    }
    if (is_lex(pos_, "while")) {
      span(AstKind::While, pos_, [&] {
        ++pos_;
        condition();
        statement();
      });
      return;
    }
    if (is_lex(pos_, "return")) {
      span(AstKind::Return, pos_, [&] {
        ++pos_;
        if (!is_lex(pos_, ";")) expression();
        expect(";");
      });
      return;
    }
    if (is_lex(pos_, "break") || is_lex(pos_, "continue")) {
      ++pos_;
      expect(";");
      return;
    }
    if (is_lex(pos_, "else")) fail("'else' without 'if'");
    if (is_type(pos_) && is_class(pos_ + 1, SyntaxClass::Identifier)) return local_declaration();
    expression();
    expect(";");
  }

  void condition() {
    expect("(");
    expression();
    expect(")");
  }

  static bool is_binary(std::string_view op) {
    return op != "!" && op != "++" && op != "--";
  }

  void expression() {
    unary();
    while (is_class(pos_, SyntaxClass::Operator) && is_binary(toks_[pos_].lexeme)) {
      ++pos_;
      unary();
    }
  }

  void unary() {
    if (is_lex(pos_, "!") || is_lex(pos_, "-") || is_lex(pos_, "+") || is_lex(pos_, "++") ||
        is_lex(pos_, "--")) {
      ++pos_;
      unary();
      return;
    }
    primary();
    for (;;) {
      if (is_lex(pos_, ".")) {
        ++pos_;
        expect_identifier();
        if (is_lex(pos_, "(")) arguments();
      } else if (is_lex(pos_, "++") || is_lex(pos_, "--")) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  void primary() {
    if (is_class(pos_, SyntaxClass::Identifier)) {
      ++pos_;
      if (is_lex(pos_, "(")) arguments();
      return;
    }
    if (is_class(pos_, SyntaxClass::StringLit) || is_class(pos_, SyntaxClass::BooleanLit) ||
        is_class(pos_, SyntaxClass::NumLiteral) || is_lex(pos_, "this") || is_lex(pos_, "null")) {
      ++pos_;
      return;
    }
    if (is_lex(pos_, "(")) {
      ++pos_;
      expression();
      expect(")");
      return;
    }
    fail("expected expression");
  }

  void arguments() {
    expect("(");
    if (!is_lex(pos_, ")")) {
      for (;;) {
        expression();
        if (!is_lex(pos_, ",")) break;
        ++pos_;
      }
    }
    expect(")");
  }
};

}  // namespace

std::vector<AstSpan> extract_ast_spans(const std::vector<SourceToken>& tokens) {
  return Recognizer(tokens).run();
}

CodeUnit parse(std::string id, std::string raw) {
  CodeUnit unit;
  unit.tokens = lex(raw);
  unit.ast_spans = extract_ast_spans(unit.tokens);
  unit.id = std::move(id);
  unit.raw = std::move(raw);
  return unit;
}

std::vector<bool> ast_membership(const CodeUnit& unit, AstKind kind) {
  std::vector<bool> member(unit.tokens.size(), false);
  for (const auto& s : unit.ast_spans) {
    if (s.kind != kind) continue;
    for (std::size_t i = s.token_range.begin; i < s.token_range.end; ++i) member[i] = true;
  }
  return member;
}

CodeUnit concat_units(const CodeUnit& a, const CodeUnit& b) {
  CodeUnit out;
  out.id = a.id + "|" + b.id;
  out.raw = a.raw + "\n" + b.raw;
  out.tokens = a.tokens;
  out.ast_spans = a.ast_spans;
  const std::size_t byte_shift = a.raw.size() + 1;
  const std::size_t index_shift = a.tokens.size();
  for (auto t : b.tokens) {
    t.byte_span.begin += byte_shift;
    t.byte_span.end += byte_shift;
    t.index += index_shift;
    out.tokens.push_back(std::move(t));
  }
  for (auto s : b.ast_spans) {
    s.token_range.begin += index_shift;
    s.token_range.end += index_shift;
    out.ast_spans.push_back(s);
  }
  return out;
}

std::vector<CorpusEntry> read_corpus(std::istream& in) {
  std::vector<CorpusEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("code") || !j["id"].is_string() ||
        !j["code"].is_string())
      throw std::invalid_argument("corpus line " + std::to_string(line_no) +
                               ": expected {\"id\": string, \"code\": string}");
    out.push_back({j["id"].get<std::string>(), j["code"].get<std::string>()});
  }
  return out;
}

std::vector<CorpusEntry> read_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path);
  return read_corpus(in);
}

void write_corpus(std::ostream& out, const std::vector<CorpusEntry>& entries) {
  for (const auto& e : entries) {
    nlohmann::json j = {{"id", e.id}, {"code", e.code}};
    out << j.dump() << '\n';
  }
}

}  // namespace attnguide
