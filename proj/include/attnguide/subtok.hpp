#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "attnguide/code_model.hpp"

namespace attnguide {

using TokenId = std::int32_t;

class EmptyCorpus : public std::invalid_argument {
 public:
  EmptyCorpus() : std::invalid_argument("cannot build a vocabulary from an empty corpus") {}
};

class LengthMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Subword vocabulary. The six specials occupy ids 0..5 in the order
/// [CLS] [SEP] [EOS] [MASK] [PAD] [UNK]; every other entry is unique.
class Vocab {
 public:
  static constexpr TokenId kCls = 0;
  static constexpr TokenId kSep = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kMask = 3;
  static constexpr TokenId kPad = 4;
  static constexpr TokenId kUnk = 5;
  static constexpr std::size_t kNumSpecials = 6;

  Vocab();
  explicit Vocab(std::vector<std::string> entries);

  std::size_t size() const { return entries_.size(); }
  const std::string& token(TokenId id) const { return entries_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> id(std::string_view s) const;
  const std::vector<std::string>& entries() const { return entries_; }
  std::size_t max_entry_codepoints() const { return max_entry_codepoints_; }

  static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kNumSpecials); }

  // Plain text, one entry per line, line number = id.
  void save(std::ostream& out) const;
  static Vocab load(std::istream& in);
  void save_file(const std::string& path) const;
  static Vocab load_file(const std::string& path);

  bool operator==(const Vocab& other) const { return entries_ == other.entries_; }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_entry_codepoints_ = 1;
};

/// Specials, then every code point seen in any lexeme (sorted), then the most
/// frequent multi-code-point lexeme substrings of length <= max_piece_len,
/// ranked by occurrence count then lexicographically, until max_size.
Vocab build_vocab(const std::vector<CodeUnit>& corpus, std::size_t max_size,
                  std::size_t max_piece_len = 8);

/// Greedy longest-match segmentation of one lexeme; unknown code points map
/// to [UNK].
std::vector<TokenId> segment(std::string_view lexeme, const Vocab& vocab);

struct AlignedSequence {
  std::vector<TokenId> ids;  // length n, padded with [PAD]
  std::vector<std::optional<std::size_t>> alignment;  // source-token index per position
  std::size_t real_len = 0;
  std::string unit_id;

  std::size_t size() const { return ids.size(); }
  std::optional<std::size_t> sep_position() const;
};

/// [CLS] subtokens [EOS], truncated by dropping trailing source tokens whole,
/// then padded to max_len.
AlignedSequence encode(const CodeUnit& unit, const Vocab& vocab, std::size_t max_len);

/// [CLS] a [SEP] b [EOS]. Alignment indexes the token stream of
/// concat_units(a, b). Whole tokens are dropped from the tail of the longer
/// segment until the pair fits.
AlignedSequence encode_pair(const CodeUnit& a, const CodeUnit& b, const Vocab& vocab,
                            std::size_t max_len);

struct SourceWeights {
  Eigen::VectorXd per_token;  // one entry per source token
  double special_mass = 0.0;  // [CLS]/[SEP]/[EOS]/[PAD] positions
};

/// Sums per-position weights into their aligned source tokens.
SourceWeights aggregate_to_source(const Eigen::Ref<const Eigen::VectorXd>& weights,
                                  const AlignedSequence& seq, std::size_t num_source_tokens);

}  // namespace attnguide
