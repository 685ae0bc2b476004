#include "attnguide/subtok.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>

namespace attnguide {

namespace {

constexpr std::string_view kSpecialNames[Vocab::kNumSpecials] = {"[CLS]",  "[SEP]", "[EOS]",
                                                                "[MASK]", "[PAD]", "[UNK]"};

std::size_t codepoint_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

// Byte offsets of code point boundaries, including the end.
std::vector<std::size_t> codepoint_bounds(std::string_view s) {
  std::vector<std::size_t> b;
  std::size_t i = 0;
  while (i < s.size()) {
    b.push_back(i);
    i = std::min(s.size(), i + codepoint_length(static_cast<unsigned char>(s[i])));
  }
  b.push_back(s.size());
  return b;
}

}  // namespace

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> entries) {
  entries_.reserve(entries.size() + kNumSpecials);
  for (auto name : kSpecialNames) entries_.emplace_back(name);
  const bool has_specials =
      entries.size() >= kNumSpecials &&
      std::equal(entries.begin(), entries.begin() + kNumSpecials, entries_.begin());
  const std::size_t skip = has_specials ? kNumSpecials : 0;
  for (std::size_t i = skip; i < entries.size(); ++i) entries_.push_back(std::move(entries[i]));

  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!index_.emplace(entries_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument("duplicate vocabulary entry '" + entries_[i] + "'");
    if (i >= kNumSpecials)
      max_entry_codepoints_ =
          std::max(max_entry_codepoints_, codepoint_bounds(entries_[i]).size() - 1);
  }
}

std::optional<TokenId> Vocab::id(std::string_view s) const {
  auto it = index_.find(std::string(s));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Vocab::save(std::ostream& out) const {
  for (const auto& e : entries_) out << e << '\n';
}

Vocab Vocab::load(std::istream& in) {
  std::vector<std::string> entries;
  std::string line;
  while (std::getline(in, line)) entries.push_back(line);
  if (entries.size() < kNumSpecials ||
      !std::equal(entries.begin(), entries.begin() + kNumSpecials, std::begin(kSpecialNames)))
    throw std::runtime_error("vocabulary file does not start with the six special tokens");
  return Vocab(std::move(entries));
}

void Vocab::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save(out);
}

Vocab Vocab::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load(in);
}

Vocab build_vocab(const std::vector<CodeUnit>& corpus, std::size_t max_size,
                  std::size_t max_piece_len) {
  if (corpus.empty()) throw EmptyCorpus();

  std::set<std::string> alphabet;
  std::map<std::string, std::size_t> counts;
  for (const auto& unit : corpus) {
    for (const auto& tok : unit.tokens) {
      const auto b = codepoint_bounds(tok.lexeme);
      const std::size_t cps = b.size() - 1;
      for (std::size_t i = 0; i < cps; ++i) {
        alphabet.insert(tok.lexeme.substr(b[i], b[i + 1] - b[i]));
        for (std::size_t len = 2; len <= max_piece_len && i + len <= cps; ++len)
          ++counts[tok.lexeme.substr(b[i], b[i + len] - b[i])];
      }
    }
  }

  const std::size_t floor = Vocab::kNumSpecials + alphabet.size();
  if (max_size < floor)
    throw std::invalid_argument("max_size " + std::to_string(max_size) +
                                " is below specials + alphabet (" + std::to_string(floor) + ")");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> entries(alphabet.begin(), alphabet.end());
  const std::size_t room = max_size - floor;
  for (std::size_t i = 0; i < std::min(room, ranked.size()); ++i)
    entries.push_back(std::move(ranked[i].first));
  return Vocab(std::move(entries));
}

std::vector<TokenId> segment(std::string_view lexeme, const Vocab& vocab) {
  std::vector<TokenId> out;
  const auto b = codepoint_bounds(lexeme);
  const std::size_t cps = b.size() - 1;
  std::size_t i = 0;
  while (i < cps) {
    const std::size_t longest = std::min(vocab.max_entry_codepoints(), cps - i);
    TokenId found = Vocab::kUnk;
    std::size_t used = 1;
    for (std::size_t len = longest; len >= 1; --len) {
      if (auto id = vocab.id(lexeme.substr(b[i], b[i + len] - b[i]));
          id && !Vocab::is_special(*id)) {
        found = *id;
        used = len;
        break;
      }
    }
    out.push_back(found);
    i += used;
  }
  return out;
}

std::optional<std::size_t> AlignedSequence::sep_position() const {
  for (std::size_t p = 0; p < real_len; ++p)
    if (ids[p] == Vocab::kSep) return p;
  return std::nullopt;
}

namespace {

struct Pieces {
  std::vector<std::vector<TokenId>> per_token;
  std::size_t count(std::size_t upto) const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < upto; ++i) c += per_token[i].size();
    return c;
  }
};

Pieces segment_unit(const CodeUnit& unit, const Vocab& vocab) {
  Pieces p;
  p.per_token.reserve(unit.tokens.size());
  for (const auto& t : unit.tokens) p.per_token.push_back(segment(t.lexeme, vocab));
  return p;
}

void append_tokens(AlignedSequence& seq, const Pieces& pieces, std::size_t keep,
                   std::size_t index_shift) {
  for (std::size_t t = 0; t < keep; ++t) {
    for (TokenId id : pieces.per_token[t]) {
      seq.ids.push_back(id);
      seq.alignment.emplace_back(t + index_shift);
    }
  }
}

void append_special(AlignedSequence& seq, TokenId id) {
  seq.ids.push_back(id);
  seq.alignment.emplace_back(std::nullopt);
}

void pad_to(AlignedSequence& seq, std::size_t max_len) {
  seq.real_len = seq.ids.size();
  while (seq.ids.size() < max_len) append_special(seq, Vocab::kPad);
}

}  // namespace

AlignedSequence encode(const CodeUnit& unit, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw std::invalid_argument("max_len must be at least 3");
  const Pieces pieces = segment_unit(unit, vocab);

  std::size_t keep = 0;
  std::size_t used = 2;
  while (keep < pieces.per_token.size() && used + pieces.per_token[keep].size() <= max_len) {
    used += pieces.per_token[keep].size();
    ++keep;
  }

  AlignedSequence seq;
  seq.unit_id = unit.id;
  seq.ids.reserve(max_len);
  append_special(seq, Vocab::kCls);
  append_tokens(seq, pieces, keep, 0);
  append_special(seq, Vocab::kEos);
  pad_to(seq, max_len);
  return seq;
}

AlignedSequence encode_pair(const CodeUnit& a, const CodeUnit& b, const Vocab& vocab,
                            std::size_t max_len) {
  if (max_len < 3) throw std::invalid_argument("max_len must be at least 3");
  const Pieces pa = segment_unit(a, vocab);
  const Pieces pb = segment_unit(b, vocab);
  std::size_t keep_a = pa.per_token.size();
  std::size_t keep_b = pb.per_token.size();
  std::size_t len_a = pa.count(keep_a);
  std::size_t len_b = pb.count(keep_b);
  const std::size_t budget = max_len - 3;
  while (len_a + len_b > budget) {
    if (len_a >= len_b && keep_a > 0) {
      len_a -= pa.per_token[--keep_a].size();
    } else {
      len_b -= pb.per_token[--keep_b].size();
    }
  }

  AlignedSequence seq;
  seq.unit_id = a.id + "|" + b.id;
  seq.ids.reserve(max_len);
  append_special(seq, Vocab::kCls);
  append_tokens(seq, pa, keep_a, 0);
  append_special(seq, Vocab::kSep);
  append_tokens(seq, pb, keep_b, a.tokens.size());
  append_special(seq, Vocab::kEos);
  pad_to(seq, max_len);
  return seq;
}

SourceWeights aggregate_to_source(const Eigen::Ref<const Eigen::VectorXd>& weights,
                                  const AlignedSequence& seq, std::size_t num_source_tokens) {
  if (static_cast<std::size_t>(weights.size()) != seq.size())
    throw LengthMismatch("weight vector has " + std::to_string(weights.size()) +
                         " entries, sequence has " + std::to_string(seq.size()));
  SourceWeights out;
  out.per_token = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_source_tokens));
  for (std::size_t p = 0; p < seq.size(); ++p) {
    const double w = weights[static_cast<Eigen::Index>(p)];
    if (const auto& src = seq.alignment[p]; src && *src < num_source_tokens) {
      out.per_token[static_cast<Eigen::Index>(*src)] += w;
    } else {
      out.special_mass += w;
    }
  }
  return out;
}

}  // namespace attnguide
