#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bugloc {

/// Shared natural-language + source-code vocabulary. Ids 0-5 are the fixed
/// specials; everything after is corpus tokens ordered by frequency
/// (descending), ties broken lexicographically.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;
  static constexpr int kEos = 3;
  static constexpr int kMask = 4;
  static constexpr int kUnk = 5;
  static constexpr int kNumSpecials = 6;

  std::vector<std::string> tokens;          // id -> token
  std::unordered_map<std::string, int> ids; // token -> id

  int size() const { return static_cast<int>(tokens.size()); }

  /// Id for a token, UNK when out of vocabulary.
  int id_of(const std::string& token) const {
    const auto it = ids.find(token);
    return it == ids.end() ? kUnk : it->second;
  }

  const std::string& token_of(int id) const {
    return tokens[static_cast<std::size_t>(id)];
  }
};

/// Fixed-length encoded (bug report, code) pair:
/// BOS bug... SEP code... EOS PAD...
struct TokenSequence {
  std::vector<int> ids;            // length == max_len
  std::vector<int> attention_mask; // 1 iff ids[i] != PAD
  int sep_index = 0;               // position of the single SEP
};

/// Token frequency table; special tokens never appear.
struct TokenDistribution {
  std::map<std::string, std::int64_t> counts;
  std::int64_t total = 0;
};

/// Split on whitespace and punctuation (each mark its own token), then split
/// camelCase and snake_case identifier segments. Case is preserved;
/// underscores are separators and are dropped.
std::vector<std::string> tokenize_text(std::string_view text);

/// Top (size - 6) corpus tokens by frequency plus the 6 specials.
/// size must be > 6.
Vocabulary train_vocabulary(const std::vector<std::string>& corpora, int size);

/// Encode a (bug report, code) pair into exactly max_len ids. When
/// over-length, the code tail is truncated first, then the bug tail;
/// BOS/SEP/EOS always survive. max_len must be >= 8.
TokenSequence encode_pair(const std::string& bug_text,
                          const std::string& code_text,
                          const Vocabulary& vocab, int max_len);

/// Same, over pre-tokenized inputs (callers that tokenize once and encode
/// many times).
TokenSequence encode_pair_tokens(const std::vector<std::string>& bug_tokens,
                                 const std::vector<std::string>& code_tokens,
                                 const Vocabulary& vocab, int max_len);

/// Aggregate token frequencies over tokenize_text output.
TokenDistribution token_frequency(const std::vector<std::string>& texts);

/// Vocabulary file: one token per line, line number == id; the first six
/// lines are the specials in fixed order.
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

}  // namespace bugloc
