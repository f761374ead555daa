#include "bugloc/tokenize.hpp"

#include <algorithm>
#include <fstream>

#include "bugloc/error.hpp"

namespace bugloc {

namespace {

const char* kSpecials[] = {"<pad>", "<bos>", "<sep>", "<eos>", "<mask>",
                           "<unk>"};

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}
bool is_upper(unsigned char c) { return c >= 'A' && c <= 'Z'; }
bool is_lower(unsigned char c) { return c >= 'a' && c <= 'z'; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

// Bytes >= 0x80 (multi-byte UTF-8) count as letters so non-ASCII words stay
// whole instead of exploding into per-byte punctuation tokens.
bool is_word(unsigned char c) {
  return is_upper(c) || is_lower(c) || is_digit(c) || c >= 0x80;
}

}  // namespace

std::vector<std::string> tokenize_text(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (is_space(c) || c == '_') {
      flush();
      continue;
    }
    if (!is_word(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
      continue;
    }
    if (!cur.empty() && is_upper(c)) {
      const unsigned char prev = static_cast<unsigned char>(cur.back());
      // camelCase boundary: aB and the tail of an acronym run (HTTPServer)
      const bool after_run = is_upper(prev) && i + 1 < text.size() &&
                             is_lower(static_cast<unsigned char>(text[i + 1]));
      if (is_lower(prev) || is_digit(prev) || after_run) flush();
    }
    cur.push_back(static_cast<char>(c));
  }
  flush();
  return out;
}

Vocabulary train_vocabulary(const std::vector<std::string>& corpora,
                            int size) {
  if (size <= Vocabulary::kNumSpecials)
    throw ValidationError("train_vocabulary: size must exceed the 6 specials");
  const TokenDistribution dist = token_frequency(corpora);
  std::vector<std::pair<std::string, std::int64_t>> ranked(dist.counts.begin(),
                                                           dist.counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  for (const char* s : kSpecials) vocab.tokens.emplace_back(s);
  const std::size_t keep = static_cast<std::size_t>(size) -
                           static_cast<std::size_t>(Vocabulary::kNumSpecials);
  for (std::size_t i = 0; i < keep && i < ranked.size(); ++i)
    vocab.tokens.push_back(ranked[i].first);
  for (std::size_t i = 0; i < vocab.tokens.size(); ++i)
    vocab.ids.emplace(vocab.tokens[i], static_cast<int>(i));
  return vocab;
}

TokenSequence encode_pair_tokens(const std::vector<std::string>& bug_tokens,
                                 const std::vector<std::string>& code_tokens,
                                 const Vocabulary& vocab, int max_len) {
  if (max_len < 8)
    throw ValidationError("encode_pair: max_len must be at least 8");
  const std::size_t budget = static_cast<std::size_t>(max_len) - 3;
  const std::size_t bug_keep = std::min(bug_tokens.size(), budget);
  const std::size_t code_keep = std::min(code_tokens.size(), budget - bug_keep);

  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(max_len));
  seq.ids.push_back(Vocabulary::kBos);
  for (std::size_t i = 0; i < bug_keep; ++i)
    seq.ids.push_back(vocab.id_of(bug_tokens[i]));
  seq.sep_index = static_cast<int>(seq.ids.size());
  seq.ids.push_back(Vocabulary::kSep);
  for (std::size_t i = 0; i < code_keep; ++i)
    seq.ids.push_back(vocab.id_of(code_tokens[i]));
  seq.ids.push_back(Vocabulary::kEos);
  seq.ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);

  seq.attention_mask.resize(seq.ids.size());
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    seq.attention_mask[i] = seq.ids[i] == Vocabulary::kPad ? 0 : 1;
  return seq;
}

TokenSequence encode_pair(const std::string& bug_text,
                          const std::string& code_text,
                          const Vocabulary& vocab, int max_len) {
  return encode_pair_tokens(tokenize_text(bug_text), tokenize_text(code_text),
                            vocab, max_len);
}

TokenDistribution token_frequency(const std::vector<std::string>& texts) {
  TokenDistribution dist;
  for (const auto& text : texts)
    for (auto& tok : tokenize_text(text)) {
      ++dist.counts[std::move(tok)];
      ++dist.total;
    }
  return dist;
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary: " + path);
  for (const auto& tok : vocab.tokens) out << tok << '\n';
}

Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read vocabulary: " + path);
  Vocabulary vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!vocab.ids.emplace(line, static_cast<int>(vocab.tokens.size()))
             .second)
      throw ValidationError("vocabulary has a duplicate token: " + line);
    vocab.tokens.push_back(line);
  }
  if (vocab.size() < Vocabulary::kNumSpecials)
    throw ValidationError("vocabulary is missing the special tokens: " + path);
  for (int i = 0; i < Vocabulary::kNumSpecials; ++i)
    if (vocab.tokens[static_cast<std::size_t>(i)] != kSpecials[i])
      throw ValidationError("vocabulary specials are malformed: " + path);
  return vocab;
}

}  // namespace bugloc
