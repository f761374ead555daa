#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bugloc/error.hpp"
#include "bugloc/tokenize.hpp"

using namespace bugloc;

TEST_CASE("tokenize_text splits punctuation, camelCase and snake_case") {
  CHECK(tokenize_text("getFooBar(x)") ==
        std::vector<std::string>{"get", "Foo", "Bar", "(", "x", ")"});
  CHECK(tokenize_text("") == std::vector<std::string>{});
  CHECK(tokenize_text("foo_bar") == std::vector<std::string>{"foo", "bar"});
  CHECK(tokenize_text("HTTPServer") ==
        std::vector<std::string>{"HTTP", "Server"});
  CHECK(tokenize_text("parseXMLDocument2Fast") ==
        std::vector<std::string>{"parse", "XML", "Document2", "Fast"});
  CHECK(tokenize_text("a.b->c") ==
        std::vector<std::string>{"a", ".", "b", "-", ">", "c"});
  CHECK(tokenize_text("  \t\nfoo   bar ") ==
        std::vector<std::string>{"foo", "bar"});
  // case is preserved
  CHECK(tokenize_text("Foo foo FOO") ==
        std::vector<std::string>{"Foo", "foo", "FOO"});
  // multi-byte UTF-8 stays a single word token
  CHECK(tokenize_text("caf\xc3\xa9 bar") ==
        std::vector<std::string>{"caf\xc3\xa9", "bar"});
}

TEST_CASE("train_vocabulary ranks by frequency then lexicographically") {
  const Vocabulary v = train_vocabulary({"a a b"}, 8);
  REQUIRE(v.size() == 8);
  CHECK(v.token_of(0) == "<pad>");
  CHECK(v.token_of(5) == "<unk>");
  CHECK(v.token_of(6) == "a");
  CHECK(v.token_of(7) == "b");
  CHECK(v.id_of("a") == 6);
  CHECK(v.id_of("zzz") == Vocabulary::kUnk);

  // tie on frequency -> lexicographic
  const Vocabulary t = train_vocabulary({"b a"}, 8);
  CHECK(t.token_of(6) == "a");
  CHECK(t.token_of(7) == "b");

  CHECK_THROWS_AS(train_vocabulary({"a"}, 6), ValidationError);
}

TEST_CASE("vocabulary construction is corpus-order invariant") {
  const Vocabulary a = train_vocabulary({"x y", "y z z"}, 10);
  const Vocabulary b = train_vocabulary({"y z z", "x y"}, 10);
  CHECK(a.tokens == b.tokens);
}

TEST_CASE("encode_pair layout and truncation") {
  std::string bug, code;
  for (int i = 0; i < 10; ++i) bug += "b" + std::to_string(i) + " ";
  for (int i = 0; i < 200; ++i) code += "c" + std::to_string(i) + " ";
  const Vocabulary v = train_vocabulary({bug, code}, 600);

  const TokenSequence seq = encode_pair(bug, code, v, 64);
  REQUIRE(seq.ids.size() == 64);
  CHECK(seq.ids[0] == Vocabulary::kBos);
  CHECK(seq.sep_index == 11);  // BOS + 10 intact bug tokens
  CHECK(seq.ids[11] == Vocabulary::kSep);
  // code truncated to 64 - (10 + 3) = 51 tokens, then EOS closes the pair
  CHECK(seq.ids[63] == Vocabulary::kEos);
  int seps = 0, pads = 0;
  for (const int id : seq.ids) {
    seps += id == Vocabulary::kSep;
    pads += id == Vocabulary::kPad;
  }
  CHECK(seps == 1);
  CHECK(pads == 0);
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    CHECK(seq.attention_mask[i] == (seq.ids[i] == Vocabulary::kPad ? 0 : 1));
}

TEST_CASE("encode_pair degenerate cases") {
  const Vocabulary v = train_vocabulary({"a b c"}, 16);
  const TokenSequence seq = encode_pair("a", "", v, 8);
  CHECK(seq.ids[0] == Vocabulary::kBos);
  CHECK(seq.ids[seq.sep_index] == Vocabulary::kSep);
  CHECK(seq.ids[seq.sep_index + 1] == Vocabulary::kEos);
  CHECK(seq.ids.back() == Vocabulary::kPad);
  CHECK_THROWS_AS(encode_pair("a", "b", v, 4), ValidationError);
}

TEST_CASE("encode_pair output length is always max_len") {
  const Vocabulary v = train_vocabulary({"w x y z"}, 12);
  for (const int bug_n : {0, 3, 30}) {
    for (const int code_n : {0, 5, 90}) {
      std::string bug(static_cast<std::size_t>(bug_n * 2), 'w');
      std::string code;
      for (int i = 0; i < code_n; ++i) code += "x ";
      const TokenSequence s = encode_pair(bug, code, v, 24);
      CHECK(s.ids.size() == 24);
      CHECK(s.attention_mask.size() == 24);
    }
  }
}

TEST_CASE("in-vocabulary round trip is stable") {
  const std::string bug = "Crash in FooBar handler";
  const std::string code = "void fooBar() { int x = 1; }";
  const Vocabulary v = train_vocabulary({bug, code}, 64);
  const TokenSequence first = encode_pair(bug, code, v, 32);
  // decode the non-special ids back to text, re-encode, compare
  std::vector<std::string> bug_toks, code_toks;
  bool after_sep = false;
  for (const int id : first.ids) {
    if (id == Vocabulary::kSep) {
      after_sep = true;
      continue;
    }
    if (id < Vocabulary::kNumSpecials) continue;
    (after_sep ? code_toks : bug_toks).push_back(v.token_of(id));
  }
  const TokenSequence second = encode_pair_tokens(bug_toks, code_toks, v, 32);
  CHECK(first.ids == second.ids);
}

TEST_CASE("token_frequency counts per surface form") {
  const TokenDistribution d = token_frequency({"a a b"});
  CHECK(d.total == 3);
  CHECK(d.counts.at("a") == 2);
  CHECK(d.counts.at("b") == 1);

  CHECK(token_frequency({}).total == 0);

  const TokenDistribution c = token_frequency({"x X"});
  CHECK(c.counts.at("x") == 1);
  CHECK(c.counts.at("X") == 1);
}

TEST_CASE("vocabulary file round trip") {
  const Vocabulary v = train_vocabulary({"alpha beta beta gamma"}, 10);
  const std::string path = "vocab_probe.txt";
  save_vocabulary(v, path);
  const Vocabulary r = load_vocabulary(path);
  CHECK(r.tokens == v.tokens);
  CHECK(r.id_of("beta") == v.id_of("beta"));
  std::remove(path.c_str());

  {
    std::ofstream bad("vocab_bad.txt", std::ios::binary);
    bad << "<pad>\nnope\n";
  }
  CHECK_THROWS_AS(load_vocabulary("vocab_bad.txt"), ValidationError);
  std::remove("vocab_bad.txt");
}
