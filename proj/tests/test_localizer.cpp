#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "bugloc/error.hpp"
#include "bugloc/localizer.hpp"
#include "bugloc/rng.hpp"

using namespace bugloc;

namespace {

EncoderConfig small_encoder(int vocab_size, int max_len = 32) {
  EncoderConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.hidden_dim = 16;
  c.ffn_dim = 32;
  c.max_len = max_len;
  c.vocab_size = vocab_size;
  c.seed = 5;
  return c;
}

HeadConfig small_head() {
  HeadConfig c;
  c.conv_channels = {8, 8, 8};
  c.kernel_size = 3;
  c.hidden_units = 8;
  c.seed = 13;
  return c;
}

EncodedBatch random_batch(std::int64_t B, std::int64_t L, std::int64_t H,
                          std::uint64_t seed, std::int64_t pad_tail = 0) {
  EncodedBatch batch;
  batch.hidden = Tensor({B, L, H});
  batch.pooled = Tensor({B, H});
  batch.mask = Tensor({B, L}, 1.0);
  Rng rng(seed);
  for (std::int64_t i = 0; i < batch.hidden.numel(); ++i)
    batch.hidden[i] = rng.normal();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = L - pad_tail; l < L; ++l) batch.mask[b * L + l] = 0.0;
  return batch;
}

void zero_params(HeadState& head) {
  for (const auto& name : head.params.names()) {
    Tensor& t = head.params.at(name);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
  }
}

LocalizationExample make_example(int number, const std::string& content,
                                 int label) {
  LocalizationExample ex;
  ex.bug.project_id = "P";
  ex.bug.bug_id = "P-" + std::to_string(number);
  ex.bug.title = "widget breaks on save " + std::to_string(number);
  ex.bug.description = "saving the widget fails";
  ex.bug.created_at = 1600000000 + number;
  ex.bug.status = BugRecord::Status::fixed;
  ex.file_path = "src/File" + std::to_string(number) + ".java";
  ex.file_content = content;
  ex.label = label;
  return ex;
}

/// Positives mention a marker token that negatives never contain.
DatasetManifest separable_dataset(int n_each) {
  DatasetManifest ds;
  ds.name = "separable";
  ds.projects = {"P"};
  ds.seed = 1;
  for (int i = 0; i < n_each; ++i) {
    ds.records.push_back(make_example(
        i, "class Widget { void saveThing() { flushBuffers(); } }", 1));
    ds.records.push_back(make_example(
        100 + i, "class Other { int count() { return total; } }", 0));
  }
  return ds;
}

std::vector<std::string> dataset_texts(const DatasetManifest& ds) {
  std::vector<std::string> texts;
  for (const auto& rec : ds.records) {
    texts.push_back(bug_query_text(rec.bug));
    texts.push_back(rec.file_content);
  }
  return texts;
}

}  // namespace

TEST_CASE("init_head lays out the conv and perceptron stack") {
  const HeadState head = init_head(small_head(), 16);
  CHECK(head.params.at("conv1.w").shape() ==
        std::vector<std::int64_t>({8, 16, 3}));
  CHECK(head.params.at("conv3.w").shape() ==
        std::vector<std::int64_t>({8, 8, 3}));
  CHECK(head.params.at("fc1.w").shape() == std::vector<std::int64_t>({8, 8}));
  CHECK(head.params.at("fc2.w").shape() == std::vector<std::int64_t>({8, 1}));
  CHECK(head.params.at("conv1.b")[0] == 0.0);
  CHECK(init_head(small_head(), 16).params.content_hash() ==
        head.params.content_hash());
  HeadConfig reseeded = small_head();
  reseeded.seed = 14;
  CHECK(init_head(reseeded, 16).params.content_hash() !=
        head.params.content_hash());

  HeadConfig two_layers = small_head();
  two_layers.conv_channels = {8, 8};
  CHECK_THROWS_AS(init_head(two_layers, 16), ValidationError);
  HeadConfig even_kernel = small_head();
  even_kernel.kernel_size = 4;
  CHECK_THROWS_AS(init_head(even_kernel, 16), ValidationError);
  HeadConfig zero_units = small_head();
  zero_units.hidden_units = 0;
  CHECK_THROWS_AS(init_head(zero_units, 16), ValidationError);
}

TEST_CASE("head_forward squashes into the open unit interval") {
  const HeadState head = init_head(small_head(), 16);
  const EncodedBatch batch = random_batch(4, 12, 16, 3, 2);
  const Tensor probs = head_forward(head, batch);
  REQUIRE(probs.shape() == std::vector<std::int64_t>({4}));
  for (std::int64_t i = 0; i < probs.numel(); ++i) {
    CHECK(probs[i] > 0.0);
    CHECK(probs[i] < 1.0);
  }

  // all-zero weights leave the logit at zero exactly
  HeadState zeroed = init_head(small_head(), 16);
  zero_params(zeroed);
  const Tensor half = head_forward(zeroed, batch);
  for (std::int64_t i = 0; i < half.numel(); ++i) CHECK(half[i] == 0.5);

  CHECK_THROWS_AS(head_forward(head, random_batch(2, 12, 8, 3)),
                  ValidationError);
}

TEST_CASE("head_forward is row-deterministic and ignores PAD features") {
  const HeadState head = init_head(small_head(), 16);
  EncodedBatch batch = random_batch(2, 10, 16, 7, 3);
  // make row 1 a copy of row 0
  for (std::int64_t i = 0; i < 10 * 16; ++i)
    batch.hidden[10 * 16 + i] = batch.hidden[i];
  for (std::int64_t l = 0; l < 10; ++l) batch.mask[10 + l] = batch.mask[l];
  const Tensor probs = head_forward(head, batch);
  CHECK(probs[0] == probs[1]);

  // scribble on masked positions only
  EncodedBatch scribbled = batch;
  for (std::int64_t l = 7; l < 10; ++l)
    for (std::int64_t j = 0; j < 16; ++j)
      scribbled.hidden[l * 16 + j] = 99.0;
  const Tensor again = head_forward(head, scribbled);
  CHECK(again[0] == probs[0]);
}

TEST_CASE("train_head fits a separable signal with a frozen encoder") {
  const DatasetManifest ds = separable_dataset(12);
  const Vocabulary vocab = train_vocabulary(dataset_texts(ds), 96);
  const EncoderConfig enc_config =
      small_encoder(static_cast<int>(vocab.size()));
  const EncoderState encoder = init_encoder(enc_config);
  const std::uint64_t frozen_hash = encoder.params.content_hash();

  auto [head, log] =
      train_head(encoder, small_head(), ds, vocab, 6, 8, 1e-3, 21);
  CHECK(encoder.params.content_hash() == frozen_hash);
  REQUIRE(log.epoch_mean_loss.size() == 6);
  CHECK(log.epoch_mean_loss.back() < log.epoch_mean_loss.front());
  for (const auto& s : log.steps) {
    CHECK(s.objective == "head");
    CHECK(std::isfinite(s.loss));
  }

  auto [head2, log2] =
      train_head(encoder, small_head(), ds, vocab, 6, 8, 1e-3, 21);
  CHECK(log2.steps.size() == log.steps.size());
  CHECK(head2.params.content_hash() == head.params.content_hash());

  // the fitted head separates the classes it saw
  std::vector<std::pair<std::string, std::string>> candidates{
      {"a.java", ds.records[0].file_content},
      {"b.java", ds.records[1].file_content}};
  const RankedResult ranked =
      rank_files(encoder, head, ds.records[0].bug, candidates, vocab);
  CHECK(ranked.ranking[0].first == "a.java");
}

TEST_CASE("train_head validates its inputs") {
  DatasetManifest ds = separable_dataset(3);
  const Vocabulary vocab = train_vocabulary(dataset_texts(ds), 96);
  const EncoderState encoder =
      init_encoder(small_encoder(static_cast<int>(vocab.size())));
  CHECK_THROWS_AS(
      train_head(encoder, small_head(), DatasetManifest{}, vocab),
      ValidationError);
  DatasetManifest positives_only = ds;
  std::erase_if(positives_only.records,
                [](const LocalizationExample& e) { return e.label == 0; });
  CHECK_THROWS_AS(train_head(encoder, small_head(), positives_only, vocab),
                  ValidationError);
  CHECK_THROWS_AS(train_head(encoder, small_head(), ds, vocab, 0),
                  ValidationError);
}

TEST_CASE("rank_files orders by score with a path tie-break") {
  DatasetManifest ds = separable_dataset(1);
  const Vocabulary vocab = train_vocabulary(dataset_texts(ds), 96);
  const EncoderState encoder =
      init_encoder(small_encoder(static_cast<int>(vocab.size())));
  HeadState head = init_head(small_head(), 16);
  zero_params(head);  // every score is exactly 0.5

  std::vector<std::pair<std::string, std::string>> candidates{
      {"z.java", "class Z {}"},
      {"a.java", "class A {}"},
      {"m.java", "class M {}"}};
  const RankedResult r = rank_files(encoder, head, ds.records[0].bug,
                                    candidates, vocab, {"m.java"});
  REQUIRE(r.ranking.size() == 3);
  CHECK(r.ranking[0].first == "a.java");
  CHECK(r.ranking[1].first == "m.java");
  CHECK(r.ranking[2].first == "z.java");
  CHECK(r.relevant.count("m.java") == 1);
  CHECK(r.bug_id == "P/P-0");

  // a permutation of the candidates, and reproducible
  const RankedResult again = rank_files(encoder, head, ds.records[0].bug,
                                        candidates, vocab, {"m.java"});
  CHECK(again.ranking == r.ranking);

  CHECK_THROWS_AS(rank_files(encoder, head, ds.records[0].bug, {}, vocab),
                  ValidationError);
  CHECK_THROWS_AS(rank_files(encoder, head, ds.records[0].bug, candidates,
                             vocab, {"missing.java"}),
                  ValidationError);

  const RankedResult solo = rank_files(encoder, head, ds.records[0].bug,
                                       {{"only.java", "class Only {}"}},
                                       vocab);
  REQUIRE(solo.ranking.size() == 1);
  CHECK(solo.ranking[0].first == "only.java");
}

TEST_CASE("head checkpoints round trip bit exactly") {
  const HeadState head = init_head(small_head(), 16);
  const std::string path = "head_probe.ckpt";
  save_head_checkpoint(head, path);
  const HeadState loaded = load_head_checkpoint(path);
  CHECK(loaded.config == head.config);
  CHECK(loaded.params.content_hash() == head.params.content_hash());
  std::remove(path.c_str());

  // an encoder checkpoint is rejected by kind
  const EncoderState encoder = init_encoder(small_encoder(32));
  save_checkpoint(encoder, path);
  CHECK_THROWS_AS(load_head_checkpoint(path), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("ranked results survive the JSON-lines round trip") {
  std::vector<RankedResult> results;
  RankedResult a;
  a.bug_id = "P/P-1";
  a.ranking = {{"x.java", 0.875}, {"y.java", 1.0 / 3.0}};
  a.relevant = {"y.java"};
  RankedResult b;
  b.bug_id = "Q/Q-2";
  b.ranking = {{"z.java", 0.015625}};
  results.push_back(a);
  results.push_back(b);

  const std::string path = "rankings_probe.jsonl";
  save_ranked_results(results, path);
  const std::vector<RankedResult> loaded = load_ranked_results(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].bug_id == "P/P-1");
  CHECK(loaded[0].ranking == a.ranking);  // doubles survive exactly
  CHECK(loaded[0].relevant == a.relevant);
  CHECK(loaded[1].ranking == b.ranking);

  // serialization is byte deterministic
  const std::string path2 = "rankings_probe2.jsonl";
  save_ranked_results(results, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  std::remove(path.c_str());
  std::remove(path2.c_str());

  CHECK_THROWS_AS(load_ranked_results("no_such_file.jsonl"), Error);
}
