#include "bugloc/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bugloc/autodiff.hpp"
#include "bugloc/error.hpp"
#include "bugloc/optim.hpp"
#include "bugloc/rng.hpp"
#include "checkpoint_io.hpp"

namespace bugloc {

namespace ad = bugloc::ad;
using nlohmann::json;

namespace {

void validate_head_config(const HeadConfig& config) {
  if (config.conv_channels.size() != 3)
    throw ValidationError("HeadConfig: exactly three conv layers required");
  for (const int c : config.conv_channels)
    if (c < 1) throw ValidationError("HeadConfig: conv channels must be > 0");
  if (config.kernel_size < 1 || config.kernel_size % 2 == 0)
    throw ValidationError("HeadConfig: kernel size must be odd and positive");
  if (config.hidden_units < 1)
    throw ValidationError("HeadConfig: hidden units must be > 0");
}

std::vector<std::pair<std::string, std::vector<std::int64_t>>> head_directory(
    const HeadConfig& config, int hidden_dim) {
  const std::int64_t k = config.kernel_size;
  const std::int64_t c1 = config.conv_channels[0];
  const std::int64_t c2 = config.conv_channels[1];
  const std::int64_t c3 = config.conv_channels[2];
  const std::int64_t u = config.hidden_units;
  return {
      {"conv1.w", {c1, hidden_dim, k}}, {"conv1.b", {c1}},
      {"conv2.w", {c2, c1, k}},         {"conv2.b", {c2}},
      {"conv3.w", {c3, c2, k}},         {"conv3.b", {c3}},
      {"fc1.w", {c3, u}},               {"fc1.b", {u}},
      {"fc2.w", {u, 1}},                {"fc2.b", {1}},
  };
}

int head_hidden_dim(const HeadState& head) {
  return static_cast<int>(head.params.at("conv1.w").dim(1));
}

VarMap head_leaves(const HeadState& head, bool requires_grad) {
  VarMap leaves;
  for (const auto& name : head.params.names())
    leaves.emplace(name, ad::leaf(head.params.at(name), requires_grad));
  return leaves;
}

/// Conv stack over the token axis down to one logit per batch row [B, 1].
/// PAD rows are zeroed before the first convolution.
ad::Var head_logits(const VarMap& leaves, const ad::Var& hidden,
                    const Tensor& mask) {
  const ad::Var masked = ad::mul_lastbroadcast(hidden, ad::constant(mask));
  ad::Var x = masked;
  for (const char* stage : {"conv1", "conv2", "conv3"}) {
    x = ad::relu(ad::conv1d_same(x, leaves.at(std::string(stage) + ".w"),
                                 leaves.at(std::string(stage) + ".b")));
  }
  const ad::Var pooled = ad::maxpool_time(x);
  const ad::Var h1 = ad::relu(ad::add_rowbias(
      ad::matmul(pooled, leaves.at("fc1.w")), leaves.at("fc1.b")));
  return ad::add_rowbias(ad::matmul(h1, leaves.at("fc2.w")),
                         leaves.at("fc2.b"));
}

double squash(double z) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return std::clamp(p, std::numeric_limits<double>::min(),
                    std::nextafter(1.0, 0.0));
}

std::string bug_key(const BugRecord& bug) {
  return bug.project_id + "/" + bug.bug_id;
}

}  // namespace

HeadState init_head(const HeadConfig& config, int hidden_dim) {
  validate_head_config(config);
  if (hidden_dim < 1)
    throw ValidationError("init_head: hidden_dim must be > 0");
  HeadState head;
  head.config = config;
  Rng rng(derive_seed(config.seed, "head-init"));
  for (const auto& [name, shape] : head_directory(config, hidden_dim)) {
    Tensor t(shape);
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0) {
      // scaled for the ReLU stages: sd = sqrt(2 / fan_in)
      std::int64_t fan_in = 1;
      for (std::size_t d = 1; d < t.shape().size(); ++d) fan_in *= t.dim(d);
      if (t.rank() == 2) fan_in = t.dim(0);
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = rng.normal(0.0, sd);
    }
    head.params.add(name, std::move(t));
  }
  return head;
}

Tensor head_forward(const HeadState& head, const EncodedBatch& encoded) {
  if (encoded.hidden.rank() != 3 ||
      encoded.hidden.dim(2) != head_hidden_dim(head))
    throw ValidationError("head_forward: encoder hidden size mismatch");
  const VarMap leaves = head_leaves(head, false);
  const ad::Var logits = head_logits(
      leaves, ad::constant(encoded.hidden), encoded.mask);
  const Tensor& z = ad::val(logits);
  Tensor probs({encoded.hidden.dim(0)});
  for (std::int64_t i = 0; i < probs.numel(); ++i) probs[i] = squash(z[i]);
  return probs;
}

std::pair<HeadState, TrainingLog> train_head(const EncoderState& encoder,
                                             const HeadConfig& head_config,
                                             const DatasetManifest& examples,
                                             const Vocabulary& vocab,
                                             int epochs, int batch_size,
                                             double learning_rate,
                                             std::uint64_t seed) {
  if (epochs < 1) throw ValidationError("train_head: epochs must be >= 1");
  if (batch_size < 1)
    throw ValidationError("train_head: batch_size must be >= 1");
  if (examples.records.empty())
    throw ValidationError("train_head: no examples");
  bool any_pos = false, any_neg = false;
  for (const auto& rec : examples.records)
    (rec.label == 1 ? any_pos : any_neg) = true;
  if (!any_pos || !any_neg)
    throw ValidationError("train_head: both labels must be present");

  const std::int64_t N = static_cast<std::int64_t>(examples.records.size());
  const std::int64_t L = encoder.config.max_len;
  const std::int64_t H = encoder.config.hidden_dim;

  // one frozen pass over every example, in fixed-size slices
  Tensor hidden_all({N, L, H});
  Tensor mask_all({N, L});
  std::vector<double> labels(static_cast<std::size_t>(N));
  {
    std::vector<TokenSequence> seqs;
    seqs.reserve(static_cast<std::size_t>(N));
    for (const auto& rec : examples.records)
      seqs.push_back(encode_pair(bug_query_text(rec.bug), rec.file_content,
                                 vocab, encoder.config.max_len));
    for (std::int64_t at = 0; at < N; at += batch_size) {
      const std::int64_t stop = std::min(N, at + batch_size);
      const std::vector<TokenSequence> chunk(
          seqs.begin() + at, seqs.begin() + stop);
      const EncodedBatch out = forward(encoder, chunk);
      std::copy_n(out.hidden.data(), out.hidden.numel(),
                  hidden_all.data() + at * L * H);
      std::copy_n(out.mask.data(), out.mask.numel(),
                  mask_all.data() + at * L);
    }
    for (std::int64_t i = 0; i < N; ++i)
      labels[static_cast<std::size_t>(i)] =
          static_cast<double>(examples.records[static_cast<std::size_t>(i)].label);
  }

  HeadState head = init_head(head_config, static_cast<int>(H));
  AdamOptimizer adam({learning_rate, 0.9, 0.999, 1e-8});
  const std::uint64_t shuffle_base = derive_seed(seed, "head-shuffle");
  TrainingLog log;
  std::int64_t step = 0;

  std::vector<std::size_t> order(static_cast<std::size_t>(N));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(shuffle_base, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    std::vector<double> losses;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop = std::min(
          order.size(), at + static_cast<std::size_t>(batch_size));
      const std::int64_t bn = static_cast<std::int64_t>(stop - at);
      Tensor hidden({bn, L, H});
      Tensor mask({bn, L});
      Tensor targets({bn, 1});
      for (std::int64_t b = 0; b < bn; ++b) {
        const std::int64_t src =
            static_cast<std::int64_t>(order[at + static_cast<std::size_t>(b)]);
        std::copy_n(hidden_all.data() + src * L * H, L * H,
                    hidden.data() + b * L * H);
        std::copy_n(mask_all.data() + src * L, L, mask.data() + b * L);
        targets[b] = labels[static_cast<std::size_t>(src)];
      }
      const VarMap leaves = head_leaves(head, true);
      const ad::Var logits =
          head_logits(leaves, ad::constant(std::move(hidden)), mask);
      const ad::Var loss = ad::bce_logits(logits, std::move(targets));
      ad::backward(loss);
      const double value = ad::val(loss)[0];
      if (!std::isfinite(value))
        throw Error("train_head: non-finite loss at step " +
                    std::to_string(step + 1));
      std::map<std::string, Tensor> grads;
      for (const auto& [name, var] : leaves)
        if (!ad::grad(var).empty()) grads.emplace(name, ad::grad(var));
      adam.step(head.params, grads);
      ++step;
      log.steps.push_back({step, epoch, "head", value});
      losses.push_back(value);
    }
    log.epoch_mean_loss.push_back(
        std::accumulate(losses.begin(), losses.end(), 0.0) /
        static_cast<double>(losses.size()));
  }
  return {std::move(head), std::move(log)};
}

RankedResult rank_files(
    const EncoderState& encoder, const HeadState& head, const BugRecord& bug,
    const std::vector<std::pair<std::string, std::string>>& candidates,
    const Vocabulary& vocab, std::set<std::string> relevant) {
  if (candidates.empty())
    throw ValidationError("rank_files: empty candidate set");
  const std::string query = bug_query_text(bug);
  RankedResult result;
  result.bug_id = bug_key(bug);
  result.relevant = std::move(relevant);
  for (const auto& path : result.relevant) {
    const bool present =
        std::any_of(candidates.begin(), candidates.end(),
                    [&](const auto& c) { return c.first == path; });
    if (!present)
      throw ValidationError("rank_files: relevant path " + path +
                            " is not a candidate");
  }

  constexpr std::size_t kChunk = 32;
  for (std::size_t at = 0; at < candidates.size(); at += kChunk) {
    const std::size_t stop = std::min(candidates.size(), at + kChunk);
    std::vector<TokenSequence> batch;
    for (std::size_t i = at; i < stop; ++i)
      batch.push_back(encode_pair(query, candidates[i].second, vocab,
                                  encoder.config.max_len));
    const Tensor probs = head_forward(head, forward(encoder, batch));
    for (std::size_t i = at; i < stop; ++i)
      result.ranking.emplace_back(candidates[i].first,
                                  probs[static_cast<std::int64_t>(i - at)]);
  }
  std::sort(result.ranking.begin(), result.ranking.end(),
            [](const auto& a, const auto& b) {
              if (a.second != b.second) return a.second > b.second;
              return a.first < b.first;
            });
  return result;
}

void save_head_checkpoint(const HeadState& head,
                          const std::filesystem::path& path) {
  const json config{{"conv_channels", head.config.conv_channels},
                    {"kernel_size", head.config.kernel_size},
                    {"hidden_units", head.config.hidden_units},
                    {"seed", head.config.seed}};
  ckpt::save(path.string(), "head", config, head.params);
}

HeadState load_head_checkpoint(const std::filesystem::path& path) {
  ckpt::Loaded loaded = ckpt::load(path.string(), "head");
  HeadState head;
  try {
    head.config.conv_channels =
        loaded.config.at("conv_channels").get<std::vector<int>>();
    head.config.kernel_size = loaded.config.at("kernel_size");
    head.config.hidden_units = loaded.config.at("hidden_units");
    head.config.seed = loaded.config.at("seed");
  } catch (const json::exception& e) {
    throw ValidationError("load_head_checkpoint: " + std::string(e.what()));
  }
  validate_head_config(head.config);
  head.params = std::move(loaded.params);

  const int hidden_dim =
      head.params.contains("conv1.w")
          ? static_cast<int>(head.params.at("conv1.w").dim(1))
          : 0;
  const auto expect = head_directory(head.config, hidden_dim);
  const auto& names = head.params.names();
  if (names.size() != expect.size())
    throw ValidationError("load_head_checkpoint: tensor directory mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] != expect[i].first ||
        head.params.at(names[i]).shape() != expect[i].second)
      throw ValidationError("load_head_checkpoint: tensor " + names[i] +
                            " does not match the configuration");
  }
  return head;
}

void save_ranked_results(const std::vector<RankedResult>& results,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_ranked_results: cannot open " + path.string());
  for (const auto& r : results) {
    json ranking = json::array();
    for (const auto& [file, score] : r.ranking)
      ranking.push_back({{"path", file}, {"score", score}});
    const json line{{"bug_id", r.bug_id},
                    {"ranking", std::move(ranking)},
                    {"relevant", r.relevant}};
    out << line.dump() << '\n';
  }
}

std::vector<RankedResult> load_ranked_results(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_ranked_results: cannot open " + path.string());
  std::vector<RankedResult> results;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      RankedResult r;
      r.bug_id = j.at("bug_id");
      for (const auto& entry : j.at("ranking"))
        r.ranking.emplace_back(entry.at("path"), entry.at("score"));
      for (const auto& p : j.at("relevant"))
        r.relevant.insert(p.get<std::string>());
      results.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ValidationError("load_ranked_results: line " +
                            std::to_string(line_no) + ": " + e.what());
    }
  }
  return results;
}

}  // namespace bugloc
