#include "bugloc/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bugloc/autodiff.hpp"
#include "bugloc/error.hpp"
#include "bugloc/optim.hpp"
#include "bugloc/rng.hpp"

namespace bugloc {

namespace ad = bugloc::ad;
using nlohmann::json;

namespace {

std::vector<int> maskable_positions(const TokenSequence& seq) {
  std::vector<int> out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    if (seq.ids[i] >= Vocabulary::kNumSpecials)
      out.push_back(static_cast<int>(i));
  return out;
}

int eos_position(const TokenSequence& seq) {
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    if (seq.ids[i] == Vocabulary::kEos) return static_cast<int>(i);
  throw Error("pretrain: sequence has no EOS token");
}

/// Like make_masking_plan but an empty plan instead of an error; the training
/// loop tolerates sequences too short to mask.
MaskingPlan plan_or_empty(const TokenSequence& seq, double mask_rate,
                          std::uint64_t seed, int vocab_size) {
  const std::vector<int> maskable = maskable_positions(seq);
  const int k =
      static_cast<int>(std::floor(mask_rate * static_cast<double>(maskable.size())));
  if (k < 1) return {};
  return make_masking_plan(seq, mask_rate, seed, vocab_size);
}

void apply_plan(TokenSequence& seq, const MaskingPlan& plan) {
  for (const int pos : plan.selected) {
    const auto action = plan.action.at(pos);
    if (action != MaskingPlan::Action::keep)
      seq.ids[static_cast<std::size_t>(pos)] = plan.replacement.at(pos);
  }
}

std::map<std::string, Tensor> collect_grads(const VarMap& leaves) {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, var] : leaves)
    if (!ad::grad(var).empty()) grads.emplace(name, ad::grad(var));
  return grads;
}

VarMap head_leaves(const ParamStore& head) {
  VarMap leaves;
  for (const auto& name : head.names())
    leaves.emplace(name, ad::leaf(head.at(name), true));
  return leaves;
}

/// Splits on newlines; a trailing newline does not create an extra line.
std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string::npos) {
      if (start < text.size()) lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

enum class DiffOp { common, del, ins };

/// Line-level diff via longest common subsequence; deletions precede
/// insertions inside a hunk.
std::vector<std::pair<DiffOp, std::size_t>> line_diff(
    const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<std::int32_t>> lcs(n + 1,
                                             std::vector<std::int32_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t j = m; j-- > 0;)
      lcs[i][j] = a[i] == b[j] ? lcs[i + 1][j + 1] + 1
                               : std::max(lcs[i + 1][j], lcs[i][j + 1]);
  std::vector<std::pair<DiffOp, std::size_t>> ops;
  std::size_t i = 0, j = 0;
  while (i < n && j < m) {
    if (a[i] == b[j]) {
      ops.emplace_back(DiffOp::common, i);
      ++i, ++j;
    } else if (lcs[i + 1][j] >= lcs[i][j + 1]) {
      ops.emplace_back(DiffOp::del, i++);
    } else {
      ops.emplace_back(DiffOp::ins, j++);
    }
  }
  while (i < n) ops.emplace_back(DiffOp::del, i++);
  while (j < m) ops.emplace_back(DiffOp::ins, j++);
  return ops;
}

struct PretrainedSequence {
  TokenSequence seq;
  std::size_t record_index = 0;
};

struct QaInstance {
  TokenSequence seq;
  QaTarget target;
};

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) /
         static_cast<double>(xs.size());
}

}  // namespace

MaskingPlan make_masking_plan(const TokenSequence& seq, double mask_rate,
                              std::uint64_t seed, int vocab_size) {
  if (mask_rate <= 0.0 || mask_rate >= 1.0)
    throw ValidationError("make_masking_plan: mask_rate must be in (0, 1)");
  if (vocab_size <= Vocabulary::kNumSpecials)
    throw ValidationError("make_masking_plan: vocabulary has no real tokens");
  const std::vector<int> maskable = maskable_positions(seq);
  if (maskable.empty())
    throw ValidationError("make_masking_plan: no maskable position");
  const int k = static_cast<int>(
      std::floor(mask_rate * static_cast<double>(maskable.size())));
  if (k < 1)
    throw ValidationError("make_masking_plan: selection rounds down to zero");

  Rng rng(seed);
  const std::vector<std::size_t> picks = rng.sample_without_replacement(
      maskable.size(), static_cast<std::size_t>(k));
  const int n_mask = static_cast<int>(std::floor(0.8 * k));
  const int n_rand = static_cast<int>(std::floor(0.1 * k));

  MaskingPlan plan;
  for (int i = 0; i < k; ++i) {
    const int pos = maskable[picks[static_cast<std::size_t>(i)]];
    plan.selected.push_back(pos);
    if (i < n_mask) {
      plan.action[pos] = MaskingPlan::Action::mask;
      plan.replacement[pos] = Vocabulary::kMask;
    } else if (i < n_mask + n_rand) {
      plan.action[pos] = MaskingPlan::Action::random;
      plan.replacement[pos] =
          Vocabulary::kNumSpecials +
          static_cast<int>(rng.below(static_cast<std::uint64_t>(
              vocab_size - Vocabulary::kNumSpecials)));
    } else {
      plan.action[pos] = MaskingPlan::Action::keep;
    }
  }
  std::sort(plan.selected.begin(), plan.selected.end());
  return plan;
}

MlmResult mlm_loss(const EncoderState& state,
                   const std::vector<TokenSequence>& batch,
                   const std::vector<MaskingPlan>& plans) {
  if (batch.size() != plans.size())
    throw ValidationError("mlm_loss: one plan per sequence required");
  const std::int64_t L = state.config.max_len;
  const std::int64_t H = state.config.hidden_dim;

  std::vector<TokenSequence> corrupted = batch;
  std::vector<std::int64_t> picked;
  std::vector<std::int64_t> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    apply_plan(corrupted[b], plans[b]);
    for (const int pos : plans[b].selected) {
      picked.push_back(static_cast<std::int64_t>(b) * L + pos);
      targets.push_back(batch[b].ids[static_cast<std::size_t>(pos)]);
    }
  }
  if (picked.empty())
    throw ValidationError("mlm_loss: no selected position in the batch");

  const VarMap leaves = make_leaves(state, true);
  const EncoderGraph g = encoder_graph(leaves, state.config, corrupted);
  const ad::Var flat = ad::reshape(
      g.hidden, {static_cast<std::int64_t>(batch.size()) * L, H});
  const ad::Var picked_rows = ad::gather_rows(flat, picked);
  // vocabulary projection tied to the token embedding
  const ad::Var logits =
      ad::matmul(picked_rows, leaves.at("tok_emb"), false, true);
  const ad::Var loss = ad::cross_entropy_logits(logits, targets);
  ad::backward(loss);

  MlmResult result;
  result.loss = ad::val(loss)[0];
  result.grads = collect_grads(leaves);
  return result;
}

ParamStore init_rtd_head(int hidden_dim, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w({hidden_dim, 1});
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, 0.02);
  ParamStore head;
  head.add("rtd.w", std::move(w));
  head.add("rtd.b", Tensor({1}));
  return head;
}

ElectraResult electra_step(const EncoderState& generator,
                           const EncoderState& discriminator,
                           const ParamStore& rtd_head,
                           const std::vector<TokenSequence>& batch,
                           const std::vector<MaskingPlan>& plans,
                           double disc_weight, std::uint64_t seed) {
  if (!(generator.config == discriminator.config))
    throw ValidationError(
        "electra_step: generator and discriminator configs differ");
  if (batch.size() != plans.size())
    throw ValidationError("electra_step: one plan per sequence required");
  if (disc_weight <= 0.0)
    throw ValidationError("electra_step: disc_weight must be positive");
  const std::int64_t B = static_cast<std::int64_t>(batch.size());
  const std::int64_t L = generator.config.max_len;
  const std::int64_t H = generator.config.hidden_dim;
  const std::int64_t V = generator.config.vocab_size;

  // generator: masked language modeling over the plans
  std::vector<TokenSequence> masked = batch;
  std::vector<std::int64_t> picked;
  std::vector<std::int64_t> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    apply_plan(masked[b], plans[b]);
    for (const int pos : plans[b].selected) {
      picked.push_back(static_cast<std::int64_t>(b) * L + pos);
      targets.push_back(batch[b].ids[static_cast<std::size_t>(pos)]);
    }
  }

  const VarMap gen_leaves = make_leaves(generator, true);
  ad::Var gen_ce;
  Tensor sample_probs;  // [selected, vocab], detached
  if (!picked.empty()) {
    const EncoderGraph gen_graph =
        encoder_graph(gen_leaves, generator.config, masked);
    const ad::Var flat = ad::reshape(gen_graph.hidden, {B * L, H});
    const ad::Var logits = ad::matmul(ad::gather_rows(flat, picked),
                                      gen_leaves.at("tok_emb"), false, true);
    gen_ce = ad::cross_entropy_logits(logits, targets);
    sample_probs = ad::val(ad::softmax_last(ad::constant(ad::val(logits))));
  }

  // corrupt: sample replacements from the generator's output distribution;
  // no gradient flows through the sample
  ElectraResult result;
  std::vector<TokenSequence> corrupted = batch;
  Rng rng(seed);
  std::size_t row = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (const int pos : plans[b].selected) {
      const double u = rng.uniform01();
      double cum = 0.0;
      std::int64_t sampled = V - 1;
      for (std::int64_t t = 0; t < V; ++t) {
        cum += sample_probs[static_cast<std::int64_t>(row) * V + t];
        if (u < cum) {
          sampled = t;
          break;
        }
      }
      corrupted[b].ids[static_cast<std::size_t>(pos)] =
          static_cast<int>(sampled);
      ++row;
    }
  }

  // labels over every non-PAD position; a sample equal to the original
  // counts as original
  std::vector<std::int64_t> nonpad;
  std::vector<double> label_values;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<int> seq_labels;
    for (std::size_t i = 0; i < batch[b].ids.size(); ++i) {
      if (batch[b].attention_mask[i] == 0) continue;
      const int label = corrupted[b].ids[i] == batch[b].ids[i] ? 1 : 0;
      seq_labels.push_back(label);
      nonpad.push_back(static_cast<std::int64_t>(b) * L +
                       static_cast<std::int64_t>(i));
      label_values.push_back(static_cast<double>(label));
    }
    result.labels.push_back(std::move(seq_labels));
    result.corrupted_ids.push_back(corrupted[b].ids);
  }

  const VarMap disc_leaves = make_leaves(discriminator, true);
  const VarMap rtd_leaves = head_leaves(rtd_head);
  const EncoderGraph disc_graph =
      encoder_graph(disc_leaves, discriminator.config, corrupted);
  const ad::Var disc_flat = ad::reshape(disc_graph.hidden, {B * L, H});
  const ad::Var all_logits = ad::add_rowbias(
      ad::matmul(disc_flat, rtd_leaves.at("rtd.w")), rtd_leaves.at("rtd.b"));
  result.disc_logits = ad::val(all_logits).reshaped({B, L});
  const std::int64_t n_nonpad = static_cast<std::int64_t>(label_values.size());
  const ad::Var disc_bce =
      ad::bce_logits(ad::gather_rows(all_logits, nonpad),
                     Tensor({n_nonpad, 1}, std::move(label_values)));

  const ad::Var weighted = ad::scale(disc_bce, disc_weight);
  const ad::Var root = gen_ce ? ad::add(gen_ce, weighted) : weighted;
  ad::backward(root);

  result.gen_loss = gen_ce ? ad::val(gen_ce)[0] : 0.0;
  result.disc_loss = ad::val(disc_bce)[0];
  result.combined = result.gen_loss + disc_weight * result.disc_loss;
  result.gen_grads = collect_grads(gen_leaves);
  result.disc_grads = collect_grads(disc_leaves);
  result.head_grads = collect_grads(rtd_leaves);
  return result;
}

std::string strip_comments(const std::string& code) {
  enum class State { code, line, block, str, chr };
  State state = State::code;
  std::string out;
  out.reserve(code.size());
  for (std::size_t i = 0; i < code.size(); ++i) {
    const char c = code[i];
    switch (state) {
      case State::code:
        if (c == '/' && i + 1 < code.size() && code[i + 1] == '/') {
          state = State::line;
          ++i;
        } else if (c == '/' && i + 1 < code.size() && code[i + 1] == '*') {
          state = State::block;
          ++i;
        } else {
          out += c;
          if (c == '"') state = State::str;
          else if (c == '\'') state = State::chr;
        }
        break;
      case State::line:
        if (c == '\n') {
          out += '\n';
          state = State::code;
        }
        break;
      case State::block:
        if (c == '\n') {
          out += '\n';  // keep line structure across block comments
        } else if (c == '*' && i + 1 < code.size() && code[i + 1] == '/') {
          state = State::code;
          ++i;
        }
        break;
      case State::str:
        out += c;
        if (c == '\\' && i + 1 < code.size()) out += code[++i];
        else if (c == '"') state = State::code;
        break;
      case State::chr:
        out += c;
        if (c == '\\' && i + 1 < code.size()) out += code[++i];
        else if (c == '\'') state = State::code;
        break;
    }
  }
  return out;
}

std::optional<std::pair<TokenSequence, QaTarget>> qa_targets(
    const std::string& bug_text, const std::string& pre_code,
    const std::string& post_code, const Vocabulary& vocab, int max_len) {
  const std::string pre = strip_comments(pre_code);
  const std::string post = strip_comments(post_code);
  const std::vector<std::string> pre_lines = split_lines(pre);
  const std::vector<std::string> post_lines = split_lines(post);
  // compare lines by their token content so whitespace left behind by
  // comment removal never counts as a change
  const auto line_keys = [](const std::vector<std::string>& lines) {
    std::vector<std::string> keys;
    keys.reserve(lines.size());
    for (const auto& line : lines) {
      std::string key;
      for (const auto& token : tokenize_text(line)) {
        key += token;
        key += '\x1f';
      }
      keys.push_back(std::move(key));
    }
    return keys;
  };
  const auto ops = line_diff(line_keys(pre_lines), line_keys(post_lines));

  // first hunk that removes or replaces at least one pre line
  std::size_t hunk_begin = 0, hunk_end = 0;
  bool found = false;
  for (std::size_t i = 0; i < ops.size() && !found;) {
    if (ops[i].first == DiffOp::common) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < ops.size() && ops[j].first != DiffOp::common) ++j;
    for (std::size_t k = i; k < j; ++k)
      if (ops[k].first == DiffOp::del) {
        if (!found) hunk_begin = ops[k].second;
        hunk_end = ops[k].second + 1;
        found = true;
      }
    i = j;
  }
  if (!found) return std::nullopt;

  // token offsets of each pre line within the code segment
  std::vector<std::size_t> prefix(pre_lines.size() + 1, 0);
  for (std::size_t i = 0; i < pre_lines.size(); ++i)
    prefix[i + 1] = prefix[i] + tokenize_text(pre_lines[i]).size();
  const std::size_t tok_begin = prefix[hunk_begin];
  const std::size_t tok_end = prefix[hunk_end];
  if (tok_end == tok_begin) return std::nullopt;  // hunk holds no tokens

  TokenSequence seq = encode_pair(bug_text, pre, vocab, max_len);
  const int sep = seq.sep_index;
  const int code_len = eos_position(seq) - sep - 1;
  if (static_cast<std::size_t>(code_len) <= tok_begin)
    return std::nullopt;  // answer truncated away
  QaTarget target;
  target.start = sep + 1 + static_cast<int>(tok_begin);
  target.end =
      sep + static_cast<int>(std::min<std::size_t>(
                tok_end, static_cast<std::size_t>(code_len)));
  return std::make_pair(std::move(seq), target);
}

ParamStore init_qa_head(int hidden_dim, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore head;
  for (const char* name : {"qa.ws", "qa.we"}) {
    Tensor w({hidden_dim, 1});
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, 0.02);
    head.add(name, std::move(w));
  }
  head.add("qa.bs", Tensor({1}));
  head.add("qa.be", Tensor({1}));
  return head;
}

QaResult qa_loss(const EncoderState& state, const ParamStore& qa_head,
                 const std::vector<TokenSequence>& batch,
                 const std::vector<QaTarget>& targets) {
  if (batch.size() != targets.size())
    throw ValidationError("qa_loss: one target per sequence required");
  if (batch.empty()) throw ValidationError("qa_loss: empty batch");
  const std::int64_t B = static_cast<std::int64_t>(batch.size());
  const std::int64_t L = state.config.max_len;
  const std::int64_t H = state.config.hidden_dim;

  const VarMap leaves = make_leaves(state, true);
  const VarMap head = head_leaves(qa_head);
  const EncoderGraph g = encoder_graph(leaves, state.config, batch);
  const ad::Var flat = ad::reshape(g.hidden, {B * L, H});

  ad::Var start_sum, end_sum;
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& seq = batch[static_cast<std::size_t>(b)];
    const auto& target = targets[static_cast<std::size_t>(b)];
    const int sep = seq.sep_index;
    const int eos = eos_position(seq);
    if (target.start > target.end)
      throw ValidationError("qa_loss: span start after end");
    if (target.start <= sep || target.end >= eos)
      throw ValidationError("qa_loss: target outside the code segment");
    const std::int64_t len = eos - sep - 1;
    std::vector<std::int64_t> rows;
    for (std::int64_t i = 0; i < len; ++i) rows.push_back(b * L + sep + 1 + i);
    const ad::Var segment = ad::gather_rows(flat, rows);
    const auto position_ce = [&](const char* w, const char* bias,
                                 int position) {
      const ad::Var logits = ad::reshape(
          ad::add_rowbias(ad::matmul(segment, head.at(w)), head.at(bias)),
          {1, len});
      return ad::cross_entropy_logits(logits, {position - sep - 1});
    };
    const ad::Var s = position_ce("qa.ws", "qa.bs", target.start);
    const ad::Var e = position_ce("qa.we", "qa.be", target.end);
    start_sum = start_sum ? ad::add(start_sum, s) : s;
    end_sum = end_sum ? ad::add(end_sum, e) : e;
  }
  const ad::Var loss = ad::scale(ad::add(start_sum, end_sum),
                                 1.0 / static_cast<double>(B));
  ad::backward(loss);

  QaResult result;
  result.loss = ad::val(loss)[0];
  result.grads = collect_grads(leaves);
  result.head_grads = collect_grads(head);
  return result;
}

std::pair<EncoderState, TrainingLog> pretrain(
    const PretrainConfig& config, const EncoderConfig& encoder_config,
    const DatasetManifest& dataset, const Vocabulary& vocab,
    const std::function<void(int, const EncoderState&)>& on_epoch_end) {
  if (config.epochs < 1)
    throw ValidationError("pretrain: epochs must be at least 1");
  if (config.batch_size < 1)
    throw ValidationError("pretrain: batch_size must be at least 1");
  if (config.mask_rate <= 0.0 || config.mask_rate >= 1.0)
    throw ValidationError("pretrain: mask_rate must be in (0, 1)");
  if (config.electra_disc_weight <= 0.0)
    throw ValidationError("pretrain: electra_disc_weight must be positive");
  if (dataset.records.empty())
    throw ValidationError("pretrain: dataset is empty");
  if (static_cast<int>(vocab.size()) != encoder_config.vocab_size)
    throw ValidationError("pretrain: vocabulary size does not match encoder");

  // pre-training pairs are the genuine (bug, buggy file) examples
  std::vector<PretrainedSequence> sequences;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& rec = dataset.records[i];
    if (rec.label != 1) continue;
    sequences.push_back({encode_pair(bug_query_text(rec.bug), rec.file_content,
                                     vocab, encoder_config.max_len),
                         i});
  }
  if (sequences.empty())
    throw ValidationError("pretrain: dataset has no positive examples");

  const std::uint64_t shuffle_base = derive_seed(config.seed, "shuffle");
  const std::uint64_t mask_base = derive_seed(config.seed, "mask");
  const std::uint64_t sample_base = derive_seed(config.seed, "electra-sample");

  TrainingLog log;
  std::int64_t step = 0;
  const AdamConfig adam_config{config.learning_rate, 0.9, 0.999, 1e-8};

  const auto run_epoch = [&](int epoch, const std::string& objective,
                             std::size_t count, auto&& do_batch) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(shuffle_base, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    std::vector<double> losses;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), at + static_cast<std::size_t>(config.batch_size));
      const std::vector<std::size_t> members(order.begin() + at,
                                             order.begin() + stop);
      const auto loss = do_batch(epoch, members);
      if (!loss) continue;  // nothing maskable in this batch
      if (!std::isfinite(*loss))
        throw Error("pretrain: non-finite loss at step " +
                    std::to_string(step + 1));
      ++step;
      log.steps.push_back({step, epoch, objective, *loss});
      losses.push_back(*loss);
    }
    log.epoch_mean_loss.push_back(mean_of(losses));
  };

  const auto batch_plans = [&](int epoch, const std::vector<std::size_t>& members,
                               std::vector<TokenSequence>& batch,
                               std::vector<MaskingPlan>& plans) {
    bool any = false;
    for (const std::size_t m : members) {
      batch.push_back(sequences[m].seq);
      plans.push_back(plan_or_empty(
          sequences[m].seq, config.mask_rate,
          derive_seed(mask_base, static_cast<std::uint64_t>(epoch),
                      static_cast<std::uint64_t>(m)),
          encoder_config.vocab_size));
      any = any || !plans.back().selected.empty();
    }
    return any;
  };

  switch (config.objective) {
    case PretrainConfig::Objective::mlm: {
      EncoderState state = init_encoder(encoder_config);
      AdamOptimizer adam(adam_config);
      for (int epoch = 0; epoch < config.epochs; ++epoch) {
        run_epoch(epoch, "mlm", sequences.size(),
                  [&](int e, const std::vector<std::size_t>& members)
                      -> std::optional<double> {
                    std::vector<TokenSequence> batch;
                    std::vector<MaskingPlan> plans;
                    if (!batch_plans(e, members, batch, plans))
                      return std::nullopt;
                    const MlmResult r = mlm_loss(state, batch, plans);
                    adam.step(state.params, r.grads);
                    return r.loss;
                  });
        if (on_epoch_end) on_epoch_end(epoch, state);
      }
      return {std::move(state), std::move(log)};
    }

    case PretrainConfig::Objective::electra: {
      EncoderState gen = init_encoder(encoder_config);
      EncoderState disc = init_encoder(encoder_config);
      ParamStore rtd = init_rtd_head(encoder_config.hidden_dim,
                                     derive_seed(config.seed, "rtd-head"));
      AdamOptimizer adam_gen(adam_config), adam_disc(adam_config),
          adam_head(adam_config);
      for (int epoch = 0; epoch < config.epochs; ++epoch) {
        run_epoch(epoch, "electra", sequences.size(),
                  [&](int e, const std::vector<std::size_t>& members)
                      -> std::optional<double> {
                    std::vector<TokenSequence> batch;
                    std::vector<MaskingPlan> plans;
                    if (!batch_plans(e, members, batch, plans))
                      return std::nullopt;
                    const ElectraResult r = electra_step(
                        gen, disc, rtd, batch, plans,
                        config.electra_disc_weight,
                        derive_seed(sample_base,
                                    static_cast<std::uint64_t>(step)));
                    adam_gen.step(gen.params, r.gen_grads);
                    adam_disc.step(disc.params, r.disc_grads);
                    adam_head.step(rtd, r.head_grads);
                    return r.combined;
                  });
        if (on_epoch_end) on_epoch_end(epoch, disc);
      }
      // the discriminator is the model we keep
      return {std::move(disc), std::move(log)};
    }

    case PretrainConfig::Objective::mlm_then_qa: {
      EncoderState state = init_encoder(encoder_config);
      AdamOptimizer adam(adam_config);
      const int handover = config.epochs / 2;
      for (int epoch = 0; epoch < handover; ++epoch) {
        run_epoch(epoch, "mlm", sequences.size(),
                  [&](int e, const std::vector<std::size_t>& members)
                      -> std::optional<double> {
                    std::vector<TokenSequence> batch;
                    std::vector<MaskingPlan> plans;
                    if (!batch_plans(e, members, batch, plans))
                      return std::nullopt;
                    const MlmResult r = mlm_loss(state, batch, plans);
                    adam.step(state.params, r.grads);
                    return r.loss;
                  });
        if (on_epoch_end) on_epoch_end(epoch, state);
      }

      std::vector<QaInstance> instances;
      for (const auto& rec : dataset.records) {
        if (rec.label != 1 || !rec.post_content) continue;
        auto made = qa_targets(bug_query_text(rec.bug), rec.file_content,
                               *rec.post_content, vocab,
                               encoder_config.max_len);
        if (made) instances.push_back({std::move(made->first), made->second});
      }
      if (instances.empty())
        throw ValidationError(
            "pretrain: no question-answering instance survives");
      ParamStore qa_head = init_qa_head(encoder_config.hidden_dim,
                                       derive_seed(config.seed, "qa-head"));
      AdamOptimizer adam_qa(adam_config), adam_qa_head(adam_config);
      for (int epoch = handover; epoch < config.epochs; ++epoch) {
        run_epoch(epoch, "qa", instances.size(),
                  [&](int, const std::vector<std::size_t>& members)
                      -> std::optional<double> {
                    std::vector<TokenSequence> batch;
                    std::vector<QaTarget> targets;
                    for (const std::size_t m : members) {
                      batch.push_back(instances[m].seq);
                      targets.push_back(instances[m].target);
                    }
                    const QaResult r = qa_loss(state, qa_head, batch, targets);
                    adam_qa.step(state.params, r.grads);
                    adam_qa_head.step(qa_head, r.head_grads);
                    return r.loss;
                  });
        if (on_epoch_end) on_epoch_end(epoch, state);
      }
      return {std::move(state), std::move(log)};
    }
  }
  throw Error("pretrain: unknown objective");
}

void save_training_log(const TrainingLog& log,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_training_log: cannot open " + path.string());
  out << "step,epoch,objective,loss\n";
  char buf[64];
  for (const auto& s : log.steps) {
    std::snprintf(buf, sizeof buf, "%.17g", s.loss);
    out << s.step << ',' << s.epoch << ',' << s.objective << ',' << buf
        << '\n';
  }
}

std::string objective_name(PretrainConfig::Objective objective) {
  switch (objective) {
    case PretrainConfig::Objective::mlm: return "mlm";
    case PretrainConfig::Objective::electra: return "electra";
    case PretrainConfig::Objective::mlm_then_qa: return "mlm_then_qa";
  }
  throw Error("objective_name: unknown objective");
}

PretrainConfig::Objective objective_from_name(const std::string& name) {
  if (name == "mlm") return PretrainConfig::Objective::mlm;
  if (name == "electra") return PretrainConfig::Objective::electra;
  if (name == "mlm_then_qa") return PretrainConfig::Objective::mlm_then_qa;
  throw ValidationError("unknown pre-training objective: " + name);
}

void save_pretrain_config(const PretrainConfig& config,
                          const std::filesystem::path& path) {
  const json j{{"objective", objective_name(config.objective)},
               {"mask_rate", config.mask_rate},
               {"electra_disc_weight", config.electra_disc_weight},
               {"epochs", config.epochs},
               {"batch_size", config.batch_size},
               {"learning_rate", config.learning_rate},
               {"seed", config.seed}};
  std::ofstream out(path);
  if (!out) throw Error("save_pretrain_config: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

PretrainConfig load_pretrain_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_pretrain_config: cannot open " + path.string());
  json j;
  try {
    in >> j;
    PretrainConfig config;
    config.objective = objective_from_name(j.at("objective"));
    config.mask_rate = j.at("mask_rate");
    config.electra_disc_weight = j.at("electra_disc_weight");
    config.epochs = j.at("epochs");
    config.batch_size = j.at("batch_size");
    config.learning_rate = j.at("learning_rate");
    config.seed = j.at("seed");
    return config;
  } catch (const json::exception& e) {
    throw ValidationError("load_pretrain_config: " + std::string(e.what()));
  }
}

}  // namespace bugloc
