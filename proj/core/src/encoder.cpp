#include "bugloc/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bugloc/error.hpp"
#include "bugloc/rng.hpp"
#include "checkpoint_io.hpp"

namespace bugloc {

namespace {

thread_local std::int64_t g_score_elements = 0;

using nlohmann::json;

void validate_config(const EncoderConfig& c) {
  if (c.num_layers < 1) throw ValidationError("encoder: num_layers must be >= 1");
  if (c.num_heads < 1 || c.hidden_dim < 1 || c.ffn_dim < 1)
    throw ValidationError("encoder: dimensions must be positive");
  if (c.hidden_dim % c.num_heads != 0)
    throw ValidationError("encoder: hidden_dim must be divisible by num_heads");
  if (c.max_len < 8) throw ValidationError("encoder: max_len must be >= 8");
  if (c.vocab_size <= Vocabulary::kNumSpecials)
    throw ValidationError("encoder: vocab_size must exceed the specials");
  if (c.attention_kind == EncoderConfig::Attention::lsh &&
      (c.lsh_num_hashes < 1 || c.lsh_bucket_size < 1))
    throw ValidationError("encoder: lsh fields must be positive");
}

/// The fixed parameter directory: names in creation order with shapes.
/// Both initialization draw order and checkpoint layout follow it.
std::vector<std::pair<std::string, std::vector<std::int64_t>>> param_directory(
    const EncoderConfig& c) {
  const std::int64_t V = c.vocab_size, H = c.hidden_dim, L = c.max_len,
                     F = c.ffn_dim;
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> dir;
  dir.emplace_back("tok_emb", std::vector<std::int64_t>{V, H});
  dir.emplace_back("pos_emb", std::vector<std::int64_t>{L, H});
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    dir.emplace_back(p + "ln1.gain", std::vector<std::int64_t>{H});
    dir.emplace_back(p + "ln1.bias", std::vector<std::int64_t>{H});
    dir.emplace_back(p + "attn.wq", std::vector<std::int64_t>{H, H});
    dir.emplace_back(p + "attn.bq", std::vector<std::int64_t>{H});
    if (c.attention_kind == EncoderConfig::Attention::full) {
      dir.emplace_back(p + "attn.wk", std::vector<std::int64_t>{H, H});
      dir.emplace_back(p + "attn.bk", std::vector<std::int64_t>{H});
    }
    dir.emplace_back(p + "attn.wv", std::vector<std::int64_t>{H, H});
    dir.emplace_back(p + "attn.bv", std::vector<std::int64_t>{H});
    dir.emplace_back(p + "attn.wo", std::vector<std::int64_t>{H, H});
    dir.emplace_back(p + "attn.bo", std::vector<std::int64_t>{H});
    dir.emplace_back(p + "ln2.gain", std::vector<std::int64_t>{H});
    dir.emplace_back(p + "ln2.bias", std::vector<std::int64_t>{H});
    dir.emplace_back(p + "ffn.w1", std::vector<std::int64_t>{H, F});
    dir.emplace_back(p + "ffn.b1", std::vector<std::int64_t>{F});
    dir.emplace_back(p + "ffn.w2", std::vector<std::int64_t>{F, H});
    dir.emplace_back(p + "ffn.b2", std::vector<std::int64_t>{H});
  }
  dir.emplace_back("final_ln.gain", std::vector<std::int64_t>{H});
  dir.emplace_back("final_ln.bias", std::vector<std::int64_t>{H});
  return dir;
}

bool is_weight(const std::string& name) {
  const auto tail = name.substr(name.rfind('.') + 1);
  return name == "tok_emb" || name == "pos_emb" || tail[0] == 'w';
}

bool is_gain(const std::string& name) {
  return name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
}

json config_to_json(const EncoderConfig& c) {
  return json{
      {"attention_kind",
       c.attention_kind == EncoderConfig::Attention::full ? "full" : "lsh"},
      {"num_layers", c.num_layers},
      {"num_heads", c.num_heads},
      {"hidden_dim", c.hidden_dim},
      {"ffn_dim", c.ffn_dim},
      {"max_len", c.max_len},
      {"vocab_size", c.vocab_size},
      {"lsh_num_hashes", c.lsh_num_hashes},
      {"lsh_bucket_size", c.lsh_bucket_size},
      {"seed", c.seed}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  try {
    c.attention_kind = j.at("attention_kind") == "lsh"
                           ? EncoderConfig::Attention::lsh
                           : EncoderConfig::Attention::full;
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.lsh_num_hashes = j.at("lsh_num_hashes").get<int>();
    c.lsh_bucket_size = j.at("lsh_bucket_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("encoder config is malformed: ") +
                          e.what());
  }
  return c;
}

Tensor mask_tensor(const std::vector<TokenSequence>& batch) {
  const std::int64_t B = static_cast<std::int64_t>(batch.size());
  const std::int64_t L = static_cast<std::int64_t>(batch[0].ids.size());
  Tensor mask({B, L});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = 0; l < L; ++l)
      mask[b * L + l] =
          batch[static_cast<std::size_t>(b)].attention_mask[static_cast<std::size_t>(l)];
  return mask;
}

constexpr double kMaskBias = -1e9;

}  // namespace

std::int64_t attention_score_elements() { return g_score_elements; }
void reset_attention_score_elements() { g_score_elements = 0; }

EncoderState init_encoder(const EncoderConfig& config) {
  validate_config(config);
  EncoderState state;
  state.config = config;
  Rng rng(derive_seed(config.seed, "encoder-init"));
  for (const auto& [name, shape] : param_directory(config)) {
    if (is_weight(name)) {
      Tensor t(shape);
      for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, 0.02);
      state.params.add(name, std::move(t));
    } else {
      state.params.add(name, Tensor(shape, is_gain(name) ? 1.0 : 0.0));
    }
  }
  return state;
}

VarMap make_leaves(const EncoderState& state, bool requires_grad) {
  VarMap leaves;
  for (const auto& name : state.params.names())
    leaves.emplace(name, ad::leaf(state.params.at(name), requires_grad));
  return leaves;
}

ad::Var full_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v,
                       const Tensor& mask) {
  const auto& s = ad::val(q).shape();
  if (s.size() != 4) throw Error("full_attention: expects [B, h, L, d]");
  const std::int64_t B = s[0], h = s[1], L = s[2], d = s[3];
  if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != L)
    throw Error("full_attention: mask must be [B, L]");
  ad::Var scores =
      ad::scale(ad::matmul(q, k, false, true), 1.0 / std::sqrt(double(d)));
  g_score_elements += B * h * L * L;
  Tensor bias({B, L});
  for (std::int64_t i = 0; i < B * L; ++i)
    bias[i] = mask[i] != 0.0 ? 0.0 : kMaskBias;
  scores = ad::add_key_bias(scores, bias);
  return ad::matmul(ad::softmax_last(scores), v);
}

ad::Var lsh_attention(const ad::Var& qk, const ad::Var& v, const Tensor& mask,
                      int num_hashes, int bucket_size, std::uint64_t seed) {
  const auto& s = ad::val(qk).shape();
  if (s.size() != 4) throw Error("lsh_attention: expects [B, h, L, d]");
  const std::int64_t B = s[0], h = s[1], L = s[2], d = s[3];
  if (!ad::val(v).same_shape(ad::val(qk)))
    throw Error("lsh_attention: q/k and v shapes differ");
  if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != L)
    throw Error("lsh_attention: mask must be [B, L]");
  if (num_hashes < 1 || bucket_size < 1)
    throw ValidationError("lsh_attention: rounds and bucket size must be positive");
  if (L % bucket_size != 0)
    throw ValidationError("lsh_attention: bucket_size must divide the sequence length");

  const std::int64_t m = bucket_size;
  const std::int64_t C = L / m;
  std::int64_t n_buckets = C;
  if (n_buckets > 1 && n_buckets % 2 != 0) ++n_buckets;  // rotations pair up
  const int pad_bucket = static_cast<int>(n_buckets);    // PADs sort last

  std::vector<ad::Var> outputs, logz;
  for (int round = 0; round < num_hashes; ++round) {
    // -- hash: random-rotation buckets over the tied query/key vectors
    std::vector<int> bucket(static_cast<std::size_t>(B * h * L), 0);
    if (n_buckets > 1) {
      Rng rng(derive_seed(derive_seed(seed, "lsh-round"),
                          static_cast<std::uint64_t>(round)));
      const std::int64_t half = n_buckets / 2;
      Tensor rot({d, half});
      for (std::int64_t i = 0; i < rot.numel(); ++i) rot[i] = rng.normal();
      const Tensor& x = ad::val(qk);
      for (std::int64_t bh = 0; bh < B * h; ++bh)
        for (std::int64_t l = 0; l < L; ++l) {
          double best = 0.0;
          int best_j = 0;
          for (std::int64_t j = 0; j < half; ++j) {
            double r = 0.0;
            for (std::int64_t dd = 0; dd < d; ++dd)
              r += x[(bh * L + l) * d + dd] * rot[dd * half + j];
            if (j == 0 || r > best) {
              best = r;
              best_j = static_cast<int>(j);
            }
            if (-r > best) {
              best = -r;
              best_j = static_cast<int>(j + half);
            }
          }
          bucket[static_cast<std::size_t>(bh * L + l)] = best_j;
        }
    }
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t hh = 0; hh < h; ++hh)
        for (std::int64_t l = 0; l < L; ++l)
          if (mask[b * L + l] == 0.0)
            bucket[static_cast<std::size_t>((b * h + hh) * L + l)] = pad_bucket;

    // -- stable sort each (batch, head) slice by bucket
    std::vector<std::int64_t> perm(static_cast<std::size_t>(B * h * L));
    std::vector<std::int64_t> inv(perm.size());
    for (std::int64_t bh = 0; bh < B * h; ++bh) {
      auto* p = perm.data() + bh * L;
      std::iota(p, p + L, 0);
      const int* bk = bucket.data() + bh * L;
      std::stable_sort(p, p + L, [bk](std::int64_t a, std::int64_t b2) {
        return bk[a] < bk[b2];
      });
      for (std::int64_t slot = 0; slot < L; ++slot)
        inv[static_cast<std::size_t>(bh * L + p[slot])] = slot;
    }

    const ad::Var sorted_q = ad::permute_positions(qk, perm);
    const ad::Var sorted_v = ad::permute_positions(v, perm);
    const ad::Var chunk_q = ad::reshape(sorted_q, {B, h, C, m, d});
    const ad::Var keys = ad::with_lookback(chunk_q);
    const ad::Var vals = ad::with_lookback(ad::reshape(sorted_v, {B, h, C, m, d}));

    ad::Var scores = ad::scale(ad::matmul(chunk_q, keys, false, true),
                               1.0 / std::sqrt(double(d)));
    g_score_elements += B * h * C * m * 2 * m;

    // bias: attend only within the same bucket (which also shuts out PADs)
    Tensor bias({B, h, C, m, 2 * m}, kMaskBias);
    for (std::int64_t bh = 0; bh < B * h; ++bh) {
      const auto* p = perm.data() + bh * L;
      const int* bk = bucket.data() + bh * L;
      for (std::int64_t c = 0; c < C; ++c) {
        const std::int64_t prev = (c + C - 1) % C;
        for (std::int64_t j = 0; j < m; ++j) {
          const int qb = bk[p[c * m + j]];
          for (std::int64_t kk = 0; kk < 2 * m; ++kk) {
            const std::int64_t slot =
                kk < m ? prev * m + kk : c * m + (kk - m);
            if (bk[p[slot]] == qb)
              bias[((bh * C + c) * m + j) * 2 * m + kk] = 0.0;
          }
        }
      }
    }
    scores = ad::add_const(scores, bias);

    const ad::Var probs = ad::softmax_last(scores);
    const ad::Var ctx = ad::matmul(probs, vals);  // [B,h,C,m,d]
    const ad::Var z = ad::logsumexp_last(scores); // [B,h,C,m]

    outputs.push_back(
        ad::permute_positions(ad::reshape(ctx, {B, h, L, d}), inv));
    logz.push_back(ad::reshape(
        ad::permute_positions(ad::reshape(z, {B, h, L, 1}), inv), {B, h, L}));
  }

  if (num_hashes == 1) return outputs[0];

  // combine rounds, each position weighted by its round's log-normalizer
  const ad::Var weights = ad::softmax_last(ad::stack_last(logz));
  ad::Var out = ad::mul_lastbroadcast(outputs[0], ad::slice_last(weights, 0));
  for (int r = 1; r < num_hashes; ++r)
    out = ad::add(out, ad::mul_lastbroadcast(outputs[static_cast<std::size_t>(r)],
                                             ad::slice_last(weights, r)));
  return out;
}

EncoderGraph encoder_graph(const VarMap& params, const EncoderConfig& config,
                           const std::vector<TokenSequence>& batch) {
  if (batch.empty()) throw Error("encoder_graph: empty batch");
  const std::int64_t B = static_cast<std::int64_t>(batch.size());
  const std::int64_t L = config.max_len;
  const std::int64_t H = config.hidden_dim;
  std::vector<std::int64_t> tok_idx, pos_idx, bos_idx;
  tok_idx.reserve(static_cast<std::size_t>(B * L));
  pos_idx.reserve(static_cast<std::size_t>(B * L));
  for (const TokenSequence& seq : batch) {
    if (static_cast<std::int64_t>(seq.ids.size()) != L)
      throw ValidationError(
          "encoder_graph: sequence length does not match config.max_len");
    for (const int id : seq.ids) {
      if (id < 0 || id >= config.vocab_size)
        throw ValidationError("encoder_graph: token id out of vocabulary range");
      tok_idx.push_back(id);
    }
    for (std::int64_t l = 0; l < L; ++l) pos_idx.push_back(l);
  }
  for (std::int64_t b = 0; b < B; ++b) bos_idx.push_back(b * L);

  const auto P = [&](const std::string& name) -> const ad::Var& {
    const auto it = params.find(name);
    if (it == params.end()) throw Error("encoder_graph: missing leaf " + name);
    return it->second;
  };

  const Tensor mask = mask_tensor(batch);
  ad::Var x = ad::add(
      ad::reshape(ad::gather_rows(P("tok_emb"), tok_idx), {B, L, H}),
      ad::reshape(ad::gather_rows(P("pos_emb"), pos_idx), {B, L, H}));

  const bool full = config.attention_kind == EncoderConfig::Attention::full;
  for (int i = 0; i < config.num_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    const ad::Var pre = ad::layer_norm(x, P(p + "ln1.gain"), P(p + "ln1.bias"));
    const ad::Var q = ad::split_heads(
        ad::add_rowbias(ad::matmul(pre, P(p + "attn.wq")), P(p + "attn.bq")),
        config.num_heads);
    const ad::Var v = ad::split_heads(
        ad::add_rowbias(ad::matmul(pre, P(p + "attn.wv")), P(p + "attn.bv")),
        config.num_heads);
    ad::Var ctx;
    if (full) {
      const ad::Var k = ad::split_heads(
          ad::add_rowbias(ad::matmul(pre, P(p + "attn.wk")), P(p + "attn.bk")),
          config.num_heads);
      ctx = full_attention(q, k, v, mask);
    } else {
      ctx = lsh_attention(q, v, mask, config.lsh_num_hashes,
                          config.lsh_bucket_size,
                          derive_seed(derive_seed(config.seed, "lsh-layer"),
                                      static_cast<std::uint64_t>(i)));
    }
    const ad::Var attn_out = ad::add_rowbias(
        ad::matmul(ad::merge_heads(ctx), P(p + "attn.wo")), P(p + "attn.bo"));
    x = ad::add(x, attn_out);

    const ad::Var pre2 = ad::layer_norm(x, P(p + "ln2.gain"), P(p + "ln2.bias"));
    const ad::Var ffn = ad::add_rowbias(
        ad::matmul(ad::gelu(ad::add_rowbias(ad::matmul(pre2, P(p + "ffn.w1")),
                                            P(p + "ffn.b1"))),
                   P(p + "ffn.w2")),
        P(p + "ffn.b2"));
    x = ad::add(x, ffn);
  }
  x = ad::layer_norm(x, P("final_ln.gain"), P("final_ln.bias"));

  EncoderGraph graph;
  graph.hidden = x;
  graph.pooled = ad::reshape(
      ad::gather_rows(ad::reshape(x, {B * L, H}), bos_idx), {B, H});
  graph.mask = mask;
  return graph;
}

EncodedBatch forward(const EncoderState& state,
                     const std::vector<TokenSequence>& batch) {
  const VarMap leaves = make_leaves(state, false);
  const EncoderGraph g = encoder_graph(leaves, state.config, batch);
  return EncodedBatch{ad::val(g.hidden), ad::val(g.pooled), g.mask};
}

EncoderState extend_positions(const EncoderState& state, int new_max_len) {
  if (new_max_len <= state.config.max_len)
    throw ValidationError(
        "extend_positions: new_max_len must exceed the current max_len");
  EncoderState out;
  out.config = state.config;
  out.config.max_len = new_max_len;
  const std::int64_t old_len = state.config.max_len;
  const std::int64_t H = state.config.hidden_dim;
  for (const auto& name : state.params.names()) {
    if (name == "pos_emb") {
      const Tensor& old = state.params.at(name);
      Tensor grown({new_max_len, H});
      for (std::int64_t i = 0; i < new_max_len; ++i)
        std::copy_n(old.data() + (i % old_len) * H, H, grown.data() + i * H);
      out.params.add(name, std::move(grown));
    } else {
      out.params.add(name, state.params.at(name));
    }
  }
  return out;
}

void save_checkpoint(const EncoderState& state, const std::string& path) {
  ckpt::save(path, "encoder", config_to_json(state.config), state.params);
}

EncoderState load_checkpoint(const std::string& path) {
  ckpt::Loaded loaded = ckpt::load(path, "encoder");
  EncoderState state;
  state.config = config_from_json(loaded.config);
  validate_config(state.config);
  const auto expected = param_directory(state.config);
  if (loaded.params.size() != expected.size())
    throw ValidationError("checkpoint tensor directory does not match config: " +
                          path);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, shape] = expected[i];
    if (loaded.params.names()[i] != name ||
        loaded.params.at(name).shape() != shape)
      throw ValidationError("checkpoint tensor " + name +
                            " does not match config: " + path);
  }
  state.params = std::move(loaded.params);
  return state;
}

}  // namespace bugloc
