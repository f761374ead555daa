#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bugloc/autodiff.hpp"
#include "bugloc/params.hpp"
#include "bugloc/tensor.hpp"
#include "bugloc/tokenize.hpp"

namespace bugloc {

struct EncoderConfig {
  enum class Attention { full, lsh };
  Attention attention_kind = Attention::full;
  int num_layers = 2;
  int num_heads = 4;
  int hidden_dim = 64;
  int ffn_dim = 256;
  int max_len = 128;
  int vocab_size = 512;
  int lsh_num_hashes = 2;
  int lsh_bucket_size = 16;
  std::uint64_t seed = 0;

  bool operator==(const EncoderConfig&) const = default;
};

struct EncoderState {
  EncoderConfig config;
  ParamStore params;
};

/// Inference output of forward(): final hidden states, the BOS pooled
/// vector, and the attention mask carried along for downstream heads.
struct EncodedBatch {
  Tensor hidden;  // [batch, max_len, hidden_dim]
  Tensor pooled;  // [batch, hidden_dim]
  Tensor mask;    // [batch, max_len], 1.0 at non-PAD positions
};

/// Ordered name -> leaf map used when building differentiable graphs.
using VarMap = std::map<std::string, ad::Var>;

/// Differentiable outputs of the encoder trunk.
struct EncoderGraph {
  ad::Var hidden;  // [batch, max_len, hidden_dim]
  ad::Var pooled;  // [batch, hidden_dim]
  Tensor mask;     // [batch, max_len]
};

/// Fresh parameters: weights N(0, 0.02^2), biases zero, layer-norm gains
/// one, all drawn from a single stream seeded by config.seed in a fixed
/// parameter order.
EncoderState init_encoder(const EncoderConfig& config);

/// One autodiff leaf per parameter, in parameter order.
VarMap make_leaves(const EncoderState& state, bool requires_grad);

/// Build the full differentiable encoder over a batch; every sequence must
/// have length config.max_len.
EncoderGraph encoder_graph(const VarMap& params, const EncoderConfig& config,
                           const std::vector<TokenSequence>& batch);

/// Inference-only forward pass.
EncodedBatch forward(const EncoderState& state,
                     const std::vector<TokenSequence>& batch);

/// Scaled dot-product attention with PAD keys masked out.
/// q, k, v: [batch, heads, len, head_dim]; mask: [batch, len].
ad::Var full_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v,
                       const Tensor& mask);

/// Shared-QK LSH attention: hash rounds bucket positions by random
/// rotations of the (tied) query/key vectors, buckets are sorted and
/// chunked, and each chunk attends within itself plus one circular
/// look-back chunk; rounds are combined with logsumexp weights.
/// bucket_size must divide the sequence length.
ad::Var lsh_attention(const ad::Var& qk, const ad::Var& v, const Tensor& mask,
                      int num_hashes, int bucket_size, std::uint64_t seed);

/// Grow the learned position table to new_max_len; new row i copies old row
/// (i mod old_max_len), every other tensor is copied verbatim.
EncoderState extend_positions(const EncoderState& state, int new_max_len);

/// Checkpoint container: JSON header (kind, config, tensor directory), a
/// newline, a NUL byte, then raw little-endian 64-bit values in directory
/// order. Round trips are bit-exact.
void save_checkpoint(const EncoderState& state, const std::string& path);
EncoderState load_checkpoint(const std::string& path);

/// Instrumented cost counter: attention score-matrix elements materialized
/// on this thread since the last reset (full attention grows as L^2).
std::int64_t attention_score_elements();
void reset_attention_score_elements();

}  // namespace bugloc
