#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "bugloc/tensor.hpp"

namespace bugloc::ad {

// Reverse-mode autodiff over Tensor. Each op builds a Node holding the
// forward value and a closure that scatters the incoming gradient to its
// parents. Graphs are small (desk-scale models), so shared_ptr DAGs and
// per-op closures are plenty fast; correctness is enforced by the
// finite-difference tests in tests/.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

/// Trainable input; the gradient lands on the node after backward().
Var leaf(Tensor value, bool requires_grad = true);
/// Non-trainable input.
Var constant(Tensor value);

inline const Tensor& val(const Var& v) { return v->value; }
inline const Tensor& grad(const Var& v) { return v->grad; }

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// x + c for a constant tensor of the same shape (e.g. attention mask bias).
Var add_const(const Var& x, Tensor c);
Var gelu(const Var& x);
Var relu(const Var& x);

// ---- broadcasting helpers ----
/// x[..., d] + b[d]
Var add_rowbias(const Var& x, const Var& b);
/// x[..., d] * w[...]; w has x's shape minus the last axis.
Var mul_lastbroadcast(const Var& x, const Var& w);

// ---- shape ----
Var reshape(const Var& a, std::vector<std::int64_t> shape);
/// [B, L, H] -> [B, nh, L, H/nh]
Var split_heads(const Var& x, int num_heads);
/// [B, nh, L, dh] -> [B, L, nh*dh]
Var merge_heads(const Var& x);
/// k same-shape tensors -> [..., k]
Var stack_last(const std::vector<Var>& xs);
/// x[..., r] -> [...]
Var slice_last(const Var& x, std::int64_t r);

// ---- indexing ----
/// x viewed as [R, rest]; picks rows. Gradient is scatter-add, so rows that
/// are never picked receive exactly zero gradient.
Var gather_rows(const Var& x, std::vector<std::int64_t> idx);
/// x [B, H, L, D], idx flat [B*H*L] with values in [0, L): per-slice
/// permutation of the L axis (LSH bucket sort and its inverse).
Var permute_positions(const Var& x, std::vector<std::int64_t> idx);
/// x [B, H, C, m, D] -> [B, H, C, 2m, D]: previous chunk (circular) followed
/// by the chunk itself, the Reformer look-back window.
Var with_lookback(const Var& x);

// ---- matmul ----
/// Trailing-axes product; leading dims must match exactly (reshape first for
/// shared weights). trans_a / trans_b transpose the trailing two axes.
Var matmul(const Var& a, const Var& b, bool trans_a = false,
           bool trans_b = false);

// ---- reductions / normalization ----
Var softmax_last(const Var& x);
Var logsumexp_last(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias,
               double eps = 1e-5);
/// scores [B, h, Lq, Lk] + bias[b, k] broadcast over heads and queries.
Var add_key_bias(const Var& scores, Tensor key_bias);
Var mean_all(const Var& x);
Var sum_all(const Var& x);

// ---- heads / losses ----
/// x [B, L, Cin], w [Cout, Cin, K] (K odd), b [Cout] -> [B, L, Cout],
/// zero-padded "same" convolution over the token axis.
Var conv1d_same(const Var& x, const Var& w, const Var& b);
/// [B, L, C] -> [B, C]; max over the token axis (first index wins ties).
Var maxpool_time(const Var& x);
/// logits [N, C], one target class per row; mean cross-entropy, scalar [1].
Var cross_entropy_logits(const Var& logits, std::vector<std::int64_t> targets);
/// logits [N], targets in {0,1}; mean binary cross-entropy, scalar [1].
Var bce_logits(const Var& logits, Tensor targets);

/// Backpropagate from a scalar root (shape [1]).
void backward(const Var& root);

}  // namespace bugloc::ad
