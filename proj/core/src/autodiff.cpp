#include "bugloc/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include <Eigen/Core>

#include "bugloc/error.hpp"

namespace bugloc::ad {

namespace {

std::atomic<std::uint64_t> g_order{0};

Var make_node(Tensor value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->order = ++g_order;
  n->requires_grad = false;
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->order = ++g_order;
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  Var out = make_node(bugloc::add(a->value, b->value), {a, b});
  if (out->requires_grad)
    out->backprop = [a, b](Node& self) {
      if (a->requires_grad) add_inplace(a->ensure_grad(), self.grad);
      if (b->requires_grad) add_inplace(b->ensure_grad(), self.grad);
    };
  return out;
}

Var sub(const Var& a, const Var& b) {
  Var out = make_node(bugloc::sub(a->value, b->value), {a, b});
  if (out->requires_grad)
    out->backprop = [a, b](Node& self) {
      if (a->requires_grad) add_inplace(a->ensure_grad(), self.grad);
      if (b->requires_grad) {
        Tensor& g = b->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
      }
    };
  return out;
}

Var mul(const Var& a, const Var& b) {
  Var out = make_node(bugloc::mul(a->value, b->value), {a, b});
  if (out->requires_grad)
    out->backprop = [a, b](Node& self) {
      if (a->requires_grad) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i)
          g[i] += self.grad[i] * b->value[i];
      }
      if (b->requires_grad) {
        Tensor& g = b->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i)
          g[i] += self.grad[i] * a->value[i];
      }
    };
  return out;
}

Var scale(const Var& a, double s) {
  Var out = make_node(bugloc::scale(a->value, s), {a});
  if (out->requires_grad)
    out->backprop = [a, s](Node& self) {
      Tensor& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
    };
  return out;
}

Var add_const(const Var& x, Tensor c) {
  Var out = make_node(bugloc::add(x->value, c), {x});
  if (out->requires_grad)
    out->backprop = [x](Node& self) {
      add_inplace(x->ensure_grad(), self.grad);
    };
  return out;
}

Var gelu(const Var& x) {
  Tensor y(x->value.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const double v = x->value[i];
    y[i] = v * norm_cdf(v);
  }
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        const double v = x->value[i];
        g[i] += self.grad[i] * (norm_cdf(v) + v * norm_pdf(v));
      }
    };
  return out;
}

Var relu(const Var& x) {
  Tensor y(x->value.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i)
    y[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (x->value[i] > 0.0) g[i] += self.grad[i];
    };
  return out;
}

Var add_rowbias(const Var& x, const Var& b) {
  const std::int64_t d = x->value.shape().back();
  if (b->value.numel() != d) throw Error("add_rowbias: bias size mismatch");
  Tensor y(x->value.shape());
  const std::int64_t rows = x->value.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      y[r * d + j] = x->value[r * d + j] + b->value[j];
  Var out = make_node(std::move(y), {x, b});
  if (out->requires_grad)
    out->backprop = [x, b, rows, d](Node& self) {
      if (x->requires_grad) add_inplace(x->ensure_grad(), self.grad);
      if (b->requires_grad) {
        Tensor& g = b->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
      }
    };
  return out;
}

Var mul_lastbroadcast(const Var& x, const Var& w) {
  const std::int64_t d = x->value.shape().back();
  const std::int64_t rows = x->value.numel() / d;
  if (w->value.numel() != rows)
    throw Error("mul_lastbroadcast: weight shape mismatch");
  Tensor y(x->value.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      y[r * d + j] = x->value[r * d + j] * w->value[r];
  Var out = make_node(std::move(y), {x, w});
  if (out->requires_grad)
    out->backprop = [x, w, rows, d](Node& self) {
      if (x->requires_grad) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j)
            g[r * d + j] += self.grad[r * d + j] * w->value[r];
      }
      if (w->requires_grad) {
        Tensor& g = w->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::int64_t j = 0; j < d; ++j)
            s += self.grad[r * d + j] * x->value[r * d + j];
          g[r] += s;
        }
      }
    };
  return out;
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  Var out = make_node(a->value.reshaped(std::move(shape)), {a});
  if (out->requires_grad)
    out->backprop = [a](Node& self) {
      Tensor& g = a->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    };
  return out;
}

Var split_heads(const Var& x, int num_heads) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw Error("split_heads: expects [B, L, H]");
  const std::int64_t B = s[0], L = s[1], H = s[2];
  if (H % num_heads != 0) throw Error("split_heads: H not divisible by heads");
  const std::int64_t nh = num_heads, dh = H / nh;
  Tensor y({B, nh, L, dh});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < nh; ++h)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t d = 0; d < dh; ++d)
          y[((b * nh + h) * L + l) * dh + d] =
              x->value[(b * L + l) * H + h * dh + d];
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, B, nh, L, dh, H](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < nh; ++h)
          for (std::int64_t l = 0; l < L; ++l)
            for (std::int64_t d = 0; d < dh; ++d)
              g[(b * L + l) * H + h * dh + d] +=
                  self.grad[((b * nh + h) * L + l) * dh + d];
    };
  return out;
}

Var merge_heads(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw Error("merge_heads: expects [B, nh, L, dh]");
  const std::int64_t B = s[0], nh = s[1], L = s[2], dh = s[3], H = nh * dh;
  Tensor y({B, L, H});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < nh; ++h)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t d = 0; d < dh; ++d)
          y[(b * L + l) * H + h * dh + d] =
              x->value[((b * nh + h) * L + l) * dh + d];
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, B, nh, L, dh, H](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < nh; ++h)
          for (std::int64_t l = 0; l < L; ++l)
            for (std::int64_t d = 0; d < dh; ++d)
              g[((b * nh + h) * L + l) * dh + d] +=
                  self.grad[(b * L + l) * H + h * dh + d];
    };
  return out;
}

Var stack_last(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("stack_last: empty input");
  const std::int64_t k = static_cast<std::int64_t>(xs.size());
  const std::int64_t n = xs[0]->value.numel();
  for (const auto& x : xs)
    if (!x->value.same_shape(xs[0]->value))
      throw Error("stack_last: shape mismatch");
  std::vector<std::int64_t> shape = xs[0]->value.shape();
  shape.push_back(k);
  Tensor y(std::move(shape));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t r = 0; r < k; ++r) y[i * k + r] = xs[r]->value[i];
  std::vector<Var> parents(xs.begin(), xs.end());
  Var out = make_node(std::move(y), std::move(parents));
  if (out->requires_grad)
    out->backprop = [xs, n, k](Node& self) {
      for (std::int64_t r = 0; r < k; ++r) {
        if (!xs[static_cast<std::size_t>(r)]->requires_grad) continue;
        Tensor& g = xs[static_cast<std::size_t>(r)]->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) g[i] += self.grad[i * k + r];
      }
    };
  return out;
}

Var slice_last(const Var& x, std::int64_t r) {
  const auto& s = x->value.shape();
  const std::int64_t k = s.back();
  if (r < 0 || r >= k) throw Error("slice_last: index out of range");
  std::vector<std::int64_t> shape(s.begin(), s.end() - 1);
  const std::int64_t n = x->value.numel() / k;
  Tensor y(shape.empty() ? std::vector<std::int64_t>{1} : shape);
  for (std::int64_t i = 0; i < n; ++i) y[i] = x->value[i * k + r];
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, n, k, r](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) g[i * k + r] += self.grad[i];
    };
  return out;
}

Var gather_rows(const Var& x, std::vector<std::int64_t> idx) {
  const auto& s = x->value.shape();
  if (s.empty()) throw Error("gather_rows: scalar input");
  const std::int64_t rows = s[0];
  const std::int64_t stride = rows == 0 ? 0 : x->value.numel() / rows;
  for (const std::int64_t i : idx)
    if (i < 0 || i >= rows) throw Error("gather_rows: index out of range");
  std::vector<std::int64_t> shape = s;
  shape[0] = static_cast<std::int64_t>(idx.size());
  Tensor y(std::move(shape));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x->value.data() + idx[r] * stride, stride,
                y.data() + static_cast<std::int64_t>(r) * stride);
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, idx = std::move(idx), stride](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = self.grad.data() + static_cast<std::int64_t>(r) * stride;
        double* dst = g.data() + idx[r] * stride;
        for (std::int64_t j = 0; j < stride; ++j) dst[j] += src[j];
      }
    };
  return out;
}

Var permute_positions(const Var& x, std::vector<std::int64_t> idx) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw Error("permute_positions: expects [B, H, L, D]");
  const std::int64_t B = s[0], H = s[1], L = s[2], D = s[3];
  if (static_cast<std::int64_t>(idx.size()) != B * H * L)
    throw Error("permute_positions: index size mismatch");
  Tensor y(s);
  for (std::int64_t bh = 0; bh < B * H; ++bh) {
    const double* src = x->value.data() + bh * L * D;
    double* dst = y.data() + bh * L * D;
    for (std::int64_t l = 0; l < L; ++l) {
      const std::int64_t j = idx[static_cast<std::size_t>(bh * L + l)];
      std::copy_n(src + j * D, D, dst + l * D);
    }
  }
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, idx = std::move(idx), B, H, L, D](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t bh = 0; bh < B * H; ++bh) {
        const double* src = self.grad.data() + bh * L * D;
        double* dst = g.data() + bh * L * D;
        for (std::int64_t l = 0; l < L; ++l) {
          const std::int64_t j = idx[static_cast<std::size_t>(bh * L + l)];
          for (std::int64_t d = 0; d < D; ++d) dst[j * D + d] += src[l * D + d];
        }
      }
    };
  return out;
}

Var with_lookback(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 5) throw Error("with_lookback: expects [B, H, C, m, D]");
  const std::int64_t B = s[0], H = s[1], C = s[2], m = s[3], D = s[4];
  Tensor y({B, H, C, 2 * m, D});
  const std::int64_t chunk = m * D;
  for (std::int64_t bh = 0; bh < B * H; ++bh) {
    const double* src = x->value.data() + bh * C * chunk;
    double* dst = y.data() + bh * C * 2 * chunk;
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t prev = (c + C - 1) % C;
      std::copy_n(src + prev * chunk, chunk, dst + c * 2 * chunk);
      std::copy_n(src + c * chunk, chunk, dst + c * 2 * chunk + chunk);
    }
  }
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, B, H, C, chunk](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t bh = 0; bh < B * H; ++bh) {
        const double* src = self.grad.data() + bh * C * 2 * chunk;
        double* dst = g.data() + bh * C * chunk;
        for (std::int64_t c = 0; c < C; ++c) {
          const std::int64_t prev = (c + C - 1) % C;
          for (std::int64_t j = 0; j < chunk; ++j) {
            dst[prev * chunk + j] += src[c * 2 * chunk + j];
            dst[c * chunk + j] += src[c * 2 * chunk + chunk + j];
          }
        }
      }
    };
  return out;
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  Var out = make_node(bugloc::matmul(a->value, b->value, trans_a, trans_b),
                      {a, b});
  if (out->requires_grad)
    out->backprop = [a, b, trans_a, trans_b](Node& self) {
      const Tensor& g = self.grad;
      if (a->requires_grad) {
        Tensor& ga = a->ensure_grad();
        if (!trans_a && !trans_b) matmul_acc(ga, g, b->value, false, true);
        else if (!trans_a && trans_b) matmul_acc(ga, g, b->value, false, false);
        else if (trans_a && !trans_b) matmul_acc(ga, b->value, g, false, true);
        else matmul_acc(ga, b->value, g, true, true);
      }
      if (b->requires_grad) {
        Tensor& gb = b->ensure_grad();
        if (!trans_a && !trans_b) matmul_acc(gb, a->value, g, true, false);
        else if (!trans_a && trans_b) matmul_acc(gb, g, a->value, true, false);
        else if (trans_a && !trans_b) matmul_acc(gb, a->value, g, false, false);
        else matmul_acc(gb, g, a->value, true, true);
      }
    };
  return out;
}

Var softmax_last(const Var& x) {
  const std::int64_t n = x->value.shape().back();
  const std::int64_t rows = x->value.numel() / n;
  Tensor y(x->value.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x->value.data() + r * n;
    double* o = y.data() + r * n;
    double m = in[0];
    for (std::int64_t j = 1; j < n; ++j) m = std::max(m, in[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (std::int64_t j = 0; j < n; ++j) o[j] *= inv;
  }
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, rows, n](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* yv = self.value.data() + r * n;
        const double* gy = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += gy[j] * yv[j];
        double* gx = g.data() + r * n;
        for (std::int64_t j = 0; j < n; ++j) gx[j] += yv[j] * (gy[j] - dot);
      }
    };
  return out;
}

Var logsumexp_last(const Var& x) {
  const auto& s = x->value.shape();
  const std::int64_t n = s.back();
  const std::int64_t rows = x->value.numel() / n;
  std::vector<std::int64_t> shape(s.begin(), s.end() - 1);
  Tensor y(shape.empty() ? std::vector<std::int64_t>{1} : shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x->value.data() + r * n;
    double m = in[0];
    for (std::int64_t j = 1; j < n; ++j) m = std::max(m, in[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) sum += std::exp(in[j] - m);
    y[r] = m + std::log(sum);
  }
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, rows, n](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double z = self.value[r];
        const double gy = self.grad[r];
        const double* in = x->value.data() + r * n;
        double* gx = g.data() + r * n;
        for (std::int64_t j = 0; j < n; ++j)
          gx[j] += gy * std::exp(in[j] - z);
      }
    };
  return out;
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::int64_t n = x->value.shape().back();
  if (gain->value.numel() != n || bias->value.numel() != n)
    throw Error("layer_norm: gain/bias size mismatch");
  const std::int64_t rows = x->value.numel() / n;
  Tensor y(x->value.shape());
  Tensor xhat(x->value.shape());
  Tensor inv_sigma({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x->value.data() + r * n;
    double mu = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = in[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = inv;
    for (std::int64_t j = 0; j < n; ++j) {
      const double h = (in[j] - mu) * inv;
      xhat[r * n + j] = h;
      y[r * n + j] = h * gain->value[j] + bias->value[j];
    }
  }
  Var out = make_node(std::move(y), {x, gain, bias});
  if (out->requires_grad)
    out->backprop = [x, gain, bias, rows, n, xhat = std::move(xhat),
                     inv_sigma = std::move(inv_sigma)](Node& self) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gy = self.grad.data() + r * n;
        const double* xh = xhat.data() + r * n;
        if (gain->requires_grad) {
          Tensor& gg = gain->ensure_grad();
          for (std::int64_t j = 0; j < n; ++j) gg[j] += gy[j] * xh[j];
        }
        if (bias->requires_grad) {
          Tensor& gb = bias->ensure_grad();
          for (std::int64_t j = 0; j < n; ++j) gb[j] += gy[j];
        }
        if (x->requires_grad) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::int64_t j = 0; j < n; ++j) {
            const double dxh = gy[j] * gain->value[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
          }
          mean_dxhat /= static_cast<double>(n);
          mean_dxhat_xhat /= static_cast<double>(n);
          Tensor& gx = x->ensure_grad();
          for (std::int64_t j = 0; j < n; ++j) {
            const double dxh = gy[j] * gain->value[j];
            gx[r * n + j] +=
                inv_sigma[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
          }
        }
      }
    };
  return out;
}

Var add_key_bias(const Var& scores, Tensor key_bias) {
  const auto& s = scores->value.shape();
  if (s.size() != 4) throw Error("add_key_bias: expects [B, h, Lq, Lk]");
  const std::int64_t B = s[0], h = s[1], Lq = s[2], Lk = s[3];
  if (key_bias.rank() != 2 || key_bias.dim(0) != B || key_bias.dim(1) != Lk)
    throw Error("add_key_bias: bias must be [B, Lk]");
  Tensor y(s);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t hh = 0; hh < h; ++hh)
      for (std::int64_t q = 0; q < Lq; ++q)
        for (std::int64_t k = 0; k < Lk; ++k)
          y[((b * h + hh) * Lq + q) * Lk + k] =
              scores->value[((b * h + hh) * Lq + q) * Lk + k] +
              key_bias[b * Lk + k];
  Var out = make_node(std::move(y), {scores});
  if (out->requires_grad)
    out->backprop = [scores](Node& self) {
      add_inplace(scores->ensure_grad(), self.grad);
    };
  return out;
}

Var mean_all(const Var& x) {
  const std::int64_t n = x->value.numel();
  Tensor y({1});
  y[0] = bugloc::sum(x->value) / static_cast<double>(n);
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, n](Node& self) {
      Tensor& g = x->ensure_grad();
      const double gy = self.grad[0] / static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) g[i] += gy;
    };
  return out;
}

Var sum_all(const Var& x) {
  Tensor y({1});
  y[0] = bugloc::sum(x->value);
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x](Node& self) {
      Tensor& g = x->ensure_grad();
      const double gy = self.grad[0];
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gy;
    };
  return out;
}

Var conv1d_same(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 3 || ws.size() != 3)
    throw Error("conv1d_same: expects x [B, L, Cin], w [Cout, Cin, K]");
  const std::int64_t B = xs[0], L = xs[1], Cin = xs[2];
  const std::int64_t Cout = ws[0], K = ws[2];
  if (ws[1] != Cin) throw Error("conv1d_same: channel mismatch");
  if (K % 2 == 0) throw Error("conv1d_same: kernel size must be odd");
  if (b->value.numel() != Cout) throw Error("conv1d_same: bias size mismatch");
  const std::int64_t P = (K - 1) / 2;

  // the kernel is stored [Cout, Cin, K]; peel one contiguous [Cout, Cin]
  // matrix per tap so every product below is a plain serial Eigen GEMM
  // (deterministic for any thread count)
  using Mat =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;
  const auto tap_matrix = [Cin, Cout, K](const Tensor& kernel,
                                         std::int64_t dk) {
    Mat m(Cout, Cin);
    for (std::int64_t co = 0; co < Cout; ++co)
      for (std::int64_t ci = 0; ci < Cin; ++ci)
        m(co, ci) = kernel[(co * Cin + ci) * K + dk];
    return m;
  };

  Tensor y({B, L, Cout});
  {
    MatMap ym(y.data(), B * L, Cout);
    for (std::int64_t co = 0; co < Cout; ++co)
      ym.col(co).setConstant(b->value[co]);
    for (std::int64_t dk = 0; dk < K; ++dk) {
      const Mat wk = tap_matrix(w->value, dk);
      const std::int64_t t0 = std::max<std::int64_t>(0, P - dk);
      const std::int64_t src0 = std::max<std::int64_t>(0, dk - P);
      const std::int64_t n = L - t0 - src0;
      for (std::int64_t bb = 0; bb < B; ++bb) {
        MatMap yb(y.data() + (bb * L + t0) * Cout, n, Cout);
        ConstMatMap xb(x->value.data() + (bb * L + src0) * Cin, n, Cin);
        yb.noalias() += xb * wk.transpose();
      }
    }
  }
  Var out = make_node(std::move(y), {x, w, b});
  if (out->requires_grad)
    out->backprop = [x, w, b, tap_matrix, B, L, Cin, Cout, K, P](Node& self) {
      ConstMatMap gy(self.grad.data(), B * L, Cout);
      if (b->requires_grad) {
        Tensor& gb = b->ensure_grad();
        MatMap(gb.data(), 1, Cout).noalias() += gy.colwise().sum();
      }
      for (std::int64_t dk = 0; dk < K; ++dk) {
        const std::int64_t t0 = std::max<std::int64_t>(0, P - dk);
        const std::int64_t src0 = std::max<std::int64_t>(0, dk - P);
        const std::int64_t n = L - t0 - src0;
        if (w->requires_grad) {
          Mat gwk = Mat::Zero(Cout, Cin);
          for (std::int64_t bb = 0; bb < B; ++bb) {
            ConstMatMap gyb(self.grad.data() + (bb * L + t0) * Cout, n, Cout);
            ConstMatMap xb(x->value.data() + (bb * L + src0) * Cin, n, Cin);
            gwk.noalias() += gyb.transpose() * xb;
          }
          Tensor& gw = w->ensure_grad();
          for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t ci = 0; ci < Cin; ++ci)
              gw[(co * Cin + ci) * K + dk] += gwk(co, ci);
        }
        if (x->requires_grad) {
          const Mat wk = tap_matrix(w->value, dk);
          Tensor& gx = x->ensure_grad();
          for (std::int64_t bb = 0; bb < B; ++bb) {
            ConstMatMap gyb(self.grad.data() + (bb * L + t0) * Cout, n, Cout);
            MatMap gxb(gx.data() + (bb * L + src0) * Cin, n, Cin);
            gxb.noalias() += gyb * wk;
          }
        }
      }
    };
  return out;
}

Var maxpool_time(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw Error("maxpool_time: expects [B, L, C]");
  const std::int64_t B = s[0], L = s[1], C = s[2];
  if (L == 0) throw Error("maxpool_time: empty time axis");
  Tensor y({B, C});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(B * C), 0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      double best = x->value[(b * L) * C + c];
      std::int64_t bi = 0;
      for (std::int64_t t = 1; t < L; ++t) {
        const double v = x->value[(b * L + t) * C + c];
        if (v > best) {
          best = v;
          bi = t;
        }
      }
      y[b * C + c] = best;
      arg[static_cast<std::size_t>(b * C + c)] = bi;
    }
  Var out = make_node(std::move(y), {x});
  if (out->requires_grad)
    out->backprop = [x, arg = std::move(arg), B, L, C](Node& self) {
      Tensor& g = x->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const std::int64_t t = arg[static_cast<std::size_t>(b * C + c)];
          g[(b * L + t) * C + c] += self.grad[b * C + c];
        }
    };
  return out;
}

Var cross_entropy_logits(const Var& logits,
                         std::vector<std::int64_t> targets) {
  const auto& s = logits->value.shape();
  if (s.size() != 2) throw Error("cross_entropy_logits: expects [N, C]");
  const std::int64_t N = s[0], C = s[1];
  if (static_cast<std::int64_t>(targets.size()) != N)
    throw Error("cross_entropy_logits: target count mismatch");
  if (N == 0) throw Error("cross_entropy_logits: empty batch");
  Tensor probs({N, C});
  double loss = 0.0;
  for (std::int64_t r = 0; r < N; ++r) {
    const std::int64_t t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= C) throw Error("cross_entropy_logits: target out of range");
    const double* in = logits->value.data() + r * C;
    double m = in[0];
    for (std::int64_t j = 1; j < C; ++j) m = std::max(m, in[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < C; ++j) {
      probs[r * C + j] = std::exp(in[j] - m);
      sum += probs[r * C + j];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < C; ++j) probs[r * C + j] *= inv;
    loss -= in[t] - m - std::log(sum);
  }
  Tensor y({1});
  y[0] = loss / static_cast<double>(N);
  Var out = make_node(std::move(y), {logits});
  if (out->requires_grad)
    out->backprop = [logits, targets = std::move(targets),
                     probs = std::move(probs), N, C](Node& self) {
      Tensor& g = logits->ensure_grad();
      const double gy = self.grad[0] / static_cast<double>(N);
      for (std::int64_t r = 0; r < N; ++r) {
        const std::int64_t t = targets[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < C; ++j)
          g[r * C + j] += gy * (probs[r * C + j] - (j == t ? 1.0 : 0.0));
      }
    };
  return out;
}

Var bce_logits(const Var& logits, Tensor targets) {
  if (!logits->value.same_shape(targets))
    throw Error("bce_logits: shape mismatch");
  const std::int64_t N = logits->value.numel();
  if (N == 0) throw Error("bce_logits: empty batch");
  double loss = 0.0;
  for (std::int64_t i = 0; i < N; ++i) {
    const double z = logits->value[i];
    const double t = targets[i];
    loss += std::max(z, 0.0) - t * z + std::log1p(std::exp(-std::fabs(z)));
  }
  Tensor y({1});
  y[0] = loss / static_cast<double>(N);
  Var out = make_node(std::move(y), {logits});
  if (out->requires_grad)
    out->backprop = [logits, targets = std::move(targets), N](Node& self) {
      Tensor& g = logits->ensure_grad();
      const double gy = self.grad[0] / static_cast<double>(N);
      for (std::int64_t i = 0; i < N; ++i) {
        const double z = logits->value[i];
        const double sz = 1.0 / (1.0 + std::exp(-z));
        g[i] += gy * (sz - targets[i]);
      }
    };
  return out;
}

void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw Error("backward: root must be a scalar");
  if (!root->requires_grad)
    throw Error("backward: root does not require grad");
  root->ensure_grad()[0] = 1.0;

  // topological order by creation index
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->order > b->order; });
  for (Node* n : order)
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
}

}  // namespace bugloc::ad
