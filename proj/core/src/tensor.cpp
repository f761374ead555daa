#include "bugloc/tensor.hpp"

#include <cmath>
#include <cstring>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include "bugloc/error.hpp"

namespace bugloc {

namespace {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic, Eigen::RowMajor>>;

// One output slice C[m x n] (+)= A x B, computed serially by Eigen. Row
// chunking for parallelism happens a level up with fixed chunk sizes so
// results do not depend on the thread count.
void gemm_slice(const double* a, const double* b, double* c, std::int64_t m,
                std::int64_t k, std::int64_t n, bool ta, bool tb, bool acc) {
  MatMap C(c, m, n);
  const ConstMatMap A(a, ta ? k : m, ta ? m : k);
  const ConstMatMap B(b, tb ? n : k, tb ? k : n);
  if (!ta && !tb) {
    if (acc) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    if (acc) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    if (acc) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (acc) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

struct MatmulDims {
  std::int64_t batch;    // number of slices
  std::int64_t m, k, n;
  bool a_batched, b_batched;
};

MatmulDims resolve_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2)
    throw Error("matmul: operands must have rank >= 2");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const std::int64_t am = sa[sa.size() - 2], ak = sa[sa.size() - 1];
  const std::int64_t bk = sb[sb.size() - 2], bn = sb[sb.size() - 1];
  MatmulDims d{};
  d.m = ta ? ak : am;
  d.k = ta ? am : ak;
  const std::int64_t k2 = tb ? bn : bk;
  d.n = tb ? bk : bn;
  if (d.k != k2) throw Error("matmul: inner dimensions do not match");

  auto lead = [](const std::vector<std::int64_t>& s) {
    std::int64_t p = 1;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) p *= s[i];
    return p;
  };
  const std::int64_t la = lead(sa), lb = lead(sb);
  d.a_batched = a.rank() > 2;
  d.b_batched = b.rank() > 2;
  if (d.a_batched && d.b_batched) {
    if (la != lb ||
        !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2))
      throw Error("matmul: batch dimensions do not match");
    d.batch = la;
  } else {
    d.batch = d.a_batched ? la : lb;
  }
  return d;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)),
      data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<std::int64_t> shape, double fill)
    : shape_(std::move(shape)),
      data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
    throw Error("Tensor: shape does not match data size");
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (const std::int64_t d : shape) {
    if (d < 0) throw Error("Tensor: negative dimension");
    n *= d;
  }
  return n;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  if (shape_numel(shape) != numel())
    throw Error("Tensor::reshaped: element count mismatch");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  for (const double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  const MatmulDims d = resolve_dims(a, b, trans_a, trans_b);
  std::vector<std::int64_t> out_shape;
  const auto& lead_src = d.a_batched ? a.shape() : b.shape();
  out_shape.assign(lead_src.begin(), lead_src.end() - 2);
  out_shape.push_back(d.m);
  out_shape.push_back(d.n);
  Tensor c(std::move(out_shape));
  matmul_acc(c, a, b, trans_a, trans_b);
  return c;
}

void matmul_acc(Tensor& c, const Tensor& a, const Tensor& b, bool trans_a,
                bool trans_b) {
  const MatmulDims d = resolve_dims(a, b, trans_a, trans_b);
  const std::int64_t a_step = d.a_batched ? d.m * d.k : 0;
  const std::int64_t b_step = d.b_batched ? d.k * d.n : 0;
  const std::int64_t c_step = d.m * d.n;
  if (c.numel() != d.batch * c_step) {
    // A rank-2 accumulator against batched operands sums over the slices;
    // this is the gradient of a weight shared across the batch. Keep the
    // slice order serial so the result never depends on the thread count.
    if (c.rank() == 2 && c.numel() == c_step) {
      for (std::int64_t s = 0; s < d.batch; ++s)
        gemm_slice(a.data() + s * a_step, b.data() + s * b_step, c.data(), d.m,
                   d.k, d.n, trans_a, trans_b, true);
      return;
    }
    throw Error("matmul_acc: accumulator shape mismatch");
  }

  if (d.batch > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < d.batch; ++s) {
      gemm_slice(a.data() + s * a_step, b.data() + s * b_step,
                 c.data() + s * c_step, d.m, d.k, d.n, trans_a, trans_b, true);
    }
    return;
  }

  // Single big slice: chunk output rows at a fixed granularity. Each chunk is
  // a serial Eigen product, so values are identical for any thread count.
  // Transposed A would make row chunks non-contiguous; keep that case serial
  // (it only appears in small backward products).
  constexpr std::int64_t kChunk = 256;
  if (trans_a || d.m <= kChunk) {
    gemm_slice(a.data(), b.data(), c.data(), d.m, d.k, d.n, trans_a, trans_b,
               true);
    return;
  }
  const std::int64_t nchunks = (d.m + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < nchunks; ++ci) {
    const std::int64_t r0 = ci * kChunk;
    const std::int64_t rows = std::min(kChunk, d.m - r0);
    gemm_slice(a.data() + r0 * d.k, b.data(), c.data() + r0 * d.n, rows, d.k,
               d.n, false, trans_b, true);
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("add: shape mismatch");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] + b[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("sub: shape mismatch");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] - b[i];
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("mul: shape mismatch");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] * b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] * s;
  return c;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("add_inplace: shape mismatch");
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i];
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace bugloc
