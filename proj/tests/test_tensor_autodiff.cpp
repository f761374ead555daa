#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "bugloc/autodiff.hpp"
#include "bugloc/error.hpp"
#include "bugloc/rng.hpp"
#include "bugloc/tensor.hpp"

using namespace bugloc;
namespace ad = bugloc::ad;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                     double scl = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scl;
  return t;
}

/// Plain triple-loop reference for rank-2 matmul, the oracle the fast path
/// is checked against.
Tensor naive_matmul2d(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  const std::int64_t m = ta ? a.dim(1) : a.dim(0);
  const std::int64_t k = ta ? a.dim(0) : a.dim(1);
  const std::int64_t n = tb ? b.dim(0) : b.dim(1);
  Tensor c({m, n}, 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) {
        const double av = ta ? a.at(p, i) : a.at(i, p);
        const double bv = tb ? b.at(j, p) : b.at(p, j);
        s += av * bv;
      }
      c.at(i, j) = s;
    }
  return c;
}

using GraphFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

double eval_scalar(const GraphFn& f, const std::vector<Tensor>& vals) {
  std::vector<ad::Var> leaves;
  leaves.reserve(vals.size());
  for (const auto& v : vals) leaves.push_back(ad::leaf(v));
  const ad::Var root = f(leaves);
  REQUIRE(ad::val(root).numel() == 1);
  return ad::val(root)[0];
}

/// Central-difference check of every input element against the analytic
/// gradient from backward().
void gradcheck(const GraphFn& f, std::vector<Tensor> vals, double h = 1e-5,
               double tol = 2e-6) {
  std::vector<ad::Var> leaves;
  leaves.reserve(vals.size());
  for (const auto& v : vals) leaves.push_back(ad::leaf(v));
  const ad::Var root = f(leaves);
  REQUIRE(ad::val(root).numel() == 1);
  ad::backward(root);
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const Tensor& g = ad::grad(leaves[i]);
    REQUIRE(!g.empty());
    for (std::int64_t j = 0; j < vals[i].numel(); ++j) {
      const double keep = vals[i][j];
      vals[i][j] = keep + h;
      const double fp = eval_scalar(f, vals);
      vals[i][j] = keep - h;
      const double fm = eval_scalar(f, vals);
      vals[i][j] = keep;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = g[j];
      const double rel =
          std::abs(num - ana) / (std::abs(num) + std::abs(ana) + 1e-8);
      INFO("input ", i, " element ", j, " numeric ", num, " analytic ", ana);
      CHECK(rel < tol);
    }
  }
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights so that
/// every output element influences the loss with a distinct coefficient.
ad::Var weighted(const ad::Var& y, const Tensor& w) {
  return ad::sum_all(ad::mul(y, ad::constant(w)));
}

}  // namespace

// ---------------------------------------------------------------- tensor --

TEST_CASE("tensor construction and reshape") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  for (std::int64_t i = 0; i < 6; ++i) CHECK(t[i] == 1.5);
  Tensor r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK(r[5] == 1.5);
  CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
  CHECK(Tensor::scalar(2.0).numel() == 1);
}

TEST_CASE("elementwise ops and shape guards") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(add(a, b)[3] == 12);
  CHECK(sub(b, a)[0] == 4);
  CHECK(mul(a, b)[1] == 12);
  CHECK(scale(a, 2.0)[2] == 6);
  CHECK(sum(a) == 10);
  CHECK(max_abs_diff(a, b) == 4);
  Tensor c({4}, 0.0);
  CHECK_THROWS_AS(add(a, c), Error);
  add_inplace(a, b);
  CHECK(a[0] == 6);
}

TEST_CASE("matmul matches the naive oracle for every transpose combo") {
  Rng rng(101);
  for (const bool ta : {false, true})
    for (const bool tb : {false, true}) {
      const std::int64_t m = 5, k = 7, n = 3;
      Tensor a = ta ? random_tensor({k, m}, rng) : random_tensor({m, k}, rng);
      Tensor b = tb ? random_tensor({n, k}, rng) : random_tensor({k, n}, rng);
      const Tensor got = matmul(a, b, ta, tb);
      const Tensor want = naive_matmul2d(a, b, ta, tb);
      CHECK(got.same_shape(want));
      CHECK(max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("batched matmul and rank-2 broadcast") {
  Rng rng(55);
  Tensor a = random_tensor({2, 3, 4, 5}, rng);
  Tensor b = random_tensor({2, 3, 5, 6}, rng);
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<std::int64_t>({2, 3, 4, 6}));
  // slice 4 of the batch, checked against the 2-D oracle
  Tensor a1({4, 5});
  Tensor b1({5, 6});
  std::memcpy(a1.data(), a.data() + 4 * 20, 20 * sizeof(double));
  std::memcpy(b1.data(), b.data() + 4 * 30, 30 * sizeof(double));
  const Tensor want = naive_matmul2d(a1, b1, false, false);
  Tensor got({4, 6});
  std::memcpy(got.data(), c.data() + 4 * 24, 24 * sizeof(double));
  CHECK(max_abs_diff(got, want) < 1e-12);

  // one shared rank-2 operand against a batched one
  Tensor w = random_tensor({5, 6}, rng);
  const Tensor cw = matmul(a, w);
  CHECK(cw.shape() == std::vector<std::int64_t>({2, 3, 4, 6}));
  Tensor got2({4, 6});
  std::memcpy(got2.data(), cw.data() + 4 * 24, 24 * sizeof(double));
  CHECK(max_abs_diff(got2, naive_matmul2d(a1, w, false, false)) < 1e-12);

  Tensor bad = random_tensor({3, 5, 6}, rng);
  CHECK_THROWS_AS(matmul(a, bad), Error);
}

TEST_CASE("matmul_acc accumulates into the destination") {
  Rng rng(77);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c({3, 2}, 1.0);
  matmul_acc(c, a, b);
  Tensor want = naive_matmul2d(a, b, false, false);
  for (std::int64_t i = 0; i < want.numel(); ++i) want[i] += 1.0;
  CHECK(max_abs_diff(c, want) < 1e-12);
}

#ifdef _OPENMP
TEST_CASE("matmul is bitwise identical across thread counts") {
  Rng rng(31);
  Tensor a = random_tensor({700, 48}, rng);
  Tensor b = random_tensor({48, 64}, rng);
  Tensor big_a = random_tensor({6, 32, 40}, rng);
  Tensor big_b = random_tensor({6, 40, 24}, rng);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const Tensor c1 = matmul(a, b);
  const Tensor d1 = matmul(big_a, big_b);
  omp_set_num_threads(saved > 1 ? saved : 4);
  const Tensor cn = matmul(a, b);
  const Tensor dn = matmul(big_a, big_b);
  omp_set_num_threads(saved);
  CHECK(std::memcmp(c1.data(), cn.data(),
                    static_cast<std::size_t>(c1.numel()) * sizeof(double)) == 0);
  CHECK(std::memcmp(d1.data(), dn.data(),
                    static_cast<std::size_t>(d1.numel()) * sizeof(double)) == 0);
}
#endif

// -------------------------------------------------------------- autodiff --

TEST_CASE("gradcheck elementwise ops") {
  Rng rng(1);
  const Tensor w = random_tensor({2, 3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::add(in[0], in[1]), w);
      },
      {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::sub(in[0], in[1]), w);
      },
      {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::mul(in[0], in[1]), w);
      },
      {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::scale(in[0], -1.7), w);
      },
      {random_tensor({2, 3}, rng)});
  const Tensor c = random_tensor({2, 3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::add_const(in[0], c), w);
      },
      {random_tensor({2, 3}, rng)});
}

TEST_CASE("gradcheck activations") {
  Rng rng(2);
  const Tensor w = random_tensor({3, 4}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::gelu(in[0]), w);
      },
      {random_tensor({3, 4}, rng)});
  // keep relu inputs away from the kink
  Tensor x = random_tensor({3, 4}, rng);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.1) x[i] = x[i] < 0 ? -0.5 : 0.5;
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::relu(in[0]), w);
      },
      {x});
}

TEST_CASE("gelu forward matches the exact cdf form") {
  const ad::Var x = ad::leaf(Tensor({3}, {-1.0, 0.0, 2.0}), false);
  const Tensor y = ad::val(ad::gelu(x));
  CHECK(y[0] == doctest::Approx(-1.0 * 0.5 * std::erfc(1.0 / std::sqrt(2.0)))
                    .epsilon(1e-12));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == doctest::Approx(2.0 * 0.5 * std::erfc(-2.0 / std::sqrt(2.0)))
                    .epsilon(1e-12));
}

TEST_CASE("gradcheck broadcast helpers") {
  Rng rng(3);
  const Tensor w = random_tensor({2, 3, 4}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::add_rowbias(in[0], in[1]), w);
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({4}, rng)});
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::mul_lastbroadcast(in[0], in[1]), w);
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 3}, rng)});
}

TEST_CASE("gradcheck shape ops") {
  Rng rng(4);
  const Tensor w = random_tensor({6, 2}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::reshape(in[0], {6, 2}), w);
      },
      {random_tensor({3, 4}, rng)});

  const Tensor wh = random_tensor({2, 2, 3, 2}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::split_heads(in[0], 2), wh);
      },
      {random_tensor({2, 3, 4}, rng)});
  const Tensor wm = random_tensor({2, 3, 4}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::merge_heads(ad::split_heads(in[0], 2)), wm);
      },
      {random_tensor({2, 3, 4}, rng)});

  const Tensor ws = random_tensor({2, 3, 2}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::stack_last({in[0], in[1]}), ws);
      },
      {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  const Tensor wsl = random_tensor({2, 3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::slice_last(in[0], 1), wsl);
      },
      {random_tensor({2, 3, 4}, rng)});
}

TEST_CASE("split and merge heads invert each other") {
  Rng rng(12);
  const Tensor x = random_tensor({2, 5, 6}, rng);
  const ad::Var v = ad::leaf(x, false);
  const Tensor back = ad::val(ad::merge_heads(ad::split_heads(v, 3)));
  CHECK(max_abs_diff(back, x) == 0.0);
  const Tensor h = ad::val(ad::split_heads(v, 3));
  // head 1 of batch 0, position 2 is channels 2..3 of the flat row
  CHECK(h[((0 * 3 + 1) * 5 + 2) * 2 + 0] == x[(0 * 5 + 2) * 6 + 2]);
  CHECK(h[((0 * 3 + 1) * 5 + 2) * 2 + 1] == x[(0 * 5 + 2) * 6 + 3]);
}

TEST_CASE("gather_rows gradient is scatter-add with exact zeros elsewhere") {
  Rng rng(5);
  const Tensor w = random_tensor({3, 4}, rng);
  const std::vector<std::int64_t> idx{1, 3, 1};
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::gather_rows(in[0], idx), w);
      },
      {random_tensor({5, 4}, rng)});

  const ad::Var x = ad::leaf(random_tensor({5, 4}, rng));
  const ad::Var root = weighted(ad::gather_rows(x, idx), w);
  ad::backward(root);
  const Tensor& g = ad::grad(x);
  for (std::int64_t j = 0; j < 4; ++j) {
    CHECK(g[0 * 4 + j] == 0.0);
    CHECK(g[2 * 4 + j] == 0.0);
    CHECK(g[4 * 4 + j] == 0.0);
    // row 1 was picked twice, so both contributions accumulate
    CHECK(g[1 * 4 + j] == doctest::Approx(w[0 * 4 + j] + w[2 * 4 + j])
                              .epsilon(1e-12));
  }
}

TEST_CASE("permute_positions applies per-slice permutations") {
  Rng rng(6);
  const Tensor x = random_tensor({1, 2, 4, 3}, rng);
  const std::vector<std::int64_t> idx{2, 0, 3, 1, 1, 3, 0, 2};
  const ad::Var v = ad::leaf(x, false);
  const Tensor y = ad::val(ad::permute_positions(v, idx));
  for (std::int64_t h = 0; h < 2; ++h)
    for (std::int64_t l = 0; l < 4; ++l)
      for (std::int64_t d = 0; d < 3; ++d)
        CHECK(y[(h * 4 + l) * 3 + d] ==
              x[(h * 4 + idx[static_cast<std::size_t>(h * 4 + l)]) * 3 + d]);

  const Tensor w = random_tensor({1, 2, 4, 3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::permute_positions(in[0], idx), w);
      },
      {random_tensor({1, 2, 4, 3}, rng)});
}

TEST_CASE("with_lookback prepends the previous chunk circularly") {
  Rng rng(7);
  const Tensor x = random_tensor({1, 1, 3, 2, 2}, rng);
  const ad::Var v = ad::leaf(x, false);
  const Tensor y = ad::val(ad::with_lookback(v));
  CHECK(y.shape() == std::vector<std::int64_t>({1, 1, 3, 4, 2}));
  for (std::int64_t c = 0; c < 3; ++c) {
    const std::int64_t prev = (c + 2) % 3;
    for (std::int64_t j = 0; j < 4; ++j) {
      CHECK(y[(c * 4 + 0) * 2 + j % 2 + (j / 2) * 2] ==
            x[(prev * 2 + 0) * 2 + j % 2 + (j / 2) * 2]);
    }
    for (std::int64_t m = 0; m < 2; ++m)
      for (std::int64_t d = 0; d < 2; ++d) {
        CHECK(y[(c * 4 + m) * 2 + d] == x[(prev * 2 + m) * 2 + d]);
        CHECK(y[(c * 4 + 2 + m) * 2 + d] == x[(c * 2 + m) * 2 + d]);
      }
  }

  // single chunk: the look-back window sees the chunk itself twice
  const Tensor x1 = random_tensor({1, 1, 1, 3, 2}, rng);
  const Tensor y1 = ad::val(ad::with_lookback(ad::leaf(x1, false)));
  for (std::int64_t j = 0; j < 6; ++j) {
    CHECK(y1[j] == x1[j]);
    CHECK(y1[6 + j] == x1[j]);
  }

  const Tensor w = random_tensor({1, 2, 3, 4, 2}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::with_lookback(in[0]), w);
      },
      {random_tensor({1, 2, 3, 2, 2}, rng)});
}

TEST_CASE("gradcheck matmul for every transpose combo") {
  Rng rng(8);
  for (const bool ta : {false, true})
    for (const bool tb : {false, true}) {
      const std::int64_t m = 3, k = 4, n = 2;
      const Tensor w = random_tensor({m, n}, rng);
      gradcheck(
          [&](const std::vector<ad::Var>& in) {
            return weighted(ad::matmul(in[0], in[1], ta, tb), w);
          },
          {ta ? random_tensor({k, m}, rng) : random_tensor({m, k}, rng),
           tb ? random_tensor({n, k}, rng) : random_tensor({k, n}, rng)});
    }
  // batched with matching leading dims
  const Tensor wb = random_tensor({2, 3, 2}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::matmul(in[0], in[1]), wb);
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)});
  // batched activations against a shared rank-2 weight: the weight gradient
  // must sum over the batch instead of spilling past its buffer
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::matmul(in[0], in[1]), wb);
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({4, 2}, rng)});
  const Tensor ws = random_tensor({2, 4, 4}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::matmul(in[0], in[1], true, true), ws);
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({4, 3}, rng)});
}

TEST_CASE("gradcheck softmax and logsumexp") {
  Rng rng(9);
  const Tensor w = random_tensor({3, 5}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::softmax_last(in[0]), w);
      },
      {random_tensor({3, 5}, rng)});
  const Tensor wl = random_tensor({3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::logsumexp_last(in[0]), wl);
      },
      {random_tensor({3, 5}, rng)});
}

TEST_CASE("softmax rows sum to one and logsumexp matches the naive form") {
  Rng rng(10);
  const Tensor x = random_tensor({4, 6}, rng, 3.0);
  const Tensor y = ad::val(ad::softmax_last(ad::leaf(x, false)));
  for (std::int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 6; ++j) s += y[r * 6 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Tensor z = ad::val(ad::logsumexp_last(ad::leaf(x, false)));
  for (std::int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 6; ++j) s += std::exp(x[r * 6 + j]);
    CHECK(z[r] == doctest::Approx(std::log(s)).epsilon(1e-12));
  }
}

TEST_CASE("gradcheck layer_norm") {
  Rng rng(11);
  const Tensor w = random_tensor({2, 3, 6}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::layer_norm(in[0], in[1], in[2]), w);
      },
      {random_tensor({2, 3, 6}, rng), random_tensor({6}, rng),
       random_tensor({6}, rng)},
      1e-5, 1e-5);
}

TEST_CASE("layer_norm standardizes each row before the affine") {
  Rng rng(13);
  const Tensor x = random_tensor({3, 8}, rng, 2.0);
  const ad::Var g = ad::leaf(Tensor({8}, 1.0), false);
  const ad::Var b = ad::leaf(Tensor({8}, 0.0), false);
  const Tensor y = ad::val(ad::layer_norm(ad::leaf(x, false), g, b));
  for (std::int64_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::int64_t j = 0; j < 8; ++j) mu += y[r * 8 + j];
    mu /= 8.0;
    for (std::int64_t j = 0; j < 8; ++j) {
      const double d = y[r * 8 + j] - mu;
      var += d * d;
    }
    var /= 8.0;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("add_key_bias broadcasts over heads and queries") {
  Rng rng(14);
  const Tensor x = random_tensor({2, 2, 3, 4}, rng);
  Tensor bias({2, 4});
  for (std::int64_t i = 0; i < 8; ++i) bias[i] = i * 10.0;
  const Tensor y = ad::val(ad::add_key_bias(ad::leaf(x, false), bias));
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t h = 0; h < 2; ++h)
      for (std::int64_t q = 0; q < 3; ++q)
        for (std::int64_t k = 0; k < 4; ++k)
          CHECK(y[((b * 2 + h) * 3 + q) * 4 + k] ==
                x[((b * 2 + h) * 3 + q) * 4 + k] + bias[b * 4 + k]);
  const Tensor w = random_tensor({2, 2, 3, 4}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::add_key_bias(in[0], bias), w);
      },
      {random_tensor({2, 2, 3, 4}, rng)});
}

TEST_CASE("gradcheck reductions") {
  Rng rng(15);
  gradcheck(
      [&](const std::vector<ad::Var>& in) { return ad::mean_all(in[0]); },
      {random_tensor({3, 4}, rng)});
  gradcheck(
      [&](const std::vector<ad::Var>& in) { return ad::sum_all(in[0]); },
      {random_tensor({3, 4}, rng)});
}

TEST_CASE("conv1d_same forward oracle") {
  // single channel, kernel 3: y[t] = w0*x[t-1] + w1*x[t] + w2*x[t+1] + b
  const Tensor x({1, 3, 1}, {1.0, 2.0, 3.0});
  const Tensor w({1, 1, 3}, {10.0, 100.0, 1000.0});
  const Tensor b({1}, {0.5});
  const Tensor y = ad::val(ad::conv1d_same(ad::leaf(x, false),
                                           ad::leaf(w, false),
                                           ad::leaf(b, false)));
  CHECK(y.shape() == std::vector<std::int64_t>({1, 3, 1}));
  CHECK(y[0] == doctest::Approx(100.0 * 1 + 1000.0 * 2 + 0.5).epsilon(1e-12));
  CHECK(y[1] ==
        doctest::Approx(10.0 * 1 + 100.0 * 2 + 1000.0 * 3 + 0.5).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(10.0 * 2 + 100.0 * 3 + 0.5).epsilon(1e-12));
}

TEST_CASE("gradcheck conv1d_same") {
  Rng rng(16);
  const Tensor w = random_tensor({2, 5, 3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::conv1d_same(in[0], in[1], in[2]), w);
      },
      {random_tensor({2, 5, 2}, rng), random_tensor({3, 2, 3}, rng),
       random_tensor({3}, rng)});
}

TEST_CASE("maxpool_time takes the first index on ties") {
  const Tensor x({1, 4, 2}, {1.0, -1.0, 5.0, 2.0, 5.0, 0.0, 3.0, 2.0});
  const ad::Var v = ad::leaf(x);
  const ad::Var y = ad::maxpool_time(v);
  CHECK(ad::val(y)[0] == 5.0);
  CHECK(ad::val(y)[1] == 2.0);
  const ad::Var root = ad::sum_all(y);
  ad::backward(root);
  const Tensor& g = ad::grad(v);
  // channel 0 peaks at t=1 first even though t=2 ties
  CHECK(g[1 * 2 + 0] == 1.0);
  CHECK(g[2 * 2 + 0] == 0.0);
  // channel 1 ties at t=1 and t=3; the first wins
  CHECK(g[1 * 2 + 1] == 1.0);
  CHECK(g[3 * 2 + 1] == 0.0);
}

TEST_CASE("gradcheck maxpool_time away from ties") {
  Rng rng(17);
  Tensor x = random_tensor({2, 4, 3}, rng, 3.0);
  const Tensor w = random_tensor({2, 3}, rng);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return weighted(ad::maxpool_time(in[0]), w);
      },
      {x});
}

TEST_CASE("cross entropy of uniform logits is log of class count") {
  const Tensor logits({4, 512}, 0.25);
  const ad::Var loss = ad::cross_entropy_logits(ad::leaf(logits, false),
                                                {0, 5, 100, 511});
  CHECK(ad::val(loss)[0] == doctest::Approx(std::log(512.0)).epsilon(1e-12));
}

TEST_CASE("gradcheck cross_entropy_logits") {
  Rng rng(18);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return ad::cross_entropy_logits(in[0], {1, 0, 3});
      },
      {random_tensor({3, 4}, rng)});
}

TEST_CASE("bce at zero logits is log two") {
  const Tensor logits({4}, 0.0);
  const Tensor targets({4}, {0.0, 1.0, 1.0, 0.0});
  const ad::Var loss = ad::bce_logits(ad::leaf(logits, false), targets);
  CHECK(ad::val(loss)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("gradcheck bce_logits") {
  Rng rng(19);
  const Tensor targets({5}, {1.0, 0.0, 1.0, 1.0, 0.0});
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        return ad::bce_logits(in[0], targets);
      },
      {random_tensor({5}, rng)});
}

TEST_CASE("gradients accumulate through diamond-shaped graphs") {
  Rng rng(20);
  gradcheck(
      [&](const std::vector<ad::Var>& in) {
        const ad::Var y = ad::mul(in[0], in[0]);
        return ad::sum_all(ad::add(y, in[0]));
      },
      {random_tensor({2, 3}, rng)});

  // analytic: d/dx (x*x + x) summed = 2x + 1
  const Tensor x({2}, {3.0, -1.5});
  const ad::Var v = ad::leaf(x);
  const ad::Var root = ad::sum_all(ad::add(ad::mul(v, v), v));
  ad::backward(root);
  CHECK(ad::grad(v)[0] == doctest::Approx(7.0).epsilon(1e-12));
  CHECK(ad::grad(v)[1] == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar differentiable root") {
  const ad::Var bad = ad::leaf(Tensor({2}, 0.0));
  CHECK_THROWS_AS(ad::backward(bad), Error);
  const ad::Var frozen = ad::leaf(Tensor({1}, 0.0), false);
  CHECK_THROWS_AS(ad::backward(frozen), Error);
}
