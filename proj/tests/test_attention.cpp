#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "lvt/alloc_tracker.hpp"
#include "lvt/attention.hpp"
#include "lvt/error.hpp"
#include "lvt/flops.hpp"
#include "test_util.hpp"

using namespace lvt;

namespace {

// Row-at-a-time softmax attention oracle, written without the library's
// matrix ops.
std::vector<double> softmax_attn_oracle(const Tensor& q, const Tensor& k,
                                        const Tensor& v, bool scale) {
  const std::int64_t n = q.rows(), d = q.cols(), dv = v.cols();
  const double f = scale ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
  std::vector<double> y(static_cast<std::size_t>(n * dv), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t c = 0; c < d; ++c) s += q.at2(i, c) * k.at2(j, c);
      logits[static_cast<std::size_t>(j)] = s * f;
    }
    auto w = tut::softmax_oracle(logits, 1, n);
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < dv; ++c)
        y[i * dv + c] += w[static_cast<std::size_t>(j)] * v.at2(j, c);
  }
  return y;
}

KernelFn make_kernel(KernelTag tag, bool guard) {
  KernelFn k;
  k.tag = tag;
  k.guard = guard;
  return k;
}

const KernelTag kAllTags[] = {KernelTag::ReLU, KernelTag::EluPlusOne,
                              KernelTag::Sigmoid};

}  // namespace

TEST_CASE("single token attends to itself") {
  std::mt19937_64 rng(1);
  Tensor q = Tensor::uniform({1, 4}, rng, -1.0, 1.0);
  Tensor k = Tensor::uniform({1, 4}, rng, -1.0, 1.0);
  Tensor v = Tensor::uniform({1, 4}, rng, -1.0, 1.0);
  auto out = softmax_attention(q, k, v, true);
  for (int c = 0; c < 4; ++c) CHECK(out.y.at(c) == v.at(c));

  Tensor qp = Tensor::uniform({1, 4}, rng, 0.1, 1.0);
  Tensor kp = Tensor::uniform({1, 4}, rng, 0.1, 1.0);
  auto lin = linear_attention(qp, kp, v, make_kernel(KernelTag::ReLU, false));
  CHECK(tut::max_rel_err(lin.y, v) <= 1e-12);
}

TEST_CASE("all-zero queries give uniform attention") {
  std::mt19937_64 rng(2);
  Tensor q = Tensor::zeros({5, 3});
  Tensor k = Tensor::uniform({5, 3}, rng, -1.0, 1.0);
  Tensor v = Tensor::uniform({5, 3}, rng, -1.0, 1.0);
  auto out = softmax_attention(q, k, v, true, true);
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 5; ++j)
      CHECK(out.materialized.at2(i, j) == doctest::Approx(0.2).epsilon(1e-12));
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t c = 0; c < 3; ++c) {
      double colmean = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) colmean += v.at2(j, c) / 5.0;
      CHECK(out.y.at2(i, c) == doctest::Approx(colmean).epsilon(1e-12));
    }
}

TEST_CASE("softmax attention matches the per-row oracle") {
  for (bool scale : {false, true}) {
    std::mt19937_64 rng(3);
    Tensor q = Tensor::uniform({6, 4}, rng, -2.0, 2.0);
    Tensor k = Tensor::uniform({6, 4}, rng, -2.0, 2.0);
    Tensor v = Tensor::uniform({6, 4}, rng, -2.0, 2.0);
    auto out = softmax_attention(q, k, v, scale);
    CHECK(out.y.shape() == v.shape());
    CHECK(tut::max_rel_err(out.y.values(),
                           softmax_attn_oracle(q, k, v, scale)) <= 1e-12);
  }
}

TEST_CASE("relu kernel on non-negative inputs is plain row normalization") {
  std::mt19937_64 rng(4);
  Tensor q = Tensor::uniform({7, 3}, rng, 0.1, 1.0);
  Tensor k = Tensor::uniform({7, 3}, rng, 0.1, 1.0);
  Tensor v = Tensor::uniform({7, 3}, rng, -1.0, 1.0);
  auto out =
      linear_attention_quadratic(q, k, v, make_kernel(KernelTag::ReLU, false));
  // Oracle: s = q k^T, rows normalized, then weighted sum of v.
  std::vector<double> s(49, 0.0);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      for (int c = 0; c < 3; ++c) s[i * 7 + j] += q.at2(i, c) * k.at2(j, c);
  std::vector<double> expect(21, 0.0);
  for (int i = 0; i < 7; ++i) {
    double r = 0.0;
    for (int j = 0; j < 7; ++j) r += s[i * 7 + j];
    for (int j = 0; j < 7; ++j)
      for (int c = 0; c < 3; ++c)
        expect[i * 3 + c] += s[i * 7 + j] / r * v.at2(j, c);
  }
  CHECK(tut::max_rel_err(out.y.values(), expect) <= 1e-12);
}

TEST_CASE("an all-zero key row contributes a zero column") {
  std::mt19937_64 rng(5);
  Tensor q = Tensor::uniform({5, 3}, rng, 0.1, 1.0);
  Tensor k = Tensor::uniform({5, 3}, rng, 0.1, 1.0);
  Tensor v = Tensor::uniform({5, 3}, rng, -1.0, 1.0);
  for (int c = 0; c < 3; ++c) k.mutable_values()[2 * 3 + c] = 0.0;
  auto out = linear_attention_quadratic(
      q, k, v, make_kernel(KernelTag::ReLU, false), true);
  for (std::int64_t i = 0; i < 5; ++i) CHECK(out.materialized.at2(i, 2) == 0.0);
}

TEST_CASE("linear and quadratic routes agree for every kernel") {
  std::mt19937_64 rng(6);
  for (KernelTag tag : kAllTags) {
    for (bool guard : {true, false}) {
      for (int rep = 0; rep < 5; ++rep) {
        const std::int64_t n = 4 + static_cast<std::int64_t>(rng() % 28);
        const std::int64_t d = 2 + static_cast<std::int64_t>(rng() % 14);
        Tensor q = Tensor::uniform({n, d}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({n, d}, rng, -1.0, 1.0);
        Tensor v = Tensor::uniform({n, d}, rng, -1.0, 1.0);
        if (tag == KernelTag::ReLU) {
          // Keep a positive floor under each row so guard-off runs stay
          // non-degenerate.
          for (std::int64_t i = 0; i < n; ++i) {
            q.mutable_values()[i * d] = std::abs(q.at2(i, 0)) + 0.1;
            k.mutable_values()[i * d] = std::abs(k.at2(i, 0)) + 0.1;
          }
        }
        KernelFn kern = make_kernel(tag, guard);
        auto quad = linear_attention_quadratic(q, k, v, kern);
        auto lin = linear_attention(q, k, v, kern);
        CAPTURE(kernel_name(tag));
        CAPTURE(guard);
        CHECK(tut::max_rel_err(lin.y, quad.y) <= 1e-10);
      }
    }
  }
}

TEST_CASE("materialized kernel matrices are stochastic with the guard off") {
  std::mt19937_64 rng(7);
  for (KernelTag tag : kAllTags) {
    Tensor q = Tensor::uniform({9, 5}, rng, -1.0, 1.0);
    Tensor k = Tensor::uniform({9, 5}, rng, -1.0, 1.0);
    Tensor v = Tensor::uniform({9, 5}, rng, -1.0, 1.0);
    if (tag == KernelTag::ReLU)
      for (std::int64_t i = 0; i < 9; ++i) {
        q.mutable_values()[i * 5] = 0.5;
        k.mutable_values()[i * 5] = 0.5;
      }
    auto out =
        linear_attention_quadratic(q, k, v, make_kernel(tag, false), true);
    for (std::int64_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < 9; ++j) {
        CHECK(out.materialized.at2(i, j) >= 0.0);
        s += out.materialized.at2(i, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-10);
    }
  }
}

TEST_CASE("scaling V by a power of two scales Y bitwise") {
  std::mt19937_64 rng(8);
  Tensor q = Tensor::uniform({8, 4}, rng, -1.0, 1.0);
  Tensor k = Tensor::uniform({8, 4}, rng, -1.0, 1.0);
  Tensor v = Tensor::uniform({8, 4}, rng, -1.0, 1.0);
  Tensor v4 = mul_scalar(v, 4.0);
  KernelFn kern = make_kernel(KernelTag::Sigmoid, true);
  auto a = linear_attention(q, k, v, kern);
  auto b = linear_attention(q, k, v4, kern);
  for (std::int64_t i = 0; i < a.y.numel(); ++i)
    CHECK(b.y.at(i) == 4.0 * a.y.at(i));
}

TEST_CASE("scaling kernelized keys by a common factor leaves Y unchanged") {
  std::mt19937_64 rng(9);
  Tensor q = Tensor::uniform({8, 4}, rng, 0.1, 1.0);
  Tensor k = Tensor::uniform({8, 4}, rng, 0.1, 1.0);
  Tensor v = Tensor::uniform({8, 4}, rng, -1.0, 1.0);
  // ReLU is positively homogeneous, so scaling K scales rho(K) the same way.
  KernelFn kern = make_kernel(KernelTag::ReLU, false);
  auto a = linear_attention(q, k, v, kern);
  auto b = linear_attention(q, mul_scalar(k, 4.0), v, kern);
  for (std::int64_t i = 0; i < a.y.numel(); ++i)
    CHECK(b.y.at(i) == a.y.at(i));
}

TEST_CASE("degenerate rows are loud without the guard and finite with it") {
  Tensor q = Tensor::from_data({3, 2}, {0.5, 0.5, -1.0, -2.0, 0.3, 0.1});
  std::mt19937_64 rng(10);
  Tensor k = Tensor::uniform({3, 2}, rng, 0.1, 1.0);
  Tensor v = Tensor::uniform({3, 2}, rng, -1.0, 1.0);
  KernelFn loud = make_kernel(KernelTag::ReLU, false);
  try {
    linear_attention(q, k, v, loud);
    FAIL("expected DegenerateRowError");
  } catch (const DegenerateRowError& e) {
    CHECK(e.row == 1);
  }
  CHECK_THROWS_AS(linear_attention_quadratic(q, k, v, loud),
                  DegenerateRowError);
  KernelFn guarded = make_kernel(KernelTag::ReLU, true);
  auto out = linear_attention(q, k, v, guarded);
  for (double y : out.y.values()) CHECK(std::isfinite(y));
}

TEST_CASE("counted FLOPs double for linear and quadruple for softmax") {
  std::mt19937_64 rng(11);
  auto count = [&](std::int64_t n, bool linear) {
    Tensor q = Tensor::uniform({n, 32}, rng, -1.0, 1.0);
    Tensor k = Tensor::uniform({n, 32}, rng, -1.0, 1.0);
    Tensor v = Tensor::uniform({n, 32}, rng, -1.0, 1.0);
    flops::CounterScope scope;
    if (linear)
      linear_attention(q, k, v, make_kernel(KernelTag::ReLU, true));
    else
      softmax_attention(q, k, v, true);
    return scope.report().total();
  };
  const double lin_ratio = static_cast<double>(count(512, true)) /
                           static_cast<double>(count(256, true));
  const double soft_ratio = static_cast<double>(count(512, false)) /
                            static_cast<double>(count(256, false));
  CHECK(lin_ratio >= 1.9);
  CHECK(lin_ratio <= 2.1);
  CHECK(soft_ratio >= 3.8);
  CHECK(soft_ratio <= 4.2);
}

TEST_CASE("closed-form FLOP totals equal the profiler's count") {
  std::mt19937_64 rng(12);
  const std::int64_t n = 64, d = 16;
  Tensor q = Tensor::uniform({n, d}, rng, -1.0, 1.0);
  Tensor k = Tensor::uniform({n, d}, rng, -1.0, 1.0);
  Tensor v = Tensor::uniform({n, d}, rng, -1.0, 1.0);
  {
    flops::CounterScope scope;
    softmax_attention(q, k, v, true);
    CHECK(scope.report().total() == softmax_attention_flops(n, d));
  }
  {
    flops::CounterScope scope;
    linear_attention(q, k, v, make_kernel(KernelTag::EluPlusOne, true));
    CHECK(scope.report().total() ==
          linear_attention_flops(n, d, KernelTag::EluPlusOne));
  }
}

TEST_CASE("the linear path never allocates an N x N block") {
  std::mt19937_64 rng(13);
  const std::int64_t n = 4096, d = 32;
  Tensor q = Tensor::uniform({n, d}, rng, -1.0, 1.0);
  Tensor k = Tensor::uniform({n, d}, rng, -1.0, 1.0);
  Tensor v = Tensor::uniform({n, d}, rng, -1.0, 1.0);
  alloc::TrackerScope scope;
  linear_attention(q, k, v, make_kernel(KernelTag::ReLU, true));
  CHECK(scope.stats().largest_block <=
        static_cast<std::uint64_t>(n) * d * sizeof(double));
  CHECK(scope.stats().largest_block <
        static_cast<std::uint64_t>(n) * n * sizeof(double));
}

TEST_CASE("profiling does not perturb the numbers") {
  std::mt19937_64 rng(14);
  Tensor q = Tensor::uniform({16, 8}, rng, -1.0, 1.0);
  Tensor k = Tensor::uniform({16, 8}, rng, -1.0, 1.0);
  Tensor v = Tensor::uniform({16, 8}, rng, -1.0, 1.0);
  KernelFn kern = make_kernel(KernelTag::Sigmoid, true);
  auto plain = linear_attention(q, k, v, kern);
  flops::CounterScope fscope;
  alloc::TrackerScope ascope;
  auto instrumented = linear_attention(q, k, v, kern);
  CHECK(tut::bit_identical(plain.y.values(), instrumented.y.values()));
}

TEST_CASE("gradients flow through all three attention routes") {
  for (unsigned seed : {21u, 22u, 23u}) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> params{tut::away_from_zero({6, 4}, rng),
                               tut::away_from_zero({6, 4}, rng),
                               tut::away_from_zero({6, 4}, rng)};
    Tensor w = tut::fixed_weights({6, 4}, 70 + seed);

    tut::LossFn soft = [w](std::vector<Tensor>& p) {
      return tut::weighted_sum(softmax_attention(p[0], p[1], p[2], true).y, w);
    };
    CHECK(tut::fd_max_err(soft, params) <= 1e-4);

    for (KernelTag tag : kAllTags) {
      CAPTURE(kernel_name(tag));
      KernelFn kern = make_kernel(tag, true);
      tut::LossFn lin = [w, kern](std::vector<Tensor>& p) {
        return tut::weighted_sum(linear_attention(p[0], p[1], p[2], kern).y,
                                 w);
      };
      CHECK(tut::fd_max_err(lin, params) <= 1e-4);
      tut::LossFn quad = [w, kern](std::vector<Tensor>& p) {
        return tut::weighted_sum(
            linear_attention_quadratic(p[0], p[1], p[2], kern).y, w);
      };
      CHECK(tut::fd_max_err(quad, params) <= 1e-4);
    }
  }
}

TEST_CASE("attention rejects mismatched shapes") {
  Tensor q = Tensor::zeros({4, 3});
  Tensor k = Tensor::zeros({5, 3});
  Tensor v = Tensor::zeros({4, 3});
  // v must pair with k row for row; q may have its own row count
  // (windowed attention sends a single query against a key window).
  CHECK_THROWS_AS(softmax_attention(q, k, v, true), ShapeError);
  CHECK_THROWS_AS(softmax_attention(q, Tensor::zeros({5, 2}),
                                    Tensor::zeros({5, 3}), true),
                  ShapeError);
  CHECK_THROWS_AS(
      linear_attention(q, k, v, make_kernel(KernelTag::ReLU, true)),
      ShapeError);
  CHECK_THROWS_AS(kernel_from_name("gelu"), ConfigError);
}
