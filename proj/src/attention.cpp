#include <cmath>

#include "lvt/attention.hpp"
#include "lvt/error.hpp"

namespace lvt {

namespace {

void check_inputs(const Tensor& q, const Tensor& k, const Tensor& v,
                  const char* op) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError(std::string(op) + ": rank-2 inputs expected");
  if (q.cols() != k.cols())
    throw ShapeError(std::string(op) + ": q " + shape_str(q.shape()) +
                     " vs k " + shape_str(k.shape()));
  if (v.rows() != k.rows())
    throw ShapeError(std::string(op) + ": v has " + std::to_string(v.rows()) +
                     " rows, expected " + std::to_string(k.rows()));
}

// Guard-off mode: every normalization denominator must clear epsilon.
void check_denominators(const Tensor& den, double epsilon, const char* op) {
  const auto& dv = den.values();
  for (std::size_t i = 0; i < dv.size(); ++i)
    if (dv[i] < epsilon)
      throw DegenerateRowError(
          std::string(op) + ": normalization denominator " +
              std::to_string(dv[i]) + " below epsilon at row " +
              std::to_string(i),
          static_cast<std::int64_t>(i));
}

}  // namespace

AttentionOutput softmax_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, bool scale,
                                  bool materialize) {
  check_inputs(q, k, v, "softmax_attention");
  Tensor scores = matmul(q, transpose(k));
  if (scale)
    scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(q.cols())));
  Tensor a = softmax_rows(scores);
  AttentionOutput out;
  out.y = matmul(a, v);
  if (materialize) out.materialized = a;
  return out;
}

AttentionOutput linear_attention_quadratic_features(const Tensor& q_feat,
                                                    const Tensor& k_feat,
                                                    const Tensor& v,
                                                    double epsilon, bool guard,
                                                    bool materialize) {
  check_inputs(q_feat, k_feat, v, "linear_attention_quadratic");
  Tensor s = matmul(q_feat, transpose(k_feat));
  Tensor r = row_sum(s);
  Tensor a;
  if (guard) {
    a = div_rows_eps(s, r, epsilon);
  } else {
    check_denominators(r, epsilon, "linear_attention_quadratic");
    a = div_rows(s, r);
  }
  AttentionOutput out;
  out.y = matmul(a, v);
  if (materialize) out.materialized = a;
  return out;
}

AttentionOutput linear_attention_features(const Tensor& q_feat,
                                          const Tensor& k_feat, const Tensor& v,
                                          double epsilon, bool guard) {
  check_inputs(q_feat, k_feat, v, "linear_attention");
  if (epsilon <= 0.0)
    throw ConfigError("linear_attention: kernel epsilon must be positive");
  // The two reusable summaries: D x D key-value product and length-D key
  // sum. Everything after this is linear in N.
  Tensor kv = matmul(transpose(k_feat), v);
  Tensor ksum = col_sum(k_feat);
  Tensor den = matmul(q_feat, transpose(ksum));
  Tensor num = matmul(q_feat, kv);
  AttentionOutput out;
  if (guard) {
    out.y = div_rows_eps(num, den, epsilon);
  } else {
    check_denominators(den, epsilon, "linear_attention");
    out.y = div_rows(num, den);
  }
  return out;
}

AttentionOutput linear_attention_quadratic(const Tensor& q, const Tensor& k,
                                           const Tensor& v,
                                           const KernelFn& kernel,
                                           bool materialize) {
  check_inputs(q, k, v, "linear_attention_quadratic");
  return linear_attention_quadratic_features(
      apply_kernel(q, kernel), apply_kernel(k, kernel), v, kernel.epsilon,
      kernel.guard, materialize);
}

AttentionOutput linear_attention(const Tensor& q, const Tensor& k,
                                 const Tensor& v, const KernelFn& kernel) {
  check_inputs(q, k, v, "linear_attention");
  return linear_attention_features(apply_kernel(q, kernel),
                                   apply_kernel(k, kernel), v, kernel.epsilon,
                                   kernel.guard);
}

std::uint64_t softmax_attention_flops(std::int64_t n, std::int64_t d) {
  const auto nn = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(n);
  // q kT, softmax (5 per entry), weighted sum; logit scaling counts one
  // multiply per entry and is on in the softmax family.
  return 2 * nn * d + nn + 5 * nn + 2 * nn * d;
}

std::uint64_t linear_attention_flops(std::int64_t n, std::int64_t d,
                                     KernelTag) {
  const auto nd = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(d);
  // two kernel maps, kv summary, key sum, denominator, numerator, divide.
  return 2 * nd + 2 * nd * d + nd + 2 * nd + 2 * nd * d + nd;
}

}  // namespace lvt
