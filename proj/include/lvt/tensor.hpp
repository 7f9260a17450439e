#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "lvt/error.hpp"

namespace lvt {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of doubles. Copies are shallow: they share the
// value and gradient buffers, which is what lets tape closures see gradient
// accumulation on their captured operands. Values are immutable once an op
// has produced them; only gradients accumulate.
//
// Broadcasting rule: binary elementwise ops require identical shapes, with
// the single exception that a one-element tensor broadcasts against any
// shape. Every other shape coercion is an explicit reshape / *_rows /
// *_cols / tile / repeat call.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo,
                        double hi, bool requires_grad = false);
  // Xavier-uniform over a fan_in x fan_out projection.
  static Tensor xavier(std::int64_t fan_in, std::int64_t fan_out,
                       std::mt19937_64& rng, bool requires_grad = true);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const;
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  // Rank-2 conveniences; throw on other ranks.
  std::int64_t rows() const;
  std::int64_t cols() const;

  bool requires_grad() const { return requires_grad_; }

  // Tensor is a shared handle; the buffer mutators are const because a
  // copied handle (e.g. one captured by a tape closure) writes the same
  // storage the original sees.
  const std::vector<double>& values() const;
  std::vector<double>& mutable_values() const;
  double at(std::int64_t i) const;
  double at2(std::int64_t r, std::int64_t c) const;

  bool has_grad() const { return static_cast<bool>(grad_); }
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad() const;
  void zero_grad() const;

  // Identity of the underlying buffer; used by the tape to recognize its
  // own outputs.
  const void* buffer_id() const { return data_.get(); }

  // Same values, detached from gradients entirely.
  Tensor detached() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  bool requires_grad_ = false;

  static Tensor make(Shape shape, bool requires_grad);
};

// Ordered record of executed ops on one thread. Constructing a tape makes
// it the active tape; ops append themselves when any input requires grad.
// backward() replays the record once in reverse execution order and then
// consumes it. One tape per thread at a time; tapes nest (inner shadows
// outer until destroyed).
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  void record(const char* op_name, std::function<void()> backward_fn,
              const Tensor& output);
  bool recorded(const Tensor& t) const;
  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  // loss must be a one-element tensor produced on this tape.
  void backward(const Tensor& loss);

 private:
  struct Step {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Step> steps_;
  std::unordered_set<const void*> outputs_;
  bool consumed_ = false;
  GradTape* prev_;
};

// Convenience: backward through the active tape.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor elu_plus_one(const Tensor& x);
Tensor exp_(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor sqrt_(const Tensor& x);
Tensor rsqrt_(const Tensor& x);
Tensor neg(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Throws DomainError on an exact-zero divisor entry; div_eps is the guarded
// variant that adds eps to the divisor instead.
Tensor div(const Tensor& a, const Tensor& b);
Tensor div_eps(const Tensor& a, const Tensor& b, double eps);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

// ---- matrix ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// ---- reductions ----
Tensor sum(const Tensor& x);                    // -> {1}
Tensor mean(const Tensor& x);                   // -> {1}
Tensor row_sum(const Tensor& x);                // MxP -> Mx1
Tensor col_sum(const Tensor& x);                // MxP -> 1xP
// Numerically stabilized (row-max subtraction); rows sum to 1.
Tensor softmax_rows(const Tensor& x);

// ---- explicit row/column broadcasts (x: MxP) ----
Tensor add_rows(const Tensor& x, const Tensor& r);  // r: Mx1, per-row offset
Tensor sub_rows(const Tensor& x, const Tensor& r);
Tensor mul_rows(const Tensor& x, const Tensor& r);
Tensor div_rows(const Tensor& x, const Tensor& r);
Tensor div_rows_eps(const Tensor& x, const Tensor& r, double eps);
Tensor add_cols(const Tensor& x, const Tensor& c);  // c: 1xP, per-column
Tensor mul_cols(const Tensor& x, const Tensor& c);

// ---- structure ----
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
Tensor tile_rows(const Tensor& x, std::int64_t times);    // [x; x; ...]
Tensor repeat_rows(const Tensor& x, std::int64_t times);  // each row k times
// Mean over consecutive row groups: (G*group)xP -> GxP.
Tensor group_mean_rows(const Tensor& x, std::int64_t group);

// ---- losses ----
// logits: BxC. Mean cross entropy over the batch, stabilized log-sum-exp.
Tensor cross_entropy_mean(const Tensor& logits,
                          const std::vector<std::int64_t>& labels);

// ---- layers ----
// Row-wise layer normalization with per-column affine, composed from taped
// primitives. gamma/beta: 1xP.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Verifies every output entry is finite; throws NumericError naming the op
// and summarizing the inputs otherwise. Called by every forward op.
void check_finite(const char* op, const Tensor& out,
                  std::initializer_list<const Tensor*> inputs);

}  // namespace lvt
