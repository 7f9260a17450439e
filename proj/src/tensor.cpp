#include "lvt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "lvt/alloc_tracker.hpp"
#include "lvt/flops.hpp"

namespace lvt {

namespace {

thread_local GradTape* g_active_tape = nullptr;

bool grad_wanted(const Tensor& a) {
  return GradTape::active() != nullptr && a.requires_grad();
}

bool grad_wanted(const Tensor& a, const Tensor& b) {
  return GradTape::active() != nullptr &&
         (a.requires_grad() || b.requires_grad());
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got shape " +
                     shape_str(x.shape()));
}

std::string input_stats(const Tensor& t) {
  const auto& v = t.values();
  double mn = std::numeric_limits<double>::infinity();
  double mx = -mn;
  double sum = 0.0;
  for (double x : v) {
    mn = std::min(mn, x);
    mx = std::max(mx, x);
    sum += x;
  }
  std::ostringstream os;
  os << shape_str(t.shape()) << " min=" << mn << " max=" << mx
     << " mean=" << (v.empty() ? 0.0 : sum / static_cast<double>(v.size()));
  return os.str();
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---- Tensor ----

Tensor Tensor::make(Shape shape, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0)
      throw ShapeError("tensor extents must be positive, got " +
                       shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  const auto n = static_cast<std::size_t>(shape_numel(t.shape_));
  t.data_ = std::make_shared<std::vector<double>>(n, 0.0);
  alloc::on_alloc(n * sizeof(double));
  t.requires_grad_ = requires_grad;
  if (requires_grad) {
    t.grad_ = std::make_shared<std::vector<double>>(n, 0.0);
    alloc::on_alloc(n * sizeof(double));
  }
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return make(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("from_data: " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  Tensor t = make(std::move(shape), requires_grad);
  *t.data_ = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : *t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::xavier(std::int64_t fan_in, std::int64_t fan_out,
                      std::mt19937_64& rng, bool requires_grad) {
  const double limit =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform({fan_in, fan_out}, rng, -limit, limit, requires_grad);
}

std::int64_t Tensor::numel() const {
  return data_ ? static_cast<std::int64_t>(data_->size()) : 0;
}

std::int64_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows(): tensor is " + shape_str(shape_));
  return shape_[0];
}

std::int64_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols(): tensor is " + shape_str(shape_));
  return shape_[1];
}

const std::vector<double>& Tensor::values() const {
  if (!data_) throw UsageError("values(): undefined tensor");
  return *data_;
}

std::vector<double>& Tensor::mutable_values() const {
  if (!data_) throw UsageError("mutable_values(): undefined tensor");
  return *data_;
}

double Tensor::at(std::int64_t i) const { return values()[static_cast<std::size_t>(i)]; }

double Tensor::at2(std::int64_t r, std::int64_t c) const {
  return values()[static_cast<std::size_t>(r * cols() + c)];
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_) throw UsageError("grad(): tensor has no gradient buffer");
  return *grad_;
}

std::vector<double>& Tensor::mutable_grad() const {
  if (!grad_) throw UsageError("mutable_grad(): tensor has no gradient buffer");
  return *grad_;
}

void Tensor::zero_grad() const {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  t.requires_grad_ = false;
  return t;
}

// ---- GradTape ----

GradTape::GradTape() : prev_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() { g_active_tape = prev_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(const char* op_name, std::function<void()> backward_fn,
                      const Tensor& output) {
  if (consumed_)
    throw UsageError(std::string("tape already consumed; cannot record ") +
                     op_name);
  steps_.push_back({op_name, std::move(backward_fn)});
  outputs_.insert(output.buffer_id());
}

bool GradTape::recorded(const Tensor& t) const {
  return outputs_.count(t.buffer_id()) > 0;
}

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward: tape already consumed");
  if (loss.numel() != 1)
    throw UsageError("backward: loss must be a single element, got " +
                     shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw UsageError("backward: loss is detached (requires_grad is false)");
  if (!recorded(loss))
    throw UsageError(
        "backward: tensor is detached from this tape (no recorded op "
        "produced it)");
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
  steps_.clear();
  outputs_.clear();
  consumed_ = true;
}

void backward(const Tensor& loss) {
  GradTape* t = GradTape::active();
  if (!t) throw UsageError("backward: no active tape on this thread");
  t->backward(loss);
}

// ---- finite check ----

void check_finite(const char* op, const Tensor& out,
                  std::initializer_list<const Tensor*> inputs) {
  auto all_finite = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  const bool bad_out = !all_finite(out.values());
  bool bad_in = false;
  for (const Tensor* in : inputs) bad_in = bad_in || !all_finite(in->values());
  if (!bad_out && !bad_in) return;
  std::string msg = std::string("non-finite ") +
                    (bad_in ? "input" : "output") + " in op '" + op + "'";
  int i = 0;
  for (const Tensor* in : inputs)
    msg += "; input" + std::to_string(i++) + " " + input_stats(*in);
  throw NumericError(msg);
}

// ---- elementwise unary ----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros(x.shape(), rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  const std::size_t n = xv.size();
  for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
  flops::add(name, n);
  check_finite(name, out, {&x});
  if (rg) {
    GradTape::active()->record(
        name,
        [x, out, bwd]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          const auto& xv2 = x.values();
          const auto& ov2 = out.values();
          for (std::size_t i = 0; i < xg.size(); ++i)
            xg[i] += og[i] * bwd(xv2[i], ov2[i]);
        },
        out);
  }
  return out;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        // Split form avoids overflow in exp for large |v|.
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor elu_plus_one(const Tensor& x) {
  return unary_op(
      "elu_plus_one", x,
      [](double v) { return v > 0.0 ? v + 1.0 : std::exp(v); },
      [](double v, double y) { return v > 0.0 ? 1.0 : y; });
}

Tensor exp_(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log_(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sqrt_(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor rsqrt_(const Tensor& x) {
  return unary_op(
      "rsqrt", x, [](double v) { return 1.0 / std::sqrt(v); },
      [](double v, double y) { return -0.5 * y / v; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; },
      [](double, double) { return -1.0; });
}

// ---- elementwise binary ----

namespace {

enum class Bcast { None, ScalarLeft, ScalarRight };

Bcast binary_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::None;
  if (b.numel() == 1) return Bcast::ScalarRight;
  if (a.numel() == 1) return Bcast::ScalarLeft;
  throw ShapeError(std::string(op) + ": shape mismatch " +
                   shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                   " (only scalar-vs-tensor broadcasts)");
}

// dfa/dfb take (a_i, b_i, y_i) and return the local partials.
template <typename Fwd, typename Dt>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 Dt dfa, Dt dfb) {
  const Bcast mode = binary_mode(a, b, name);
  const Tensor& big = (mode == Bcast::ScalarLeft) ? b : a;
  const bool rg = grad_wanted(a, b);
  Tensor out = Tensor::zeros(big.shape(), rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.mutable_values();
  const std::size_t n = ov.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ai = (mode == Bcast::ScalarLeft) ? av[0] : av[i];
    const double bi = (mode == Bcast::ScalarRight) ? bv[0] : bv[i];
    ov[i] = fwd(ai, bi);
  }
  flops::add(name, n);
  check_finite(name, out, {&a, &b});
  if (rg) {
    GradTape::active()->record(
        name,
        [a, b, out, mode, dfa, dfb]() mutable {
          const auto& og = out.grad();
          const auto& av2 = a.values();
          const auto& bv2 = b.values();
          const auto& ov2 = out.values();
          const std::size_t n2 = og.size();
          if (a.requires_grad()) {
            auto& ag = a.mutable_grad();
            for (std::size_t i = 0; i < n2; ++i) {
              const double ai = (mode == Bcast::ScalarLeft) ? av2[0] : av2[i];
              const double bi = (mode == Bcast::ScalarRight) ? bv2[0] : bv2[i];
              const double g = og[i] * dfa(ai, bi, ov2[i]);
              ag[(mode == Bcast::ScalarLeft) ? 0 : i] += g;
            }
          }
          if (b.requires_grad()) {
            auto& bg = b.mutable_grad();
            for (std::size_t i = 0; i < n2; ++i) {
              const double ai = (mode == Bcast::ScalarLeft) ? av2[0] : av2[i];
              const double bi = (mode == Bcast::ScalarRight) ? bv2[0] : bv2[i];
              const double g = og[i] * dfb(ai, bi, ov2[i]);
              bg[(mode == Bcast::ScalarRight) ? 0 : i] += g;
            }
          }
        },
        out);
  }
  return out;
}

using D3 = double (*)(double, double, double);

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op<double (*)(double, double), D3>(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op<double (*)(double, double), D3>(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op<double (*)(double, double), D3>(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

namespace {

Tensor div_impl(const Tensor& a, const Tensor& b, double eps) {
  const Bcast mode = binary_mode(a, b, "div");
  const Tensor& big = (mode == Bcast::ScalarLeft) ? b : a;
  const bool rg = grad_wanted(a, b);
  Tensor out = Tensor::zeros(big.shape(), rg);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.mutable_values();
  const std::size_t n = ov.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ai = (mode == Bcast::ScalarLeft) ? av[0] : av[i];
    const double bi = (mode == Bcast::ScalarRight) ? bv[0] : bv[i];
    ov[i] = ai / (bi + eps);
  }
  flops::add("div", n);
  check_finite("div", out, {&a, &b});
  if (rg) {
    GradTape::active()->record(
        "div",
        [a, b, out, mode, eps]() mutable {
          const auto& og = out.grad();
          const auto& bv2 = b.values();
          const auto& ov2 = out.values();
          const std::size_t n2 = og.size();
          if (a.requires_grad()) {
            auto& ag = a.mutable_grad();
            for (std::size_t i = 0; i < n2; ++i) {
              const double bi = (mode == Bcast::ScalarRight) ? bv2[0] : bv2[i];
              ag[(mode == Bcast::ScalarLeft) ? 0 : i] += og[i] / (bi + eps);
            }
          }
          if (b.requires_grad()) {
            auto& bg = b.mutable_grad();
            for (std::size_t i = 0; i < n2; ++i) {
              const double bi = (mode == Bcast::ScalarRight) ? bv2[0] : bv2[i];
              bg[(mode == Bcast::ScalarRight) ? 0 : i] -=
                  og[i] * ov2[i] / (bi + eps);
            }
          }
        },
        out);
  }
  return out;
}

}  // namespace

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values())
    if (v == 0.0)
      throw DomainError(
          "div: divisor contains an exact zero (use div_eps for a guarded "
          "variant)");
  return div_impl(a, b, 0.0);
}

Tensor div_eps(const Tensor& a, const Tensor& b, double eps) {
  if (eps <= 0.0) throw ConfigError("div_eps: eps must be positive");
  return div_impl(a, b, eps);
}

Tensor add_scalar(const Tensor& x, double c) {
  return add(x, Tensor::scalar(c));
}

Tensor mul_scalar(const Tensor& x, double c) {
  return mul(x, Tensor::scalar(c));
}

// ---- matrix ----

namespace {

// out(MxP) += a(MxK) * b(KxP), raw buffers, ikj order.
void matmul_accum(const double* a, const double* b, double* out,
                  std::int64_t m, std::int64_t k, std::int64_t p) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * p;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * p;
      for (std::int64_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
}

// out(MxP) += a(KxM)^T * b(KxP)
void matmul_at_b_accum(const double* a, const double* b, double* out,
                       std::int64_t k, std::int64_t m, std::int64_t p) {
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * p;
    for (std::int64_t i = 0; i < m; ++i) {
      const double aki = arow[i];
      double* orow = out + i * p;
      for (std::int64_t j = 0; j < p; ++j) orow[j] += aki * brow[j];
    }
  }
}

// out(MxK) += a(MxP) * b(KxP)^T
void matmul_a_bt_accum(const double* a, const double* b, double* out,
                       std::int64_t m, std::int64_t p, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    double* orow = out + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * p;
      double s = 0.0;
      for (std::int64_t j = 0; j < p; ++j) s += arow[j] * brow[j];
      orow[kk] += s;
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::int64_t m = a.rows(), k = a.cols(), p = b.cols();
  const bool rg = grad_wanted(a, b);
  Tensor out = Tensor::zeros({m, p}, rg);
  matmul_accum(a.values().data(), b.values().data(),
               out.mutable_values().data(), m, k, p);
  flops::add("matmul", static_cast<std::uint64_t>(2) * m * k * p);
  check_finite("matmul", out, {&a, &b});
  if (rg) {
    GradTape::active()->record(
        "matmul",
        [a, b, out, m, k, p]() mutable {
          const auto& og = out.grad();
          if (a.requires_grad())
            matmul_a_bt_accum(og.data(), b.values().data(),
                              a.mutable_grad().data(), m, p, k);
          if (b.requires_grad())
            matmul_at_b_accum(a.values().data(), og.data(),
                              b.mutable_grad().data(), m, k, p);
        },
        out);
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::int64_t m = x.rows(), n = x.cols();
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({n, m}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  if (rg) {
    GradTape::active()->record(
        "transpose",
        [x, out, m, n]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) xg[i * n + j] += og[j * m + i];
        },
        out);
  }
  return out;
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({1}, rg);
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.mutable_values()[0] = s;
  flops::add("reduce", x.values().size());
  check_finite("sum", out, {&x});
  if (rg) {
    GradTape::active()->record(
        "sum",
        [x, out]() mutable {
          const double g = out.grad()[0];
          for (auto& v : x.mutable_grad()) v += g;
        },
        out);
  }
  return out;
}

Tensor mean(const Tensor& x) {
  Tensor s = sum(x);
  return mul_scalar(s, 1.0 / static_cast<double>(x.numel()));
}

Tensor row_sum(const Tensor& x) {
  require_rank2(x, "row_sum");
  const std::int64_t m = x.rows(), p = x.cols();
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({m, 1}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < p; ++j) s += xv[i * p + j];
    ov[i] = s;
  }
  flops::add("reduce", static_cast<std::uint64_t>(m) * p);
  check_finite("row_sum", out, {&x});
  if (rg) {
    GradTape::active()->record(
        "row_sum",
        [x, out, m, p]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < p; ++j) xg[i * p + j] += og[i];
        },
        out);
  }
  return out;
}

Tensor col_sum(const Tensor& x) {
  require_rank2(x, "col_sum");
  const std::int64_t m = x.rows(), p = x.cols();
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({1, p}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) ov[j] += xv[i * p + j];
  flops::add("reduce", static_cast<std::uint64_t>(m) * p);
  check_finite("col_sum", out, {&x});
  if (rg) {
    GradTape::active()->record(
        "col_sum",
        [x, out, m, p]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < p; ++j) xg[i * p + j] += og[j];
        },
        out);
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const std::int64_t m = x.rows(), p = x.cols();
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({m, p}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = &xv[i * p];
    double* orow = &ov[i * p];
    double mx = row[0];
    for (std::int64_t j = 1; j < p; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < p; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    const double inv = 1.0 / s;
    for (std::int64_t j = 0; j < p; ++j) orow[j] *= inv;
  }
  flops::add("softmax", static_cast<std::uint64_t>(5) * m * p);
  check_finite("softmax_rows", out, {&x});
  if (rg) {
    GradTape::active()->record(
        "softmax_rows",
        [x, out, m, p]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          const auto& ov2 = out.values();
          for (std::int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < p; ++j)
              dot += og[i * p + j] * ov2[i * p + j];
            for (std::int64_t j = 0; j < p; ++j)
              xg[i * p + j] += ov2[i * p + j] * (og[i * p + j] - dot);
          }
        },
        out);
  }
  return out;
}

// ---- row/column broadcasts ----

namespace {

void require_colvec(const Tensor& r, std::int64_t m, const char* op) {
  if (r.rank() != 2 || r.rows() != m || r.cols() != 1)
    throw ShapeError(std::string(op) + ": expected [" + std::to_string(m) +
                     "x1] per-row operand, got " + shape_str(r.shape()));
}

void require_rowvec(const Tensor& c, std::int64_t p, const char* op) {
  if (c.rank() != 2 || c.rows() != 1 || c.cols() != p)
    throw ShapeError(std::string(op) + ": expected [1x" + std::to_string(p) +
                     "] per-column operand, got " + shape_str(c.shape()));
}

}  // namespace

Tensor add_rows(const Tensor& x, const Tensor& r) {
  require_rank2(x, "add_rows");
  const std::int64_t m = x.rows(), p = x.cols();
  require_colvec(r, m, "add_rows");
  const bool rg = grad_wanted(x, r);
  Tensor out = Tensor::zeros({m, p}, rg);
  const auto& xv = x.values();
  const auto& rv = r.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) ov[i * p + j] = xv[i * p + j] + rv[i];
  flops::add("broadcast", static_cast<std::uint64_t>(m) * p);
  check_finite("add_rows", out, {&x, &r});
  if (rg) {
    GradTape::active()->record(
        "add_rows",
        [x, r, out, m, p]() mutable {
          const auto& og = out.grad();
          if (x.requires_grad()) {
            auto& xg = x.mutable_grad();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += og[i];
          }
          if (r.requires_grad()) {
            auto& rgr = r.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < p; ++j) rgr[i] += og[i * p + j];
          }
        },
        out);
  }
  return out;
}

Tensor sub_rows(const Tensor& x, const Tensor& r) {
  return add_rows(x, neg(r));
}

Tensor mul_rows(const Tensor& x, const Tensor& r) {
  require_rank2(x, "mul_rows");
  const std::int64_t m = x.rows(), p = x.cols();
  require_colvec(r, m, "mul_rows");
  const bool rg = grad_wanted(x, r);
  Tensor out = Tensor::zeros({m, p}, rg);
  const auto& xv = x.values();
  const auto& rv = r.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) ov[i * p + j] = xv[i * p + j] * rv[i];
  flops::add("broadcast", static_cast<std::uint64_t>(m) * p);
  check_finite("mul_rows", out, {&x, &r});
  if (rg) {
    GradTape::active()->record(
        "mul_rows",
        [x, r, out, m, p]() mutable {
          const auto& og = out.grad();
          const auto& xv2 = x.values();
          const auto& rv2 = r.values();
          if (x.requires_grad()) {
            auto& xg = x.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < p; ++j)
                xg[i * p + j] += og[i * p + j] * rv2[i];
          }
          if (r.requires_grad()) {
            auto& rgr = r.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < p; ++j)
                rgr[i] += og[i * p + j] * xv2[i * p + j];
          }
        },
        out);
  }
  return out;
}

namespace {

Tensor div_rows_impl(const Tensor& x, const Tensor& r, double eps,
                     const char* name) {
  require_rank2(x, name);
  const std::int64_t m = x.rows(), p = x.cols();
  require_colvec(r, m, name);
  const bool rg = grad_wanted(x, r);
  Tensor out = Tensor::zeros({m, p}, rg);
  const auto& xv = x.values();
  const auto& rv = r.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i) {
    const double d = rv[i] + eps;
    for (std::int64_t j = 0; j < p; ++j) ov[i * p + j] = xv[i * p + j] / d;
  }
  flops::add("broadcast", static_cast<std::uint64_t>(m) * p);
  check_finite(name, out, {&x, &r});
  if (rg) {
    GradTape::active()->record(
        name,
        [x, r, out, m, p, eps]() mutable {
          const auto& og = out.grad();
          const auto& rv2 = r.values();
          const auto& ov2 = out.values();
          if (x.requires_grad()) {
            auto& xg = x.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i) {
              const double inv = 1.0 / (rv2[i] + eps);
              for (std::int64_t j = 0; j < p; ++j)
                xg[i * p + j] += og[i * p + j] * inv;
            }
          }
          if (r.requires_grad()) {
            auto& rgr = r.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i) {
              const double inv = 1.0 / (rv2[i] + eps);
              double acc = 0.0;
              for (std::int64_t j = 0; j < p; ++j)
                acc += og[i * p + j] * ov2[i * p + j];
              rgr[i] -= acc * inv;
            }
          }
        },
        out);
  }
  return out;
}

}  // namespace

Tensor div_rows(const Tensor& x, const Tensor& r) {
  for (double v : r.values())
    if (v == 0.0)
      throw DomainError("div_rows: zero divisor row (use div_rows_eps)");
  return div_rows_impl(x, r, 0.0, "div_rows");
}

Tensor div_rows_eps(const Tensor& x, const Tensor& r, double eps) {
  if (eps <= 0.0) throw ConfigError("div_rows_eps: eps must be positive");
  return div_rows_impl(x, r, eps, "div_rows");
}

Tensor add_cols(const Tensor& x, const Tensor& c) {
  require_rank2(x, "add_cols");
  const std::int64_t m = x.rows(), p = x.cols();
  require_rowvec(c, p, "add_cols");
  const bool rg = grad_wanted(x, c);
  Tensor out = Tensor::zeros({m, p}, rg);
  const auto& xv = x.values();
  const auto& cv = c.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) ov[i * p + j] = xv[i * p + j] + cv[j];
  flops::add("broadcast", static_cast<std::uint64_t>(m) * p);
  check_finite("add_cols", out, {&x, &c});
  if (rg) {
    GradTape::active()->record(
        "add_cols",
        [x, c, out, m, p]() mutable {
          const auto& og = out.grad();
          if (x.requires_grad()) {
            auto& xg = x.mutable_grad();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += og[i];
          }
          if (c.requires_grad()) {
            auto& cg = c.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < p; ++j) cg[j] += og[i * p + j];
          }
        },
        out);
  }
  return out;
}

Tensor mul_cols(const Tensor& x, const Tensor& c) {
  require_rank2(x, "mul_cols");
  const std::int64_t m = x.rows(), p = x.cols();
  require_rowvec(c, p, "mul_cols");
  const bool rg = grad_wanted(x, c);
  Tensor out = Tensor::zeros({m, p}, rg);
  const auto& xv = x.values();
  const auto& cv = c.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) ov[i * p + j] = xv[i * p + j] * cv[j];
  flops::add("broadcast", static_cast<std::uint64_t>(m) * p);
  check_finite("mul_cols", out, {&x, &c});
  if (rg) {
    GradTape::active()->record(
        "mul_cols",
        [x, c, out, m, p]() mutable {
          const auto& og = out.grad();
          const auto& xv2 = x.values();
          const auto& cv2 = c.values();
          if (x.requires_grad()) {
            auto& xg = x.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < p; ++j)
                xg[i * p + j] += og[i * p + j] * cv2[j];
          }
          if (c.requires_grad()) {
            auto& cg = c.mutable_grad();
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t j = 0; j < p; ++j)
                cg[j] += og[i * p + j] * xv2[i * p + j];
          }
        },
        out);
  }
  return out;
}

// ---- structure ----

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape) + " changes element count");
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros(new_shape, rg);
  out.mutable_values() = x.values();
  if (rg) {
    GradTape::active()->record(
        "reshape",
        [x, out]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += og[i];
        },
        out);
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count) {
  require_rank2(x, "slice_rows");
  const std::int64_t m = x.rows(), p = x.cols();
  if (start < 0 || count <= 0 || start + count > m)
    throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of " +
                     shape_str(x.shape()));
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({count, p}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  std::memcpy(ov.data(), xv.data() + start * p,
              static_cast<std::size_t>(count * p) * sizeof(double));
  if (rg) {
    GradTape::active()->record(
        "slice_rows",
        [x, out, start, p, count]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t i = 0; i < count * p; ++i)
            xg[start * p + i] += og[i];
        },
        out);
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count) {
  require_rank2(x, "slice_cols");
  const std::int64_t m = x.rows(), p = x.cols();
  if (start < 0 || count <= 0 || start + count > p)
    throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of " +
                     shape_str(x.shape()));
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({m, count}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < count; ++j)
      ov[i * count + j] = xv[i * p + start + j];
  if (rg) {
    GradTape::active()->record(
        "slice_cols",
        [x, out, start, m, p, count]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < count; ++j)
              xg[i * p + start + j] += og[i * count + j];
        },
        out);
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::int64_t m = parts[0].rows();
  std::int64_t total = 0;
  bool any_grad = false;
  for (const auto& t : parts) {
    require_rank2(t, "concat_cols");
    if (t.rows() != m)
      throw ShapeError("concat_cols: row mismatch " + shape_str(t.shape()));
    total += t.cols();
    any_grad = any_grad || t.requires_grad();
  }
  const bool rg = GradTape::active() != nullptr && any_grad;
  Tensor out = Tensor::zeros({m, total}, rg);
  auto& ov = out.mutable_values();
  std::int64_t off = 0;
  for (const auto& t : parts) {
    const std::int64_t p = t.cols();
    const auto& tv = t.values();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < p; ++j)
        ov[i * total + off + j] = tv[i * p + j];
    off += p;
  }
  if (rg) {
    std::vector<Tensor> captured = parts;
    GradTape::active()->record(
        "concat_cols",
        [captured, out, m, total]() mutable {
          const auto& og = out.grad();
          std::int64_t off2 = 0;
          for (auto& t : captured) {
            const std::int64_t p = t.cols();
            if (t.requires_grad()) {
              auto& tg = t.mutable_grad();
              for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < p; ++j)
                  tg[i * p + j] += og[i * total + off2 + j];
            }
            off2 += p;
          }
        },
        out);
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::int64_t p = parts[0].cols();
  std::int64_t total = 0;
  bool any_grad = false;
  for (const auto& t : parts) {
    require_rank2(t, "concat_rows");
    if (t.cols() != p)
      throw ShapeError("concat_rows: column mismatch " + shape_str(t.shape()));
    total += t.rows();
    any_grad = any_grad || t.requires_grad();
  }
  const bool rg = GradTape::active() != nullptr && any_grad;
  Tensor out = Tensor::zeros({total, p}, rg);
  auto& ov = out.mutable_values();
  std::int64_t off = 0;
  for (const auto& t : parts) {
    std::memcpy(ov.data() + off * p, t.values().data(),
                static_cast<std::size_t>(t.numel()) * sizeof(double));
    off += t.rows();
  }
  if (rg) {
    std::vector<Tensor> captured = parts;
    GradTape::active()->record(
        "concat_rows",
        [captured, out, p]() mutable {
          const auto& og = out.grad();
          std::int64_t off2 = 0;
          for (auto& t : captured) {
            if (t.requires_grad()) {
              auto& tg = t.mutable_grad();
              for (std::int64_t i = 0; i < t.numel(); ++i)
                tg[i] += og[off2 * p + i];
            }
            off2 += t.rows();
          }
        },
        out);
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
  require_rank2(x, "gather_rows");
  const std::int64_t m = x.rows(), p = x.cols();
  for (auto i : idx)
    if (i < 0 || i >= m)
      throw ShapeError("gather_rows: index " + std::to_string(i) +
                       " out of " + shape_str(x.shape()));
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({static_cast<std::int64_t>(idx.size()), p}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(ov.data() + r * p, xv.data() + idx[r] * p,
                static_cast<std::size_t>(p) * sizeof(double));
  if (rg) {
    GradTape::active()->record(
        "gather_rows",
        [x, out, idx, p]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::int64_t j = 0; j < p; ++j)
              xg[idx[r] * p + j] += og[r * p + j];
        },
        out);
  }
  return out;
}

Tensor tile_rows(const Tensor& x, std::int64_t times) {
  require_rank2(x, "tile_rows");
  if (times <= 0) throw ShapeError("tile_rows: times must be positive");
  const std::int64_t m = x.rows(), p = x.cols();
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({m * times, p}, rg);
  auto& ov = out.mutable_values();
  for (std::int64_t t = 0; t < times; ++t)
    std::memcpy(ov.data() + t * m * p, x.values().data(),
                static_cast<std::size_t>(m * p) * sizeof(double));
  if (rg) {
    GradTape::active()->record(
        "tile_rows",
        [x, out, times, m, p]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t t = 0; t < times; ++t)
            for (std::int64_t i = 0; i < m * p; ++i)
              xg[i] += og[t * m * p + i];
        },
        out);
  }
  return out;
}

Tensor repeat_rows(const Tensor& x, std::int64_t times) {
  require_rank2(x, "repeat_rows");
  if (times <= 0) throw ShapeError("repeat_rows: times must be positive");
  const std::int64_t m = x.rows(), p = x.cols();
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({m * times, p}, rg);
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t t = 0; t < times; ++t)
      std::memcpy(ov.data() + (i * times + t) * p, xv.data() + i * p,
                  static_cast<std::size_t>(p) * sizeof(double));
  if (rg) {
    GradTape::active()->record(
        "repeat_rows",
        [x, out, times, m, p]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t t = 0; t < times; ++t)
              for (std::int64_t j = 0; j < p; ++j)
                xg[i * p + j] += og[(i * times + t) * p + j];
        },
        out);
  }
  return out;
}

Tensor group_mean_rows(const Tensor& x, std::int64_t group) {
  require_rank2(x, "group_mean_rows");
  const std::int64_t m = x.rows(), p = x.cols();
  if (group <= 0 || m % group != 0)
    throw ShapeError("group_mean_rows: " + std::to_string(m) +
                     " rows not divisible by group " + std::to_string(group));
  const std::int64_t g = m / group;
  const bool rg = grad_wanted(x);
  Tensor out = Tensor::zeros({g, p}, rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  const double inv = 1.0 / static_cast<double>(group);
  for (std::int64_t gi = 0; gi < g; ++gi)
    for (std::int64_t r = 0; r < group; ++r)
      for (std::int64_t j = 0; j < p; ++j)
        ov[gi * p + j] += xv[(gi * group + r) * p + j] * inv;
  flops::add("reduce", static_cast<std::uint64_t>(m) * p);
  check_finite("group_mean_rows", out, {&x});
  if (rg) {
    GradTape::active()->record(
        "group_mean_rows",
        [x, out, g, group, p, inv]() mutable {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::int64_t gi = 0; gi < g; ++gi)
            for (std::int64_t r = 0; r < group; ++r)
              for (std::int64_t j = 0; j < p; ++j)
                xg[(gi * group + r) * p + j] += og[gi * p + j] * inv;
        },
        out);
  }
  return out;
}

// ---- losses ----

Tensor cross_entropy_mean(const Tensor& logits,
                          const std::vector<std::int64_t>& labels) {
  require_rank2(logits, "cross_entropy_mean");
  const std::int64_t b = logits.rows(), c = logits.cols();
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(b) + " rows");
  for (auto l : labels)
    if (l < 0 || l >= c)
      throw ShapeError("cross_entropy_mean: label " + std::to_string(l) +
                       " out of " + std::to_string(c) + " classes");
  const bool rg = grad_wanted(logits);
  Tensor out = Tensor::zeros({1}, rg);
  const auto& zv = logits.values();
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double* row = &zv[i * c];
    double mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    total += mx + std::log(s) - row[labels[i]];
  }
  out.mutable_values()[0] = total / static_cast<double>(b);
  flops::add("loss", static_cast<std::uint64_t>(5) * b * c);
  check_finite("cross_entropy_mean", out, {&logits});
  if (rg) {
    GradTape::active()->record(
        "cross_entropy_mean",
        [logits, out, labels, b, c]() mutable {
          auto& zg = logits.mutable_grad();
          const auto& zv2 = logits.values();
          const double g = out.grad()[0] / static_cast<double>(b);
          for (std::int64_t i = 0; i < b; ++i) {
            const double* row = &zv2[i * c];
            double mx = row[0];
            for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (std::int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
            for (std::int64_t j = 0; j < c; ++j) {
              const double pj = std::exp(row[j] - mx) / s;
              zg[i * c + j] += g * (pj - (j == labels[i] ? 1.0 : 0.0));
            }
          }
        },
        out);
  }
  return out;
}

// ---- layers ----

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_rank2(x, "layer_norm");
  const std::int64_t p = x.cols();
  require_rowvec(gamma, p, "layer_norm");
  require_rowvec(beta, p, "layer_norm");
  Tensor mu = mul_scalar(row_sum(x), 1.0 / static_cast<double>(p));
  Tensor xc = sub_rows(x, mu);
  Tensor var = mul_scalar(row_sum(mul(xc, xc)), 1.0 / static_cast<double>(p));
  Tensor inv = rsqrt_(add_scalar(var, eps));
  Tensor xn = mul_rows(xc, inv);
  return add_cols(mul_cols(xn, gamma), beta);
}

}  // namespace lvt
