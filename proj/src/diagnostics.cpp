#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <new>
#include <thread>

#ifdef __linux__
#include <sched.h>
#endif

#include "lvt/alloc_tracker.hpp"
#include "lvt/diagnostics.hpp"
#include "lvt/error.hpp"
#include "lvt/tensor_io.hpp"

namespace lvt::diag {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Keeps the raw benchmark outputs observable so the timed loops cannot be
// optimized away.
volatile double g_sink = 0.0;

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  if (v.size() % 2 == 1) return v[m];
  return 0.5 * (v[m - 1] + v[m]);
}

// ---- raw benchmark kernels -------------------------------------------------
// Plain double-loop implementations without autodiff or tensor plumbing;
// only these are timed. Scratch is allocated once per cell, outside the
// timed region, and reported through alloc::on_alloc.

void raw_alloc(std::vector<double>& buf, std::size_t count) {
  buf.assign(count, 0.0);
  alloc::on_alloc(count * sizeof(double));
}

double raw_kernel(double x, KernelTag tag) {
  switch (tag) {
    case KernelTag::ReLU: return x > 0.0 ? x : 0.0;
    case KernelTag::EluPlusOne: return x > 0.0 ? x + 1.0 : std::exp(x);
    case KernelTag::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
  }
  return 0.0;
}

void raw_feature_map(const std::vector<double>& x, std::vector<double>& out,
                     KernelTag tag) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = raw_kernel(x[i], tag);
}

void raw_softmax_forward(std::int64_t n, std::int64_t d,
                         const std::vector<double>& q,
                         const std::vector<double>& k,
                         const std::vector<double>& v, bool scale,
                         std::vector<double>& scores, std::vector<double>& y) {
  const double f = scale ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = scores.data() + i * n;
    const double* qi = q.data() + i * d;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* kj = k.data() + j * d;
      double dot = 0.0;
      for (std::int64_t t = 0; t < d; ++t) dot += qi[t] * kj[t];
      row[j] = dot * f;
    }
    double mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    double* yi = y.data() + i * d;
    for (std::int64_t c = 0; c < d; ++c) yi[c] = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = row[j] * inv;
      const double* vj = v.data() + j * d;
      for (std::int64_t c = 0; c < d; ++c) yi[c] += a * vj[c];
    }
  }
}

void raw_linear_forward(std::int64_t n, std::int64_t d,
                        const std::vector<double>& q,
                        const std::vector<double>& k,
                        const std::vector<double>& v, const KernelFn& kernel,
                        std::vector<double>& qf, std::vector<double>& kf,
                        std::vector<double>& kv, std::vector<double>& ksum,
                        std::vector<double>& y) {
  raw_feature_map(q, qf, kernel.tag);
  raw_feature_map(k, kf, kernel.tag);
  std::fill(kv.begin(), kv.end(), 0.0);
  std::fill(ksum.begin(), ksum.end(), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* ki = kf.data() + i * d;
    const double* vi = v.data() + i * d;
    for (std::int64_t t = 0; t < d; ++t) {
      const double kt = ki[t];
      ksum[t] += kt;
      double* kvt = kv.data() + t * d;
      for (std::int64_t c = 0; c < d; ++c) kvt[c] += kt * vi[c];
    }
  }
  const double eps = kernel.guard ? kernel.epsilon : 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* qi = qf.data() + i * d;
    double den = 0.0;
    for (std::int64_t t = 0; t < d; ++t) den += qi[t] * ksum[t];
    double* yi = y.data() + i * d;
    for (std::int64_t c = 0; c < d; ++c) yi[c] = 0.0;
    for (std::int64_t t = 0; t < d; ++t) {
      const double qt = qi[t];
      const double* kvt = kv.data() + t * d;
      for (std::int64_t c = 0; c < d; ++c) yi[c] += qt * kvt[c];
    }
    const double inv = 1.0 / (den + eps);
    for (std::int64_t c = 0; c < d; ++c) yi[c] *= inv;
  }
}

void raw_quadratic_forward(std::int64_t n, std::int64_t d,
                           const std::vector<double>& q,
                           const std::vector<double>& k,
                           const std::vector<double>& v,
                           const KernelFn& kernel, std::vector<double>& qf,
                           std::vector<double>& kf,
                           std::vector<double>& scores,
                           std::vector<double>& y) {
  raw_feature_map(q, qf, kernel.tag);
  raw_feature_map(k, kf, kernel.tag);
  const double eps = kernel.guard ? kernel.epsilon : 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = scores.data() + i * n;
    const double* qi = qf.data() + i * d;
    double rsum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* kj = kf.data() + j * d;
      double dot = 0.0;
      for (std::int64_t t = 0; t < d; ++t) dot += qi[t] * kj[t];
      row[j] = dot;
      rsum += dot;
    }
    const double inv = 1.0 / (rsum + eps);
    double* yi = y.data() + i * d;
    for (std::int64_t c = 0; c < d; ++c) yi[c] = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = row[j] * inv;
      const double* vj = v.data() + j * d;
      for (std::int64_t c = 0; c < d; ++c) yi[c] += a * vj[c];
    }
  }
}

// ---- study cells -----------------------------------------------------------

std::uint64_t cell_fingerprint(const ScalingConfig& cfg, AttentionFamily fam,
                               std::int64_t n) {
  std::string s = "scaling-cell family=" + family_name(fam) +
                  " n=" + std::to_string(n) + " d=" + std::to_string(cfg.d) +
                  " seed=" + std::to_string(cfg.seed) +
                  " kernel=" + kernel_name(cfg.kernel.tag) +
                  " epsilon=" + io::format_double(cfg.kernel.epsilon) +
                  " guard=" + std::to_string(cfg.kernel.guard ? 1 : 0) +
                  " scale_qk=" + std::to_string(cfg.scale_qk ? 1 : 0) +
                  " repeats=" + std::to_string(cfg.repeats) +
                  " warmup=" + std::to_string(cfg.warmup) +
                  " flops_only=" + std::to_string(cfg.flops_only ? 1 : 0);
  return io::fnv1a64(s);
}

ProfileReport run_cell(const ScalingConfig& cfg, AttentionFamily fam,
                       int fam_idx, std::int64_t n) {
  ProfileReport rep;
  rep.family = fam;
  rep.n = n;
  rep.d = cfg.d;
  rep.seed = cfg.seed;
  rep.exponent_fit = kNaN;
  rep.entropy_mean = kNaN;
  rep.top1_mass_mean = kNaN;
  rep.fingerprint = cell_fingerprint(cfg, fam, n);
  try {
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL ^
                        (static_cast<std::uint64_t>(fam_idx) << 32) ^
                        static_cast<std::uint64_t>(n));
    Tensor q = Tensor::uniform({n, cfg.d}, rng, -1.0, 1.0);
    Tensor k = Tensor::uniform({n, cfg.d}, rng, -1.0, 1.0);
    Tensor v = Tensor::uniform({n, cfg.d}, rng, -1.0, 1.0);

    {
      alloc::TrackerScope tracker;
      {
        flops::CounterScope counter;
        switch (fam) {
          case AttentionFamily::Softmax:
            softmax_attention(q, k, v, cfg.scale_qk);
            break;
          case AttentionFamily::LinearQuadratic:
            linear_attention_quadratic(q, k, v, cfg.kernel);
            break;
          case AttentionFamily::Linear:
            linear_attention(q, k, v, cfg.kernel);
            break;
        }
        rep.flops_forward = counter.report();
      }
      rep.peak_alloc_bytes = tracker.stats().total_bytes;
    }

    if (cfg.with_entropy && !cfg.flops_only) {
      if (n <= kMaterializeLimit) {
        Tensor a = materialize_attention(q, k, fam, cfg.kernel, cfg.scale_qk);
        ConcentrationStats stats = concentration_masked(a);
        rep.entropy_mean = stats.entropy_mean();
        rep.top1_mass_mean = stats.top1_mean();
        if (stats.skipped_rows > 0)
          rep.note = "entropy over " +
                     std::to_string(n - stats.skipped_rows) + " of " +
                     std::to_string(n) + " rows";
      } else {
        rep.note = "entropy skipped: n over materialization guard";
      }
    }

    if (!cfg.flops_only) {
      const std::size_t nd = static_cast<std::size_t>(n * cfg.d);
      std::vector<double> y, qf, kf, scores, kv, ksum;
      raw_alloc(y, nd);
      if (fam == AttentionFamily::Softmax) {
        raw_alloc(scores, static_cast<std::size_t>(n) * n);
      } else {
        raw_alloc(qf, nd);
        raw_alloc(kf, nd);
        if (fam == AttentionFamily::LinearQuadratic)
          raw_alloc(scores, static_cast<std::size_t>(n) * n);
        else {
          raw_alloc(kv, static_cast<std::size_t>(cfg.d * cfg.d));
          raw_alloc(ksum, static_cast<std::size_t>(cfg.d));
        }
      }
      const std::vector<double>& qv = q.values();
      const std::vector<double>& kvv = k.values();
      const std::vector<double>& vv = v.values();
      auto one_run = [&] {
        switch (fam) {
          case AttentionFamily::Softmax:
            raw_softmax_forward(n, cfg.d, qv, kvv, vv, cfg.scale_qk, scores, y);
            break;
          case AttentionFamily::LinearQuadratic:
            raw_quadratic_forward(n, cfg.d, qv, kvv, vv, cfg.kernel, qf, kf,
                                  scores, y);
            break;
          case AttentionFamily::Linear:
            raw_linear_forward(n, cfg.d, qv, kvv, vv, cfg.kernel, qf, kf, kv,
                               ksum, y);
            break;
        }
        g_sink = g_sink + y.front() + y.back();
      };
      for (int w = 0; w < cfg.warmup; ++w) one_run();
      std::vector<double> samples;
      samples.reserve(static_cast<std::size_t>(cfg.repeats));
      for (int r = 0; r < cfg.repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        one_run();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
      rep.time_s = median_of(std::move(samples));
    }
  } catch (const std::bad_alloc&) {
    rep.oom = true;
    rep.note = "OOM: allocation failed";
  }
  return rep;
}

void pin_to_cpu_zero() {
#ifdef __linux__
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(0, &set);
  sched_setaffinity(0, sizeof(set), &set);
#endif
}

}  // namespace

Tensor materialize_attention(const Tensor& q, const Tensor& k,
                             AttentionFamily family, const KernelFn& kernel,
                             bool scale_qk) {
  if (q.rank() != 2 || k.rank() != 2)
    throw ShapeError("materialize_attention: rank-2 inputs expected");
  if (q.cols() != k.cols())
    throw ShapeError("materialize_attention: q " + shape_str(q.shape()) +
                     " vs k " + shape_str(k.shape()));
  const std::int64_t n = std::max(q.rows(), k.rows());
  if (n > kMaterializeLimit)
    throw ConfigError("materialize_attention: refusing n=" + std::to_string(n) +
                      ", the materialization guard is n <= " +
                      std::to_string(kMaterializeLimit));
  if (family == AttentionFamily::Softmax) {
    Tensor scores = matmul(q, transpose(k));
    if (scale_qk)
      scores =
          mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(q.cols())));
    return softmax_rows(scores);
  }
  // Both linear families share the same implicit matrix.
  Tensor s = matmul(apply_kernel(q, kernel), transpose(apply_kernel(k, kernel)));
  Tensor r = row_sum(s);
  if (kernel.guard) return div_rows_eps(s, r, kernel.epsilon);
  const auto& rv = r.values();
  for (std::size_t i = 0; i < rv.size(); ++i)
    if (rv[i] < kernel.epsilon)
      throw DegenerateRowError(
          "materialize_attention: normalization denominator " +
              std::to_string(rv[i]) + " below epsilon at row " +
              std::to_string(i),
          static_cast<std::int64_t>(i));
  return div_rows(s, r);
}

double ConcentrationStats::entropy_mean() const { return mean_of(entropy); }
double ConcentrationStats::top1_mean() const { return mean_of(top1_mass); }
double ConcentrationStats::top5_mean() const { return mean_of(top5_mass); }

namespace {

double row_mass_checked(const double* row, std::int64_t cols, std::int64_t i) {
  double sum = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) {
    if (row[j] < 0.0)
      throw DomainError("concentration: negative weight " +
                        io::format_double(row[j]) + " at row " +
                        std::to_string(i));
    sum += row[j];
  }
  return sum;
}

void push_row_stats(const double* row, std::int64_t cols, double inv,
                    std::vector<double>& scratch, ConcentrationStats& out) {
  double h = 0.0;
  for (std::int64_t j = 0; j < cols; ++j) {
    const double p = row[j] * inv;
    scratch[static_cast<std::size_t>(j)] = p;
    if (p > 0.0) h -= p * std::log(p);
  }
  const std::int64_t top_k = std::min<std::int64_t>(5, cols);
  std::partial_sort(scratch.begin(), scratch.begin() + top_k, scratch.end(),
                    std::greater<double>());
  double top5 = 0.0;
  for (std::int64_t j = 0; j < top_k; ++j) top5 += scratch[j];
  out.entropy.push_back(h);
  out.top1_mass.push_back(scratch[0]);
  out.top5_mass.push_back(top5);
}

}  // namespace

ConcentrationStats concentration(const Tensor& matrix) {
  if (matrix.rank() != 2)
    throw DomainError("concentration: rank-2 matrix expected, got " +
                      shape_str(matrix.shape()));
  const std::int64_t rows = matrix.rows();
  const std::int64_t cols = matrix.cols();
  const auto& mv = matrix.values();
  ConcentrationStats stats;
  stats.entropy.reserve(static_cast<std::size_t>(rows));
  std::vector<double> scratch(static_cast<std::size_t>(cols));
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* row = mv.data() + i * cols;
    const double sum = row_mass_checked(row, cols, i);
    if (std::abs(sum - 1.0) > 1e-6)
      throw DomainError("concentration: row " + std::to_string(i) +
                        " sums to " + io::format_double(sum) +
                        ", not normalized within 1e-6");
    push_row_stats(row, cols, 1.0, scratch, stats);
  }
  return stats;
}

ConcentrationStats concentration_masked(const Tensor& matrix, double min_mass) {
  if (matrix.rank() != 2)
    throw DomainError("concentration: rank-2 matrix expected, got " +
                      shape_str(matrix.shape()));
  if (min_mass <= 0.0)
    throw DomainError("concentration: min_mass must be positive");
  const std::int64_t rows = matrix.rows();
  const std::int64_t cols = matrix.cols();
  const auto& mv = matrix.values();
  ConcentrationStats stats;
  stats.entropy.reserve(static_cast<std::size_t>(rows));
  std::vector<double> scratch(static_cast<std::size_t>(cols));
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* row = mv.data() + i * cols;
    const double sum = row_mass_checked(row, cols, i);
    if (sum < min_mass) {
      ++stats.skipped_rows;
      continue;
    }
    push_row_stats(row, cols, 1.0 / sum, scratch, stats);
  }
  return stats;
}

void ScalingConfig::validate() const {
  if (n_values.size() < 3)
    throw ConfigError("scaling study needs at least 3 sequence lengths, got " +
                      std::to_string(n_values.size()));
  for (std::size_t i = 0; i < n_values.size(); ++i) {
    if (n_values[i] <= 0)
      throw ConfigError("scaling study sequence lengths must be positive");
    if (i > 0 && n_values[i] <= n_values[i - 1])
      throw ConfigError("scaling study sequence lengths must be increasing");
  }
  // Geometric spacing via exact cross multiplication of successive ratios.
  for (std::size_t i = 2; i < n_values.size(); ++i)
    if (n_values[i] * n_values[0] != n_values[i - 1] * n_values[1])
      throw ConfigError("scaling study sequence lengths must be geometric: " +
                        std::to_string(n_values[i - 1]) + " -> " +
                        std::to_string(n_values[i]) + " breaks the ratio");
  if (d <= 0) throw ConfigError("scaling study feature width must be positive");
  if (families.empty())
    throw ConfigError("scaling study needs at least one attention family");
  if (repeats < 1)
    throw ConfigError("scaling study needs at least one timed repeat");
  if (warmup < 0) throw ConfigError("scaling study warmup must be >= 0");
  if (parallel && !flops_only)
    throw ConfigError(
        "parallel scaling study is flop-only; timed cells run sequentially");
}

std::vector<ProfileReport> scaling_study(const ScalingConfig& cfg) {
  cfg.validate();
  if (cfg.pin_thread) pin_to_cpu_zero();
  const std::size_t cells = cfg.families.size() * cfg.n_values.size();
  std::vector<ProfileReport> reports(cells);
  auto cell = [&](std::size_t idx) {
    const std::size_t fi = idx / cfg.n_values.size();
    const std::size_t ni = idx % cfg.n_values.size();
    reports[idx] = run_cell(cfg, cfg.families[fi], static_cast<int>(fi),
                            cfg.n_values[ni]);
  };
  if (cfg.parallel) {
    std::vector<std::thread> workers;
    workers.reserve(cells);
    for (std::size_t idx = 0; idx < cells; ++idx)
      workers.emplace_back([&, idx] {
        try {
          cell(idx);
        } catch (const std::exception& e) {
          reports[idx].note = std::string("cell failed: ") + e.what();
        }
      });
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t idx = 0; idx < cells; ++idx) cell(idx);
  }
  // Family-wide exponent over successfully timed cells, repeated per row.
  for (std::size_t fi = 0; fi < cfg.families.size(); ++fi) {
    std::vector<double> xs, ys;
    for (std::size_t ni = 0; ni < cfg.n_values.size(); ++ni) {
      const ProfileReport& r = reports[fi * cfg.n_values.size() + ni];
      if (!r.oom && r.time_s > 0.0) {
        xs.push_back(static_cast<double>(r.n));
        ys.push_back(r.time_s);
      }
    }
    if (xs.size() >= 2) {
      const double slope = fit_exponent(xs, ys);
      for (std::size_t ni = 0; ni < cfg.n_values.size(); ++ni)
        reports[fi * cfg.n_values.size() + ni].exponent_fit = slope;
    }
  }
  return reports;
}

double fit_exponent(const std::vector<double>& x,
                    const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw ConfigError("fit_exponent: need two or more matched samples");
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double m = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0.0 || y[i] <= 0.0)
      throw DomainError("fit_exponent: samples must be positive");
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = m * sxx - sx * sx;
  if (denom == 0.0)
    throw DomainError("fit_exponent: x values are all equal");
  return (m * sxy - sx * sy) / denom;
}

void write_scaling_csv(const std::string& path,
                       const std::vector<ProfileReport>& reports) {
  io::CsvWriter w(path,
                  "family,n,d,seed,flops,time_s,exponent_fit,peak_alloc,"
                  "entropy_mean,top1_mass_mean");
  w.comment("lvt-scaling-csv-v1");
  for (const ProfileReport& r : reports) {
    w.row({family_name(r.family), std::to_string(r.n), std::to_string(r.d),
           std::to_string(r.seed), std::to_string(r.flops_forward.total()),
           io::format_double(r.time_s), io::format_double(r.exponent_fit),
           std::to_string(r.peak_alloc_bytes),
           io::format_double(r.entropy_mean),
           io::format_double(r.top1_mass_mean)});
  }
  w.flush();
}

}  // namespace lvt::diag
