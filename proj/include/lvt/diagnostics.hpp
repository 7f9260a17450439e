#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvt/attention.hpp"
#include "lvt/flops.hpp"
#include "lvt/model.hpp"
#include "lvt/tensor.hpp"

namespace lvt::diag {

// Largest sequence length the N x N materializer will allocate.
inline constexpr std::int64_t kMaterializeLimit = 4096;

// Row-normalized attention matrix the family would implicitly use: softmax
// of (scaled) q k^T for the softmax family, row-normalized rho(q) rho(k)^T
// for both linear families. Refuses sequences over kMaterializeLimit.
Tensor materialize_attention(const Tensor& q, const Tensor& k,
                             AttentionFamily family, const KernelFn& kernel,
                             bool scale_qk);

struct ConcentrationStats {
  std::vector<double> entropy;
  std::vector<double> top1_mass;
  std::vector<double> top5_mass;
  // Rows excluded by the masked variant for carrying no distribution.
  std::int64_t skipped_rows = 0;

  double entropy_mean() const;
  double top1_mean() const;
  double top5_mean() const;
};

// Per-row Shannon entropy (0 ln 0 := 0) and top-k mass for k in {1, 5}.
// Rows must be non-negative and sum to 1 within 1e-6.
ConcentrationStats concentration(const Tensor& matrix);

// Tolerant variant for guarded matrices: rows with total mass below
// min_mass are skipped (a guarded degenerate query has an all-zero row),
// the rest are renormalized by their own mass before measuring.
ConcentrationStats concentration_masked(const Tensor& matrix,
                                        double min_mass = 1e-3);

struct ProfileReport {
  AttentionFamily family = AttentionFamily::Linear;
  std::int64_t n = 0;
  std::int64_t d = 0;
  std::uint64_t seed = 0;
  // Analytic counts by operation class from the instrumented tensor pass;
  // a pure function of shapes and config.
  flops::Report flops_forward;
  // Median seconds over the timed repeats of the raw benchmark kernel.
  // Zero when the study ran flops-only.
  double time_s = 0.0;
  // ln-ln least-squares slope of time against n for this family, repeated
  // into every row of the family. NaN when fewer than two timed cells.
  double exponent_fit = 0.0;
  // Bytes allocated during the instrumented forward (cumulative estimate).
  std::uint64_t peak_alloc_bytes = 0;
  // NaN when entropy was not measured for this cell.
  double entropy_mean = 0.0;
  double top1_mass_mean = 0.0;
  bool oom = false;
  std::string note;
  std::uint64_t fingerprint = 0;
};

struct ScalingConfig {
  std::vector<std::int64_t> n_values{1024, 2048, 4096, 8192};
  std::int64_t d = 32;
  std::vector<AttentionFamily> families{AttentionFamily::Linear,
                                        AttentionFamily::Softmax};
  int repeats = 10;
  int warmup = 2;
  std::uint64_t seed = 0;
  KernelFn kernel;
  bool scale_qk = true;
  // Pins the study to one CPU for low-variance timing (best effort).
  bool pin_thread = true;
  bool with_entropy = true;
  // Skip timing and entropy, keeping only counted flops and allocation.
  bool flops_only = false;
  // Run cells on worker threads. Valid only together with flops_only;
  // timed cells always run sequentially for timing integrity.
  bool parallel = false;

  void validate() const;
};

// One report per (family, n) cell. Out-of-memory cells are recorded with
// oom set rather than aborting the study.
std::vector<ProfileReport> scaling_study(const ScalingConfig& cfg);

// Least-squares slope of ln(y) against ln(x). Needs two or more samples,
// all positive, with at least two distinct x.
double fit_exponent(const std::vector<double>& x, const std::vector<double>& y);

void write_scaling_csv(const std::string& path,
                       const std::vector<ProfileReport>& reports);

}  // namespace lvt::diag
