#pragma once

#include <random>
#include <string>
#include <vector>

#include "lvt/tensor.hpp"

namespace lvt {

enum class FixationMode { None, Separate, Cooperative };
enum class Aggregation { Concat, Add, Multiply };
// Which activated streams feed the cooperative aggregate.
enum class CoopTargets { QK, QKV };

FixationMode fixation_mode_from_name(const std::string& name);
std::string fixation_mode_name(FixationMode m);
Aggregation aggregation_from_name(const std::string& name);
std::string aggregation_name(Aggregation a);

std::int64_t aggregation_input_width(Aggregation a, CoopTargets t,
                                     std::int64_t d);

// Learned reweighting of the kernel-activated queries and keys. Separate
// mode gives Q and K their own affine+sigmoid ratio heads; cooperative mode
// derives the ratio from an aggregate of the activated streams, optionally
// sharing one ratio between Q and K.
struct FixationParams {
  FixationMode mode = FixationMode::None;
  Aggregation aggregation = Aggregation::Concat;
  CoopTargets coop_targets = CoopTargets::QKV;
  bool share_ratio = true;

  Tensor w_q, b_q;            // Separate
  Tensor w_k, b_k;            // Separate
  Tensor w_coop, b_coop;      // Cooperative (also the shared head)
  Tensor w_coop_k, b_coop_k;  // Cooperative without sharing

  static FixationParams make(FixationMode mode, Aggregation aggregation,
                             CoopTargets targets, bool share_ratio,
                             std::int64_t d, std::mt19937_64& rng);

  // Live parameter handles, stable order; names mirror the field names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::int64_t param_count() const;
};

struct FixationResult {
  Tensor q_hat, k_hat;
  Tensor gamma_q, gamma_k;  // diagnostics; same handle when shared
};

FixationResult separate_fixation(const Tensor& q_act, const Tensor& k_act,
                                 const FixationParams& params);

FixationResult cooperative_fixation(const Tensor& q_act, const Tensor& k_act,
                                    const Tensor& v_act,
                                    const FixationParams& params);

// Dispatch on params.mode; None passes the inputs through untouched.
FixationResult apply_fixation(const Tensor& q_act, const Tensor& k_act,
                              const Tensor& v_act,
                              const FixationParams& params);

// True iff reweighting (m1 on a, m2 on b) strictly raises b's share of the
// two-term normalized score, i.e. m2*b/(m1*a + m2*b) > b/(a+b). Callers
// supply a,b > 0 and ratios in (0,1).
bool reweighting_monotonicity_check(double a, double b, double m1, double m2);

}  // namespace lvt
