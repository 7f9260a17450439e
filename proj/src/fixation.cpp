#include "lvt/fixation.hpp"

#include "lvt/error.hpp"

namespace lvt {

FixationMode fixation_mode_from_name(const std::string& name) {
  if (name == "none") return FixationMode::None;
  if (name == "separate") return FixationMode::Separate;
  if (name == "cooperative") return FixationMode::Cooperative;
  throw ConfigError("unknown fixation mode '" + name +
                    "' (expected none, separate or cooperative)");
}

std::string fixation_mode_name(FixationMode m) {
  switch (m) {
    case FixationMode::None: return "none";
    case FixationMode::Separate: return "separate";
    case FixationMode::Cooperative: return "cooperative";
  }
  throw ConfigError("bad fixation mode");
}

Aggregation aggregation_from_name(const std::string& name) {
  if (name == "concat") return Aggregation::Concat;
  if (name == "add") return Aggregation::Add;
  if (name == "multiply") return Aggregation::Multiply;
  throw ConfigError("unknown aggregation '" + name +
                    "' (expected concat, add or multiply)");
}

std::string aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::Concat: return "concat";
    case Aggregation::Add: return "add";
    case Aggregation::Multiply: return "multiply";
  }
  throw ConfigError("bad aggregation");
}

std::int64_t aggregation_input_width(Aggregation a, CoopTargets t,
                                     std::int64_t d) {
  if (a == Aggregation::Concat) return (t == CoopTargets::QKV ? 3 : 2) * d;
  return d;
}

FixationParams FixationParams::make(FixationMode mode, Aggregation aggregation,
                                    CoopTargets targets, bool share_ratio,
                                    std::int64_t d, std::mt19937_64& rng) {
  FixationParams p;
  p.mode = mode;
  p.aggregation = aggregation;
  p.coop_targets = targets;
  p.share_ratio = share_ratio;
  // Bias starts at zero so every ratio opens at sigma(0) = 0.5.
  if (mode == FixationMode::Separate) {
    p.w_q = Tensor::xavier(d, d, rng);
    p.b_q = Tensor::zeros({1, d}, true);
    p.w_k = Tensor::xavier(d, d, rng);
    p.b_k = Tensor::zeros({1, d}, true);
  } else if (mode == FixationMode::Cooperative) {
    const std::int64_t in = aggregation_input_width(aggregation, targets, d);
    p.w_coop = Tensor::xavier(in, d, rng);
    p.b_coop = Tensor::zeros({1, d}, true);
    if (!share_ratio) {
      p.w_coop_k = Tensor::xavier(in, d, rng);
      p.b_coop_k = Tensor::zeros({1, d}, true);
    }
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> FixationParams::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push = [&out](const char* name, const Tensor& t) {
    if (t.defined()) out.emplace_back(name, t);
  };
  push("w_q", w_q);
  push("b_q", b_q);
  push("w_k", w_k);
  push("b_k", b_k);
  push("w_coop", w_coop);
  push("b_coop", b_coop);
  push("w_coop_k", w_coop_k);
  push("b_coop_k", b_coop_k);
  return out;
}

std::int64_t FixationParams::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

namespace {

Tensor ratio_head(const Tensor& x, const Tensor& w, const Tensor& b,
                  const char* what) {
  if (w.rows() != x.cols())
    throw ConfigError(std::string(what) + ": projection expects input width " +
                      std::to_string(w.rows()) + ", got " +
                      std::to_string(x.cols()));
  return sigmoid(add_cols(matmul(x, w), b));
}

}  // namespace

FixationResult separate_fixation(const Tensor& q_act, const Tensor& k_act,
                                 const FixationParams& params) {
  if (params.mode != FixationMode::Separate)
    throw ConfigError("separate_fixation called with mode " +
                      fixation_mode_name(params.mode));
  if (q_act.shape() != k_act.shape())
    throw ShapeError("separate_fixation: q " + shape_str(q_act.shape()) +
                     " vs k " + shape_str(k_act.shape()));
  FixationResult r;
  r.gamma_q = ratio_head(q_act, params.w_q, params.b_q, "separate_fixation q");
  r.gamma_k = ratio_head(k_act, params.w_k, params.b_k, "separate_fixation k");
  r.q_hat = mul(r.gamma_q, q_act);
  r.k_hat = mul(r.gamma_k, k_act);
  return r;
}

FixationResult cooperative_fixation(const Tensor& q_act, const Tensor& k_act,
                                    const Tensor& v_act,
                                    const FixationParams& params) {
  if (params.mode != FixationMode::Cooperative)
    throw ConfigError("cooperative_fixation called with mode " +
                      fixation_mode_name(params.mode));
  if (q_act.shape() != k_act.shape() ||
      (params.coop_targets == CoopTargets::QKV &&
       q_act.shape() != v_act.shape()))
    throw ShapeError("cooperative_fixation: mismatched stream shapes");
  const bool with_v = params.coop_targets == CoopTargets::QKV;
  Tensor agg;
  switch (params.aggregation) {
    case Aggregation::Concat:
      agg = with_v ? concat_cols({q_act, k_act, v_act})
                   : concat_cols({q_act, k_act});
      break;
    case Aggregation::Add:
      agg = add(q_act, k_act);
      if (with_v) agg = add(agg, v_act);
      break;
    case Aggregation::Multiply:
      agg = mul(q_act, k_act);
      if (with_v) agg = mul(agg, v_act);
      break;
  }
  FixationResult r;
  r.gamma_q =
      ratio_head(agg, params.w_coop, params.b_coop, "cooperative_fixation");
  r.gamma_k = params.share_ratio
                  ? r.gamma_q
                  : ratio_head(agg, params.w_coop_k, params.b_coop_k,
                               "cooperative_fixation k");
  r.q_hat = mul(r.gamma_q, q_act);
  r.k_hat = mul(r.gamma_k, k_act);
  return r;
}

FixationResult apply_fixation(const Tensor& q_act, const Tensor& k_act,
                              const Tensor& v_act,
                              const FixationParams& params) {
  switch (params.mode) {
    case FixationMode::None: {
      FixationResult r;
      r.q_hat = q_act;
      r.k_hat = k_act;
      return r;
    }
    case FixationMode::Separate:
      return separate_fixation(q_act, k_act, params);
    case FixationMode::Cooperative:
      return cooperative_fixation(q_act, k_act, v_act, params);
  }
  throw ConfigError("bad fixation mode");
}

bool reweighting_monotonicity_check(double a, double b, double m1, double m2) {
  return m2 * b / (m1 * a + m2 * b) > b / (a + b);
}

}  // namespace lvt
