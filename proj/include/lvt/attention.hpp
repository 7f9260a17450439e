#pragma once

#include <cstdint>
#include <string>

#include "lvt/tensor.hpp"

namespace lvt {

// Kernel catalog for the linearized similarity. Every kernel maps reals to
// non-negatives, which is what makes row normalization well defined.
enum class KernelTag { ReLU, EluPlusOne, Sigmoid };

struct KernelFn {
  KernelTag tag = KernelTag::ReLU;
  double epsilon = 1e-6;
  // With the guard on, epsilon is added to the normalization denominator.
  // With it off, a denominator below epsilon raises DegenerateRowError
  // naming the row; tests use that mode for exact normalization claims.
  bool guard = true;
};

KernelFn kernel_from_name(const std::string& name);
std::string kernel_name(KernelTag tag);
Tensor apply_kernel(const Tensor& x, const KernelFn& kernel);

struct AttentionOutput {
  Tensor y;
  // Filled only when a caller asks to materialize; diagnostics read it,
  // nothing downstream does.
  Tensor materialized;
};

// Quadratic softmax attention. scale toggles the 1/sqrt(D) logit scaling
// (conventional for the softmax baseline; the linear paths never scale).
AttentionOutput softmax_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, bool scale,
                                  bool materialize = false);

// Kernelized attention via the explicit N x N matrix. Exists as the
// equivalence oracle for linear_attention and for diagnostics.
AttentionOutput linear_attention_quadratic(const Tensor& q, const Tensor& k,
                                           const Tensor& v,
                                           const KernelFn& kernel,
                                           bool materialize = false);

// Kernelized attention in the associativity-rearranged order: the D x D
// key-value summary and the length-D key sum are computed once and reused
// by every query row. Never allocates an N x N buffer.
AttentionOutput linear_attention(const Tensor& q, const Tensor& k,
                                 const Tensor& v, const KernelFn& kernel);

// The same two routes on pre-activated features: the caller has already
// applied the kernel map (and any reweighting), so entries are
// non-negative. The model pipeline feeds its fixated features here.
AttentionOutput linear_attention_features(const Tensor& q_feat,
                                          const Tensor& k_feat, const Tensor& v,
                                          double epsilon, bool guard);
AttentionOutput linear_attention_quadratic_features(
    const Tensor& q_feat, const Tensor& k_feat, const Tensor& v, double epsilon,
    bool guard, bool materialize = false);

// Closed-form FLOP totals for one attention call on N tokens of width D,
// matching what the profiler counts op by op.
std::uint64_t softmax_attention_flops(std::int64_t n, std::int64_t d);
std::uint64_t linear_attention_flops(std::int64_t n, std::int64_t d,
                                     KernelTag tag);

}  // namespace lvt
