#include "lvt/attention.hpp"
#include "lvt/error.hpp"

namespace lvt {

KernelFn kernel_from_name(const std::string& name) {
  KernelFn k;
  if (name == "relu")
    k.tag = KernelTag::ReLU;
  else if (name == "elu1")
    k.tag = KernelTag::EluPlusOne;
  else if (name == "sigmoid")
    k.tag = KernelTag::Sigmoid;
  else
    throw ConfigError("unknown kernel '" + name +
                      "' (expected relu, elu1 or sigmoid)");
  return k;
}

std::string kernel_name(KernelTag tag) {
  switch (tag) {
    case KernelTag::ReLU: return "relu";
    case KernelTag::EluPlusOne: return "elu1";
    case KernelTag::Sigmoid: return "sigmoid";
  }
  throw ConfigError("bad kernel tag");
}

Tensor apply_kernel(const Tensor& x, const KernelFn& kernel) {
  switch (kernel.tag) {
    case KernelTag::ReLU: return relu(x);
    case KernelTag::EluPlusOne: return elu_plus_one(x);
    case KernelTag::Sigmoid: return sigmoid(x);
  }
  throw ConfigError("bad kernel tag");
}

}  // namespace lvt
