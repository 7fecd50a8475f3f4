#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "tes/tensor.hpp"

namespace tes {

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// p <- p - lr * g for each (param, grad) pair. Rejects the whole step if any
/// gradient is non-finite; parameters are left untouched in that case.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
              double learning_rate);

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment state for one parameter list.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// Bias-corrected Adam update. `rates`, when non-empty, overrides the learning
/// rate per parameter (used for differential fine-tuning rates).
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               AdamState& state, const AdamHyper& hyper, std::span<const double> rates = {});

}  // namespace tes
