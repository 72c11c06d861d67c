#pragma once

#include <span>
#include <vector>

#include "sslecho/tensor.hpp"

namespace sslecho {

// Adam with bias correction. Weight decay is the classic coupled L2 penalty:
// grad += weight_decay * param before the moment updates.
struct AdamState {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  long step = 0;
  std::vector<std::vector<Scalar>> m;
  std::vector<std::vector<Scalar>> v;
};

AdamState make_adam(std::span<const Tensor> params, double lr, double weight_decay);

// Updates params in place from their gradients. Throws DivergenceError when a
// gradient is NaN/Inf (parameters are left untouched in that case) and
// DimensionError when the state does not match the parameter list.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace sslecho
