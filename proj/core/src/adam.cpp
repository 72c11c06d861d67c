#include "sslecho/adam.hpp"

#include <cmath>

#include "sslecho/error.hpp"

namespace sslecho {

AdamState make_adam(std::span<const Tensor> params, double lr, double weight_decay) {
  AdamState state;
  state.lr = lr;
  state.weight_decay = weight_decay;
  for (const Tensor& p : params) {
    state.m.emplace_back(p.numel(), Scalar(0));
    state.v.emplace_back(p.numel(), Scalar(0));
  }
  return state;
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " tensors but " + std::to_string(params.size()) + " were given");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
    }
    if (!params[i].has_grad()) continue;
    for (Scalar g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw DivergenceError("adam_step: non-finite gradient in parameter " + std::to_string(i) +
                              " at step " + std::to_string(state.step + 1));
      }
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto w = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double grad = static_cast<double>(g[j]) + state.weight_decay * static_cast<double>(w[j]);
      m[j] = static_cast<Scalar>(state.beta1 * m[j] + (1.0 - state.beta1) * grad);
      v[j] = static_cast<Scalar>(state.beta2 * v[j] + (1.0 - state.beta2) * grad * grad);
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] = static_cast<Scalar>(w[j] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

}  // namespace sslecho
