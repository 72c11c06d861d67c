#pragma once

#include <functional>

#include "sslecho/rng.hpp"
#include "sslecho/tensor.hpp"

namespace sslecho {

// Logits [B x C] for inputs x [B x ...]. Callers that wrap a model must make
// sure the function does not push gradients into trainable parameters during
// the perturbation search (see detached_view in model.hpp).
using LogitFn = std::function<Tensor(Tape& tape, const Tensor& x)>;

struct VatOptions {
  double epsilon = 6.0;   // ||delta||_2 per example
  double xi = 1e-6;       // finite-difference step, relative to ||x||
  int power_iters = 1;
};

// Adversarial direction for each example by power iteration on
// KL(p(x) || p(x + xi d)), scaled to norm epsilon. The base prediction p(x) is
// a constant. Rows whose gradient vanishes keep their random start direction
// (with a logged warning).
Tensor vat_perturbation(const LogitFn& logits, const Tensor& x, const VatOptions& options, Rng& rng);

// Mean over the batch of KL(p(x) || p(x + delta)); p(x) carries no gradient.
Tensor vat_loss(Tape& tape, const LogitFn& logits, const Tensor& x, const Tensor& delta);

}  // namespace sslecho
