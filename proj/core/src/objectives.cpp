#include "sslecho/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/ops.hpp"

namespace sslecho {

ClassWeights ClassWeights::uniform(std::size_t classes) {
  return ClassWeights{std::vector<double>(classes, 1.0 / static_cast<double>(classes))};
}

ClassWeights class_weights(std::span<const long> counts) {
  if (counts.empty()) throw ContractError("class_weights: no classes");
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] < 1) {
      throw ContractError("class_weights: class " + std::to_string(c) +
                          " has no training examples (degenerate class)");
    }
  }
  // prod_{k!=c} N_k / sum_j prod_{k!=j} N_k == (1/N_c) / sum_j (1/N_j).
  // The reciprocal form avoids overflow of the products.
  double total = 0.0;
  std::vector<double> inv(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    inv[c] = 1.0 / static_cast<double>(counts[c]);
    total += inv[c];
  }
  ClassWeights out;
  out.weights.resize(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) out.weights[c] = inv[c] / total;
  return out;
}

namespace {

void check_probs_targets(const Tensor& probs, const Tensor& targets, const ClassWeights& w,
                         const char* name) {
  if (probs.rank() != 2 || probs.shape() != targets.shape()) {
    throw DimensionError(std::string(name) + ": probs " + shape_string(probs.shape()) +
                         " and targets " + shape_string(targets.shape()) + " must be equal [B x C]");
  }
  if (probs.dim(1) != w.size()) {
    throw DimensionError(std::string(name) + ": " + std::to_string(w.size()) +
                         " class weights for " + std::to_string(probs.dim(1)) + " classes");
  }
}

constexpr Scalar kProbFloor = Scalar(1e-12);

}  // namespace

Tensor weighted_cross_entropy(Tape& tape, const Tensor& probs, const Tensor& targets,
                              const ClassWeights& weights) {
  check_probs_targets(probs, targets, weights, "weighted_cross_entropy");
  const std::size_t rows = probs.dim(0), classes = probs.dim(1);
  std::vector<Scalar> coef(rows * classes);
  const auto t = targets.data();
  const auto p = probs.data();
  std::size_t clamped = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t i = r * classes + c;
      coef[i] = static_cast<Scalar>(-weights[c]) * t[i] / static_cast<Scalar>(rows);
      if (t[i] != 0 && p[i] < kProbFloor) ++clamped;
    }
  }
  if (clamped > 0) {
    log::warning("weighted_cross_entropy: clamped " + std::to_string(clamped) +
                 " target-class probabilities at 1e-12");
  }
  Tensor logp = ops::log_clamped(tape, probs, kProbFloor);
  return ops::sum(tape, ops::mul(tape, logp, Tensor::from(probs.shape(), std::move(coef))));
}

std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  if (probs.rank() != 2) throw DimensionError("argmax_rows: expected [N x C], got " + shape_string(probs.shape()));
  const std::size_t rows = probs.dim(0), classes = probs.dim(1);
  const auto p = probs.data();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (p[r * classes + c] > p[r * classes + best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  std::vector<Scalar> values(labels.size() * classes, Scalar(0));
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= classes) throw ContractError("one_hot: label out of range");
    values[r * classes + labels[r]] = Scalar(1);
  }
  return Tensor::from({labels.size(), classes}, std::move(values));
}

std::size_t pseudo_label_count(const Tensor& probs, double tau) {
  const auto idx = argmax_rows(probs);
  const std::size_t classes = probs.dim(1);
  std::size_t n = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (static_cast<double>(probs.data()[r * classes + idx[r]]) > tau) ++n;
  }
  return n;
}

Tensor pseudo_label_loss(Tape& tape, const Tensor& probs, double tau, const ClassWeights& weights) {
  const auto idx = argmax_rows(probs);
  const std::size_t rows = probs.dim(0), classes = probs.dim(1);
  std::vector<Scalar> targets(rows * classes, Scalar(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (static_cast<double>(probs.data()[r * classes + idx[r]]) > tau) targets[r * classes + idx[r]] = 1;
  }
  return weighted_cross_entropy(tape, probs, Tensor::from(probs.shape(), std::move(targets)), weights);
}

std::vector<Scalar> sharpen(std::span<const Scalar> p, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("sharpen: temperature must be positive");
  // Work in log space so that small T does not underflow every entry.
  const double inv_t = 1.0 / temperature;
  std::vector<double> logs(p.size());
  double mx = -INFINITY;
  for (std::size_t c = 0; c < p.size(); ++c) {
    logs[c] = p[c] > 0 ? inv_t * std::log(static_cast<double>(p[c])) : -INFINITY;
    mx = std::max(mx, logs[c]);
  }
  double total = 0.0;
  std::vector<Scalar> q(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double e = std::isfinite(logs[c]) ? std::exp(logs[c] - mx) : 0.0;
    q[c] = static_cast<Scalar>(e);
    total += e;
  }
  for (Scalar& v : q) v = static_cast<Scalar>(v / total);
  return q;
}

MixupResult mixup_with_lambda(std::span<const Scalar> x1, std::span<const Scalar> y1,
                              std::span<const Scalar> x2, std::span<const Scalar> y2,
                              double lambda) {
  if (x1.size() != x2.size() || y1.size() != y2.size()) {
    throw DimensionError("mixup: operands differ in size");
  }
  const double lam = std::max(lambda, 1.0 - lambda);
  MixupResult out;
  out.lambda = lam;
  out.x.resize(x1.size());
  out.y.resize(y1.size());
  if (lam == 1.0) {
    std::copy(x1.begin(), x1.end(), out.x.begin());
    std::copy(y1.begin(), y1.end(), out.y.begin());
    return out;
  }
  const Scalar a = static_cast<Scalar>(lam), b = static_cast<Scalar>(1.0 - lam);
  for (std::size_t i = 0; i < x1.size(); ++i) out.x[i] = a * x1[i] + b * x2[i];
  for (std::size_t i = 0; i < y1.size(); ++i) out.y[i] = a * y1[i] + b * y2[i];
  return out;
}

MixupResult mixup(std::span<const Scalar> x1, std::span<const Scalar> y1,
                  std::span<const Scalar> x2, std::span<const Scalar> y2, double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ContractError("mixup: alpha must be positive");
  return mixup_with_lambda(x1, y1, x2, y2, rng.beta(alpha, alpha));
}

Tensor multitask_loss(Tape& tape, const Tensor& diag_probs, const Tensor& diag_targets,
                      const Tensor& view_probs, const Tensor& view_targets, double gamma,
                      const ClassWeights& diag_weights, const ClassWeights& view_weights) {
  if (gamma < 0.0) throw ContractError("multitask_loss: gamma must be non-negative");
  Tensor diag = weighted_cross_entropy(tape, diag_probs, diag_targets, diag_weights);
  if (gamma == 0.0) return diag;
  Tensor view = weighted_cross_entropy(tape, view_probs, view_targets, view_weights);
  return ops::add(tape, diag, ops::scale(tape, view, static_cast<Scalar>(gamma)));
}

std::string to_string(RampMode mode) {
  switch (mode) {
    case RampMode::kDelayedRamp: return "delayed_ramp";
    case RampMode::kImmediateRamp: return "immediate_ramp";
    case RampMode::kConstant: return "constant";
  }
  return "unknown";
}

RampMode ramp_mode_from_string(const std::string& text) {
  if (text == "delayed_ramp") return RampMode::kDelayedRamp;
  if (text == "immediate_ramp") return RampMode::kImmediateRamp;
  if (text == "constant") return RampMode::kConstant;
  throw ConfigError("unknown lambda schedule mode '" + text +
                    "' (expected delayed_ramp|immediate_ramp|constant)");
}

void LambdaSchedule::validate() const {
  if (!(lambda_max >= 0.0)) throw ConfigError("lambda_max must be >= 0");
  if (delay_iters < 0) throw ConfigError("delay_iters must be >= 0");
  if (ramp_iters < 1) throw ConfigError("ramp_iters must be >= 1");
}

double lambda_at(long t, const LambdaSchedule& s) {
  if (t < 0) throw ContractError("lambda_at: negative iteration");
  long start = 0;
  switch (s.mode) {
    case RampMode::kConstant: return s.lambda_max;
    case RampMode::kImmediateRamp: start = 0; break;
    case RampMode::kDelayedRamp: start = s.delay_iters; break;
  }
  if (t <= start) return 0.0;
  if (t >= start + s.ramp_iters) return s.lambda_max;
  const double frac = static_cast<double>(t - start) / static_cast<double>(s.ramp_iters);
  return std::min(s.lambda_max, s.lambda_max * frac);
}

}  // namespace sslecho
