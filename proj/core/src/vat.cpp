#include "sslecho/vat.hpp"

#include <cmath>

#include "sslecho/error.hpp"
#include "sslecho/log.hpp"
#include "sslecho/ops.hpp"

namespace sslecho {
namespace {

// Per-example KL(p || softmax(q_logits)) summed over the batch, with p fixed.
Tensor kl_sum(Tape& tape, const Tensor& p, const Tensor& log_p, const Tensor& q_logits) {
  Tensor log_q = ops::log_softmax(tape, q_logits);
  Tensor diff = ops::sub(tape, log_p, log_q);
  return ops::sum(tape, ops::mul(tape, p, diff));
}

struct BasePrediction {
  Tensor p;
  Tensor log_p;
};

BasePrediction base_prediction(const LogitFn& logits, const Tensor& x) {
  Tape tape = Tape::no_grad();
  Tensor z = logits(tape, x.detach());
  return {ops::softmax(tape, z).detach(), ops::log_softmax(tape, z).detach()};
}

double row_norm(std::span<const Scalar> v) {
  double s = 0.0;
  for (Scalar e : v) s += static_cast<double>(e) * static_cast<double>(e);
  return std::sqrt(s);
}

}  // namespace

Tensor vat_perturbation(const LogitFn& logits, const Tensor& x, const VatOptions& options, Rng& rng) {
  if (!(options.epsilon > 0.0)) throw ContractError("vat_perturbation: epsilon must be positive");
  if (options.power_iters < 1) throw ContractError("vat_perturbation: power_iters must be >= 1");
  const std::size_t batch = x.dim(0);
  const std::size_t per = x.numel() / batch;
  const BasePrediction base = base_prediction(logits, x);
  const Tensor x_const = x.detach();

  // Random unit start direction per example.
  std::vector<Scalar> d(x.numel());
  for (Scalar& v : d) v = static_cast<Scalar>(rng.normal());
  for (std::size_t b = 0; b < batch; ++b) {
    std::span<Scalar> row(d.data() + b * per, per);
    const double n = row_norm(row);
    for (Scalar& v : row) v = static_cast<Scalar>(v / n);
  }
  const std::vector<Scalar> d0 = d;

  std::vector<double> step(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const double xn = row_norm(x.data().subspan(b * per, per));
    step[b] = options.xi * (xn > 0.0 ? xn : 1.0);
  }

  std::vector<bool> flat(batch, false);
  for (int it = 0; it < options.power_iters; ++it) {
    std::vector<Scalar> r(d.size());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < per; ++i) r[b * per + i] = static_cast<Scalar>(step[b] * d[b * per + i]);
    Tensor r_t = Tensor::from(x.shape(), std::move(r), true);
    Tape tape;
    Tensor z = logits(tape, ops::add(tape, x_const, r_t));
    Tensor kl = kl_sum(tape, base.p, base.log_p, z);
    tape.backward(kl);
    const auto g = r_t.grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const double n = row_norm(g.subspan(b * per, per));
      if (!(n > 0.0) || !std::isfinite(n)) {
        flat[b] = true;
        continue;
      }
      for (std::size_t i = 0; i < per; ++i) d[b * per + i] = static_cast<Scalar>(g[b * per + i] / n);
    }
  }

  std::size_t flat_rows = 0;
  std::vector<Scalar> delta(d.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const Scalar* src = flat[b] ? d0.data() + b * per : d.data() + b * per;
    if (flat[b]) ++flat_rows;
    for (std::size_t i = 0; i < per; ++i) delta[b * per + i] = static_cast<Scalar>(options.epsilon * src[i]);
  }
  if (flat_rows > 0) {
    log::warning("vat_perturbation: zero KL gradient for " + std::to_string(flat_rows) +
                 " example(s); using the random start direction");
  }
  return Tensor::from(x.shape(), std::move(delta));
}

Tensor vat_loss(Tape& tape, const LogitFn& logits, const Tensor& x, const Tensor& delta) {
  if (x.shape() != delta.shape()) {
    throw DimensionError("vat_loss: delta " + shape_string(delta.shape()) + " vs x " + shape_string(x.shape()));
  }
  const BasePrediction base = base_prediction(logits, x);
  Tensor xp = ops::add(tape, x.detach(), delta.detach());
  Tensor z = logits(tape, xp);
  Tensor kl = kl_sum(tape, base.p, base.log_p, z);
  return ops::scale(tape, kl, Scalar(1) / static_cast<Scalar>(x.dim(0)));
}

}  // namespace sslecho
