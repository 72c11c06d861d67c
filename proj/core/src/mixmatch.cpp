#include <algorithm>

#include "sslecho/error.hpp"
#include "sslecho/objectives.hpp"
#include "sslecho/ops.hpp"

namespace sslecho {

void MixMatchConfig::validate() const {
  if (k < 1) throw ConfigError("mixmatch: K must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("mixmatch: T must be > 0");
  if (!(alpha > 0.0)) throw ConfigError("mixmatch: alpha must be > 0");
}

std::size_t default_max_shift(std::size_t image_size) { return std::max<std::size_t>(2, image_size / 16); }

Tensor random_translate(const Tensor& images, std::size_t max_shift, Rng& rng) {
  if (images.rank() != 4) {
    throw DimensionError("random_translate: expected [N x C x H x W], got " + shape_string(images.shape()));
  }
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const auto src = images.data();
  std::vector<Scalar> out(src.size(), Scalar(0));
  const long m = static_cast<long>(max_shift);
  for (std::size_t i = 0; i < n; ++i) {
    const long dy = rng.uniform_int(-m, m);
    const long dx = rng.uniform_int(-m, m);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        const long sy = static_cast<long>(y) - dy;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (std::size_t x = 0; x < w; ++x) {
          const long sx = static_cast<long>(x) - dx;
          if (sx < 0 || sx >= static_cast<long>(w)) continue;
          out[base + y * w + x] = src[base + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
        }
      }
    }
  }
  return Tensor::from(images.shape(), std::move(out));
}

MixMatchOutput mixmatch_transform(const ProbabilityFn& predict, const LabeledBatch& labeled,
                                  const Tensor& unlabeled_images, const MixMatchConfig& cfg,
                                  Rng& rng) {
  cfg.validate();
  if (labeled.images.rank() != 4 || unlabeled_images.rank() != 4) {
    throw DimensionError("mixmatch_transform: image batches must be [N x C x H x W]");
  }
  const std::size_t b = labeled.images.dim(0);
  const std::size_t bu = unlabeled_images.dim(0);
  const std::size_t classes = labeled.targets.dim(1);
  const std::size_t pixels = labeled.images.numel() / b;
  if (unlabeled_images.numel() / bu != pixels || labeled.targets.dim(0) != b) {
    throw DimensionError("mixmatch_transform: labeled and unlabeled batches disagree in shape");
  }
  const std::size_t shift = cfg.max_shift > 0 ? cfg.max_shift : default_max_shift(labeled.images.dim(2));
  Rng aug_rng = rng.split("augment");
  Rng mix_rng = rng.split("mix");

  const Tensor x_hat = cfg.augment ? random_translate(labeled.images, shift, aug_rng) : labeled.images;

  // K augmented copies of the unlabeled batch, copy-major.
  Shape u_shape = unlabeled_images.shape();
  u_shape[0] = cfg.k * bu;
  std::vector<Scalar> u_values;
  u_values.reserve(cfg.k * unlabeled_images.numel());
  std::vector<Scalar> mean_probs(bu * classes, Scalar(0));
  for (std::size_t k = 0; k < cfg.k; ++k) {
    const Tensor u_k = cfg.augment ? random_translate(unlabeled_images, shift, aug_rng) : unlabeled_images;
    u_values.insert(u_values.end(), u_k.data().begin(), u_k.data().end());
    const Tensor probs = predict(u_k);
    if (probs.rank() != 2 || probs.dim(0) != bu || probs.dim(1) != classes) {
      throw DimensionError("mixmatch_transform: predictor returned " + shape_string(probs.shape()));
    }
    for (std::size_t i = 0; i < mean_probs.size(); ++i) mean_probs[i] += probs.data()[i];
  }
  std::vector<Scalar> guess_values(cfg.k * bu * classes);
  for (std::size_t u = 0; u < bu; ++u) {
    std::vector<Scalar> avg(classes);
    for (std::size_t c = 0; c < classes; ++c) avg[c] = mean_probs[u * classes + c] / static_cast<Scalar>(cfg.k);
    const auto q = sharpen(avg, cfg.temperature);
    for (std::size_t k = 0; k < cfg.k; ++k) {
      std::copy(q.begin(), q.end(), guess_values.begin() + static_cast<long>(((k * bu) + u) * classes));
    }
  }
  const Tensor u_hat = Tensor::from(u_shape, std::move(u_values));
  const Tensor guesses = Tensor::from({cfg.k * bu, classes}, std::move(guess_values));

  // Mixing pool W = shuffle(concat(X_hat, U_hat)).
  const std::size_t total = b + cfg.k * bu;
  auto row_x = [&](std::size_t i) -> std::span<const Scalar> {
    return i < b ? x_hat.data().subspan(i * pixels, pixels) : u_hat.data().subspan((i - b) * pixels, pixels);
  };
  auto row_y = [&](std::size_t i) -> std::span<const Scalar> {
    return i < b ? labeled.targets.data().subspan(i * classes, classes)
                 : guesses.data().subspan((i - b) * classes, classes);
  };
  const auto perm = mix_rng.permutation(total);

  std::vector<Scalar> xs(total * pixels), ys(total * classes);
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t j = perm[i];
    MixupResult m = cfg.mixup ? mixup(row_x(i), row_y(i), row_x(j), row_y(j), cfg.alpha, mix_rng)
                              : mixup_with_lambda(row_x(i), row_y(i), row_x(j), row_y(j), 1.0);
    std::copy(m.x.begin(), m.x.end(), xs.begin() + static_cast<long>(i * pixels));
    std::copy(m.y.begin(), m.y.end(), ys.begin() + static_cast<long>(i * classes));
  }

  MixMatchOutput out;
  Shape lx = labeled.images.shape();
  out.labeled.images = Tensor::from(lx, std::vector<Scalar>(xs.begin(), xs.begin() + static_cast<long>(b * pixels)));
  out.labeled.targets = Tensor::from({b, classes}, std::vector<Scalar>(ys.begin(), ys.begin() + static_cast<long>(b * classes)));
  out.unlabeled.images = Tensor::from(u_shape, std::vector<Scalar>(xs.begin() + static_cast<long>(b * pixels), xs.end()));
  out.unlabeled.targets = Tensor::from({cfg.k * bu, classes}, std::vector<Scalar>(ys.begin() + static_cast<long>(b * classes), ys.end()));
  out.guesses = guesses;
  return out;
}

Tensor mixmatch_unlabeled_loss(Tape& tape, const Tensor& guesses, const Tensor& probs) {
  if (guesses.shape() != probs.shape() || probs.rank() != 2) {
    throw DimensionError("mixmatch_unlabeled_loss: guesses " + shape_string(guesses.shape()) +
                         " vs probs " + shape_string(probs.shape()));
  }
  const Tensor q = guesses.detach();
  Tensor sq = ops::square(tape, ops::sub(tape, probs, q));
  return ops::scale(tape, ops::sum(tape, sq), Scalar(1) / static_cast<Scalar>(probs.numel()));
}

}  // namespace sslecho
