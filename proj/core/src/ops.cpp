#include "sslecho/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "sslecho/error.hpp"

namespace sslecho::ops {
namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_string(a.shape()));
  }
}

std::span<Scalar> grad_of(const Tensor& t) {
  detail::TensorNode* node = t.node().get();
  if (node->grad.empty()) node->grad.assign(node->data->size(), Scalar(0));
  return {node->grad.data(), node->grad.size()};
}

// Elementwise binary op helper: fwd(a,b), and partials da, db given (a,b,out).
template <typename Fwd, typename DA, typename DB>
Tensor elementwise2(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                    DA da, DB db) {
  require_same_shape(a, b, name);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<Scalar> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  Tensor result = Tensor::make_result(a.shape(), std::move(out));
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, result, [a, b, result, da, db]() mutable {
      const auto g = result.grad();
      const auto ad = a.data();
      const auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(ad[i], bd[i]);
      }
      if (b.requires_grad()) {
        auto gb = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(ad[i], bd[i]);
      }
    });
  }
  return result;
}

template <typename Fwd, typename D>
Tensor elementwise1(Tape& tape, const Tensor& a, Fwd fwd, D d) {
  const auto ad = a.data();
  std::vector<Scalar> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
  Tensor result = Tensor::make_result(a.shape(), std::move(out));
  if (tape.needs_grad({&a})) {
    tape.record({a}, result, [a, result, d]() mutable {
      const auto g = result.grad();
      const auto ad = a.data();
      auto ga = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d(ad[i]);
    });
  }
  return result;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  std::vector<Scalar> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Tensor result = Tensor::make_result({m, n}, std::move(out));
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, result, [a, b, result, m, k, n]() mutable {
      ConstMatMap g(result.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap(grad_of(a).data(), m, k).noalias() += g * ConstMatMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap(grad_of(b).data(), k, n).noalias() += ConstMatMap(a.data().data(), m, k).transpose() * g;
      }
    });
  }
  return result;
}

Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.numel() != cols) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  const auto xd = x.data();
  const auto bd = bias.data();
  std::vector<Scalar> out(xd.begin(), xd.end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bd[c];
  Tensor result = Tensor::make_result(x.shape(), std::move(out));
  if (tape.needs_grad({&x, &bias})) {
    tape.record({x, bias}, result, [x, bias, result, rows, cols]() mutable {
      const auto g = result.grad();
      if (x.requires_grad()) {
        auto gx = grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = grad_of(bias);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return result;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(tape, matmul(tape, x, weight), bias);
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise2(
      tape, a, b, "add", [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar) { return Scalar(1); }, [](Scalar, Scalar) { return Scalar(1); });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise2(
      tape, a, b, "sub", [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar) { return Scalar(1); }, [](Scalar, Scalar) { return Scalar(-1); });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise2(
      tape, a, b, "mul", [](Scalar x, Scalar y) { return x * y; },
      [](Scalar, Scalar y) { return y; }, [](Scalar x, Scalar) { return x; });
}

Tensor scale(Tape& tape, const Tensor& a, Scalar factor) {
  return elementwise1(
      tape, a, [factor](Scalar x) { return x * factor; }, [factor](Scalar) { return factor; });
}

Tensor relu(Tape& tape, const Tensor& a) {
  return elementwise1(
      tape, a, [](Scalar x) { return x > 0 ? x : Scalar(0); },
      [](Scalar x) { return x > 0 ? Scalar(1) : Scalar(0); });
}

Tensor square(Tape& tape, const Tensor& a) {
  return elementwise1(
      tape, a, [](Scalar x) { return x * x; }, [](Scalar x) { return 2 * x; });
}

Tensor log_clamped(Tape& tape, const Tensor& a, Scalar floor) {
  return elementwise1(
      tape, a, [floor](Scalar x) { return std::log(std::max(x, floor)); },
      [floor](Scalar x) { return x > floor ? Scalar(1) / x : Scalar(0); });
}

Tensor sum(Tape& tape, const Tensor& a) {
  Scalar total = 0;
  for (Scalar v : a.data()) total += v;
  Tensor result = Tensor::make_result({1}, {total});
  if (tape.needs_grad({&a})) {
    tape.record({a}, result, [a, result]() mutable {
      const Scalar g = result.grad()[0];
      for (Scalar& v : grad_of(a)) v += g;
    });
  }
  return result;
}

Tensor mean(Tape& tape, const Tensor& a) {
  return scale(tape, sum(tape, a), Scalar(1) / static_cast<Scalar>(a.numel()));
}

Tensor row_sum(Tape& tape, const Tensor& a) {
  require_rank(a, 2, "row_sum");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto ad = a.data();
  std::vector<Scalar> out(rows, Scalar(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += ad[r * cols + c];
  Tensor result = Tensor::make_result({rows}, std::move(out));
  if (tape.needs_grad({&a})) {
    tape.record({a}, result, [a, result, rows, cols]() mutable {
      const auto g = result.grad();
      auto ga = grad_of(a);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r];
    });
  }
  return result;
}

Tensor softmax(Tape& tape, const Tensor& logits) {
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.numel() / classes;
  const auto z = logits.data();
  std::vector<Scalar> out(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* zr = z.data() + r * classes;
    Scalar* pr = out.data() + r * classes;
    const Scalar mx = *std::max_element(zr, zr + classes);
    Scalar total = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      pr[c] = std::exp(zr[c] - mx);
      total += pr[c];
    }
    for (std::size_t c = 0; c < classes; ++c) pr[c] /= total;
  }
  Tensor result = Tensor::make_result(logits.shape(), std::move(out));
  if (tape.needs_grad({&logits})) {
    tape.record({logits}, result, [logits, result, rows, classes]() mutable {
      const auto g = result.grad();
      const auto p = result.data();
      auto gz = grad_of(logits);
      for (std::size_t r = 0; r < rows; ++r) {
        Scalar dot = 0;
        for (std::size_t c = 0; c < classes; ++c) dot += g[r * classes + c] * p[r * classes + c];
        for (std::size_t c = 0; c < classes; ++c) {
          gz[r * classes + c] += p[r * classes + c] * (g[r * classes + c] - dot);
        }
      }
    });
  }
  return result;
}

Tensor log_softmax(Tape& tape, const Tensor& logits) {
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.numel() / classes;
  const auto z = logits.data();
  std::vector<Scalar> out(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* zr = z.data() + r * classes;
    const Scalar mx = *std::max_element(zr, zr + classes);
    Scalar total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(zr[c] - mx);
    const Scalar lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) out[r * classes + c] = zr[c] - lse;
  }
  Tensor result = Tensor::make_result(logits.shape(), std::move(out));
  if (tape.needs_grad({&logits})) {
    tape.record({logits}, result, [logits, result, rows, classes]() mutable {
      const auto g = result.grad();
      const auto lp = result.data();
      auto gz = grad_of(logits);
      for (std::size_t r = 0; r < rows; ++r) {
        Scalar gsum = 0;
        for (std::size_t c = 0; c < classes; ++c) gsum += g[r * classes + c];
        for (std::size_t c = 0; c < classes; ++c) {
          gz[r * classes + c] += g[r * classes + c] - std::exp(lp[r * classes + c]) * gsum;
        }
      }
    });
  }
  return result;
}

namespace {

// Target GEMM width (output columns) per conv2d image group.
constexpr std::size_t kConvColumns = 1024;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

// Writes one image's patches as [C*kh*kw x out_h*out_w] with row stride ld.
void im2col(const Scalar* img, const ConvGeometry& g, Scalar* cols, std::size_t ld) {
  const std::size_t op = ld;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        Scalar* row = cols + ((c * g.kh + i) * g.kw + j) * op;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            Scalar v = 0;
            if (y >= 0 && x >= 0 && y < static_cast<long>(g.height) && x < static_cast<long>(g.width)) {
              v = img[(c * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x)];
            }
            row[oy * g.out_w + ox] = v;
          }
        }
      }
    }
  }
}

void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* img, std::size_t ld) {
  const std::size_t op = ld;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const Scalar* row = cols + ((c * g.kh + i) * g.kw + j) * op;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (x < 0 || x >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x)] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  if (kernel.dim(1) != g.channels) {
    throw DimensionError("conv2d: input " + shape_string(input.shape()) + " has " +
                         std::to_string(g.channels) + " channels but kernel " +
                         shape_string(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  }
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " larger than padded input " + shape_string(input.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  // Images are processed in groups sharing one GEMM: cols is
  // [patch x n*P] with image b of the group in columns [b*P, (b+1)*P).
  const std::size_t in_img = g.channels * g.height * g.width;
  const std::size_t pix = g.out_pixels();
  const std::size_t group = std::max<std::size_t>(1, kConvColumns / pix);
  std::vector<Scalar> out(g.batch * g.filters * pix);
  {
    std::vector<Scalar> cols(g.patch() * group * pix);
    std::vector<Scalar> fused(g.filters * group * pix);
    ConstMatMap kmat(kernel.data().data(), g.filters, g.patch());
    for (std::size_t b0 = 0; b0 < g.batch; b0 += group) {
      const std::size_t n = std::min(group, g.batch - b0);
      const std::size_t ld = n * pix;
      for (std::size_t b = 0; b < n; ++b)
        im2col(input.data().data() + (b0 + b) * in_img, g, cols.data() + b * pix, ld);
      MatMap(fused.data(), g.filters, ld).noalias() = kmat * ConstMatMap(cols.data(), g.patch(), ld);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t f = 0; f < g.filters; ++f)
          std::copy_n(fused.data() + f * ld + b * pix, pix, out.data() + ((b0 + b) * g.filters + f) * pix);
    }
  }
  Tensor result = Tensor::make_result({g.batch, g.filters, g.out_h, g.out_w}, std::move(out));
  if (tape.needs_grad({&input, &kernel})) {
    tape.record({input, kernel}, result, [input, kernel, result, g, in_img, pix, group]() mutable {
      const Scalar* gout = result.grad().data();
      std::vector<Scalar> go(g.filters * group * pix);
      std::vector<Scalar> cols(g.patch() * group * pix);
      ConstMatMap kmat(kernel.data().data(), g.filters, g.patch());
      Scalar* gk = kernel.requires_grad() ? grad_of(kernel).data() : nullptr;
      Scalar* gin = input.requires_grad() ? grad_of(input).data() : nullptr;
      for (std::size_t b0 = 0; b0 < g.batch; b0 += group) {
        const std::size_t n = std::min(group, g.batch - b0);
        const std::size_t ld = n * pix;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t f = 0; f < g.filters; ++f)
            std::copy_n(gout + ((b0 + b) * g.filters + f) * pix, pix, go.data() + f * ld + b * pix);
        ConstMatMap gom(go.data(), g.filters, ld);
        if (gk != nullptr) {
          for (std::size_t b = 0; b < n; ++b)
            im2col(input.data().data() + (b0 + b) * in_img, g, cols.data() + b * pix, ld);
          MatMap(gk, g.filters, g.patch()).noalias() += gom * ConstMatMap(cols.data(), g.patch(), ld).transpose();
        }
        if (gin != nullptr) {
          MatMap(cols.data(), g.patch(), ld).noalias() = kmat.transpose() * gom;
          for (std::size_t b = 0; b < n; ++b)
            col2im_add(cols.data() + b * pix, g, gin + (b0 + b) * in_img, ld);
        }
      }
    });
  }
  return result;
}

Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormMode mode, Scalar momentum,
                  Scalar eps) {
  require_rank(x, 4, "batch_norm");
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->numel() != channels) {
      throw DimensionError("batch_norm: per-channel tensor " + shape_string(t->shape()) +
                           " does not match input " + shape_string(x.shape()));
    }
  }
  const std::size_t count = batch * hw;
  const auto xd = x.data();
  std::vector<Scalar> mu(channels), inv_std(channels);
  const bool use_batch = mode != BatchNormMode::kInference;
  if (use_batch) {
    for (std::size_t c = 0; c < channels; ++c) {
      Scalar s = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const Scalar* p = xd.data() + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const Scalar m = s / static_cast<Scalar>(count);
      Scalar v = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const Scalar* p = xd.data() + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<Scalar>(count);
      mu[c] = m;
      inv_std[c] = Scalar(1) / std::sqrt(v + eps);
      if (mode == BatchNormMode::kTrain) {
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        const Scalar unbiased = count > 1 ? v * static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : v;
        rm[c] = momentum * rm[c] + (1 - momentum) * m;
        rv[c] = momentum * rv[c] + (1 - momentum) * unbiased;
      }
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = rm[c];
      inv_std[c] = Scalar(1) / std::sqrt(rv[c] + eps);
    }
  }

  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<Scalar> xhat(xd.size());
  std::vector<Scalar> out(xd.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const Scalar h = (xd[off + i] - mu[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = gd[c] * h + bd[c];
      }
    }
  }
  Tensor result = Tensor::make_result(x.shape(), std::move(out));
  if (tape.needs_grad({&x, &gamma, &beta})) {
    tape.record({x, gamma, beta}, result,
                [x, gamma, beta, result, xhat = std::move(xhat), inv_std = std::move(inv_std),
                 batch, channels, hw, count, use_batch]() mutable {
                  const auto g = result.grad();
                  const auto gd = gamma.data();
                  std::vector<Scalar> dgamma(channels, 0), dbeta(channels, 0);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                      const std::size_t off = (b * channels + c) * hw;
                      for (std::size_t i = 0; i < hw; ++i) {
                        dgamma[c] += g[off + i] * xhat[off + i];
                        dbeta[c] += g[off + i];
                      }
                    }
                  }
                  if (gamma.requires_grad()) {
                    auto gg = grad_of(gamma);
                    for (std::size_t c = 0; c < channels; ++c) gg[c] += dgamma[c];
                  }
                  if (beta.requires_grad()) {
                    auto gb = grad_of(beta);
                    for (std::size_t c = 0; c < channels; ++c) gb[c] += dbeta[c];
                  }
                  if (!x.requires_grad()) return;
                  auto gx = grad_of(x);
                  const Scalar n = static_cast<Scalar>(count);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                      const std::size_t off = (b * channels + c) * hw;
                      const Scalar k = gd[c] * inv_std[c];
                      for (std::size_t i = 0; i < hw; ++i) {
                        if (use_batch) {
                          gx[off + i] += k * (g[off + i] - dbeta[c] / n - xhat[off + i] * dgamma[c] / n);
                        } else {
                          gx[off + i] += k * g[off + i];
                        }
                      }
                    }
                  }
                });
  }
  return result;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xd = x.data();
  std::vector<Scalar> out(batch * channels);
  for (std::size_t bc = 0; bc < batch * channels; ++bc) {
    Scalar s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += xd[bc * hw + i];
    out[bc] = s / static_cast<Scalar>(hw);
  }
  Tensor result = Tensor::make_result({batch, channels}, std::move(out));
  if (tape.needs_grad({&x})) {
    tape.record({x}, result, [x, result, batch, channels, hw]() mutable {
      const auto g = result.grad();
      auto gx = grad_of(x);
      const Scalar inv = Scalar(1) / static_cast<Scalar>(hw);
      for (std::size_t bc = 0; bc < batch * channels; ++bc)
        for (std::size_t i = 0; i < hw; ++i) gx[bc * hw + i] += g[bc] * inv;
    });
  }
  return result;
}

}  // namespace sslecho::ops
