#pragma once

#include "sslecho/tensor.hpp"

// Differentiable operations. Every op takes the tape first; when the tape is
// not recording or no input requires a gradient the op is evaluated eagerly
// and nothing is recorded.
namespace sslecho::ops {

// [M x K] . [K x N] -> [M x N]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

// x [B x K], weight [K x N], bias [N] -> [B x N]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise; shapes must match exactly.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);

// x [B x N] + bias [N]
Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias);

Tensor scale(Tape& tape, const Tensor& a, Scalar factor);
Tensor relu(Tape& tape, const Tensor& a);
Tensor square(Tape& tape, const Tensor& a);

// log(max(a, floor)); the gradient is zero where the clamp is active.
Tensor log_clamped(Tape& tape, const Tensor& a, Scalar floor = Scalar(1e-12));

Tensor sum(Tape& tape, const Tensor& a);   // -> [1]
Tensor mean(Tape& tape, const Tensor& a);  // -> [1]
// [B x C] -> [B]
Tensor row_sum(Tape& tape, const Tensor& a);

// Along the last axis, with max subtraction.
Tensor softmax(Tape& tape, const Tensor& logits);
Tensor log_softmax(Tape& tape, const Tensor& logits);

// input [B x C x H x W], kernel [F x C x kh x kw] -> [B x F x H' x W'].
// Cross-correlation (no kernel flip), zero padding.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

enum class BatchNormMode {
  kTrain,          // batch statistics; running statistics updated
  kTrainNoUpdate,  // batch statistics; running statistics left untouched
  kInference,      // running statistics
};

// Per-channel normalization of [B x C x H x W]. running_mean/running_var are
// updated in place in kTrain mode: r <- momentum * r + (1 - momentum) * batch.
Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormMode mode,
                  Scalar momentum = Scalar(0.9), Scalar eps = Scalar(1e-5));

// [B x C x H x W] -> [B x C]
Tensor global_avg_pool(Tape& tape, const Tensor& x);

}  // namespace sslecho::ops
