#pragma once

#include <cmath>

#include "dira/nn/autograd.hpp"

namespace dira::nn {

// Numerically stable log(1 + exp(x)).
template <class T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T factor);
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);

template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> leaky_relu(const Var<T>& a, T slope);
template <class T> Var<T> sigmoid(const Var<T>& a);

// x [B, in], weight [out, in], bias [out] (bias may be undefined).
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// x [B, C, H, W], weight [O, C, k, k], bias [O]; square kernels, zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad);

template <class T> Var<T> avg_pool2(const Var<T>& x);
template <class T> Var<T> upsample_nearest2(const Var<T>& x);
template <class T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> global_avg_pool(const Var<T>& x);

// Batch normalization over the batch axis of x [B, F]. In training mode the
// batch statistics are used and the running estimates are updated in place.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5));

// Rows of x [B, D] scaled to unit Euclidean norm.
template <class T> Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12));

// Mean binary cross-entropy of sigmoid(logits) against constant targets in [0, 1].
template <class T> Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets);

// 1 - (2 sum(p g) + smooth) / (sum(p) + sum(g) + smooth) per sample, p = sigmoid(logits),
// averaged over the leading batch axis. With skip_empty, samples whose target is
// all zero are left out of the average (zero loss if every sample is empty).
template <class T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<T>& targets, T smooth = T(1), bool skip_empty = false);

}  // namespace dira::nn
