#pragma once

#include <cstddef>
#include <vector>

#include "dira/nn/ops.hpp"

namespace dira::loss {

using nn::Tensor;
using nn::Var;

// Fixed-capacity FIFO of unit-norm embeddings used as contrastive negatives.
template <class T>
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim);

  // Appends rows of `z` [n, dim]; once full, each new row evicts the oldest.
  void enqueue(const Tensor<T>& z);
  // Active rows, oldest first, as [fill, dim].
  Tensor<T> entries() const;

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t fill() const { return fill_; }
  std::size_t head() const { return head_; }

  // Raw ring storage for checkpointing.
  const Tensor<T>& storage() const { return ring_; }
  void restore(Tensor<T> ring, std::size_t fill, std::size_t head);

 private:
  std::size_t capacity_ = 0, dim_ = 0, fill_ = 0, head_ = 0;
  Tensor<T> ring_;
};

// Per-step loss values. total = λ_dis·dis + λ_res·res + λ_adv·adv_gen; the
// discriminator's own loss is reported but optimized separately.
struct LossWeights {
  double dis = 1.0;
  double res = 10.0;
  double adv = 0.001;
};

struct LossBundle {
  double dis = 0.0;
  double res = 0.0;
  double adv_gen = 0.0;
  double adv_disc = 0.0;
  double total = 0.0;
  LossWeights weights;
};

LossBundle combine(double dis, double res, double adv_gen, const LossWeights& weights);

// InfoNCE over one positive (z2) and the rows of `negatives`. Gradient flows into z1 only.
template <class T>
Var<T> loss_infonce(const Var<T>& z1, const Tensor<T>& z2, const Tensor<T>& negatives, T temperature);
template <class T>
Var<T> loss_infonce(const Var<T>& z1, const Tensor<T>& z2, const NegativeQueue<T>& queue, T temperature) {
  return loss_infonce(z1, z2, queue.entries(), temperature);
}

// Mean over rows of -cos(p_b, y_b). Gradients flow into both arguments.
template <class T>
Var<T> negative_cosine(const Var<T>& p, const Var<T>& y);

// ½·D(p1, sg(y2)) + ½·D(p2, sg(y1)); with stop_gradient=false the targets stay in the graph.
template <class T>
Var<T> loss_simsiam(const Var<T>& p1, const Var<T>& p2, const Var<T>& y1, const Var<T>& y2, bool stop_gradient = true);

// Cross-correlation of batch-standardized embeddings, C = (1/B)·ẑAᵀẑB.
template <class T>
Tensor<T> cross_correlation(const Tensor<T>& za, const Tensor<T>& zb, T eps = T(1e-5));
// Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij²
template <class T>
T barlow_objective(const Tensor<T>& c, T lambda);
template <class T>
Var<T> loss_barlow(const Var<T>& za, const Var<T>& zb, T lambda, T eps = T(1e-5));

// Mean softmax cross-entropy against integer (pseudo) labels.
template <class T>
Var<T> loss_classwise(const Var<T>& logits, const std::vector<std::size_t>& labels);

// Mean squared error over every element.
template <class T>
Var<T> loss_restoration(const Var<T>& original, const Var<T>& restored);

// -mean log σ(real) - mean log(1 - σ(fake)).
template <class T>
Var<T> loss_adversary_disc(const Var<T>& logits_real, const Var<T>& logits_fake);

// Non-saturating: -mean log σ(fake). Saturating: mean log(1 - σ(fake)).
template <class T>
Var<T> loss_adversary_gen(const Var<T>& logits_fake, bool saturating = false);

}  // namespace dira::loss
