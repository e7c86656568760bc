#include "dira/objectives.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace dira::loss {
namespace {

template <class T>
T norm_tolerance() {
  return T(1e-6) + T(16) * std::numeric_limits<T>::epsilon();
}

template <class T>
void require_unit_rows(const Tensor<T>& z, const char* what) {
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = T(0);
    for (std::size_t c = 0; c < cols; ++c) sq += z.at(r, c) * z.at(r, c);
    if (std::abs(std::sqrt(sq) - T(1)) > norm_tolerance<T>()) {
      throw PreconditionError(std::string(what) + " must have unit-norm rows (row " + std::to_string(r) + ")");
    }
  }
}

void require_matrix(const nn::Shape& s, const char* what) {
  if (s.size() != 2) throw ShapeError(std::string(what) + " must be [B, D], got " + nn::to_string(s));
}

// Per-column standardization along the batch axis; returns ẑ and 1/σ.
template <class T>
Tensor<T> standardize(const Tensor<T>& z, T eps, std::vector<T>& inv_std) {
  const std::size_t batch = z.dim(0), dim = z.dim(1);
  Tensor<T> out({batch, dim});
  inv_std.assign(dim, T(0));
  for (std::size_t j = 0; j < dim; ++j) {
    T mu = T(0);
    for (std::size_t b = 0; b < batch; ++b) mu += z.at(b, j);
    mu /= static_cast<T>(batch);
    T var = T(0);
    for (std::size_t b = 0; b < batch; ++b) var += (z.at(b, j) - mu) * (z.at(b, j) - mu);
    var /= static_cast<T>(batch);
    inv_std[j] = T(1) / std::sqrt(var + eps);
    for (std::size_t b = 0; b < batch; ++b) out.at(b, j) = (z.at(b, j) - mu) * inv_std[j];
  }
  return out;
}

// Backward of `standardize` for one column set: dz = (1/σ)(dẑ - mean(dẑ) - ẑ·mean(dẑ ẑ)).
template <class T>
void standardize_backward(const Tensor<T>& zhat, const std::vector<T>& inv_std, const Tensor<T>& dzhat, Tensor<T>& dz) {
  const std::size_t batch = zhat.dim(0), dim = zhat.dim(1);
  const T n = static_cast<T>(batch);
  for (std::size_t j = 0; j < dim; ++j) {
    T mean_d = T(0), mean_dz = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
      mean_d += dzhat.at(b, j);
      mean_dz += dzhat.at(b, j) * zhat.at(b, j);
    }
    mean_d /= n;
    mean_dz /= n;
    for (std::size_t b = 0; b < batch; ++b) {
      dz.at(b, j) += inv_std[j] * (dzhat.at(b, j) - mean_d - zhat.at(b, j) * mean_dz);
    }
  }
}

template <class T>
Tensor<T> correlation_of(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t batch = a.dim(0), dim = a.dim(1);
  Tensor<T> c({dim, dim});
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t i = 0; i < dim; ++i) {
      const T ai = a.at(bb, i);
      for (std::size_t j = 0; j < dim; ++j) c.at(i, j) += ai * b.at(bb, j);
    }
  for (auto& v : c.values()) v /= static_cast<T>(batch);
  return c;
}

}  // namespace

template <class T>
NegativeQueue<T>::NegativeQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), ring_({capacity, dim}) {
  if (capacity == 0 || dim == 0) throw ParameterError("queue capacity and dimension must be positive");
}

template <class T>
void NegativeQueue<T>::enqueue(const Tensor<T>& z) {
  require_matrix(z.shape(), "enqueued embeddings");
  if (z.dim(1) != dim_) throw ShapeError("queue dimension is " + std::to_string(dim_));
  for (std::size_t r = 0; r < z.dim(0); ++r) {
    std::copy_n(z.data() + r * dim_, dim_, ring_.data() + head_ * dim_);
    head_ = (head_ + 1) % capacity_;
    fill_ = std::min(fill_ + 1, capacity_);
  }
}

template <class T>
Tensor<T> NegativeQueue<T>::entries() const {
  Tensor<T> out({fill_, dim_});
  const std::size_t start = (head_ + capacity_ - fill_) % capacity_;
  for (std::size_t i = 0; i < fill_; ++i) {
    std::copy_n(ring_.data() + ((start + i) % capacity_) * dim_, dim_, out.data() + i * dim_);
  }
  return out;
}

template <class T>
void NegativeQueue<T>::restore(Tensor<T> ring, std::size_t fill, std::size_t head) {
  nn::require_shape(ring.shape(), {capacity_, dim_}, "queue storage");
  if (fill > capacity_ || head >= capacity_) throw ParameterError("queue state out of range");
  ring_ = std::move(ring);
  fill_ = fill;
  head_ = head;
}

LossBundle combine(double dis, double res, double adv_gen, const LossWeights& w) {
  if (w.dis < 0.0 || w.res < 0.0 || w.adv < 0.0) throw ParameterError("loss weights must be non-negative");
  LossBundle b;
  b.dis = dis;
  b.res = res;
  b.adv_gen = adv_gen;
  b.weights = w;
  b.total = w.dis * dis + w.res * res + w.adv * adv_gen;
  return b;
}

template <class T>
Var<T> loss_infonce(const Var<T>& z1, const Tensor<T>& z2, const Tensor<T>& negatives, T temperature) {
  if (!(temperature > T(0))) throw ParameterError("temperature must be positive");
  require_matrix(z1.shape(), "z1");
  nn::require_shape(z2.shape(), z1.shape(), "z2");
  if (negatives.rank() != 2 || negatives.dim(0) == 0) throw PreconditionError("negative queue must hold at least one entry");
  if (negatives.dim(1) != z1.dim(1)) throw ShapeError("negative queue dimension does not match embeddings");
  require_unit_rows(z1.value(), "z1");
  require_unit_rows(z2, "z2");

  const std::size_t batch = z1.dim(0), dim = z1.dim(1), n_neg = negatives.dim(0);
  const auto& a = z1.value();
  // probs[b, 0] is the positive; probs[b, 1 + n] the n-th negative.
  Tensor<T> probs({batch, n_neg + 1});
  T total = T(0);
  std::vector<T> logits(n_neg + 1);
  for (std::size_t b = 0; b < batch; ++b) {
    T pos = T(0);
    for (std::size_t d = 0; d < dim; ++d) pos += a.at(b, d) * z2.at(b, d);
    logits[0] = pos / temperature;
    for (std::size_t n = 0; n < n_neg; ++n) {
      T s = T(0);
      for (std::size_t d = 0; d < dim; ++d) s += a.at(b, d) * negatives.at(n, d);
      logits[n + 1] = s / temperature;
    }
    const T mx = *std::max_element(logits.begin(), logits.end());
    T z = T(0);
    for (T l : logits) z += std::exp(l - mx);
    total += mx + std::log(z) - logits[0];
    for (std::size_t k = 0; k <= n_neg; ++k) probs.at(b, k) = std::exp(logits[k] - mx) / z;
  }
  return nn::make_result<T>(Tensor<T>({1}, total / static_cast<T>(batch)), {z1},
                            [probs = std::move(probs), z2, negatives, temperature, batch, dim, n_neg](nn::Node<T>& self) {
                              auto* g = nn::input_grad(self, 0);
                              if (!g) return;
                              const T scale = self.grad[0] / (static_cast<T>(batch) * temperature);
                              for (std::size_t b = 0; b < batch; ++b) {
                                const T wpos = probs.at(b, 0) - T(1);
                                for (std::size_t d = 0; d < dim; ++d) g->at(b, d) += scale * wpos * z2.at(b, d);
                                for (std::size_t n = 0; n < n_neg; ++n) {
                                  const T w = probs.at(b, n + 1);
                                  for (std::size_t d = 0; d < dim; ++d) g->at(b, d) += scale * w * negatives.at(n, d);
                                }
                              }
                            });
}

template <class T>
Var<T> negative_cosine(const Var<T>& p, const Var<T>& y) {
  require_matrix(p.shape(), "negative_cosine p");
  nn::require_shape(y.shape(), p.shape(), "negative_cosine y");
  const std::size_t batch = p.dim(0), dim = p.dim(1);
  std::vector<T> np(batch), ny(batch), dots(batch);
  T total = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    T pp = T(0), yy = T(0), py = T(0);
    for (std::size_t d = 0; d < dim; ++d) {
      pp += p.value().at(b, d) * p.value().at(b, d);
      yy += y.value().at(b, d) * y.value().at(b, d);
      py += p.value().at(b, d) * y.value().at(b, d);
    }
    np[b] = std::sqrt(pp);
    ny[b] = std::sqrt(yy);
    if (!(np[b] > T(0)) || !(ny[b] > T(0))) throw NumericError("negative cosine of a zero-norm vector");
    dots[b] = py;
    total -= py / (np[b] * ny[b]);
  }
  return nn::make_result<T>(
      Tensor<T>({1}, total / static_cast<T>(batch)), {p, y},
      [np = std::move(np), ny = std::move(ny), dots = std::move(dots), batch, dim](nn::Node<T>& self) {
        const auto& pv = self.inputs[0]->value;
        const auto& yv = self.inputs[1]->value;
        const T s = self.grad[0] / static_cast<T>(batch);
        auto* gp = nn::input_grad(self, 0);
        auto* gy = nn::input_grad(self, 1);
        for (std::size_t b = 0; b < batch; ++b) {
          const T cos = dots[b] / (np[b] * ny[b]);
          for (std::size_t d = 0; d < dim; ++d) {
            if (gp) gp->at(b, d) -= s * (yv.at(b, d) / (np[b] * ny[b]) - cos * pv.at(b, d) / (np[b] * np[b]));
            if (gy) gy->at(b, d) -= s * (pv.at(b, d) / (np[b] * ny[b]) - cos * yv.at(b, d) / (ny[b] * ny[b]));
          }
        }
      });
}

template <class T>
Var<T> loss_simsiam(const Var<T>& p1, const Var<T>& p2, const Var<T>& y1, const Var<T>& y2, bool stop_gradient) {
  const Var<T> t2 = stop_gradient ? y2.detach() : y2;
  const Var<T> t1 = stop_gradient ? y1.detach() : y1;
  return nn::add(nn::scale(negative_cosine(p1, t2), T(0.5)), nn::scale(negative_cosine(p2, t1), T(0.5)));
}

template <class T>
Tensor<T> cross_correlation(const Tensor<T>& za, const Tensor<T>& zb, T eps) {
  require_matrix(za.shape(), "zA");
  nn::require_shape(zb.shape(), za.shape(), "zB");
  std::vector<T> ia, ib;
  return correlation_of(standardize(za, eps, ia), standardize(zb, eps, ib));
}

template <class T>
T barlow_objective(const Tensor<T>& c, T lambda) {
  if (c.rank() != 2 || c.dim(0) != c.dim(1)) throw ShapeError("cross-correlation must be square");
  T on = T(0), off = T(0);
  for (std::size_t i = 0; i < c.dim(0); ++i)
    for (std::size_t j = 0; j < c.dim(1); ++j) {
      if (i == j) {
        on += (T(1) - c.at(i, i)) * (T(1) - c.at(i, i));
      } else {
        off += c.at(i, j) * c.at(i, j);
      }
    }
  return on + lambda * off;
}

template <class T>
Var<T> loss_barlow(const Var<T>& za, const Var<T>& zb, T lambda, T eps) {
  require_matrix(za.shape(), "zA");
  nn::require_shape(zb.shape(), za.shape(), "zB");
  if (za.dim(0) < 2) throw PreconditionError("Barlow Twins loss needs a batch of at least two");
  std::vector<T> inv_a, inv_b;
  Tensor<T> ha = standardize(za.value(), eps, inv_a);
  Tensor<T> hb = standardize(zb.value(), eps, inv_b);
  Tensor<T> c = correlation_of(ha, hb);
  const T value = barlow_objective(c, lambda);
  return nn::make_result<T>(
      Tensor<T>({1}, value), {za, zb},
      [ha = std::move(ha), hb = std::move(hb), inv_a = std::move(inv_a), inv_b = std::move(inv_b), c = std::move(c),
       lambda](nn::Node<T>& self) {
        const std::size_t batch = ha.dim(0), dim = ha.dim(1);
        Tensor<T> g({dim, dim});
        for (std::size_t i = 0; i < dim; ++i)
          for (std::size_t j = 0; j < dim; ++j)
            g.at(i, j) = self.grad[0] * (i == j ? T(-2) * (T(1) - c.at(i, i)) : T(2) * lambda * c.at(i, j));
        const T inv_b_count = T(1) / static_cast<T>(batch);
        if (auto* ga = nn::input_grad(self, 0)) {
          Tensor<T> dha({batch, dim});
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < dim; ++i) {
              T acc = T(0);
              for (std::size_t j = 0; j < dim; ++j) acc += g.at(i, j) * hb.at(b, j);
              dha.at(b, i) = acc * inv_b_count;
            }
          standardize_backward(ha, inv_a, dha, *ga);
        }
        if (auto* gb = nn::input_grad(self, 1)) {
          Tensor<T> dhb({batch, dim});
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < dim; ++j) {
              T acc = T(0);
              for (std::size_t i = 0; i < dim; ++i) acc += g.at(i, j) * ha.at(b, i);
              dhb.at(b, j) = acc * inv_b_count;
            }
          standardize_backward(hb, inv_b, dhb, *gb);
        }
      });
}

template <class T>
Var<T> loss_classwise(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  require_matrix(logits.shape(), "logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("label count does not match batch size");
  Tensor<T> probs({batch, classes});
  T total = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw ParameterError("label " + std::to_string(labels[b]) + " out of range for " + std::to_string(classes) + " classes");
    }
    T mx = logits.value().at(b, 0);
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits.value().at(b, c));
    T z = T(0);
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(logits.value().at(b, c) - mx);
    for (std::size_t c = 0; c < classes; ++c) probs.at(b, c) = std::exp(logits.value().at(b, c) - mx) / z;
    total += mx + std::log(z) - logits.value().at(b, labels[b]);
  }
  return nn::make_result<T>(Tensor<T>({1}, total / static_cast<T>(batch)), {logits},
                            [probs = std::move(probs), labels, batch, classes](nn::Node<T>& self) {
                              auto* g = nn::input_grad(self, 0);
                              if (!g) return;
                              const T s = self.grad[0] / static_cast<T>(batch);
                              for (std::size_t b = 0; b < batch; ++b)
                                for (std::size_t c = 0; c < classes; ++c)
                                  g->at(b, c) += s * (probs.at(b, c) - (c == labels[b] ? T(1) : T(0)));
                            });
}

template <class T>
Var<T> loss_restoration(const Var<T>& original, const Var<T>& restored) {
  nn::require_shape(restored.shape(), original.shape(), "restoration");
  const auto& x = original.value();
  const auto& r = restored.value();
  T total = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) total += (r[i] - x[i]) * (r[i] - x[i]);
  const T count = static_cast<T>(x.size());
  return nn::make_result<T>(Tensor<T>({1}, total / count), {original, restored}, [count](nn::Node<T>& self) {
    const auto& x = self.inputs[0]->value;
    const auto& r = self.inputs[1]->value;
    const T s = T(2) * self.grad[0] / count;
    auto* gx = nn::input_grad(self, 0);
    auto* gr = nn::input_grad(self, 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T d = s * (r[i] - x[i]);
      if (gx) (*gx)[i] -= d;
      if (gr) (*gr)[i] += d;
    }
  });
}

template <class T>
Var<T> loss_adversary_disc(const Var<T>& logits_real, const Var<T>& logits_fake) {
  if (logits_real.shape().size() != 1 || logits_fake.shape().size() != 1) {
    throw ShapeError("adversary logits must be one-dimensional");
  }
  const auto& r = logits_real.value();
  const auto& f = logits_fake.value();
  T real_term = T(0), fake_term = T(0);
  for (std::size_t i = 0; i < r.size(); ++i) real_term += nn::softplus(-r[i]);
  for (std::size_t i = 0; i < f.size(); ++i) fake_term += nn::softplus(f[i]);
  const T nr = static_cast<T>(r.size()), nf = static_cast<T>(f.size());
  return nn::make_result<T>(Tensor<T>({1}, real_term / nr + fake_term / nf), {logits_real, logits_fake},
                            [nr, nf](nn::Node<T>& self) {
                              if (auto* g = nn::input_grad(self, 0)) {
                                const auto& r = self.inputs[0]->value;
                                for (std::size_t i = 0; i < r.size(); ++i)
                                  (*g)[i] += self.grad[0] * (nn::sigmoid_scalar(r[i]) - T(1)) / nr;
                              }
                              if (auto* g = nn::input_grad(self, 1)) {
                                const auto& f = self.inputs[1]->value;
                                for (std::size_t i = 0; i < f.size(); ++i)
                                  (*g)[i] += self.grad[0] * nn::sigmoid_scalar(f[i]) / nf;
                              }
                            });
}

template <class T>
Var<T> loss_adversary_gen(const Var<T>& logits_fake, bool saturating) {
  if (logits_fake.shape().size() != 1) throw ShapeError("adversary logits must be one-dimensional");
  const auto& f = logits_fake.value();
  T total = T(0);
  for (std::size_t i = 0; i < f.size(); ++i) total += saturating ? -nn::softplus(f[i]) : nn::softplus(-f[i]);
  const T n = static_cast<T>(f.size());
  return nn::make_result<T>(Tensor<T>({1}, total / n), {logits_fake}, [n, saturating](nn::Node<T>& self) {
    auto* g = nn::input_grad(self, 0);
    if (!g) return;
    const auto& f = self.inputs[0]->value;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const T s = nn::sigmoid_scalar(f[i]);
      (*g)[i] += self.grad[0] * (saturating ? -s : s - T(1)) / n;
    }
  });
}

#define DIRA_INSTANTIATE_OBJECTIVES(T)                                                                   \
  template class NegativeQueue<T>;                                                                       \
  template Var<T> loss_infonce(const Var<T>&, const Tensor<T>&, const Tensor<T>&, T);                    \
  template Var<T> negative_cosine(const Var<T>&, const Var<T>&);                                         \
  template Var<T> loss_simsiam(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, bool);        \
  template Tensor<T> cross_correlation(const Tensor<T>&, const Tensor<T>&, T);                           \
  template T barlow_objective(const Tensor<T>&, T);                                                      \
  template Var<T> loss_barlow(const Var<T>&, const Var<T>&, T, T);                                       \
  template Var<T> loss_classwise(const Var<T>&, const std::vector<std::size_t>&);                        \
  template Var<T> loss_restoration(const Var<T>&, const Var<T>&);                                        \
  template Var<T> loss_adversary_disc(const Var<T>&, const Var<T>&);                                     \
  template Var<T> loss_adversary_gen(const Var<T>&, bool);

DIRA_INSTANTIATE_OBJECTIVES(float)
DIRA_INSTANTIATE_OBJECTIVES(double)

}  // namespace dira::loss
