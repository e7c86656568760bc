#include "dira/nn/ops.hpp"

#include <Eigen/Core>

namespace dira::nn {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <class T, class F>
Var<T> unary(const Var<T>& a, F&& f_and_df) {
  Tensor<T> out(a.shape());
  const auto& in = a.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f_and_df(in[i]).first;
  return make_result<T>(std::move(out), {a}, [f = std::forward<F>(f_and_df)](Node<T>& self) {
    auto* ga = input_grad(self, 0);
    if (!ga) return;
    const auto& in = self.inputs[0]->value;
    for (std::size_t i = 0; i < in.size(); ++i) (*ga)[i] += self.grad[i] * f(in[i]).second;
  });
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " + to_string(s));
  }
}

template <class T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<long>(height)) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = image + (c * height + static_cast<std::size_t>(ih)) * width;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(width)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* image) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(height)) continue;
          T* dst = image + (c * height + static_cast<std::size_t>(ih)) * width;
          const T* src = row + oh * out_w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            if (iw >= 0 && iw < static_cast<long>(width)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T total = T(0);
  for (T v : a.value().values()) total += v;
  return make_result<T>(Tensor<T>({1}, total), {a}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (auto& v : g->values()) v += self.grad[0];
    }
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  return make_result<T>(a.value().reshaped(std::move(shape)), {a}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary(a, [](T x) { return std::pair<T, T>{x > T(0) ? x : T(0), x > T(0) ? T(1) : T(0)}; });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary(a, [slope](T x) { return std::pair<T, T>{x > T(0) ? x : slope * x, x > T(0) ? T(1) : slope}; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(a, [](T x) {
    const T s = sigmoid_scalar(x);
    return std::pair<T, T>{s, s * (T(1) - s)};
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " + to_string(weight.shape()));
  }
  if (bias.defined()) require_shape(bias.shape(), {out}, "linear bias");
  Tensor<T> y({batch, out});
  MapMat<T> ym(y.data(), batch, out);
  ym.noalias() = ConstMapMat<T>(x.value().data(), batch, in) * ConstMapMat<T>(weight.value().data(), out, in).transpose();
  if (bias.defined()) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < out; ++o) y.at(b, o) += bias.value()[o];
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), std::move(inputs), [batch, in, out](Node<T>& self) {
    ConstMapMat<T> gy(self.grad.data(), batch, out);
    if (auto* gx = input_grad(self, 0)) {
      MapMat<T>(gx->data(), batch, in).noalias() += gy * ConstMapMat<T>(self.inputs[1]->value.data(), out, in);
    }
    if (auto* gw = input_grad(self, 1)) {
      MapMat<T>(gw->data(), out, in).noalias() += gy.transpose() * ConstMapMat<T>(self.inputs[0]->value.data(), batch, in);
    }
    if (self.inputs.size() > 2) {
      if (auto* gb = input_grad(self, 2)) {
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < out; ++o) (*gb)[o] += gy(b, o);
      }
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t out_ch = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != channels || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " + to_string(x.shape()));
  }
  if (height + 2 * pad < k || width + 2 * pad < k || stride == 0) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " too small for kernel");
  }
  if (bias.defined()) require_shape(bias.shape(), {out_ch}, "conv2d bias");
  const std::size_t out_h = (height + 2 * pad - k) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - k) / stride + 1;
  const std::size_t patch = channels * k * k, plane = out_h * out_w;

  Tensor<T> y({batch, out_ch, out_h, out_w});
  std::vector<T> cols(patch * plane);
  ConstMapMat<T> wm(weight.value().data(), out_ch, patch);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.value().data() + b * channels * height * width, channels, height, width, k, stride, pad, out_h, out_w,
           cols.data());
    MapMat<T> yb(y.data() + b * out_ch * plane, out_ch, plane);
    yb.noalias() = wm * ConstMapMat<T>(cols.data(), patch, plane);
    if (bias.defined()) {
      for (std::size_t o = 0; o < out_ch; ++o) yb.row(o).array() += bias.value()[o];
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), std::move(inputs), [=](Node<T>& self) {
    auto* gx = input_grad(self, 0);
    auto* gw = input_grad(self, 1);
    Tensor<T>* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    const auto& xv = self.inputs[0]->value;
    ConstMapMat<T> wm(self.inputs[1]->value.data(), out_ch, patch);
    std::vector<T> cols(patch * plane);
    std::vector<T> dcols(gx ? patch * plane : 0);
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMapMat<T> gy(self.grad.data() + b * out_ch * plane, out_ch, plane);
      if (gb) {
        for (std::size_t o = 0; o < out_ch; ++o) (*gb)[o] += gy.row(o).sum();
      }
      if (gw) {
        im2col(xv.data() + b * channels * height * width, channels, height, width, k, stride, pad, out_h, out_w,
               cols.data());
        MapMat<T>(gw->data(), out_ch, patch).noalias() += gy * ConstMapMat<T>(cols.data(), patch, plane).transpose();
      }
      if (gx) {
        MapMat<T>(dcols.data(), patch, plane).noalias() = wm.transpose() * gy;
        col2im(dcols.data(), channels, height, width, k, stride, pad, out_h, out_w,
               gx->data() + b * channels * height * width);
      }
    }
  });
}

template <class T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank(x.shape(), 4, "avg_pool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: spatial size must be even, got " + to_string(x.shape()));
  Tensor<T> y({n, c, h / 2, w / 2});
  const auto& xv = x.value();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        const T* src = xv.data() + p * h * w;
        y[(p * (h / 2) + i) * (w / 2) + j] = T(0.25) * (src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1] +
                                                     src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1]);
      }
  return make_result<T>(std::move(y), {x}, [n, c, h, w](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < h / 2; ++i)
        for (std::size_t j = 0; j < w / 2; ++j) {
          const T v = T(0.25) * self.grad[(p * (h / 2) + i) * (w / 2) + j];
          T* dst = g->data() + p * h * w;
          dst[2 * i * w + 2 * j] += v;
          dst[2 * i * w + 2 * j + 1] += v;
          dst[(2 * i + 1) * w + 2 * j] += v;
          dst[(2 * i + 1) * w + 2 * j + 1] += v;
        }
  });
}

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({n, c, 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) y[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
  return make_result<T>(std::move(y), {x}, [n, c, h, w](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) (*g)[(p * h + i / 2) * w + j / 2] += self.grad[(p * 2 * h + i) * 2 * w + j];
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  if (b.dim(0) != n || b.dim(2) != a.dim(2) || b.dim(3) != a.dim(3)) {
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor<T> y({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * plane, ca * plane, y.data() + i * (ca + cb) * plane);
    std::copy_n(b.value().data() + i * cb * plane, cb * plane, y.data() + (i * (ca + cb) + ca) * plane);
  }
  return make_result<T>(std::move(y), {a, b}, [n, ca, cb, plane](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < ca * plane; ++k) g->data()[i * ca * plane + k] += self.grad[i * (ca + cb) * plane + k];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < cb * plane; ++k)
          g->data()[i * cb * plane + k] += self.grad[(i * (ca + cb) + ca) * plane + k];
    }
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = T(0);
    for (std::size_t k = 0; k < plane; ++k) acc += x.value()[p * plane + k];
    y[p] = acc / static_cast<T>(plane);
  }
  return make_result<T>(std::move(y), {x}, [n, c, plane](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t p = 0; p < n * c; ++p) {
      const T v = self.grad[p] / static_cast<T>(plane);
      for (std::size_t k = 0; k < plane; ++k) (*g)[p * plane + k] += v;
    }
  });
}

template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
  require_rank(x.shape(), 2, "batch_norm");
  const std::size_t batch = x.dim(0), features = x.dim(1);
  require_shape(gamma.shape(), {features}, "batch_norm gamma");
  require_shape(beta.shape(), {features}, "batch_norm beta");
  if (training && batch < 2) throw ShapeError("batch_norm: training mode needs at least two rows");
  const auto& xv = x.value();
  std::vector<T> inv_std(features);
  Tensor<T> xhat({batch, features});
  for (std::size_t f = 0; f < features; ++f) {
    T mu, var;
    if (training) {
      mu = T(0);
      for (std::size_t b = 0; b < batch; ++b) mu += xv.at(b, f);
      mu /= static_cast<T>(batch);
      var = T(0);
      for (std::size_t b = 0; b < batch; ++b) var += (xv.at(b, f) - mu) * (xv.at(b, f) - mu);
      var /= static_cast<T>(batch);
      running_mean[f] = (T(1) - momentum) * running_mean[f] + momentum * mu;
      running_var[f] = (T(1) - momentum) * running_var[f] + momentum * var * static_cast<T>(batch) / static_cast<T>(batch - 1);
    } else {
      mu = running_mean[f];
      var = running_var[f];
    }
    inv_std[f] = T(1) / std::sqrt(var + eps);
    for (std::size_t b = 0; b < batch; ++b) xhat.at(b, f) = (xv.at(b, f) - mu) * inv_std[f];
  }
  Tensor<T> y({batch, features});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < features; ++f) y.at(b, f) = gamma.value()[f] * xhat.at(b, f) + beta.value()[f];

  return make_result<T>(std::move(y), {x, gamma, beta},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, features, training](Node<T>& self) {
                          const auto& g = self.grad;
                          const auto& gam = self.inputs[1]->value;
                          if (auto* gg = input_grad(self, 1)) {
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t f = 0; f < features; ++f) (*gg)[f] += g.at(b, f) * xhat.at(b, f);
                          }
                          if (auto* gb = input_grad(self, 2)) {
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t f = 0; f < features; ++f) (*gb)[f] += g.at(b, f);
                          }
                          auto* gx = input_grad(self, 0);
                          if (!gx) return;
                          const T n = static_cast<T>(batch);
                          for (std::size_t f = 0; f < features; ++f) {
                            if (!training) {
                              for (std::size_t b = 0; b < batch; ++b) gx->at(b, f) += g.at(b, f) * gam[f] * inv_std[f];
                              continue;
                            }
                            T mean_d = T(0), mean_dx = T(0);
                            for (std::size_t b = 0; b < batch; ++b) {
                              const T d = g.at(b, f) * gam[f];
                              mean_d += d;
                              mean_dx += d * xhat.at(b, f);
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            for (std::size_t b = 0; b < batch; ++b) {
                              const T d = g.at(b, f) * gam[f];
                              gx->at(b, f) += inv_std[f] * (d - mean_d - xhat.at(b, f) * mean_dx);
                            }
                          }
                        });
}

template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps) {
  require_rank(x.shape(), 2, "l2_normalize_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> y({rows, cols});
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = T(0);
    for (std::size_t c = 0; c < cols; ++c) sq += x.value().at(r, c) * x.value().at(r, c);
    norms[r] = std::max(std::sqrt(sq), eps);
    for (std::size_t c = 0; c < cols; ++c) y.at(r, c) = x.value().at(r, c) / norms[r];
  }
  return make_result<T>(std::move(y), {x}, [norms = std::move(norms), rows, cols, eps](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] <= eps) {
        for (std::size_t c = 0; c < cols; ++c) g->at(r, c) += self.grad.at(r, c) / eps;
        continue;
      }
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) g->at(r, c) += (self.grad.at(r, c) - self.value.at(r, c) * dot) / norms[r];
    }
  });
}

template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  require_shape(targets.shape(), logits.shape(), "bce_with_logits targets");
  const auto& l = logits.value();
  T total = T(0);
  for (std::size_t i = 0; i < l.size(); ++i) total += softplus(l[i]) - targets[i] * l[i];
  const T count = static_cast<T>(l.size());
  return make_result<T>(Tensor<T>({1}, total / count), {logits}, [targets, count](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    const auto& l = self.inputs[0]->value;
    for (std::size_t i = 0; i < l.size(); ++i) (*g)[i] += self.grad[0] * (sigmoid_scalar(l[i]) - targets[i]) / count;
  });
}

template <class T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<T>& targets, T smooth, bool skip_empty) {
  require_shape(targets.shape(), logits.shape(), "soft_dice_loss targets");
  const auto& l = logits.value();
  if (l.rank() < 2) throw ShapeError("soft_dice_loss expects a leading batch axis");
  const std::size_t batch = l.dim(0), per = l.size() / batch;
  std::vector<T> inter(batch, T(0)), denom(batch, T(0));
  std::vector<char> used(batch, 1);
  std::size_t n_used = 0;
  T total = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    T target_sum = T(0);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const T p = sigmoid_scalar(l[i]);
      inter[b] += p * targets[i];
      denom[b] += p + targets[i];
      target_sum += targets[i];
    }
    if (skip_empty && target_sum == T(0)) {
      used[b] = 0;
      continue;
    }
    ++n_used;
    total += T(1) - (T(2) * inter[b] + smooth) / (denom[b] + smooth);
  }
  const T value = n_used ? total / static_cast<T>(n_used) : T(0);
  return make_result<T>(Tensor<T>({1}, value), {logits},
                        [targets, smooth, inter, denom, used, n_used, per](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g || n_used == 0) return;
    const auto& l = self.inputs[0]->value;
    const T scale = self.grad[0] / static_cast<T>(n_used);
    for (std::size_t b = 0; b < used.size(); ++b) {
      if (!used[b]) continue;
      const T s = denom[b] + smooth, n = T(2) * inter[b] + smooth;
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        const T p = sigmoid_scalar(l[i]);
        const T d_dice = (T(2) * targets[i] * s - n) / (s * s);
        (*g)[i] -= scale * d_dice * p * (T(1) - p);
      }
    }
  });
}

#define DIRA_INSTANTIATE_OPS(T)                                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                             \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                             \
  template Var<T> scale(const Var<T>&, T);                                                                       \
  template Var<T> sum(const Var<T>&);                                                                            \
  template Var<T> mean(const Var<T>&);                                                                           \
  template Var<T> reshape(const Var<T>&, Shape);                                                                 \
  template Var<T> relu(const Var<T>&);                                                                           \
  template Var<T> leaky_relu(const Var<T>&, T);                                                                  \
  template Var<T> sigmoid(const Var<T>&);                                                                        \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);                 \
  template Var<T> avg_pool2(const Var<T>&);                                                                      \
  template Var<T> upsample_nearest2(const Var<T>&);                                                              \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> global_avg_pool(const Var<T>&);                                                                \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, T, T);  \
  template Var<T> l2_normalize_rows(const Var<T>&, T);                                                           \
  template Var<T> bce_with_logits(const Var<T>&, const Tensor<T>&);                                              \
  template Var<T> soft_dice_loss(const Var<T>&, const Tensor<T>&, T, bool);

DIRA_INSTANTIATE_OPS(float)
DIRA_INSTANTIATE_OPS(double)

}  // namespace dira::nn
