#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dira/nn/ops.hpp"
#include "dira/rng.hpp"

namespace dira::net {

using nn::Shape;
using nn::Tensor;
using nn::Var;

enum class Mode { train, eval };

// A named array owned by a network. Buffers (batch-norm running statistics)
// are not trainable and never receive gradients.
template <class T>
struct NamedVar {
  std::string name;
  Var<T> var;
  bool trainable = true;
};

template <class T>
using ParamList = std::vector<NamedVar<T>>;

template <class T>
void zero_grads(const ParamList<T>& params) {
  for (auto p : params) p.var.zero_grad();
}

// Fresh parameters with the same values, detached from the originals.
template <class T>
ParamList<T> clone_params(const ParamList<T>& params, bool requires_grad);

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng);
  Var<T> operator()(const Var<T>& x) const { return nn::conv2d(x, weight, bias, stride_, pad_); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
  // Rebinds every array to a private copy, breaking aliasing with the original.
  void make_independent(bool requires_grad);

  Var<T> weight, bias;

 private:
  std::size_t stride_ = 1, pad_ = 0;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Var<T> operator()(const Var<T>& x) const { return nn::linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
  void make_independent(bool requires_grad);

  Var<T> weight, bias;
};

template <class T>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t features);
  Var<T> operator()(const Var<T>& x, Mode mode) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
  void make_independent(bool requires_grad);

  Var<T> gamma, beta, running_mean, running_var;
};

// Encoder stack: each stage is conv3x3 + ReLU (emitted as a skip map) followed
// by 2x2 average pooling; a conv3x3 bottleneck with d_y channels produces the
// final map, whose global average is the feature vector y.
struct EncoderSpec {
  std::size_t input_size = 64;
  std::size_t in_channels = 1;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t d_y = 128;

  std::size_t final_size() const { return input_size >> stage_channels.size(); }
  void validate() const;
};

template <class T>
struct EncoderOutput {
  Var<T> final_map;          // [B, d_y, s, s]
  std::vector<Var<T>> skips; // one per stage, full stage resolution
  Var<T> y;                  // [B, d_y]
};

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderSpec& spec, Rng& rng);
  EncoderOutput<T> operator()(const Var<T>& x) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
  void make_independent(bool requires_grad);
  const EncoderSpec& spec() const { return spec_; }

 private:
  EncoderSpec spec_;
  std::vector<Conv2d<T>> stages_;
  Conv2d<T> bottleneck_;
};

// U-Net style decoder mirroring an encoder: upsample, concatenate the matching
// skip map, conv3x3 + ReLU; a 1x1 conv gives per-pixel logits.
template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const EncoderSpec& spec, std::size_t out_channels, Rng& rng);
  Var<T> logits(const Var<T>& final_map, const std::vector<Var<T>>& skips) const;
  Var<T> operator()(const Var<T>& final_map, const std::vector<Var<T>>& skips) const {
    return nn::sigmoid(logits(final_map, skips));
  }
  void collect(const std::string& prefix, ParamList<T>& out) const;
  void make_independent(bool requires_grad);

 private:
  EncoderSpec spec_;
  std::vector<Conv2d<T>> ups_;
  Conv2d<T> out_;
};

enum class HeadKind { projector, predictor, classifier };

struct HeadSpec {
  HeadKind kind = HeadKind::projector;
  std::size_t in_dim = 128;
  std::vector<std::size_t> widths{128, 32};  // output width of each linear layer
  bool batch_norm = false;                   // BN after every hidden linear layer
  bool bn_last = false;                      // BN (no ReLU) after the last layer
};

template <class T>
class Head {
 public:
  Head() = default;
  Head(const HeadSpec& spec, Rng& rng);
  Var<T> operator()(const Var<T>& x, Mode mode) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
  void make_independent(bool requires_grad);
  std::size_t out_dim() const { return spec_.widths.back(); }

 private:
  HeadSpec spec_;
  std::vector<Linear<T>> layers_;
  std::vector<BatchNorm1d<T>> norms_;
};

struct AdversarySpec {
  std::size_t in_channels = 1;
  std::size_t base_channels = 16;
  bool zero_init_last = false;
};

// Four 3x3 stride-2 convolutions with leaky ReLU between them; the last one has
// one output channel whose spatial mean is the real/fake logit.
template <class T>
class Adversary {
 public:
  Adversary() = default;
  Adversary(const AdversarySpec& spec, Rng& rng);
  Var<T> operator()(const Var<T>& x) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
  void make_independent(bool requires_grad);
  static constexpr std::size_t kLayers = 4;

 private:
  std::vector<Conv2d<T>> layers_;
};

template <class T>
Var<T> discriminate_real(const Adversary<T>& adversary, const Var<T>& images) {
  return adversary(images);
}

enum class CouplingMode { momentum, shared, none };

struct TwinCoupling {
  CouplingMode mode = CouplingMode::shared;
  double momentum = 0.99;
};

// momentum: twin <- m * twin + (1 - m) * online, elementwise. shared/none: no-op.
template <class T>
void twin_update(const TwinCoupling& coupling, const ParamList<T>& online, const ParamList<T>& twin);

}  // namespace dira::net
