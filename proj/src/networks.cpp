#include "dira/networks.hpp"

#include <cmath>

namespace dira::net {
namespace {

template <class T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.values()) v = static_cast<T>(g(rng));
  return t;
}

template <class T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace

template <class T>
ParamList<T> clone_params(const ParamList<T>& params, bool requires_grad) {
  ParamList<T> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, Var<T>(p.var.value(), requires_grad && p.trainable), p.trainable});
  return out;
}

template <class T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng)
    : weight(parameter(he_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, rng))),
      bias(parameter(Tensor<T>({out}))),
      stride_(stride),
      pad_(pad) {}

template <class T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

template <class T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(parameter(uniform_init<T>({out, in}, in, rng))), bias(parameter(Tensor<T>({out}))) {}

template <class T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

template <class T>
BatchNorm1d<T>::BatchNorm1d(std::size_t features)
    : gamma(parameter(Tensor<T>({features}, T(1)))),
      beta(parameter(Tensor<T>({features}))),
      running_mean(Tensor<T>({features})),
      running_var(Tensor<T>({features}, T(1))) {}

template <class T>
Var<T> BatchNorm1d<T>::operator()(const Var<T>& x, Mode mode) const {
  // Running statistics are buffers shared by every handle to this layer.
  auto& rm = const_cast<Var<T>&>(running_mean).mutable_value();
  auto& rv = const_cast<Var<T>&>(running_var).mutable_value();
  return nn::batch_norm(x, gamma, beta, rm, rv, mode == Mode::train);
}

template <class T>
void BatchNorm1d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

void EncoderSpec::validate() const {
  if (stage_channels.empty()) throw ParameterError("encoder needs at least one stage");
  if (input_size % (std::size_t{1} << stage_channels.size()) != 0) {
    throw ParameterError("input size " + std::to_string(input_size) + " is not divisible by 2^stages");
  }
  if (final_size() < 2) throw ParameterError("final encoder map must be at least 2x2");
  if (d_y < 8) throw ParameterError("d_y must be >= 8");
}

template <class T>
Encoder<T>::Encoder(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  std::size_t in = spec.in_channels;
  for (std::size_t c : spec.stage_channels) {
    stages_.emplace_back(in, c, 3, 1, 1, rng);
    in = c;
  }
  bottleneck_ = Conv2d<T>(in, spec.d_y, 3, 1, 1, rng);
}

template <class T>
EncoderOutput<T> Encoder<T>::operator()(const Var<T>& x) const {
  const Shape want{x.shape().empty() ? 0 : x.dim(0), spec_.in_channels, spec_.input_size, spec_.input_size};
  nn::require_shape(x.shape(), want, "encoder input");
  EncoderOutput<T> out;
  Var<T> h = x;
  for (const auto& stage : stages_) {
    Var<T> a = nn::relu(stage(h));
    out.skips.push_back(a);
    h = nn::avg_pool2(a);
  }
  out.final_map = nn::relu(bottleneck_(h));
  out.y = nn::global_avg_pool(out.final_map);
  return out;
}

template <class T>
void Encoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(prefix + ".stage" + std::to_string(i), out);
  bottleneck_.collect(prefix + ".bottleneck", out);
}

template <class T>
Decoder<T>::Decoder(const EncoderSpec& spec, std::size_t out_channels, Rng& rng) : spec_(spec) {
  spec_.validate();
  std::size_t prev = spec.d_y;
  for (std::size_t i = spec.stage_channels.size(); i-- > 0;) {
    ups_.emplace_back(prev + spec.stage_channels[i], spec.stage_channels[i], 3, 1, 1, rng);
    prev = spec.stage_channels[i];
  }
  out_ = Conv2d<T>(prev, out_channels, 1, 1, 0, rng);
}

template <class T>
Var<T> Decoder<T>::logits(const Var<T>& final_map, const std::vector<Var<T>>& skips) const {
  const std::size_t stages = spec_.stage_channels.size();
  if (skips.size() != stages) {
    throw ShapeError("decoder expects " + std::to_string(stages) + " skip maps, got " + std::to_string(skips.size()));
  }
  const std::size_t batch = final_map.shape().empty() ? 0 : final_map.dim(0);
  nn::require_shape(final_map.shape(), {batch, spec_.d_y, spec_.final_size(), spec_.final_size()}, "decoder input");
  Var<T> h = final_map;
  for (std::size_t k = 0; k < stages; ++k) {
    const std::size_t i = stages - 1 - k;
    const std::size_t res = spec_.input_size >> i;
    nn::require_shape(skips[i].shape(), {batch, spec_.stage_channels[i], res, res}, "decoder skip " + std::to_string(i));
    h = nn::relu(ups_[k](nn::concat_channels(nn::upsample_nearest2(h), skips[i])));
  }
  return out_(h);
}

template <class T>
void Decoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t k = 0; k < ups_.size(); ++k) ups_[k].collect(prefix + ".up" + std::to_string(k), out);
  out_.collect(prefix + ".out", out);
}

template <class T>
Head<T>::Head(const HeadSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.widths.empty()) throw ParameterError("head needs at least one layer");
  if (spec.kind == HeadKind::projector && spec.widths.back() < 2) throw ParameterError("projector output must be >= 2");
  std::size_t in = spec.in_dim;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    layers_.emplace_back(in, spec.widths[i], rng);
    const bool last = i + 1 == spec.widths.size();
    if ((!last && spec.batch_norm) || (last && spec.bn_last)) norms_.emplace_back(spec.widths[i]);
    in = spec.widths[i];
  }
}

template <class T>
Var<T> Head<T>::operator()(const Var<T>& x, Mode mode) const {
  Var<T> h = x;
  std::size_t norm = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    const bool last = i + 1 == layers_.size();
    if ((!last && spec_.batch_norm) || (last && spec_.bn_last)) h = norms_[norm++](h, mode);
    if (!last) h = nn::relu(h);
  }
  return h;
}

template <class T>
void Head<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".fc" + std::to_string(i), out);
  for (std::size_t i = 0; i < norms_.size(); ++i) norms_[i].collect(prefix + ".bn" + std::to_string(i), out);
}

template <class T>
Adversary<T>::Adversary(const AdversarySpec& spec, Rng& rng) {
  const std::size_t c = spec.base_channels;
  const std::size_t widths[kLayers] = {c, 2 * c, 4 * c, 1};
  std::size_t in = spec.in_channels;
  for (std::size_t i = 0; i < kLayers; ++i) {
    layers_.emplace_back(in, widths[i], 3, 2, 1, rng);
    in = widths[i];
  }
  if (spec.zero_init_last) layers_.back().weight.mutable_value().fill(T(0));
}

template <class T>
Var<T> Adversary<T>::operator()(const Var<T>& x) const {
  if (x.shape().size() != 4) throw ShapeError("adversary expects an NCHW batch, got " + nn::to_string(x.shape()));
  if (x.dim(2) < 16 || x.dim(3) < 16) throw ShapeError("adversary input must be at least 16x16");
  Var<T> h = x;
  for (std::size_t i = 0; i < kLayers; ++i) {
    h = layers_[i](h);
    if (i + 1 < kLayers) h = nn::leaky_relu(h, T(0.2));
  }
  return nn::reshape(nn::global_avg_pool(h), {x.dim(0)});
}

template <class T>
void Adversary<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".conv" + std::to_string(i), out);
}

template <class T>
void Conv2d<T>::make_independent(bool requires_grad) {
  weight = Var<T>(weight.value(), requires_grad);
  bias = Var<T>(bias.value(), requires_grad);
}

template <class T>
void Linear<T>::make_independent(bool requires_grad) {
  weight = Var<T>(weight.value(), requires_grad);
  bias = Var<T>(bias.value(), requires_grad);
}

template <class T>
void BatchNorm1d<T>::make_independent(bool requires_grad) {
  gamma = Var<T>(gamma.value(), requires_grad);
  beta = Var<T>(beta.value(), requires_grad);
  running_mean = Var<T>(running_mean.value(), false);
  running_var = Var<T>(running_var.value(), false);
}

template <class T>
void Encoder<T>::make_independent(bool requires_grad) {
  for (auto& s : stages_) s.make_independent(requires_grad);
  bottleneck_.make_independent(requires_grad);
}

template <class T>
void Decoder<T>::make_independent(bool requires_grad) {
  for (auto& u : ups_) u.make_independent(requires_grad);
  out_.make_independent(requires_grad);
}

template <class T>
void Head<T>::make_independent(bool requires_grad) {
  for (auto& l : layers_) l.make_independent(requires_grad);
  for (auto& n : norms_) n.make_independent(requires_grad);
}

template <class T>
void Adversary<T>::make_independent(bool requires_grad) {
  for (auto& l : layers_) l.make_independent(requires_grad);
}

template <class T>
void twin_update(const TwinCoupling& coupling, const ParamList<T>& online, const ParamList<T>& twin) {
  if (online.size() != twin.size()) throw ShapeError("twin_update: parameter lists differ in length");
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (online[i].var.shape() != twin[i].var.shape()) {
      throw ShapeError("twin_update: shape mismatch for " + online[i].name + ": " + nn::to_string(online[i].var.shape()) +
                       " vs " + nn::to_string(twin[i].var.shape()));
    }
  }
  if (coupling.mode != CouplingMode::momentum) return;
  const T m = static_cast<T>(coupling.momentum);
  for (std::size_t i = 0; i < online.size(); ++i) {
    auto dst = twin[i].var;
    const auto& src = online[i].var.value();
    auto& xi = dst.mutable_value();
    for (std::size_t k = 0; k < xi.size(); ++k) xi[k] = m * xi[k] + (T(1) - m) * src[k];
  }
}

#define DIRA_INSTANTIATE_NETWORKS(T)                                                                     \
  template ParamList<T> clone_params(const ParamList<T>&, bool);                                         \
  template class Conv2d<T>;                                                                              \
  template class Linear<T>;                                                                              \
  template class BatchNorm1d<T>;                                                                         \
  template class Encoder<T>;                                                                             \
  template class Decoder<T>;                                                                             \
  template class Head<T>;                                                                                \
  template class Adversary<T>;                                                                           \
  template void twin_update(const TwinCoupling&, const ParamList<T>&, const ParamList<T>&);

DIRA_INSTANTIATE_NETWORKS(float)
DIRA_INSTANTIATE_NETWORKS(double)

}  // namespace dira::net
