// SPDX-License-Identifier: Apache-2.0
#include "fpe/nn.hpp"

#include <cmath>

namespace fpe::nn {

std::string ParamSource::resolve(const std::vector<std::string>& names) const {
  for (const auto& n : names) {
    if (has(n)) return n;
  }
  return names.empty() ? std::string{} : names.front();
}

Tensor RandomParams::take(const std::string& name, const Shape& shape, Init init) {
  switch (init) {
    case Init::zeros:
      return Tensor(shape, 0.0f);
    case Init::ones:
      return Tensor(shape, 1.0f);
    case Init::embedding:
    case Init::fan_in:
      break;
  }
  Rng rng(seed_ ^ fnv1a64(name));
  Tensor t = rng.randn(shape);
  if (init == Init::fan_in) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    float gain = gain_;
    for (const auto& [fragment, g] : overrides_) {
      if (name.find(fragment) != std::string::npos) gain = g;
    }
    t *= gain / std::sqrt(static_cast<float>(std::max<int64_t>(fan_in, 1)));
  }
  return t;
}

Tensor LoadedParams::take(const std::string& name, const Shape& shape, Init) {
  auto it = tensors_.find(prefix_ + name);
  if (it == tensors_.end()) throw Error("missing tensor '" + prefix_ + name + "' in " + origin_);
  if (it->second.shape() != shape && it->second.numel() != shape_numel(shape)) {
    throw ShapeError("tensor '" + prefix_ + name + "' in " + origin_ + " has shape " +
                     shape_str(it->second.shape()) + ", expected " + shape_str(shape));
  }
  // Each parameter is consumed once; moving it out keeps peak memory at one
  // copy of the checkpoint. Same-size reshapes cover linear layers stored as
  // 1x1 convolutions.
  Tensor t = std::move(it->second).reshaped(shape);
  tensors_.erase(it);
  return t;
}

Linear::Linear(ParamSource& src, const std::string& prefix, int64_t in, int64_t out, bool with_bias)
    : weight(src.take(prefix + ".weight", {out, in}, Init::fan_in)) {
  if (with_bias) bias = src.take(prefix + ".bias", {out}, Init::zeros);
}

Conv2d::Conv2d(ParamSource& src, const std::string& prefix, int64_t in, int64_t out, int kernel, ag::ConvSpec s,
               bool with_bias)
    : weight(src.take(prefix + ".weight", {out, in, kernel, kernel}, Init::fan_in)), spec(s) {
  if (with_bias) bias = src.take(prefix + ".bias", {out}, Init::zeros);
}

GroupNorm::GroupNorm(ParamSource& src, const std::string& prefix, int g, int64_t channels, float e)
    : groups(g),
      eps(e),
      gamma(src.take(prefix + ".weight", {channels}, Init::ones)),
      beta(src.take(prefix + ".bias", {channels}, Init::zeros)) {}

LayerNorm::LayerNorm(ParamSource& src, const std::string& prefix, int64_t dim, float e)
    : eps(e),
      gamma(src.take(prefix + ".weight", {dim}, Init::ones)),
      beta(src.take(prefix + ".bias", {dim}, Init::zeros)) {}

Tensor timestep_features(float timestep, int dim, bool flip_sin_to_cos, float freq_shift) {
  const int half = dim / 2;
  Tensor out({1, dim});
  for (int i = 0; i < half; ++i) {
    const float exponent = -std::log(10000.0f) * static_cast<float>(i) / (static_cast<float>(half) - freq_shift);
    const float arg = timestep * std::exp(exponent);
    const float s = std::sin(arg), c = std::cos(arg);
    out[i] = flip_sin_to_cos ? c : s;
    out[half + i] = flip_sin_to_cos ? s : c;
  }
  return out;
}

}  // namespace fpe::nn
