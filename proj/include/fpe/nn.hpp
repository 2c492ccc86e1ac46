// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fpe/autograd.hpp"
#include "fpe/tensor.hpp"

namespace fpe::nn {

using ag::Var;

enum class Init { fan_in, zeros, ones, embedding };

// Supplies named parameters to module constructors. The same constructor code
// builds a model from a checkpoint or from a seeded random initialization.
class ParamSource {
 public:
  virtual ~ParamSource() = default;
  virtual Tensor take(const std::string& name, const Shape& shape, Init init) = 0;
  virtual bool has(const std::string& name) const = 0;

  // First of `names` that exists; used for checkpoints with legacy key names.
  std::string resolve(const std::vector<std::string>& names) const;
};

class RandomParams final : public ParamSource {
 public:
  explicit RandomParams(uint64_t seed, float gain = 1.0f) : seed_(seed), gain_(gain) {}
  Tensor take(const std::string& name, const Shape& shape, Init init) override;
  bool has(const std::string&) const override { return true; }
  // Parameters whose name contains `fragment` use `gain` instead; later
  // overrides win.
  void set_gain(std::string fragment, float gain) { overrides_.emplace_back(std::move(fragment), gain); }

 private:
  uint64_t seed_;
  float gain_;
  std::vector<std::pair<std::string, float>> overrides_;
};

class LoadedParams final : public ParamSource {
 public:
  LoadedParams(std::map<std::string, Tensor> tensors, std::string origin, std::string prefix = {})
      : tensors_(std::move(tensors)), origin_(std::move(origin)), prefix_(std::move(prefix)) {}
  Tensor take(const std::string& name, const Shape& shape, Init init) override;
  bool has(const std::string& name) const override { return tensors_.count(prefix_ + name) > 0; }
  size_t size() const { return tensors_.size(); }

 private:
  std::map<std::string, Tensor> tensors_;
  std::string origin_;
  std::string prefix_;
};

struct Linear {
  Tensor weight;
  std::optional<Tensor> bias;

  Linear() = default;
  Linear(ParamSource& src, const std::string& prefix, int64_t in, int64_t out, bool with_bias = true);
  Var operator()(const Var& x) const { return ag::linear(x, weight, bias ? &*bias : nullptr); }
};

struct Conv2d {
  Tensor weight;
  std::optional<Tensor> bias;
  ag::ConvSpec spec;

  Conv2d() = default;
  Conv2d(ParamSource& src, const std::string& prefix, int64_t in, int64_t out, int kernel, ag::ConvSpec spec,
         bool with_bias = true);
  Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias ? &*bias : nullptr, spec); }
};

struct GroupNorm {
  int groups = 32;
  float eps = 1e-5f;
  Tensor gamma;
  Tensor beta;

  GroupNorm() = default;
  GroupNorm(ParamSource& src, const std::string& prefix, int groups, int64_t channels, float eps);
  Var operator()(const Var& x) const { return ag::group_norm(x, groups, gamma, beta, eps); }
};

struct LayerNorm {
  float eps = 1e-5f;
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(ParamSource& src, const std::string& prefix, int64_t dim, float eps);
  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta, eps); }
};

// Sinusoidal timestep features, diffusers `Timesteps` layout.
Tensor timestep_features(float timestep, int dim, bool flip_sin_to_cos, float freq_shift);

}  // namespace fpe::nn
