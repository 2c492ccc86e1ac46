// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <memory>
#include <vector>

#include "fpe/nn.hpp"

namespace fpe {

/// diffusers AutoencoderKL configuration subset.
struct VaeConfig {
  int in_channels = 3;
  int out_channels = 3;
  std::vector<int> block_out_channels{128, 256, 512, 512};
  int layers_per_block = 2;
  int latent_channels = 4;
  int norm_num_groups = 32;
  float scaling_factor = 0.18215f;

  int downsample_factor() const { return 1 << (static_cast<int>(block_out_channels.size()) - 1); }

  static VaeConfig sd15() { return VaeConfig{}; }
  static VaeConfig tiny();
  static VaeConfig from_json(const nlohmann::json& j);
};

class AutoencoderKL {
 public:
  AutoencoderKL(const VaeConfig& config, nn::ParamSource& params);
  ~AutoencoderKL();
  AutoencoderKL(const AutoencoderKL&) = delete;
  AutoencoderKL& operator=(const AutoencoderKL&) = delete;

  const VaeConfig& config() const { return config_; }
  // image: [3, H, W] in [-1, 1] -> scaled posterior mean [latent, H/f, W/f].
  Tensor encode(const Tensor& image) const;
  // latent: scaled [latent, h, w] -> image [3, h*f, w*f], unclamped.
  Tensor decode(const Tensor& latent) const;

 private:
  struct Impl;
  VaeConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace fpe
