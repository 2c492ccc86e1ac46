// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fpe/nn.hpp"
#include "fpe/sites.hpp"

namespace fpe {

/// Subset of the diffusers UNet2DConditionModel configuration that the SD-1.x
/// family and the built-in fixture use.
struct UNetConfig {
  int in_channels = 4;
  int out_channels = 4;
  std::vector<int> block_out_channels{320, 640, 1280, 1280};
  int layers_per_block = 2;
  std::vector<std::string> down_block_types{"CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "CrossAttnDownBlock2D",
                                            "DownBlock2D"};
  std::vector<std::string> up_block_types{"UpBlock2D", "CrossAttnUpBlock2D", "CrossAttnUpBlock2D",
                                          "CrossAttnUpBlock2D"};
  std::vector<int> num_attention_heads{8, 8, 8, 8};
  int cross_attention_dim = 768;
  int norm_num_groups = 32;
  float norm_eps = 1e-5f;
  bool use_linear_projection = false;
  bool flip_sin_to_cos = true;
  float freq_shift = 0.0f;
  int sample_size = 64;

  static UNetConfig sd15();
  static UNetConfig tiny();
  static UNetConfig from_json(const nlohmann::json& j);
};

// Site table implied by a configuration alone, self sites first then cross.
std::vector<AttentionSite> site_table(const UNetConfig& config, int64_t latent_h, int64_t latent_w,
                                      int64_t context_len);

class UNet2DCondition {
 public:
  UNet2DCondition(const UNetConfig& config, nn::ParamSource& params);
  ~UNet2DCondition();
  UNet2DCondition(const UNet2DCondition&) = delete;
  UNet2DCondition& operator=(const UNet2DCondition&) = delete;

  const UNetConfig& config() const { return config_; }

  // Noise prediction for one latent [C, H, W] and context [tokens, dim].
  ag::Var forward(const ag::Var& sample, float timestep, const ag::Var& context,
                  AttentionObserver* observer = nullptr) const;

  // Site table for a latent of the given size, self sites first then cross.
  std::vector<AttentionSite> sites(int64_t latent_h, int64_t latent_w, int64_t context_len) const;
  int transformer_count() const { return transformer_count_; }

 private:
  struct Impl;
  UNetConfig config_;
  std::unique_ptr<Impl> impl_;
  int transformer_count_ = 0;
};

}  // namespace fpe
