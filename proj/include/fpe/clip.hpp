// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <memory>
#include <string>
#include <vector>

#include "fpe/nn.hpp"

namespace fpe {

struct ClipTextConfig {
  int vocab_size = 49408;
  int hidden_size = 768;
  int intermediate_size = 3072;
  int num_layers = 12;
  int num_heads = 12;
  int max_positions = 77;
  std::string hidden_act = "quick_gelu";
  float layer_norm_eps = 1e-5f;

  static ClipTextConfig from_json(const nlohmann::json& j);
};

struct ClipVisionConfig {
  int hidden_size = 1024;
  int intermediate_size = 4096;
  int num_layers = 24;
  int num_heads = 16;
  int image_size = 224;
  int patch_size = 14;
  std::string hidden_act = "quick_gelu";
  float layer_norm_eps = 1e-5f;

  static ClipVisionConfig from_json(const nlohmann::json& j);
};

/// Pre-norm transformer encoder shared by the CLIP text and vision towers.
class ClipEncoder {
 public:
  ClipEncoder(nn::ParamSource& p, const std::string& prefix, int hidden, int intermediate, int layers, int heads,
              std::string act, float eps);
  ~ClipEncoder();
  ClipEncoder(ClipEncoder&&) noexcept;
  ag::Var operator()(const ag::Var& x, bool causal) const;

 private:
  struct Layer;
  std::vector<Layer> layers_;
};

/// CLIP text transformer in the transformers `text_model.*` key layout.
class ClipTextModel {
 public:
  ClipTextModel(const ClipTextConfig& config, nn::ParamSource& params, const std::string& prefix = "text_model.");

  const ClipTextConfig& config() const { return config_; }
  // Final-layer-normed hidden states [ids.size(), hidden]; the context
  // embedding consumed by the denoiser.
  ag::Var forward(const std::vector<int>& ids) const;
  // Hidden state at the first end-of-text position.
  Tensor pooled(const std::vector<int>& ids, int eos_id) const;

 private:
  ClipTextConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  ClipEncoder encoder_;
  nn::LayerNorm final_norm_;
};

/// CLIP vision transformer in the transformers `vision_model.*` key layout.
class ClipVisionModel {
 public:
  ClipVisionModel(const ClipVisionConfig& config, nn::ParamSource& params,
                  const std::string& prefix = "vision_model.");

  const ClipVisionConfig& config() const { return config_; }
  // pixels: normalized [3, image_size, image_size] -> pooled [hidden].
  Tensor pooled(const Tensor& pixels) const;

 private:
  ClipVisionConfig config_;
  nn::Conv2d patch_embedding_;
  Tensor class_embedding_;
  Tensor position_embedding_;
  nn::LayerNorm pre_norm_;
  ClipEncoder encoder_;
  nn::LayerNorm post_norm_;
};

}  // namespace fpe
