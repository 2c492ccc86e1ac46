// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fpe/clip.hpp"
#include "fpe/image.hpp"
#include "fpe/scheduler.hpp"
#include "fpe/sites.hpp"
#include "fpe/tokenizer.hpp"
#include "fpe/unet.hpp"
#include "fpe/vae.hpp"

namespace fpe {

struct SamplerConfig {
  int step_count = 50;
  float guidance_scale = 7.5f;
  float eta = 0.0f;
  uint64_t seed = 0;
  std::string schedule_id;  // informational; filled from the backbone when empty

  // Throws ValidationError naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static SamplerConfig from_json(const nlohmann::json& j);
};

struct LatentState {
  Tensor z;         // [channels, h, w]
  int t_index = 0;  // 0 = clean, step_count = pure noise
};

struct LatentTrajectory {
  std::vector<LatentState> states;  // states[k].t_index == k
};

/// Text conditioning for the denoiser.
struct ContextEmbedding {
  std::string text;
  TokenizedPrompt tokens;
  Tensor hidden;  // [context_len, cross_attention_dim]
};

struct StepOptions {
  // Replaces the unconditional embedding of a guided pass (null-text path).
  const Tensor* null_override = nullptr;
  // Run one pass with the given prompt and no guidance.
  bool conditional_only = false;
  // When set, wall-clock seconds spent in the denoiser are added here.
  double* elapsed_seconds = nullptr;
};

struct BackboneFiles {
  std::filesystem::path root;
  std::filesystem::path unet_config, unet_weights;
  std::filesystem::path text_config, text_weights;
  std::filesystem::path vocab, merges;
  std::filesystem::path vae_config, vae_weights;
  std::filesystem::path scheduler_config;

  static BackboneFiles diffusers_layout(const std::filesystem::path& root);
  // Paths that must exist but do not.
  std::vector<std::filesystem::path> missing() const;
};

/// Frozen backbone: denoiser, text encoder, tokenizer, autoencoder and
/// schedule. Read-only after construction, so one adapter can serve
/// concurrent jobs that each own their observers and latents.
class ModelAdapter {
 public:
  ModelAdapter(std::string backbone_id, std::string text_encoder_id, std::unique_ptr<UNet2DCondition> unet,
               std::unique_ptr<ClipTextModel> text, std::unique_ptr<Tokenizer> tokenizer,
               std::unique_ptr<AutoencoderKL> vae, ScheduleConfig schedule, Shape latent_shape);
  ~ModelAdapter();

  const std::string& backbone_id() const { return backbone_id_; }
  const std::string& text_encoder_id() const { return text_encoder_id_; }
  // Site table at the default latent size and full context window.
  const std::vector<AttentionSite>& sites() const { return sites_; }
  const Shape& latent_shape() const { return latent_shape_; }
  int image_size() const;
  int downsample_factor() const { return vae_->config().downsample_factor(); }

  const UNet2DCondition& unet() const { return *unet_; }
  const ClipTextModel& text_encoder() const { return *text_; }
  const Tokenizer& tokenizer() const { return *tokenizer_; }
  const AutoencoderKL& vae() const { return *vae_; }
  const ScheduleConfig& schedule() const { return schedule_; }
  DdimScheduler scheduler(const SamplerConfig& cfg) const { return DdimScheduler(schedule_, cfg.step_count); }

  ContextEmbedding encode_prompt(const std::string& text) const;
  const ContextEmbedding& null_embedding() const { return null_; }

  // Seeded standard-normal latent at t_index = step_count.
  LatentState initial_latent(const SamplerConfig& cfg) const;

  // Noise prediction at state.t_index. `prompt` null means one unguided
  // pass on the empty-prompt embedding.
  Tensor predict_noise(const LatentState& state, const ContextEmbedding* prompt, const SamplerConfig& cfg,
                       AttentionObserver* instruments, const StepOptions& opts = {}) const;
  LatentState denoise_step(const LatentState& state, const ContextEmbedding* prompt, const SamplerConfig& cfg,
                           AttentionObserver* instruments, const StepOptions& opts = {}) const;
  // Full denoise from `start` to t_index 0.
  LatentState denoise(LatentState start, const ContextEmbedding* prompt, const SamplerConfig& cfg,
                      AttentionObserver* instruments, const StepOptions& opts = {}) const;
  // Unguided inversion from t_index 0 to step_count. `conditioning` null uses
  // the empty prompt.
  LatentTrajectory ddim_invert(const LatentState& image_latent, const SamplerConfig& cfg,
                               const ContextEmbedding* conditioning, AttentionObserver* instruments = nullptr) const;

  LatentState encode_image(const Image& image) const;
  LatentState encode_image(const std::filesystem::path& path) const;
  Image decode_latent(const LatentState& state) const;
  // Shorter-side resize and center crop to the native resolution.
  Image fit_image(const Image& image) const;

 private:
  Tensor unet_eps(const Tensor& z, int t_index, const DdimScheduler& sched, const Tensor& context, Branch branch,
                  int step, AttentionObserver* instruments) const;

  std::string backbone_id_;
  std::string text_encoder_id_;
  std::unique_ptr<UNet2DCondition> unet_;
  std::unique_ptr<ClipTextModel> text_;
  std::unique_ptr<Tokenizer> tokenizer_;
  std::unique_ptr<AutoencoderKL> vae_;
  ScheduleConfig schedule_;
  Shape latent_shape_;
  std::vector<AttentionSite> sites_;
  ContextEmbedding null_;
};

// "tiny-test", "sd15" (directory from FPE_SD15_DIR, default
// ~/.cache/fpe/sd15) or a path to a diffusers checkpoint directory.
std::shared_ptr<ModelAdapter> load_backbone(const std::string& backbone_id, const std::string& device_hint = "cpu");
std::shared_ptr<ModelAdapter> make_tiny_backbone(uint64_t seed = 1234);
std::filesystem::path sd15_root();

}  // namespace fpe
