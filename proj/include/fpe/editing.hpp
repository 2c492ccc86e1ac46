// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpe/attention.hpp"
#include "fpe/backend.hpp"

namespace fpe {

class LockstepError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct EditSource {
  enum class Type { seeded_prompt, real_image };
  Type type = Type::seeded_prompt;
  uint64_t seed = 0;
  std::string prompt;      // P_src; optional for real images
  std::string image_path;  // real images only
};

struct NullTextOptConfig {
  int iterations = 10;
  double step_size = 1e-2;
  double early_stop = 1e-5;
  // Final per-step loss above this is reported as divergence.
  double divergence_threshold = 1.0;
};

struct NullTextState {
  std::vector<Tensor> null_embeddings;         // per denoising step, first step first
  std::vector<std::vector<double>> trace;      // per step: loss at iteration 0..n
  std::vector<std::string> warnings;
};

/// Extra captures a caller may request alongside an edit (heatmaps, tests).
struct EditObservers {
  AttentionObserver* source = nullptr;
  AttentionObserver* target = nullptr;
};

struct EditOutcome {
  Image source_image;  // I_src (generated) or the fitted input image
  std::optional<Image> reconstruction;  // I_res for real images
  Image edited;        // I_dst
  LatentState source_latent;  // final latent of the source or reconstruction branch
  LatentState edited_latent;
  std::optional<NullTextState> null_text;
  double edit_seconds = 0.0;
  double denoise_seconds = 0.0;
  int injections = 0;
};

// Alg. 1: paired runs sharing z_T; the source step runs first at every step
// and its self maps feed the target step.
EditOutcome fpe_generated(const ModelAdapter& model, const std::string& p_src, const std::string& p_dst,
                          const SamplerConfig& sampler, const InjectionPolicy& policy, EditObservers obs = {});

struct RealEditOptions {
  // Condition inversion and the reconstruction branch on this prompt (with
  // guidance) instead of running them prompt-free.
  std::optional<std::string> source_prompt;
};

// Alg. 2: DDIM inversion, then a reconstruction branch that feeds the target.
EditOutcome fpe_real(const ModelAdapter& model, const Image& image, const std::string& p_dst,
                     const SamplerConfig& sampler, const InjectionPolicy& policy, const RealEditOptions& opts = {},
                     EditObservers obs = {});

// Null-text variant: per-step unconditional embeddings are optimized so the
// guided source trajectory tracks the inversion trajectory.
EditOutcome fpe_null_text(const ModelAdapter& model, const Image& image, const std::string& p_src,
                          const std::string& p_dst, const SamplerConfig& sampler, const InjectionPolicy& policy,
                          const NullTextOptConfig& opt, EditObservers obs = {});

// The optimization alone, given an inversion trajectory.
NullTextState optimize_null_text(const ModelAdapter& model, const LatentTrajectory& inversion,
                                 const ContextEmbedding& source, const SamplerConfig& sampler,
                                 const NullTextOptConfig& opt);

struct EditJob {
  EditSource source;
  std::string target_prompt;
  SamplerConfig sampler;
  InjectionPolicy policy = InjectionPolicy::fpe_default();
  std::string method = "fpe";  // fpe | null_text
  NullTextOptConfig null_text;
  bool source_prompt_for_reconstruction = false;
  bool heatmaps = false;  // export step-mean cross heatmaps and self SVD components

  void validate() const;
  nlohmann::json to_json() const;
  static EditJob from_json(const nlohmann::json& j);
};

// Runs a job and writes src.png, dst.png (res.png for real images), optional
// attention/ heatmaps and manifest.json into `out_dir`. Returns the manifest.
nlohmann::json run_edit_job(const ModelAdapter& model, const EditJob& job, const std::filesystem::path& out_dir);
EditOutcome run_edit(const ModelAdapter& model, const EditJob& job, EditObservers obs = {});

struct SweepCell {
  std::set<AttnKind> kinds;
  std::optional<std::set<int>> sites;
  double ratio = 0.0;
  std::optional<double> cross_ratio;
  std::string label;
};

struct SweepSpec {
  std::vector<SweepCell> cells;
  int columns = 0;  // 0 = one row per distinct kind/site setting

  // kinds x site_sets x ratios, row-major.
  static SweepSpec product(const std::vector<std::set<AttnKind>>& kinds,
                           const std::vector<std::optional<std::set<int>>>& site_sets,
                           const std::vector<double>& ratios);
  // The three replacement modes of the layer/step ablation: cross only,
  // cross fixed at 0.8 with varying self, and self only.
  static SweepSpec paper_modes(const std::vector<double>& ratios);
  nlohmann::json to_json() const;
  static SweepSpec from_json(const nlohmann::json& j);
};

struct SweepResult {
  nlohmann::json manifest;
  std::vector<std::optional<Image>> cells;
  Image grid;
};

// Runs every cell against one cached source run and writes
// cells/*.png, grid.png and manifest.json into `out_dir` when non-empty.
SweepResult ablation_sweep(const ModelAdapter& model, const EditJob& base, const SweepSpec& grid,
                           const std::filesystem::path& out_dir = {});

}  // namespace fpe
