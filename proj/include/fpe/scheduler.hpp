// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "fpe/tensor.hpp"

namespace fpe {

/// Noise-schedule parameters in the diffusers DDIMScheduler vocabulary.
struct ScheduleConfig {
  int num_train_timesteps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  std::string beta_schedule = "scaled_linear";
  int steps_offset = 1;
  bool set_alpha_to_one = false;

  static ScheduleConfig sd15() { return ScheduleConfig{}; }
  static ScheduleConfig from_json(const nlohmann::json& j);
  std::string id() const;
};

/// Deterministic DDIM over a T-step "leading" timestep grid.
///
/// Step indices k run 0..T. Index k >= 1 sits at training timestep
/// (k - 1) * (N / T) + offset; index 0 is the clean end of the chain and uses
/// the final alpha. Denoising moves k -> k - 1 with the noise prediction taken
/// at timestep(k); inversion moves k - 1 -> k with the same timestep.
class DdimScheduler {
 public:
  DdimScheduler(const ScheduleConfig& config, int step_count);

  int step_count() const { return step_count_; }
  int timestep(int k) const;
  double alpha_bar(int k) const;
  const std::vector<float>& train_alphas_cumprod() const { return alphas_cumprod_; }

  // z_{k-1} from z_k; eta > 0 adds fresh noise from `noise` (same shape).
  Tensor step(const Tensor& eps, int k, const Tensor& z, float eta = 0.0f, const Tensor* noise = nullptr) const;
  // z_k from z_{k-1}.
  Tensor invert_step(const Tensor& eps, int k, const Tensor& z_prev) const;

 private:
  void check_index(int k) const;

  ScheduleConfig config_;
  int step_count_;
  int step_ratio_;
  std::vector<float> alphas_cumprod_;
  float final_alpha_;
};

}  // namespace fpe
