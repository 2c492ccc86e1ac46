// SPDX-License-Identifier: Apache-2.0
#include "fpe/scheduler.hpp"

#include <cmath>

namespace fpe {

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
  ScheduleConfig c;
  c.num_train_timesteps = j.value("num_train_timesteps", c.num_train_timesteps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.beta_schedule = j.value("beta_schedule", c.beta_schedule);
  c.steps_offset = j.value("steps_offset", c.steps_offset);
  c.set_alpha_to_one = j.value("set_alpha_to_one", c.set_alpha_to_one);
  const std::string spacing = j.value("timestep_spacing", std::string("leading"));
  if (spacing != "leading") throw Error("unsupported timestep_spacing '" + spacing + "' (only leading)");
  const std::string prediction = j.value("prediction_type", std::string("epsilon"));
  if (prediction != "epsilon") throw Error("unsupported prediction_type '" + prediction + "' (only epsilon)");
  return c;
}

std::string ScheduleConfig::id() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "ddim-%s-%g-%g-n%d-off%d%s", beta_schedule.c_str(), beta_start, beta_end,
                num_train_timesteps, steps_offset, set_alpha_to_one ? "-one" : "");
  return buf;
}

DdimScheduler::DdimScheduler(const ScheduleConfig& config, int step_count)
    : config_(config), step_count_(step_count) {
  const int n = config.num_train_timesteps;
  if (step_count < 1 || step_count > n) {
    throw ValidationError("step_count must be in [1, " + std::to_string(n) + "], got " + std::to_string(step_count));
  }
  step_ratio_ = n / step_count;
  // Float32 throughout, mirroring the reference implementation's tensors.
  std::vector<float> betas(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float frac = n == 1 ? 0.0f : static_cast<float>(i) / static_cast<float>(n - 1);
    if (config.beta_schedule == "scaled_linear") {
      const float lo = std::sqrt(static_cast<float>(config.beta_start));
      const float hi = std::sqrt(static_cast<float>(config.beta_end));
      const float b = lo + frac * (hi - lo);
      betas[static_cast<size_t>(i)] = b * b;
    } else if (config.beta_schedule == "linear") {
      betas[static_cast<size_t>(i)] = static_cast<float>(config.beta_start) +
                                      frac * static_cast<float>(config.beta_end - config.beta_start);
    } else {
      throw Error("unsupported beta_schedule '" + config.beta_schedule + "'");
    }
  }
  alphas_cumprod_.resize(static_cast<size_t>(n));
  float acc = 1.0f;
  for (int i = 0; i < n; ++i) {
    acc *= 1.0f - betas[static_cast<size_t>(i)];
    alphas_cumprod_[static_cast<size_t>(i)] = acc;
  }
  final_alpha_ = config.set_alpha_to_one ? 1.0f : alphas_cumprod_.front();
}

void DdimScheduler::check_index(int k) const {
  if (k < 0 || k > step_count_) {
    throw Error("step index " + std::to_string(k) + " outside [0, " + std::to_string(step_count_) + "]");
  }
}

int DdimScheduler::timestep(int k) const {
  check_index(k);
  if (k == 0) return -1;
  return std::min((k - 1) * step_ratio_ + config_.steps_offset, config_.num_train_timesteps - 1);
}

double DdimScheduler::alpha_bar(int k) const {
  check_index(k);
  if (k == 0) return final_alpha_;
  return alphas_cumprod_[static_cast<size_t>(timestep(k))];
}

Tensor DdimScheduler::step(const Tensor& eps, int k, const Tensor& z, float eta, const Tensor* noise) const {
  if (k < 1) throw Error("cannot denoise from step index 0");
  if (eps.shape() != z.shape()) throw ShapeError("noise prediction shape differs from latent shape");
  const double a_t = alpha_bar(k), a_prev = alpha_bar(k - 1);
  const double sqrt_a_t = std::sqrt(a_t), sqrt_1m_a_t = std::sqrt(1.0 - a_t);
  double sigma = 0.0;
  if (eta > 0.0f) {
    if (!noise || noise->shape() != z.shape()) throw Error("eta > 0 requires a noise tensor shaped like the latent");
    sigma = eta * std::sqrt((1.0 - a_prev) / (1.0 - a_t)) * std::sqrt(1.0 - a_t / a_prev);
  }
  const double dir = std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma));
  const double sqrt_a_prev = std::sqrt(a_prev);
  Tensor out(z.shape());
  for (int64_t i = 0; i < z.numel(); ++i) {
    const double x0 = (z[i] - sqrt_1m_a_t * eps[i]) / sqrt_a_t;
    double v = sqrt_a_prev * x0 + dir * eps[i];
    if (sigma > 0.0) v += sigma * (*noise)[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

Tensor DdimScheduler::invert_step(const Tensor& eps, int k, const Tensor& z_prev) const {
  if (k < 1) throw Error("cannot invert into step index 0");
  if (eps.shape() != z_prev.shape()) throw ShapeError("noise prediction shape differs from latent shape");
  const double a_prev = alpha_bar(k - 1), a_t = alpha_bar(k);
  const double sqrt_a_prev = std::sqrt(a_prev), sqrt_1m_a_prev = std::sqrt(1.0 - a_prev);
  const double sqrt_a_t = std::sqrt(a_t), sqrt_1m_a_t = std::sqrt(1.0 - a_t);
  Tensor out(z_prev.shape());
  for (int64_t i = 0; i < z_prev.numel(); ++i) {
    const double x0 = (z_prev[i] - sqrt_1m_a_prev * eps[i]) / sqrt_a_prev;
    out[i] = static_cast<float>(sqrt_a_t * x0 + sqrt_1m_a_t * eps[i]);
  }
  return out;
}

}  // namespace fpe
