// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS / FAIL / NOT RUN line per primary criterion.
// Exit status is non-zero when any runnable criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fpe/attention.hpp"
#include "fpe/editing.hpp"
#include "fpe/eval.hpp"
#include "fpe/probing.hpp"
#include "support.hpp"
#include "synthetic_assets.hpp"

using namespace fpe;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, a);
  return buf;
}

SamplerConfig sampler(int steps, uint64_t seed) {
  SamplerConfig cfg;
  cfg.step_count = steps;
  cfg.seed = seed;
  return cfg;
}

// Triple-loop softmax(Q K^T / sqrt(d)) in double.
std::vector<double> naive_attention(const Tensor& q, const Tensor& k, int d) {
  const int64_t n = q.shape()[0], m = k.shape()[0];
  std::vector<double> out(static_cast<size_t>(n * m));
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> logits(static_cast<size_t>(m));
    double peak = -1e300;
    for (int64_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += static_cast<double>(q[i * d + c]) * k[j * d + c];
      logits[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(d));
      peak = std::max(peak, logits[static_cast<size_t>(j)]);
    }
    double total = 0.0;
    for (double& l : logits) total += (l = std::exp(l - peak));
    for (int64_t j = 0; j < m; ++j) out[static_cast<size_t>(i * m + j)] = logits[static_cast<size_t>(j)] / total;
  }
  return out;
}

Outcome attention_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng.uniform() * 64);
    const int64_t m = 1 + static_cast<int64_t>(rng.uniform() * 96);
    const int d = 1 + static_cast<int>(rng.uniform() * 80);
    Tensor q = rng.randn({n, d}), k = rng.randn({m, d});
    for (int64_t i = 0; i < q.numel(); ++i) q[i] *= 2.0f;
    const Tensor p = compute_attention(q, k, d);
    const auto ref = naive_attention(q, k, d);
    for (int64_t i = 0; i < p.numel(); ++i) worst = std::max(worst, std::abs(double(p[i]) - ref[static_cast<size_t>(i)]));
  }
  // Every map captured during a guided fixture run.
  const ModelAdapter& m = test::tiny();
  const SamplerConfig cfg = sampler(10, 7);
  const ContextEmbedding prompt = m.encode_prompt("a photo of a cat");
  CaptureStore store;
  InstrumentSet inst(cfg.step_count, &store);
  inst.set_check_rows(true);
  m.denoise(m.initial_latent(cfg), &prompt, cfg, &inst);
  const double rows = inst.max_row_deviation();
  return {worst <= 1e-5 && rows <= 1e-4,
          "max_abs_err=" + fmt("%.3g", worst) + " (tol 1e-5, 200 shapes) max_row_dev=" + fmt("%.3g", rows) +
              " (tol 1e-4, " + std::to_string(store.size()) + " maps)"};
}

Outcome transparency_identity() {
  const ModelAdapter& m = test::tiny();
  const SamplerConfig cfg = sampler(10, 11);
  const ContextEmbedding src = m.encode_prompt("a photo of a sheep");
  const ContextEmbedding dst = m.encode_prompt("a photo of a leopard");

  const LatentState plain = m.denoise(m.initial_latent(cfg), &src, cfg, nullptr);
  CaptureStore store;
  InstrumentSet inst(cfg.step_count, &store);
  const bool capture_ok = m.denoise(m.initial_latent(cfg), &src, cfg, &inst).z.bit_equal(plain.z);

  InjectionPolicy all;
  all.kinds = {AttnKind::self};
  all.replace_ratio = 1.0;
  const EditOutcome same = fpe_generated(m, "a photo of a sheep", "a photo of a sheep", cfg, all);
  const bool identity_ok = same.injections > 0 && same.edited_latent.z.bit_equal(same.source_latent.z) &&
                           same.edited == same.source_image;

  InjectionPolicy zero = InjectionPolicy::fpe_default();
  zero.replace_ratio = 0.0;
  const LatentState direct = m.denoise(m.initial_latent(cfg), &dst, cfg, nullptr);
  const EditOutcome r0 = fpe_generated(m, "a photo of a sheep", "a photo of a leopard", cfg, zero);
  const bool ratio0_ok = r0.edited_latent.z.bit_equal(direct.z) && r0.edited == m.decode_latent(direct);

  auto word = [](bool ok) { return ok ? "bitwise" : "DIFFERS"; };
  return {capture_ok && identity_ok && ratio0_ok, std::string("capture_only=") + word(capture_ok) +
                                                      " same_prompt_injection=" + word(identity_ok) +
                                                      " ratio0_vs_direct=" + word(ratio0_ok)};
}

Outcome ddim_round_trip() {
  const ModelAdapter& m = test::tiny();
  std::vector<double> errs;
  for (int steps : {10, 20, 50}) {
    const SamplerConfig cfg = sampler(steps, 42);
    const LatentState z0 = m.denoise(m.initial_latent(cfg), nullptr, cfg, nullptr);
    const LatentTrajectory traj = m.ddim_invert(z0, cfg, nullptr);
    errs.push_back(mean_squared_error(m.denoise(traj.states.back(), nullptr, cfg, nullptr).z, z0.z));
  }
  const bool ok = errs[2] <= 1e-3 && errs[1] <= errs[0] && errs[2] <= errs[1];
  return {ok, "seed=42 mse T10=" + fmt("%.4g", errs[0]) + " T20=" + fmt("%.4g", errs[1]) + " T50=" +
                  fmt("%.4g", errs[2]) + " (tol 1e-3 at T50, non-increasing)"};
}

Outcome ratio_monotonicity() {
  const ModelAdapter& m = test::tiny();
  const uint64_t seed = 1;
  const SamplerConfig cfg = sampler(50, seed);
  std::vector<double> dist;
  for (double r : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    InjectionPolicy p;
    p.kinds = {AttnKind::self};
    p.replace_ratio = r;
    const EditOutcome out = fpe_generated(m, "a photo of a sheep", "a photo of a leopard", cfg, p);
    dist.push_back(l2_distance(out.edited_latent.z, out.source_latent.z));
  }
  bool ok = true;
  std::string detail = "seed=" + std::to_string(seed) + " T=50 self/all-sites distances";
  for (size_t i = 0; i < dist.size(); ++i) {
    detail += " " + fmt("%.4f", dist[i]);
    if (i > 0 && dist[i] > dist[i - 1]) ok = false;
  }
  return {ok, detail};
}

Outcome probe_sanity() {
  const SanityResult r = probe_sanity_gate();
  const double planted_min = *std::min_element(r.planted_per_class.begin(), r.planted_per_class.end());
  const bool ok = planted_min >= 0.95 && std::abs(r.shuffled_mean - 0.10) <= 0.05;
  return {ok, "planted_min=" + fmt("%.4f", planted_min) + " (>= 0.95 per class) shuffled_mean=" +
                  fmt("%.4f", r.shuffled_mean) + " (0.10 +/- 0.05)"};
}

Outcome null_text() {
  const ModelAdapter& m = test::tiny();
  const SamplerConfig cfg = sampler(10, 3);
  const Image img = m.decode_latent(m.initial_latent(cfg));
  const LatentTrajectory traj = m.ddim_invert(m.encode_image(img), cfg, nullptr);
  NullTextOptConfig opt;
  opt.iterations = 10;
  const NullTextState st = optimize_null_text(m, traj, m.encode_prompt("a photo of a cat"), cfg, opt);
  bool ok = st.trace.size() == 10;
  double worst_ratio = 0.0;
  for (const auto& t : st.trace) {
    if (t.size() < 2 || !(t.back() < t.front())) ok = false;
    if (!t.empty() && t.front() > 0) worst_ratio = std::max(worst_ratio, t.back() / t.front());
  }
  return {ok, "steps=" + std::to_string(st.trace.size()) + " iterations=10 worst final/initial=" +
                  fmt("%.4f", worst_ratio) + " (must be < 1 at every step)"};
}

Outcome dataset_counts() {
  test::TempDir dir("acceptance_assets");
  test::write_synthetic_assets(dir.path());
  const size_t car_fake = build_dataset(DatasetId::car_fake, {}).size();
  const size_t car_real = build_dataset(DatasetId::car_real, dir.path()).size();
  const size_t in_fake = build_dataset(DatasetId::imagenet_fake, dir.path()).size();
  const size_t in_real = build_dataset(DatasetId::imagenet_real, dir.path()).size();
  const bool ok = car_fake == 756 && car_real == 3321 && in_fake == 1182 && in_real == 1092;
  std::ostringstream os;
  os << "car_fake=" << car_fake << " car_real=" << car_real << " imagenet_fake=" << in_fake
     << " imagenet_real=" << in_real << " (expect 756/3321/1182/1092; real sets use synthetic asset stand-ins)";
  return {ok, os.str()};
}

Outcome metric_oracles() {
  auto cos = [](const Tensor& a, const Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      dot += double(a[i]) * b[i];
      na += double(a[i]) * a[i];
      nb += double(b[i]) * b[i];
    }
    return dot / std::sqrt(na * nb);
  };
  auto unit = [](const Tensor& t) {
    double n = 0;
    for (int64_t i = 0; i < t.numel(); ++i) n += double(t[i]) * t[i];
    std::vector<double> v;
    for (int64_t i = 0; i < t.numel(); ++i) v.push_back(t[i] / std::sqrt(n));
    return v;
  };
  Rng rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t n = 8 + trial % 120;
    const Tensor si = rng.randn({n}), di = rng.randn({n}), st = rng.randn({n}), dt = rng.randn({n});
    worst = std::max(worst, std::abs(clip_score(di, dt) - 100.0 * std::max(0.0, cos(di, dt))));
    const auto a = unit(si), b = unit(di), c = unit(st), d = unit(dt);
    double dot = 0, n1 = 0, n2 = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      dot += (b[i] - a[i]) * (d[i] - c[i]);
      n1 += (b[i] - a[i]) * (b[i] - a[i]);
      n2 += (d[i] - c[i]) * (d[i] - c[i]);
    }
    const auto cds = clip_directional_similarity(si, di, st, dt);
    if (!cds) return {false, "CDS unexpectedly null on random embeddings"};
    worst = std::max(worst, std::abs(*cds - dot / std::sqrt(n1 * n2)));
  }
  const Tensor img = rng.randn({32}), ta = rng.randn({32}), tb = rng.randn({32});
  const bool null_ok = !clip_directional_similarity(img, img, ta, tb).has_value();
  return {worst <= 1e-6 && null_ok, "max_abs_err=" + fmt("%.3g", worst) +
                                        " (tol 1e-6, 200 trials) identical_images_cds=" +
                                        (null_ok ? "null" : "NOT NULL")};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"attention_oracle", attention_oracle},
      {"transparency_identity", transparency_identity},
      {"ddim_round_trip", ddim_round_trip},
      {"ratio_monotonicity", ratio_monotonicity},
      {"probe_sanity_gate", probe_sanity},
      {"null_text_optimization", null_text},
      {"dataset_counts", dataset_counts},
      {"cds_cs_oracles", metric_oracles},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s | %s | %.1fs\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  std::printf("NOT RUN sd15_scale_bands | needs SD-1.5 weights and a GPU: CS 29.79 +/- 1.5, CDS 0.3559 +/- 0.06 "
              "on 20 imagenet_fake pairs, edit time within 3x of 6.30 s / 10.75 s, SD-scale probe bands\n");
  std::printf("%s %d/%zu runnable criteria passed\n", failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL",
              static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
