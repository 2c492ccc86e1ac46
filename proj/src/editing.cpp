// SPDX-License-Identifier: Apache-2.0
#include "fpe/editing.hpp"

#include <chrono>
#include <cmath>

#include "fpe/io.hpp"

namespace fpe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Forwards every callback to several observers in order. Observers that
// replace maps must come first so later ones see the final probabilities.
class ObserverChain final : public AttentionObserver {
 public:
  explicit ObserverChain(std::vector<AttentionObserver*> list) {
    for (auto* o : list) {
      if (o) list_.push_back(o);
    }
  }
  void begin_pass(const PassContext& ctx) override {
    for (auto* o : list_) o->begin_pass(ctx);
  }
  bool on_attention(const AttentionSite& site, Tensor& probs) override {
    bool replaced = false;
    for (auto* o : list_) replaced = o->on_attention(site, probs) || replaced;
    return replaced;
  }
  AttentionObserver* get() { return list_.empty() ? nullptr : this; }

 private:
  std::vector<AttentionObserver*> list_;
};

struct BranchSpec {
  const ContextEmbedding* prompt = nullptr;
  bool conditional_only = false;
};

int max_window(const InjectionPolicy& policy, int step_count) {
  int w = 0;
  for (AttnKind k : policy.kinds) w = std::max(w, policy.window_steps(step_count, k));
  return w;
}

CaptureStore::Options capture_options_for(const InjectionPolicy& policy) {
  CaptureStore::Options o;
  o.kinds = policy.kinds;
  if (policy.sites) {
    o.retention = Retention::sites_subset;
    o.sites = *policy.sites;
  }
  return o;
}

struct PairedRun {
  LatentState source;
  LatentState target;
  int injections = 0;
  double denoise_seconds = 0.0;
};

// Lockstep source/target denoising from a shared start latent. The source
// step at each index completes and fills a rolling store before the target
// step reads it.
PairedRun paired_loop(const ModelAdapter& model, const LatentState& start, const BranchSpec& src,
                      const BranchSpec& tgt, const SamplerConfig& sampler, const InjectionPolicy& policy,
                      const std::vector<Tensor>* nulls, EditObservers obs) {
  PairedRun run{start, start};
  const int steps = sampler.step_count;
  const int window = policy.empty() ? 0 : max_window(policy, steps);
  CaptureStore rolling(capture_options_for(policy));
  while (run.source.t_index > 0) {
    const int k = run.source.t_index;
    const int step = steps - k;
    StepOptions opts;
    opts.elapsed_seconds = &run.denoise_seconds;
    if (nulls) opts.null_override = &(*nulls)[static_cast<size_t>(step)];

    const bool inject = step < window;
    rolling.clear();
    InstrumentSet src_capture(steps, inject ? &rolling : nullptr);
    ObserverChain src_chain({inject ? &src_capture : nullptr, obs.source});
    StepOptions src_opts = opts;
    src_opts.conditional_only = src.conditional_only;
    run.source = model.denoise_step(run.source, src.prompt, sampler, src_chain.get(), src_opts);

    if (inject && rolling.latest_step() != step) {
      throw LockstepError("source maps for step " + std::to_string(step) + " missing before the target step");
    }
    InstrumentSet tgt_inject(steps, nullptr, inject ? &rolling : nullptr, inject ? &policy : nullptr);
    ObserverChain tgt_chain({inject ? &tgt_inject : nullptr, obs.target});
    StepOptions tgt_opts = opts;
    tgt_opts.conditional_only = tgt.conditional_only;
    run.target = model.denoise_step(run.target, tgt.prompt, sampler, tgt_chain.get(), tgt_opts);
    run.injections += tgt_inject.injections();
  }
  return run;
}

void check_inversion_sampler(const SamplerConfig& sampler) {
  sampler.validate();
  if (sampler.eta != 0.0f) throw ValidationError("eta must be 0 for real-image editing (inversion)");
}

}  // namespace

EditOutcome fpe_generated(const ModelAdapter& model, const std::string& p_src, const std::string& p_dst,
                          const SamplerConfig& sampler, const InjectionPolicy& policy, EditObservers obs) {
  const auto t0 = Clock::now();
  sampler.validate();
  policy.validate();
  const ContextEmbedding src = model.encode_prompt(p_src);
  const ContextEmbedding dst = model.encode_prompt(p_dst);
  const LatentState z_t = model.initial_latent(sampler);
  const PairedRun run = paired_loop(model, z_t, {&src, false}, {&dst, false}, sampler, policy, nullptr, obs);
  EditOutcome out;
  out.source_latent = run.source;
  out.edited_latent = run.target;
  out.source_image = model.decode_latent(run.source);
  out.edited = model.decode_latent(run.target);
  out.injections = run.injections;
  out.denoise_seconds = run.denoise_seconds;
  out.edit_seconds = seconds_since(t0);
  return out;
}

EditOutcome fpe_real(const ModelAdapter& model, const Image& image, const std::string& p_dst,
                     const SamplerConfig& sampler, const InjectionPolicy& policy, const RealEditOptions& opts,
                     EditObservers obs) {
  const auto t0 = Clock::now();
  check_inversion_sampler(sampler);
  policy.validate();
  const Image fitted = model.fit_image(image);
  const ContextEmbedding dst = model.encode_prompt(p_dst);
  std::optional<ContextEmbedding> src;
  if (opts.source_prompt) src = model.encode_prompt(*opts.source_prompt);
  const LatentState z0 = model.encode_image(fitted);
  double inversion_seconds = 0.0;
  const auto ti = Clock::now();
  const LatentTrajectory traj = model.ddim_invert(z0, sampler, src ? &*src : nullptr);
  inversion_seconds = seconds_since(ti);
  const BranchSpec source_branch{src ? &*src : nullptr, false};
  const PairedRun run =
      paired_loop(model, traj.states.back(), source_branch, {&dst, false}, sampler, policy, nullptr, obs);
  EditOutcome out;
  out.source_image = fitted;
  out.source_latent = run.source;
  out.edited_latent = run.target;
  out.reconstruction = model.decode_latent(run.source);
  out.edited = model.decode_latent(run.target);
  out.injections = run.injections;
  out.denoise_seconds = run.denoise_seconds + inversion_seconds;
  out.edit_seconds = seconds_since(t0);
  return out;
}

NullTextState optimize_null_text(const ModelAdapter& model, const LatentTrajectory& inversion,
                                 const ContextEmbedding& source, const SamplerConfig& sampler,
                                 const NullTextOptConfig& opt) {
  const int steps = sampler.step_count;
  if (static_cast<int>(inversion.states.size()) != steps + 1) {
    throw ValidationError("inversion trajectory length does not match step_count");
  }
  if (opt.iterations < 0) throw ValidationError("null-text iterations must be >= 0");
  if (!(opt.step_size > 0.0)) throw ValidationError("null-text step size must be positive");
  const DdimScheduler sched = model.scheduler(sampler);
  const float g = sampler.guidance_scale;
  NullTextState state;
  Tensor null_embedding = model.null_embedding().hidden;
  LatentState latent = inversion.states.back();
  for (int k = steps; k >= 1; --k) {
    const Tensor& target = inversion.states[static_cast<size_t>(k - 1)].z;
    StepOptions cond_only;
    cond_only.conditional_only = true;
    const Tensor eps_c = model.predict_noise(latent, &source, sampler, nullptr, cond_only);
    // DDIM step as an affine map of the noise prediction: z' = a*z + b*eps.
    const double a_t = sched.alpha_bar(k), a_prev = sched.alpha_bar(k - 1);
    const float coef_z = static_cast<float>(std::sqrt(a_prev) / std::sqrt(a_t));
    const float coef_eps =
        static_cast<float>(std::sqrt(1.0 - a_prev) - std::sqrt(a_prev) * std::sqrt(1.0 - a_t) / std::sqrt(a_t));
    const ag::Var z_term(latent.z * coef_z);
    const ag::Var cond_term(eps_c * (g * coef_eps));
    const ag::Var target_var(target);
    const float timestep = static_cast<float>(sched.timestep(k));

    struct Eval {
      ag::Var leaf;
      ag::Var loss;
      double value = 0.0;  // the same loss accumulated in double precision
    };
    auto evaluate = [&](const Tensor& candidate) {
      Eval e{ag::Var::leaf(candidate, true), {}};
      const ag::Var eps_u = model.unet().forward(ag::Var(latent.z), timestep, e.leaf);
      const ag::Var pred = ag::add(ag::add(z_term, cond_term), ag::scale(eps_u, (1.0f - g) * coef_eps));
      e.loss = ag::mse(pred, target_var);
      double sum = 0.0;
      for (int64_t i = 0; i < target.numel(); ++i) {
        const double d = static_cast<double>(pred.value()[i]) - target[i];
        sum += d * d;
      }
      e.value = sum / static_cast<double>(target.numel());
      return e;
    };

    std::vector<double> trace;
    Eval current = evaluate(null_embedding);
    trace.push_back(current.value);
    double lr = opt.step_size;
    for (int it = 0; it < opt.iterations && current.value > opt.early_stop; ++it) {
      ag::backward(current.loss, Tensor({1}, 1.0f));
      const Tensor& grad = current.leaf.grad();
      double sq = 0.0;
      for (float v : grad.storage()) sq += static_cast<double>(v) * v;
      const double rms = std::sqrt(sq / static_cast<double>(grad.numel()));
      if (!(rms > 0.0)) break;
      // Steps are scaled to an RMS of `lr` per entry so the step size does
      // not depend on the loss scale of the backbone.
      Tensor candidate = null_embedding;
      for (int64_t i = 0; i < candidate.numel(); ++i) candidate[i] -= static_cast<float>(lr * grad[i] / rms);
      Eval next = evaluate(candidate);
      if (next.value < current.value) {
        null_embedding = std::move(candidate);
        current = std::move(next);
      } else {
        // Keep the trace monotone: reject the step and shrink it.
        lr *= 0.5;
        current = evaluate(null_embedding);
      }
      trace.push_back(current.value);
    }
    const double loss = current.value;
    if (!std::isfinite(loss) || loss > opt.divergence_threshold) {
      state.warnings.push_back("null-text optimization did not converge at step index " + std::to_string(k) +
                               " (loss " + std::to_string(loss) + ")");
    }
    state.trace.push_back(std::move(trace));
    state.null_embeddings.push_back(null_embedding);
    StepOptions guided;
    guided.null_override = &state.null_embeddings.back();
    latent = model.denoise_step(latent, &source, sampler, nullptr, guided);
  }
  return state;
}

EditOutcome fpe_null_text(const ModelAdapter& model, const Image& image, const std::string& p_src,
                          const std::string& p_dst, const SamplerConfig& sampler, const InjectionPolicy& policy,
                          const NullTextOptConfig& opt, EditObservers obs) {
  const auto t0 = Clock::now();
  check_inversion_sampler(sampler);
  policy.validate();
  const Image fitted = model.fit_image(image);
  const ContextEmbedding src = model.encode_prompt(p_src);
  const ContextEmbedding dst = model.encode_prompt(p_dst);
  const LatentState z0 = model.encode_image(fitted);
  const LatentTrajectory traj = model.ddim_invert(z0, sampler, &src);
  NullTextState nts = optimize_null_text(model, traj, src, sampler, opt);
  const PairedRun run =
      paired_loop(model, traj.states.back(), {&src, false}, {&dst, false}, sampler, policy, &nts.null_embeddings, obs);
  EditOutcome out;
  out.source_image = fitted;
  out.source_latent = run.source;
  out.edited_latent = run.target;
  out.reconstruction = model.decode_latent(run.source);
  out.edited = model.decode_latent(run.target);
  out.injections = run.injections;
  out.denoise_seconds = run.denoise_seconds;
  out.null_text = std::move(nts);
  out.edit_seconds = seconds_since(t0);
  return out;
}

// ---------------------------------------------------------------------------
// Jobs

void EditJob::validate() const {
  sampler.validate();
  policy.validate();
  if (method != "fpe" && method != "null_text") {
    throw ValidationError("method must be fpe or null_text, got '" + method + "'");
  }
  if (source.type == EditSource::Type::real_image) {
    if (source.image_path.empty()) throw ValidationError("source.path is required for real images");
    if (method == "null_text" && source.prompt.empty()) {
      throw ValidationError("source.prompt is required for the null_text method");
    }
    if (source_prompt_for_reconstruction && source.prompt.empty()) {
      throw ValidationError("source_prompt_for_reconstruction needs source.prompt");
    }
    if (sampler.eta != 0.0f) throw ValidationError("sampler.eta must be 0 for real-image edits");
  } else if (method == "null_text") {
    throw ValidationError("the null_text method applies to real images only");
  }
  if (null_text.iterations < 0) throw ValidationError("null_text.iterations must be >= 0");
}

json EditJob::to_json() const {
  json src;
  if (source.type == EditSource::Type::seeded_prompt) {
    src = {{"type", "seeded_prompt"}, {"seed", source.seed}, {"prompt", source.prompt}};
  } else {
    src = {{"type", "real_image"}, {"path", source.image_path}, {"prompt", source.prompt}};
  }
  json sampler_json = sampler.to_json();
  if (source.type == EditSource::Type::seeded_prompt) sampler_json["seed"] = source.seed;
  return {{"source", src},
          {"target_prompt", target_prompt},
          {"sampler", sampler_json},
          {"policy", policy.to_json()},
          {"method", method},
          {"null_text",
           {{"iterations", null_text.iterations},
            {"step_size", null_text.step_size},
            {"early_stop", null_text.early_stop},
            {"divergence_threshold", null_text.divergence_threshold}}},
          {"source_prompt_for_reconstruction", source_prompt_for_reconstruction},
          {"heatmaps", heatmaps}};
}

EditJob EditJob::from_json(const json& j) {
  EditJob job;
  const json& s = j.at("source");
  const std::string type = s.value("type", "seeded_prompt");
  if (type == "seeded_prompt") {
    job.source.type = EditSource::Type::seeded_prompt;
    job.source.seed = s.value("seed", uint64_t{0});
    job.source.prompt = s.value("prompt", "");
  } else if (type == "real_image") {
    job.source.type = EditSource::Type::real_image;
    job.source.image_path = s.value("path", "");
    job.source.prompt = s.value("prompt", "");
  } else {
    throw ValidationError("source.type must be seeded_prompt or real_image");
  }
  job.target_prompt = j.value("target_prompt", "");
  if (j.contains("sampler")) job.sampler = SamplerConfig::from_json(j["sampler"]);
  // The source seed is the single source of randomness for generated edits.
  if (job.source.type == EditSource::Type::seeded_prompt) job.sampler.seed = job.source.seed;
  if (j.contains("policy")) job.policy = InjectionPolicy::from_json(j["policy"]);
  job.method = j.value("method", job.method);
  if (j.contains("null_text")) {
    const json& n = j["null_text"];
    job.null_text.iterations = n.value("iterations", job.null_text.iterations);
    job.null_text.step_size = n.value("step_size", job.null_text.step_size);
    job.null_text.early_stop = n.value("early_stop", job.null_text.early_stop);
    job.null_text.divergence_threshold = n.value("divergence_threshold", job.null_text.divergence_threshold);
  }
  job.source_prompt_for_reconstruction = j.value("source_prompt_for_reconstruction", false);
  job.heatmaps = j.value("heatmaps", false);
  return job;
}

EditOutcome run_edit(const ModelAdapter& model, const EditJob& job, EditObservers obs) {
  job.validate();
  if (job.source.type == EditSource::Type::seeded_prompt) {
    return fpe_generated(model, job.source.prompt, job.target_prompt, job.sampler, job.policy, obs);
  }
  const Image image = read_image(job.source.image_path);
  if (job.method == "null_text") {
    return fpe_null_text(model, image, job.source.prompt, job.target_prompt, job.sampler, job.policy, job.null_text,
                         obs);
  }
  RealEditOptions opts;
  if (job.source_prompt_for_reconstruction) opts.source_prompt = job.source.prompt;
  return fpe_real(model, image, job.target_prompt, job.sampler, job.policy, opts, obs);
}

namespace {

void write_heatmaps(const CaptureStore& store, const TokenizedPrompt& tokens, const fs::path& dir,
                    std::vector<std::string>& artifacts) {
  for (const StoreKey& key : store.keys()) {
    const AttentionMapRecord rec = store.get(key);
    const std::string stem = to_string(key.kind) + "_site" + std::to_string(key.site);
    const int scale = std::max<int>(1, static_cast<int>(256 / std::max<int64_t>(1, rec.site.grid_w)));
    if (key.kind == AttnKind::cross) {
      for (int pos = 1; pos + 1 < tokens.length; ++pos) {
        const std::string name = "attn_" + stem + "_tok" + std::to_string(pos) + ".png";
        write_png(dir / name, heatmap_image(cross_heatmap(rec, pos), scale));
        artifacts.push_back(name);
      }
    } else {
      const int k = static_cast<int>(std::min<int64_t>(6, rec.site.spatial_len));
      const SvdResult svd = svd_components(rec, k);
      for (int c = 0; c < k; ++c) {
        const std::string name = "attn_" + stem + "_svd" + std::to_string(c + 1) + ".png";
        write_png(dir / name, heatmap_image(svd.heatmaps[static_cast<size_t>(c)], scale));
        artifacts.push_back(name);
      }
    }
  }
  store.save(dir / "attention_maps.fpet", dir / "attention_maps.json");
  artifacts.push_back("attention_maps.fpet");
  artifacts.push_back("attention_maps.json");
}

}  // namespace

json run_edit_job(const ModelAdapter& model, const EditJob& job, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  CaptureStore::Options copts;
  copts.retention = Retention::step_mean;
  // Guided runs keep the prompt branch; unguided passes are single-branch.
  copts.branch = Branch::cond;
  CaptureStore target_maps(copts);
  InstrumentSet target_capture(job.sampler.step_count, &target_maps);
  EditObservers obs;
  if (job.heatmaps) obs.target = &target_capture;
  const EditOutcome out = run_edit(model, job, obs);

  std::vector<std::string> artifacts;
  write_png(out_dir / "src.png", out.source_image);
  artifacts.push_back("src.png");
  if (out.reconstruction) {
    write_png(out_dir / "res.png", *out.reconstruction);
    artifacts.push_back("res.png");
  }
  write_png(out_dir / "dst.png", out.edited);
  artifacts.push_back("dst.png");
  if (job.heatmaps) write_heatmaps(target_maps, model.encode_prompt(job.target_prompt).tokens, out_dir, artifacts);
  io::write_container(out_dir / "latents.fpet", {{"source", out.source_latent.z, io::DType::f32},
                                                 {"edited", out.edited_latent.z, io::DType::f32}});
  artifacts.push_back("latents.fpet");

  SamplerConfig sampler = job.sampler;
  if (sampler.schedule_id.empty()) sampler.schedule_id = model.schedule().id();
  json job_json = job.to_json();
  job_json["sampler"] = sampler.to_json();
  json manifest = {{"job", job_json},
                   {"backbone", model.backbone_id()},
                   {"text_encoder", model.text_encoder_id()},
                   {"artifacts", artifacts},
                   {"injections", out.injections},
                   {"timings", {{"edit_seconds", out.edit_seconds}, {"denoise_seconds", out.denoise_seconds}}},
                   {"latent_distance", l2_distance(out.source_latent.z, out.edited_latent.z)}};
  if (out.null_text) {
    manifest["null_text"] = {{"trace", out.null_text->trace}, {"warnings", out.null_text->warnings}};
  }
  manifest["artifacts"].push_back("manifest.json");
  io::write_text_atomic(out_dir / "manifest.json", manifest.dump(2));
  return manifest;
}

// ---------------------------------------------------------------------------
// Ablation sweeps

namespace {

std::string kinds_label(const std::set<AttnKind>& kinds) {
  if (kinds.empty()) return "none";
  std::string s;
  for (AttnKind k : kinds) s += (s.empty() ? "" : "+") + to_string(k);
  return s;
}

std::string sites_label(const std::optional<std::set<int>>& sites) {
  if (!sites) return "all";
  if (sites->empty()) return "none";
  const int lo = *sites->begin(), hi = *sites->rbegin();
  if (static_cast<int>(sites->size()) == hi - lo + 1) return std::to_string(lo) + "-" + std::to_string(hi);
  std::string s;
  for (int i : *sites) s += (s.empty() ? "" : ",") + std::to_string(i);
  return s;
}

std::string fmt_ratio(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", r);
  return buf;
}

}  // namespace

SweepSpec SweepSpec::product(const std::vector<std::set<AttnKind>>& kinds,
                             const std::vector<std::optional<std::set<int>>>& site_sets,
                             const std::vector<double>& ratios) {
  SweepSpec spec;
  for (const auto& k : kinds) {
    for (const auto& s : site_sets) {
      for (double r : ratios) {
        spec.cells.push_back({k, s, r, std::nullopt, kinds_label(k) + " " + sites_label(s) + " r=" + fmt_ratio(r)});
      }
    }
  }
  spec.columns = static_cast<int>(ratios.size());
  return spec;
}

SweepSpec SweepSpec::paper_modes(const std::vector<double>& ratios) {
  SweepSpec spec;
  for (double r : ratios) spec.cells.push_back({{AttnKind::cross}, std::nullopt, r, std::nullopt, "cross r=" + fmt_ratio(r)});
  for (double r : ratios) {
    spec.cells.push_back(
        {{AttnKind::cross, AttnKind::self}, std::nullopt, r, 0.8, "cross 0.80 + self r=" + fmt_ratio(r)});
  }
  for (double r : ratios) spec.cells.push_back({{AttnKind::self}, std::nullopt, r, std::nullopt, "self r=" + fmt_ratio(r)});
  spec.columns = static_cast<int>(ratios.size());
  return spec;
}

json SweepSpec::to_json() const {
  json cells_json = json::array();
  for (const auto& c : cells) {
    InjectionPolicy p;
    p.kinds = c.kinds;
    p.sites = c.sites;
    p.replace_ratio = c.ratio;
    p.cross_replace_ratio = c.cross_ratio;
    json cj = p.to_json();
    cj["label"] = c.label;
    cells_json.push_back(cj);
  }
  return {{"cells", cells_json}, {"columns", columns}};
}

SweepSpec SweepSpec::from_json(const json& j) {
  SweepSpec spec;
  if (j.contains("preset")) {
    const std::string preset = j["preset"];
    if (preset != "paper_modes") throw ValidationError("grid.preset must be paper_modes");
    spec = paper_modes(j.value("ratios", std::vector<double>{0.2, 0.4, 0.6, 0.8, 1.0}));
  } else if (j.contains("cells")) {
    for (const auto& c : j["cells"]) {
      const InjectionPolicy p = InjectionPolicy::from_json(c);
      spec.cells.push_back({p.kinds, p.sites, p.replace_ratio, p.cross_replace_ratio, c.value("label", "")});
      if (spec.cells.back().label.empty()) {
        spec.cells.back().label = kinds_label(p.kinds) + " " + sites_label(p.sites) + " r=" + fmt_ratio(p.replace_ratio);
      }
    }
    spec.columns = j.value("columns", 0);
  } else {
    std::vector<std::set<AttnKind>> kinds;
    for (const auto& k : j.at("kinds")) {
      std::set<AttnKind> set;
      if (k.is_string()) {
        set.insert(parse_attn_kind(k.get<std::string>()));
      } else {
        for (const auto& e : k) set.insert(parse_attn_kind(e.get<std::string>()));
      }
      kinds.push_back(set);
    }
    std::vector<std::optional<std::set<int>>> sites;
    for (const auto& s : j.value("site_sets", json::array({"all"}))) {
      sites.push_back(InjectionPolicy::from_json({{"sites", s}}).sites);
    }
    spec = product(kinds, sites, j.at("ratios").get<std::vector<double>>());
  }
  if (spec.cells.empty()) throw ValidationError("grid must contain at least one cell");
  return spec;
}

SweepResult ablation_sweep(const ModelAdapter& model, const EditJob& base, const SweepSpec& grid,
                           const fs::path& out_dir) {
  base.validate();
  if (grid.cells.empty()) throw ValidationError("grid must contain at least one cell");
  if (base.method != "fpe") throw ValidationError("sweeps support the fpe method only");
  const SamplerConfig& sampler = base.sampler;
  const int steps = sampler.step_count;

  // One source run serves every cell: capture the union of what the cells
  // need over the longest window.
  InjectionPolicy union_policy;
  union_policy.replace_ratio = 0.0;
  bool all_sites = false;
  std::set<int> site_union;
  int window = 0;
  for (const auto& c : grid.cells) {
    InjectionPolicy p;
    p.kinds = c.kinds;
    p.replace_ratio = c.ratio;
    p.cross_replace_ratio = c.cross_ratio;
    p.validate();
    union_policy.kinds.insert(c.kinds.begin(), c.kinds.end());
    if (!c.sites) {
      all_sites = true;
    } else {
      site_union.insert(c.sites->begin(), c.sites->end());
    }
    window = std::max(window, max_window(p, steps));
  }
  if (!all_sites) union_policy.sites = site_union;
  CaptureStore source_store(capture_options_for(union_policy));
  InstrumentSet source_capture(steps, &source_store);

  const bool real = base.source.type == EditSource::Type::real_image;
  std::optional<ContextEmbedding> src;
  if (!real || base.source_prompt_for_reconstruction) src = model.encode_prompt(base.source.prompt);
  const ContextEmbedding dst = model.encode_prompt(base.target_prompt);
  LatentState start;
  Image source_image;
  if (real) {
    check_inversion_sampler(sampler);
    source_image = model.fit_image(read_image(base.source.image_path));
    start = model.ddim_invert(model.encode_image(source_image), sampler, src ? &*src : nullptr).states.back();
  } else {
    start = model.initial_latent(sampler);
  }
  LatentState s = start;
  while (s.t_index > 0) {
    const int step = steps - s.t_index;
    s = model.denoise_step(s, src ? &*src : nullptr, sampler, step < window ? &source_capture : nullptr);
  }
  if (!real) source_image = model.decode_latent(s);
  const Image source_out = real ? model.decode_latent(s) : source_image;

  SweepResult result;
  json cells_json = json::array();
  if (!out_dir.empty()) fs::create_directories(out_dir / "cells");
  for (size_t i = 0; i < grid.cells.size(); ++i) {
    const SweepCell& c = grid.cells[i];
    json cj = {{"index", i}, {"label", c.label}, {"kinds", json::array()}, {"sites", sites_label(c.sites)},
               {"ratio", c.ratio}};
    for (AttnKind k : c.kinds) cj["kinds"].push_back(to_string(k));
    if (c.cross_ratio) cj["cross_ratio"] = *c.cross_ratio;
    try {
      if (c.kinds.count(AttnKind::cross) && (!src || base.source.prompt.empty())) {
        throw ValidationError("cross-map cells need a source prompt");
      }
      InjectionPolicy p = base.policy;
      p.kinds = c.kinds;
      p.sites = c.sites;
      p.replace_ratio = c.ratio;
      p.cross_replace_ratio = c.cross_ratio;
      p.validate();
      InstrumentSet inject(steps, nullptr, &source_store, &p);
      const LatentState out = model.denoise(start, &dst, sampler, p.empty() ? nullptr : &inject);
      Image img = model.decode_latent(out);
      const std::string name = "cells/cell_" + std::to_string(i) + ".png";
      if (!out_dir.empty()) write_png(out_dir / name, img);
      cj["status"] = "done";
      cj["image"] = name;
      cj["latent_distance"] = l2_distance(out.z, s.z);
      result.cells.push_back(std::move(img));
    } catch (const std::exception& e) {
      cj["status"] = "failed";
      cj["error"] = e.what();
      result.cells.push_back(std::nullopt);
    }
    cells_json.push_back(cj);
  }
  std::vector<Image> tiles;
  for (const auto& c : result.cells) tiles.push_back(c ? *c : Image(source_out.width, source_out.height, 128));
  result.grid = compose_grid(tiles, grid.columns > 0 ? grid.columns : static_cast<int>(tiles.size()));
  result.manifest = {{"base_job", base.to_json()},
                     {"grid", grid.to_json()},
                     {"backbone", model.backbone_id()},
                     {"cells", cells_json},
                     {"grid_image", "grid.png"},
                     {"source_image", "source.png"}};
  if (!out_dir.empty()) {
    write_png(out_dir / "grid.png", result.grid);
    write_png(out_dir / "source.png", source_out);
    io::write_text_atomic(out_dir / "manifest.json", result.manifest.dump(2));
  }
  return result;
}

}  // namespace fpe
