// SPDX-License-Identifier: Apache-2.0
// Command-line front end: runs edits, sweeps, harvests, probes and
// benchmarks as local jobs under the storage root, or serves the HTTP API.
#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fpe/eval.hpp"
#include "fpe/io.hpp"
#include "fpe/probing.hpp"
#include "fpe/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fpe;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

CLI::Validator unit_interval() {
  return CLI::Validator(
      [](std::string& value) -> std::string {
        double v = 0.0;
        std::istringstream is(value);
        if (!(is >> v) || !is.eof() || v < 0.0 || v > 1.0) return "must be in range [0,1], got " + value;
        return {};
      },
      "in [0,1]");
}

CLI::Validator kinds_list() {
  return CLI::Validator(
      [](std::string& value) -> std::string {
        if (value == "none") return {};
        std::istringstream is(value);
        std::string item;
        while (std::getline(is, item, ',')) {
          if (item != "self" && item != "cross") return "expects self, cross, self,cross or none, got " + value;
        }
        return {};
      },
      "KINDS");
}

json kinds_json(const std::string& value) {
  json out = json::array();
  if (value == "none") return out;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(item);
  return out;
}

// "all", "4-14" or "1,2,5".
json sites_json(const std::string& value) {
  if (value == "all" || value.find('-') != std::string::npos) return value;
  json out = json::array();
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(std::stoi(item));
  return out;
}

CLI::Validator sites_spec() {
  return CLI::Validator(
      [](std::string& value) -> std::string {
        try {
          InjectionPolicy::from_json({{"sites", sites_json(value)}});
        } catch (const std::exception& e) {
          return "expects all, a range like 4-14 or a list like 1,2,5 (" + std::string(e.what()) + ")";
        }
        return {};
      },
      "SITES");
}

struct Common {
  std::string config_path;
  std::string storage;
  std::string backbone;
};

ToolkitConfig load_config(const Common& c) {
  ToolkitConfig cfg = ToolkitConfig::load(c.config_path);
  if (!c.storage.empty()) cfg.storage_root = c.storage;
  if (!c.backbone.empty()) cfg.backbone_id = c.backbone;
  cfg.validate();
  return cfg;
}

void print_line(const json& j) { std::cout << j.dump() << std::endl; }

// Runs a job through the local store; prints the summary line and returns
// the exit code.
int run_local(const Common& common, const std::string& command, const std::string& kind, json request,
              const std::string& copy_to = {}) {
  const ToolkitConfig cfg = load_config(common);
  if (!common.backbone.empty()) {
    json& body = kind == "sweep" ? request["base"] : request;
    if (kind != "probe") body["backbone"] = common.backbone;
  }
  JobService service(cfg);
  const JobRecord r = service.run_sync(kind, request);
  const fs::path dir = service.store().artifact_dir(r.id);
  json line = {{"command", command}, {"job", r.id}, {"status", to_string(r.status)}};
  if (r.status == JobStatus::done) {
    if (!copy_to.empty()) {
      fs::create_directories(copy_to);
      fs::copy(dir, copy_to, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    }
    line["artifacts_dir"] = (copy_to.empty() ? dir : fs::path(copy_to)).string();
    line["artifacts"] = r.artifact_paths;
    line["summary"] = r.summary;
    if (kind == "benchmark") std::cout << io::read_text(dir / "summary.txt");
    print_line(line);
    return 0;
  }
  line["error"] = r.error;
  line["job_log"] = service.store().log_path(r.id).string();
  print_line(line);
  std::cerr << "error: " << r.error << "\njob log: " << service.store().log_path(r.id).string() << '\n';
  return kExitRuntime;
}

struct EditFlags {
  uint64_t seed = 0;
  std::string src, dst, image;
  std::optional<double> ratio;
  std::optional<double> cross_ratio;
  std::string kinds, sites;
  std::optional<int> steps;
  std::optional<double> guidance;
  std::string method = "fpe";
  bool heatmaps = false;
  bool reconstruct_with_source = false;
  int null_iterations = 10;
  std::string out;
};

void add_edit_flags(CLI::App* cmd, EditFlags& f) {
  cmd->add_option("--seed", f.seed, "Source seed for seeded-prompt sources");
  cmd->add_option("--src", f.src, "Source prompt (P_src)");
  cmd->add_option("--dst", f.dst, "Target prompt (P_dst)")->required();
  cmd->add_option("--image", f.image, "Real source image (PNG or JPEG); enables the inversion path");
  cmd->add_option("--kinds", f.kinds, "Injected map kinds: self, cross, self,cross or none")->check(kinds_list());
  cmd->add_option("--sites", f.sites, "Injected sites: all, 4-14 or 1,2,5")->check(sites_spec());
  cmd->add_option("--cross-ratio", f.cross_ratio, "Separate replace ratio for cross maps")->check(unit_interval());
  cmd->add_option("--steps", f.steps, "DDIM step count")->check(CLI::Range(1, 1000));
  cmd->add_option("--guidance", f.guidance, "Classifier-free guidance scale")->check(CLI::NonNegativeNumber);
  cmd->add_option("--method", f.method, "fpe or null_text (real images)")->check(CLI::IsMember({"fpe", "null_text"}));
  cmd->add_option("--null-iterations", f.null_iterations, "Null-text iterations per step")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--heatmaps", f.heatmaps, "Export step-mean attention heatmaps");
  cmd->add_flag("--reconstruct-with-source", f.reconstruct_with_source,
                "Condition the reconstruction branch on --src instead of the empty prompt");
  cmd->add_option("--out", f.out, "Also copy the artifacts into this directory");
}

json edit_request(const EditFlags& f, const ToolkitConfig& cfg) {
  json source;
  if (!f.image.empty()) {
    source = {{"type", "real_image"}, {"path", fs::absolute(f.image).string()}};
    if (!f.src.empty()) source["prompt"] = f.src;
  } else {
    if (f.src.empty()) throw ValidationError("--src is required unless --image is given");
    source = {{"type", "seeded_prompt"}, {"seed", f.seed}, {"prompt", f.src}};
  }
  json policy = cfg.default_policy.to_json();
  if (!f.kinds.empty()) policy["kinds"] = kinds_json(f.kinds);
  if (!f.sites.empty()) policy["sites"] = sites_json(f.sites);
  if (f.ratio) policy["replace_ratio"] = *f.ratio;
  if (f.cross_ratio) policy["cross_replace_ratio"] = *f.cross_ratio;
  json sampler = json::object();
  if (f.steps) sampler["step_count"] = *f.steps;
  if (f.guidance) sampler["guidance_scale"] = *f.guidance;
  json req = {{"source", source},
              {"target_prompt", f.dst},
              {"policy", policy},
              {"sampler", sampler},
              {"method", f.method},
              {"heatmaps", f.heatmaps},
              {"source_prompt_for_reconstruction", f.reconstruct_with_source}};
  if (f.method == "null_text") req["null_text"] = {{"iterations", f.null_iterations}};
  return req;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(item);
  return out;
}

HttpApi* g_api = nullptr;

void handle_signal(int) {
  if (g_api) g_api->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-map editing, probing and evaluation toolkit"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_path, "Config file (key = value lines)");
  app.add_option("--storage", common.storage, "Storage root; overrides the config file and FPE_STORAGE_ROOT");
  app.add_option("--backbone", common.backbone, "Backbone id: tiny-test, sd15 or a checkpoint directory");

  // edit
  EditFlags edit;
  auto* edit_cmd = app.add_subcommand("edit", "Edit one image");
  add_edit_flags(edit_cmd, edit);
  edit_cmd->add_option("--ratio", edit.ratio, "Replace ratio in [0,1]")->check(unit_interval());

  // sweep
  EditFlags sweep;
  std::vector<double> sweep_ratios;
  std::vector<std::string> sweep_kinds, sweep_site_sets;
  std::string sweep_preset;
  auto* sweep_cmd = app.add_subcommand("sweep", "Ablation grid over kinds, sites and ratios");
  add_edit_flags(sweep_cmd, sweep);
  sweep_cmd->add_option("--ratios", sweep_ratios, "Replace ratios")->delimiter(',')->check(unit_interval());
  sweep_cmd->add_option("--grid-kinds", sweep_kinds, "Kind sets for the grid rows, e.g. self cross self,cross")
      ->check(kinds_list());
  sweep_cmd->add_option("--site-sets", sweep_site_sets, "Site sets for the grid rows, e.g. 4-14 all")
      ->check(sites_spec());
  sweep_cmd->add_option("--preset", sweep_preset, "Named grid")->check(CLI::IsMember({"paper_modes"}));

  // harvest
  std::string harvest_family = "color_car", harvest_dataset;
  std::vector<uint64_t> harvest_seeds;
  std::string harvest_kinds = "cross", harvest_roles;
  std::optional<int> harvest_steps;
  int harvest_shard = 64;
  auto* harvest_cmd = app.add_subcommand("harvest", "Capture attention features for a probing corpus");
  harvest_cmd->add_option("--family", harvest_family, "Corpus family")
      ->check(CLI::IsMember({"color_car", "color_object", "animal_park", "complex_color", "token_probe"}));
  harvest_cmd->add_option("--seeds", harvest_seeds, "Seeds")->delimiter(',')->required();
  harvest_cmd->add_option("--dataset", harvest_dataset, "Dataset name under <storage>/datasets")->required();
  harvest_cmd->add_option("--kinds", harvest_kinds, "Map kinds: self, cross or self,cross")->check(kinds_list());
  harvest_cmd->add_option("--roles", harvest_roles, "Token roles: edit_word, article_a, noun_car (comma list)");
  harvest_cmd->add_option("--steps", harvest_steps, "DDIM step count")->check(CLI::Range(1, 1000));
  harvest_cmd->add_option("--shard-size", harvest_shard, "Prompts per shard")->check(CLI::PositiveNumber);

  // probe
  std::string probe_mode, probe_dataset, probe_test, probe_kind = "cross", probe_role, probe_layers = "all";
  std::optional<int> probe_epochs, probe_hidden;
  std::optional<double> probe_fraction;
  uint64_t probe_seed = 0;
  auto* probe_cmd = app.add_subcommand("probe", "Train layer-wise probes, or run the sanity gate");
  probe_cmd->add_option("mode", probe_mode, "sanity, layers, token or transfer")
      ->required()
      ->check(CLI::IsMember({"sanity", "layers", "token", "transfer"}));
  probe_cmd->add_option("--dataset", probe_dataset, "Harvested dataset name");
  probe_cmd->add_option("--test-dataset", probe_test, "Evaluation dataset for transfer");
  probe_cmd->add_option("--kind", probe_kind, "self or cross")->check(CLI::IsMember({"self", "cross"}));
  probe_cmd->add_option("--role", probe_role, "Token role")->check(
      CLI::IsMember({"edit_word", "article_a", "noun_car"}));
  probe_cmd->add_option("--layers", probe_layers, "all or main")->check(CLI::IsMember({"all", "main"}));
  probe_cmd->add_option("--epochs", probe_epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  probe_cmd->add_option("--hidden", probe_hidden, "Hidden width")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--test-fraction", probe_fraction, "Held-out fraction")->check(CLI::Range(0.0, 0.95));
  probe_cmd->add_option("--seed", probe_seed, "Split, initialization and shuffle seed");

  // benchmark
  std::string bench_dataset, bench_assets, bench_scorer = "clip";
  std::optional<int> bench_limit, bench_colors;
  uint64_t bench_seed = 0;
  EditFlags bench;
  auto* bench_cmd = app.add_subcommand("benchmark", "Run an edit dataset and report CS, CDS and edit time");
  bench_cmd->add_option("--dataset", bench_dataset, "Dataset id")
      ->required()
      ->check(CLI::IsMember({"car_fake", "car_real", "imagenet_fake", "imagenet_real"}));
  bench_cmd->add_option("--assets", bench_assets, "Assets directory");
  bench_cmd->add_option("--limit", bench_limit, "Only the first N pairs")->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--color-limit", bench_colors, "Debug: first N color words")->check(CLI::Range(1, 28));
  bench_cmd->add_option("--base-seed", bench_seed, "Seed of pair 0");
  bench_cmd->add_option("--scorer", bench_scorer, "clip or tiny")->check(CLI::IsMember({"clip", "tiny"}));
  bench_cmd->add_option("--ratio", bench.ratio, "Replace ratio in [0,1]")->check(unit_interval());
  bench_cmd->add_option("--kinds", bench.kinds, "Injected map kinds")->check(kinds_list());
  bench_cmd->add_option("--sites", bench.sites, "Injected sites")->check(sites_spec());
  bench_cmd->add_option("--steps", bench.steps, "DDIM step count")->check(CLI::Range(1, 1000));
  bench_cmd->add_option("--method", bench.method, "fpe or null_text")->check(CLI::IsMember({"fpe", "null_text"}));

  // dataset
  auto* dataset_cmd = app.add_subcommand("dataset", "Build edit datasets and label real car images");
  dataset_cmd->require_subcommand(1);
  std::string ds_id, ds_assets, ds_out, align_scorer = "clip";
  std::optional<int> ds_colors;
  uint64_t ds_seed = 0;
  auto* ds_build = dataset_cmd->add_subcommand("build", "Write a dataset manifest");
  ds_build->add_option("--dataset", ds_id, "Dataset id")
      ->required()
      ->check(CLI::IsMember({"car_fake", "car_real", "imagenet_fake", "imagenet_real"}));
  ds_build->add_option("--assets", ds_assets, "Assets directory");
  ds_build->add_option("--color-limit", ds_colors, "Debug: first N color words")->check(CLI::Range(1, 28));
  ds_build->add_option("--base-seed", ds_seed, "Seed of pair 0");
  ds_build->add_option("--out", ds_out, "Manifest path; defaults to <storage>/manifests/<dataset>.json");
  auto* ds_align = dataset_cmd->add_subcommand("align-colors", "Label car_real.json images with a color word");
  ds_align->add_option("--assets", ds_assets, "Assets directory")->required();
  ds_align->add_option("--scorer", align_scorer, "clip or tiny")->check(CLI::IsMember({"clip", "tiny"}));

  // sites, config, schema, serve
  auto* sites_cmd = app.add_subcommand("sites", "Print the backbone's attention site table");
  auto* config_cmd = app.add_subcommand("config", "Configuration");
  config_cmd->require_subcommand(1);
  auto* config_show = config_cmd->add_subcommand("show", "Print the effective configuration");
  std::string schema_name;
  auto* schema_cmd = app.add_subcommand("schema", "Print the request JSON schemas");
  schema_cmd->add_option("name", schema_name, "One schema: job, edit, sweep, harvest, probe or benchmark");
  std::optional<int> serve_port, serve_workers;
  std::string serve_host;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP job service");
  serve_cmd->add_option("--port", serve_port, "Port")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--host", serve_host, "Bind address");
  serve_cmd->add_option("--workers", serve_workers, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*edit_cmd) {
      return run_local(common, "edit", "edit", edit_request(edit, load_config(common)), edit.out);
    }
    if (*sweep_cmd) {
      json grid = json::object();
      if (!sweep_preset.empty()) grid["preset"] = sweep_preset;
      if (!sweep_ratios.empty()) grid["ratios"] = sweep_ratios;
      if (sweep_preset.empty()) {
        if (sweep_ratios.empty()) throw ValidationError("--ratios is required unless --preset is given");
        json kinds = json::array(), site_sets = json::array();
        for (const auto& k : sweep_kinds) kinds.push_back(kinds_json(k));
        for (const auto& s : sweep_site_sets) site_sets.push_back(sites_json(s));
        const ToolkitConfig cfg = load_config(common);
        if (kinds.empty()) kinds.push_back(cfg.default_policy.to_json()["kinds"]);
        if (site_sets.empty()) site_sets.push_back(sweep.sites.empty() ? cfg.default_policy.to_json()["sites"]
                                                                       : sites_json(sweep.sites));
        grid["kinds"] = kinds;
        grid["site_sets"] = site_sets;
      }
      const json base = edit_request(sweep, load_config(common));
      return run_local(common, "sweep", "sweep", {{"base", base}, {"grid", grid}}, sweep.out);
    }
    if (*harvest_cmd) {
      json req = {{"family", harvest_family},
                  {"seeds", harvest_seeds},
                  {"dataset", harvest_dataset},
                  {"kinds", kinds_json(harvest_kinds)},
                  {"shard_size", harvest_shard}};
      if (!harvest_roles.empty()) req["roles"] = split_csv(harvest_roles);
      if (harvest_steps) req["sampler"] = {{"step_count", *harvest_steps}};
      return run_local(common, "harvest", "harvest", req);
    }
    if (*probe_cmd) {
      json req = {{"mode", probe_mode}, {"seed", probe_seed}};
      if (probe_mode != "sanity") {
        if (probe_dataset.empty()) throw ValidationError("--dataset is required for probe " + probe_mode);
        req["dataset"] = probe_dataset;
        req["kind"] = probe_kind;
        req["layers"] = probe_layers;
        if (!probe_role.empty()) req["role"] = probe_role;
      }
      if (probe_mode == "transfer") {
        if (probe_test.empty()) throw ValidationError("--test-dataset is required for probe transfer");
        req["test_dataset"] = probe_test;
      }
      json classifier = {{"seed", probe_seed}};
      if (probe_epochs) classifier["epochs"] = *probe_epochs;
      if (probe_hidden) classifier["hidden"] = *probe_hidden;
      req["classifier"] = classifier;
      if (probe_fraction) req["split"] = {{"test_fraction", *probe_fraction}, {"seed", probe_seed}};
      if (probe_mode == "sanity") {
        JobService service(load_config(common));
        const JobRecord r = service.run_sync("probe", req);
        if (r.status != JobStatus::done) {
          std::cerr << "error: " << r.error << "\njob log: " << service.store().log_path(r.id).string() << '\n';
          return kExitRuntime;
        }
        std::cout << r.summary.at("line").get<std::string>() << '\n';
        print_line({{"command", "probe sanity"}, {"job", r.id}, {"status", "done"}, {"summary", r.summary}});
        return r.summary.at("pass").get<bool>() ? 0 : kExitRuntime;
      }
      return run_local(common, "probe " + probe_mode, "probe", req);
    }
    if (*bench_cmd) {
      json method = json::object();
      const ToolkitConfig cfg = load_config(common);
      json policy = cfg.default_policy.to_json();
      if (!bench.kinds.empty()) policy["kinds"] = kinds_json(bench.kinds);
      if (!bench.sites.empty()) policy["sites"] = sites_json(bench.sites);
      if (bench.ratio) policy["replace_ratio"] = *bench.ratio;
      method["policy"] = policy;
      method["method"] = bench.method;
      if (bench.steps) method["sampler"] = {{"step_count", *bench.steps}};
      json req = {{"dataset", bench_dataset}, {"base_seed", bench_seed}, {"scorer", bench_scorer}, {"method", method}};
      if (!bench_assets.empty()) req["assets_dir"] = fs::absolute(bench_assets).string();
      if (bench_limit) req["limit"] = *bench_limit;
      if (bench_colors) req["color_limit"] = *bench_colors;
      return run_local(common, "benchmark", "benchmark", req);
    }
    if (*ds_build) {
      const ToolkitConfig cfg = load_config(common);
      DatasetOptions opts;
      opts.color_limit = ds_colors;
      opts.base_seed = ds_seed;
      const DatasetId id = parse_dataset_id(ds_id);
      const fs::path assets = ds_assets.empty() ? cfg.storage_root / "assets" : fs::path(ds_assets);
      const auto pairs = build_dataset(id, assets, opts);
      const fs::path out = ds_out.empty() ? cfg.storage_root / "manifests" / (ds_id + ".json") : fs::path(ds_out);
      fs::create_directories(out.parent_path().empty() ? fs::path(".") : out.parent_path());
      io::write_text_atomic(out, dataset_manifest(id, pairs).dump(2));
      print_line({{"command", "dataset build"}, {"dataset", ds_id}, {"pairs", pairs.size()}, {"manifest", out.string()}});
      return 0;
    }
    if (*ds_align) {
      const fs::path assets = ds_assets;
      const fs::path file = assets / kCarRealAsset;
      json entries = json::parse(io::read_text(file));
      std::unique_ptr<ClipScorer> scorer = align_scorer == "tiny" ? ClipScorer::tiny() : ClipScorer::load(clip_root());
      const auto colors = words::edit_colors();
      int labeled = 0;
      for (auto& e : entries) {
        if (e.contains("color")) continue;
        e["color"] = align_car_color(*scorer, read_image(assets / e.at("image").get<std::string>()), colors);
        ++labeled;
      }
      io::write_text_atomic(file, entries.dump(2));
      print_line({{"command", "dataset align-colors"}, {"labeled", labeled}, {"encoder", scorer->id()}});
      return 0;
    }
    if (*sites_cmd) {
      const ToolkitConfig cfg = load_config(common);
      JobService service(cfg);
      const json table = service.sites(cfg.backbone_id);
      std::printf("%-6s %-5s %-6s %8s %8s %6s %6s\n", "index", "kind", "block", "query", "key", "heads", "grid");
      for (const auto& s : table["sites"]) {
        const std::string grid = std::to_string(s["grid_h"].get<int>()) + "x" + std::to_string(s["grid_w"].get<int>());
        std::printf("%-6d %-5s %-6s %8lld %8lld %6d %6s\n", s["index"].get<int>(),
                    s["kind"].get<std::string>().c_str(), s["block"].get<std::string>().c_str(),
                    static_cast<long long>(s["spatial_len"].get<int64_t>()),
                    static_cast<long long>(s["context_len"].get<int64_t>()), s["heads"].get<int>(), grid.c_str());
      }
      print_line({{"command", "sites"}, {"backbone", cfg.backbone_id}, {"count", table["sites"].size()}});
      return 0;
    }
    if (*config_show) {
      std::cout << load_config(common).show();
      return 0;
    }
    if (*schema_cmd) {
      if (schema_name.empty()) {
        std::cout << api_schemas().dump(2) << '\n';
      } else {
        const json& all = api_schemas()["schemas"];
        if (!all.contains(schema_name)) throw ValidationError("unknown schema '" + schema_name + "'");
        std::cout << all[schema_name].dump(2) << '\n';
      }
      return 0;
    }
    if (*serve_cmd) {
      ToolkitConfig cfg = load_config(common);
      if (serve_port) cfg.port = *serve_port;
      if (!serve_host.empty()) cfg.host = serve_host;
      if (serve_workers) cfg.workers = *serve_workers;
      JobService service(cfg);
      service.start();
      HttpApi api(service);
      g_api = &api;
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      print_line({{"command", "serve"}, {"host", cfg.host}, {"port", cfg.port}, {"storage_root", cfg.storage_root}});
      api.listen(cfg.host, cfg.port);
      g_api = nullptr;
      service.stop();
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
