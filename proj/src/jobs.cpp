// SPDX-License-Identifier: Apache-2.0
#include "fpe/jobs.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <sstream>

#include "fpe/editing.hpp"
#include "fpe/eval.hpp"
#include "fpe/io.hpp"
#include "fpe/probing.hpp"

namespace fpe {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  if (!(is >> out) || !is.eof()) throw ValidationError(key + " expects a number, got '" + value + "'");
  return out;
}

std::string sites_text(const std::optional<std::set<int>>& sites) {
  if (!sites) return "all";
  if (sites->empty()) return "";
  const int lo = *sites->begin(), hi = *sites->rbegin();
  if (static_cast<int>(sites->size()) == hi - lo + 1) return std::to_string(lo) + "-" + std::to_string(hi);
  std::string s;
  for (int i : *sites) s += (s.empty() ? "" : ",") + std::to_string(i);
  return s;
}

}  // namespace

ToolkitConfig ToolkitConfig::defaults() { return ToolkitConfig{}; }

void ToolkitConfig::set(const std::string& key, const std::string& value) {
  if (key == "backbone_id") {
    backbone_id = value;
  } else if (key == "device_hint") {
    device_hint = value;
  } else if (key == "storage_root") {
    storage_root = value;
  } else if (key == "host") {
    host = value;
  } else if (key == "port") {
    port = parse_number<int>(key, value);
  } else if (key == "workers") {
    workers = parse_number<int>(key, value);
  } else if (key == "queue_capacity") {
    queue_capacity = parse_number<int>(key, value);
  } else if (key == "memory_budget_mb") {
    memory_budget_mb = parse_number<int64_t>(key, value);
  } else if (key == "max_age_days") {
    max_age_days = parse_number<int>(key, value);
  } else if (key == "sampler.step_count") {
    sampler.step_count = parse_number<int>(key, value);
  } else if (key == "sampler.guidance_scale") {
    sampler.guidance_scale = parse_number<float>(key, value);
  } else if (key == "sampler.eta") {
    sampler.eta = parse_number<float>(key, value);
  } else if (key == "sampler.seed") {
    sampler.seed = parse_number<uint64_t>(key, value);
  } else if (key == "policy.kinds") {
    default_policy.kinds.clear();
    std::istringstream is(value);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (!item.empty() && item != "none") default_policy.kinds.insert(parse_attn_kind(item));
    }
  } else if (key == "policy.sites") {
    json sites = value;
    if (value.find(',') != std::string::npos) {
      sites = json::array();
      std::istringstream is(value);
      std::string item;
      while (std::getline(is, item, ',')) sites.push_back(parse_number<int>(key, trim(item)));
    } else if (value != "all" && value.find('-') == std::string::npos) {
      sites = json::array({parse_number<int>(key, value)});
    }
    default_policy.sites = InjectionPolicy::from_json({{"sites", sites}}).sites;
  } else if (key == "policy.replace_ratio") {
    default_policy.replace_ratio = parse_number<double>(key, value);
  } else {
    throw ValidationError("unknown config key '" + key + "'");
  }
}

ToolkitConfig ToolkitConfig::parse(const std::string& text, const std::string& origin) {
  ToolkitConfig c;
  std::istringstream lines(text);
  std::string line;
  int number = 0;
  while (std::getline(lines, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(origin + ":" + std::to_string(number) + ": expected key = value");
    }
    try {
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return c;
}

ToolkitConfig ToolkitConfig::load(const fs::path& path) {
  ToolkitConfig c = path.empty() ? defaults() : parse(io::read_text(path), path.string());
  if (const char* root = std::getenv("FPE_STORAGE_ROOT"); root && *root) c.storage_root = root;
  c.validate();
  return c;
}

void ToolkitConfig::validate() const {
  if (backbone_id.empty()) throw ValidationError("backbone_id must not be empty");
  if (port < 1 || port > 65535) throw ValidationError("port must be in range [1,65535]");
  if (workers < 1) throw ValidationError("workers must be >= 1");
  if (queue_capacity < 1) throw ValidationError("queue_capacity must be >= 1");
  if (memory_budget_mb < 0) throw ValidationError("memory_budget_mb must be >= 0");
  if (max_age_days < 0) throw ValidationError("max_age_days must be >= 0");
  sampler.validate();
  default_policy.validate();
}

std::string ToolkitConfig::show() const {
  std::ostringstream os;
  std::string kinds;
  for (auto k : default_policy.kinds) kinds += (kinds.empty() ? "" : ",") + to_string(k);
  os << "backbone_id = " << backbone_id << '\n'
     << "device_hint = " << device_hint << '\n'
     << "storage_root = " << storage_root.string() << '\n'
     << "host = " << host << '\n'
     << "port = " << port << '\n'
     << "workers = " << workers << '\n'
     << "queue_capacity = " << queue_capacity << '\n'
     << "memory_budget_mb = " << memory_budget_mb << '\n'
     << "max_age_days = " << max_age_days << '\n'
     << "sampler.step_count = " << sampler.step_count << '\n'
     << "sampler.guidance_scale = " << sampler.guidance_scale << '\n'
     << "sampler.eta = " << sampler.eta << '\n'
     << "sampler.seed = " << sampler.seed << '\n'
     << "policy.kinds = " << (kinds.empty() ? "none" : kinds) << '\n'
     << "policy.sites = " << sites_text(default_policy.sites) << '\n'
     << "policy.replace_ratio = " << default_policy.replace_ratio << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Schema validation

namespace {

std::string escape_pointer(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~') {
      out += "~0";
    } else if (c == '/') {
      out += "~1";
    } else {
      out += c;
    }
  }
  return out;
}

bool type_matches(const std::string& type, const json& doc) {
  if (type == "object") return doc.is_object();
  if (type == "array") return doc.is_array();
  if (type == "string") return doc.is_string();
  if (type == "boolean") return doc.is_boolean();
  if (type == "null") return doc.is_null();
  if (type == "integer") return doc.is_number_integer();
  if (type == "number") return doc.is_number();
  return false;
}

const json& resolve_ref(const json& root, const std::string& ref) {
  const std::string prefix = "#/$defs/";
  if (!ref.starts_with(prefix)) throw Error("unsupported schema reference " + ref);
  return root.at("$defs").at(ref.substr(prefix.size()));
}

std::optional<SchemaError> check(const json& root, const json& schema, const json& doc, const std::string& ptr) {
  if (schema.contains("$ref")) return check(root, resolve_ref(root, schema["$ref"]), doc, ptr);
  if (schema.contains("anyOf")) {
    bool any = false;
    for (const auto& alt : schema["anyOf"]) {
      if (!check(root, alt, doc, ptr)) {
        any = true;
        break;
      }
    }
    if (!any) return SchemaError{ptr, "value does not match any allowed form"};
  }
  if (schema.contains("type")) {
    const json& t = schema["type"];
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(t, doc);
    } else {
      for (const auto& alt : t) ok = ok || type_matches(alt, doc);
    }
    if (!ok) return SchemaError{ptr, "expected " + (t.is_string() ? t.get<std::string>() : t.dump())};
  }
  if (schema.contains("const") && doc != schema["const"]) {
    return SchemaError{ptr, "must equal " + schema["const"].dump()};
  }
  if (schema.contains("enum")) {
    const auto& e = schema["enum"];
    if (std::find(e.begin(), e.end(), doc) == e.end()) return SchemaError{ptr, "must be one of " + e.dump()};
  }
  if (doc.is_number()) {
    const double v = doc.get<double>();
    if (schema.contains("minimum") && v < schema["minimum"].get<double>()) {
      return SchemaError{ptr, "must be >= " + schema["minimum"].dump()};
    }
    if (schema.contains("maximum") && v > schema["maximum"].get<double>()) {
      return SchemaError{ptr, "must be <= " + schema["maximum"].dump()};
    }
    if (schema.contains("exclusiveMinimum") && v <= schema["exclusiveMinimum"].get<double>()) {
      return SchemaError{ptr, "must be > " + schema["exclusiveMinimum"].dump()};
    }
  }
  if (doc.is_string() && schema.contains("minLength") &&
      doc.get<std::string>().size() < schema["minLength"].get<size_t>()) {
    return SchemaError{ptr, "must have at least " + schema["minLength"].dump() + " characters"};
  }
  if (doc.is_array()) {
    if (schema.contains("minItems") && doc.size() < schema["minItems"].get<size_t>()) {
      return SchemaError{ptr, "must have at least " + schema["minItems"].dump() + " items"};
    }
    if (schema.value("uniqueItems", false)) {
      for (size_t i = 0; i < doc.size(); ++i) {
        for (size_t j = 0; j < i; ++j) {
          if (doc[i] == doc[j]) return SchemaError{ptr + "/" + std::to_string(i), "duplicate item"};
        }
      }
    }
    if (schema.contains("items")) {
      for (size_t i = 0; i < doc.size(); ++i) {
        if (auto e = check(root, schema["items"], doc[i], ptr + "/" + std::to_string(i))) return e;
      }
    }
  }
  if (doc.is_object()) {
    if (schema.contains("required")) {
      for (const auto& r : schema["required"]) {
        if (!doc.contains(r.get<std::string>())) {
          return SchemaError{ptr + "/" + escape_pointer(r), "required property is missing"};
        }
      }
    }
    const json props = schema.value("properties", json::object());
    const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"] == false;
    for (const auto& [key, value] : doc.items()) {
      const std::string child = ptr + "/" + escape_pointer(key);
      if (props.contains(key)) {
        if (auto e = check(root, props[key], value, child)) return e;
      } else if (closed) {
        return SchemaError{child, "unknown property"};
      }
    }
  }
  return std::nullopt;
}

json make_schemas() {
  const json defs = json::parse(R"JSON({
    "source": {
      "type": "object", "additionalProperties": false, "required": ["type"],
      "properties": {
        "type": {"enum": ["seeded_prompt", "real_image"]},
        "seed": {"type": "integer", "minimum": 0},
        "prompt": {"type": "string"},
        "path": {"type": "string"}
      }
    },
    "sampler": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "step_count": {"type": "integer", "minimum": 1, "maximum": 1000},
        "guidance_scale": {"type": "number", "minimum": 0},
        "eta": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "schedule_id": {"type": "string"}
      }
    },
    "policy": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "kinds": {"type": "array", "uniqueItems": true, "items": {"enum": ["self", "cross"]}},
        "sites": {"anyOf": [
          {"type": "string", "minLength": 1},
          {"type": "array", "items": {"type": "integer", "minimum": 1}}
        ]},
        "replace_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "cross_replace_ratio": {"anyOf": [{"type": "number", "minimum": 0, "maximum": 1}, {"type": "null"}]},
        "token_map": {"anyOf": [{"type": "array", "items": {"type": "integer", "minimum": 0}}, {"type": "null"}]},
        "label": {"type": "string"}
      }
    },
    "null_text": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "iterations": {"type": "integer", "minimum": 0},
        "step_size": {"type": "number", "exclusiveMinimum": 0},
        "early_stop": {"type": "number", "minimum": 0},
        "divergence_threshold": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "edit": {
      "type": "object", "additionalProperties": false, "required": ["source", "target_prompt"],
      "properties": {
        "backbone": {"type": "string", "minLength": 1},
        "source": {"$ref": "#/$defs/source"},
        "target_prompt": {"type": "string"},
        "sampler": {"$ref": "#/$defs/sampler"},
        "policy": {"$ref": "#/$defs/policy"},
        "method": {"enum": ["fpe", "null_text"]},
        "null_text": {"$ref": "#/$defs/null_text"},
        "source_prompt_for_reconstruction": {"type": "boolean"},
        "heatmaps": {"type": "boolean"}
      }
    },
    "grid": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "preset": {"enum": ["paper_modes"]},
        "ratios": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "cells": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/policy"}},
        "columns": {"type": "integer", "minimum": 0},
        "kinds": {"type": "array", "minItems": 1, "items": {"anyOf": [
          {"enum": ["self", "cross"]},
          {"type": "array", "uniqueItems": true, "items": {"enum": ["self", "cross"]}}
        ]}},
        "site_sets": {"type": "array", "minItems": 1, "items": {"anyOf": [
          {"type": "string", "minLength": 1},
          {"type": "array", "items": {"type": "integer", "minimum": 1}}
        ]}}
      }
    },
    "split": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "test_fraction": {"type": "number", "minimum": 0, "maximum": 0.95},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "classifier": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "hidden": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "dataset_name": {"type": "string", "minLength": 1}
  })JSON");
  const json bodies = json::parse(R"JSON({
    "job": {
      "type": "object", "additionalProperties": false, "required": ["kind", "request"],
      "properties": {
        "kind": {"enum": ["edit", "sweep", "harvest", "probe", "benchmark"]},
        "request": {"type": "object"},
        "idempotency_key": {"type": "string", "minLength": 1},
        "priority": {"type": "integer"}
      }
    },
    "edit": {"$ref": "#/$defs/edit"},
    "sweep": {
      "type": "object", "additionalProperties": false, "required": ["base", "grid"],
      "properties": {
        "base": {"$ref": "#/$defs/edit"},
        "grid": {"$ref": "#/$defs/grid"},
        "idempotency_key": {"type": "string", "minLength": 1},
        "priority": {"type": "integer"}
      }
    },
    "harvest": {
      "type": "object", "additionalProperties": false, "required": ["family", "seeds", "dataset"],
      "properties": {
        "backbone": {"type": "string", "minLength": 1},
        "family": {"enum": ["color_car", "color_object", "animal_park", "complex_color", "token_probe"]},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "kinds": {"type": "array", "minItems": 1, "uniqueItems": true, "items": {"enum": ["self", "cross"]}},
        "roles": {"type": "array", "uniqueItems": true, "items": {"enum": ["edit_word", "article_a", "noun_car"]}},
        "sampler": {"$ref": "#/$defs/sampler"},
        "shard_size": {"type": "integer", "minimum": 1},
        "dataset": {"$ref": "#/$defs/dataset_name"}
      }
    },
    "probe": {
      "type": "object", "additionalProperties": false, "required": ["mode"],
      "properties": {
        "mode": {"enum": ["sanity", "layers", "token", "transfer"]},
        "dataset": {"$ref": "#/$defs/dataset_name"},
        "test_dataset": {"$ref": "#/$defs/dataset_name"},
        "kind": {"enum": ["self", "cross"]},
        "role": {"enum": ["edit_word", "article_a", "noun_car"]},
        "layers": {"enum": ["all", "main"]},
        "split": {"$ref": "#/$defs/split"},
        "classifier": {"$ref": "#/$defs/classifier"},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "benchmark": {
      "type": "object", "additionalProperties": false, "required": ["dataset"],
      "properties": {
        "backbone": {"type": "string", "minLength": 1},
        "dataset": {"enum": ["car_fake", "car_real", "imagenet_fake", "imagenet_real"]},
        "assets_dir": {"type": "string"},
        "limit": {"type": "integer", "minimum": 0},
        "color_limit": {"type": "integer", "minimum": 1, "maximum": 28},
        "base_seed": {"type": "integer", "minimum": 0},
        "scorer": {"enum": ["clip", "tiny"]},
        "method": {
          "type": "object", "additionalProperties": false,
          "properties": {
            "sampler": {"$ref": "#/$defs/sampler"},
            "policy": {"$ref": "#/$defs/policy"},
            "method": {"enum": ["fpe", "null_text"]},
            "null_text": {"$ref": "#/$defs/null_text"},
            "source_prompt_for_reconstruction": {"type": "boolean"}
          }
        }
      }
    }
  })JSON");
  json out = {{"version", kSchemaVersion}, {"schemas", json::object()}};
  for (const auto& [name, body] : bodies.items()) {
    json s = body;
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema";
    s["$id"] = "fpe:" + name + ":v" + std::to_string(kSchemaVersion);
    s["$defs"] = defs;
    out["schemas"][name] = s;
  }
  return out;
}

}  // namespace

std::optional<SchemaError> validate_schema(const json& schema, const json& doc) {
  return check(schema, schema, doc, "");
}

const json& api_schemas() {
  static const json schemas = make_schemas();
  return schemas;
}

const json& request_schema(const std::string& kind) {
  const json& all = api_schemas().at("schemas");
  if (kind == "job" || !all.contains(kind)) throw ValidationError("unknown job kind '" + kind + "'");
  return all.at(kind);
}

// ---------------------------------------------------------------------------
// Job execution

std::function<std::shared_ptr<const ModelAdapter>(const std::string&)> cached_backbone_loader(
    const std::string& device_hint) {
  struct Cache {
    std::mutex mutex;
    std::map<std::string, std::shared_ptr<const ModelAdapter>> models;
  };
  auto cache = std::make_shared<Cache>();
  return [cache, device_hint](const std::string& id) {
    std::lock_guard lock(cache->mutex);
    auto it = cache->models.find(id);
    if (it != cache->models.end()) return it->second;
    std::shared_ptr<const ModelAdapter> model = load_backbone(id, device_hint);
    cache->models.emplace(id, model);
    return model;
  };
}

EditJob edit_job_from_request(const json& request, const ToolkitConfig& config) {
  json merged = request;
  json sampler = config.sampler.to_json();
  if (request.contains("sampler")) sampler.update(request["sampler"]);
  merged["sampler"] = sampler;
  if (!request.contains("policy")) merged["policy"] = config.default_policy.to_json();
  merged.erase("backbone");
  return EditJob::from_json(merged);
}

namespace {

void require_valid(const std::string& kind, const json& request) {
  if (auto err = validate_schema(request_schema(kind), request)) {
    throw ValidationError((err->pointer.empty() ? "/" : err->pointer) + ": " + err->message);
  }
}

std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path dataset_dir(const ToolkitConfig& config, const std::string& name) {
  if (name.find("..") != std::string::npos || name.find('/') != std::string::npos ||
      name.find('\\') != std::string::npos) {
    throw ValidationError("dataset names may not contain path separators or '..', got '" + name + "'");
  }
  return config.storage_root / "datasets" / name;
}

std::string backbone_of(const json& request, const ToolkitConfig& config) {
  return request.value("backbone", config.backbone_id);
}

JobResult run_edit_request(const json& request, const fs::path& out_dir, const JobContext& ctx) {
  const EditJob job = edit_job_from_request(request, ctx.config);
  const auto model = ctx.backbone(backbone_of(request, ctx.config));
  const json manifest = run_edit_job(*model, job, out_dir);
  return {manifest.at("artifacts").get<std::vector<std::string>>(),
          {{"latent_distance", manifest.at("latent_distance")}, {"timings", manifest.at("timings")}}};
}

JobResult run_sweep_request(const json& request, const fs::path& out_dir, const JobContext& ctx) {
  const EditJob base = edit_job_from_request(request.at("base"), ctx.config);
  const SweepSpec grid = SweepSpec::from_json(request.at("grid"));
  const auto model = ctx.backbone(backbone_of(request.at("base"), ctx.config));
  const SweepResult result = ablation_sweep(*model, base, grid, out_dir);
  int failed = 0;
  for (const auto& c : result.cells) failed += !c.has_value();
  return {list_files(out_dir), {{"cells", result.cells.size()}, {"failed_cells", failed}}};
}

JobResult run_harvest_request(const json& request, const fs::path& out_dir, const JobContext& ctx) {
  const auto model = ctx.backbone(backbone_of(request, ctx.config));
  const PromptCorpus corpus = build_corpus(parse_corpus_family(request.at("family")),
                                           request.at("seeds").get<std::vector<uint64_t>>(), model->tokenizer());
  HarvestOptions opts;
  if (request.contains("kinds")) {
    opts.kinds.clear();
    for (const auto& k : request["kinds"]) opts.kinds.insert(parse_attn_kind(k));
  }
  if (request.contains("roles")) {
    opts.roles.clear();
    for (const auto& r : request["roles"]) opts.roles.insert(parse_token_role(r));
  }
  json sampler = ctx.config.sampler.to_json();
  if (request.contains("sampler")) sampler.update(request["sampler"]);
  opts.sampler = SamplerConfig::from_json(sampler);
  opts.shard_size = request.value("shard_size", opts.shard_size);
  const fs::path dir = dataset_dir(ctx.config, request.at("dataset"));
  const HarvestSummary s = harvest(corpus, *model, opts, dir);
  const json summary = {{"dataset", request.at("dataset")}, {"path", dir.string()},    {"total", s.total},
                        {"completed", s.completed},        {"skipped", s.skipped}, {"resumed_shards", s.resumed_shards}};
  fs::create_directories(out_dir);
  io::write_text_atomic(out_dir / "harvest.json", summary.dump(2));
  return {{"harvest.json"}, summary};
}

JobResult run_probe_request(const json& request, const fs::path& out_dir, const JobContext& ctx) {
  fs::create_directories(out_dir);
  ProbeConfig clf;
  if (request.contains("classifier")) {
    const json& c = request["classifier"];
    clf.hidden = c.value("hidden", clf.hidden);
    clf.epochs = c.value("epochs", clf.epochs);
    clf.batch = c.value("batch", clf.batch);
    clf.learning_rate = c.value("learning_rate", clf.learning_rate);
    clf.seed = c.value("seed", clf.seed);
  }
  SplitSpec split;
  if (request.contains("split")) {
    split.test_fraction = request["split"].value("test_fraction", split.test_fraction);
    split.seed = request["split"].value("seed", split.seed);
  }
  const std::string mode = request.at("mode");
  if (mode == "sanity") {
    const SanityResult r = probe_sanity_gate(clf, request.value("seed", uint64_t{0}));
    const json summary = {{"pass", r.pass()},
                          {"planted_per_class", r.planted_per_class},
                          {"planted_ok", r.planted_ok},
                          {"shuffled_mean", r.shuffled_mean},
                          {"shuffled_ok", r.shuffled_ok},
                          {"line", r.summary()},
                          {"classifier", clf.to_json()}};
    io::write_text_atomic(out_dir / "sanity.json", summary.dump(2));
    return {{"sanity.json"}, summary};
  }
  if (!request.contains("dataset")) throw ValidationError("/dataset: required for probe mode " + mode);
  const ProbeDataset ds = ProbeDataset::open(dataset_dir(ctx.config, request["dataset"]));
  const AttnKind kind = parse_attn_kind(request.value("kind", "cross"));
  ProbeReport report;
  if (mode == "layers") {
    report = probe_layers(ds, kind, parse_token_role(request.value("role", "edit_word")), split, clf);
  } else if (mode == "token") {
    report = token_probe(ds, parse_token_role(request.value("role", "article_a")), split, clf);
  } else {
    if (!request.contains("test_dataset")) throw ValidationError("/test_dataset: required for probe mode transfer");
    const ProbeDataset test = ProbeDataset::open(dataset_dir(ctx.config, request["test_dataset"]));
    report = transfer_report(ds, test, kind, split, clf);
  }
  const std::vector<int> subset =
      request.value("layers", "all") == "main" ? ProbeReport::main_text_layers() : std::vector<int>{};
  io::write_text_atomic(out_dir / "report.csv", report.to_csv(subset));
  io::write_text_atomic(out_dir / "report.txt", report.to_table(subset));
  io::write_text_atomic(out_dir / "report_full.csv", report.to_csv());
  io::write_text_atomic(out_dir / "report_full.txt", report.to_table());
  json meta = report.metadata;
  meta["layers"] = report.layers;
  meta["dataset_complete"] = ds.complete();
  io::write_text_atomic(out_dir / "report.json", meta.dump(2));
  return {{"report.csv", "report.txt", "report_full.csv", "report_full.txt", "report.json"},
          {{"layers", report.layers}, {"table", report.to_table(subset)}}};
}

JobResult run_benchmark_request(const json& request, const fs::path& out_dir, const JobContext& ctx) {
  DatasetOptions dopts;
  if (request.contains("color_limit")) dopts.color_limit = request["color_limit"].get<int>();
  dopts.base_seed = request.value("base_seed", uint64_t{0});
  const DatasetId id = parse_dataset_id(request.at("dataset"));
  const auto pairs = build_dataset(id, request.value("assets_dir", (ctx.config.storage_root / "assets").string()), dopts);
  json method = request.value("method", json::object());
  method["source"] = {{"type", "seeded_prompt"}};
  method["target_prompt"] = "";
  const EditJob tmpl = edit_job_from_request(method, ctx.config);
  const auto model = ctx.backbone(backbone_of(request, ctx.config));
  std::unique_ptr<ClipScorer> scorer =
      request.value("scorer", "clip") == "tiny" ? ClipScorer::tiny() : ClipScorer::load(clip_root());
  BenchmarkOptions bopts;
  if (request.contains("limit")) bopts.limit = request["limit"].get<int>();
  bopts.out_dir = out_dir;
  const MetricTable table = benchmark_run(*model, *scorer, pairs, tmpl, bopts);
  io::write_text_atomic(out_dir / "summary.txt", table.summary());
  io::write_text_atomic(out_dir / "dataset.json", dataset_manifest(id, pairs).dump(2));
  return {list_files(out_dir), table.summary_json()};
}

}  // namespace

JobResult run_job(const std::string& kind, const json& request, const fs::path& out_dir, const JobContext& ctx) {
  require_valid(kind, request);
  if (kind == "edit") return run_edit_request(request, out_dir, ctx);
  if (kind == "sweep") return run_sweep_request(request, out_dir, ctx);
  if (kind == "harvest") return run_harvest_request(request, out_dir, ctx);
  if (kind == "probe") return run_probe_request(request, out_dir, ctx);
  return run_benchmark_request(request, out_dir, ctx);
}

int64_t estimate_job_bytes(const std::string& kind, const json& request, const ModelAdapter* model) {
  constexpr int64_t kBase = 64ll << 20;
  if (!model) return kBase;
  auto map_bytes = [&](const std::set<AttnKind>& kinds) {
    int64_t total = 0;
    for (const auto& s : model->sites()) {
      if (kinds.count(s.kind)) total += int64_t{s.heads} * s.spatial_len * s.context_len * 4;
    }
    return total;
  };
  const int64_t latent = shape_numel(model->latent_shape()) * 4;
  if (kind == "edit" || kind == "sweep" || kind == "benchmark") {
    // Rolling store for both guidance branches plus trajectories.
    return kBase + 2 * map_bytes({AttnKind::self, AttnKind::cross}) + 64 * latent;
  }
  if (kind == "harvest") {
    std::set<AttnKind> kinds;
    for (const auto& k : request.value("kinds", json::array({"cross"}))) kinds.insert(parse_attn_kind(k));
    return kBase + 2 * map_bytes(kinds);  // double-precision step-mean sums
  }
  return kBase;
}

}  // namespace fpe
