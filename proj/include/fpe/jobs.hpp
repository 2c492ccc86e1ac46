// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpe/attention.hpp"
#include "fpe/backend.hpp"
#include "fpe/editing.hpp"

namespace fpe {

/// Toolkit-wide settings. Loaded from a plain-text `key = value` file
/// (`#` starts a comment); FPE_STORAGE_ROOT overrides storage_root.
struct ToolkitConfig {
  std::string backbone_id = "tiny-test";
  std::string device_hint = "cpu";
  InjectionPolicy default_policy = InjectionPolicy::fpe_default();
  SamplerConfig sampler;
  std::filesystem::path storage_root = "fpe_storage";
  std::string host = "127.0.0.1";
  int port = 8321;
  int workers = 1;
  int queue_capacity = 64;
  // Jobs whose estimated footprint exceeds the remaining budget wait for
  // running jobs to finish; 0 disables the check.
  int64_t memory_budget_mb = 0;
  // Finished jobs older than this are pruned at startup; 0 keeps everything.
  int max_age_days = 0;

  static ToolkitConfig defaults();
  // Defaults, then `path` when non-empty, then the environment.
  static ToolkitConfig load(const std::filesystem::path& path = {});
  static ToolkitConfig parse(const std::string& text, const std::string& origin = "config");
  void set(const std::string& key, const std::string& value);
  void validate() const;
  // Every key in the file format, one `key = value` per line.
  std::string show() const;
};

/// Failure of a JSON document against a schema; `pointer` is the RFC 6901
/// path of the offending value.
struct SchemaError {
  std::string pointer;
  std::string message;
};

// Validates against the subset of JSON Schema the toolkit's schemas use:
// type, properties, required, additionalProperties, enum, const, minimum,
// maximum, exclusiveMinimum, minLength, items, minItems, uniqueItems, anyOf
// and $ref into "$defs". Returns the first error in document order.
std::optional<SchemaError> validate_schema(const nlohmann::json& schema, const nlohmann::json& doc);

// Versioned request schemas keyed by name: job, edit, sweep, harvest, probe,
// benchmark.
const nlohmann::json& api_schemas();
inline constexpr int kSchemaVersion = 1;
// Schema for `kind` requests; throws ValidationError for unknown kinds.
const nlohmann::json& request_schema(const std::string& kind);

/// Everything a job needs besides its request.
struct JobContext {
  ToolkitConfig config;
  std::function<std::shared_ptr<const ModelAdapter>(const std::string& backbone_id)> backbone;
};

// Loads backbones through load_backbone, caching one adapter per id.
std::function<std::shared_ptr<const ModelAdapter>(const std::string&)> cached_backbone_loader(
    const std::string& device_hint);

struct JobResult {
  std::vector<std::string> artifacts;  // names relative to the output directory
  nlohmann::json summary;
};

// Validates `request` against the schema for `kind` and runs it, writing
// artifacts into `out_dir`. Schema violations raise ValidationError whose
// message starts with the JSON pointer.
JobResult run_job(const std::string& kind, const nlohmann::json& request, const std::filesystem::path& out_dir,
                  const JobContext& ctx);

// Edit request with defaults from the config filled in.
EditJob edit_job_from_request(const nlohmann::json& request, const ToolkitConfig& config);

// Rough peak memory of a job in bytes, used for dispatch decisions.
int64_t estimate_job_bytes(const std::string& kind, const nlohmann::json& request, const ModelAdapter* model);

}  // namespace fpe
