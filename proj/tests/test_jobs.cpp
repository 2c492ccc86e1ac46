// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <functional>

#include <json.hpp>

#include "fpe/io.hpp"
#include "fpe/jobs.hpp"
#include "support.hpp"

using namespace fpe;
using fpe::test::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

JobContext tiny_context(const fs::path& root) {
  JobContext ctx;
  ctx.config = ToolkitConfig::defaults();
  ctx.config.storage_root = root;
  ctx.config.sampler.step_count = 3;
  ctx.backbone = [](const std::string& id) -> std::shared_ptr<const ModelAdapter> {
    if (id != "tiny-test") throw ValidationError("unknown backbone " + id);
    return fpe::test::tiny_shared();
  };
  return ctx;
}

json minimal_edit() {
  return {{"source", {{"type", "seeded_prompt"}, {"seed", 3}, {"prompt", "a photo of a sheep"}}},
          {"target_prompt", "a photo of a leopard"}};
}

// Walks a schema and calls `fn` on every "$ref" string.
void each_ref(const json& j, const std::function<void(const std::string&)>& fn) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      if (k == "$ref") fn(v.get<std::string>());
      each_ref(v, fn);
    }
  } else if (j.is_array()) {
    for (const auto& v : j) each_ref(v, fn);
  }
}

}  // namespace

TEST_CASE("config defaults") {
  const ToolkitConfig c = ToolkitConfig::defaults();
  CHECK_NOTHROW(c.validate());
  CHECK(c.backbone_id == "tiny-test");
  CHECK(c.sampler.step_count == 50);
  CHECK(c.sampler.guidance_scale == doctest::Approx(7.5));
  CHECK(c.default_policy.kinds == std::set<AttnKind>{AttnKind::self});
  CHECK(c.default_policy.replace_ratio == doctest::Approx(0.6));
}

TEST_CASE("config text round trip") {
  const std::string text =
      "# service settings\n"
      "backbone_id = sd15\n"
      "port = 9000   # inline comment\n"
      "\n"
      "workers = 2\n"
      "queue_capacity = 5\n"
      "memory_budget_mb = 4096\n"
      "sampler.step_count = 20\n"
      "sampler.guidance_scale = 5\n"
      "sampler.seed = 11\n"
      "policy.kinds = self,cross\n"
      "policy.sites = 4-8\n"
      "policy.replace_ratio = 0.4\n";
  const ToolkitConfig c = ToolkitConfig::parse(text);
  CHECK(c.backbone_id == "sd15");
  CHECK(c.port == 9000);
  CHECK(c.workers == 2);
  CHECK(c.queue_capacity == 5);
  CHECK(c.memory_budget_mb == 4096);
  CHECK(c.sampler.step_count == 20);
  CHECK(c.sampler.seed == 11);
  CHECK(c.default_policy.kinds.size() == 2);
  CHECK(c.default_policy.sites == std::set<int>{4, 5, 6, 7, 8});
  CHECK(c.default_policy.replace_ratio == doctest::Approx(0.4));
  const ToolkitConfig again = ToolkitConfig::parse(c.show());
  CHECK(again.show() == c.show());

  const ToolkitConfig none = ToolkitConfig::parse("policy.kinds = none\n");
  CHECK(none.default_policy.kinds.empty());
}

TEST_CASE("config errors name the line") {
  CHECK_THROWS_WITH_AS(ToolkitConfig::parse("port = 80\nworkers two\n", "svc.conf"),
                       doctest::Contains("svc.conf:2:"), ValidationError);
  CHECK_THROWS_WITH_AS(ToolkitConfig::parse("\n\ncolour = red\n", "svc.conf"), doctest::Contains("svc.conf:3:"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(ToolkitConfig::parse("port = eighty\n"), doctest::Contains("port"), ValidationError);
  CHECK_THROWS_AS(ToolkitConfig::parse("policy.kinds = both\n"), ValidationError);
  ToolkitConfig c;
  c.port = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = ToolkitConfig::defaults();
  c.sampler.step_count = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("config file and environment") {
  TempDir dir("config");
  io::write_text_atomic(dir.path() / "fpe.conf", "storage_root = /from/file\nport = 7000\n");
  ::unsetenv("FPE_STORAGE_ROOT");
  CHECK(ToolkitConfig::load(dir.path() / "fpe.conf").storage_root == "/from/file");
  ::setenv("FPE_STORAGE_ROOT", "/from/env", 1);
  const ToolkitConfig c = ToolkitConfig::load(dir.path() / "fpe.conf");
  ::unsetenv("FPE_STORAGE_ROOT");
  CHECK(c.storage_root == "/from/env");
  CHECK(c.port == 7000);
  io::write_text_atomic(dir.path() / "bad.conf", "workers = 0\n");
  CHECK_THROWS_AS(ToolkitConfig::load(dir.path() / "bad.conf"), ValidationError);
}

TEST_CASE("schemas are versioned and self-contained") {
  const json& all = api_schemas();
  CHECK(all.at("version") == kSchemaVersion);
  for (const char* name : {"job", "edit", "sweep", "harvest", "probe", "benchmark"}) {
    CAPTURE(name);
    const json& s = all.at("schemas").at(name);
    CHECK(s.at("$schema") == "https://json-schema.org/draft/2020-12/schema");
    CHECK(s.at("$id") == std::string("fpe:") + name + ":v1");
    each_ref(s, [&](const std::string& ref) {
      REQUIRE(ref.rfind("#/$defs/", 0) == 0);
      CHECK(s.at("$defs").contains(ref.substr(8)));
    });
  }
  CHECK(&request_schema("edit") == &all["schemas"]["edit"]);
  CHECK_THROWS_AS(request_schema("job"), ValidationError);
  CHECK_THROWS_AS(request_schema("render"), ValidationError);
}

TEST_CASE("valid requests pass their schemas") {
  const json edit = minimal_edit();
  CHECK_FALSE(validate_schema(request_schema("edit"), edit));
  json full = edit;
  full["sampler"] = {{"step_count", 10}, {"guidance_scale", 7.5}, {"eta", 0}, {"seed", 1}};
  full["policy"] = {{"kinds", {"self", "cross"}}, {"sites", "4-14"}, {"replace_ratio", 0.5}, {"cross_replace_ratio", nullptr}};
  full["method"] = "fpe";
  full["heatmaps"] = true;
  CHECK_FALSE(validate_schema(request_schema("edit"), full));
  CHECK_FALSE(validate_schema(request_schema("sweep"), json{{"base", edit}, {"grid", {{"preset", "paper_modes"}}}}));
  CHECK_FALSE(validate_schema(request_schema("harvest"),
                              json{{"family", "color_car"}, {"seeds", {0, 1}}, {"dataset", "cars"}}));
  CHECK_FALSE(validate_schema(request_schema("probe"), json{{"mode", "sanity"}}));
  CHECK_FALSE(validate_schema(request_schema("benchmark"), json{{"dataset", "car_fake"}, {"scorer", "tiny"}}));
  CHECK_FALSE(validate_schema(api_schemas()["schemas"]["job"], json{{"kind", "edit"}, {"request", edit}}));
}

TEST_CASE("schema errors carry a json pointer") {
  const json& schema = request_schema("edit");
  auto pointer_of = [&](const json& doc) {
    const auto err = validate_schema(schema, doc);
    REQUIRE(err.has_value());
    return err->pointer;
  };
  json j = minimal_edit();
  j["sampler"] = {{"step_count", 0}};
  CHECK(pointer_of(j) == "/sampler/step_count");
  j = minimal_edit();
  j["policy"] = {{"replace_ratio", 1.5}};
  CHECK(pointer_of(j) == "/policy/replace_ratio");
  j = minimal_edit();
  j["policy"] = {{"kinds", {"self", "value"}}};
  CHECK(pointer_of(j) == "/policy/kinds/1");
  j = minimal_edit();
  j["source"]["type"] = "video";
  CHECK(pointer_of(j) == "/source/type");
  j = minimal_edit();
  j.erase("target_prompt");
  const auto missing = validate_schema(schema, j);
  REQUIRE(missing);
  CHECK(missing->pointer == "/target_prompt");
  CHECK(missing->message.find("required") != std::string::npos);
  j = minimal_edit();
  j["odd/key~name"] = 1;
  CHECK(pointer_of(j) == "/odd~1key~0name");
  CHECK(pointer_of(json::array()) == "");
}

TEST_CASE("validator keywords") {
  const json s = {{"type", "object"},
                  {"properties",
                   {{"n", {{"type", "integer"}, {"minimum", 1}, {"maximum", 3}}},
                    {"x", {{"type", "number"}, {"exclusiveMinimum", 0}}},
                    {"s", {{"type", "string"}, {"minLength", 2}}},
                    {"c", {{"const", "fixed"}}},
                    {"u", {{"type", "array"}, {"uniqueItems", true}, {"minItems", 1}}},
                    {"a", {{"anyOf", json::array({{{"type", "string"}}, {{"type", "null"}}})}}}}}};
  CHECK_FALSE(validate_schema(s, json{{"n", 2}, {"x", 0.5}, {"s", "ab"}, {"c", "fixed"}, {"u", {1, 2}}, {"a", nullptr}}));
  CHECK(validate_schema(s, json{{"n", 4}})->pointer == "/n");
  CHECK(validate_schema(s, json{{"n", 1.5}})->pointer == "/n");
  CHECK(validate_schema(s, json{{"x", 0}})->pointer == "/x");
  CHECK(validate_schema(s, json{{"s", "a"}})->pointer == "/s");
  CHECK(validate_schema(s, json{{"c", "other"}})->pointer == "/c");
  CHECK(validate_schema(s, json{{"u", {1, 1}}})->pointer == "/u/1");
  CHECK(validate_schema(s, json{{"u", json::array()}})->pointer == "/u");
  CHECK(validate_schema(s, json{{"a", 3}})->pointer == "/a");
}

TEST_CASE("edit requests take defaults from the config") {
  ToolkitConfig cfg = ToolkitConfig::defaults();
  cfg.sampler.step_count = 7;
  cfg.default_policy.replace_ratio = 0.3;
  json req = minimal_edit();
  req["sampler"] = {{"guidance_scale", 3.0}};
  req["backbone"] = "tiny-test";
  const EditJob job = edit_job_from_request(req, cfg);
  CHECK(job.sampler.step_count == 7);
  CHECK(job.sampler.guidance_scale == doctest::Approx(3.0));
  CHECK(job.sampler.seed == 3);
  CHECK(job.policy.replace_ratio == doctest::Approx(0.3));
  req["policy"] = {{"kinds", json::array()}};
  CHECK(edit_job_from_request(req, cfg).policy.empty());
}

TEST_CASE("run_job edit and schema rejection") {
  TempDir dir("run_job");
  const JobContext ctx = tiny_context(dir.path());
  const JobResult r = run_job("edit", minimal_edit(), dir.path() / "out", ctx);
  for (const auto& a : r.artifacts) CHECK(fs::exists(dir.path() / "out" / a));
  CHECK(std::find(r.artifacts.begin(), r.artifacts.end(), "dst.png") != r.artifacts.end());

  json bad = minimal_edit();
  bad["sampler"] = {{"step_count", -1}};
  CHECK_THROWS_WITH_AS(run_job("edit", bad, dir.path() / "bad", ctx), doctest::Contains("/sampler/step_count"),
                       ValidationError);
  CHECK_THROWS_AS(run_job("render", minimal_edit(), dir.path() / "bad", ctx), ValidationError);
  json unknown = minimal_edit();
  unknown["backbone"] = "nope";
  CHECK_THROWS_AS(run_job("edit", unknown, dir.path() / "bad2", ctx), ValidationError);
}

TEST_CASE("run_job sweep counts failed cells") {
  TempDir dir("run_sweep");
  const JobContext ctx = tiny_context(dir.path());
  const json req = {{"base", minimal_edit()}, {"grid", {{"kinds", {"self"}}, {"ratios", {0.4, 0.6, 0.8}}}}};
  const JobResult r = run_job("sweep", req, dir.path() / "out", ctx);
  CHECK(fs::exists(dir.path() / "out" / "grid.png"));
  CHECK(std::count_if(r.artifacts.begin(), r.artifacts.end(),
                      [](const std::string& a) { return a.rfind("cells/", 0) == 0; }) == 3);
}

TEST_CASE("run_job harvest then probe") {
  TempDir dir("run_probe");
  const JobContext ctx = tiny_context(dir.path());
  const json harvest_req = {{"family", "color_car"}, {"seeds", {0, 1, 2}}, {"dataset", "cars"}, {"shard_size", 16},
                            {"kinds", {"cross", "self"}}};
  const JobResult h = run_job("harvest", harvest_req, dir.path() / "h", ctx);
  CHECK(h.summary.at("completed") == 30);
  CHECK(fs::exists(dir.path() / "datasets" / "cars" / "manifest.json"));

  const json probe_req = {{"mode", "layers"},
                          {"dataset", "cars"},
                          {"layers", "main"},
                          {"classifier", {{"hidden", 16}, {"epochs", 3}}},
                          {"split", {{"test_fraction", 0.34}}}};
  const JobResult p = run_job("probe", probe_req, dir.path() / "p", ctx);
  for (const char* f : {"report.csv", "report.txt", "report_full.csv", "report_full.txt", "report.json"}) {
    CHECK(fs::exists(dir.path() / "p" / f));
  }
  // The fixture has layers 1-4; the main-text subset keeps only layer 3.
  CHECK(io::read_text(dir.path() / "p" / "report.csv").rfind("class,layer_3,avg\n", 0) == 0);
  CHECK(io::read_text(dir.path() / "p" / "report_full.csv").rfind("class,layer_1,layer_2,layer_3,layer_4,avg\n", 0) ==
        0);
  const json meta = json::parse(io::read_text(dir.path() / "p" / "report.json"));
  CHECK(meta.at("classifier").at("hidden") == 16);
  CHECK(meta.at("dataset_complete") == true);

  json traversal = harvest_req;
  traversal["dataset"] = "../escape";
  CHECK_THROWS_AS(run_job("harvest", traversal, dir.path() / "t", ctx), ValidationError);
  CHECK_THROWS_WITH_AS(run_job("probe", json{{"mode", "layers"}}, dir.path() / "q", ctx),
                       doctest::Contains("/dataset"), ValidationError);
}

TEST_CASE("run_job benchmark with the tiny scorer") {
  TempDir dir("run_bench");
  const JobContext ctx = tiny_context(dir.path());
  const json req = {{"dataset", "car_fake"}, {"color_limit", 2}, {"scorer", "tiny"}};
  const JobResult r = run_job("benchmark", req, dir.path() / "out", ctx);
  CHECK(r.summary.at("pairs") == 2);
  CHECK(r.summary.at("successes") == 2);
  for (const char* f : {"metrics.csv", "summary.json", "summary.txt", "dataset.json"}) {
    CHECK(fs::exists(dir.path() / "out" / f));
  }
  CHECK_THROWS_WITH_AS(run_job("benchmark", json{{"dataset", "car_real"}, {"scorer", "tiny"}}, dir.path() / "o2", ctx),
                       doctest::Contains("car_real.json"), ValidationError);
}

TEST_CASE("job memory estimates") {
  const ModelAdapter& m = fpe::test::tiny();
  const int64_t base = estimate_job_bytes("probe", json::object(), &m);
  CHECK(estimate_job_bytes("edit", minimal_edit(), &m) > base);
  CHECK(estimate_job_bytes("harvest", json{{"kinds", {"cross", "self"}}}, &m) >
        estimate_job_bytes("harvest", json{{"kinds", {"cross"}}}, &m));
  CHECK(estimate_job_bytes("edit", minimal_edit(), nullptr) == base);
}
