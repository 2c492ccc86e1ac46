// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "fpe/image.hpp"
#include "fpe/io.hpp"
#include "fpe/service.hpp"
#include "support.hpp"

using namespace fpe;
using fpe::test::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json edit_request(const std::string& target = "a photo of a leopard", uint64_t seed = 3) {
  return {{"source", {{"type", "seeded_prompt"}, {"seed", seed}, {"prompt", "a photo of a sheep"}}},
          {"target_prompt", target}};
}

ToolkitConfig test_config(const fs::path& root) {
  ToolkitConfig c = ToolkitConfig::defaults();
  c.storage_root = root;
  c.sampler.step_count = 3;
  return c;
}

// Records the order in which jobs run and writes one artifact per job.
struct RecordingRunner {
  std::shared_ptr<std::mutex> mutex = std::make_shared<std::mutex>();
  std::shared_ptr<std::vector<std::string>> order = std::make_shared<std::vector<std::string>>();

  JobRunner runner() const {
    auto m = mutex;
    auto o = order;
    return [m, o](const std::string&, const json& request, const fs::path& out_dir) {
      {
        std::lock_guard lock(*m);
        o->push_back(request.at("target_prompt"));
      }
      fs::create_directories(out_dir);
      io::write_text_atomic(out_dir / "note.txt", request.at("target_prompt").get<std::string>());
      return JobResult{{"note.txt"}, json{{"ok", true}}};
    };
  }
};

json get_json(httplib::Client& cli, const std::string& path, int expected_status) {
  auto res = cli.Get(path);
  REQUIRE(res);
  CHECK(res->status == expected_status);
  return json::parse(res->body);
}

json post_json(httplib::Client& cli, const std::string& path, const json& body, int expected_status,
               const httplib::Headers& headers = {}) {
  auto res = cli.Post(path, headers, body.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == expected_status);
  return json::parse(res->body);
}

json poll_until_terminal(httplib::Client& cli, const std::string& id) {
  for (int i = 0; i < 600; ++i) {
    const json r = get_json(cli, "/jobs/" + id, 200);
    if (r.at("status") == "done" || r.at("status") == "failed") return r;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  FAIL("job " << id << " did not finish");
  return {};
}

}  // namespace

TEST_CASE("job status names") {
  for (auto s : {JobStatus::queued, JobStatus::running, JobStatus::done, JobStatus::failed}) {
    CHECK(parse_job_status(to_string(s)) == s);
  }
  CHECK_THROWS(parse_job_status("paused"));
}

TEST_CASE("job store records, transitions and persistence") {
  TempDir dir("store");
  {
    JobStore store(dir.path());
    auto [a, created_a] = store.create("edit", edit_request(), "key-1", 0);
    CHECK(created_a);
    CHECK(a.id == "job-000001");
    CHECK(a.status == JobStatus::queued);
    auto [again, created_again] = store.create("edit", edit_request(), "key-1", 0);
    CHECK_FALSE(created_again);
    CHECK(again.id == a.id);
    CHECK_THROWS_AS(store.create("edit", edit_request("a dog"), "key-1", 0), ConflictError);
    CHECK_THROWS_AS(store.create("sweep", edit_request(), "key-1", 0), ConflictError);
    auto [b, created_b] = store.create("edit", edit_request(), "", 0);
    CHECK(created_b);
    CHECK(b.id == "job-000002");

    CHECK_THROWS(store.mark_done(a.id, {}, json::object()));
    const JobRecord running = store.mark_running(a.id);
    CHECK(running.status == JobStatus::running);
    CHECK(running.started_at.has_value());
    const JobRecord done = store.mark_done(a.id, {"x.png"}, json{{"n", 1}});
    CHECK(done.status == JobStatus::done);
    CHECK(done.artifact_paths == std::vector<std::string>{"x.png"});
    CHECK_THROWS(store.mark_running(a.id));
    CHECK_THROWS(store.mark_failed(a.id, "late"));

    store.mark_running(b.id);
    const JobRecord failed = store.mark_failed(b.id, "boom");
    CHECK(failed.status == JobStatus::failed);
    CHECK(failed.artifact_paths.empty());
    CHECK(failed.error == "boom");
    CHECK(store.get("job-999999") == std::nullopt);
    store.append_log(a.id, "hello");
  }
  JobStore reopened(dir.path());
  const auto all = reopened.list();
  REQUIRE(all.size() == 2);
  CHECK(all[0].status == JobStatus::done);
  CHECK(all[0].summary == json{{"n", 1}});
  CHECK(all[1].error == "boom");
  CHECK(io::read_text(reopened.log_path(all[0].id)).find("hello") != std::string::npos);
  // Ids and idempotency keys survive a restart.
  CHECK(reopened.create("edit", edit_request(), "key-1", 0).first.id == "job-000001");
  CHECK(reopened.create("edit", edit_request(), "", 0).first.id == "job-000003");
  const json j = all[0].to_json();
  CHECK(j.at("timings").contains("run_seconds"));
  CHECK(JobRecord::from_json(j).to_json() == j);
}

TEST_CASE("recovery fails interrupted jobs and orders the queue") {
  TempDir dir("recover");
  {
    JobStore store(dir.path());
    store.create("edit", edit_request("a"), "", 0);   // 1
    store.create("edit", edit_request("b"), "", 7);   // 2
    store.create("edit", edit_request("c"), "", 0);   // 3
    const auto [d, ok] = store.create("edit", edit_request("d"), "", 0);  // 4, will be interrupted
    store.mark_running(d.id);
    fs::create_directories(store.work_dir(d.id));
    io::write_text_atomic(store.work_dir(d.id) / "partial.png", "x");
  }
  JobStore store(dir.path());
  const auto queued = store.recover();
  REQUIRE(queued.size() == 3);
  CHECK(queued[0].id == "job-000002");
  CHECK(queued[1].id == "job-000001");
  CHECK(queued[2].id == "job-000003");
  const auto d = store.get("job-000004");
  CHECK(d->status == JobStatus::failed);
  CHECK(d->error.find("interrupted") != std::string::npos);
  CHECK_FALSE(fs::exists(store.work_dir("job-000004")));
}

TEST_CASE("pruning removes old finished jobs only") {
  TempDir dir("prune");
  JobStore store(dir.path());
  const auto a = store.create("edit", edit_request("a"), "k", 0).first;
  const auto b = store.create("edit", edit_request("b"), "", 0).first;
  store.mark_running(a.id);
  const double finished = *store.mark_done(a.id, {}, json::object()).finished_at;
  CHECK(store.prune(0, finished + 10 * 86400.0) == 0);
  CHECK(store.prune(2, finished + 86400.0) == 0);
  CHECK(store.prune(2, finished + 3 * 86400.0) == 1);
  CHECK_FALSE(store.get(a.id));
  CHECK(store.get(b.id));
  CHECK_FALSE(fs::exists(store.job_dir(a.id)));
  // A pruned key can be reused.
  CHECK(store.create("edit", edit_request("z"), "k", 0).second);
}

TEST_CASE("service dispatch order is priority then fifo") {
  TempDir dir("dispatch");
  RecordingRunner rec;
  JobService svc(test_config(dir.path()), rec.runner());
  const std::vector<std::pair<std::string, int>> jobs = {{"p0-a", 0}, {"p5-a", 5}, {"p0-b", 0}, {"p5-b", 5}, {"pm1", -1}};
  std::vector<std::string> ids;
  for (const auto& [name, prio] : jobs) ids.push_back(svc.submit("edit", edit_request(name), "", prio).first.id);
  svc.start();
  for (const auto& id : ids) REQUIRE(svc.wait(id, 30)->status == JobStatus::done);
  svc.stop();
  CHECK(*rec.order == std::vector<std::string>{"p5-a", "p5-b", "p0-a", "p0-b", "pm1"});
  const auto r = svc.store().get(ids[0]);
  CHECK(r->artifact_paths == std::vector<std::string>{"note.txt"});
  CHECK(io::read_text(svc.store().artifact_dir(ids[0]) / "note.txt") == "p0-a");
  CHECK_FALSE(fs::exists(svc.store().work_dir(ids[0])));
}

TEST_CASE("service rejects invalid requests before queueing") {
  TempDir dir("reject");
  JobService svc(test_config(dir.path()), RecordingRunner{}.runner());
  json bad = edit_request();
  bad["sampler"] = {{"step_count", 0}};
  CHECK_THROWS_WITH_AS(svc.submit("edit", bad), doctest::Contains("/sampler/step_count"), ValidationError);
  json null_text_generated = edit_request();
  null_text_generated["method"] = "null_text";
  CHECK_THROWS_AS(svc.submit("edit", null_text_generated), ValidationError);
  CHECK_THROWS_AS(svc.submit("sweep", json{{"base", edit_request()}, {"grid", {{"preset", "other"}}}}),
                  ValidationError);
  CHECK(svc.store().list().empty());
}

TEST_CASE("queue capacity and idempotent resubmission") {
  TempDir dir("capacity");
  ToolkitConfig cfg = test_config(dir.path());
  cfg.queue_capacity = 2;
  JobService svc(cfg, RecordingRunner{}.runner());
  const auto first = svc.submit("edit", edit_request("a"), "first").first;
  svc.submit("edit", edit_request("b"));
  CHECK_THROWS_AS(svc.submit("edit", edit_request("c")), QueueFullError);
  const auto [again, created] = svc.submit("edit", edit_request("a"), "first");
  CHECK_FALSE(created);
  CHECK(again.id == first.id);
}

TEST_CASE("a failing job keeps its log and no artifacts") {
  TempDir dir("failing");
  JobService svc(test_config(dir.path()), [](const std::string&, const json&, const fs::path& out) -> JobResult {
    fs::create_directories(out);
    io::write_text_atomic(out / "half.png", "partial");
    throw std::runtime_error("runner exploded");
  });
  svc.start();
  const auto id = svc.submit("edit", edit_request()).first.id;
  const auto r = svc.wait(id, 30);
  REQUIRE(r);
  CHECK(r->status == JobStatus::failed);
  CHECK(r->error.find("runner exploded") != std::string::npos);
  CHECK(r->artifact_paths.empty());
  CHECK_FALSE(fs::exists(svc.store().work_dir(id)));
  CHECK_FALSE(fs::exists(svc.store().artifact_dir(id)));
  CHECK(io::read_text(svc.store().log_path(id)).find("runner exploded") != std::string::npos);
}

TEST_CASE("queued jobs survive a restart") {
  TempDir dir("restart");
  RecordingRunner rec;
  std::string id;
  {
    JobService svc(test_config(dir.path()), rec.runner());
    id = svc.submit("edit", edit_request("later")).first.id;
  }
  JobService svc(test_config(dir.path()), rec.runner());
  svc.start();
  CHECK(svc.wait(id, 30)->status == JobStatus::done);
  CHECK(*rec.order == std::vector<std::string>{"later"});
}

TEST_CASE("run_sync executes inline with the real runner") {
  TempDir dir("sync");
  JobService svc(test_config(dir.path()));
  const JobRecord r = svc.run_sync("edit", edit_request());
  CHECK(r.status == JobStatus::done);
  for (const auto& a : r.artifact_paths) CHECK(fs::exists(svc.store().artifact_dir(r.id) / a));
  CHECK(svc.sites("").at("sites").size() == 8);
  CHECK(svc.sites("sd15").at("sites").size() == 32);
}

TEST_CASE("artifact content types") {
  CHECK(artifact_content_type("dst.png") == "image/png");
  CHECK(artifact_content_type("x.jpg") == "image/jpeg");
  CHECK(artifact_content_type("x.jpeg") == "image/jpeg");
  CHECK(artifact_content_type("manifest.json") == "application/json");
  CHECK(artifact_content_type("metrics.csv") == "text/csv");
  CHECK(artifact_content_type("report.txt").rfind("text/plain", 0) == 0);
  CHECK(artifact_content_type("latents.fpet") == "application/octet-stream");
}

TEST_CASE("http api end to end") {
  TempDir dir("http");
  JobService svc(test_config(dir.path()));
  svc.start();
  HttpApi api(svc);
  const int port = api.start_background("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);

  SUBCASE("schemas, config and sites") {
    const json schemas = get_json(cli, "/schema", 200);
    CHECK(schemas.at("version") == 1);
    CHECK(schemas.at("schemas").size() == 6);
    CHECK(get_json(cli, "/schema/edit", 200).at("$id") == "fpe:edit:v1");
    CHECK(get_json(cli, "/schema/nope", 404).contains("error"));
    const json cfg = get_json(cli, "/config", 200);
    CHECK(cfg.at("backbone_id") == "tiny-test");
    CHECK(cfg.at("schema_version") == 1);
    const json sd = get_json(cli, "/sites?backbone=sd15", 200);
    CHECK(sd.at("sites").size() == 32);
    CHECK(get_json(cli, "/sites", 200).at("sites").size() == 8);
    CHECK(get_json(cli, "/sites?backbone=bogus", 404).contains("error"));
  }

  SUBCASE("request errors") {
    auto res = cli.Post("/jobs", "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(json::parse(res->body).at("pointer") == "");
    CHECK(post_json(cli, "/jobs", json{{"request", edit_request()}}, 400).at("pointer") == "/kind");
    json bad = edit_request();
    bad["sampler"] = {{"step_count", 0}};
    const json err = post_json(cli, "/jobs", json{{"kind", "edit"}, {"request", bad}}, 400);
    CHECK(err.at("pointer") == "/request/sampler/step_count");
    CHECK(err.at("status") == 400);
    json bad_sweep = {{"base", edit_request()}, {"grid", {{"ratios", {2.0}}, {"kinds", {"self"}}}}};
    CHECK(post_json(cli, "/sweeps", bad_sweep, 400).at("pointer") == "/grid/ratios/0");
    CHECK(get_json(cli, "/jobs/job-424242", 404).contains("error"));
    CHECK(get_json(cli, "/jobs/job-424242/artifacts/dst.png", 404).contains("error"));
  }

  SUBCASE("no-op edit equals direct generation") {
    json req = edit_request("a photo of a leopard", 12);
    req["policy"] = {{"kinds", json::array()}};
    const httplib::Headers key = {{"Idempotency-Key", "noop-1"}};
    const json created = post_json(cli, "/jobs", json{{"kind", "edit"}, {"request", req}}, 202, key);
    const std::string id = created.at("id");
    CHECK(created.at("created") == true);
    const json repeat = post_json(cli, "/jobs", json{{"kind", "edit"}, {"request", req}}, 200, key);
    CHECK(repeat.at("id") == id);
    post_json(cli, "/jobs", json{{"kind", "edit"}, {"request", edit_request("a dog")}}, 409, key);

    const json done = poll_until_terminal(cli, id);
    REQUIRE(done.at("status") == "done");
    CHECK(done.at("idempotency_key") == "noop-1");
    auto png = cli.Get("/jobs/" + id + "/artifacts/dst.png");
    REQUIRE(png);
    CHECK(png->status == 200);
    CHECK(png->get_header_value("Content-Type") == "image/png");
    const Image served = decode_image(std::span<const uint8_t>(
        reinterpret_cast<const uint8_t*>(png->body.data()), png->body.size()));

    const ModelAdapter& m = fpe::test::tiny();
    SamplerConfig s = svc.config().sampler;
    s.seed = 12;
    const ContextEmbedding dst = m.encode_prompt("a photo of a leopard");
    const Image direct = m.decode_latent(m.denoise(m.initial_latent(s), &dst, s, nullptr));
    CHECK(served.rgb == direct.rgb);

    auto manifest = cli.Get("/jobs/" + id + "/artifacts/manifest.json");
    REQUIRE(manifest);
    CHECK(manifest->get_header_value("Content-Type") == "application/json");
    CHECK(get_json(cli, "/jobs/" + id + "/artifacts/missing.png", 404).contains("error"));
    const json list = get_json(cli, "/jobs", 200);
    CHECK(list.at("jobs").size() >= 1);
  }

  SUBCASE("sweep renders one cell per ratio") {
    const json body = {{"base", edit_request()}, {"grid", {{"kinds", {"self"}}, {"ratios", {0.4, 0.6, 0.8}}}}};
    const json created = post_json(cli, "/sweeps", body, 202);
    const json done = poll_until_terminal(cli, created.at("id"));
    REQUIRE(done.at("status") == "done");
    const auto artifacts = done.at("artifact_paths").get<std::vector<std::string>>();
    CHECK(std::count_if(artifacts.begin(), artifacts.end(),
                        [](const std::string& a) { return a.rfind("cells/", 0) == 0; }) == 3);
    const json manifest = get_json(cli, "/jobs/" + created.at("id").get<std::string>() + "/artifacts/manifest.json", 200);
    CHECK(manifest.at("cells").size() == 3);
  }

  SUBCASE("cors preflight") {
    auto res = cli.Options("/jobs");
    REQUIRE(res);
    CHECK(res->status == 204);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  }

  api.stop();
  svc.stop();
}

TEST_CASE("http api reports queued artifacts and a full queue") {
  TempDir dir("http_queue");
  ToolkitConfig cfg = test_config(dir.path());
  cfg.queue_capacity = 1;
  JobService svc(cfg, RecordingRunner{}.runner());  // never started
  HttpApi api(svc);
  const int port = api.start_background("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  const json created = post_json(cli, "/jobs", json{{"kind", "edit"}, {"request", edit_request()}}, 202);
  const std::string id = created.at("id");
  CHECK(get_json(cli, "/jobs/" + id, 200).at("status") == "queued");
  CHECK(get_json(cli, "/jobs/" + id + "/artifacts/note.txt", 409).at("status") == 409);
  CHECK(post_json(cli, "/jobs", json{{"kind", "edit"}, {"request", edit_request("b")}}, 503).at("status") == 503);
  api.stop();
}
