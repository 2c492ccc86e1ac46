// SPDX-License-Identifier: Apache-2.0
#include "fpe/service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

#include <httplib.h>

#include "fpe/io.hpp"
#include "fpe/unet.hpp"

namespace fpe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string format_id(uint64_t sequence) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "job-%06llu", static_cast<unsigned long long>(sequence));
  return buf;
}

bool is_terminal(JobStatus s) { return s == JobStatus::done || s == JobStatus::failed; }

// Dispatch order: higher priority first, then submission order.
bool dispatch_before(const JobRecord& a, const JobRecord& b) {
  if (a.priority != b.priority) return a.priority > b.priority;
  return a.sequence < b.sequence;
}

}  // namespace

std::string to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued:
      return "queued";
    case JobStatus::running:
      return "running";
    case JobStatus::done:
      return "done";
    case JobStatus::failed:
      return "failed";
  }
  return "unknown";
}

JobStatus parse_job_status(const std::string& s) {
  if (s == "queued") return JobStatus::queued;
  if (s == "running") return JobStatus::running;
  if (s == "done") return JobStatus::done;
  if (s == "failed") return JobStatus::failed;
  throw Error("unknown job status '" + s + "'");
}

json JobRecord::to_json() const {
  json timings = {{"submitted_at", submitted_at}};
  if (started_at) timings["started_at"] = *started_at;
  if (finished_at) timings["finished_at"] = *finished_at;
  if (started_at && finished_at) timings["run_seconds"] = *finished_at - *started_at;
  json j = {{"id", id},
            {"kind", kind},
            {"status", to_string(status)},
            {"request", request},
            {"priority", priority},
            {"sequence", sequence},
            {"artifact_paths", artifact_paths},
            {"timings", timings}};
  if (!idempotency_key.empty()) j["idempotency_key"] = idempotency_key;
  if (!summary.is_null()) j["summary"] = summary;
  if (!error.empty()) j["error"] = error;
  return j;
}

JobRecord JobRecord::from_json(const json& j) {
  JobRecord r;
  r.id = j.at("id");
  r.kind = j.at("kind");
  r.status = parse_job_status(j.at("status"));
  r.request = j.at("request");
  r.priority = j.value("priority", 0);
  r.sequence = j.at("sequence");
  r.artifact_paths = j.value("artifact_paths", std::vector<std::string>{});
  r.idempotency_key = j.value("idempotency_key", "");
  r.summary = j.value("summary", json());
  r.error = j.value("error", "");
  const json& t = j.at("timings");
  r.submitted_at = t.at("submitted_at");
  if (t.contains("started_at")) r.started_at = t["started_at"].get<double>();
  if (t.contains("finished_at")) r.finished_at = t["finished_at"].get<double>();
  return r;
}

// ---------------------------------------------------------------------------
// JobStore

JobStore::JobStore(fs::path root) : root_(std::move(root)) {
  const fs::path jobs = root_ / "jobs";
  fs::create_directories(jobs);
  for (const auto& entry : fs::directory_iterator(jobs)) {
    const fs::path file = entry.path() / "job.json";
    if (!fs::exists(file)) continue;
    JobRecord r = JobRecord::from_json(json::parse(io::read_text(file)));
    next_sequence_ = std::max(next_sequence_, r.sequence + 1);
    if (!r.idempotency_key.empty()) by_key_[r.idempotency_key] = r.id;
    records_.emplace(r.id, std::move(r));
  }
}

fs::path JobStore::job_dir(const std::string& id) const { return root_ / "jobs" / id; }

void JobStore::save(const JobRecord& r) const {
  io::write_text_atomic(job_dir(r.id) / "job.json", r.to_json().dump(2));
}

void JobStore::append_log(const std::string& id, const std::string& line) const {
  std::ofstream out(log_path(id), std::ios::app);
  char stamp[32];
  std::snprintf(stamp, sizeof(stamp), "%.3f", now_seconds());
  out << stamp << ' ' << line << '\n';
}

std::pair<JobRecord, bool> JobStore::create(const std::string& kind, const json& request,
                                            const std::string& idempotency_key, int priority) {
  std::lock_guard lock(mutex_);
  if (!idempotency_key.empty()) {
    auto it = by_key_.find(idempotency_key);
    if (it != by_key_.end()) {
      const JobRecord& existing = records_.at(it->second);
      if (existing.kind != kind || existing.request != request) {
        throw ConflictError("idempotency key '" + idempotency_key + "' was used for a different request (" +
                            existing.id + ")");
      }
      return {existing, false};
    }
  }
  JobRecord r;
  r.sequence = next_sequence_++;
  r.id = format_id(r.sequence);
  r.kind = kind;
  r.request = request;
  r.idempotency_key = idempotency_key;
  r.priority = priority;
  r.submitted_at = now_seconds();
  fs::create_directories(job_dir(r.id));
  save(r);
  append_log(r.id, "queued " + kind);
  if (!idempotency_key.empty()) by_key_[idempotency_key] = r.id;
  records_.emplace(r.id, r);
  return {r, true};
}

std::optional<JobRecord> JobStore::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = records_.find(id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::vector<JobRecord> JobStore::list() const {
  std::lock_guard lock(mutex_);
  std::vector<JobRecord> out;
  for (const auto& [id, r] : records_) out.push_back(r);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.sequence < b.sequence; });
  return out;
}

JobRecord JobStore::transition(const std::string& id, JobStatus to, const std::function<void(JobRecord&)>& update) {
  std::lock_guard lock(mutex_);
  auto it = records_.find(id);
  if (it == records_.end()) throw Error("unknown job " + id);
  JobRecord r = it->second;
  const bool forward = (r.status == JobStatus::queued && to != JobStatus::queued) ||
                       (r.status == JobStatus::running && is_terminal(to));
  if (!forward || (r.status == JobStatus::queued && to == JobStatus::done)) {
    throw Error("job " + id + " cannot move from " + to_string(r.status) + " to " + to_string(to));
  }
  r.status = to;
  update(r);
  save(r);
  it->second = r;
  return r;
}

JobRecord JobStore::mark_running(const std::string& id) {
  JobRecord r = transition(id, JobStatus::running, [](JobRecord& r) { r.started_at = now_seconds(); });
  append_log(id, "running");
  return r;
}

JobRecord JobStore::mark_done(const std::string& id, const std::vector<std::string>& artifacts, const json& summary) {
  JobRecord r = transition(id, JobStatus::done, [&](JobRecord& r) {
    r.artifact_paths = artifacts;
    r.summary = summary;
    r.finished_at = now_seconds();
  });
  append_log(id, "done, " + std::to_string(artifacts.size()) + " artifacts");
  return r;
}

JobRecord JobStore::mark_failed(const std::string& id, const std::string& error) {
  JobRecord r = transition(id, JobStatus::failed, [&](JobRecord& r) {
    r.error = error;
    r.artifact_paths.clear();
    r.finished_at = now_seconds();
  });
  append_log(id, "failed: " + error);
  return r;
}

std::vector<JobRecord> JobStore::recover() {
  std::vector<std::string> interrupted;
  std::vector<JobRecord> queued;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, r] : records_) {
      if (r.status == JobStatus::running) interrupted.push_back(id);
      if (r.status == JobStatus::queued) queued.push_back(r);
    }
  }
  for (const auto& id : interrupted) {
    fs::remove_all(work_dir(id));
    fs::remove_all(artifact_dir(id));
    mark_failed(id, "interrupted: the service stopped while the job was running");
  }
  std::sort(queued.begin(), queued.end(), dispatch_before);
  return queued;
}

int JobStore::prune(int days, double now) {
  if (days <= 0) return 0;
  const double cutoff = now - days * 86400.0;
  std::lock_guard lock(mutex_);
  int removed = 0;
  for (auto it = records_.begin(); it != records_.end();) {
    const JobRecord& r = it->second;
    if (is_terminal(r.status) && r.finished_at && *r.finished_at < cutoff) {
      fs::remove_all(job_dir(r.id));
      if (!r.idempotency_key.empty()) by_key_.erase(r.idempotency_key);
      it = records_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

// ---------------------------------------------------------------------------
// JobService

namespace {

std::string request_backbone(const std::string& kind, const json& request, const std::string& fallback) {
  const json& body = kind == "sweep" ? request.value("base", json::object()) : request;
  return body.value("backbone", fallback);
}

void check_request(const std::string& kind, const json& request, const ToolkitConfig& config) {
  if (auto err = validate_schema(request_schema(kind), request)) {
    throw ValidationError((err->pointer.empty() ? "/" : err->pointer) + ": " + err->message);
  }
  if (kind == "edit") edit_job_from_request(request, config).validate();
  if (kind == "sweep") {
    edit_job_from_request(request.at("base"), config).validate();
    SweepSpec::from_json(request.at("grid"));
  }
}

}  // namespace

JobService::JobService(ToolkitConfig config, JobRunner runner)
    : config_(std::move(config)), store_(config_.storage_root), runner_(std::move(runner)) {
  config_.validate();
  backbones_ = cached_backbone_loader(config_.device_hint);
  if (!runner_) {
    JobContext ctx{config_, backbones_};
    runner_ = [ctx](const std::string& kind, const json& request, const fs::path& out_dir) {
      return run_job(kind, request, out_dir, ctx);
    };
  }
}

JobService::~JobService() { stop(); }

void JobService::start() {
  std::lock_guard lock(mutex_);
  if (!workers_.empty()) return;
  store_.prune(config_.max_age_days, now_seconds());
  queue_ = store_.recover();
  stopping_ = false;
  for (int i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

void JobService::stop() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  for (auto& t : workers_) t.join();
  workers_.clear();
}

std::pair<JobRecord, bool> JobService::submit(const std::string& kind, const json& request,
                                              const std::string& idempotency_key, int priority) {
  check_request(kind, request, config_);
  std::lock_guard lock(mutex_);
  const int queued = static_cast<int>(queue_.size());
  if (queued >= config_.queue_capacity) {
    // An idempotent resubmission never needs a queue slot.
    for (const auto& r : store_.list()) {
      if (!idempotency_key.empty() && r.idempotency_key == idempotency_key) {
        return store_.create(kind, request, idempotency_key, priority);
      }
    }
    throw QueueFullError("queue is full (" + std::to_string(queued) + " jobs waiting)");
  }
  auto [record, created] = store_.create(kind, request, idempotency_key, priority);
  if (created) {
    queue_.insert(std::upper_bound(queue_.begin(), queue_.end(), record, dispatch_before), record);
    queue_cv_.notify_one();
  }
  return {record, created};
}

std::optional<JobRecord> JobService::wait(const std::string& id, double timeout_seconds) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  std::unique_lock lock(mutex_);
  while (true) {
    auto r = store_.get(id);
    if (!r || is_terminal(r->status)) return r;
    if (done_cv_.wait_until(lock, deadline) == std::cv_status::timeout) return store_.get(id);
  }
}

int64_t JobService::estimate(const JobRecord& r) {
  if (config_.memory_budget_mb <= 0) return 0;
  try {
    const auto model = backbones_(request_backbone(r.kind, r.request, config_.backbone_id));
    return estimate_job_bytes(r.kind, r.request, model.get());
  } catch (const std::exception&) {
    return estimate_job_bytes(r.kind, r.request, nullptr);
  }
}

json JobService::sites(const std::string& backbone_id) {
  const std::string id = backbone_id.empty() ? config_.backbone_id : backbone_id;
  std::vector<AttentionSite> table;
  if (id == "sd15") {
    // The table follows from the architecture, so no weights are needed.
    table = site_table(UNetConfig::sd15(), 64, 64, 77);
  } else {
    table = backbones_(id)->sites();
  }
  json out = json::array();
  for (const auto& s : table) out.push_back(site_json(s));
  return {{"backbone", id}, {"sites", out}};
}

void JobService::execute(const JobRecord& job) {
  const fs::path work = store_.work_dir(job.id);
  const fs::path artifacts = store_.artifact_dir(job.id);
  try {
    store_.mark_running(job.id);
    fs::remove_all(work);
    fs::create_directories(work);
    const JobResult result = runner_(job.kind, job.request, work);
    fs::remove_all(artifacts);
    fs::rename(work, artifacts);
    store_.mark_done(job.id, result.artifacts, result.summary);
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::remove_all(work, ec);
    fs::remove_all(artifacts, ec);
    try {
      store_.mark_failed(job.id, e.what());
    } catch (const std::exception&) {
      // The record already reached a terminal state.
    }
  }
}

JobRecord JobService::run_sync(const std::string& kind, const json& request, const std::string& idempotency_key) {
  check_request(kind, request, config_);
  auto [record, created] = store_.create(kind, request, idempotency_key, 0);
  if (created) execute(record);
  return *store_.get(record.id);
}

void JobService::worker_loop() {
  while (true) {
    JobRecord job;
    int64_t bytes = 0;
    {
      std::unique_lock lock(mutex_);
      const int64_t budget = config_.memory_budget_mb * (int64_t{1} << 20);
      queue_cv_.wait(lock, [&] {
        if (stopping_) return true;
        if (queue_.empty()) return false;
        bytes = estimate(queue_.front());
        return budget <= 0 || running_ == 0 || running_bytes_ + bytes <= budget;
      });
      if (stopping_) return;
      job = queue_.front();
      queue_.erase(queue_.begin());
      ++running_;
      running_bytes_ += bytes;
    }
    execute(job);
    {
      std::lock_guard lock(mutex_);
      --running_;
      running_bytes_ -= bytes;
    }
    queue_cv_.notify_all();
    done_cv_.notify_all();
  }
}

// ---------------------------------------------------------------------------
// HTTP

std::string artifact_content_type(const std::string& name) {
  const std::string ext = fs::path(name).extension().string();
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".json") return "application/json";
  if (ext == ".csv") return "text/csv";
  if (ext == ".txt" || ext == ".log") return "text/plain";
  return "application/octet-stream";
}

struct HttpApi::Impl {
  JobService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(JobService& s) : service(s) { routes(); }

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message,
                         const std::optional<std::string>& pointer = std::nullopt) {
    json body = {{"error", message}, {"status", status}};
    if (pointer) body["pointer"] = *pointer;
    send_json(res, status, body);
  }

  // Parses and schema-checks a job body; on failure writes the 400 reply.
  static std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      send_error(res, 400, std::string("malformed JSON: ") + e.what(), "");
      return std::nullopt;
    }
    return body;
  }

  void submit(const std::string& kind, const json& request, const std::string& key, int priority,
              httplib::Response& res) {
    if (auto err = validate_schema(request_schema(kind), request)) {
      send_error(res, 400, err->message, (kind == "sweep" ? "" : "/request") + err->pointer);
      return;
    }
    try {
      auto [record, created] = service.submit(kind, request, key, priority);
      send_json(res, created ? 202 : 200, {{"id", record.id}, {"status", to_string(record.status)}, {"created", created}});
    } catch (const QueueFullError& e) {
      send_error(res, 503, e.what());
    } catch (const ConflictError& e) {
      send_error(res, 409, e.what());
    } catch (const ValidationError& e) {
      send_error(res, 400, e.what(), kind == "sweep" ? "" : "/request");
    }
  }

  void routes() {
    server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Headers", "Content-Type, Idempotency-Key");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    });
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string message = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        message = e.what();
      } catch (...) {
      }
      send_error(res, 500, message);
    });

    server.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) {
      auto body = parse_body(req, res);
      if (!body) return;
      if (auto err = validate_schema(api_schemas()["schemas"]["job"], *body)) {
        send_error(res, 400, err->message, err->pointer);
        return;
      }
      std::string key = body->value("idempotency_key", "");
      if (req.has_header("Idempotency-Key")) key = req.get_header_value("Idempotency-Key");
      submit(body->at("kind"), body->at("request"), key, body->value("priority", 0), res);
    });

    server.Post("/sweeps", [this](const httplib::Request& req, httplib::Response& res) {
      auto body = parse_body(req, res);
      if (!body) return;
      std::string key = body->value("idempotency_key", "");
      if (req.has_header("Idempotency-Key")) key = req.get_header_value("Idempotency-Key");
      const int priority = body->is_object() ? body->value("priority", 0) : 0;
      if (body->is_object()) {
        body->erase("idempotency_key");
        body->erase("priority");
      }
      submit("sweep", *body, key, priority, res);
    });

    server.Get("/jobs", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& r : service.store().list()) out.push_back(r.to_json());
      send_json(res, 200, {{"jobs", out}});
    });

    server.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = service.store().get(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
      send_json(res, 200, r->to_json());
    });

    server.Get(R"(/jobs/([^/]+)/artifacts/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1], name = req.matches[2];
      auto r = service.store().get(id);
      if (!r) return send_error(res, 404, "unknown job " + id);
      if (r->status != JobStatus::done) {
        return send_error(res, 409, "job " + id + " is " + to_string(r->status) + "; artifacts are served once done");
      }
      const auto& listed = r->artifact_paths;
      if (std::find(listed.begin(), listed.end(), name) == listed.end()) {
        return send_error(res, 404, "job " + id + " has no artifact '" + name + "'");
      }
      const auto bytes = io::read_file(service.store().artifact_dir(id) / name);
      res.status = 200;
      res.set_content(std::string(bytes.begin(), bytes.end()), artifact_content_type(name));
    });

    server.Get("/sites", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        send_json(res, 200, service.sites(req.get_param_value("backbone")));
      } catch (const std::exception& e) {
        send_error(res, 404, e.what());
      }
    });

    server.Get("/schema", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, api_schemas()); });
    server.Get(R"(/schema/([a-z_]+))", [](const httplib::Request& req, httplib::Response& res) {
      const json& all = api_schemas()["schemas"];
      if (!all.contains(req.matches[1].str())) return send_error(res, 404, "unknown schema " + req.matches[1].str());
      send_json(res, 200, all[req.matches[1].str()]);
    });

    server.Get("/config", [this](const httplib::Request&, httplib::Response& res) {
      const ToolkitConfig& c = service.config();
      send_json(res, 200,
                {{"backbone_id", c.backbone_id},
                 {"device_hint", c.device_hint},
                 {"default_policy", c.default_policy.to_json()},
                 {"sampler", c.sampler.to_json()},
                 {"workers", c.workers},
                 {"queue_capacity", c.queue_capacity},
                 {"schema_version", kSchemaVersion}});
    });
  }
};

HttpApi::HttpApi(JobService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpApi::~HttpApi() { stop(); }

void HttpApi::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

int HttpApi::start_background(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : impl_->server.bind_to_port(host, port) ? port : -1;
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpApi::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace fpe
