// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fpe/jobs.hpp"

namespace fpe {

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus s);
JobStatus parse_job_status(const std::string& s);

/// Persistent record of one submitted job.
struct JobRecord {
  std::string id;
  std::string kind;
  JobStatus status = JobStatus::queued;
  nlohmann::json request;
  std::string idempotency_key;
  int priority = 0;
  uint64_t sequence = 0;  // submission order, breaks priority ties
  std::vector<std::string> artifact_paths;
  nlohmann::json summary;
  std::string error;
  // Unix seconds; submitted always, started/finished once reached.
  double submitted_at = 0.0;
  std::optional<double> started_at;
  std::optional<double> finished_at;

  nlohmann::json to_json() const;
  static JobRecord from_json(const nlohmann::json& j);
};

/// Raised when an idempotency key is reused for a different request.
class ConflictError : public Error {
 public:
  using Error::Error;
};

/// Raised when the queue is at capacity.
class QueueFullError : public Error {
 public:
  using Error::Error;
};

/// On-disk job records under <root>/jobs/<id>/. Each job directory holds
/// job.json, job.log, a work/ directory while running and artifacts/ once
/// done. Artifacts are written into work/ and renamed into place before the
/// record flips to done, so a listed artifact is always complete.
class JobStore {
 public:
  explicit JobStore(std::filesystem::path root);

  // Creates a queued record, or returns the existing one when the
  // idempotency key was seen with an identical request. The bool is true
  // when a new record was created.
  std::pair<JobRecord, bool> create(const std::string& kind, const nlohmann::json& request,
                                    const std::string& idempotency_key, int priority);
  std::optional<JobRecord> get(const std::string& id) const;
  std::vector<JobRecord> list() const;

  // Forward-only transitions; anything else raises Error.
  JobRecord mark_running(const std::string& id);
  JobRecord mark_done(const std::string& id, const std::vector<std::string>& artifacts, const nlohmann::json& summary);
  JobRecord mark_failed(const std::string& id, const std::string& error);

  std::filesystem::path job_dir(const std::string& id) const;
  std::filesystem::path work_dir(const std::string& id) const { return job_dir(id) / "work"; }
  std::filesystem::path artifact_dir(const std::string& id) const { return job_dir(id) / "artifacts"; }
  std::filesystem::path log_path(const std::string& id) const { return job_dir(id) / "job.log"; }
  void append_log(const std::string& id, const std::string& line) const;

  // Startup recovery: running jobs become failed and lose their partial
  // output; returns the queued jobs in dispatch order.
  std::vector<JobRecord> recover();
  // Deletes finished jobs older than `days`; returns the number removed.
  int prune(int days, double now);

 private:
  void save(const JobRecord& r) const;
  JobRecord transition(const std::string& id, JobStatus to, const std::function<void(JobRecord&)>& update);

  std::filesystem::path root_;
  mutable std::mutex mutex_;
  std::map<std::string, JobRecord> records_;
  std::map<std::string, std::string> by_key_;
  uint64_t next_sequence_ = 1;
};

using JobRunner = std::function<JobResult(const std::string& kind, const nlohmann::json& request,
                                          const std::filesystem::path& out_dir)>;

/// Job queue with a fixed worker pool. Dispatch takes the highest priority
/// first and is FIFO within a priority.
class JobService {
 public:
  // `runner` defaults to run_job with a cached backbone loader.
  explicit JobService(ToolkitConfig config, JobRunner runner = {});
  ~JobService();
  JobService(const JobService&) = delete;
  JobService& operator=(const JobService&) = delete;

  void start();
  // Finishes running jobs, then joins the workers. Queued jobs stay queued.
  void stop();

  // Validates and enqueues. Throws ValidationError (schema or semantic
  // errors), ConflictError or QueueFullError.
  std::pair<JobRecord, bool> submit(const std::string& kind, const nlohmann::json& request,
                                    const std::string& idempotency_key = {}, int priority = 0);
  // Validates, records and runs a job on the calling thread, bypassing the
  // queue. Returns the final record.
  JobRecord run_sync(const std::string& kind, const nlohmann::json& request, const std::string& idempotency_key = {});
  // Blocks until the job is done or failed, or the timeout passes.
  std::optional<JobRecord> wait(const std::string& id, double timeout_seconds);

  JobStore& store() { return store_; }
  const ToolkitConfig& config() const { return config_; }
  nlohmann::json sites(const std::string& backbone_id);

 private:
  void worker_loop();
  void execute(const JobRecord& job);
  int64_t estimate(const JobRecord& r);

  ToolkitConfig config_;
  JobStore store_;
  JobRunner runner_;
  std::function<std::shared_ptr<const ModelAdapter>(const std::string&)> backbones_;

  std::mutex mutex_;
  std::condition_variable queue_cv_;
  std::condition_variable done_cv_;
  std::vector<JobRecord> queue_;
  int64_t running_bytes_ = 0;
  int running_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// HTTP front end over a JobService.
class HttpApi {
 public:
  explicit HttpApi(JobService& service);
  ~HttpApi();

  // Binds and serves until stop(); port 0 picks a free port.
  void listen(const std::string& host, int port);
  // Binds, then serves on a background thread; returns the bound port.
  int start_background(const std::string& host, int port = 0);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Content type served for an artifact name.
std::string artifact_content_type(const std::string& name);

}  // namespace fpe
