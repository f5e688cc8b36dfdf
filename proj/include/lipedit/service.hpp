// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Local JSON-over-HTTP service: synchronous planning and a single-worker job queue
// for render and train jobs.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/tensor.hpp"

namespace httplib {
class Server;
}

namespace lipedit::service {

/// The requested port already has a listener; reported as HTTP 409 Conflict.
class PortBusy : public Error {
public:
    explicit PortBusy(int port)
        : Error("409 Conflict: port " + std::to_string(port) + " is busy"), port(port) {}
    int port;
    static constexpr int http_status = 409;
};

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus s);

struct Job {
    std::string id;
    std::string kind;  // render | train
    JobStatus status = JobStatus::queued;
    nlohmann::json request;
    nlohmann::json report;  // set when done
    std::vector<std::string> artifacts;
    std::vector<std::string> log;
    std::string error;
    std::vector<JobStatus> history;

    nlohmann::json to_json(size_t log_tail = 20) const;
};

/// Thread-safe job table with one consumer thread.
class JobQueue {
public:
    using Runner = std::function<nlohmann::json(Job& job, const std::function<void(const std::string&)>& log)>;

    JobQueue();
    ~JobQueue();
    JobQueue(const JobQueue&) = delete;
    JobQueue& operator=(const JobQueue&) = delete;

    std::string submit(const std::string& kind, const nlohmann::json& request, Runner runner);
    /// Copy of a job; false when the id is unknown.
    bool lookup(const std::string& id, Job& out) const;
    /// Blocks until no job is queued or running.
    void wait_idle();
    void shutdown();

private:
    void worker_loop();
    void set_status(Job& job, JobStatus s);

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable idle_cv_;
    std::map<std::string, Job> jobs_;
    std::deque<std::pair<std::string, Runner>> pending_;
    bool busy_ = false;
    bool stop_ = false;
    int64_t next_id_ = 1;
    std::thread worker_;
};

struct ServiceOptions {
    std::string host = "127.0.0.1";
    int port = 8765;
};

class Service {
public:
    explicit Service(ServiceOptions options);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds the port (PortBusy if taken) and serves on a background thread.
    void start();
    /// Blocks until stop() is called from another thread or a signal handler.
    void wait();
    void stop();

    int port() const { return options_.port; }
    JobQueue& jobs() { return *jobs_; }

private:
    void install_routes();

    ServiceOptions options_;
    std::unique_ptr<httplib::Server> server_;
    std::unique_ptr<JobQueue> jobs_;
    std::thread listener_;
};

}  // namespace lipedit::service
