// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/service.hpp"

#include <httplib.h>

#include "lipedit/io.hpp"
#include "lipedit/pipeline.hpp"

namespace lipedit::service {

using nlohmann::json;

std::string to_string(JobStatus s) {
    switch (s) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::done: return "done";
        case JobStatus::failed: return "failed";
    }
    return "unknown";
}

json Job::to_json(size_t log_tail) const {
    json hist = json::array();
    for (auto s : history) hist.push_back(service::to_string(s));
    const size_t from = log.size() > log_tail ? log.size() - log_tail : 0;
    return {{"schema_version", pipeline::kSchemaVersion},
            {"id", id},
            {"kind", kind},
            {"status", service::to_string(status)},
            {"history", hist},
            {"artifacts", artifacts},
            {"log_tail", std::vector<std::string>(log.begin() + static_cast<std::ptrdiff_t>(from), log.end())},
            {"error", error.empty() ? json() : json(error)}};
}

// ---- job queue ----

JobQueue::JobQueue() : worker_([this] { worker_loop(); }) {}

JobQueue::~JobQueue() { shutdown(); }

void JobQueue::shutdown() {
    {
        std::lock_guard lock(mu_);
        if (stop_) return;
        stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

void JobQueue::set_status(Job& job, JobStatus s) {
    if (static_cast<int>(s) <= static_cast<int>(job.status) && !job.history.empty()) {
        throw Error("job " + job.id + " cannot move from " + to_string(job.status) + " to " + to_string(s));
    }
    job.status = s;
    job.history.push_back(s);
}

std::string JobQueue::submit(const std::string& kind, const json& request, Runner runner) {
    std::string id;
    {
        std::lock_guard lock(mu_);
        if (stop_) throw Error("job queue is shut down");
        char buf[32];
        std::snprintf(buf, sizeof buf, "job-%06lld", static_cast<long long>(next_id_++));
        id = buf;
        Job job;
        job.id = id;
        job.kind = kind;
        job.request = request;
        set_status(job, JobStatus::queued);
        jobs_.emplace(id, std::move(job));
        pending_.emplace_back(id, std::move(runner));
    }
    cv_.notify_all();
    return id;
}

bool JobQueue::lookup(const std::string& id, Job& out) const {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return false;
    out = it->second;
    return true;
}

void JobQueue::wait_idle() {
    std::unique_lock lock(mu_);
    idle_cv_.wait(lock, [&] { return stop_ || (pending_.empty() && !busy_); });
}

void JobQueue::worker_loop() {
    for (;;) {
        std::string id;
        Runner runner;
        Job snapshot;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || !pending_.empty(); });
            if (stop_) break;
            id = pending_.front().first;
            runner = std::move(pending_.front().second);
            pending_.pop_front();
            busy_ = true;
            Job& job = jobs_.at(id);
            set_status(job, JobStatus::running);
            snapshot = job;
        }
        auto log = [&](const std::string& line) {
            std::lock_guard lock(mu_);
            jobs_.at(id).log.push_back(line);
        };
        json report;
        std::string error;
        try {
            report = runner(snapshot, log);
        } catch (const std::exception& e) {
            error = e.what();
        }
        {
            std::lock_guard lock(mu_);
            Job& job = jobs_.at(id);
            if (error.empty()) {
                job.report = report;
                if (report.contains("artifacts")) job.artifacts = report["artifacts"].get<std::vector<std::string>>();
                set_status(job, JobStatus::done);
            } else {
                job.error = error;
                job.log.push_back("error: " + error);
                set_status(job, JobStatus::failed);
            }
            busy_ = false;
        }
        idle_cv_.notify_all();
    }
    idle_cv_.notify_all();
}

// ---- HTTP ----

namespace {

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(2) + "\n", "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message,
                 std::optional<size_t> byte_offset = std::nullopt) {
    json body = {{"schema_version", pipeline::kSchemaVersion}, {"error", message}};
    if (byte_offset) body["byte_offset"] = *byte_offset;
    reply(res, status, body);
}

/// Runs a handler, mapping malformed input to 400 and anything else to 500.
void guarded(httplib::Response& res, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const io::JsonSyntaxError& e) {
        reply_error(res, 400, e.what(), e.byte_offset);
    } catch (const pipeline::SchemaError& e) {
        reply_error(res, 400, e.what());
    } catch (const std::exception& e) {
        reply_error(res, 500, e.what());
    }
}

}  // namespace

Service::Service(ServiceOptions options)
    : options_(std::move(options)), server_(std::make_unique<httplib::Server>()), jobs_(std::make_unique<JobQueue>()) {
    // httplib's default also sets SO_REUSEPORT, which would let a second server share a busy port
    server_->set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    });
    install_routes();
}

Service::~Service() {
    stop();
    jobs_->shutdown();
}

void Service::install_routes() {
    server_->Post("/api/plan", [](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const json request = io::parse_json(req.body, "request body");
            res.status = 200;
            res.set_content(pipeline::plan_response_body(request), "application/json");
        });
    });

    server_->Post("/api/render", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const json body = io::parse_json(req.body, "request body");
            pipeline::RenderRequest r = pipeline::RenderRequest::from_json(body);
            pipeline::check_render_inputs(r);
            const std::string id = jobs_->submit("render", r.to_json(), [r](Job& job, const auto& log) mutable {
                if (r.out_dir.empty()) r.out_dir = std::filesystem::path("jobs") / job.id;
                log("rendering " + r.plan.string() + " into " + r.out_dir.string());
                json report = pipeline::run_render(r);
                log("done");
                return report;
            });
            reply(res, 202, {{"schema_version", pipeline::kSchemaVersion}, {"job_id", id}, {"status", "queued"}});
        });
    });

    server_->Post("/api/train", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const json body = io::parse_json(req.body, "request body");
            if (!body.is_object() || !body.contains("config") || !body.contains("out_checkpoint")) {
                throw pipeline::SchemaError("train request needs 'config' and 'out_checkpoint'");
            }
            pipeline::TrainRequest t;
            t.config = body["config"];
            t.out_checkpoint = body["out_checkpoint"].get<std::string>();
            if (body.contains("init") && body["init"].is_string()) t.init = body["init"].get<std::string>();
            if (body.contains("loss_csv") && body["loss_csv"].is_string()) t.loss_csv = body["loss_csv"].get<std::string>();
            pipeline::check_train_request(t);
            const std::string id = jobs_->submit("train", body, [t](Job&, const auto& log) {
                json summary = pipeline::run_train(t, log);
                summary["artifacts"] = {summary["checkpoint"]};
                return summary;
            });
            reply(res, 202, {{"schema_version", pipeline::kSchemaVersion}, {"job_id", id}, {"status", "queued"}});
        });
    });

    server_->Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        Job job;
        if (!jobs_->lookup(req.matches[1], job)) return reply_error(res, 404, "unknown job " + std::string(req.matches[1]));
        reply(res, 200, job.to_json());
    });

    server_->Get(R"(/api/report/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        Job job;
        if (!jobs_->lookup(req.matches[1], job)) return reply_error(res, 404, "unknown job " + std::string(req.matches[1]));
        json body = {{"schema_version", pipeline::kSchemaVersion},
                     {"job_id", job.id},
                     {"status", to_string(job.status)}};
        if (job.status == JobStatus::done) {
            body["report"] = job.report;
            return reply(res, 200, body);
        }
        if (job.status == JobStatus::failed) body["error"] = job.error;
        reply(res, job.status == JobStatus::failed ? 200 : 202, body);
    });
}

void Service::start() {
    if (options_.port == 0) {
        const int p = server_->bind_to_any_port(options_.host);
        if (p <= 0) throw Error("cannot bind any port on " + options_.host);
        options_.port = p;
    } else if (!server_->bind_to_port(options_.host, options_.port)) {
        throw PortBusy(options_.port);
    }
    listener_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

void Service::wait() {
    if (listener_.joinable()) listener_.join();
}

void Service::stop() {
    if (server_) server_->stop();
    if (listener_.joinable()) listener_.join();
}

}  // namespace lipedit::service
