// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include <httplib.h>

#include "doctest.h"
#include "lipedit/io.hpp"
#include "lipedit/pipeline.hpp"
#include "lipedit/service.hpp"
#include "lipedit/training.hpp"

using namespace lipedit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json example_transcript() {
    const char* words[] = {"This", "feature", "rocks", "and", "we", "will", "most", "likely", "launch", "it."};
    const double starts[] = {0.0, 0.3, 0.8, 1.2, 1.4, 1.6, 1.9, 2.15, 2.5, 2.9};
    const double ends[] = {0.25, 0.75, 1.15, 1.35, 1.55, 1.85, 2.1, 2.4, 2.85, 3.1};
    json w = json::array();
    for (int i = 0; i < 10; ++i) w.push_back({{"text", words[i]}, {"start_s", starts[i]}, {"end_s", ends[i]}});
    return {{"schema_version", 1}, {"words", w}};
}

json example_request() {
    return {{"schema_version", 1},
            {"transcript", example_transcript()},
            {"edited_text", "This awesome new feature rocks and we will launch it next week."},
            {"insert_durations", {0.9, 0.6}},
            {"fps", 24.0}};
}

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "lipedit_test_service" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json wait_for_job(httplib::Client& cli, const std::string& id) {
    for (int i = 0; i < 6000; ++i) {
        auto res = cli.Get("/api/jobs/" + id);
        REQUIRE(res);
        const json j = json::parse(res->body);
        if (j["status"] == "done" || j["status"] == "failed") return j;
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    FAIL("job did not finish");
    return {};
}

}  // namespace

TEST_CASE("plan endpoint returns the edit ops and is byte-stable") {
    service::Service svc({"127.0.0.1", 0});
    svc.start();
    httplib::Client cli("127.0.0.1", svc.port());
    const std::string body = example_request().dump();
    auto a = cli.Post("/api/plan", body, "application/json");
    auto b = cli.Post("/api/plan", body, "application/json");
    REQUIRE(a);
    REQUIRE(b);
    CHECK(a->status == 200);
    CHECK(a->body == b->body);
    CHECK(a->body == pipeline::plan_response_body(example_request()));
    const json j = json::parse(a->body);
    const json& ops = j["ops"]["ops"];
    REQUIRE(ops.size() == 3);
    CHECK(ops[0]["kind"] == "addition");
    CHECK(ops[0]["duration_s"] == 0.9);
    CHECK(ops[1]["kind"] == "removal");
    CHECK(ops[1]["duration_s"] == -0.5);
    CHECK(ops[2]["kind"] == "addition");
    CHECK(ops[2]["duration_s"] == 0.6);
    CHECK(j["schema_version"] == 1);

    std::vector<std::thread> threads;
    std::vector<std::string> bodies(8);
    for (size_t i = 0; i < bodies.size(); ++i) {
        threads.emplace_back([&, i] {
            httplib::Client c("127.0.0.1", svc.port());
            auto r = c.Post("/api/plan", body, "application/json");
            if (r) bodies[i] = r->body;
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& s : bodies) CHECK(s == a->body);
}

TEST_CASE("identical transcripts plan an identity edit") {
    json req = example_request();
    req["edited_text"] = "This feature rocks and we will most likely launch it.";
    req.erase("insert_durations");
    const json j = pipeline::plan_request(req);
    CHECK(j["ops"]["ops"].empty());
    CHECK(j["plan"]["entries"].size() == j["num_latents"].get<size_t>());
}

TEST_CASE("bad requests get 400 and unknown jobs 404") {
    service::Service svc({"127.0.0.1", 0});
    svc.start();
    httplib::Client cli("127.0.0.1", svc.port());
    auto malformed = cli.Post("/api/plan", "{\"transcript\": [1,,2]}", "application/json");
    REQUIRE(malformed);
    CHECK(malformed->status == 400);
    CHECK(json::parse(malformed->body)["byte_offset"] == 19);
    auto missing = cli.Post("/api/plan", "{\"edited_text\": \"hi\"}", "application/json");
    REQUIRE(missing);
    CHECK(missing->status == 400);
    CHECK(json::parse(missing->body)["error"].get<std::string>().find("transcript") != std::string::npos);
    json bad_version = example_request();
    bad_version["schema_version"] = 9;
    CHECK(cli.Post("/api/plan", bad_version.dump(), "application/json")->status == 400);
    json bad_render = {{"plan", "nope.json"}, {"checkpoint", "x"}, {"audio", "y"}, {"source", "z"}};
    CHECK(cli.Post("/api/render", bad_render.dump(), "application/json")->status == 400);
    CHECK(cli.Post("/api/render", "{}", "application/json")->status == 400);
    CHECK(cli.Post("/api/train", "{\"config\": {\"stage\": 7}, \"out_checkpoint\": \"a\"}", "application/json")->status == 400);
    CHECK(cli.Get("/api/jobs/job-999999")->status == 404);
    CHECK(cli.Get("/api/report/job-999999")->status == 404);
}

TEST_CASE("a busy port is reported as a conflict") {
    service::Service first({"127.0.0.1", 0});
    first.start();
    service::Service second({"127.0.0.1", first.port()});
    CHECK_THROWS_AS(second.start(), service::PortBusy);
    try {
        second.start();
    } catch (const service::PortBusy& e) {
        CHECK(std::string(e.what()).find("409") != std::string::npos);
    }
}

TEST_CASE("job states only move forward") {
    service::JobQueue q;
    std::vector<std::string> ids;
    for (int i = 0; i < 20; ++i) {
        ids.push_back(q.submit("render", json::object(), [i](service::Job&, const auto& log) -> json {
            log("working");
            if (i % 3 == 0) throw Error("planned failure");
            return {{"artifacts", {"a.eyts"}}};
        }));
    }
    q.wait_idle();
    for (size_t i = 0; i < ids.size(); ++i) {
        service::Job job;
        REQUIRE(q.lookup(ids[i], job));
        REQUIRE(job.history.size() == 3);
        CHECK(job.history[0] == service::JobStatus::queued);
        CHECK(job.history[1] == service::JobStatus::running);
        CHECK(job.history[2] == (i % 3 == 0 ? service::JobStatus::failed : service::JobStatus::done));
        if (i % 3 == 0) {
            CHECK(job.error == "planned failure");
        } else {
            CHECK(job.artifacts == std::vector<std::string>{"a.eyts"});
        }
    }
    service::Job none;
    CHECK_FALSE(q.lookup("job-x", none));
}

TEST_CASE("render jobs run through the queue and reports embed the seed") {
    const fs::path dir = scratch_dir("render");
    setenv("EY_DATA_DIR", dir.c_str(), 1);
    pipeline::generate_clip(dir / "clip", {4, 3.0, 24.0});
    model::DenoiserConfig mc;
    train::Checkpoint ck{model::Denoiser(mc, 3), train::AdamW(), 1, 0, 24.0, json::object()};
    train::save_checkpoint(dir / "model.eyts", ck);
    const auto source = pipeline::read_source(dir / "clip" / "source.eyts");
    io::write_text(dir / "plan.json", timeline::to_json(timeline::identity_plan(source.latents.dim(0), 24.0)).dump());

    service::Service svc({"127.0.0.1", 0});
    svc.start();
    httplib::Client cli("127.0.0.1", svc.port());
    const json req = {{"plan", "plan.json"},       {"checkpoint", "model.eyts"}, {"audio", "clip/audio.eyts"},
                      {"source", "clip/source.eyts"}, {"seed", 1234},            {"out_dir", "out"}};
    auto res = cli.Post("/api/render", req.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 202);
    const std::string id = json::parse(res->body)["job_id"];
    const json job = wait_for_job(cli, id);
    CHECK(job["status"] == "done");
    CHECK(job["history"] == json({"queued", "running", "done"}));
    auto rep = cli.Get("/api/report/" + id);
    REQUIRE(rep);
    CHECK(rep->status == 200);
    const json report = json::parse(rep->body)["report"];
    CHECK(report["seed"] == 1234);
    CHECK(fs::exists(dir / "out" / "report.json"));
    CHECK(fs::exists(dir / "out" / "video.eyts"));
    // outside the lip mask the render keeps the source latents bit for bit
    const auto rendered = pipeline::read_source(dir / "out" / "latents.eyts");
    const auto boxes = toy::lower_face_boxes(source.identity, 24.0, timeline::frames_for_latents(source.latents.dim(0)));
    const auto pc = infer::plan_conditioning(timeline::identity_plan(source.latents.dim(0), 24.0), boxes,
                                             toy::cell_grid(), source.latents.dim(0));
    for (size_t cell = 0; cell < pc.cell_noise.size(); ++cell) {
        if (pc.cell_noise[cell] != 0.0) continue;
        for (size_t k = 0; k < 4; ++k) CHECK(rendered.latents[cell * 4 + k] == source.latents[cell * 4 + k]);
    }

    // fps mismatch fails before any compute
    train::Checkpoint other{model::Denoiser(mc, 3), train::AdamW(), 1, 0, 25.0, json::object()};
    train::save_checkpoint(dir / "model25.eyts", other);
    json req25 = req;
    req25["checkpoint"] = "model25.eyts";
    const std::string id25 = json::parse(cli.Post("/api/render", req25.dump(), "application/json")->body)["job_id"];
    const json failed = wait_for_job(cli, id25);
    CHECK(failed["status"] == "failed");
    CHECK(failed["error"].get<std::string>().find("fps mismatch") != std::string::npos);
    unsetenv("EY_DATA_DIR");
}

#ifdef LIPEDIT_CLI
TEST_CASE("command line plan matches the endpoint and rejects malformed json") {
    const fs::path dir = scratch_dir("cli");
    const std::string cli = LIPEDIT_CLI;
    io::write_text(dir / "t.json", example_transcript().dump());
    const std::string cmd = cli + " plan --transcript " + (dir / "t.json").string() +
                            " --edited-text 'This awesome new feature rocks and we will launch it next week.'" +
                            " --insert-durations 0.9,0.6 --fps 24 --out " + (dir / "plan.json").string();
    REQUIRE(run(cmd) == 0);
    CHECK(io::read_text(dir / "plan.json") == pipeline::plan_response_body(example_request()));

    io::write_text(dir / "bad.json", "{\"words\": [");
    CHECK(run(cli + " plan --transcript " + (dir / "bad.json").string() + " --edited-text x 2>/dev/null") == 2);
    CHECK(run(cli + " plan --transcript " + (dir / "missing.json").string() + " --edited-text x 2>/dev/null") == 1);
}

TEST_CASE("command line smoke training writes a loadable checkpoint") {
    const fs::path dir = scratch_dir("train");
    const json config = {{"schema_version", 1},
                         {"stage", 0},
                         {"steps", 200},
                         {"batch", 2},
                         {"corpus", {{"clips", 8}, {"clip_seconds", 3.0}, {"fps", 24.0}, {"seed", 3}}}};
    io::write_text(dir / "config.json", config.dump());
    const std::string cli = LIPEDIT_CLI;
    REQUIRE(run(cli + " train --config " + (dir / "config.json").string() + " --out-checkpoint " +
                (dir / "ck.eyts").string() + " --loss-csv " + (dir / "loss.csv").string() + " >/dev/null 2>&1") == 0);
    const auto ck = train::load_checkpoint(dir / "ck.eyts");
    CHECK(ck.step == 200);
    CHECK(ck.stage == 0);
    CHECK(io::read_text(dir / "loss.csv").rfind("step,loss,stage\n", 0) == 0);

    pipeline::generate_clip(dir / "clip", {9, 2.0, 24.0});
    CHECK(run(cli + " eval --video " + (dir / "clip/video.eyts").string() + " --audio " +
              (dir / "clip/audio.eyts").string() + " --spec " + (dir / "clip/identity.json").string() + " --out " +
              (dir / "eval.json").string()) == 0);
    CHECK(io::read_json(dir / "eval.json")["metrics"]["sync_corr"].get<double>() >= 0.999);
}
#endif
