// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// lipedit: plan, gen, gen-audio, train, render, eval and serve.
// Exit codes: 0 success, 1 failure, 2 malformed JSON input, 3 port busy.

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "lipedit/io.hpp"
#include "lipedit/pipeline.hpp"
#include "lipedit/service.hpp"
#include "lipedit/transcript.hpp"

using namespace lipedit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitMalformedJson = 2;
constexpr int kExitPortBusy = 3;

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::cout << text;
    } else {
        io::write_text(io::resolve(out), text);
    }
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

struct PlanArgs {
    std::string transcript, edited_text, edited_transcript, out, request, insert_durations, mode;
    double fps = 0.0;
};

int cmd_plan(const PlanArgs& a) {
    json req;
    if (!a.request.empty()) {
        req = io::read_json(io::resolve(a.request));
    } else {
        if (a.transcript.empty()) throw pipeline::SchemaError("plan needs --transcript or --request");
        req["schema_version"] = pipeline::kSchemaVersion;
        req["transcript"] = io::read_json(io::resolve(a.transcript));
        if (!a.edited_text.empty()) req["edited_text"] = a.edited_text;
        if (!a.edited_transcript.empty()) req["edited_transcript"] = io::read_json(io::resolve(a.edited_transcript));
        if (a.fps > 0.0) req["fps"] = a.fps;
        if (!a.insert_durations.empty()) req["insert_durations"] = parse_list(a.insert_durations);
        if (!a.mode.empty()) req["options"] = {{"render_mode", a.mode}};
    }
    emit(pipeline::plan_response_body(req), a.out);
    return 0;
}

struct TrainArgs {
    std::string config, out, init, loss_csv;
    int64_t steps = -1;
    int64_t seed = -1;
    int stage = -1;
};

int cmd_train(const TrainArgs& a) {
    json config = a.config.empty() ? json::object() : io::read_json(io::resolve(a.config));
    if (a.stage >= 0) config["stage"] = a.stage;
    if (a.steps >= 0) config["steps"] = a.steps;
    if (a.seed >= 0) config["seed"] = a.seed;
    pipeline::TrainRequest req{config, std::nullopt, a.out, std::nullopt};
    if (!a.init.empty()) req.init = a.init;
    if (!a.loss_csv.empty()) req.loss_csv = a.loss_csv;
    pipeline::check_train_request(req);
    const json summary = pipeline::run_train(req, [](const std::string& line) { std::cerr << line << "\n"; });
    std::cout << summary.dump(2) << "\n";
    return 0;
}

struct RenderArgs {
    std::string plan, checkpoint, audio, source, mode, out = "render", schedule;
    uint64_t seed = 0;
    bool no_cache = false, no_shift = false, circular = false;
};

int cmd_render(const RenderArgs& a) {
    pipeline::RenderRequest r;
    r.plan = a.plan;
    r.checkpoint = a.checkpoint;
    r.audio = a.audio;
    r.source = a.source;
    r.out_dir = a.out;
    r.seed = a.seed;
    if (!a.mode.empty()) r.mode = timeline::mask_mode_from_string(a.mode);
    if (!a.schedule.empty()) r.schedule = infer::InferenceSchedule::from_json(io::read_json(io::resolve(a.schedule)));
    if (a.no_cache) r.schedule.cache_enabled = false;
    if (a.no_shift) r.schedule.shift_enabled = false;
    if (a.circular) r.schedule.circular = true;
    pipeline::check_render_inputs(r);
    const json report = pipeline::run_render(r);
    std::cout << report.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transcript-driven talking-head editing on a synthetic latent video world"};
    app.require_subcommand(1);

    PlanArgs plan;
    auto* p = app.add_subcommand("plan", "Diff an edited transcript and write edit ops plus the latent plan");
    p->add_option("--transcript", plan.transcript, "Word-timestamped transcript JSON");
    p->add_option("--edited-text", plan.edited_text, "Edited script as plain text");
    p->add_option("--edited-transcript", plan.edited_transcript, "Edited transcript JSON with word timings");
    p->add_option("--fps", plan.fps, "Video frame rate (default: transcript fps_hint or 24)");
    p->add_option("--insert-durations", plan.insert_durations, "Comma-separated seconds per inserted span");
    p->add_option("--mode", plan.mode, "Render mode for kept latents: lip|face|head|full|none");
    p->add_option("--request", plan.request, "Full plan request JSON (same body as POST /api/plan)");
    p->add_option("--out", plan.out, "Output file (default stdout)");

    pipeline::GenOptions gen;
    std::string gen_dir = "clip";
    auto* g = app.add_subcommand("gen", "Generate a synthetic source clip bundle");
    g->add_option("--seed", gen.seed);
    g->add_option("--seconds", gen.seconds);
    g->add_option("--fps", gen.fps);
    g->add_option("--out-dir", gen_dir);

    uint64_t audio_seed = 0;
    double audio_seconds = 6.0;
    std::string audio_out = "audio.eyts";
    auto* ga = app.add_subcommand("gen-audio", "Generate a synthetic audio track");
    ga->add_option("--seed", audio_seed);
    ga->add_option("--seconds", audio_seconds);
    ga->add_option("--out", audio_out);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Run one training stage");
    t->add_option("--config", train.config, "Training config JSON (stage defaults for missing keys)");
    t->add_option("--out-checkpoint", train.out, "Checkpoint path")->required();
    t->add_option("--init", train.init, "Previous-stage or resume checkpoint");
    t->add_option("--loss-csv", train.loss_csv, "Write per-step losses");
    t->add_option("--stage", train.stage, "Override the config stage");
    t->add_option("--steps", train.steps, "Override the step count");
    t->add_option("--seed", train.seed, "Override the seed");

    RenderArgs render;
    auto* r = app.add_subcommand("render", "Render an edit plan");
    r->add_option("--plan", render.plan, "Plan JSON (plan response or bare plan)")->required();
    r->add_option("--checkpoint", render.checkpoint)->required();
    r->add_option("--audio", render.audio, "Audio container for the edited timeline")->required();
    r->add_option("--source", render.source, "Source latent container")->required();
    r->add_option("--mode", render.mode, "Override the render mode of edited kept latents");
    r->add_option("--out", render.out, "Output directory");
    r->add_option("--seed", render.seed);
    r->add_option("--schedule", render.schedule, "Inference schedule JSON");
    r->add_flag("--no-cache", render.no_cache);
    r->add_flag("--no-shift", render.no_shift);
    r->add_flag("--circular", render.circular);

    std::string ev_video, ev_audio, ev_spec, ev_reference, ev_out;
    auto* e = app.add_subcommand("eval", "Measure sync, identity drift and outside-region error");
    e->add_option("--video", ev_video)->required();
    e->add_option("--audio", ev_audio)->required();
    e->add_option("--spec", ev_spec, "Identity JSON")->required();
    e->add_option("--reference", ev_reference, "Reference video for the outside-region error");
    e->add_option("--out", ev_out);

    service::ServiceOptions serve;
    auto* s = app.add_subcommand("serve", "Serve the JSON API");
    s->add_option("--port", serve.port);
    s->add_option("--host", serve.host);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    }

    try {
        if (p->parsed()) return cmd_plan(plan);
        if (g->parsed()) {
            std::cout << pipeline::generate_clip(io::resolve(gen_dir), gen).dump(2) << "\n";
            return 0;
        }
        if (ga->parsed()) {
            pipeline::write_audio(io::resolve(audio_out), pipeline::generate_audio(audio_seed, audio_seconds));
            return 0;
        }
        if (t->parsed()) return cmd_train(train);
        if (r->parsed()) return cmd_render(render);
        if (e->parsed()) {
            std::optional<fs::path> ref;
            if (!ev_reference.empty()) ref = ev_reference;
            emit(pipeline::run_eval(ev_video, ev_audio, ev_spec, ref).dump(2) + "\n", ev_out);
            return 0;
        }
        if (s->parsed()) {
            service::Service svc(serve);
            svc.start();
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << "listening on http://" << serve.host << ":" << svc.port() << "\n";
            while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
            svc.stop();
            return 0;
        }
    } catch (const io::JsonSyntaxError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitMalformedJson;
    } catch (const transcript::ParseError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return err.byte_offset ? kExitMalformedJson : kExitFailure;
    } catch (const service::PortBusy& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitPortBusy;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
