// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/pipeline.hpp"

#include <chrono>
#include <cmath>

#include "lipedit/io.hpp"
#include "lipedit/timeline.hpp"
#include "lipedit/training.hpp"
#include "lipedit/transcript.hpp"

namespace lipedit::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_version(const json& j, const std::string& what) {
    if (!j.contains("schema_version")) return;
    if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != kSchemaVersion) {
        throw SchemaError(what + ": unsupported schema_version " + j["schema_version"].dump());
    }
}

double number_field(const json& j, const char* key, double fallback) {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    if (!j[key].is_number()) throw SchemaError(std::string("'") + key + "' must be a number");
    return j[key].get<double>();
}

timeline::PlanOptions plan_options(const json& j) {
    timeline::PlanOptions o;
    if (j.is_null()) return o;
    if (!j.is_object()) throw SchemaError("'options' must be an object");
    if (j.contains("render_mode")) o.render_mode = timeline::mask_mode_from_string(j["render_mode"].get<std::string>());
    o.t_adjacent = number_field(j, "t_adjacent", o.t_adjacent);
    o.t_edit = number_field(j, "t_edit", o.t_edit);
    o.retime_granularity_s = number_field(j, "retime_granularity_s", o.retime_granularity_s);
    o.adjacent_neighbors = static_cast<int64_t>(number_field(j, "adjacent_neighbors", static_cast<double>(o.adjacent_neighbors)));
    o.tiling_overlap_frames =
        static_cast<int64_t>(number_field(j, "tiling_overlap_frames", static_cast<double>(o.tiling_overlap_frames)));
    if (!(o.t_adjacent >= 0.0 && o.t_adjacent <= 1.0) || !(o.t_edit >= 0.0 && o.t_edit <= 1.0)) {
        throw SchemaError("noise levels must lie in [0, 1]");
    }
    if (o.adjacent_neighbors < 0) throw SchemaError("adjacent_neighbors must be non-negative");
    return o;
}

json build_plan(const json& req) {
    if (!req.is_object()) throw SchemaError("plan request must be a JSON object");
    check_version(req, "plan request");
    if (!req.contains("transcript")) throw SchemaError("plan request needs 'transcript'");
    const transcript::Transcript original = transcript::transcript_from_json(req["transcript"]);
    if (original.words.empty()) throw SchemaError("transcript has no words");

    const bool has_text = req.contains("edited_text");
    const bool has_words = req.contains("edited_transcript");
    if (has_text == has_words) throw SchemaError("give exactly one of 'edited_text' and 'edited_transcript'");

    std::vector<std::string> tokens;
    std::optional<transcript::Transcript> edited;
    if (has_text) {
        if (!req["edited_text"].is_string()) throw SchemaError("'edited_text' must be a string");
        tokens = transcript::tokenize(req["edited_text"].get<std::string>());
    } else {
        edited = transcript::transcript_from_json(req["edited_transcript"]);
        for (const auto& w : edited->words) tokens.push_back(w.text);
    }

    const double fps = number_field(req, "fps", original.fps_hint.value_or(24.0));
    if (!(fps > 0.0)) throw SchemaError("fps must be positive");

    const transcript::EditScript script = transcript::diff_words(original, tokens);
    std::optional<std::vector<double>> durations;
    if (req.contains("insert_durations") && !req["insert_durations"].is_null()) {
        if (!req["insert_durations"].is_array()) throw SchemaError("'insert_durations' must be an array");
        durations = req["insert_durations"].get<std::vector<double>>();
    } else if (edited) {
        durations.emplace();
        for (const auto& sp : script.spans) {
            if (sp.kind != transcript::SpanKind::insert) continue;
            const auto& words = edited->words;
            durations->push_back(words[sp.edit_end - 1].end_s - words[sp.edit_begin].start_s);
        }
    }
    const auto ops = transcript::derive_ops(script, original, durations);

    int64_t num_latents = latents_for_duration(original.words.back().end_s, fps);
    if (req.contains("num_latents")) {
        if (!req["num_latents"].is_number_integer() || req["num_latents"].get<int64_t>() < 1) {
            throw SchemaError("'num_latents' must be a positive integer");
        }
        num_latents = req["num_latents"].get<int64_t>();
    }
    const auto plan = timeline::apply_edit_ops(num_latents, ops, fps, plan_options(req.value("options", json())));
    return {{"schema_version", kSchemaVersion},
            {"fps", fps},
            {"num_latents", num_latents},
            {"script", transcript::to_json(script)},
            {"ops", transcript::ops_to_json(ops)},
            {"plan", timeline::to_json(plan)}};
}

const Tensor& tensor_of(const io::Container& c, const std::string& name, const fs::path& path) {
    if (!c.has(name)) throw Error(path.string() + " has no '" + name + "' tensor");
    return c.get(name);
}

void expect_kind(const io::Container& c, const std::string& kind, const fs::path& path) {
    if (c.tags.value("kind", std::string()) != kind) {
        throw Error(path.string() + " is not a " + kind + " container");
    }
}

fs::path existing(const fs::path& p, const std::string& what) {
    if (p.empty()) throw SchemaError(what + " path is missing");
    const fs::path r = io::resolve(p);
    if (!fs::exists(r)) throw SchemaError(what + " file " + r.string() + " does not exist");
    return r;
}

}  // namespace

json plan_request(const json& request) {
    try {
        return build_plan(request);
    } catch (const SchemaError&) {
        throw;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("invalid plan request: ") + e.what());
    } catch (const Error& e) {
        throw SchemaError(e.what());
    }
}

std::string plan_response_body(const json& request) { return plan_request(request).dump(2) + "\n"; }

int64_t latents_for_duration(double duration_s, double fps) {
    const double latents = duration_s * fps / static_cast<double>(timeline::kTemporalStride);
    return std::max<int64_t>(1, static_cast<int64_t>(std::ceil(latents - 1e-9)));
}

// ---- artifacts ----

void write_audio(const fs::path& path, const AudioBundle& audio) {
    io::Container c;
    c.tags = {{"kind", "audio"},
              {"rate_hz", audio.features.rate_hz},
              {"envelope_rate_hz", audio.track.rate_hz},
              {"duration_s", audio.track.duration_s}};
    c.tensors.push_back({"features", audio.features.grid});
    c.tensors.push_back({"envelope", audio.track.envelope});
    io::write_container(path, c);
}

AudioBundle read_audio(const fs::path& path) {
    const io::Container c = io::read_container(path);
    expect_kind(c, "audio", path);
    AudioBundle a;
    a.features.grid = tensor_of(c, "features", path);
    a.features.rate_hz = c.tags.at("rate_hz").get<double>();
    a.features.validate();
    a.track.envelope = tensor_of(c, "envelope", path);
    a.track.rate_hz = c.tags.at("envelope_rate_hz").get<double>();
    a.track.duration_s = c.tags.at("duration_s").get<double>();
    return a;
}

void write_source(const fs::path& path, const SourceClip& clip) {
    io::Container c;
    c.tags = {{"kind", "source"}, {"fps", clip.fps}, {"identity", toy::to_json(clip.identity)}};
    c.tensors.push_back({"latents", clip.latents});
    io::write_container(path, c);
}

SourceClip read_source(const fs::path& path) {
    const io::Container c = io::read_container(path);
    expect_kind(c, "source", path);
    SourceClip s;
    s.latents = tensor_of(c, "latents", path);
    s.fps = c.tags.at("fps").get<double>();
    s.identity = toy::identity_from_json(c.tags.at("identity"));
    if (s.latents.rank() != 4) throw Error(path.string() + ": source latents must be [N, rows, cols, C]");
    return s;
}

void write_video(const fs::path& path, const Tensor& video, double fps) {
    io::Container c;
    c.tags = {{"kind", "video"}, {"fps", fps}};
    c.tensors.push_back({"video", video});
    io::write_container(path, c);
}

std::pair<Tensor, double> read_video(const fs::path& path) {
    const io::Container c = io::read_container(path);
    expect_kind(c, "video", path);
    return {tensor_of(c, "video", path), c.tags.at("fps").get<double>()};
}

AudioBundle generate_audio(uint64_t seed, double seconds) {
    const auto g = toy::gen_audio(seed, seconds + 0.5);
    return {g.features, g.track};
}

json generate_clip(const fs::path& dir, const GenOptions& options) {
    const train::Clip clip = train::make_clip(options.seed, options.seconds, options.fps, model::DenoiserConfig{});
    const int64_t N = clip.num_latents();
    const int64_t F = timeline::frames_for_latents(N);
    fs::create_directories(dir);
    write_source(dir / "source.eyts", {clip.latents, options.fps, clip.identity});
    write_video(dir / "video.eyts", toy::render_clip(clip.identity, clip.audio.track, options.fps, F), options.fps);
    write_audio(dir / "audio.eyts", {clip.audio.features, clip.audio.track});
    io::write_text(dir / "identity.json", toy::to_json(clip.identity).dump(2) + "\n");
    json manifest = {{"schema_version", kSchemaVersion},
                     {"seed", options.seed},
                     {"fps", options.fps},
                     {"num_latents", N},
                     {"num_frames", F},
                     {"duration_s", static_cast<double>(F) / options.fps},
                     {"files", {"source.eyts", "video.eyts", "audio.eyts", "identity.json"}}};
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

// ---- render / eval / train ----

RenderRequest RenderRequest::from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("render request must be a JSON object");
    check_version(j, "render request");
    RenderRequest r;
    try {
        for (const char* key : {"plan", "checkpoint", "audio", "source"}) {
            if (!j.contains(key) || !j[key].is_string()) throw SchemaError(std::string("render request needs '") + key + "'");
        }
        r.plan = j["plan"].get<std::string>();
        r.checkpoint = j["checkpoint"].get<std::string>();
        r.audio = j["audio"].get<std::string>();
        r.source = j["source"].get<std::string>();
        r.out_dir = j.value("out_dir", std::string());
        if (j.contains("mode") && !j["mode"].is_null()) r.mode = timeline::mask_mode_from_string(j["mode"].get<std::string>());
        r.seed = j.value("seed", uint64_t{0});
        if (j.contains("schedule")) r.schedule = infer::InferenceSchedule::from_json(j["schedule"]);
        r.evaluate = j.value("evaluate", true);
    } catch (const SchemaError&) {
        throw;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("invalid render request: ") + e.what());
    } catch (const Error& e) {
        throw SchemaError(e.what());
    }
    return r;
}

json RenderRequest::to_json() const {
    return {{"schema_version", kSchemaVersion},
            {"plan", plan.string()},
            {"checkpoint", checkpoint.string()},
            {"audio", audio.string()},
            {"source", source.string()},
            {"out_dir", out_dir.string()},
            {"mode", mode ? json(timeline::to_string(*mode)) : json()},
            {"seed", seed},
            {"schedule", schedule.to_json()},
            {"evaluate", evaluate}};
}

void check_render_inputs(const RenderRequest& req) {
    existing(req.plan, "plan");
    existing(req.checkpoint, "checkpoint");
    existing(req.audio, "audio");
    existing(req.source, "source");
}

json run_render(const RenderRequest& req) {
    const fs::path plan_path = existing(req.plan, "plan");
    const fs::path ckpt_path = existing(req.checkpoint, "checkpoint");
    const fs::path audio_path = existing(req.audio, "audio");
    const fs::path source_path = existing(req.source, "source");
    const fs::path out = io::resolve(req.out_dir.empty() ? fs::path("render") : req.out_dir);

    json pj = io::read_json(plan_path);
    if (pj.contains("plan")) pj = pj["plan"];
    timeline::LatentTimelinePlan plan = timeline::plan_from_json(pj);
    const train::Checkpoint ck = train::load_checkpoint(ckpt_path);
    const AudioBundle audio = read_audio(audio_path);
    const SourceClip source = read_source(source_path);
    const auto& mc = ck.model.config();

    auto same = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)); };
    if (!same(source.fps, plan.fps)) {
        throw Error("fps mismatch: source is " + std::to_string(source.fps) + " fps, plan is " + std::to_string(plan.fps));
    }
    if (!same(ck.fps, plan.fps)) {
        throw Error("fps mismatch: checkpoint was trained at " + std::to_string(ck.fps) + " fps, plan is " +
                    std::to_string(plan.fps));
    }
    if (audio.features.bands() != mc.audio_bands || audio.features.channels() != mc.audio_channels) {
        throw Error("audio channel mismatch: features have " + std::to_string(audio.features.bands()) + "x" +
                    std::to_string(audio.features.channels()) + ", model expects " + std::to_string(mc.audio_bands) +
                    "x" + std::to_string(mc.audio_channels));
    }
    if (source.latents.dim(3) != mc.latent_channels) throw Error("latent channel mismatch between source and model");
    const int64_t frames = timeline::frames_for_latents(plan.size());
    if (!audio::covers(audio.features, frames, plan.fps)) {
        throw Error("audio lasts " + std::to_string(audio.features.duration_s()) + " s but the edit needs " +
                    std::to_string(frames) + " frames at " + std::to_string(plan.fps) + " fps");
    }
    if (req.mode) {
        for (auto& e : plan.entries) {
            if (!e.inserted && e.noise_level > 0.0) e.mask_mode = *req.mode;
        }
    }

    const int64_t N = source.latents.dim(0);
    const auto boxes = toy::lower_face_boxes(source.identity, source.fps, timeline::frames_for_latents(N));
    infer::RenderOptions opt;
    opt.seed = req.seed;
    opt.expected_fps = ck.fps;
    infer::EvalContext ev{source.identity, audio.track, toy::decode(source.latents)};
    auto result = infer::run_edit_inference(plan, ck.model, source.latents, boxes, audio.features, req.schedule, opt,
                                            req.evaluate ? &ev : nullptr);

    fs::create_directories(out);
    io::Container lat;
    lat.tags = {{"kind", "source"}, {"fps", plan.fps}, {"identity", toy::to_json(source.identity)}};
    lat.tensors.push_back({"latents", result.latents});
    io::write_container(out / "latents.eyts", lat);
    write_video(out / "video.eyts", result.video, plan.fps);
    json report = result.report;
    report["request"] = req.to_json();
    report["checkpoint"] = {{"stage", ck.stage}, {"step", ck.step}};
    report["artifacts"] = {(out / "latents.eyts").string(), (out / "video.eyts").string(), (out / "report.json").string()};
    io::write_text(out / "report.json", report.dump(2) + "\n");
    return report;
}

json run_eval(const fs::path& video_path, const fs::path& audio_path, const fs::path& identity_path,
              const std::optional<fs::path>& reference) {
    const auto [video, fps] = read_video(existing(video_path, "video"));
    const AudioBundle audio = read_audio(existing(audio_path, "audio"));
    const toy::IdentitySpec spec = toy::identity_from_json(io::read_json(existing(identity_path, "identity")));
    json metrics = {{"sync_corr", toy::sync_correlation(video, audio.track, spec, fps)},
                    {"identity_drift", toy::identity_drift(video, spec)}};
    if (reference) {
        const auto [ref, ref_fps] = read_video(existing(*reference, "reference video"));
        if (!ref.same_shape(video)) throw Error("reference video shape differs from the evaluated video");
        metrics["outside_region_err"] = toy::outside_region_err(video, ref, spec);
    }
    return {{"schema_version", kSchemaVersion}, {"fps", fps}, {"num_frames", video.dim(0)}, {"metrics", metrics}};
}

namespace {

train::TrainConfig parse_train_config(const json& j) {
    try {
        if (!j.is_object()) throw SchemaError("training config must be a JSON object");
        check_version(j, "training config");
        return train::TrainConfig::from_json(j);
    } catch (const SchemaError&) {
        throw;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("invalid training config: ") + e.what());
    } catch (const Error& e) {
        throw SchemaError(e.what());
    }
}

}  // namespace

void check_train_request(const TrainRequest& req) {
    parse_train_config(req.config);
    if (req.init) existing(*req.init, "initial checkpoint");
    if (req.out_checkpoint.empty()) throw SchemaError("output checkpoint path is missing");
}

json run_train(const TrainRequest& req, const std::function<void(const std::string&)>& log) {
    const train::TrainConfig config = parse_train_config(req.config);
    std::optional<train::Checkpoint> init;
    if (req.init) init = train::load_checkpoint(existing(*req.init, "initial checkpoint"));
    if (init && std::abs(init->fps - config.corpus.fps) > 1e-9) {
        throw Error("fps mismatch: checkpoint was trained at " + std::to_string(init->fps) + " fps, config asks for " +
                    std::to_string(config.corpus.fps));
    }
    const fs::path out = io::resolve(req.out_checkpoint);
    const auto t0 = std::chrono::steady_clock::now();
    const auto corpus = train::make_corpus(config.corpus, config.model);

    std::vector<train::LossRow> rows;
    train::TrainHooks hooks;
    hooks.on_loss = [&](const train::LossRow& r) {
        rows.push_back(r);
        if (log && (r.step % 100 == 0 || r.step == config.steps)) {
            log("stage " + std::to_string(r.stage) + " step " + std::to_string(r.step) + " loss " + std::to_string(r.loss));
        }
    };
    hooks.on_checkpoint = [&](const train::Checkpoint& ck) { train::save_checkpoint(out, ck); };
    const auto ck = train::run_training(config, corpus, std::move(init), hooks);
    if (req.loss_csv) io::write_text(io::resolve(*req.loss_csv), train::loss_csv(rows));

    double tail = 0.0;
    const size_t n = std::min<size_t>(rows.size(), 20);
    for (size_t i = rows.size() - n; i < rows.size(); ++i) tail += rows[i].loss;
    return {{"schema_version", kSchemaVersion},
            {"stage", ck.stage},
            {"steps", ck.step},
            {"seed", config.seed},
            {"final_loss", n ? tail / static_cast<double>(n) : 0.0},
            {"checkpoint", out.string()},
            {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
}

}  // namespace lipedit::pipeline
