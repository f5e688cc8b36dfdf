// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// File-level entry points shared by the command line and the local service:
// planning requests, toy clip bundles, rendering, evaluation and training runs.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "lipedit/audio.hpp"
#include "lipedit/inference.hpp"
#include "lipedit/toy.hpp"

namespace lipedit::pipeline {

inline constexpr int kSchemaVersion = 1;

/// Request rejected before any work starts (HTTP 400, CLI exit 1).
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Pure: transcript + edited text/transcript -> edit script, ops and latent plan.
nlohmann::json plan_request(const nlohmann::json& request);
/// Serialized plan response; the CLI writes exactly these bytes.
std::string plan_response_body(const nlohmann::json& request);

/// Source latent count covering a transcript of `duration_s` seconds.
int64_t latents_for_duration(double duration_s, double fps);

// ---- artifacts ----

struct AudioBundle {
    audio::AudioFeatures features;
    toy::AudioTrack track;
};

void write_audio(const std::filesystem::path& path, const AudioBundle& audio);
AudioBundle read_audio(const std::filesystem::path& path);

struct SourceClip {
    Tensor latents;  // [N, rows, cols, C]
    double fps = 24.0;
    toy::IdentitySpec identity;
};

void write_source(const std::filesystem::path& path, const SourceClip& clip);
SourceClip read_source(const std::filesystem::path& path);

void write_video(const std::filesystem::path& path, const Tensor& video, double fps);
std::pair<Tensor, double> read_video(const std::filesystem::path& path);

struct GenOptions {
    uint64_t seed = 0;
    double seconds = 6.0;
    double fps = 24.0;
};

/// Writes source.eyts, video.eyts, audio.eyts and identity.json into `dir`; returns a manifest.
nlohmann::json generate_clip(const std::filesystem::path& dir, const GenOptions& options);

/// Toy audio with the same voice as a clip, long enough for `seconds`.
AudioBundle generate_audio(uint64_t seed, double seconds);

// ---- render / eval / train ----

struct RenderRequest {
    std::filesystem::path plan;
    std::filesystem::path checkpoint;
    std::filesystem::path audio;
    std::filesystem::path source;
    std::filesystem::path out_dir;
    std::optional<timeline::MaskMode> mode;
    uint64_t seed = 0;
    infer::InferenceSchedule schedule;
    bool evaluate = true;  // metrics against the render audio and the decoded source

    static RenderRequest from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// SchemaError when a referenced file is missing.
void check_render_inputs(const RenderRequest& request);

/// Checks files, fps and channel layout before any compute, then renders. Writes
/// latents.eyts, video.eyts and report.json under out_dir and returns the report.
nlohmann::json run_render(const RenderRequest& request);

nlohmann::json run_eval(const std::filesystem::path& video, const std::filesystem::path& audio,
                        const std::filesystem::path& identity, const std::optional<std::filesystem::path>& reference);

struct TrainRequest {
    nlohmann::json config;                      // TrainConfig JSON
    std::optional<std::filesystem::path> init;  // previous-stage or resume checkpoint
    std::filesystem::path out_checkpoint;
    std::optional<std::filesystem::path> loss_csv;
};

/// SchemaError for an invalid config or a missing initial checkpoint.
void check_train_request(const TrainRequest& request);

/// Runs one stage; returns a summary (steps, final loss, checkpoint path).
nlohmann::json run_train(const TrainRequest& request, const std::function<void(const std::string&)>& log = {});

}  // namespace lipedit::pipeline
