// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural talking-head world: identities, audio envelopes with feature banks,
// a pixel renderer, a fixed causal latent codec and proxy metrics.

#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/audio.hpp"
#include "lipedit/tensor.hpp"
#include "lipedit/timeline.hpp"

namespace lipedit::toy {

using timeline::Box;

inline constexpr int64_t kFrameSize = 32;
/// Side of a codec quadrant; each latent cell holds a 2×2 block of quadrants.
inline constexpr int64_t kQuadrant = 4;
inline constexpr int64_t kCell = 2 * kQuadrant;
inline constexpr int64_t kLatentChannels = 4;

struct IdentitySpec {
    uint64_t seed = 0;
    Box head{8, 4, 24, 28};
    Box lower_face{10, 18, 22, 28};
    Box mouth{12, 20, 20, 24};
    // background: base + amp·sin(fx·x + px)·cos(fy·y + py)
    double bg_base = 0.3, bg_amp = 0.1, bg_fx = 0.4, bg_fy = 0.3, bg_px = 0.0, bg_py = 0.0;
    /// One value per kQuadrant×kQuadrant block of the head rectangle, row-major.
    std::vector<double> head_texture;
    double bob_amplitude_px = 1.0;
    double bob_period_s = 6.0;
    double bob_phase = 0.0;

    int64_t texture_rows() const;
    int64_t texture_cols() const;
    /// Vertical head offset in whole pixels at time t.
    int64_t bob_offset(double t) const;
};

IdentitySpec gen_scene(uint64_t seed);

struct AudioTrack {
    Tensor envelope;  // [L], values in [0, 1]
    double rate_hz = 50.0;
    double duration_s = 0.0;

    /// Linearly interpolated envelope at time t (clamped to the track).
    double at(double t) const;
};

struct AudioConfig {
    double rate_hz = 50.0;
    int64_t bands = 2;
    int64_t channels = 16;
    double lag_step_s = 0.03;
    double feature_noise = 0.01;
};

struct GeneratedAudio {
    AudioTrack track;
    audio::AudioFeatures features;
};

GeneratedAudio gen_audio(uint64_t seed, double duration_s, const AudioConfig& config = {});
/// Feature bank for an existing envelope.
audio::AudioFeatures features_from_track(const AudioTrack& track, uint64_t seed, const AudioConfig& config = {});

/// Pixel video [F, H, W] with mouth aperture 0.1 + 0.8·e(f/fps).
Tensor render_clip(const IdentitySpec& spec, const AudioTrack& track, double fps, int64_t num_frames);
/// Lower-face box of every frame (follows the head bob).
std::vector<Box> lower_face_boxes(const IdentitySpec& spec, double fps, int64_t num_frames);

timeline::CellGrid cell_grid();

/// Latents [N, rows, cols, 4]: causal temporal mean over each latent's frames, then
/// per-cell quadrant means mixed by a 2×2 Hadamard transform.
Tensor encode(const Tensor& video);
/// Tiled encode; tiles overlap by `overlap_frames` and the result equals encode().
Tensor encode_tiled(const Tensor& video, int64_t tile_frames = 64, int64_t overlap_frames = 16);
/// Piecewise-constant temporal expansion and quadrant upsampling.
Tensor decode(const Tensor& latents);

/// Mouth aperture per frame read back from pixels.
std::vector<double> recover_aperture(const Tensor& video, const IdentitySpec& spec, double fps);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct Metrics {
    double sync_corr = 0.0;
    double identity_drift = 0.0;
    double outside_region_err = 0.0;
    nlohmann::json to_json() const;
};

double sync_correlation(const Tensor& video, const AudioTrack& track, const IdentitySpec& spec, double fps);
/// Mean abs deviation of the quadrant-pooled head (mouth excluded) from the identity,
/// minimized per frame over the possible bob offsets.
double identity_drift(const Tensor& video, const IdentitySpec& spec);
/// Mean abs deviation outside the head (widened by the bob amplitude) vs a reference video.
double outside_region_err(const Tensor& video, const Tensor& reference, const IdentitySpec& spec);

Metrics metrics(const Tensor& video, const AudioTrack& track, const IdentitySpec& spec, double fps,
                const Tensor& reference);

nlohmann::json to_json(const IdentitySpec& spec);
IdentitySpec identity_from_json(const nlohmann::json& j);

}  // namespace lipedit::toy
