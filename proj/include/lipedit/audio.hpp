// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Phase-shifted audio feature windows per video frame and their pooling to the
// latent frame rate.

#pragma once

#include <cstdint>

#include "lipedit/autodiff.hpp"
#include "lipedit/tensor.hpp"

namespace lipedit::audio {

struct AudioFeatures {
    Tensor grid;  // [L, B, C]
    double rate_hz = 50.0;

    int64_t length() const { return grid.dim(0); }
    int64_t bands() const { return grid.dim(1); }
    int64_t channels() const { return grid.dim(2); }
    int64_t width() const { return bands() * channels(); }
    double duration_s() const { return static_cast<double>(length()) / rate_hz; }
    void validate() const;
};

/// Window of W features centered on video frame i, linearly interpolated on the
/// grid u_n = i·f_a/f_v + n − (W−1)/2 with indices clamped to the grid. Shape [W, B, C].
Tensor resample_window(const AudioFeatures& features, int64_t frame, double fps, int64_t window);

Tensor add_window_positional(const Tensor& window, const Tensor& positional);

/// Windows of video frames [0, num_frames), flattened to [num_frames, W·B·C].
Tensor frame_windows(const AudioFeatures& features, int64_t num_frames, double fps, int64_t window);

/// Frames whose windows reach past the feature grid would silently clamp; this checks coverage.
bool covers(const AudioFeatures& features, int64_t num_frames, double fps);

/// Pooling weights: index 0 weights latent 0's single frame, indices 1..8 weight the
/// positions inside each 8-frame group. Initialized to the arithmetic mean.
Tensor initial_pool_weights();

/// Learned pooling of per-frame windows [F, K] (frames from 0) to rows [count, K] for
/// latents [first, first + count). Needs F ≥ frames_for_latents(first + count).
ad::Var pool_to_latent_rate(const ad::Var& windows, const ad::Var& pool_weights, int64_t first, int64_t count);

}  // namespace lipedit::audio
