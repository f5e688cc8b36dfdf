// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/audio.hpp"

#include <algorithm>
#include <cmath>

#include "lipedit/timeline.hpp"

namespace lipedit::audio {

void AudioFeatures::validate() const {
    if (grid.rank() != 3) throw Error("audio features must be [L, B, C], got " + shape_str(grid.shape()));
    if (length() < 2) throw Error("audio features need at least two time steps");
    if (!(rate_hz > 0)) throw Error("audio feature rate must be positive");
}

Tensor resample_window(const AudioFeatures& features, int64_t frame, double fps, int64_t window) {
    if (window < 1) throw Error("window size must be at least 1");
    if (!(fps > 0)) throw Error("video frame rate must be positive");
    const int64_t L = features.length();
    const int64_t K = features.width();
    Tensor out({window, features.bands(), features.channels()});
    const auto src = features.grid.data();
    auto dst = out.data();
    const double center = static_cast<double>(frame) * features.rate_hz / fps;
    const double half = static_cast<double>(window - 1) / 2.0;
    for (int64_t n = 0; n < window; ++n) {
        const double u = center + (static_cast<double>(n) - half);
        const double fl = std::floor(u);
        const double alpha = u - fl;
        const auto k = static_cast<int64_t>(fl);
        const int64_t k0 = std::clamp<int64_t>(k, 0, L - 1);
        const int64_t k1 = std::clamp<int64_t>(k + 1, 0, L - 1);
        const double* a = src.data() + k0 * K;
        const double* b = src.data() + k1 * K;
        double* o = dst.data() + n * K;
        if (alpha == 0.0) {
            std::copy(a, a + K, o);
        } else {
            for (int64_t c = 0; c < K; ++c) o[c] = (1.0 - alpha) * a[c] + alpha * b[c];
        }
    }
    return out;
}

Tensor add_window_positional(const Tensor& window, const Tensor& positional) {
    if (!window.same_shape(positional)) {
        throw Error("window " + shape_str(window.shape()) + " and positional " + shape_str(positional.shape()) +
                    " differ in shape");
    }
    Tensor out = window;
    auto o = out.data();
    const auto p = positional.data();
    for (size_t i = 0; i < o.size(); ++i) o[i] += p[i];
    return out;
}

Tensor frame_windows(const AudioFeatures& features, int64_t num_frames, double fps, int64_t window) {
    features.validate();
    const int64_t row = window * features.width();
    Tensor out({num_frames, row});
    for (int64_t f = 0; f < num_frames; ++f) {
        const Tensor w = resample_window(features, f, fps, window);
        std::copy(w.data().begin(), w.data().end(), out.data().begin() + f * row);
    }
    return out;
}

bool covers(const AudioFeatures& features, int64_t num_frames, double fps) {
    const double last_frame_s = static_cast<double>(num_frames - 1) / fps;
    return last_frame_s <= static_cast<double>(features.length() - 1) / features.rate_hz + 1e-9;
}

Tensor initial_pool_weights() {
    Tensor w({timeline::kTemporalStride + 1}, 1.0 / static_cast<double>(timeline::kTemporalStride));
    w[0] = 1.0;
    return w;
}

ad::Var pool_to_latent_rate(const ad::Var& windows, const ad::Var& pool_weights, int64_t first, int64_t count) {
    const int64_t frames = windows.shape()[0];
    if (count < 1 || first < 0) throw Error("pooling needs a non-empty latent range");
    const int64_t needed = timeline::frames_for_latents(first + count);
    if (frames < needed) {
        throw Error("audio windows cover " + std::to_string(frames) + " frames but latents up to " +
                    std::to_string(first + count - 1) + " need " + std::to_string(needed));
    }
    auto weight = [&](int64_t k) { return ad::reshape(ad::slice_rows(pool_weights, k, 1), {}); };
    std::vector<ad::Var> parts;
    int64_t begin = first;
    if (first == 0) {
        parts.push_back(ad::mul(ad::slice_rows(windows, 0, 1), weight(0)));
        begin = 1;
    }
    if (begin < first + count) {
        ad::Var rest;
        for (int64_t k = 0; k < timeline::kTemporalStride; ++k) {
            std::vector<int64_t> rows;
            for (int64_t n = begin; n < first + count; ++n) rows.push_back(timeline::latent_to_range(n).start + k);
            ad::Var term = ad::mul(ad::gather_rows(windows, rows), weight(k + 1));
            rest = rest.defined() ? ad::add(rest, term) : term;
        }
        parts.push_back(rest);
    }
    return parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
}

}  // namespace lipedit::audio
