// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/toy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "lipedit/rng.hpp"

namespace lipedit::toy {

using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

bool inside(const Box& b, double x, double y) { return x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1; }

Box shifted(const Box& b, double dy) { return {b.x0, b.y0 + dy, b.x1, b.y1 + dy}; }

double background(const IdentitySpec& s, int64_t x, int64_t y) {
    return s.bg_base + s.bg_amp * std::sin(s.bg_fx * static_cast<double>(x) + s.bg_px) *
                           std::cos(s.bg_fy * static_cast<double>(y) + s.bg_py);
}

// Pixel of the identity at head offset dy; `mouth_value` fills the mouth, NaN leaves head texture.
double identity_pixel(const IdentitySpec& s, int64_t x, int64_t y, int64_t dy, double mouth_value) {
    const auto fx = static_cast<double>(x) + 0.5;
    const auto fy = static_cast<double>(y) + 0.5;
    const auto d = static_cast<double>(dy);
    if (!std::isnan(mouth_value) && inside(shifted(s.mouth, d), fx, fy)) return mouth_value;
    if (inside(shifted(s.head, d), fx, fy)) {
        const auto r = (y - dy - static_cast<int64_t>(s.head.y0)) / kQuadrant;
        const auto c = (x - static_cast<int64_t>(s.head.x0)) / kQuadrant;
        return s.head_texture[static_cast<size_t>(r * s.texture_cols() + c)];
    }
    return background(s, x, y);
}

void check_video(const Tensor& video) {
    if (video.rank() != 3 || video.dim(1) != kFrameSize || video.dim(2) != kFrameSize) {
        throw Error("toy video must be [F, 32, 32], got " + shape_str(video.shape()));
    }
    if (video.dim(0) < 1) throw Error("toy video needs at least one frame");
}

// Quadrant means of one frame, [Q, Q] with Q = kFrameSize / kQuadrant.
std::vector<double> pool_quadrants(const double* frame) {
    constexpr int64_t Q = kFrameSize / kQuadrant;
    std::vector<double> out(static_cast<size_t>(Q * Q), 0.0);
    for (int64_t y = 0; y < kFrameSize; ++y) {
        for (int64_t x = 0; x < kFrameSize; ++x) {
            out[static_cast<size_t>((y / kQuadrant) * Q + x / kQuadrant)] += frame[y * kFrameSize + x];
        }
    }
    for (auto& v : out) v /= static_cast<double>(kQuadrant * kQuadrant);
    return out;
}

// One latent frame from the frames [start, end) of a video.
void encode_latent(const Tensor& video, int64_t start, int64_t end, double* out) {
    constexpr int64_t Q = kFrameSize / kQuadrant;
    constexpr int64_t P = kFrameSize * kFrameSize;
    std::vector<double> mean(static_cast<size_t>(P), 0.0);
    const auto v = video.data();
    for (int64_t f = start; f < end; ++f) {
        for (int64_t p = 0; p < P; ++p) mean[static_cast<size_t>(p)] += v[static_cast<size_t>(f * P + p)];
    }
    const auto count = static_cast<double>(end - start);
    for (auto& m : mean) m /= count;
    const auto q = pool_quadrants(mean.data());
    const int64_t cells = kFrameSize / kCell;
    for (int64_t r = 0; r < cells; ++r) {
        for (int64_t c = 0; c < cells; ++c) {
            const double q00 = q[static_cast<size_t>((2 * r) * Q + 2 * c)];
            const double q01 = q[static_cast<size_t>((2 * r) * Q + 2 * c + 1)];
            const double q10 = q[static_cast<size_t>((2 * r + 1) * Q + 2 * c)];
            const double q11 = q[static_cast<size_t>((2 * r + 1) * Q + 2 * c + 1)];
            double* o = out + (r * cells + c) * kLatentChannels;
            o[0] = (q00 + q01 + q10 + q11) / 4.0;
            o[1] = (q00 - q01 + q10 - q11) / 4.0;
            o[2] = (q00 + q01 - q10 - q11) / 4.0;
            o[3] = (q00 - q01 - q10 + q11) / 4.0;
        }
    }
}

}  // namespace

int64_t IdentitySpec::texture_rows() const { return static_cast<int64_t>(head.height()) / kQuadrant; }
int64_t IdentitySpec::texture_cols() const { return static_cast<int64_t>(head.width()) / kQuadrant; }

int64_t IdentitySpec::bob_offset(double t) const {
    return static_cast<int64_t>(std::lround(bob_amplitude_px * std::sin(kTwoPi * t / bob_period_s + bob_phase)));
}

IdentitySpec gen_scene(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x5CE7E));
    IdentitySpec s;
    s.seed = seed;
    s.bg_base = rng.uniform(0.15, 0.45);
    s.bg_amp = rng.uniform(0.03, 0.12);
    s.bg_fx = rng.uniform(0.2, 0.9);
    s.bg_fy = rng.uniform(0.2, 0.9);
    s.bg_px = rng.uniform(0.0, kTwoPi);
    s.bg_py = rng.uniform(0.0, kTwoPi);
    s.head_texture.resize(static_cast<size_t>(s.texture_rows() * s.texture_cols()));
    for (auto& v : s.head_texture) v = rng.uniform(0.35, 0.95);
    s.bob_period_s = rng.uniform(4.0, 8.0);
    s.bob_phase = rng.uniform(0.0, kTwoPi);
    return s;
}

double AudioTrack::at(double t) const {
    const int64_t L = envelope.size();
    const double u = std::clamp(t * rate_hz, 0.0, static_cast<double>(L - 1));
    const auto k = static_cast<int64_t>(std::floor(u));
    const double a = u - static_cast<double>(k);
    if (k + 1 >= L) return envelope[L - 1];
    return (1.0 - a) * envelope[k] + a * envelope[k + 1];
}

GeneratedAudio gen_audio(uint64_t seed, double duration_s, const AudioConfig& config) {
    if (!(duration_s > 0)) throw Error("audio duration must be positive");
    Rng rng(derive_seed(seed, 0xA0D10));
    const auto L = static_cast<int64_t>(std::ceil(duration_s * config.rate_hz)) + 1;
    const auto parts = 3 + static_cast<int>(rng.below(4));
    std::vector<double> freq(static_cast<size_t>(parts)), amp(freq.size()), phase(freq.size());
    for (size_t k = 0; k < freq.size(); ++k) {
        freq[k] = rng.uniform(0.25, 1.2);
        amp[k] = rng.uniform(0.5, 1.0);
        phase[k] = rng.uniform(0.0, kTwoPi);
    }
    Tensor env({L});
    for (int64_t i = 0; i < L; ++i) {
        const double t = static_cast<double>(i) / config.rate_hz;
        double s = 0.0;
        for (size_t k = 0; k < freq.size(); ++k) s += amp[k] * std::sin(kTwoPi * freq[k] * t + phase[k]);
        env[i] = s;
    }
    const auto [lo, hi] = std::minmax_element(env.data().begin(), env.data().end());
    const double lo_v = *lo, span = std::max(*hi - *lo, 1e-12);
    for (auto& v : env.data()) v = (v - lo_v) / span;

    GeneratedAudio out;
    out.track = AudioTrack{std::move(env), config.rate_hz, duration_s};
    out.features = features_from_track(out.track, seed, config);
    return out;
}

audio::AudioFeatures features_from_track(const AudioTrack& track, uint64_t seed, const AudioConfig& config) {
    Rng rng(derive_seed(seed, 0xFEA7));
    const int64_t L = track.envelope.size();
    const int64_t B = config.bands, C = config.channels;
    Tensor grid({L, B, C});
    for (int64_t i = 0; i < L; ++i) {
        const double t = static_cast<double>(i) / track.rate_hz;
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t c = 0; c < C; ++c) {
                double v;
                const double lag = static_cast<double>(c) * config.lag_step_s;
                if (b % 2 == 0) {
                    v = track.at(t - lag * static_cast<double>(b / 2 + 1));
                } else {
                    // forward-looking average over [t, t + lag]
                    constexpr int kTaps = 5;
                    v = 0.0;
                    for (int k = 0; k < kTaps; ++k) v += track.at(t + lag * k / (kTaps - 1));
                    v /= kTaps;
                }
                grid[(i * B + b) * C + c] = v + config.feature_noise * rng.normal();
            }
        }
    }
    return {std::move(grid), track.rate_hz};
}

Tensor render_clip(const IdentitySpec& spec, const AudioTrack& track, double fps, int64_t num_frames) {
    if (fps < 24.0 || fps > 60.0) throw Error("toy renderer supports 24..60 fps, got " + std::to_string(fps));
    if (num_frames < 1) throw Error("clip needs at least one frame");
    Tensor video({num_frames, kFrameSize, kFrameSize});
    auto v = video.data();
    for (int64_t f = 0; f < num_frames; ++f) {
        const double t = static_cast<double>(f) / fps;
        const int64_t dy = spec.bob_offset(t);
        const double aperture = 0.1 + 0.8 * track.at(t);
        for (int64_t y = 0; y < kFrameSize; ++y) {
            for (int64_t x = 0; x < kFrameSize; ++x) {
                v[static_cast<size_t>((f * kFrameSize + y) * kFrameSize + x)] = identity_pixel(spec, x, y, dy, aperture);
            }
        }
    }
    return video;
}

std::vector<Box> lower_face_boxes(const IdentitySpec& spec, double fps, int64_t num_frames) {
    std::vector<Box> out;
    out.reserve(static_cast<size_t>(num_frames));
    for (int64_t f = 0; f < num_frames; ++f) {
        out.push_back(shifted(spec.lower_face, static_cast<double>(spec.bob_offset(static_cast<double>(f) / fps))));
    }
    return out;
}

timeline::CellGrid cell_grid() { return {kFrameSize, kFrameSize, kCell}; }

Tensor encode(const Tensor& video) {
    check_video(video);
    const int64_t N = timeline::latents_for_frames(video.dim(0));
    const int64_t cells = kFrameSize / kCell;
    Tensor out({N, cells, cells, kLatentChannels});
    const int64_t stride = cells * cells * kLatentChannels;
    for (int64_t n = 0; n < N; ++n) {
        const auto r = timeline::latent_to_range(n);
        encode_latent(video, r.start, std::min(r.end, video.dim(0)), out.data().data() + n * stride);
    }
    return out;
}

Tensor encode_tiled(const Tensor& video, int64_t tile_frames, int64_t overlap_frames) {
    check_video(video);
    if (overlap_frames < timeline::kTemporalStride || tile_frames <= overlap_frames) {
        throw Error("tiles must be longer than their overlap, and the overlap must hold a full latent");
    }
    const int64_t F = video.dim(0);
    const int64_t N = timeline::latents_for_frames(F);
    const int64_t cells = kFrameSize / kCell;
    const int64_t stride = cells * cells * kLatentChannels;
    Tensor out({N, cells, cells, kLatentChannels});
    int64_t next = 0;  // first latent not yet produced
    for (int64_t tile_start = 0; next < N; tile_start += tile_frames - overlap_frames) {
        const int64_t tile_end = std::min(tile_start + tile_frames, F);
        const Tensor tile = video.slice0(tile_start, tile_end - tile_start);
        for (int64_t n = next; n < N; ++n) {
            const auto r = timeline::latent_to_range(n);
            const int64_t end = std::min(r.end, F);
            if (end > tile_end) break;
            encode_latent(tile, r.start - tile_start, end - tile_start, out.data().data() + n * stride);
            next = n + 1;
        }
    }
    return out;
}

Tensor decode(const Tensor& latents) {
    if (latents.rank() != 4 || latents.dim(3) != kLatentChannels) {
        throw Error("latents must be [N, rows, cols, 4], got " + shape_str(latents.shape()));
    }
    const int64_t N = latents.dim(0), rows = latents.dim(1), cols = latents.dim(2);
    const int64_t H = rows * kCell, W = cols * kCell;
    const int64_t F = timeline::frames_for_latents(N);
    Tensor video({F, H, W});
    std::vector<double> frame(static_cast<size_t>(H * W));
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < cols; ++c) {
                const double* z = latents.data().data() + ((n * rows + r) * cols + c) * kLatentChannels;
                const double q[2][2] = {{z[0] + z[1] + z[2] + z[3], z[0] - z[1] + z[2] - z[3]},
                                        {z[0] + z[1] - z[2] - z[3], z[0] - z[1] - z[2] + z[3]}};
                for (int64_t y = 0; y < kCell; ++y) {
                    for (int64_t x = 0; x < kCell; ++x) {
                        frame[static_cast<size_t>((r * kCell + y) * W + c * kCell + x)] =
                            q[y / kQuadrant][x / kQuadrant];
                    }
                }
            }
        }
        const auto range = timeline::latent_to_range(n);
        for (int64_t f = range.start; f < range.end; ++f) {
            std::copy(frame.begin(), frame.end(), video.data().begin() + f * H * W);
        }
    }
    return video;
}

std::vector<double> recover_aperture(const Tensor& video, const IdentitySpec& spec, double fps) {
    check_video(video);
    std::vector<double> out;
    out.reserve(static_cast<size_t>(video.dim(0)));
    for (int64_t f = 0; f < video.dim(0); ++f) {
        const Box m = shifted(spec.mouth, static_cast<double>(spec.bob_offset(static_cast<double>(f) / fps)));
        double s = 0.0;
        int64_t n = 0;
        for (auto y = static_cast<int64_t>(m.y0); y < static_cast<int64_t>(m.y1); ++y) {
            if (y < 0 || y >= kFrameSize) continue;
            for (auto x = static_cast<int64_t>(m.x0); x < static_cast<int64_t>(m.x1); ++x) {
                s += video[(f * kFrameSize + y) * kFrameSize + x];
                ++n;
            }
        }
        out.push_back(n > 0 ? s / static_cast<double>(n) : 0.0);
    }
    return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw Error("pearson needs two equal series of length >= 2");
    const auto n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
    ma /= n, mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

double sync_correlation(const Tensor& video, const AudioTrack& track, const IdentitySpec& spec, double fps) {
    const auto ap = recover_aperture(video, spec, fps);
    if (static_cast<double>(ap.size() - 1) / fps > track.duration_s + 1e-9) {
        throw Error("video of " + std::to_string(ap.size()) + " frames outlasts the " +
                    std::to_string(track.duration_s) + " s audio track");
    }
    std::vector<double> env(ap.size());
    for (size_t f = 0; f < ap.size(); ++f) env[f] = track.at(static_cast<double>(f) / fps);
    return pearson(ap, env);
}

double identity_drift(const Tensor& video, const IdentitySpec& spec) {
    check_video(video);
    constexpr int64_t Q = kFrameSize / kQuadrant;
    const auto amp = static_cast<int64_t>(std::ceil(spec.bob_amplitude_px));
    // head quadrants that never overlap the mouth at any offset
    std::vector<uint8_t> use(static_cast<size_t>(Q * Q), 0);
    const Box mouth{spec.mouth.x0, spec.mouth.y0 - static_cast<double>(amp), spec.mouth.x1,
                    spec.mouth.y1 + static_cast<double>(amp)};
    for (int64_t qy = 0; qy < Q; ++qy) {
        for (int64_t qx = 0; qx < Q; ++qx) {
            const auto x0 = static_cast<double>(qx * kQuadrant), y0 = static_cast<double>(qy * kQuadrant);
            const auto x1 = x0 + kQuadrant, y1 = y0 + kQuadrant;
            const bool in_head = x0 >= spec.head.x0 && x1 <= spec.head.x1 && y0 >= spec.head.y0 && y1 <= spec.head.y1;
            const bool touches_mouth = x0 < mouth.x1 && x1 > mouth.x0 && y0 < mouth.y1 && y1 > mouth.y0;
            use[static_cast<size_t>(qy * Q + qx)] = in_head && !touches_mouth ? 1 : 0;
        }
    }
    std::vector<std::vector<double>> expected;
    for (int64_t dy = -amp; dy <= amp; ++dy) {
        std::vector<double> frame(static_cast<size_t>(kFrameSize * kFrameSize));
        for (int64_t y = 0; y < kFrameSize; ++y) {
            for (int64_t x = 0; x < kFrameSize; ++x) {
                frame[static_cast<size_t>(y * kFrameSize + x)] =
                    identity_pixel(spec, x, y, dy, std::numeric_limits<double>::quiet_NaN());
            }
        }
        expected.push_back(pool_quadrants(frame.data()));
    }
    double total = 0.0;
    for (int64_t f = 0; f < video.dim(0); ++f) {
        const auto got = pool_quadrants(video.data().data() + f * kFrameSize * kFrameSize);
        double best = std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < expected.size(); ++k) {
            double s = 0.0;
            int64_t n = 0;
            for (size_t i = 0; i < got.size(); ++i) {
                if (!use[i]) continue;
                s += std::abs(got[i] - expected[k][i]);
                ++n;
            }
            best = std::min(best, s / static_cast<double>(std::max<int64_t>(n, 1)));
        }
        total += best;
    }
    return total / static_cast<double>(video.dim(0));
}

double outside_region_err(const Tensor& video, const Tensor& reference, const IdentitySpec& spec) {
    check_video(video);
    if (!video.same_shape(reference)) {
        throw Error("video " + shape_str(video.shape()) + " and reference " + shape_str(reference.shape()) +
                    " differ in length");
    }
    const double pad = std::ceil(spec.bob_amplitude_px);
    const Box head{spec.head.x0, spec.head.y0 - pad, spec.head.x1, spec.head.y1 + pad};
    double s = 0.0;
    int64_t n = 0;
    for (int64_t f = 0; f < video.dim(0); ++f) {
        for (int64_t y = 0; y < kFrameSize; ++y) {
            for (int64_t x = 0; x < kFrameSize; ++x) {
                if (inside(head, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
                const int64_t i = (f * kFrameSize + y) * kFrameSize + x;
                s += std::abs(video[i] - reference[i]);
                ++n;
            }
        }
    }
    return n > 0 ? s / static_cast<double>(n) : 0.0;
}

json Metrics::to_json() const {
    return {{"sync_corr", sync_corr}, {"identity_drift", identity_drift}, {"outside_region_err", outside_region_err}};
}

Metrics metrics(const Tensor& video, const AudioTrack& track, const IdentitySpec& spec, double fps,
                const Tensor& reference) {
    Metrics m;
    m.sync_corr = sync_correlation(video, track, spec, fps);
    m.identity_drift = identity_drift(video, spec);
    m.outside_region_err = outside_region_err(video, reference, spec);
    return m;
}

json to_json(const IdentitySpec& s) {
    auto box = [](const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); };
    return {{"schema_version", 1},
            {"seed", s.seed},
            {"head", box(s.head)},
            {"lower_face", box(s.lower_face)},
            {"mouth", box(s.mouth)},
            {"background", {s.bg_base, s.bg_amp, s.bg_fx, s.bg_fy, s.bg_px, s.bg_py}},
            {"head_texture", s.head_texture},
            {"bob", {s.bob_amplitude_px, s.bob_period_s, s.bob_phase}}};
}

IdentitySpec identity_from_json(const json& j) {
    auto box = [](const json& a) {
        if (!a.is_array() || a.size() != 4) throw Error("boxes are [x0, y0, x1, y1]");
        return Box{a[0].get<double>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>()};
    };
    IdentitySpec s;
    s.seed = j.at("seed").get<uint64_t>();
    s.head = box(j.at("head"));
    s.lower_face = box(j.at("lower_face"));
    s.mouth = box(j.at("mouth"));
    const auto bg = j.at("background").get<std::vector<double>>();
    if (bg.size() != 6) throw Error("background needs 6 coefficients");
    s.bg_base = bg[0], s.bg_amp = bg[1], s.bg_fx = bg[2], s.bg_fy = bg[3], s.bg_px = bg[4], s.bg_py = bg[5];
    s.head_texture = j.at("head_texture").get<std::vector<double>>();
    const auto bob = j.at("bob").get<std::vector<double>>();
    if (bob.size() != 3) throw Error("bob needs amplitude, period and phase");
    s.bob_amplitude_px = bob[0], s.bob_period_s = bob[1], s.bob_phase = bob[2];
    if (static_cast<int64_t>(s.head_texture.size()) != s.texture_rows() * s.texture_cols()) {
        throw Error("head texture size does not match the head rectangle");
    }
    return s;
}

}  // namespace lipedit::toy
