// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

namespace lipedit::infer {

using nlohmann::json;

void InferenceSchedule::validate() const {
    if (num_steps < 1) throw Error("num_steps must be at least 1");
    if (block_width < 1) throw Error("block_width must be at least 1");
    if (!(shift > 0 && shift < block_width)) throw Error("shift must satisfy 0 < shift < block_width");
    if (!(medial_fraction >= 0.0 && medial_fraction <= 1.0)) throw Error("medial_fraction must lie in [0, 1]");
    if (!(cache_threshold >= 0.0)) throw Error("cache_threshold must be non-negative");
}

int64_t InferenceSchedule::edge_steps() const {
    return std::llround(static_cast<double>(num_steps) * (1.0 - medial_fraction) / 2.0);
}

bool InferenceSchedule::in_medial(int64_t step) const {
    const int64_t e = edge_steps();
    return step >= e && step < num_steps - e;
}

bool InferenceSchedule::shift_active(int64_t step) const { return shift_enabled && !in_medial(step); }

bool InferenceSchedule::cache_allowed(int64_t step) const {
    return cache_enabled && cache_threshold > 0.0 && in_medial(step) && !shift_active(step);
}

int64_t InferenceSchedule::offset(int64_t step) const {
    int64_t active = 0;
    for (int64_t j = 0; j < step; ++j) active += shift_active(j) ? 1 : 0;
    return shift * active;
}

double InferenceSchedule::t_at(int64_t step) const {
    return static_cast<double>(num_steps - step) / static_cast<double>(num_steps);
}

json InferenceSchedule::to_json() const {
    return {{"num_steps", num_steps},
            {"block_width", block_width},
            {"shift", shift},
            {"medial_fraction", medial_fraction},
            {"cache_threshold", cache_threshold},
            {"shift_enabled", shift_enabled},
            {"cache_enabled", cache_enabled},
            {"circular", circular},
            {"render_mode", timeline::to_string(render_mode)}};
}

InferenceSchedule InferenceSchedule::from_json(const json& j) {
    InferenceSchedule s;
    s.num_steps = j.value("num_steps", s.num_steps);
    s.block_width = j.value("block_width", s.block_width);
    s.shift = j.value("shift", s.shift);
    s.medial_fraction = j.value("medial_fraction", s.medial_fraction);
    s.cache_threshold = j.value("cache_threshold", s.cache_threshold);
    s.shift_enabled = j.value("shift_enabled", s.shift_enabled);
    s.cache_enabled = j.value("cache_enabled", s.cache_enabled);
    s.circular = j.value("circular", s.circular);
    if (j.contains("render_mode")) s.render_mode = timeline::mask_mode_from_string(j.at("render_mode").get<std::string>());
    s.validate();
    return s;
}

std::vector<int64_t> BlockPartition::frames(const Block& b) const {
    std::vector<int64_t> out(static_cast<size_t>(b.length));
    for (int64_t j = 0; j < b.length; ++j) out[static_cast<size_t>(j)] = (b.start + j) % num_frames;
    return out;
}

BlockPartition tapsf_partition(int64_t N, int64_t step, const InferenceSchedule& schedule) {
    if (N < 1) throw Error("partition needs at least one latent frame");
    const int64_t W = schedule.block_width;
    BlockPartition p;
    p.num_frames = N;
    if (N <= W) {
        p.blocks.push_back({0, N});
    } else if (schedule.circular) {
        const int64_t o = schedule.offset(step) % N;
        for (int64_t done = 0; done < N; done += W) p.blocks.push_back({(o + done) % N, std::min(W, N - done)});
    } else {
        const int64_t o = schedule.offset(step) % W;
        int64_t head_end = 0;
        if (o > 0) {
            p.blocks.push_back({0, W});
            head_end = W;
        }
        int64_t covered = head_end;
        for (int64_t s = o; s + W <= N; s += W) {
            p.blocks.push_back({s, W});
            covered = s + W;
        }
        if (covered < N) {
            const int64_t start = std::max(N - W, head_end);
            p.blocks.push_back({start, N - start});
        }
    }
    p.coverage.assign(static_cast<size_t>(N), 0);
    for (const auto& b : p.blocks) {
        for (int64_t f : p.frames(b)) ++p.coverage[static_cast<size_t>(f)];
    }
    for (int64_t f = 0; f < N; ++f) {
        const int c = p.coverage[static_cast<size_t>(f)];
        if (c < 1 || c > 2) throw Error("block partition covers frame " + std::to_string(f) + " " + std::to_string(c) + " times");
    }
    return p;
}

namespace {

constexpr double kJoinTolerance = 1e-12;

bool active(double t, double noise) { return t <= noise + kJoinTolerance; }

void check_task(const DenoiseTask& task) {
    if (task.x0.rank() != 4) throw Error("task latents must be [N, rows, cols, C]");
    if (!task.noise.same_shape(task.x0)) throw Error("task noise must match the latents");
    if (static_cast<int64_t>(task.cell_noise.size()) != task.x0.dim(0) * task.cells()) {
        throw Error("task needs one noise level per latent cell");
    }
}

/// Cells that enter the loop at `step` are re-noised from x0.
void join_cells(Tensor& state, const DenoiseTask& task, const InferenceSchedule& schedule, int64_t step) {
    const double t = schedule.t_at(step);
    const double t_prev = step > 0 ? schedule.t_at(step - 1) : 2.0;
    const int64_t C = task.x0.dim(3);
    for (size_t cell = 0; cell < task.cell_noise.size(); ++cell) {
        const double tau = task.cell_noise[cell];
        if (!active(t, tau) || (step > 0 && active(t_prev, tau))) continue;
        for (int64_t c = 0; c < C; ++c) {
            const int64_t i = static_cast<int64_t>(cell) * C + c;
            state[i] = (1.0 - t) * task.x0[i] + t * task.noise[i];
        }
    }
}

void euler_update(Tensor& state, const Tensor& v, const DenoiseTask& task, const InferenceSchedule& schedule,
                  int64_t step) {
    const double t = schedule.t_at(step);
    const double dt = 1.0 / static_cast<double>(schedule.num_steps);
    const int64_t C = task.x0.dim(3);
    for (size_t cell = 0; cell < task.cell_noise.size(); ++cell) {
        if (!active(t, task.cell_noise[cell])) continue;
        for (int64_t c = 0; c < C; ++c) {
            const int64_t i = static_cast<int64_t>(cell) * C + c;
            state[i] -= dt * v[i];
        }
    }
    if (!state.all_finite()) throw Error("non-finite sampler state after step " + std::to_string(step));
}

}  // namespace

std::vector<double> cell_timesteps(const DenoiseTask& task, const InferenceSchedule& schedule, int64_t step) {
    const double t = schedule.t_at(step);
    std::vector<double> out(task.cell_noise.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = active(t, task.cell_noise[i]) ? t : 0.0;
    return out;
}

Tensor euler_solve(const DenoiseTask& task, const InferenceSchedule& schedule, const FullVelocityFn& velocity) {
    check_task(task);
    schedule.validate();
    Tensor state = task.x0;
    for (int64_t step = 0; step < schedule.num_steps; ++step) {
        join_cells(state, task, schedule, step);
        const Tensor v = velocity(state, cell_timesteps(task, schedule, step), step);
        if (!v.same_shape(state)) throw Error("velocity shape " + shape_str(v.shape()) + " does not match the state");
        euler_update(state, v, task, schedule, step);
    }
    return state;
}

Tensor tapsf_solve(const DenoiseTask& task, const InferenceSchedule& schedule, const BlockVelocityFn& velocity,
                   SolveStats* stats) {
    check_task(task);
    schedule.validate();
    const int64_t N = task.x0.dim(0);
    const int64_t per = task.x0.size() / N;
    const int64_t cells = task.cells();
    Tensor state = task.x0;
    for (int64_t step = 0; step < schedule.num_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        join_cells(state, task, schedule, step);
        const auto ct = cell_timesteps(task, schedule, step);
        const BlockPartition part = tapsf_partition(N, step, schedule);
        Tensor v(state.shape());
        Tensor first(state.shape());
        std::vector<uint8_t> seen(static_cast<size_t>(N), 0);
        for (size_t b = 0; b < part.blocks.size(); ++b) {
            BlockCall call;
            call.block = part.blocks[b];
            call.frames = part.frames(call.block);
            call.step = step;
            call.t = schedule.t_at(step);
            call.shift_active = schedule.shift_active(step);
            call.cache_allowed = schedule.cache_allowed(step);
            const auto n = static_cast<int64_t>(call.frames.size());
            std::vector<double> vals(static_cast<size_t>(n * per));
            call.cell_t.resize(static_cast<size_t>(n * cells));
            for (int64_t j = 0; j < n; ++j) {
                const int64_t f = call.frames[static_cast<size_t>(j)];
                std::copy_n(state.data().begin() + f * per, per, vals.begin() + j * per);
                std::copy_n(ct.begin() + f * cells, cells, call.cell_t.begin() + j * cells);
            }
            call.state = Tensor({n, state.dim(1), state.dim(2), state.dim(3)}, std::move(vals));
            Tensor vb;
            try {
                vb = velocity(call);
            } catch (const Error& e) {
                throw Error("block " + std::to_string(b) + " at step " + std::to_string(step) + ": " + e.what());
            }
            if (!vb.same_shape(call.state)) throw Error("block velocity has shape " + shape_str(vb.shape()));
            if (stats) ++stats->block_evaluations;
            for (int64_t j = 0; j < n; ++j) {
                const int64_t f = call.frames[static_cast<size_t>(j)];
                const double* src = vb.data().data() + j * per;
                if (part.coverage[static_cast<size_t>(f)] == 1) {
                    std::copy_n(src, per, v.data().begin() + f * per);
                } else if (!seen[static_cast<size_t>(f)]) {
                    std::copy_n(src, per, first.data().begin() + f * per);
                    seen[static_cast<size_t>(f)] = 1;
                } else {
                    for (int64_t i = 0; i < per; ++i) v[f * per + i] = (first[f * per + i] + src[i]) / 2.0;
                    if (stats && stats->on_overlap) {
                        const Shape fs{state.dim(1), state.dim(2), state.dim(3)};
                        auto slice = [&](const Tensor& t) {
                            return Tensor(fs, std::vector<double>(t.data().begin() + f * per, t.data().begin() + (f + 1) * per));
                        };
                        stats->on_overlap(step, f, slice(first), Tensor(fs, std::vector<double>(src, src + per)), slice(v));
                    }
                }
            }
        }
        euler_update(state, v, task, schedule, step);
        if (stats) {
            stats->step_seconds.push_back(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
    }
    return state;
}

CacheDecision cache_gate(CacheState& state, const Block& block, const Tensor& signal, double delta,
                         bool shift_active) {
    const bool fresh = !state.valid || !(state.block == block) || !state.previous_signal.same_shape(signal);
    if (shift_active || delta <= 0.0 || fresh) {
        state.valid = true;
        state.block = block;
        state.previous_signal = signal;
        state.accumulated = 0.0;
        return CacheDecision::recompute;
    }
    const double denom = l1_norm(state.previous_signal);
    double diff = 0.0;
    for (int64_t i = 0; i < static_cast<int64_t>(signal.size()); ++i) diff += std::abs(signal[i] - state.previous_signal[i]);
    const double e = denom > 0.0 ? diff / denom : (diff > 0.0 ? INFINITY : 0.0);
    state.accumulated += e;
    state.previous_signal = signal;
    if (state.accumulated < delta) return CacheDecision::reuse;
    state.accumulated = 0.0;
    return CacheDecision::recompute;
}

int64_t fb_rope_assign(int64_t t_source, int64_t block_start, int64_t block_end) {
    if (block_end < block_start) throw Error("empty block");
    if (t_source < block_start) {
        return block_start - t_source <= 3 ? t_source : block_start - 3;
    }
    if (t_source > block_end) {
        return t_source - block_end <= 3 ? t_source : block_end + 3;
    }
    throw Error("reference frame " + std::to_string(t_source) + " lies inside the block");
}

std::vector<int64_t> sample_face_refs(const std::vector<uint8_t>& clean, int64_t block_start, int64_t block_end,
                                      double fps, Rng& rng, int64_t count, double window_s) {
    const auto N = static_cast<int64_t>(clean.size());
    const auto radius =
        static_cast<int64_t>(std::ceil(window_s * fps / static_cast<double>(timeline::kTemporalStride) - 1e-9));
    std::vector<int64_t> candidates;
    for (int64_t i = std::max<int64_t>(0, block_start - radius); i <= std::min(N - 1, block_end + radius); ++i) {
        if (i >= block_start && i <= block_end) continue;
        if (clean[static_cast<size_t>(i)]) candidates.push_back(i);
    }
    std::vector<int64_t> out;
    for (int64_t k : rng.sample_distinct(static_cast<int64_t>(candidates.size()), count)) {
        out.push_back(candidates[static_cast<size_t>(k)]);
    }
    return out;
}

PlanConditioning plan_conditioning(const timeline::LatentTimelinePlan& plan, const std::vector<timeline::Box>& boxes,
                                   const timeline::CellGrid& grid, int64_t source_latents) {
    using timeline::MaskMode;
    const int64_t cells = grid.cells();
    std::map<MaskMode, std::vector<timeline::RegionMask>> by_mode;
    auto masks_for = [&](MaskMode mode) -> const std::vector<timeline::RegionMask>& {
        auto it = by_mode.find(mode);
        if (it == by_mode.end()) {
            it = by_mode.emplace(mode, timeline::build_masks(mode, boxes, source_latents, grid)).first;
        }
        return it->second;
    };
    auto filled = [&](uint8_t v) {
        timeline::RegionMask m;
        m.rows = grid.rows();
        m.cols = grid.cols();
        m.cells.assign(static_cast<size_t>(cells), v);
        return m;
    };

    PlanConditioning pc;
    for (const auto& e : plan.entries) {
        timeline::RegionMask mask;
        timeline::RegionMask face;
        if (e.inserted) {
            mask = filled(1);
            face = filled(0);
        } else {
            if (e.orig_index < 0 || e.orig_index >= source_latents) {
                throw Error("plan references source latent " + std::to_string(e.orig_index) + " of " +
                            std::to_string(source_latents));
            }
            mask = masks_for(e.mask_mode)[static_cast<size_t>(e.orig_index)];
            face = masks_for(MaskMode::lip)[static_cast<size_t>(e.orig_index)];
        }
        for (int64_t c = 0; c < cells; ++c) {
            const bool inside = mask.cells[static_cast<size_t>(c)] != 0;
            pc.cell_noise.push_back(inside ? std::max(e.noise_level, e.frame_noise) : e.frame_noise);
        }
        pc.masks.push_back(std::move(mask));
        pc.face_cells.push_back(std::move(face));
        pc.clean.push_back(e.inserted ? 0 : 1);
    }
    return pc;
}

namespace {

Tensor frame_of(const Tensor& latents, int64_t f) {
    const int64_t per = latents.size() / latents.dim(0);
    return Tensor({latents.dim(1), latents.dim(2), latents.dim(3)},
                  std::vector<double>(latents.data().begin() + f * per, latents.data().begin() + (f + 1) * per));
}

}  // namespace

RenderResult run_edit_inference(const timeline::LatentTimelinePlan& plan, const model::Denoiser& model,
                                const Tensor& source_latents, const std::vector<timeline::Box>& source_boxes,
                                const audio::AudioFeatures& features, const InferenceSchedule& schedule,
                                const RenderOptions& options, const EvalContext* eval) {
    schedule.validate();
    const auto& cfg = model.config();
    const int64_t N = plan.size();
    if (N < 1) throw Error("plan has no latent entries");
    if (source_latents.rank() != 4 || source_latents.dim(1) != cfg.grid_rows || source_latents.dim(2) != cfg.grid_cols ||
        source_latents.dim(3) != cfg.latent_channels) {
        throw Error("source latents " + shape_str(source_latents.shape()) + " do not match the checkpoint grid");
    }
    if (options.expected_fps && std::abs(*options.expected_fps - plan.fps) > 1e-9) {
        throw Error("plan fps " + std::to_string(plan.fps) + " does not match checkpoint fps " +
                    std::to_string(*options.expected_fps));
    }
    features.validate();
    if (features.bands() != cfg.audio_bands || features.channels() != cfg.audio_channels) {
        throw Error("audio features do not match the checkpoint's band/channel layout");
    }
    const int64_t frames_out = timeline::frames_for_latents(N);
    if (!audio::covers(features, frames_out, plan.fps)) {
        throw Error("audio of " + std::to_string(features.duration_s()) + " s does not cover the " +
                    std::to_string(frames_out) + " output frames");
    }
    const auto wall0 = std::chrono::steady_clock::now();
    ad::NoGradGuard no_grad;

    const timeline::CellGrid grid = toy::cell_grid();
    const PlanConditioning pc = plan_conditioning(plan, source_boxes, grid, source_latents.dim(0));
    const int64_t per = source_latents.size() / source_latents.dim(0);

    DenoiseTask task;
    task.x0 = Tensor({N, cfg.grid_rows, cfg.grid_cols, cfg.latent_channels});
    for (int64_t n = 0; n < N; ++n) {
        const auto& e = plan.entries[static_cast<size_t>(n)];
        if (e.inserted) continue;
        std::copy_n(source_latents.data().begin() + e.orig_index * per, per, task.x0.data().begin() + n * per);
    }
    Rng noise_rng(derive_seed(options.seed, 0x5EED));
    task.noise = noise_rng.normal_tensor(task.x0.shape());
    task.cell_noise = pc.cell_noise;

    ad::Var audio_all;
    if (options.use_audio) {
        const Tensor windows = audio::frame_windows(features, frames_out, plan.fps, cfg.window);
        audio_all = model.audio_tokens(windows, 0, N);
    }

    struct BlockRefs {
        std::vector<model::FaceRef> face;
        std::vector<model::FrameRef> frame;
    };
    std::map<std::pair<int64_t, int64_t>, BlockRefs> refs_cache;
    std::map<std::pair<int64_t, int64_t>, CacheState> caches;
    int64_t cache_hits = 0;
    int64_t cache_checks = 0;

    auto refs_for = [&](const BlockCall& call) -> const BlockRefs& {
        const auto key = std::make_pair(call.block.start, call.block.length);
        auto it = refs_cache.find(key);
        if (it != refs_cache.end()) return it->second;
        BlockRefs r;
        const int64_t lo = *std::min_element(call.frames.begin(), call.frames.end());
        const int64_t hi = *std::max_element(call.frames.begin(), call.frames.end());
        if (options.use_face_refs) {
            Rng rng(derive_seed(options.seed, static_cast<uint64_t>(call.block.start), static_cast<uint64_t>(call.block.length)));
            for (int64_t idx : sample_face_refs(pc.clean, lo, hi, plan.fps, rng, cfg.max_face_refs)) {
                r.face.push_back({frame_of(task.x0, idx), pc.face_cells[static_cast<size_t>(idx)]});
            }
        }
        const bool synthetic = std::none_of(call.frames.begin(), call.frames.end(),
                                            [&](int64_t f) { return pc.clean[static_cast<size_t>(f)] != 0; });
        if (options.use_frame_refs && synthetic) {
            const int64_t t_lo = plan.entries[static_cast<size_t>(lo)].temporal_index;
            const int64_t t_hi = plan.entries[static_cast<size_t>(hi)].temporal_index;
            for (int64_t i = lo - 1; i >= 0; --i) {
                if (!pc.clean[static_cast<size_t>(i)]) continue;
                r.frame.push_back({frame_of(task.x0, i),
                                   fb_rope_assign(plan.entries[static_cast<size_t>(i)].temporal_index, t_lo, t_hi)});
                break;
            }
            for (int64_t i = hi + 1; i < N; ++i) {
                if (!pc.clean[static_cast<size_t>(i)]) continue;
                r.frame.push_back({frame_of(task.x0, i),
                                   fb_rope_assign(plan.entries[static_cast<size_t>(i)].temporal_index, t_lo, t_hi)});
                break;
            }
        }
        return refs_cache.emplace(key, std::move(r)).first->second;
    };

    const BlockVelocityFn velocity = [&](const BlockCall& call) {
        const auto n = static_cast<int64_t>(call.frames.size());
        model::BlockInput in;
        in.latents = call.state;
        in.cell_timesteps = call.cell_t;
        for (int64_t f : call.frames) {
            in.temporal_indices.push_back(plan.entries[static_cast<size_t>(f)].temporal_index);
            in.audio_masks.push_back(pc.masks[static_cast<size_t>(f)]);
        }
        const BlockRefs& refs = refs_for(call);
        const model::TokenSequence seq = model::assemble_tokens(in, refs.face, refs.frame, cfg.max_face_refs);
        ad::Var audio;
        if (audio_all.defined()) {
            std::vector<int64_t> rows;
            for (int64_t f : call.frames) {
                for (int64_t w = 0; w < cfg.window; ++w) rows.push_back(f * cfg.window + w);
            }
            audio = ad::gather_rows(audio_all, rows);
        }
        const model::Denoiser::Embedded e = model.embed(seq);
        ad::Var hidden;
        CacheState& cs = caches[{call.block.start, call.block.length}];
        if (call.cache_allowed) {
            ++cache_checks;
            const CacheDecision d =
                cache_gate(cs, call.block, model.cache_signal(e), schedule.cache_threshold, false);
            if (d == CacheDecision::reuse && cs.residual.same_shape(e.hidden.value())) {
                ++cache_hits;
                hidden = ad::add(e.hidden, ad::constant(cs.residual));
            } else {
                hidden = model.run_blocks(e, seq, audio);
                cs.residual = ad::sub(hidden, e.hidden).value();
            }
        } else {
            cs.valid = false;
            hidden = model.run_blocks(e, seq, audio);
        }
        return model.head(e, hidden).value().reshaped({n, cfg.grid_rows, cfg.grid_cols, cfg.latent_channels});
    };

    SolveStats stats;
    RenderResult result;
    result.latents = tapsf_solve(task, schedule, velocity, &stats);
    result.video = toy::decode(result.latents);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();

    json report;
    report["schema_version"] = 1;
    report["seed"] = options.seed;
    report["schedule"] = schedule.to_json();
    report["conditioning"] = {{"audio", options.use_audio},
                              {"face_refs", options.use_face_refs},
                              {"frame_refs", options.use_frame_refs}};
    report["num_latents"] = N;
    report["num_frames"] = frames_out;
    report["inserted_latents"] = plan.num_inserted();
    report["fps"] = plan.fps;
    report["block_evaluations"] = stats.block_evaluations;
    report["cache"] = {{"checks", cache_checks},
                       {"hits", cache_hits},
                       {"hit_rate", cache_checks > 0 ? static_cast<double>(cache_hits) / static_cast<double>(cache_checks) : 0.0}};
    report["step_seconds"] = stats.step_seconds;
    report["wall_seconds"] = wall;
    if (eval) {
        json m;
        m["sync_corr"] = toy::sync_correlation(result.video, eval->track, eval->identity, plan.fps);
        m["identity_drift"] = toy::identity_drift(result.video, eval->identity);
        if (eval->reference_video.rank() == 3 && eval->reference_video.same_shape(result.video)) {
            m["outside_region_err"] = toy::outside_region_err(result.video, eval->reference_video, eval->identity);
        } else {
            m["outside_region_err"] = nullptr;
        }
        report["metrics"] = m;
    }
    result.report = std::move(report);
    return result;
}

}  // namespace lipedit::infer
