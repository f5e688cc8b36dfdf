// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Euler sampling over per-cell noise levels, time-shifted block scheduling with
// boundary averaging and residual caching, reference selection and edit rendering.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/audio.hpp"
#include "lipedit/denoiser.hpp"
#include "lipedit/rng.hpp"
#include "lipedit/timeline.hpp"
#include "lipedit/toy.hpp"

namespace lipedit::infer {

struct InferenceSchedule {
    int64_t num_steps = 40;
    int64_t block_width = 17;
    int64_t shift = 5;
    double medial_fraction = 0.75;
    double cache_threshold = 0.05;
    bool shift_enabled = true;
    bool cache_enabled = true;
    bool circular = false;
    timeline::MaskMode render_mode = timeline::MaskMode::lip;

    void validate() const;
    /// Number of shift-active steps at each end of the schedule.
    int64_t edge_steps() const;
    /// Steps outside the edge steps at both ends.
    bool in_medial(int64_t step) const;
    bool shift_active(int64_t step) const;
    bool cache_allowed(int64_t step) const;
    /// Accumulated shift before `step`; placement uses it modulo block_width.
    int64_t offset(int64_t step) const;
    double t_at(int64_t step) const;
    nlohmann::json to_json() const;
    static InferenceSchedule from_json(const nlohmann::json& j);
};

/// Latent frames start, start+1, ..., start+length−1 (modulo N when circular).
struct Block {
    int64_t start = 0;
    int64_t length = 0;
    bool operator==(const Block&) const = default;
};

struct BlockPartition {
    std::vector<Block> blocks;
    std::vector<uint8_t> coverage;  // evaluations per frame (1 or 2)
    int64_t num_frames = 0;
    std::vector<int64_t> frames(const Block& b) const;
};

BlockPartition tapsf_partition(int64_t num_frames, int64_t step, const InferenceSchedule& schedule);

/// Starting point of a sampling run. A cell joins the loop at the first step with
/// t ≤ its noise level, re-noised as (1−t)x0 + tε; cells at noise 0 never change.
struct DenoiseTask {
    Tensor x0;                       // [N, rows, cols, C]
    Tensor noise;                    // same shape
    std::vector<double> cell_noise;  // [N * cells]
    int64_t cells() const { return x0.dim(1) * x0.dim(2); }
};

/// Per-token timesteps of the whole sequence at `step` (0 for inactive cells).
std::vector<double> cell_timesteps(const DenoiseTask& task, const InferenceSchedule& schedule, int64_t step);

using FullVelocityFn =
    std::function<Tensor(const Tensor& state, const std::vector<double>& cell_t, int64_t step)>;

Tensor euler_solve(const DenoiseTask& task, const InferenceSchedule& schedule, const FullVelocityFn& velocity);

struct BlockCall {
    Block block;
    std::vector<int64_t> frames;
    Tensor state;                 // [n, rows, cols, C] gathered from the sequence
    std::vector<double> cell_t;   // [n * cells]
    int64_t step = 0;
    double t = 1.0;
    bool shift_active = true;
    bool cache_allowed = false;
};

using BlockVelocityFn = std::function<Tensor(const BlockCall&)>;

struct SolveStats {
    int64_t block_evaluations = 0;
    int64_t cache_hits = 0;
    std::vector<double> step_seconds;
    /// Velocities of double-evaluated frames: (step, frame, first, second, used).
    std::function<void(int64_t, int64_t, const Tensor&, const Tensor&, const Tensor&)> on_overlap;
};

Tensor tapsf_solve(const DenoiseTask& task, const InferenceSchedule& schedule, const BlockVelocityFn& velocity,
                   SolveStats* stats = nullptr);

// ---- caching ----

enum class CacheDecision { reuse, recompute };

struct CacheState {
    bool valid = false;
    Tensor previous_signal;
    double accumulated = 0.0;
    Tensor residual;
    Block block;
};

/// Accumulates ‖m_t − m_prev‖₁/‖m_prev‖₁ since the last recompute and allows reuse while
/// it stays below delta. Shift-active steps and delta ≤ 0 always recompute.
CacheDecision cache_gate(CacheState& state, const Block& block, const Tensor& signal, double delta,
                         bool shift_active);

// ---- references ----

/// Temporal index for a clean frame outside block [block_start, block_end] (inclusive):
/// unchanged within 3 of the nearer boundary, else pinned 3 beyond that boundary.
int64_t fb_rope_assign(int64_t t_source, int64_t block_start, int64_t block_end);

inline constexpr int64_t kFaceRefCount = 6;
inline constexpr double kFaceRefWindowS = 5.0;

/// Distinct clean latents within ±ceil(window_s·fps/8) of the block, excluding the
/// block itself, sampled uniformly; at most `count`.
std::vector<int64_t> sample_face_refs(const std::vector<uint8_t>& clean, int64_t block_start, int64_t block_end,
                                      double fps, Rng& rng, int64_t count = kFaceRefCount,
                                      double window_s = kFaceRefWindowS);

// ---- edit rendering ----

struct RenderOptions {
    uint64_t seed = 0;
    bool use_audio = true;
    bool use_face_refs = true;
    bool use_frame_refs = true;
    std::optional<double> expected_fps;  // checkpoint fps; mismatch is an error
};

struct EvalContext {
    toy::IdentitySpec identity;
    toy::AudioTrack track;       // audio of the edited timeline
    Tensor reference_video;      // for the outside-region error
};

struct RenderResult {
    Tensor latents;
    Tensor video;
    nlohmann::json report;
};

/// Source latents are indexed by plan orig_index; source_boxes holds one lower-face box
/// per source video frame. Audio must cover every output frame.
RenderResult run_edit_inference(const timeline::LatentTimelinePlan& plan, const model::Denoiser& model,
                                const Tensor& source_latents, const std::vector<timeline::Box>& source_boxes,
                                const audio::AudioFeatures& features, const InferenceSchedule& schedule,
                                const RenderOptions& options, const EvalContext* eval = nullptr);

/// Per-cell noise levels and audio masks implied by a plan.
struct PlanConditioning {
    std::vector<double> cell_noise;
    std::vector<timeline::RegionMask> masks;        // render region per entry
    std::vector<timeline::RegionMask> face_cells;   // lower-face cells per entry
    std::vector<uint8_t> clean;                     // entry has a clean source latent
};

PlanConditioning plan_conditioning(const timeline::LatentTimelinePlan& plan,
                                   const std::vector<timeline::Box>& source_boxes, const timeline::CellGrid& grid,
                                   int64_t source_latents);

}  // namespace lipedit::infer
