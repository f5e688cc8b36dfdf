// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frame/latent index algebra, edit-op application on the latent sequence and
// region masks over latent cells.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/tensor.hpp"
#include "lipedit/transcript.hpp"

namespace lipedit::timeline {

/// Video frames per latent frame (latent 0 covers frame 0 alone).
inline constexpr int64_t kTemporalStride = 8;

/// Latent index holding video frame f.
int64_t video_to_latent(int64_t f);

struct FrameRange {
    int64_t start = 0;  // inclusive
    int64_t end = 0;    // exclusive
    int64_t size() const { return end - start; }
    bool operator==(const FrameRange&) const = default;
};

/// Video frames covered by latent n.
FrameRange latent_to_range(int64_t n);

/// Number of latent frames for a clip of `frames` video frames.
int64_t latents_for_frames(int64_t frames);
/// Number of video frames represented by `latents` latent frames.
int64_t frames_for_latents(int64_t latents);

enum class MaskMode { lip, face, head, full, none };

std::string to_string(MaskMode m);
MaskMode mask_mode_from_string(const std::string& s);

struct PlanEntry {
    bool inserted = false;
    int64_t orig_index = -1;  // source latent for kept entries
    double noise_level = 0.0; // applied inside the entry's mask
    double frame_noise = 0.0; // applied to every cell (adjacent re-noising)
    int64_t temporal_index = 0;
    MaskMode mask_mode = MaskMode::none;

    bool operator==(const PlanEntry&) const = default;
};

struct LatentTimelinePlan {
    std::vector<PlanEntry> entries;
    double fps = 25.0;
    int64_t tiling_overlap_frames = 16;
    double realized_delta_s = 0.0;

    int64_t size() const { return static_cast<int64_t>(entries.size()); }
    int64_t num_inserted() const;
};

struct PlanOptions {
    double t_adjacent = 0.7;
    int64_t adjacent_neighbors = 1;
    /// Render mode applied to kept entries; `none` keeps them as pure conditioning.
    MaskMode render_mode = MaskMode::lip;
    double t_edit = 1.0;
    double retime_granularity_s = 0.3;
    int64_t tiling_overlap_frames = 16;
};

/// Plan in which every source latent is kept under the render mode.
LatentTimelinePlan identity_plan(int64_t num_latents, double fps, const PlanOptions& options = {});

/// Inserted latent count for an addition of `duration_s` seconds.
int64_t addition_latent_count(double duration_s, double fps);

/// All op times refer to the source timeline.
LatentTimelinePlan apply_edit_ops(int64_t num_latents, const std::vector<transcript::EditOp>& ops, double fps,
                                  const PlanOptions& options = {});

LatentTimelinePlan recompute_temporal_indices(LatentTimelinePlan plan);

nlohmann::json to_json(const LatentTimelinePlan& plan);
LatentTimelinePlan plan_from_json(const nlohmann::json& j);

/// Axis-aligned pixel rectangle, half-open [x0, x1) × [y0, y1).
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const Box&) const = default;
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
};

Box enclose(const Box& a, const Box& b);

struct CellGrid {
    int64_t frame_h = 32;
    int64_t frame_w = 32;
    int64_t cell = 8;  // pixels per latent cell side
    int64_t rows() const { return frame_h / cell; }
    int64_t cols() const { return frame_w / cell; }
    int64_t cells() const { return rows() * cols(); }
};

/// Binary mask over the latent cells of one latent frame, row-major.
struct RegionMask {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<uint8_t> cells;
    int64_t count() const;
    bool operator==(const RegionMask&) const = default;
};

/// Pixel rectangle of a mode derived from a lower-face box, clipped to the frame.
Box dilate_box(MaskMode mode, const Box& lower_face, const CellGrid& grid);

/// Cells overlapping a pixel rectangle.
RegionMask box_to_cells(const Box& box, const CellGrid& grid);

/// Mask for one latent frame from the lower-face boxes of the video frames it covers.
RegionMask build_mask(MaskMode mode, const std::vector<Box>& boxes, const CellGrid& grid);

/// Masks for latents [0, num_latents) given one lower-face box per video frame.
std::vector<RegionMask> build_masks(MaskMode mode, const std::vector<Box>& frame_boxes, int64_t num_latents,
                                    const CellGrid& grid);

}  // namespace lipedit::timeline
