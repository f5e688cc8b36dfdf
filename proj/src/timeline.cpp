// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/timeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace lipedit::timeline {

using nlohmann::json;
using transcript::EditOp;
using transcript::OpKind;

int64_t video_to_latent(int64_t f) {
    if (f < 0) throw Error("video frame index must be non-negative, got " + std::to_string(f));
    return f == 0 ? 0 : (f + kTemporalStride - 1) / kTemporalStride;
}

FrameRange latent_to_range(int64_t n) {
    if (n < 0) throw Error("latent index must be non-negative, got " + std::to_string(n));
    if (n == 0) return {0, 1};
    return {kTemporalStride * (n - 1) + 1, kTemporalStride * n + 1};
}

int64_t latents_for_frames(int64_t frames) {
    if (frames < 1) throw Error("a clip needs at least one frame");
    return video_to_latent(frames - 1) + 1;
}

int64_t frames_for_latents(int64_t latents) {
    if (latents < 1) throw Error("a latent video needs at least one latent frame");
    return latent_to_range(latents - 1).end;
}

std::string to_string(MaskMode m) {
    switch (m) {
        case MaskMode::lip: return "lip";
        case MaskMode::face: return "face";
        case MaskMode::head: return "head";
        case MaskMode::full: return "full";
        case MaskMode::none: return "none";
    }
    return "?";
}

MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "lip") return MaskMode::lip;
    if (s == "face") return MaskMode::face;
    if (s == "head") return MaskMode::head;
    if (s == "full") return MaskMode::full;
    if (s == "none") return MaskMode::none;
    throw Error("unknown mask mode \"" + s + "\"");
}

int64_t LatentTimelinePlan::num_inserted() const {
    return std::count_if(entries.begin(), entries.end(), [](const PlanEntry& e) { return e.inserted; });
}

namespace {

PlanEntry kept_entry(int64_t index, const PlanOptions& o) {
    PlanEntry e;
    e.orig_index = index;
    e.temporal_index = index;
    e.mask_mode = o.render_mode;
    e.noise_level = o.render_mode == MaskMode::none ? 0.0 : o.t_edit;
    return e;
}

PlanEntry inserted_entry() {
    PlanEntry e;
    e.inserted = true;
    e.noise_level = 1.0;
    e.mask_mode = MaskMode::full;
    return e;
}

// Latent boundary nearest to a source time: entries inserted here go before source latent p.
int64_t boundary_position(double at_s, double fps, int64_t n) {
    const auto f = static_cast<int64_t>(std::llround(at_s * fps));
    if (f <= 0) return 0;
    const auto p = static_cast<int64_t>(std::llround(static_cast<double>(f - 1) / kTemporalStride)) + 1;
    return std::clamp<int64_t>(p, 1, n);
}

MaskMode mode_for_region(transcript::Region r) {
    switch (r) {
        case transcript::Region::lip: return MaskMode::lip;
        case transcript::Region::face: return MaskMode::face;
        case transcript::Region::head: return MaskMode::head;
        case transcript::Region::full: return MaskMode::full;
        case transcript::Region::none: return MaskMode::none;
        case transcript::Region::custom: break;
    }
    throw Error("custom rerender regions are not supported by the latent planner");
}

}  // namespace

LatentTimelinePlan identity_plan(int64_t num_latents, double fps, const PlanOptions& options) {
    return apply_edit_ops(num_latents, {}, fps, options);
}

int64_t addition_latent_count(double duration_s, double fps) {
    const auto n = static_cast<int64_t>(std::llround(std::abs(duration_s) * fps / kTemporalStride));
    return std::max<int64_t>(n, 1);
}

LatentTimelinePlan apply_edit_ops(int64_t num_latents, const std::vector<EditOp>& input_ops, double fps,
                                  const PlanOptions& options) {
    if (num_latents < 1) throw Error("plan needs at least one source latent");
    if (!(fps > 0)) throw Error("fps must be positive");

    std::vector<EditOp> ops;
    for (const auto& op : input_ops) {
        if (op.kind == OpKind::retime) {
            if (!op.scale) throw Error("retime op needs a scale");
            const auto expanded = transcript::plan_retime(op.at_s, op.at_s + op.duration_s, op.duration_s * *op.scale,
                                                          options.retime_granularity_s);
            ops.insert(ops.end(), expanded.begin(), expanded.end());
        } else {
            ops.push_back(op);
        }
    }

    const double total_s = static_cast<double>(num_latents * kTemporalStride) / fps;
    const double tol = 1e-9;
    std::vector<int64_t> removed_by(static_cast<size_t>(num_latents), -1);
    std::vector<std::pair<int64_t, int64_t>> removals;  // [begin, end) in source latents
    std::map<int64_t, int64_t> insert_at;
    std::vector<std::optional<MaskMode>> rerender(static_cast<size_t>(num_latents));
    int64_t inserted = 0;

    for (size_t i = 0; i < ops.size(); ++i) {
        const EditOp& op = ops[i];
        const double span = op.kind == OpKind::addition ? 0.0 : std::abs(op.duration_s);
        if (op.at_s < -tol || op.at_s + span > total_s + tol) {
            throw Error("op " + std::to_string(i) + " (" + transcript::to_string(op.kind) + " at " +
                        std::to_string(op.at_s) + " s) falls outside the " + std::to_string(total_s) + " s source");
        }
        const int64_t b = boundary_position(op.at_s, fps, num_latents);
        switch (op.kind) {
            case OpKind::addition: {
                const int64_t c = addition_latent_count(op.duration_s, fps);
                insert_at[b] += c;
                inserted += c;
                break;
            }
            case OpKind::removal: {
                const int64_t c = addition_latent_count(op.duration_s, fps);
                if (b + c > num_latents) {
                    throw Error("removal op " + std::to_string(i) + " needs " + std::to_string(c) +
                                " latents from index " + std::to_string(b) + " but only " +
                                std::to_string(num_latents) + " exist");
                }
                for (int64_t k = b; k < b + c; ++k) {
                    if (removed_by[static_cast<size_t>(k)] >= 0) {
                        throw Error("removal ops " + std::to_string(removed_by[static_cast<size_t>(k)]) + " and " +
                                    std::to_string(i) + " overlap at latent " + std::to_string(k));
                    }
                    removed_by[static_cast<size_t>(k)] = static_cast<int64_t>(i);
                }
                removals.emplace_back(b, b + c);
                break;
            }
            case OpKind::rerender: {
                if (!op.region) throw Error("rerender op " + std::to_string(i) + " needs a region");
                const int64_t e = std::max(boundary_position(op.at_s + span, fps, num_latents), b + 1);
                for (int64_t k = b; k < std::min(e, num_latents); ++k) {
                    rerender[static_cast<size_t>(k)] = mode_for_region(*op.region);
                }
                break;
            }
            case OpKind::retime:
                break;
        }
    }

    LatentTimelinePlan plan;
    plan.fps = fps;
    plan.tiling_overlap_frames = options.tiling_overlap_frames;
    std::vector<int64_t> position_of(static_cast<size_t>(num_latents), -1);
    for (int64_t p = 0; p <= num_latents; ++p) {
        if (auto it = insert_at.find(p); it != insert_at.end()) {
            for (int64_t k = 0; k < it->second; ++k) plan.entries.push_back(inserted_entry());
        }
        if (p < num_latents && removed_by[static_cast<size_t>(p)] < 0) {
            PlanEntry e = kept_entry(p, options);
            if (const auto& r = rerender[static_cast<size_t>(p)]) {
                e.mask_mode = *r;
                e.noise_level = *r == MaskMode::none ? 0.0 : options.t_edit;
            }
            position_of[static_cast<size_t>(p)] = static_cast<int64_t>(plan.entries.size());
            plan.entries.push_back(e);
        }
    }

    auto renoise = [&](int64_t orig) {
        auto& e = plan.entries[static_cast<size_t>(position_of[static_cast<size_t>(orig)])];
        e.frame_noise = std::max(e.frame_noise, options.t_adjacent);
    };
    for (const auto& [begin, end] : removals) {
        int64_t found = 0;
        for (int64_t k = begin - 1; k >= 0 && found < options.adjacent_neighbors; --k) {
            if (removed_by[static_cast<size_t>(k)] < 0) renoise(k), ++found;
        }
        found = 0;
        for (int64_t k = end; k < num_latents && found < options.adjacent_neighbors; ++k) {
            if (removed_by[static_cast<size_t>(k)] < 0) renoise(k), ++found;
        }
    }

    int64_t removed = 0;
    for (const auto& [begin, end] : removals) removed += end - begin;
    plan.realized_delta_s = static_cast<double>((inserted - removed) * kTemporalStride) / fps;
    return recompute_temporal_indices(std::move(plan));
}

LatentTimelinePlan recompute_temporal_indices(LatentTimelinePlan plan) {
    for (size_t i = 0; i < plan.entries.size(); ++i) plan.entries[i].temporal_index = static_cast<int64_t>(i);
    return plan;
}

json to_json(const LatentTimelinePlan& plan) {
    json entries = json::array();
    for (const auto& e : plan.entries) {
        json j = {{"origin", e.inserted ? "inserted" : "kept"},
                  {"noise_level", e.noise_level},
                  {"frame_noise", e.frame_noise},
                  {"temporal_index", e.temporal_index},
                  {"mask_mode", to_string(e.mask_mode)}};
        if (!e.inserted) j["orig_index"] = e.orig_index;
        entries.push_back(std::move(j));
    }
    return {{"schema_version", 1},
            {"entries", entries},
            {"fps", plan.fps},
            {"tiling_overlap_frames", plan.tiling_overlap_frames},
            {"realized_delta_s", plan.realized_delta_s}};
}

LatentTimelinePlan plan_from_json(const json& j) {
    if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array() || !j.contains("fps")) {
        throw Error("plan requires \"entries\" and \"fps\"");
    }
    LatentTimelinePlan plan;
    plan.fps = j.at("fps").get<double>();
    plan.tiling_overlap_frames = j.value("tiling_overlap_frames", int64_t{16});
    plan.realized_delta_s = j.value("realized_delta_s", 0.0);
    const auto& entries = j["entries"];
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& o = entries[i];
        PlanEntry e;
        const std::string origin = o.at("origin").get<std::string>();
        if (origin != "kept" && origin != "inserted") throw Error("entry " + std::to_string(i) + " has bad origin");
        e.inserted = origin == "inserted";
        e.orig_index = e.inserted ? -1 : o.at("orig_index").get<int64_t>();
        e.noise_level = o.at("noise_level").get<double>();
        e.frame_noise = o.value("frame_noise", 0.0);
        e.temporal_index = o.at("temporal_index").get<int64_t>();
        e.mask_mode = mask_mode_from_string(o.at("mask_mode").get<std::string>());
        if (e.noise_level < 0 || e.noise_level > 1 || e.frame_noise < 0 || e.frame_noise > 1) {
            throw Error("entry " + std::to_string(i) + " noise levels must lie in [0, 1]");
        }
        if (e.temporal_index != static_cast<int64_t>(i)) {
            throw Error("entry " + std::to_string(i) + " temporal_index must equal its position");
        }
        plan.entries.push_back(e);
    }
    return plan;
}

Box enclose(const Box& a, const Box& b) {
    return {std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1), std::max(a.y1, b.y1)};
}

int64_t RegionMask::count() const {
    return std::count_if(cells.begin(), cells.end(), [](uint8_t c) { return c != 0; });
}

Box dilate_box(MaskMode mode, const Box& lf, const CellGrid& grid) {
    Box b = lf;
    const double w = lf.width();
    const double h = lf.height();
    switch (mode) {
        case MaskMode::lip:
            break;
        case MaskMode::face:
            b = {lf.x0 - 0.25 * w, lf.y0 - h, lf.x1 + 0.25 * w, lf.y1};
            break;
        case MaskMode::head:
            b = {lf.x0 - 0.5 * w, lf.y0 - 2.0 * h, lf.x1 + 0.5 * w, lf.y1 + 0.25 * h};
            break;
        case MaskMode::full:
            return {0, 0, static_cast<double>(grid.frame_w), static_cast<double>(grid.frame_h)};
        case MaskMode::none:
            return {0, 0, 0, 0};
    }
    b.x0 = std::clamp(b.x0, 0.0, static_cast<double>(grid.frame_w));
    b.x1 = std::clamp(b.x1, 0.0, static_cast<double>(grid.frame_w));
    b.y0 = std::clamp(b.y0, 0.0, static_cast<double>(grid.frame_h));
    b.y1 = std::clamp(b.y1, 0.0, static_cast<double>(grid.frame_h));
    return b;
}

RegionMask box_to_cells(const Box& box, const CellGrid& grid) {
    RegionMask m{grid.rows(), grid.cols(), std::vector<uint8_t>(static_cast<size_t>(grid.cells()), 0)};
    if (box.x1 <= box.x0 || box.y1 <= box.y0) return m;
    const auto cell = static_cast<double>(grid.cell);
    for (int64_t r = 0; r < m.rows; ++r) {
        for (int64_t c = 0; c < m.cols; ++c) {
            const double cx0 = c * cell, cy0 = r * cell;
            const bool overlap = box.x0 < cx0 + cell && box.x1 > cx0 && box.y0 < cy0 + cell && box.y1 > cy0;
            m.cells[static_cast<size_t>(r * m.cols + c)] = overlap ? 1 : 0;
        }
    }
    return m;
}

RegionMask build_mask(MaskMode mode, const std::vector<Box>& boxes, const CellGrid& grid) {
    if (boxes.empty()) throw Error("build_mask needs at least one box");
    Box group = boxes.front();
    for (const auto& b : boxes) group = enclose(group, b);
    return box_to_cells(dilate_box(mode, group, grid), grid);
}

std::vector<RegionMask> build_masks(MaskMode mode, const std::vector<Box>& frame_boxes, int64_t num_latents,
                                    const CellGrid& grid) {
    std::vector<RegionMask> out;
    out.reserve(static_cast<size_t>(num_latents));
    for (int64_t n = 0; n < num_latents; ++n) {
        const FrameRange r = latent_to_range(n);
        if (r.end > static_cast<int64_t>(frame_boxes.size())) {
            throw Error("missing lower-face boxes for latent " + std::to_string(n));
        }
        std::vector<Box> group(frame_boxes.begin() + r.start, frame_boxes.begin() + r.end);
        out.push_back(build_mask(mode, group, grid));
    }
    return out;
}

}  // namespace lipedit::timeline
