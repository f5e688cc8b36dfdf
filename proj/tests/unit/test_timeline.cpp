// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "lipedit/rng.hpp"
#include "lipedit/timeline.hpp"

using namespace lipedit;
using namespace lipedit::timeline;
using transcript::EditOp;
using transcript::OpKind;

namespace {

EditOp op(OpKind kind, double at, double dur) {
    EditOp o;
    o.kind = kind;
    o.at_s = at;
    o.duration_s = dur;
    return o;
}

}  // namespace

TEST_CASE("frame and latent index algebra") {
    CHECK(video_to_latent(0) == 0);
    CHECK(video_to_latent(1) == 1);
    CHECK(video_to_latent(8) == 1);
    CHECK(video_to_latent(9) == 2);
    CHECK(latent_to_range(0) == FrameRange{0, 1});
    CHECK(latent_to_range(1) == FrameRange{1, 9});
    CHECK(latent_to_range(3) == FrameRange{17, 25});
    CHECK(latents_for_frames(1) == 1);
    CHECK(latents_for_frames(9) == 2);
    CHECK(frames_for_latents(2) == 9);
    CHECK_THROWS_AS(video_to_latent(-1), Error);
    CHECK_THROWS_AS(latent_to_range(-3), Error);
    for (int64_t f = 0; f < 5000; ++f) {
        const FrameRange r = latent_to_range(video_to_latent(f));
        REQUIRE(r.start <= f);
        REQUIRE(f < r.end);
    }
}

TEST_CASE("identity plan keeps every latent under the render mode") {
    const auto plan = apply_edit_ops(12, {}, 25.0);
    REQUIRE(plan.size() == 12);
    for (int64_t i = 0; i < 12; ++i) {
        const auto& e = plan.entries[static_cast<size_t>(i)];
        CHECK_FALSE(e.inserted);
        CHECK(e.orig_index == i);
        CHECK(e.temporal_index == i);
        CHECK(e.mask_mode == MaskMode::lip);
        CHECK(e.noise_level == 1.0);
        CHECK(e.frame_noise == 0.0);
    }
}

TEST_CASE("removal drops latents and re-noises the neighbours") {
    const double fps = 25.0;
    const auto plan = apply_edit_ops(20, {op(OpKind::removal, 33.0 / fps, -16.0 / fps)}, fps);
    REQUIRE(plan.size() == 18);
    std::vector<int64_t> origins;
    for (const auto& e : plan.entries) origins.push_back(e.orig_index);
    CHECK(origins[4] == 4);
    CHECK(origins[5] == 7);
    for (const auto& e : plan.entries) {
        const bool adjacent = e.orig_index == 4 || e.orig_index == 7;
        CHECK(e.frame_noise == (adjacent ? 0.7 : 0.0));
    }
    CHECK(plan.realized_delta_s == doctest::Approx(-16.0 / fps));
}

TEST_CASE("addition inserts fully noised entries") {
    CHECK(addition_latent_count(0.9, 30.0) == 3);
    CHECK(addition_latent_count(0.01, 30.0) == 1);
    const auto plan = apply_edit_ops(10, {op(OpKind::addition, 17.0 / 30.0, 0.9)}, 30.0);
    REQUIRE(plan.size() == 13);
    CHECK(plan.num_inserted() == 3);
    for (int i = 3; i < 6; ++i) {
        CHECK(plan.entries[static_cast<size_t>(i)].inserted);
        CHECK(plan.entries[static_cast<size_t>(i)].noise_level == 1.0);
        CHECK(plan.entries[static_cast<size_t>(i)].mask_mode == MaskMode::full);
    }
    CHECK(plan.entries[6].orig_index == 3);
    CHECK(plan.entries[6].temporal_index == 6);
}

TEST_CASE("random edit sequences keep order, counts and indices") {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const int64_t n = 4 + static_cast<int64_t>(rng.below(40));
        const double fps = 24.0 + static_cast<double>(rng.below(37));
        std::vector<EditOp> ops;
        int64_t expect = n;
        // one removal in the first half, additions anywhere
        const int64_t rb = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n / 2)));
        const int64_t rc = 1 + static_cast<int64_t>(rng.below(2));
        const double at = static_cast<double>(8 * (rb - 1) + 1) / fps;
        ops.push_back(op(OpKind::removal, at, -static_cast<double>(8 * rc) / fps));
        expect -= rc;
        const int adds = static_cast<int>(rng.below(3));
        for (int a = 0; a < adds; ++a) {
            const double t = rng.uniform(0.0, static_cast<double>(8 * n) / fps);
            const double d = rng.uniform(0.05, 1.5);
            ops.push_back(op(OpKind::addition, t, d));
            expect += addition_latent_count(d, fps);
        }
        const auto plan = apply_edit_ops(n, ops, fps);
        REQUIRE(plan.size() == expect);
        int64_t last = -1;
        for (size_t i = 0; i < plan.entries.size(); ++i) {
            REQUIRE(plan.entries[i].temporal_index == static_cast<int64_t>(i));
            if (!plan.entries[i].inserted) {
                REQUIRE(plan.entries[i].orig_index > last);
                last = plan.entries[i].orig_index;
            }
        }
        // removal followed by an equal-length addition restores the count
        auto ops2 = ops;
        ops2.push_back(op(OpKind::addition, at, static_cast<double>(8 * rc) / fps));
        REQUIRE(apply_edit_ops(n, ops2, fps).size() == expect + rc);
    }
}

TEST_CASE("invalid ops are rejected") {
    const double fps = 25.0;
    CHECK_THROWS_AS(apply_edit_ops(4, {op(OpKind::removal, 9.0 / fps, -40.0 / fps)}, fps), Error);
    CHECK_THROWS_AS(apply_edit_ops(20, {op(OpKind::removal, 9.0 / fps, -16.0 / fps),
                                        op(OpKind::removal, 17.0 / fps, -16.0 / fps)},
                                   fps),
                    Error);
    CHECK_THROWS_AS(apply_edit_ops(4, {op(OpKind::addition, 100.0, 0.5)}, fps), Error);
}

TEST_CASE("retime ops expand into micro edits") {
    EditOp r = op(OpKind::retime, 0.0, 3.0);
    r.scale = 4.1 / 3.0;
    const auto plan = apply_edit_ops(20, {r}, 24.0);
    // four additions of 0.275 s, one latent each at 24 fps
    CHECK(plan.num_inserted() == 4);
}

TEST_CASE("removing the first entry and inserting at the front reindexes") {
    const double fps = 25.0;
    auto plan = apply_edit_ops(6, {op(OpKind::removal, 0.0, -0.02)}, fps);
    CHECK(plan.entries[0].orig_index == 1);
    CHECK(plan.entries[0].temporal_index == 0);
    plan = apply_edit_ops(6, {op(OpKind::addition, 0.0, 16.0 / fps)}, fps);
    CHECK(plan.entries[2].orig_index == 0);
    CHECK(plan.entries[2].temporal_index == 2);
}

TEST_CASE("plan JSON round trip") {
    const double fps = 30.0;
    const auto plan = apply_edit_ops(15, {op(OpKind::removal, 33.0 / fps, -16.0 / fps), op(OpKind::addition, 1.0, 0.5)}, fps);
    const auto back = plan_from_json(nlohmann::json::parse(to_json(plan).dump()));
    CHECK(back.entries == plan.entries);
    CHECK(back.fps == plan.fps);
    CHECK(back.realized_delta_s == plan.realized_delta_s);
}

TEST_CASE("region masks") {
    const CellGrid grid;
    const Box lf{10, 18, 22, 28};
    const auto full = build_mask(MaskMode::full, {lf}, grid);
    CHECK(full.count() == grid.cells());
    const auto lip = build_mask(MaskMode::lip, std::vector<Box>(8, lf), grid);
    CHECK(lip == box_to_cells(lf, grid));
    const Box a{1, 1, 6, 6}, b{20, 20, 30, 30};
    CHECK(build_mask(MaskMode::lip, {a, b}, grid) == box_to_cells({1, 1, 30, 30}, grid));
    CHECK_THROWS_AS(build_mask(MaskMode::lip, {}, grid), Error);

    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const double x0 = rng.uniform(4, 20), y0 = rng.uniform(8, 24);
        const Box box{x0, y0, x0 + rng.uniform(2, 10), y0 + rng.uniform(2, 8)};
        const auto ml = build_mask(MaskMode::lip, {box}, grid);
        const auto mf = build_mask(MaskMode::face, {box}, grid);
        const auto mh = build_mask(MaskMode::head, {box}, grid);
        for (size_t i = 0; i < ml.cells.size(); ++i) {
            REQUIRE(ml.cells[i] <= mf.cells[i]);
            REQUIRE(mf.cells[i] <= mh.cells[i]);
        }
    }
}
