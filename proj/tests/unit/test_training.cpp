// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "lipedit/io.hpp"
#include "lipedit/training.hpp"

using namespace lipedit;
using namespace lipedit::train;

namespace {

TrainConfig tiny_config(int stage, int64_t steps) {
    TrainConfig c = TrainConfig::for_stage(stage);
    c.steps = steps;
    c.corpus.clips = 4;
    c.corpus.clip_seconds = 3.0;
    c.batch = 2;
    c.seed = 5;
    return c;
}

bool same_params(const model::Denoiser& a, const model::Denoiser& b) {
    for (const auto& [name, p] : a.params()) {
        if (!p.value().bit_equal(b.params().at(name).value())) return false;
    }
    return true;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "lipedit_test_training";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("normal quantile inverts the normal cdf") {
    CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(normal_quantile(0.95) == doctest::Approx(1.6448536269514722).epsilon(1e-12));
    CHECK(normal_quantile(0.025) == doctest::Approx(-1.959963984540054).epsilon(1e-12));
    CHECK_THROWS_AS(normal_quantile(1.0), Error);
}

TEST_CASE("calibrated sampler puts equal tails around the target interval") {
    const auto s = calibrate_sampler();
    CHECK(s.mass(0.60, 0.98) == doctest::Approx(0.90).epsilon(1e-9));
    CHECK(s.mass(1e-12, 0.60) == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(s.mass(0.98, 1.0 - 1e-15) == doctest::Approx(0.05).epsilon(1e-6));
    double prev = 0.0;
    for (double z = -6.0; z <= 6.0; z += 0.25) {
        const double t = s.transform(z);
        CHECK(t > prev);
        CHECK(t < 1.0);
        prev = t;
    }
    Rng rng(1);
    int inside = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double t = s.sample(rng);
        if (t >= 0.60 && t <= 0.98) ++inside;
    }
    CHECK(static_cast<double>(inside) / n == doctest::Approx(0.90).epsilon(0.01 / 0.9));
    CHECK_THROWS_AS(calibrate_sampler(2.05, 0.9, 0.5), Error);
}

TEST_CASE("noised input is x0 bitwise outside the mask and interpolates inside") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const Shape shape{3, 2, 2, 4};
        const Tensor x0 = rng.normal_tensor(shape), eps = rng.normal_tensor(shape);
        std::vector<uint8_t> cells(12);
        for (auto& c : cells) c = rng.bernoulli(0.5) ? 1 : 0;
        const Tensor m = broadcast_cell_mask(cells, shape);
        const double t = rng.uniform();
        const Tensor xt = make_noised_input(x0, eps, t, m);
        for (size_t i = 0; i < xt.size(); ++i) {
            if (cells[i / 4]) {
                CHECK(xt[i] == (1.0 - t) * x0[i] + t * eps[i]);
            } else {
                CHECK(std::bit_cast<uint64_t>(xt[i]) == std::bit_cast<uint64_t>(x0[i]));
            }
        }
    }
    const Tensor x({1, 1, 1, 2}, 1.0);
    CHECK_THROWS_AS(make_noised_input(x, Tensor({2}), 0.5, x), Error);
    CHECK_THROWS_AS(make_noised_input(x, x, 1.5, x), Error);
    CHECK_THROWS_AS(broadcast_cell_mask({1, 0}, Shape{1, 1, 1, 2}), Error);
}

TEST_CASE("immiscible pairing picks the nearest candidate") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor x0 = rng.normal_tensor({8});
        std::vector<Tensor> cands;
        for (int k = 0; k < 4; ++k) cands.push_back(rng.normal_tensor({8}));
        auto dist = [&](const Tensor& c) {
            double d = 0.0;
            for (size_t i = 0; i < c.size(); ++i) d += (x0[i] - c[i]) * (x0[i] - c[i]);
            return d;
        };
        const size_t pick = immiscible_pick(x0, cands);
        for (const auto& c : cands) CHECK(dist(cands[pick]) <= dist(c));
    }
    CHECK_THROWS_AS(immiscible_pick(Tensor({2}), {}), Error);
    const auto assigned = immiscible_assign({Tensor({1}, 0.0)}, {{Tensor({1}, 5.0), Tensor({1}, -0.5)}});
    CHECK(assigned[0][0] == -0.5);
}

TEST_CASE("masked loss matches its definition and has no gradient outside the mask") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Shape shape{6, 4};
        const Tensor x0 = rng.normal_tensor(shape), eps = rng.normal_tensor(shape), neg = rng.normal_tensor(shape);
        Tensor m(shape);
        for (auto& v : m.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        m[0] = 1.0;
        ad::Var v = ad::parameter(rng.normal_tensor(shape));
        const double lambda = 0.05;
        const ad::Var loss = flow_matching_loss(v, x0, eps, m, {neg}, lambda);
        double mass = 0.0, pos = 0.0, negt = 0.0;
        for (size_t i = 0; i < m.size(); ++i) {
            mass += m[i];
            const double u = m[i] * (eps[i] - x0[i]);
            pos += std::pow(m[i] * (v.value()[i] - u), 2);
            negt += std::pow(m[i] * (v.value()[i] - neg[i]), 2);
        }
        CHECK(loss.value().item() == doctest::Approx(pos / mass - lambda * negt / mass).epsilon(1e-12));
        ad::backward(loss);
        for (size_t i = 0; i < m.size(); ++i) {
            if (m[i] == 0.0) CHECK(v.grad()[i] == 0.0);
        }
    }
    const ad::Var v = ad::parameter(Tensor({2, 2}));
    CHECK_THROWS_WITH_AS(flow_matching_loss(v, Tensor({2, 2}), Tensor({2, 2}), Tensor({2, 2})),
                         doctest::Contains("all-zero mask"), Error);
}

TEST_CASE("conditioning dropout matches the configured rates") {
    TrainConfig c = TrainConfig::for_stage(2);
    Rng rng(5);
    const int n = 20000;
    int audio = 0, ff = 0, v2v = 0, id = 0, fr = 0;
    for (int i = 0; i < n; ++i) {
        const auto f = dropout_conditions(rng, c);
        audio += f.audio, ff += f.first_frame, v2v += f.v2v, id += f.face_refs, fr += f.frame_refs;
    }
    CHECK(std::abs(audio / double(n) - c.p_audio) < 0.02);
    CHECK(std::abs(ff / double(n) - c.p_ff) < 0.02);
    CHECK(std::abs(v2v / double(n) - c.p_v2v) < 0.02);
    CHECK(std::abs(id / double(n) - c.p_id) < 0.02);
    CHECK(std::abs(fr / double(n) - c.p_frame_ref) < 0.02);

    TrainConfig s1 = TrainConfig::for_stage(1);
    s1.p_audio = 0.0;
    for (int i = 0; i < 100; ++i) CHECK(dropout_conditions(rng, s1).audio);
}

TEST_CASE("training samples respect the first-frame and v2v flags") {
    model::DenoiserConfig mc;
    const Clip clip = make_clip(8, 3.0, 24.0, mc);
    TrainConfig c = TrainConfig::for_stage(2);
    c.p_ff = 1.0;
    c.p_v2v = 1.0;
    c.p_id = 1.0;
    c.p_frame_ref = 1.0;
    const auto sampler = calibrate_sampler();
    Rng rng(6);
    const auto s = build_sample(rng, clip, 2, 4, c, sampler);
    const int64_t cells = clip.latents.dim(1) * clip.latents.dim(2);
    const int64_t C = clip.latents.dim(3);
    const int64_t V = 4 * cells;
    REQUIRE(s.tokens.num_refs >= 2);
    const int64_t off = s.tokens.num_refs;
    for (int64_t f = 0; f < 4; ++f) {
        for (int64_t cell = 0; cell < cells; ++cell) {
            const bool lip = clip.lip_masks[static_cast<size_t>(2 + f)].cells[static_cast<size_t>(cell)] != 0;
            const bool noisy = f > 0 && lip;
            const int64_t tok = f * cells + cell;
            CHECK(s.tokens.timesteps[static_cast<size_t>(off + tok)] == (noisy ? s.t : 0.0));
            CHECK(s.mask[tok * C] == (noisy ? 1.0 : 0.0));
            if (!noisy) {
                for (int64_t k = 0; k < C; ++k) CHECK(s.tokens.values[(off + tok) * C + k] == s.x0[tok * C + k]);
            }
        }
    }
    CHECK(s.x0.dim(0) == V);
    for (int64_t r = 0; r < off; ++r) {
        const auto& p = s.tokens.positions[static_cast<size_t>(r)];
        CHECK((p.t < 2 || p.t > 5));
    }
    CHECK_THROWS_AS(build_sample(rng, clip, clip.num_latents() - 1, 4, c, sampler), Error);
}

TEST_CASE("cosine decay runs from the base rate to the floor") {
    TrainConfig c = TrainConfig::for_stage(1);
    c.steps = 101;
    CHECK(c.lr_at(0) == c.lr);
    CHECK(c.lr_at(100) == doctest::Approx(c.lr * c.lr_floor).epsilon(1e-12));
    CHECK(c.lr_at(50) == doctest::Approx(c.lr * (c.lr_floor + (1 - c.lr_floor) / 2)).epsilon(1e-12));
    c.cosine_decay = false;
    CHECK(c.lr_at(70) == c.lr);
}

TEST_CASE("configs round-trip and validate") {
    for (int stage = 0; stage <= 2; ++stage) {
        const TrainConfig c = TrainConfig::for_stage(stage);
        CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
    }
    CHECK_THROWS_AS(TrainConfig::for_stage(3), Error);
    nlohmann::json j = {{"stage", 1}, {"p_id", 1.5}};
    CHECK_THROWS_AS(TrainConfig::from_json(j), Error);
    const auto m = corpus_manifest(CorpusConfig{});
    CHECK(m["clips"].size() == 200);
    CHECK(m["schema_version"] == 1);
}

TEST_CASE("audio training leaves base weights untouched") {
    const TrainConfig c0 = tiny_config(0, 2);
    const auto corpus = make_corpus(c0.corpus, c0.model);
    auto s0 = run_training(c0, corpus, std::nullopt);
    std::map<std::string, Tensor> before;
    for (const auto& [name, p] : s0.model.params()) before[name] = p.value();
    const auto s1 = run_training(tiny_config(1, 3), corpus, std::move(s0));
    bool audio_moved = false;
    for (const auto& [name, p] : s1.model.params()) {
        const auto g = model::group_of(name);
        if (g == model::ParamGroup::audio) {
            audio_moved = audio_moved || !p.value().bit_equal(before.at(name));
        } else {
            CHECK_MESSAGE(p.value().bit_equal(before.at(name)), name);
        }
    }
    CHECK(audio_moved);
    CHECK(s1.stage == 1);
    CHECK(s1.step == 3);
}

TEST_CASE("stage 2 needs a stage-1 checkpoint") {
    const TrainConfig c = tiny_config(2, 1);
    const auto corpus = make_corpus(c.corpus, c.model);
    CHECK_THROWS_WITH_AS(run_training(c, corpus, std::nullopt), doctest::Contains("stage-1 checkpoint"), Error);
}

TEST_CASE("resuming from a periodic checkpoint is bitwise identical") {
    TrainConfig full = tiny_config(0, 6);
    full.checkpoint_every = 3;
    const auto corpus = make_corpus(full.corpus, full.model);
    const auto path = scratch("mid.eyts");
    std::vector<LossRow> rows;
    std::vector<int64_t> saved_at;
    TrainHooks hooks;
    hooks.on_loss = [&](const LossRow& r) { rows.push_back(r); };
    hooks.on_checkpoint = [&](const Checkpoint& ck) {
        saved_at.push_back(ck.step);
        if (ck.step == 3) save_checkpoint(path, ck);
    };
    const auto straight = run_training(full, corpus, std::nullopt, hooks);
    CHECK(saved_at == std::vector<int64_t>{3, 6});
    CHECK(rows.size() == 6);

    auto loaded = load_checkpoint(path);
    CHECK(loaded.step == 3);
    CHECK(loaded.optimizer.steps_taken() == 3);
    CHECK(loaded.train_config == full.to_json());
    const auto resumed = run_training(full, corpus, std::move(loaded));
    CHECK(resumed.step == 6);
    CHECK(same_params(resumed.model, straight.model));
    CHECK(loss_csv(rows).rfind("step,loss,stage\n1,", 0) == 0);
}

TEST_CASE("short base training reduces the loss") {
    TrainConfig c = tiny_config(0, 160);
    c.batch = 4;
    const auto corpus = make_corpus(c.corpus, c.model);
    std::vector<double> losses;
    TrainHooks hooks;
    hooks.on_loss = [&](const LossRow& r) { losses.push_back(r.loss); };
    run_training(c, corpus, std::nullopt, hooks);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 40; ++i) {
        head += losses[static_cast<size_t>(i)];
        tail += losses[losses.size() - 1 - static_cast<size_t>(i)];
    }
    CHECK(tail < 0.7 * head);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const auto path = scratch("bad.eyts");
    io::write_tensor(path, Tensor({1}), {{"kind", "tensor"}});
    CHECK_THROWS_AS(load_checkpoint(path), Error);
}
