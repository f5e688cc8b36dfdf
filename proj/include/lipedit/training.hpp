// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Masked flow-matching training on the toy world: timestep sampler, masked noising,
// immiscible noise pairing, conditioning dropout, contrastive loss, AdamW and the
// staged schedule with checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/denoiser.hpp"
#include "lipedit/rng.hpp"
#include "lipedit/toy.hpp"

namespace lipedit::train {

inline constexpr int kCheckpointSchemaVersion = 1;

struct CorpusConfig {
    int64_t clips = 200;
    double clip_seconds = 6.0;
    double fps = 24.0;
    uint64_t seed = 1000;
    nlohmann::json to_json() const;
    static CorpusConfig from_json(const nlohmann::json& j);
};

/// Stage 0 pretrains the base denoiser (stand-in for a pretrained video model),
/// stage 1 trains the audio modules only, stage 2 the adapters plus audio modules.
struct TrainConfig {
    int stage = 1;
    int64_t steps = 200;
    double lr = 5e-4;
    bool cosine_decay = true;  // lr falls to lr_floor·lr over `steps`
    double lr_floor = 0.05;
    double p_audio = 1.0;
    double p_ff = 0.9;
    double p_v2v = 0.9;
    double p_id = 0.0;
    double p_frame_ref = 0.0;
    double shift_mu = 2.05;
    bool uniform_timesteps = false;
    int64_t k_immiscible = 4;
    double lambda_contrastive = 0.05;
    int64_t batch = 4;
    uint64_t seed = 0;
    int64_t min_frames = 6;
    int64_t max_frames = 10;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double grad_clip = 1.0;
    int64_t checkpoint_every = 0;  // 0: only at the end
    CorpusConfig corpus;
    model::DenoiserConfig model;

    static TrainConfig for_stage(int stage);
    double lr_at(int64_t step) const;
    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys take the defaults of the stage named in `j` (default 1).
    static TrainConfig from_json(const nlohmann::json& j);
};

// ---- timestep sampler ----

/// t = μs / (1 + (μ−1)s), s = σ(z·sigma + m), z ~ N(0, 1).
struct TimestepSampler {
    double mu = 2.05;
    double sigma = 1.0;
    double m = 0.0;

    double transform(double z) const;
    double sample(Rng& rng) const;
    /// P(lo ≤ t ≤ hi) under the analytic normal CDF.
    double mass(double lo, double hi) const;
};

/// Chooses (m, sigma) so that each tail outside [lo, hi] holds `tail` probability.
TimestepSampler calibrate_sampler(double mu = 2.05, double lo = 0.60, double hi = 0.98, double tail = 0.05);

/// Standard normal quantile by bisection on the CDF.
double normal_quantile(double p);

// ---- noising, pairing, loss ----

/// Cell mask [n * cells] broadcast over channels of latents [n, rows, cols, C].
Tensor broadcast_cell_mask(const std::vector<uint8_t>& cell_mask, const Shape& latent_shape);

/// x_t = M⊙[(1−t)x0 + tε] + (1−M)⊙x0, realized as a select so x_t == x0 bitwise where M = 0.
Tensor make_noised_input(const Tensor& x0, const Tensor& eps, double t, const Tensor& mask);

/// Index of the candidate nearest to x0 in L2.
size_t immiscible_pick(const Tensor& x0, const std::vector<Tensor>& candidates);
std::vector<Tensor> immiscible_assign(const std::vector<Tensor>& x0, const std::vector<std::vector<Tensor>>& candidates);

/// ‖M⊙(v − u)‖² / ‖M‖₁ with u = M⊙(ε − x0), minus λ·‖M⊙(v − u_neg)‖² / ‖M‖₁ per negative target.
ad::Var flow_matching_loss(const ad::Var& v, const Tensor& x0, const Tensor& eps, const Tensor& mask,
                           const std::vector<Tensor>& negative_targets = {}, double lambda = 0.0);

struct ConditionFlags {
    bool audio = true;
    bool first_frame = false;
    bool v2v = false;
    bool face_refs = false;
    bool frame_refs = false;
};

ConditionFlags dropout_conditions(Rng& rng, const TrainConfig& config);

// ---- data ----

struct Clip {
    uint64_t seed = 0;
    double fps = 24.0;
    toy::IdentitySpec identity;
    toy::GeneratedAudio audio;
    Tensor latents;                             // [N, rows, cols, C]
    std::vector<timeline::RegionMask> lip_masks;  // per latent
    Tensor windows;                             // [F, W * B * C]
    int64_t num_latents() const { return latents.dim(0); }
};

Clip make_clip(uint64_t seed, double seconds, double fps, const model::DenoiserConfig& model);
/// Clip with a given identity and audio track (held-out renders, novel audio).
Clip make_clip(const toy::IdentitySpec& identity, const toy::GeneratedAudio& audio, double seconds, double fps,
               const model::DenoiserConfig& model);
std::vector<Clip> make_corpus(const CorpusConfig& config, const model::DenoiserConfig& model);
nlohmann::json corpus_manifest(const CorpusConfig& config);

struct TrainSample {
    model::TokenSequence tokens;
    Tensor x0;    // [V, C]
    Tensor eps;   // [V, C]
    Tensor mask;  // [V, C]
    const Clip* clip = nullptr;
    int64_t first = 0;
    int64_t frames = 0;
    double t = 0.0;
    ConditionFlags flags;
};

TrainSample build_sample(Rng& rng, const Clip& clip, int64_t first, int64_t frames, const TrainConfig& config,
                         const TimestepSampler& sampler);

// ---- optimization ----

class AdamW {
public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

    /// Updates every parameter that requires grad; returns the pre-clip global gradient norm.
    double step(std::map<std::string, ad::Var>& params, double lr, double grad_clip);
    int64_t steps_taken() const { return t_; }

    void save(std::vector<std::pair<std::string, Tensor>>& out) const;
    void load(const std::map<std::string, Tensor>& in, int64_t steps_taken);

private:
    double beta1_ = 0.9, beta2_ = 0.95, weight_decay_ = 0.01, eps_ = 1e-8;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

struct LossRow {
    int64_t step = 0;
    double loss = 0.0;
    int stage = 0;
};

struct Checkpoint {
    model::Denoiser model;
    AdamW optimizer;
    int stage = 0;
    int64_t step = 0;  // steps completed within the stage
    double fps = 24.0;
    nlohmann::json train_config;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainHooks {
    std::function<void(const LossRow&)> on_loss;
    std::function<void(const Checkpoint&)> on_checkpoint;
};

/// One optimizer step; returns the batch loss.
double train_step(model::Denoiser& model, AdamW& opt, const std::vector<Clip>& corpus, const TrainConfig& config,
                  const TimestepSampler& sampler, int64_t step);

/// Continues `ckpt` (fresh model for stage 0 when no checkpoint is given) until
/// config.steps; the per-step RNG depends only on (seed, step), so resuming is bitwise.
Checkpoint run_training(const TrainConfig& config, const std::vector<Clip>& corpus, std::optional<Checkpoint> init,
                        const TrainHooks& hooks = {});

/// Prepares the model of a previous stage for `config.stage` (groups, fresh optimizer).
Checkpoint begin_stage(const TrainConfig& config, std::optional<Checkpoint> previous);

std::string loss_csv(const std::vector<LossRow>& rows);

}  // namespace lipedit::train
