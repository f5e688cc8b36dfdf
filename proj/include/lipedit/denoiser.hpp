// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy diffusion transformer over latent cell tokens with reference tokens, 3D
// rotary positions, per-token timestep modulation, masked audio cross-attention
// and low-rank adapters.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lipedit/autodiff.hpp"
#include "lipedit/tensor.hpp"
#include "lipedit/timeline.hpp"

namespace lipedit::model {

struct DenoiserConfig {
    int64_t dim = 32;
    int64_t heads = 2;
    int64_t blocks = 3;
    int64_t ffn_hidden = 64;
    int64_t latent_channels = 4;
    int64_t grid_rows = 4;
    int64_t grid_cols = 4;
    int64_t audio_width = 32;
    int64_t window = 9;
    int64_t audio_bands = 2;
    int64_t audio_channels = 16;
    int64_t lora_rank = 4;
    double lora_alpha = 4.0;
    int64_t time_freqs = 16;
    double rope_base_t = 100.0;
    double rope_base_xy = 10.0;
    int64_t max_face_refs = 6;

    int64_t cells() const { return grid_rows * grid_cols; }
    int64_t head_dim() const { return dim / heads; }
    int64_t audio_feature_width() const { return audio_bands * audio_channels; }
    void validate() const;
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

enum class Role : uint8_t { video = 0, face_ref = 1, frame_ref = 2 };

struct Position {
    int64_t t = 0, y = 0, x = 0;
    bool operator==(const Position&) const = default;
};

/// Reference tokens first, then video tokens in (frame, row, col) order.
struct TokenSequence {
    Tensor values;  // [S, latent_channels]
    std::vector<Position> positions;
    std::vector<double> timesteps;
    std::vector<Role> roles;
    std::vector<uint8_t> audio_mask;   // per token; always 0 for references
    std::vector<int64_t> audio_slot;   // block-local latent frame of video tokens, -1 for references
    int64_t num_refs = 0;

    int64_t size() const { return static_cast<int64_t>(positions.size()); }
    int64_t num_video() const { return size() - num_refs; }
};

struct FaceRef {
    Tensor latent;               // [rows, cols, C], clean
    timeline::RegionMask cells;  // lower-face cells to keep
};

struct FrameRef {
    Tensor latent;  // [rows, cols, C], clean
    int64_t t_ref = 0;
};

/// Latent state of the frames of one block.
struct BlockInput {
    Tensor latents;                              // [n, rows, cols, C]
    std::vector<int64_t> temporal_indices;       // per frame
    std::vector<double> cell_timesteps;          // [n * cells]
    std::vector<timeline::RegionMask> audio_masks;  // per frame
};

/// Face references receive sentinels -1, -2, ... in the given order; frame references
/// keep their t_ref, which must not coincide with a video temporal index.
TokenSequence assemble_tokens(const BlockInput& block, const std::vector<FaceRef>& face_refs,
                              const std::vector<FrameRef>& frame_refs, int64_t max_face_refs = 6);

/// Rotary angles [S, head_dim/2]: the first quarter of channel pairs encodes t, the
/// remaining pairs are split between y and x.
Tensor rope_angles(const std::vector<Position>& positions, const DenoiserConfig& config);

enum class ParamGroup { base, audio, lora };
ParamGroup group_of(const std::string& name);

class Denoiser {
public:
    explicit Denoiser(DenoiserConfig config, uint64_t seed = 0);

    const DenoiserConfig& config() const { return config_; }
    std::map<std::string, ad::Var>& params() { return params_; }
    const std::map<std::string, ad::Var>& params() const { return params_; }
    const ad::Var& param(const std::string& name) const;

    /// Only parameters of the listed groups require gradients afterwards.
    void set_trainable(const std::vector<ParamGroup>& groups);
    std::vector<std::string> trainable_names() const;

    /// Audio tokens [count * window, audio_width] for latents [first, first + count)
    /// from per-frame windows [F, window * B * C] of the whole timeline.
    ad::Var audio_tokens(const Tensor& frame_windows, int64_t first, int64_t count) const;

    struct Embedded {
        ad::Var hidden;                 // [1 + S, D]; row 0 is the learned prompt token
        std::vector<ad::Var> modulation;  // per block [1 + S, 6D]
        ad::Var final_modulation;       // [1 + S, 2D]
        Tensor angles;
        int64_t video_offset = 0;       // first video row in `hidden`
    };

    Embedded embed(const TokenSequence& seq) const;
    /// Block-0 timestep-modulated input over all rows (cache gating signal).
    Tensor cache_signal(const Embedded& e) const;
    /// Runs the transformer stack; `audio` may be undefined to drop audio conditioning.
    ad::Var run_blocks(const Embedded& e, const TokenSequence& seq, const ad::Var& audio) const;
    /// Velocity [V, C] for the video tokens.
    ad::Var head(const Embedded& e, const ad::Var& hidden) const;

    ad::Var forward(const TokenSequence& seq, const ad::Var& audio) const;

private:
    ad::Var adapted(const ad::Var& x, const std::string& name) const;
    ad::Var& add_param(const std::string& name, Tensor value);

    DenoiserConfig config_;
    std::map<std::string, ad::Var> params_;
};

}  // namespace lipedit::model
