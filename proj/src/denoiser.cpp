// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "lipedit/audio.hpp"
#include "lipedit/rng.hpp"

namespace lipedit::model {

using ad::Var;
using nlohmann::json;

void DenoiserConfig::validate() const {
    if (dim <= 0 || heads <= 0 || dim % heads != 0) throw Error("dim must be a positive multiple of heads");
    if (head_dim() % 8 != 0) throw Error("head_dim must be a multiple of 8 for 3D rotary positions");
    if (blocks < 1 || ffn_hidden < 1 || latent_channels < 1 || grid_rows < 1 || grid_cols < 1) {
        throw Error("denoiser sizes must be positive");
    }
    if (window < 1 || window % 2 == 0) throw Error("audio window must be odd");
    if (lora_rank < 1) throw Error("adapter rank must be positive");
    if (time_freqs < 2 || time_freqs % 2 != 0) throw Error("time_freqs must be even");
}

json DenoiserConfig::to_json() const {
    return {{"dim", dim},
            {"heads", heads},
            {"blocks", blocks},
            {"ffn_hidden", ffn_hidden},
            {"latent_channels", latent_channels},
            {"grid_rows", grid_rows},
            {"grid_cols", grid_cols},
            {"audio_width", audio_width},
            {"window", window},
            {"audio_bands", audio_bands},
            {"audio_channels", audio_channels},
            {"lora_rank", lora_rank},
            {"lora_alpha", lora_alpha},
            {"time_freqs", time_freqs},
            {"rope_base_t", rope_base_t},
            {"rope_base_xy", rope_base_xy},
            {"max_face_refs", max_face_refs}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
    DenoiserConfig c;
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.grid_rows = j.value("grid_rows", c.grid_rows);
    c.grid_cols = j.value("grid_cols", c.grid_cols);
    c.audio_width = j.value("audio_width", c.audio_width);
    c.window = j.value("window", c.window);
    c.audio_bands = j.value("audio_bands", c.audio_bands);
    c.audio_channels = j.value("audio_channels", c.audio_channels);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
    c.time_freqs = j.value("time_freqs", c.time_freqs);
    c.rope_base_t = j.value("rope_base_t", c.rope_base_t);
    c.rope_base_xy = j.value("rope_base_xy", c.rope_base_xy);
    c.max_face_refs = j.value("max_face_refs", c.max_face_refs);
    c.validate();
    return c;
}

TokenSequence assemble_tokens(const BlockInput& block, const std::vector<FaceRef>& face_refs,
                              const std::vector<FrameRef>& frame_refs, int64_t max_face_refs) {
    const Tensor& x = block.latents;
    if (x.rank() != 4) throw Error("block latents must be [n, rows, cols, C], got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), rows = x.dim(1), cols = x.dim(2), C = x.dim(3);
    const int64_t cells = rows * cols;
    if (static_cast<int64_t>(block.temporal_indices.size()) != n ||
        static_cast<int64_t>(block.cell_timesteps.size()) != n * cells ||
        static_cast<int64_t>(block.audio_masks.size()) != n) {
        throw Error("block metadata does not match its " + std::to_string(n) + " frames");
    }
    if (static_cast<int64_t>(face_refs.size()) > max_face_refs) {
        throw Error(std::to_string(face_refs.size()) + " face references exceed the limit of " +
                    std::to_string(max_face_refs));
    }
    const std::set<int64_t> video_t(block.temporal_indices.begin(), block.temporal_indices.end());
    for (const auto& fr : frame_refs) {
        if (video_t.count(fr.t_ref)) {
            throw Error("frame reference index " + std::to_string(fr.t_ref) + " collides with a video frame");
        }
    }

    TokenSequence seq;
    std::vector<double> values;
    auto push = [&](const double* v, Position p, double t, Role role, uint8_t mask, int64_t slot) {
        values.insert(values.end(), v, v + C);
        seq.positions.push_back(p);
        seq.timesteps.push_back(t);
        seq.roles.push_back(role);
        seq.audio_mask.push_back(mask);
        seq.audio_slot.push_back(slot);
    };
    auto check_ref = [&](const Tensor& lat) {
        if (lat.shape() != Shape{rows, cols, C}) {
            throw Error("reference latent " + shape_str(lat.shape()) + " does not match the block grid");
        }
    };

    for (size_t k = 0; k < face_refs.size(); ++k) {
        const auto& fr = face_refs[k];
        check_ref(fr.latent);
        if (fr.cells.rows != rows || fr.cells.cols != cols) throw Error("face reference mask has the wrong grid");
        const int64_t sentinel = -static_cast<int64_t>(k) - 1;
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < cols; ++c) {
                if (!fr.cells.cells[static_cast<size_t>(r * cols + c)]) continue;
                push(fr.latent.data().data() + (r * cols + c) * C, {sentinel, r, c}, 0.0, Role::face_ref, 0, -1);
            }
        }
    }
    for (const auto& fr : frame_refs) {
        check_ref(fr.latent);
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < cols; ++c) {
                push(fr.latent.data().data() + (r * cols + c) * C, {fr.t_ref, r, c}, 0.0, Role::frame_ref, 0, -1);
            }
        }
    }
    seq.num_refs = static_cast<int64_t>(seq.positions.size());
    for (int64_t f = 0; f < n; ++f) {
        const auto& m = block.audio_masks[static_cast<size_t>(f)];
        if (m.rows != rows || m.cols != cols) throw Error("audio mask has the wrong grid");
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < cols; ++c) {
                const int64_t cell = r * cols + c;
                push(x.data().data() + (f * cells + cell) * C, {block.temporal_indices[static_cast<size_t>(f)], r, c},
                     block.cell_timesteps[static_cast<size_t>(f * cells + cell)], Role::video,
                     m.cells[static_cast<size_t>(cell)], f);
            }
        }
    }
    seq.values = Tensor({seq.size(), C}, std::move(values));
    return seq;
}

Tensor rope_angles(const std::vector<Position>& positions, const DenoiserConfig& config) {
    const int64_t pairs = config.head_dim() / 2;
    const int64_t nt = pairs / 2;
    const int64_t ny = (pairs - nt) / 2;
    const int64_t nx = pairs - nt - ny;
    std::vector<double> ft(static_cast<size_t>(nt)), fy(static_cast<size_t>(ny)), fx(static_cast<size_t>(nx));
    for (int64_t j = 0; j < nt; ++j) ft[static_cast<size_t>(j)] = std::pow(config.rope_base_t, -static_cast<double>(j) / nt);
    for (int64_t j = 0; j < ny; ++j) fy[static_cast<size_t>(j)] = std::pow(config.rope_base_xy, -static_cast<double>(j) / ny);
    for (int64_t j = 0; j < nx; ++j) fx[static_cast<size_t>(j)] = std::pow(config.rope_base_xy, -static_cast<double>(j) / nx);
    Tensor out({static_cast<int64_t>(positions.size()), pairs});
    for (size_t s = 0; s < positions.size(); ++s) {
        double* row = out.data().data() + static_cast<int64_t>(s) * pairs;
        const auto& p = positions[s];
        for (int64_t j = 0; j < nt; ++j) row[j] = static_cast<double>(p.t) * ft[static_cast<size_t>(j)];
        for (int64_t j = 0; j < ny; ++j) row[nt + j] = static_cast<double>(p.y) * fy[static_cast<size_t>(j)];
        for (int64_t j = 0; j < nx; ++j) row[nt + ny + j] = static_cast<double>(p.x) * fx[static_cast<size_t>(j)];
    }
    return out;
}

ParamGroup group_of(const std::string& name) {
    if (name.rfind("audio.", 0) == 0) return ParamGroup::audio;
    if (name.rfind("lora.", 0) == 0) return ParamGroup::lora;
    return ParamGroup::base;
}

namespace {

std::string block_prefix(int64_t b) { return "blocks." + std::to_string(b) + "."; }

const char* kAdapted[] = {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.w1", "ffn.w2"};

}  // namespace

Var& Denoiser::add_param(const std::string& name, Tensor value) {
    auto [it, inserted] = params_.emplace(name, ad::parameter(std::move(value)));
    if (!inserted) throw Error("duplicate parameter " + name);
    return it->second;
}

Denoiser::Denoiser(DenoiserConfig config, uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(derive_seed(seed, 0xD17));
    const int64_t D = config_.dim, C = config_.latent_channels, H = config_.ffn_hidden;
    const int64_t A = config_.audio_width, K = config_.audio_feature_width(), F = config_.time_freqs;
    auto normal = [&](Shape s, int64_t fan_in) {
        return rng.normal_tensor(std::move(s), 1.0 / std::sqrt(static_cast<double>(fan_in)));
    };

    add_param("embed.in.weight", normal({C, D}, C));
    add_param("embed.in.bias", Tensor({D}));
    add_param("embed.cell", rng.normal_tensor({config_.cells(), D}, 0.1));
    add_param("embed.role", rng.normal_tensor({3, D}, 0.1));
    add_param("embed.prompt", rng.normal_tensor({1, D}, 0.1));
    add_param("time.w1", normal({F, D}, F));
    add_param("time.b1", Tensor({D}));
    add_param("time.w2", normal({D, D}, D));
    add_param("time.b2", Tensor({D}));
    for (int64_t b = 0; b < config_.blocks; ++b) {
        const std::string p = block_prefix(b);
        add_param(p + "mod.weight", Tensor({D, 6 * D}));
        add_param(p + "mod.bias", Tensor({6 * D}));
        for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) add_param(p + n + ".weight", normal({D, D}, D));
        add_param(p + "ffn.w1.weight", normal({D, H}, D));
        add_param(p + "ffn.b1", Tensor({H}));
        add_param(p + "ffn.w2.weight", normal({H, D}, H));
        add_param(p + "ffn.b2", Tensor({D}));
    }
    add_param("final.mod.weight", Tensor({D, 2 * D}));
    add_param("final.mod.bias", Tensor({2 * D}));
    add_param("final.out.weight", Tensor({D, C}));
    add_param("final.out.bias", Tensor({C}));

    add_param("audio.pool", audio::initial_pool_weights());
    add_param("audio.window_pos", Tensor({config_.window * K}));
    add_param("audio.proj.weight", normal({K, A}, K));
    add_param("audio.proj.bias", Tensor({A}));
    for (int64_t b = 0; b < config_.blocks; ++b) {
        const std::string p = "audio." + block_prefix(b);
        add_param(p + "q", normal({D, D}, D));
        add_param(p + "k", normal({A, D}, A));
        add_param(p + "v", normal({A, D}, A));
        add_param(p + "o", Tensor({D, D}));  // zero: no audio influence at initialization
    }

    const int64_t r = config_.lora_rank;
    for (int64_t b = 0; b < config_.blocks; ++b) {
        for (const char* n : kAdapted) {
            const std::string base = block_prefix(b) + n + ".weight";
            const Shape s = params_.at(base).shape();
            add_param("lora." + block_prefix(b) + n + ".A", normal({s[0], r}, s[0]));
            add_param("lora." + block_prefix(b) + n + ".B", Tensor({r, s[1]}));
        }
    }
}

const Var& Denoiser::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter " + name);
    return it->second;
}

void Denoiser::set_trainable(const std::vector<ParamGroup>& groups) {
    for (auto& [name, v] : params_) {
        v.set_requires_grad(std::find(groups.begin(), groups.end(), group_of(name)) != groups.end());
    }
}

std::vector<std::string> Denoiser::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params_) {
        if (v.requires_grad()) out.push_back(name);
    }
    return out;
}

Var Denoiser::adapted(const Var& x, const std::string& name) const {
    // name is "blocks.<b>.<op>"
    Var y = ad::matmul(x, param(name + ".weight"));
    const Var& A = param("lora." + name + ".A");
    const Var& B = param("lora." + name + ".B");
    const bool live = ad::grad_enabled() && B.requires_grad();
    const auto b = B.value().data();
    if (!live && std::all_of(b.begin(), b.end(), [](double v) { return v == 0.0; })) return y;
    const double scale = config_.lora_alpha / static_cast<double>(config_.lora_rank);
    return ad::add(y, ad::scale(ad::matmul(ad::matmul(x, A), B), scale));
}

Var Denoiser::audio_tokens(const Tensor& frame_windows, int64_t first, int64_t count) const {
    const int64_t K = config_.audio_feature_width();
    if (frame_windows.rank() != 2 || frame_windows.dim(1) != config_.window * K) {
        throw Error("frame windows must be [F, " + std::to_string(config_.window * K) + "], got " +
                    shape_str(frame_windows.shape()));
    }
    Var w = ad::add(ad::constant(frame_windows), param("audio.window_pos"));
    Var pooled = audio::pool_to_latent_rate(w, param("audio.pool"), first, count);
    Var tokens = ad::reshape(pooled, {count * config_.window, K});
    return ad::linear(tokens, param("audio.proj.weight"), param("audio.proj.bias"));
}

Denoiser::Embedded Denoiser::embed(const TokenSequence& seq) const {
    const int64_t S = seq.size();
    const int64_t D = config_.dim;
    if (seq.values.rank() != 2 || seq.values.dim(0) != S || seq.values.dim(1) != config_.latent_channels) {
        throw Error("token values must be [S, " + std::to_string(config_.latent_channels) + "]");
    }
    Embedded e;
    e.video_offset = 1 + seq.num_refs;

    // token embeddings: projection + cell + role
    std::vector<int64_t> cell_idx(static_cast<size_t>(S)), role_idx(static_cast<size_t>(S));
    for (int64_t i = 0; i < S; ++i) {
        const auto& p = seq.positions[static_cast<size_t>(i)];
        if (p.y < 0 || p.y >= config_.grid_rows || p.x < 0 || p.x >= config_.grid_cols) {
            throw Error("token " + std::to_string(i) + " lies outside the latent grid");
        }
        cell_idx[static_cast<size_t>(i)] = p.y * config_.grid_cols + p.x;
        role_idx[static_cast<size_t>(i)] = static_cast<int64_t>(seq.roles[static_cast<size_t>(i)]);
    }
    Var tokens = ad::linear(ad::constant(seq.values), param("embed.in.weight"), param("embed.in.bias"));
    tokens = ad::add(tokens, ad::gather_rows(param("embed.cell"), cell_idx));
    tokens = ad::add(tokens, ad::gather_rows(param("embed.role"), role_idx));
    const Var parts[] = {param("embed.prompt"), tokens};
    e.hidden = ad::concat_rows(parts);

    // timestep conditioning evaluated once per distinct timestep
    std::vector<double> unique{0.0};
    for (double t : seq.timesteps) unique.push_back(t);
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    std::vector<int64_t> tidx(static_cast<size_t>(S + 1));
    tidx[0] = std::lower_bound(unique.begin(), unique.end(), 0.0) - unique.begin();
    for (int64_t i = 0; i < S; ++i) {
        tidx[static_cast<size_t>(i + 1)] =
            std::lower_bound(unique.begin(), unique.end(), seq.timesteps[static_cast<size_t>(i)]) - unique.begin();
    }
    const int64_t F = config_.time_freqs, half = F / 2;
    Tensor feats({static_cast<int64_t>(unique.size()), F});
    for (size_t u = 0; u < unique.size(); ++u) {
        for (int64_t k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            const double arg = 1000.0 * unique[u] * freq;
            feats[static_cast<int64_t>(u) * F + k] = std::cos(arg);
            feats[static_cast<int64_t>(u) * F + half + k] = std::sin(arg);
        }
    }
    Var temb = ad::linear(ad::constant(feats), param("time.w1"), param("time.b1"));
    temb = ad::linear(ad::silu(temb), param("time.w2"), param("time.b2"));
    const Var act = ad::silu(temb);
    for (int64_t b = 0; b < config_.blocks; ++b) {
        const std::string p = block_prefix(b);
        Var mod = ad::linear(act, param(p + "mod.weight"), param(p + "mod.bias"));
        e.modulation.push_back(ad::gather_rows(mod, tidx));
    }
    e.final_modulation =
        ad::gather_rows(ad::linear(act, param("final.mod.weight"), param("final.mod.bias")), tidx);

    std::vector<Position> pos;
    pos.reserve(static_cast<size_t>(S + 1));
    pos.push_back({0, 0, 0});
    pos.insert(pos.end(), seq.positions.begin(), seq.positions.end());
    e.angles = rope_angles(pos, config_);
    (void)D;
    return e;
}

namespace {

Var modulate(const Var& x, const Var& shift, const Var& scale) {
    return ad::add(ad::mul(ad::layer_norm(x), ad::add_scalar(scale, 1.0)), shift);
}

}  // namespace

Tensor Denoiser::cache_signal(const Embedded& e) const {
    ad::NoGradGuard ng;
    const int64_t D = config_.dim;
    const Var& mod = e.modulation.front();
    return modulate(e.hidden, ad::slice_cols(mod, 0, D), ad::slice_cols(mod, D, D)).value();
}

Var Denoiser::run_blocks(const Embedded& e, const TokenSequence& seq, const Var& audio) const {
    const int64_t D = config_.dim;
    const int64_t V = seq.num_video();
    const int heads = static_cast<int>(config_.heads);
    Tensor audio_mask;
    std::vector<uint8_t> row_mask;
    if (audio.defined()) {
        const int64_t keys = audio.shape()[0];
        const int64_t W = config_.window;
        audio_mask = Tensor({V, keys}, -std::numeric_limits<double>::infinity());
        for (int64_t i = 0; i < V; ++i) {
            const int64_t slot = seq.audio_slot[static_cast<size_t>(seq.num_refs + i)];
            if (slot < 0 || (slot + 1) * W > keys) throw Error("video token without audio tokens for its frame");
            for (int64_t k = slot * W; k < (slot + 1) * W; ++k) audio_mask[i * keys + k] = 0.0;
        }
        row_mask.assign(seq.audio_mask.begin() + seq.num_refs, seq.audio_mask.end());
    }

    Var z = e.hidden;
    for (int64_t b = 0; b < config_.blocks; ++b) {
        const std::string p = block_prefix(b);
        const Var& mod = e.modulation[static_cast<size_t>(b)];
        auto part = [&](int64_t k) { return ad::slice_cols(mod, k * D, D); };

        Var h = modulate(z, part(0), part(1));
        Var q = ad::rope_rotate(adapted(h, p + "attn.q"), e.angles, heads);
        Var k = ad::rope_rotate(adapted(h, p + "attn.k"), e.angles, heads);
        Var v = adapted(h, p + "attn.v");
        Var attn = adapted(ad::attention(q, k, v, heads), p + "attn.o");
        z = ad::add(z, ad::mul(part(2), attn));

        if (audio.defined()) {
            const std::string ap = "audio." + p;
            Var zv = ad::slice_rows(z, e.video_offset, V);
            Var hv = ad::layer_norm(zv);
            Var qa = ad::matmul(hv, param(ap + "q"));
            Var ka = ad::matmul(audio, param(ap + "k"));
            Var va = ad::matmul(audio, param(ap + "v"));
            Var upd = ad::matmul(ad::attention(qa, ka, va, heads, audio_mask), param(ap + "o"));
            zv = ad::masked_row_add(zv, upd, row_mask);
            const Var parts[] = {ad::slice_rows(z, 0, e.video_offset), zv};
            z = ad::concat_rows(parts);
        }

        Var h2 = modulate(z, part(3), part(4));
        Var f = ad::add(adapted(h2, p + "ffn.w1"), param(p + "ffn.b1"));
        f = ad::add(adapted(ad::gelu(f), p + "ffn.w2"), param(p + "ffn.b2"));
        z = ad::add(z, ad::mul(part(5), f));
        if (!z.value().all_finite()) throw Error("non-finite activations after block " + std::to_string(b));
    }
    return z;
}

Var Denoiser::head(const Embedded& e, const Var& hidden) const {
    const int64_t D = config_.dim;
    const int64_t rows = hidden.shape()[0] - e.video_offset;
    Var zv = ad::slice_rows(hidden, e.video_offset, rows);
    Var mod = ad::slice_rows(e.final_modulation, e.video_offset, rows);
    Var h = modulate(zv, ad::slice_cols(mod, 0, D), ad::slice_cols(mod, D, D));
    return ad::linear(h, param("final.out.weight"), param("final.out.bias"));
}

Var Denoiser::forward(const TokenSequence& seq, const Var& audio) const {
    const Embedded e = embed(seq);
    return head(e, run_blocks(e, seq, audio));
}

}  // namespace lipedit::model
