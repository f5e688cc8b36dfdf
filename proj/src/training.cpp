// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "lipedit/audio.hpp"
#include "lipedit/inference.hpp"
#include "lipedit/io.hpp"

namespace lipedit::train {

using nlohmann::json;

json CorpusConfig::to_json() const {
    return {{"clips", clips}, {"clip_seconds", clip_seconds}, {"fps", fps}, {"seed", seed}};
}

CorpusConfig CorpusConfig::from_json(const json& j) {
    CorpusConfig c;
    c.clips = j.value("clips", c.clips);
    c.clip_seconds = j.value("clip_seconds", c.clip_seconds);
    c.fps = j.value("fps", c.fps);
    c.seed = j.value("seed", c.seed);
    return c;
}

TrainConfig TrainConfig::for_stage(int stage) {
    TrainConfig c;
    c.stage = stage;
    switch (stage) {
    case 0:
        c.steps = 2000;
        c.lr = 2e-3;
        c.p_audio = 0.0;
        c.p_id = 0.5;
        c.p_frame_ref = 0.5;
        c.uniform_timesteps = true;
        c.cosine_decay = false;
        break;
    case 1:
        c.steps = 3000;
        c.lr = 3e-3;
        c.batch = 16;
        c.lambda_contrastive = 0.0;
        c.corpus.clips = 1000;
        c.p_audio = 1.0;
        c.p_id = 0.0;
        c.p_frame_ref = 0.0;
        break;
    case 2:
        c.steps = 800;
        c.lr = 5e-4;
        c.lambda_contrastive = 0.2;
        c.p_audio = 0.9;
        c.p_id = 0.5;
        c.p_frame_ref = 0.5;
        break;
    default:
        throw Error("unknown training stage " + std::to_string(stage));
    }
    return c;
}

double TrainConfig::lr_at(int64_t step) const {
    if (!cosine_decay || steps <= 1) return lr;
    const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(steps - 1), 0.0, 1.0);
    return lr * (lr_floor + (1.0 - lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void TrainConfig::validate() const {
    if (stage < 0 || stage > 2) throw Error("stage must be 0, 1 or 2");
    for (double p : {p_audio, p_ff, p_v2v, p_id, p_frame_ref}) {
        if (!(p >= 0.0 && p <= 1.0)) throw Error("conditioning probabilities must lie in [0, 1]");
    }
    if (steps < 0) throw Error("steps must be non-negative");
    if (!(lr > 0)) throw Error("learning rate must be positive");
    if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw Error("lr_floor must lie in [0, 1]");
    if (k_immiscible < 1) throw Error("k_immiscible must be at least 1");
    if (batch < 1) throw Error("batch must be at least 1");
    if (min_frames < 2 || max_frames < min_frames) throw Error("need 2 <= min_frames <= max_frames");
    if (!(lambda_contrastive >= 0.0 && lambda_contrastive < 1.0)) throw Error("lambda_contrastive must lie in [0, 1)");
    if (!(shift_mu >= 1.0)) throw Error("shift_mu must be at least 1");
    model.validate();
}

json TrainConfig::to_json() const {
    return {{"schema_version", 1},
            {"stage", stage},
            {"steps", steps},
            {"lr", lr},
            {"cosine_decay", cosine_decay},
            {"lr_floor", lr_floor},
            {"p_audio", p_audio},
            {"p_ff", p_ff},
            {"p_v2v", p_v2v},
            {"p_id", p_id},
            {"p_frame_ref", p_frame_ref},
            {"shift_mu", shift_mu},
            {"uniform_timesteps", uniform_timesteps},
            {"k_immiscible", k_immiscible},
            {"lambda_contrastive", lambda_contrastive},
            {"batch", batch},
            {"seed", seed},
            {"min_frames", min_frames},
            {"max_frames", max_frames},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"grad_clip", grad_clip},
            {"checkpoint_every", checkpoint_every},
            {"corpus", corpus.to_json()},
            {"model", model.to_json()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c = for_stage(j.value("stage", 1));
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
    c.lr_floor = j.value("lr_floor", c.lr_floor);
    c.p_audio = j.value("p_audio", c.p_audio);
    c.p_ff = j.value("p_ff", c.p_ff);
    c.p_v2v = j.value("p_v2v", c.p_v2v);
    c.p_id = j.value("p_id", c.p_id);
    c.p_frame_ref = j.value("p_frame_ref", c.p_frame_ref);
    c.shift_mu = j.value("shift_mu", c.shift_mu);
    c.uniform_timesteps = j.value("uniform_timesteps", c.uniform_timesteps);
    c.k_immiscible = j.value("k_immiscible", c.k_immiscible);
    c.lambda_contrastive = j.value("lambda_contrastive", c.lambda_contrastive);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    c.min_frames = j.value("min_frames", c.min_frames);
    c.max_frames = j.value("max_frames", c.max_frames);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("corpus")) c.corpus = CorpusConfig::from_json(j.at("corpus"));
    if (j.contains("model")) c.model = model::DenoiserConfig::from_json(j.at("model"));
    c.validate();
    return c;
}

// ---- timestep sampler ----

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

double TimestepSampler::transform(double z) const {
    const double s = 1.0 / (1.0 + std::exp(-(z * sigma + m)));
    return mu * s / (1.0 + (mu - 1.0) * s);
}

double TimestepSampler::sample(Rng& rng) const {
    const double t = transform(rng.normal());
    return std::clamp(t, 1e-6, 1.0 - 1e-6);
}

double TimestepSampler::mass(double lo, double hi) const {
    // t is increasing in z, so invert both ends
    auto z_of = [&](double t) {
        const double s = t / (mu - (mu - 1.0) * t);
        return (logit(s) - m) / sigma;
    };
    return normal_cdf(z_of(hi)) - normal_cdf(z_of(lo));
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error("quantile level must lie in (0, 1)");
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (normal_cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

TimestepSampler calibrate_sampler(double mu, double lo, double hi, double tail) {
    if (!(lo > 0.0 && lo < hi && hi < 1.0)) throw Error("calibration interval must satisfy 0 < lo < hi < 1");
    if (!(tail > 0.0 && tail < 0.5)) throw Error("tail mass must lie in (0, 0.5)");
    TimestepSampler s;
    s.mu = mu;
    const double a = logit(lo / (mu - (mu - 1.0) * lo));
    const double b = logit(hi / (mu - (mu - 1.0) * hi));
    const double q = normal_quantile(1.0 - tail);
    s.m = 0.5 * (a + b);
    s.sigma = (b - a) / (2.0 * q);
    return s;
}

// ---- noising, pairing, loss ----

Tensor broadcast_cell_mask(const std::vector<uint8_t>& cell_mask, const Shape& shape) {
    if (shape.size() != 4) throw Error("latents must be [n, rows, cols, C]");
    const int64_t cells = shape[0] * shape[1] * shape[2];
    if (static_cast<int64_t>(cell_mask.size()) != cells) throw Error("cell mask does not match the latents");
    Tensor m(shape);
    const int64_t C = shape[3];
    for (int64_t i = 0; i < cells; ++i) {
        if (!cell_mask[static_cast<size_t>(i)]) continue;
        for (int64_t c = 0; c < C; ++c) m[i * C + c] = 1.0;
    }
    return m;
}

Tensor make_noised_input(const Tensor& x0, const Tensor& eps, double t, const Tensor& mask) {
    if (!x0.same_shape(eps) || !x0.same_shape(mask)) {
        throw Error("noising needs equal shapes, got " + shape_str(x0.shape()) + ", " + shape_str(eps.shape()) +
                    ", " + shape_str(mask.shape()));
    }
    if (!(t >= 0.0 && t <= 1.0)) throw Error("timestep must lie in [0, 1]");
    Tensor out(x0.shape());
    for (int64_t i = 0; i < static_cast<int64_t>(x0.size()); ++i) {
        out[i] = mask[i] != 0.0 ? (1.0 - t) * x0[i] + t * eps[i] : x0[i];
    }
    return out;
}

size_t immiscible_pick(const Tensor& x0, const std::vector<Tensor>& candidates) {
    if (candidates.empty()) throw Error("immiscible pairing needs at least one candidate");
    size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < candidates.size(); ++k) {
        if (!candidates[k].same_shape(x0)) throw Error("noise candidate shape differs from the sample");
        double d = 0.0;
        for (int64_t i = 0; i < static_cast<int64_t>(x0.size()); ++i) {
            const double e = x0[i] - candidates[k][i];
            d += e * e;
        }
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

std::vector<Tensor> immiscible_assign(const std::vector<Tensor>& x0, const std::vector<std::vector<Tensor>>& candidates) {
    if (x0.size() != candidates.size()) throw Error("one candidate set per sample is required");
    std::vector<Tensor> out;
    out.reserve(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out.push_back(candidates[i][immiscible_pick(x0[i], candidates[i])]);
    return out;
}

ad::Var flow_matching_loss(const ad::Var& v, const Tensor& x0, const Tensor& eps, const Tensor& mask,
                           const std::vector<Tensor>& negative_targets, double lambda) {
    if (!v.value().same_shape(x0) || !x0.same_shape(eps) || !x0.same_shape(mask)) {
        throw Error("loss inputs differ in shape: prediction " + shape_str(v.shape()) + ", target " +
                    shape_str(x0.shape()));
    }
    double mass = 0.0;
    for (double m : mask.data()) mass += m;
    if (mass == 0.0) throw Error("all-zero mask gives no learning signal");
    Tensor u(x0.shape());
    for (int64_t i = 0; i < static_cast<int64_t>(u.size()); ++i) u[i] = mask[i] * (eps[i] - x0[i]);
    const ad::Var m = ad::constant(mask);
    auto term = [&](const Tensor& target) {
        return ad::scale(ad::sum(ad::square(ad::mul(m, ad::sub(v, ad::constant(target))))), 1.0 / mass);
    };
    ad::Var loss = term(u);
    for (const auto& neg : negative_targets) {
        if (!neg.same_shape(x0)) throw Error("negative target shape differs from the sample");
        loss = ad::sub(loss, ad::scale(term(neg), lambda));
    }
    return loss;
}

ConditionFlags dropout_conditions(Rng& rng, const TrainConfig& config) {
    ConditionFlags f;
    const double p_audio = config.stage == 1 ? 1.0 : config.p_audio;
    f.audio = rng.bernoulli(p_audio);
    f.first_frame = rng.bernoulli(config.p_ff);
    f.v2v = rng.bernoulli(config.p_v2v);
    f.face_refs = rng.bernoulli(config.p_id);
    f.frame_refs = rng.bernoulli(config.p_frame_ref);
    return f;
}

// ---- data ----

Clip make_clip(const toy::IdentitySpec& identity, const toy::GeneratedAudio& audio, double seconds, double fps,
               const model::DenoiserConfig& model) {
    const auto frames_avail = static_cast<int64_t>(std::floor(seconds * fps + 1e-9));
    const int64_t latents = std::max<int64_t>(2, (frames_avail - 1) / timeline::kTemporalStride + 1);
    const int64_t frames = timeline::frames_for_latents(latents);
    if (audio.features.bands() != model.audio_bands || audio.features.channels() != model.audio_channels) {
        throw Error("audio features do not match the model's band/channel layout");
    }
    if (!audio::covers(audio.features, frames, fps)) throw Error("audio does not cover the clip");
    Clip c;
    c.seed = identity.seed;
    c.fps = fps;
    c.identity = identity;
    c.audio = audio;
    const Tensor video = toy::render_clip(identity, audio.track, fps, frames);
    c.latents = toy::encode(video);
    c.lip_masks = timeline::build_masks(timeline::MaskMode::lip, toy::lower_face_boxes(identity, fps, frames), latents,
                                        toy::cell_grid());
    c.windows = audio::frame_windows(audio.features, frames, fps, model.window);
    return c;
}

Clip make_clip(uint64_t seed, double seconds, double fps, const model::DenoiserConfig& model) {
    const toy::IdentitySpec identity = toy::gen_scene(seed);
    toy::AudioConfig ac;
    ac.bands = model.audio_bands;
    ac.channels = model.audio_channels;
    const toy::GeneratedAudio audio = toy::gen_audio(derive_seed(seed, 0xA0D10), seconds + 0.5, ac);
    return make_clip(identity, audio, seconds, fps, model);
}

std::vector<Clip> make_corpus(const CorpusConfig& config, const model::DenoiserConfig& model) {
    std::vector<Clip> out;
    out.reserve(static_cast<size_t>(config.clips));
    for (int64_t i = 0; i < config.clips; ++i) {
        out.push_back(make_clip(derive_seed(config.seed, static_cast<uint64_t>(i)), config.clip_seconds, config.fps,
                                model));
    }
    return out;
}

json corpus_manifest(const CorpusConfig& config) {
    json clips = json::array();
    for (int64_t i = 0; i < config.clips; ++i) {
        clips.push_back({{"seed", derive_seed(config.seed, static_cast<uint64_t>(i))},
                         {"fps", config.fps},
                         {"duration_s", config.clip_seconds}});
    }
    return {{"schema_version", 1}, {"corpus", config.to_json()}, {"clips", clips}};
}

namespace {

Tensor latent_slice(const Tensor& latents, int64_t index) {
    const int64_t per = latents.dim(1) * latents.dim(2) * latents.dim(3);
    std::vector<double> v(latents.data().begin() + index * per, latents.data().begin() + (index + 1) * per);
    return Tensor({latents.dim(1), latents.dim(2), latents.dim(3)}, std::move(v));
}

Tensor latent_range(const Tensor& latents, int64_t first, int64_t count) {
    const int64_t per = latents.dim(1) * latents.dim(2) * latents.dim(3);
    std::vector<double> v(latents.data().begin() + first * per, latents.data().begin() + (first + count) * per);
    return Tensor({count, latents.dim(1), latents.dim(2), latents.dim(3)}, std::move(v));
}

constexpr int64_t kMaxFrameRefDistance = 24;

}  // namespace

TrainSample build_sample(Rng& rng, const Clip& clip, int64_t first, int64_t frames, const TrainConfig& config,
                         const TimestepSampler& sampler) {
    const int64_t N = clip.num_latents();
    if (first < 0 || frames < 1 || first + frames > N) throw Error("training window exceeds the clip");
    const int64_t last = first + frames - 1;
    const int64_t rows = clip.latents.dim(1), cols = clip.latents.dim(2), C = clip.latents.dim(3);
    const int64_t cells = rows * cols;

    TrainSample s;
    s.clip = &clip;
    s.first = first;
    s.frames = frames;
    s.flags = dropout_conditions(rng, config);
    s.t = config.uniform_timesteps ? std::clamp(rng.uniform(), 1e-6, 1.0 - 1e-6) : sampler.sample(rng);

    const Tensor x0 = latent_range(clip.latents, first, frames);
    std::vector<uint8_t> cell_mask(static_cast<size_t>(frames * cells), 1);
    std::vector<timeline::RegionMask> region(static_cast<size_t>(frames));
    for (int64_t f = 0; f < frames; ++f) {
        auto& r = region[static_cast<size_t>(f)];
        r.rows = rows;
        r.cols = cols;
        if (s.flags.v2v) {
            r.cells = clip.lip_masks[static_cast<size_t>(first + f)].cells;
        } else {
            r.cells.assign(static_cast<size_t>(cells), 1);
        }
        if (f == 0 && s.flags.first_frame) std::fill(r.cells.begin(), r.cells.end(), 0);
        std::copy(r.cells.begin(), r.cells.end(), cell_mask.begin() + f * cells);
    }
    const Tensor mask = broadcast_cell_mask(cell_mask, x0.shape());

    std::vector<Tensor> candidates;
    for (int64_t k = 0; k < config.k_immiscible; ++k) candidates.push_back(rng.normal_tensor(x0.shape()));
    const Tensor eps = candidates[immiscible_pick(x0, candidates)];
    const Tensor xt = make_noised_input(x0, eps, s.t, mask);

    model::BlockInput block;
    block.latents = xt;
    for (int64_t f = 0; f < frames; ++f) block.temporal_indices.push_back(first + f);
    block.cell_timesteps.resize(cell_mask.size());
    for (size_t i = 0; i < cell_mask.size(); ++i) block.cell_timesteps[i] = cell_mask[i] ? s.t : 0.0;
    block.audio_masks = region;

    std::vector<model::FaceRef> face_refs;
    if (s.flags.face_refs) {
        const std::vector<uint8_t> clean(static_cast<size_t>(N), 1);
        for (int64_t idx : infer::sample_face_refs(clean, first, last, clip.fps, rng, config.model.max_face_refs)) {
            face_refs.push_back({latent_slice(clip.latents, idx), clip.lip_masks[static_cast<size_t>(idx)]});
        }
    }
    std::vector<model::FrameRef> frame_refs;
    if (s.flags.frame_refs) {
        if (first > 0) {
            const int64_t d = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(std::min(first, kMaxFrameRefDistance))));
            frame_refs.push_back({latent_slice(clip.latents, first - d), infer::fb_rope_assign(first - d, first, last)});
        }
        if (last + 1 < N) {
            const int64_t room = N - 1 - last;
            const int64_t d = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(std::min(room, kMaxFrameRefDistance))));
            frame_refs.push_back({latent_slice(clip.latents, last + d), infer::fb_rope_assign(last + d, first, last)});
        }
    }
    s.tokens = model::assemble_tokens(block, face_refs, frame_refs, config.model.max_face_refs);
    const Shape flat{frames * cells, C};
    s.x0 = x0.reshaped(flat);
    s.eps = eps.reshaped(flat);
    s.mask = mask.reshaped(flat);
    return s;
}

// ---- optimization ----

double AdamW::step(std::map<std::string, ad::Var>& params, double lr, double grad_clip) {
    ++t_;
    double sq = 0.0;
    for (auto& [name, p] : params) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (double g : p.grad().data()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw Error("non-finite gradient norm");
    const double clip = grad_clip > 0.0 && norm > grad_clip ? grad_clip / norm : 1.0;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        auto [mit, m_new] = m_.try_emplace(name, Tensor(p.shape()));
        auto [vit, v_new] = v_.try_emplace(name, Tensor(p.shape()));
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        Tensor w = p.value();
        const bool has = p.has_grad();
        for (int64_t i = 0; i < static_cast<int64_t>(w.size()); ++i) {
            const double g = has ? p.grad()[i] * clip : 0.0;
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr * (mh / (std::sqrt(vh) + eps_) + weight_decay_ * w[i]);
        }
        p.assign(std::move(w));
    }
    return norm;
}

void AdamW::save(std::vector<std::pair<std::string, Tensor>>& out) const {
    for (const auto& [name, m] : m_) out.emplace_back("adam.m." + name, m);
    for (const auto& [name, v] : v_) out.emplace_back("adam.v." + name, v);
}

void AdamW::load(const std::map<std::string, Tensor>& in, int64_t steps_taken) {
    m_.clear();
    v_.clear();
    for (const auto& [key, t] : in) {
        if (key.rfind("adam.m.", 0) == 0) m_[key.substr(7)] = t;
        if (key.rfind("adam.v.", 0) == 0) v_[key.substr(7)] = t;
    }
    t_ = steps_taken;
}

// ---- checkpoints ----

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    io::Container c;
    c.tags = {{"schema_version", kCheckpointSchemaVersion},
              {"kind", "checkpoint"},
              {"model", ckpt.model.config().to_json()},
              {"stage", ckpt.stage},
              {"step", ckpt.step},
              {"fps", ckpt.fps},
              {"adapter_rank", ckpt.model.config().lora_rank},
              {"optimizer_steps", ckpt.optimizer.steps_taken()},
              {"train_config", ckpt.train_config}};
    for (const auto& [name, p] : ckpt.model.params()) c.tensors.push_back({"param." + name, p.value()});
    std::vector<std::pair<std::string, Tensor>> opt;
    ckpt.optimizer.save(opt);
    for (auto& [name, t] : opt) c.tensors.push_back({name, std::move(t)});
    io::write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const io::Container c = io::read_container(path);
    if (c.tags.value("kind", "") != "checkpoint") throw Error(path.string() + " is not a checkpoint");
    if (c.tags.value("schema_version", 0) != kCheckpointSchemaVersion) {
        throw Error(path.string() + ": unsupported checkpoint schema_version " +
                    std::to_string(c.tags.value("schema_version", 0)));
    }
    Checkpoint ck{model::Denoiser(model::DenoiserConfig::from_json(c.tags.at("model"))), AdamW(),
                  c.tags.at("stage").get<int>(), c.tags.at("step").get<int64_t>(), c.tags.value("fps", 24.0),
                  c.tags.value("train_config", json::object())};
    std::map<std::string, Tensor> opt;
    size_t loaded = 0;
    for (const auto& nt : c.tensors) {
        if (nt.name.rfind("param.", 0) == 0) {
            const std::string name = nt.name.substr(6);
            auto it = ck.model.params().find(name);
            if (it == ck.model.params().end()) throw Error("checkpoint has unknown parameter " + name);
            if (it->second.shape() != nt.tensor.shape()) throw Error("checkpoint parameter " + name + " has the wrong shape");
            it->second.assign(nt.tensor);
            ++loaded;
        } else {
            opt[nt.name] = nt.tensor;
        }
    }
    if (loaded != ck.model.params().size()) throw Error("checkpoint is missing parameters");
    const json tc = ck.train_config;
    ck.optimizer = AdamW(tc.value("beta1", 0.9), tc.value("beta2", 0.95), tc.value("weight_decay", 0.01));
    ck.optimizer.load(opt, c.tags.value("optimizer_steps", int64_t{0}));
    return ck;
}

// ---- loop ----

namespace {

std::vector<model::ParamGroup> groups_for(int stage) {
    switch (stage) {
    case 0:
        return {model::ParamGroup::base};
    case 1:
        return {model::ParamGroup::audio};
    default:
        return {model::ParamGroup::lora, model::ParamGroup::audio};
    }
}

}  // namespace

double train_step(model::Denoiser& model, AdamW& opt, const std::vector<Clip>& corpus, const TrainConfig& config,
                  const TimestepSampler& sampler, int64_t step) {
    if (corpus.empty()) throw Error("training corpus is empty");
    Rng rng(derive_seed(config.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(config.stage) + 1));
    int64_t min_len = corpus.front().num_latents();
    for (const auto& c : corpus) min_len = std::min(min_len, c.num_latents());
    const int64_t hi = std::min(config.max_frames, min_len);
    const int64_t lo = std::min(config.min_frames, hi);
    const int64_t frames = lo + static_cast<int64_t>(rng.below(static_cast<uint64_t>(hi - lo + 1)));

    std::vector<TrainSample> batch;
    for (int64_t b = 0; b < config.batch; ++b) {
        const Clip& clip = corpus[rng.below(corpus.size())];
        const auto first = static_cast<int64_t>(rng.below(static_cast<uint64_t>(clip.num_latents() - frames + 1)));
        batch.push_back(build_sample(rng, clip, first, frames, config, sampler));
    }
    const int64_t B = config.batch;
    const int64_t shift = B > 1 ? 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(B - 1))) : 0;

    for (auto& [name, p] : model.params()) {
        if (p.requires_grad()) p.zero_grad();
    }
    ad::Var total;
    for (int64_t b = 0; b < B; ++b) {
        const TrainSample& s = batch[static_cast<size_t>(b)];
        ad::Var audio;
        if (config.stage >= 1 && s.flags.audio) audio = model.audio_tokens(s.clip->windows, s.first, s.frames);
        const ad::Var v = model.forward(s.tokens, audio);
        std::vector<Tensor> negatives;
        if (shift > 0 && config.lambda_contrastive > 0.0) {
            const TrainSample& o = batch[static_cast<size_t>((b + shift) % B)];
            Tensor neg(o.x0.shape());
            for (int64_t i = 0; i < static_cast<int64_t>(neg.size()); ++i) neg[i] = s.mask[i] * (o.eps[i] - o.x0[i]);
            negatives.push_back(std::move(neg));
        }
        const ad::Var l = flow_matching_loss(v, s.x0, s.eps, s.mask, negatives, config.lambda_contrastive);
        total = total.defined() ? ad::add(total, l) : l;
    }
    const ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(B));
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw Error("non-finite loss at step " + std::to_string(step));
    ad::backward(loss);
    opt.step(model.params(), config.lr_at(step), config.grad_clip);
    return value;
}

Checkpoint begin_stage(const TrainConfig& config, std::optional<Checkpoint> previous) {
    config.validate();
    if (config.stage == 2 && (!previous || previous->stage < 1)) {
        throw Error("stage 2 requires a stage-1 checkpoint");
    }
    if (config.stage == 1 && previous && previous->stage > 1) throw Error("cannot return to stage 1 from stage 2");
    Checkpoint ck = previous ? std::move(*previous)
                             : Checkpoint{model::Denoiser(config.model, config.seed), AdamW(), config.stage, 0,
                                          config.corpus.fps, json::object()};
    ck.stage = config.stage;
    ck.step = 0;
    ck.fps = config.corpus.fps;
    ck.optimizer = AdamW(config.beta1, config.beta2, config.weight_decay);
    ck.train_config = config.to_json();
    ck.model.set_trainable(groups_for(config.stage));
    return ck;
}

Checkpoint run_training(const TrainConfig& config, const std::vector<Clip>& corpus, std::optional<Checkpoint> init,
                        const TrainHooks& hooks) {
    config.validate();
    const bool resume = init && init->stage == config.stage && init->step > 0;
    Checkpoint ck = resume ? std::move(*init) : begin_stage(config, std::move(init));
    if (resume) {
        ck.model.set_trainable(groups_for(config.stage));
        ck.train_config = config.to_json();
    }
    const TimestepSampler sampler = calibrate_sampler(config.shift_mu);
    while (ck.step < config.steps) {
        const double loss = train_step(ck.model, ck.optimizer, corpus, config, sampler, ck.step);
        ++ck.step;
        if (hooks.on_loss) hooks.on_loss({ck.step, loss, config.stage});
        if (hooks.on_checkpoint && config.checkpoint_every > 0 && ck.step % config.checkpoint_every == 0 &&
            ck.step < config.steps) {
            hooks.on_checkpoint(ck);
        }
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(ck);
    return ck;
}

std::string loss_csv(const std::vector<LossRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "step,loss,stage\n";
    for (const auto& r : rows) out << r.step << ',' << r.loss << ',' << r.stage << '\n';
    return out.str();
}

}  // namespace lipedit::train
