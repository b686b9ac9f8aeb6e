#pragma once

// Noise schedule, pluggable toy noise predictors, DDIM inversion with
// region-attention conditioning, and the interval score-matching gradients
// (plain and concept-aware).
//
// Latents are plain pixel images. Conditioning is the attention layer from
// rca.hpp evaluated over a fixed seeded feature map: the attention output
// depends on the adapters, the prompt embeddings (real or null) and the
// region masks, not on the latent, so predictions stay pixel-local and
// per-region effects can be tested bitwise.

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "conceptsplat/common.hpp"
#include "conceptsplat/image.hpp"
#include "conceptsplat/rca.hpp"
#include "conceptsplat/scene.hpp"
#include "conceptsplat/text_embed.hpp"

namespace csplat {

struct NoiseSchedule {
    int timesteps = 0;
    std::vector<double> alpha_bar; // index 0..T, alpha_bar[0] == 1

    double at(int t) const
    {
        if (t < 0 || t > timesteps) throw ValidationError("schedule index out of range");
        return alpha_bar[static_cast<size_t>(t)];
    }
};

// Linear-beta schedule: beta_1..beta_T linearly spaced over [1e-4, 0.02].
inline NoiseSchedule make_schedule(int timesteps)
{
    if (timesteps < 2) throw ValidationError("schedule needs at least two timesteps");
    NoiseSchedule s;
    s.timesteps = timesteps;
    s.alpha_bar.resize(static_cast<size_t>(timesteps) + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= timesteps; ++t) {
        const double beta =
            1e-4 + (0.02 - 1e-4) * static_cast<double>(t - 1) / static_cast<double>(timesteps - 1);
        s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - beta);
    }
    return s;
}

inline double guidance_weight(const NoiseSchedule& sched, WeightKind kind, double value, int t)
{
    switch (kind) {
    case WeightKind::constant: return value;
    case WeightKind::one_minus_alpha_bar: return value * (1.0 - sched.at(t));
    }
    throw ValidationError("unknown weight kind");
}

// Saturated corner colors, one per concept id; far from the neutral gray.
inline Vec3 concept_target_color(int id)
{
    static const Vec3 palette[8] = {Vec3(1, 0, 0), Vec3(0, 0, 1), Vec3(0, 1, 0), Vec3(1, 1, 0),
                                    Vec3(1, 0, 1), Vec3(0, 1, 1), Vec3(1, 1, 1), Vec3(0, 0, 0)};
    if (id < 0 || id >= 8) throw ValidationError("concept id outside palette range");
    return palette[id];
}

// --- predictors ----------------------------------------------------------

// Knows where each region should end up and reads the noise straight off the
// gap to that target: eps = (x_t - sqrt(abar_t) * x*) / sqrt(1 - abar_t).
// Prompted conditioning composites per-region targets; null conditioning
// targets the neutral color everywhere.
struct TargetOraclePredictor {
    std::vector<Vec3> targets; // one per concept
    Vec3 neutral{0.5, 0.5, 0.5};
};

inline TargetOraclePredictor make_target_oracle(int k)
{
    TargetOraclePredictor p;
    for (int i = 0; i < k; ++i) p.targets.push_back(concept_target_color(i));
    return p;
}

// eps[px] = a3 * x[px] + e * attn_row(cell of px): linear in the latent,
// conditioned through the attention output.
struct AffinePredictor {
    Mat3 a3 = Mat3::Zero();
    MatX e; // 3 x d
};

// The state coupling a3 defaults much weaker than the conditioning path:
// inversion evaluates the predictor at the interval's lower endpoint while
// sampling evaluates at the upper one, so invert-then-sample reconstruction
// error grows linearly with |a3| (the conditioning term cancels exactly).
inline AffinePredictor make_affine_predictor(int d, std::uint64_t seed, double cond_scale = 0.02,
                                             double state_scale = 5e-4)
{
    Rng rng = Rng::stream(seed, 0xaff1u);
    AffinePredictor p;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p.a3(r, c) = state_scale * rng.normal();
    p.e = MatX(3, d);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < d; ++c) p.e(r, c) = cond_scale * rng.normal();
    return p;
}

// Tiny fixed two-layer tanh network over [x_px, attn_row, t/T].
struct LearnedStubPredictor {
    MatX w1; // hidden x (3 + d + 1)
    MatX w2; // 3 x hidden
};

inline LearnedStubPredictor make_learned_stub(int d, std::uint64_t seed, int hidden = 16)
{
    Rng rng = Rng::stream(seed, 0x57abu);
    LearnedStubPredictor p;
    const int in = 3 + d + 1;
    p.w1 = MatX(hidden, in);
    for (int r = 0; r < hidden; ++r)
        for (int c = 0; c < in; ++c) p.w1(r, c) = rng.normal() / std::sqrt(static_cast<double>(in));
    p.w2 = MatX(3, hidden);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < hidden; ++c)
            p.w2(r, c) = rng.normal() / std::sqrt(static_cast<double>(hidden));
    return p;
}

using NoisePredictor = std::variant<TargetOraclePredictor, AffinePredictor, LearnedStubPredictor>;

// --- conditioning --------------------------------------------------------

enum class PromptMode { prompted, null_prompt };

// The toy backbone: concept prompts/adapters/projections plus the fixed
// feature map the attention layer reads.
struct GuidanceBackbone {
    ConceptSet set;
    PromptEmbedding null_prompt;
    FeatureMap features;
};

inline FeatureMap make_backbone_features(int ha, int wa, int d, std::uint64_t seed)
{
    Rng rng = Rng::stream(seed, 0xfea7u);
    FeatureMap f;
    f.ha = ha;
    f.wa = wa;
    f.f = MatX(ha * wa, d);
    for (int r = 0; r < ha * wa; ++r)
        for (int c = 0; c < d; ++c) f.f(r, c) = rng.normal();
    return f;
}

namespace detail {

inline ConceptSet null_prompted(const ConceptSet& set, const PromptEmbedding& null_prompt)
{
    ConceptSet out = set;
    for (auto& p : out.prompts) p = null_prompt;
    out.bg_prompt = null_prompt;
    return out;
}

// Attention output for the requested prompt mode; adapters stay active on the
// null path.
inline MatX conditioned_attention(const GuidanceBackbone& backbone, const MaskStack& feature_masks,
                                  PromptMode mode)
{
    if (mode == PromptMode::null_prompt)
        return rca_forward(backbone.features, feature_masks,
                           null_prompted(backbone.set, backbone.null_prompt));
    return rca_forward(backbone.features, feature_masks, backbone.set);
}

} // namespace detail

// eps_hat(x_t, t, conditioning). pixel_masks are at latent resolution and are
// max-pooled down to the attention grid.
inline Image predict_noise(const NoisePredictor& pred, const NoiseSchedule& sched, const Image& x,
                           int t, const GuidanceBackbone& backbone, const MaskStack& pixel_masks,
                           PromptMode mode)
{
    if (t < 1 || t > sched.timesteps) throw ValidationError("predict_noise: t out of range");
    if (x.c != 3 || x.h != pixel_masks.h || x.w != pixel_masks.w)
        throw ValidationError("predict_noise: latent/mask shape mismatch");
    if (!x.all_finite()) throw ValidationError("predict_noise: latent is not finite");
    if (pixel_masks.k != backbone.set.k())
        throw ValidationError("predict_noise: mask count disagrees with the concept set");

    const MaskStack feature_masks =
        downsample_masks(pixel_masks, backbone.features.ha, backbone.features.wa);
    const MatX attn = detail::conditioned_attention(backbone, feature_masks, mode);

    const double abar = sched.at(t);
    const double noise_scale = std::sqrt(1.0 - abar);
    const int cell_h = x.h / backbone.features.ha;
    const int cell_w = x.w / backbone.features.wa;

    Image eps(x.h, x.w, 3);
    if (const auto* oracle = std::get_if<TargetOraclePredictor>(&pred)) {
        if (static_cast<int>(oracle->targets.size()) != pixel_masks.k)
            throw ValidationError("target oracle: one target per concept required");
        for (int y = 0; y < x.h; ++y)
            for (int px = 0; px < x.w; ++px) {
                Vec3 target = oracle->neutral;
                if (mode == PromptMode::prompted) {
                    for (int i = 0; i < pixel_masks.k; ++i)
                        if (pixel_masks.at(i, y, px)) {
                            target = oracle->targets[static_cast<size_t>(i)];
                            break;
                        }
                }
                for (int c = 0; c < 3; ++c)
                    eps.at(y, px, c) =
                        (x.at(y, px, c) - std::sqrt(abar) * target[c]) / noise_scale;
            }
    } else if (const auto* affine = std::get_if<AffinePredictor>(&pred)) {
        if (affine->e.cols() != attn.cols())
            throw ValidationError("affine predictor width disagrees with attention output");
        for (int y = 0; y < x.h; ++y)
            for (int px = 0; px < x.w; ++px) {
                const int cell = (y / cell_h) * backbone.features.wa + px / cell_w;
                const Vec3 x_px(x.at(y, px, 0), x.at(y, px, 1), x.at(y, px, 2));
                const Vec3 out = affine->a3 * x_px + affine->e * attn.row(cell).transpose();
                for (int c = 0; c < 3; ++c) eps.at(y, px, c) = out[c];
            }
    } else {
        const auto& stub = std::get<LearnedStubPredictor>(pred);
        const int d = static_cast<int>(attn.cols());
        if (stub.w1.cols() != 3 + d + 1)
            throw ValidationError("learned stub width disagrees with attention output");
        VecX in(3 + d + 1);
        for (int y = 0; y < x.h; ++y)
            for (int px = 0; px < x.w; ++px) {
                const int cell = (y / cell_h) * backbone.features.wa + px / cell_w;
                for (int c = 0; c < 3; ++c) in[c] = x.at(y, px, c);
                in.segment(3, d) = attn.row(cell).transpose();
                in[3 + d] = static_cast<double>(t) / sched.timesteps;
                const VecX hidden = (stub.w1 * in).array().tanh();
                const Vec3 out = stub.w2 * hidden;
                for (int c = 0; c < 3; ++c) eps.at(y, px, c) = out[c];
            }
    }
    return eps;
}

// --- DDIM inversion ------------------------------------------------------

// One inversion step s -> t with null-prompt conditioning. The clean image
// (s=0) has no noised timestep of its own, so the first step of a chain
// evaluates the model at the step's target timestep; a forward sampling pass
// then cancels the state-independent part of the prediction exactly.
// s == t is a degenerate identity allowed for tests.
inline Image ddim_invert_step(const Image& x_s, int s, int t, const NoisePredictor& pred,
                              const NoiseSchedule& sched, const GuidanceBackbone& backbone,
                              const MaskStack& pixel_masks)
{
    if (s < 0 || t < 1 || t > sched.timesteps || s > t)
        throw ValidationError("ddim_invert_step: schedule bounds violated");
    const int eval_t = s > 0 ? s : t;
    const Image eps =
        predict_noise(pred, sched, x_s, eval_t, backbone, pixel_masks, PromptMode::null_prompt);

    const double abar_s = sched.at(s);
    const double abar_t = sched.at(t);
    const double to_clean = std::sqrt(1.0 - abar_s);
    const double from_clean = std::sqrt(abar_t);
    const double reinject = std::sqrt(1.0 - abar_t);
    const double inv_root_s = 1.0 / std::sqrt(abar_s);

    Image x_t(x_s.h, x_s.w, 3);
    for (size_t i = 0; i < x_s.v.size(); ++i) {
        const double x0_hat = (x_s.v[i] - to_clean * eps.v[i]) * inv_root_s;
        x_t.v[i] = from_clean * x0_hat + reinject * eps.v[i];
    }
    return x_t;
}

struct InversionResult {
    Image x_s;
    int s = 0;
    Image x_t;
    int t = 0;
};

// Chain of inversion sub-steps from the clean latent up to t, capturing the
// intermediate latent at s = t - delta_t. The interval delta_t is split into
// `substeps` equal strides and the whole path runs on that grid. delta_t == 0
// (with substeps == 1) is a degenerate test-only limit where x_s == x_t.
inline InversionResult ddim_invert(const Image& x0, int t, int delta_t, int substeps,
                                   const NoisePredictor& pred, const NoiseSchedule& sched,
                                   const GuidanceBackbone& backbone, const MaskStack& pixel_masks)
{
    if (substeps < 1) throw ValidationError("ddim_invert: substeps must be positive");
    if (delta_t < 0 || (delta_t == 0 && substeps != 1))
        throw ValidationError("ddim_invert: invalid stride");
    if (delta_t > 0 && delta_t % substeps != 0)
        throw ValidationError("ddim_invert: substeps must divide delta_t");
    const int stride = delta_t > 0 ? delta_t / substeps : t;
    if (t < 1 || t > sched.timesteps) throw ValidationError("ddim_invert: t out of range");
    if (delta_t > 0 && t - delta_t < 1)
        throw ValidationError("ddim_invert: t - delta_t must stay at or above 1");
    if (t % stride != 0) throw ValidationError("ddim_invert: stride must divide t");

    InversionResult res;
    res.t = t;
    res.s = t - delta_t;
    Image x = x0;
    int s = 0;
    for (int next = stride; next <= t; next += stride) {
        x = ddim_invert_step(x, s, next, pred, sched, backbone, pixel_masks);
        s = next;
        if (s == res.s) res.x_s = x;
    }
    res.x_t = x;
    return res;
}

// --- score-matching gradients -------------------------------------------

namespace detail {

inline Image interval_gradient(const Image& x0, const MaskStack& pixel_masks, int t,
                               const NoisePredictor& pred, const NoiseSchedule& sched,
                               const GuidanceConfig& cfg, const GuidanceBackbone& backbone)
{
    const InversionResult traj =
        ddim_invert(x0, t, cfg.delta_t, cfg.substeps, pred, sched, backbone, pixel_masks);
    const Image eps_cond =
        predict_noise(pred, sched, traj.x_t, traj.t, backbone, pixel_masks, PromptMode::prompted);
    const Image eps_base =
        predict_noise(pred, sched, traj.x_s, traj.s, backbone, pixel_masks, PromptMode::null_prompt);
    const double w = guidance_weight(sched, cfg.weight_kind, cfg.weight_value, t);
    Image g(x0.h, x0.w, 3);
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = w * (eps_cond.v[i] - eps_base.v[i]);
    return g;
}

} // namespace detail

// Concept-aware interval gradient: conditioned prediction at t under the real
// prompts, baseline prediction at s = t - delta_t under null prompts, both
// routed through the region attention. The result is a pixel-space gradient
// to hand to render_backward.
inline Image cism_gradient(const Image& x0, const MaskStack& pixel_masks, int t,
                           const NoisePredictor& pred, const NoiseSchedule& sched,
                           const GuidanceConfig& cfg, const GuidanceBackbone& backbone)
{
    if (pixel_masks.k != backbone.set.k())
        throw ValidationError("cism_gradient: mask count disagrees with the concept set");
    return detail::interval_gradient(x0, pixel_masks, t, pred, sched, cfg, backbone);
}

// Baseline interval gradient: a single global prompt over the whole frame,
// no adapters. Implemented as the degenerate one-concept case of the same
// machinery so the two agree exactly in the reduction limit.
inline Image ism_gradient(const Image& x0, int t, const NoisePredictor& pred,
                          const NoiseSchedule& sched, const GuidanceConfig& cfg,
                          const AttentionWeights& weights, const FeatureMap& features,
                          const PromptEmbedding& prompt, const PromptEmbedding& null_prompt)
{
    GuidanceBackbone backbone;
    backbone.set.weights = weights;
    backbone.set.prompts.push_back(prompt);
    backbone.set.bg_prompt = prompt;
    backbone.set.adapters.push_back(ConceptLoRA{
        MatX::Zero(weights.w_k.rows(), 1), MatX::Zero(1, weights.w_k.cols()),
        MatX::Zero(weights.w_v.rows(), 1), MatX::Zero(1, weights.w_v.cols())});
    backbone.null_prompt = null_prompt;
    backbone.features = features;

    MaskStack full(1, x0.h, x0.w);
    for (auto& b : full.v) b = 1;
    full.recompute_background();
    return detail::interval_gradient(x0, full, t, pred, sched, cfg, backbone);
}

} // namespace csplat
