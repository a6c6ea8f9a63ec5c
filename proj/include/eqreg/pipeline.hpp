#pragma once

// Full registration path R(I_f, I_m) = H(P(G(I_f)), P(G(I_m))) and the joint
// training objective for one batch of augmented pairs.

#include "eqreg/losses.hpp"
#include "eqreg/optimh.hpp"

#include <memory>
#include <vector>

namespace eqreg {

struct PipelineConfig {
    SolverConfig solver;
    LossWeights weights;
    Index samples = 1000;      // feature vectors per InfoNCE term
    bool registration = true;  // include L_reg
    bool contrastive = true;   // include the InfoNCE terms
};

/// Image-grid displacement (voxels) from projected maps (N, C, D', H', W').
template <typename Scalar>
Var<Scalar> predict_field(Var<Scalar> proj_fixed, Var<Scalar> proj_moving, const SolverConfig& cfg, Index head_stride,
                          const Dims& image)
{
    auto u = solve_control(cost_volume(proj_fixed, proj_moving, cfg), cfg);
    const auto up = upsample_stencil<Scalar>(u.value().spatial(), double(cfg.grid_stride * head_stride), image);
    return resample(u, up, Scalar(head_stride));
}

/// Eval-mode projected features P(G(I)) for each image, batched through the network.
template <typename Scalar>
std::vector<FeatureMap<Scalar>> project_images(NetParams<Scalar>& params, const std::vector<const Volume<Scalar>*>& images)
{
    for (const auto* im : images) {
        require_network_input(im->dims);
        require(all_finite(im->data), "register: non-finite input");
    }
    Tape<Scalar> tape;
    const auto bound = bind(tape, params, false, false);
    const auto x = tape.constant(image_batch<Scalar>(images));
    const auto proj = project_features(params, bound, extract_features(params, bound, x, NormMode::eval), NormMode::eval);
    std::vector<FeatureMap<Scalar>> out;
    for (Index n = 0; n < Index(images.size()); ++n)
        out.push_back({batch_slice(proj, n).value(), params.config.head_stride});
    return out;
}

/// H(fixed, moving) on the image grid `image`.
template <typename Scalar>
DisplacementField<Scalar> solve_from_features(const FeatureMap<Scalar>& fixed, const FeatureMap<Scalar>& moving,
                                              const SolverConfig& cfg, const Dims& image)
{
    require(fixed.values.shape == moving.values.shape, "solve_from_features: feature maps differ in shape");
    Tape<Scalar> tape;
    const auto u = predict_field(tape.constant(fixed.values), tape.constant(moving.values), cfg, fixed.stride, image);
    return field_from_tensor(u.value());
}

/// Eval-mode inference for one pair.
template <typename Scalar>
DisplacementField<Scalar> register_pair(NetParams<Scalar>& params, const SolverConfig& cfg, const Volume<Scalar>& fixed,
                                        const Volume<Scalar>& moving)
{
    require(fixed.dims == moving.dims, "register: fixed and moving extents differ");
    const auto proj = project_images<Scalar>(params, {&fixed, &moving});
    return solve_from_features(proj[0], proj[1], cfg, fixed.dims);
}

/// Network inputs and targets for one optimizer step.
///
/// images[0, pairs) are fixed inputs, images[pairs, 2 pairs) the matching moving inputs.
/// A contrast term compares transform(G(images[source])) with G(images[view]).
template <typename Scalar>
struct StepBatch {
    struct Contrast {
        Index view = 0;
        Index source = 0;
        AffineTransform transform = AffineTransform::identity();
        std::uint64_t seed = 0;
    };

    std::vector<Volume<Scalar>> images;
    std::vector<DisplacementField<Scalar>> targets;
    std::vector<Contrast> contrast;

    Index pairs() const { return static_cast<Index>(targets.size()); }
};

struct StepLosses {
    double reg = 0.0;
    double contrast = 0.0;   // Σ over terms / pairs, before alpha
    double total = 0.0;
    Index samples = 0;       // smallest sample count over contrast terms
};

template <typename Scalar>
struct StepGraph {
    Var<Scalar> loss;
    BoundParams<Scalar> bound;
    StepLosses values;
};

/// L = mean MSE(u, target) + alpha / pairs * Σ InfoNCE over the contrast terms.
template <typename Scalar>
StepGraph<Scalar> step_loss(Tape<Scalar>& tape, NetParams<Scalar>& params, const StepBatch<Scalar>& batch,
                            const PipelineConfig& cfg, bool train_extractor = true, bool train_head = true,
                            NormMode mode = NormMode::train)
{
    const Index pairs = batch.pairs();
    require(pairs >= 1 && Index(batch.images.size()) >= 2 * pairs, "step_loss: batch needs fixed and moving inputs");
    require(cfg.registration || cfg.contrastive, "step_loss: no loss term enabled");
    cfg.weights.validate();

    StepGraph<Scalar> out;
    out.bound = bind(tape, params, train_extractor, train_head);
    const Dims dims = batch.images.front().dims;
    std::vector<const Volume<Scalar>*> ptrs;
    for (const auto& im : batch.images)
        ptrs.push_back(&im);
    const auto feats = extract_features(params, out.bound, tape.constant(image_batch(ptrs)), mode);

    std::vector<Var<Scalar>> terms;
    if (cfg.registration) {
        const auto proj = project_features(params, out.bound, batch_range(feats, 0, 2 * pairs), mode);
        const auto u = predict_field(batch_range(proj, 0, pairs), batch_range(proj, pairs, pairs), cfg.solver,
                                     params.config.head_stride, dims);
        std::vector<const DisplacementField<Scalar>*> targets;
        for (const auto& t : batch.targets)
            targets.push_back(&t);
        const auto reg = mean_squared_error(u, tape.constant(tensor_from_fields(targets)));
        out.values.reg = double(reg.value().data[0]);
        terms.push_back(reg);
    }

    if (cfg.contrastive && !batch.contrast.empty()) {
        std::vector<Var<Scalar>> nce;
        out.values.samples = cfg.samples;
        for (const auto& c : batch.contrast) {
            const auto stencil = affine_stencil<Scalar>(c.transform, dims);
            const auto a = resample(batch_slice(feats, c.source), stencil);
            const auto loc = sample_locations(stencil->valid, cfg.samples, c.seed);
            require(loc.size() >= 1, "step_loss: transformed feature map has no valid voxels");
            out.values.samples = std::min(out.values.samples, loc.size());
            const auto idx = std::make_shared<const std::vector<Index>>(loc.flat);
            nce.push_back(info_nce(gather_locations(a, 0, idx), gather_locations(feats, c.view, idx), cfg.weights.tau));
        }
        auto acc = nce.front();
        for (std::size_t i = 1; i < nce.size(); ++i)
            acc = add(acc, nce[i]);
        const auto lc = scale(acc, Scalar(1.0 / double(pairs)));
        out.values.contrast = double(lc.value().data[0]);
        const double weight = cfg.registration ? cfg.weights.alpha : 1.0;
        if (weight > 0.0)
            terms.push_back(scale(lc, Scalar(weight)));
    }

    require(!terms.empty(), "step_loss: every enabled term has zero weight");
    out.loss = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i)
        out.loss = add(out.loss, terms[i]);
    out.values.total = double(out.loss.value().data[0]);
    return out;
}

} // namespace eqreg
