#pragma once

// Feature extractor (stride-1 conv/BN/ReLU blocks) and projection head
// (one stride-2 conv/BN/ReLU block followed by a 1x1x1 conv).

#include "eqreg/layers.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace eqreg {

struct NetConfig {
    std::vector<Index> extractor_channels{16, 32, 32, 32};
    Index head_hidden = 128;
    Index head_out = 16;
    Index head_stride = 2;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    /// Scale of the head's final 1x1x1 weights relative to a variance-preserving init.
    double head_out_gain = 1.0;
    std::uint64_t seed = 0;

    Index extractor_out() const { return extractor_channels.back(); }
};

enum class NormMode { train, eval };

template <typename Scalar>
struct NetParams {
    struct Entry {
        std::string name;
        Tensor<Scalar> value;
        bool trainable = true;
    };

    NetConfig config;
    std::vector<Entry> entries;

    Index find(const std::string& name) const
    {
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name)
                return static_cast<Index>(i);
        throw ContractError("unknown parameter '" + name + "'");
    }

    Tensor<Scalar>& operator[](const std::string& name) { return entries[std::size_t(find(name))].value; }
    const Tensor<Scalar>& operator[](const std::string& name) const { return entries[std::size_t(find(name))].value; }

    bool finite() const
    {
        for (const auto& e : entries)
            if (!all_finite(e.value.data))
                return false;
        return true;
    }

    Index parameter_count() const
    {
        Index n = 0;
        for (const auto& e : entries)
            n += e.trainable ? e.value.size() : 0;
        return n;
    }

    template <typename Other>
    NetParams<Other> cast() const
    {
        NetParams<Other> out;
        out.config = config;
        for (const auto& e : entries)
            out.entries.push_back({e.name, e.value.template cast<Other>(), e.trainable});
        return out;
    }
};

inline std::string extractor_prefix(std::size_t block) { return "extractor.block" + std::to_string(block); }

namespace detail {

template <typename Scalar>
void add_conv(NetParams<Scalar>& p, const std::string& name, Index co, Index ci, Index kernel, double bound,
              std::mt19937_64& rng)
{
    Tensor<Scalar> w({co, ci, kernel, kernel, kernel});
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < w.size(); ++i)
        w.data[i] = Scalar(dist(rng));
    p.entries.push_back({name, std::move(w), true});
}

template <typename Scalar>
void add_norm(NetParams<Scalar>& p, const std::string& prefix, Index channels)
{
    p.entries.push_back({prefix + ".weight", Tensor<Scalar>({channels}, Scalar(1)), true});
    p.entries.push_back({prefix + ".bias", Tensor<Scalar>({channels}, Scalar(0)), true});
    p.entries.push_back({prefix + ".running_mean", Tensor<Scalar>({channels}, Scalar(0)), false});
    p.entries.push_back({prefix + ".running_var", Tensor<Scalar>({channels}, Scalar(1)), false});
}

} // namespace detail

/// Fan-in scaled uniform convolutions, unit/zero normalization, seeded.
template <typename Scalar>
NetParams<Scalar> initialize_params(const NetConfig& config)
{
    require(!config.extractor_channels.empty(), "extractor needs at least one block");
    NetParams<Scalar> p;
    p.config = config;
    std::mt19937_64 rng(config.seed);

    Index in = 1;
    for (std::size_t b = 0; b < config.extractor_channels.size(); ++b) {
        const Index out = config.extractor_channels[b];
        const std::string prefix = extractor_prefix(b);
        detail::add_conv(p, prefix + ".conv.weight", out, in, 3, std::sqrt(6.0 / double(in * 27)), rng);
        detail::add_norm(p, prefix + ".bn", out);
        in = out;
    }
    detail::add_conv(p, "head.block.conv.weight", config.head_hidden, in, 3, std::sqrt(6.0 / double(in * 27)), rng);
    detail::add_norm(p, "head.block.bn", config.head_hidden);
    detail::add_conv(p, "head.out.weight", config.head_out, config.head_hidden, 1,
                     config.head_out_gain * std::sqrt(3.0 / double(config.head_hidden)), rng);
    p.entries.push_back({"head.out.bias", Tensor<Scalar>({config.head_out}, Scalar(0)), true});
    return p;
}

/// Parameters placed on a tape. Frozen groups become constants.
template <typename Scalar>
struct BoundParams {
    std::vector<Var<Scalar>> vars;

    Var<Scalar> operator[](Index i) const { return vars[std::size_t(i)]; }
};

template <typename Scalar>
BoundParams<Scalar> bind(Tape<Scalar>& tape, const NetParams<Scalar>& params, bool train_extractor = true,
                         bool train_head = true)
{
    BoundParams<Scalar> bound;
    for (const auto& e : params.entries) {
        const bool head = e.name.rfind("head.", 0) == 0;
        const bool trainable = e.trainable && (head ? train_head : train_extractor);
        bound.vars.push_back(trainable ? tape.leaf(e.value) : tape.constant(e.value));
    }
    return bound;
}

namespace detail {

template <typename Scalar>
Var<Scalar> conv_block(NetParams<Scalar>& params, const BoundParams<Scalar>& bound, const std::string& prefix,
                       Var<Scalar> x, Index stride, NormMode mode)
{
    const BatchNormState state{mode == NormMode::train, params.config.bn_momentum, params.config.bn_eps};
    auto y = conv3d(x, bound[params.find(prefix + ".conv.weight")], stride);
    y = batch_norm(y, bound[params.find(prefix + ".bn.weight")], bound[params.find(prefix + ".bn.bias")],
                   params[prefix + ".bn.running_mean"], params[prefix + ".bn.running_var"], state);
    return relu(y);
}

} // namespace detail

/// Feature extractor on a (N, 1, D, H, W) batch; output (N, C, D, H, W).
template <typename Scalar>
Var<Scalar> extract_features(NetParams<Scalar>& params, const BoundParams<Scalar>& bound, Var<Scalar> images,
                             NormMode mode)
{
    Var<Scalar> x = images;
    for (std::size_t b = 0; b < params.config.extractor_channels.size(); ++b)
        x = detail::conv_block(params, bound, extractor_prefix(b), x, 1, mode);
    return x;
}

/// Projection head; halves the extent (ceiling) and outputs head_out channels.
template <typename Scalar>
Var<Scalar> project_features(NetParams<Scalar>& params, const BoundParams<Scalar>& bound, Var<Scalar> features,
                             NormMode mode)
{
    auto x = detail::conv_block(params, bound, "head.block", features, params.config.head_stride, mode);
    x = conv3d(x, bound[params.find("head.out.weight")], 1);
    return add_channel_bias(x, bound[params.find("head.out.bias")]);
}

// ---------------------------------------------------------------------------
// Value-level API

/// C-channel grid; `stride` is the downsampling factor relative to the image grid.
template <typename Scalar>
struct FeatureMap {
    Tensor<Scalar> values; // (1, C, D, H, W)
    Index stride = 1;

    Index channels() const { return values.dim(1); }
    Dims dims() const { return values.spatial(); }
    const Scalar* channel(Index c) const { return values.slab(0, c); }
};

template <typename Scalar>
Tensor<Scalar> image_batch(const std::vector<const Volume<Scalar>*>& images)
{
    require(!images.empty(), "image_batch: empty batch");
    const Dims dims = images.front()->dims;
    Tensor<Scalar> t(spatial_shape(Index(images.size()), 1, dims));
    for (std::size_t n = 0; n < images.size(); ++n) {
        require(images[n]->dims == dims, "image_batch: images differ in extent");
        t.data.segment(Index(n) * dims.count(), dims.count()) = images[n]->data;
    }
    return t;
}

inline void require_network_input(const Dims& dims)
{
    require(dims.d >= 8 && dims.h >= 8 && dims.w >= 8, "network input must be >= 8 voxels per axis, got " + dims.str());
}

template <typename Scalar>
FeatureMap<Scalar> feature_extractor_forward(NetParams<Scalar>& params, const Volume<Scalar>& image,
                                             NormMode mode = NormMode::eval)
{
    require_network_input(image.dims);
    require(all_finite(image.data), "feature_extractor_forward: non-finite input");
    require(params.finite(), "feature_extractor_forward: non-finite parameters");
    Tape<Scalar> tape;
    const auto bound = bind(tape, params, false, false);
    const auto x = tape.constant(image_batch<Scalar>({&image}));
    return {extract_features(params, bound, x, mode).value(), 1};
}

template <typename Scalar>
FeatureMap<Scalar> projection_head_forward(NetParams<Scalar>& params, const FeatureMap<Scalar>& features,
                                           NormMode mode = NormMode::eval)
{
    require(features.stride == 1, "projection_head_forward: expects stride-1 features");
    require(all_finite(features.values.data), "projection_head_forward: non-finite input");
    Tape<Scalar> tape;
    const auto bound = bind(tape, params, false, false);
    const auto x = tape.constant(features.values);
    return {project_features(params, bound, x, mode).value(), features.stride * params.config.head_stride};
}

/// Parameter-shaped gradients. Parameters the loss does not reach are listed in `disconnected`.
template <typename Scalar>
struct GradientSet {
    std::vector<std::pair<std::string, Tensor<Scalar>>> grads;
    std::vector<std::string> disconnected;

    const Tensor<Scalar>& operator[](const std::string& name) const
    {
        for (const auto& [n, g] : grads)
            if (n == name)
                return g;
        throw ContractError("no gradient for '" + name + "'");
    }

    bool any_disconnected() const { return !disconnected.empty(); }
};

template <typename Scalar>
GradientSet<Scalar> gradients(Var<Scalar> loss, const NetParams<Scalar>& params, const BoundParams<Scalar>& bound)
{
    Tape<Scalar>& tape = *loss.tape;
    if (loss.requires_grad())
        tape.backward(loss);
    GradientSet<Scalar> out;
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
        const auto& e = params.entries[i];
        const Var<Scalar> v = bound.vars[i];
        if (!e.trainable || !v.requires_grad())
            continue;
        if (tape.has_grad(v)) {
            out.grads.emplace_back(e.name, tape.grad(v));
        } else {
            out.grads.emplace_back(e.name, Tensor<Scalar>(e.value.shape));
            out.disconnected.push_back(e.name);
        }
    }
    return out;
}

template <typename Scalar>
std::shared_ptr<const Stencil<Scalar>> affine_stencil(const AffineTransform& transform, const Dims& dims)
{
    require(transform.invertible(), "affine transform has a singular linear part");
    return Stencil<Scalar>::build(dims, dims, [&](const Vec3& p) { return transform(p); });
}

template <typename Scalar>
struct TransformedFeatures {
    FeatureMap<Scalar> features;
    std::vector<std::uint8_t> valid;
};

/// Channel-wise pull-back resampling out(q) = feat(T(q)), plus the in-domain mask.
template <typename Scalar>
TransformedFeatures<Scalar> transform_featuremap(const AffineTransform& transform, const FeatureMap<Scalar>& feat)
{
    const auto stencil = affine_stencil<Scalar>(transform, feat.dims());
    Tape<Scalar> tape;
    const auto x = tape.constant(feat.values);
    return {{resample(x, stencil).value(), feat.stride}, stencil->valid};
}

} // namespace eqreg
