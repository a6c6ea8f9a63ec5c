#pragma once

// Differentiable displacement estimation from a pair of feature maps.
//
// A sum-of-squared-differences cost is evaluated for every integer offset in
// a (2r+1)^3 window on a control grid of stride s. The displacement is the
// soft-argmin of that cost, refined by a few coupled iterations in which each
// control point is pulled toward the 3x3x3 box mean of its neighbours.

#include "eqreg/nets.hpp"

#include <limits>
#include <optional>
#include <vector>

namespace eqreg {

struct SolverConfig {
    Index radius = 3;          // r, in quantization steps
    Index grid_stride = 2;     // s, control-grid stride in feature voxels
    Index quantization = 1;    // q, feature voxels per step
    double beta = 0.05;        // soft-argmin temperature
    double lambda = 1.0;       // coupling weight
    int coupling_iters = 3;    // K_cc

    Index window() const { return 2 * radius + 1; }
    Index offsets() const { return window() * window() * window(); }

    void validate() const
    {
        require(radius >= 1 && grid_stride >= 1 && quantization >= 1 && coupling_iters >= 0,
                "solver config requires r, s, q >= 1 and K_cc >= 0");
        require(beta > 0.0 && lambda > 0.0, "solver config requires beta, lambda > 0");
    }
};

/// Offset d_k = (a, b, c) in {-r..r}^3, enumerated with a slowest.
inline Eigen::Vector3i window_offset(Index k, Index radius)
{
    const Index w = 2 * radius + 1;
    return {int(k / (w * w) - radius), int((k / w) % w - radius), int(k % w - radius)};
}

/// Costs (N, K, Dc, Hc, Wc) with their search parameters.
template <typename Scalar>
struct CostVolume {
    Tensor<Scalar> costs;
    Index radius = 1;
    Index grid_stride = 1;
    Index quantization = 1;

    Dims control_dims() const { return costs.spatial(); }
};

namespace detail {

inline void check_window(const Dims& dims, const SolverConfig& cfg)
{
    const Index reach = cfg.quantization * cfg.radius;
    for (int a = 0; a < 3; ++a)
        require(2 * reach <= dims[a], "search window q*r = " + std::to_string(reach) +
                                          " exceeds half the feature-map extent " + dims.str());
}

} // namespace detail

/// cost(d, p) = Σ_c (F_f(c, s p) - F_m(c, s p + q d))^2 with border clamp on the moving samples.
template <typename Scalar>
Var<Scalar> cost_volume(Var<Scalar> fixed, Var<Scalar> moving, const SolverConfig& cfg)
{
    const auto& fv = fixed.value();
    const auto& mv = moving.value();
    require(fv.shape == mv.shape, "cost_volume: feature maps differ in shape");
    cfg.validate();
    const Dims dims = fv.spatial();
    detail::check_window(dims, cfg);

    const Index batch = fv.dim(0), channels = fv.dim(1), K = cfg.offsets();
    const Index s = cfg.grid_stride, q = cfg.quantization, r = cfg.radius;
    const Dims ctrl = ceil_div(dims, s);

    // For every (k, control point): the fixed and moving flat indices.
    auto pairs = std::make_shared<std::vector<std::array<Index, 2>>>(std::size_t(K * ctrl.count()));
    for (Index k = 0; k < K; ++k) {
        const Eigen::Vector3i d = window_offset(k, r);
        for_each_voxel(ctrl, [&](Index flat, const Vec3& p) {
            const Vec3 src = p * double(s);
            const Vec3 dst = src + double(q) * d.cast<double>();
            (*pairs)[std::size_t(k * ctrl.count() + flat)] = {nearest_at(dims, src), nearest_at(dims, dst)};
        });
    }

    Tensor<Scalar> out(spatial_shape(batch, K, ctrl));
    const Index nc = ctrl.count();
    for (Index n = 0; n < batch; ++n) {
        for (Index c = 0; c < channels; ++c) {
            const Scalar* f = fv.slab(n, c);
            const Scalar* m = mv.slab(n, c);
            for (Index k = 0; k < K; ++k) {
                Scalar* dst = out.slab(n, k);
                const auto* pk = pairs->data() + k * nc;
                for (Index p = 0; p < nc; ++p) {
                    const Scalar diff = f[pk[p][0]] - m[pk[p][1]];
                    dst[p] += diff * diff;
                }
            }
        }
    }

    return fixed.tape->record(std::move(out), {fixed, moving}, [fixed, moving, pairs, batch, channels, K, nc](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        const auto& fv = fixed.value();
        const auto& mv = moving.value();
        Tensor<Scalar>* gf = fixed.requires_grad() ? &t.grad(fixed) : nullptr;
        Tensor<Scalar>* gm = moving.requires_grad() ? &t.grad(moving) : nullptr;
        for (Index n = 0; n < batch; ++n) {
            for (Index c = 0; c < channels; ++c) {
                const Scalar* f = fv.slab(n, c);
                const Scalar* m = mv.slab(n, c);
                Scalar* df = gf ? gf->slab(n, c) : nullptr;
                Scalar* dm = gm ? gm->slab(n, c) : nullptr;
                for (Index k = 0; k < K; ++k) {
                    const Scalar* gk = g.slab(n, k);
                    const auto* pk = pairs->data() + k * nc;
                    for (Index p = 0; p < nc; ++p) {
                        const Scalar v = Scalar(2) * (f[pk[p][0]] - m[pk[p][1]]) * gk[p];
                        if (df)
                            df[pk[p][0]] += v;
                        if (dm)
                            dm[pk[p][1]] -= v;
                    }
                }
            }
        }
    });
}

/// u(p) = Σ_d softmax(-cost(., p) / beta)(d) * q d; output (N, 3, Dc, Hc, Wc) in feature voxels.
template <typename Scalar>
Var<Scalar> soft_argmin(Var<Scalar> cost, const SolverConfig& cfg)
{
    const auto& cv = cost.value();
    const Index batch = cv.dim(0), K = cv.dim(1);
    require(K == cfg.offsets(), "soft_argmin: cost volume does not match the window");
    const Dims ctrl = cv.spatial();
    const Index nc = ctrl.count();
    const Scalar inv_beta = Scalar(1.0 / cfg.beta);

    Eigen::Matrix<Scalar, 3, Eigen::Dynamic> disp(3, K);
    for (Index k = 0; k < K; ++k)
        disp.col(k) = (double(cfg.quantization) * window_offset(k, cfg.radius).cast<double>()).template cast<Scalar>();

    // Softmax weights, (N * nc) x K, kept for the backward pass.
    auto weights = std::make_shared<RowMatrix<Scalar>>(batch * nc, K);
    Tensor<Scalar> out(spatial_shape(batch, 3, ctrl));
    Eigen::Array<Scalar, Eigen::Dynamic, 1> logits(K);
    for (Index n = 0; n < batch; ++n) {
        for (Index p = 0; p < nc; ++p) {
            for (Index k = 0; k < K; ++k)
                logits[k] = -cv.slab(n, k)[p] * inv_beta;
            const Scalar mx = logits.maxCoeff();
            logits = (logits - mx).exp();
            logits /= logits.sum();
            weights->row(n * nc + p) = logits.matrix().transpose();
            const Eigen::Matrix<Scalar, 3, 1> u = disp * logits.matrix();
            for (int a = 0; a < 3; ++a)
                out.slab(n, a)[p] = u[a];
        }
    }

    return cost.tape->record(std::move(out), {cost}, [cost, weights, disp, batch, K, nc, inv_beta](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        auto& gc = t.grad(cost);
        for (Index n = 0; n < batch; ++n) {
            for (Index p = 0; p < nc; ++p) {
                const auto w = weights->row(n * nc + p);
                Eigen::Matrix<Scalar, 3, 1> gu, mean;
                for (int a = 0; a < 3; ++a)
                    gu[a] = g.slab(n, a)[p];
                mean = disp * w.transpose();
                for (Index k = 0; k < K; ++k)
                    gc.slab(n, k)[p] += -inv_beta * w[k] * gu.dot(disp.col(k) - mean);
            }
        }
    });
}

/// Mean over the in-bounds 3x3x3 neighbourhood, per channel.
template <typename Scalar>
Var<Scalar> box_mean(Var<Scalar> x)
{
    const auto& xv = x.value();
    const Dims dims = xv.spatial();
    const Index batch = xv.dim(0), channels = xv.dim(1);
    auto neighbours = [dims](Index i, Index j, Index k, auto&& fn) {
        Index count = 0;
        for (Index a = std::max<Index>(0, i - 1); a <= std::min(dims.d - 1, i + 1); ++a)
            for (Index b = std::max<Index>(0, j - 1); b <= std::min(dims.h - 1, j + 1); ++b)
                for (Index c = std::max<Index>(0, k - 1); c <= std::min(dims.w - 1, k + 1); ++c, ++count)
                    fn(dims.flat(a, b, c));
        return count;
    };

    Tensor<Scalar> out(xv.shape);
    for (Index n = 0; n < batch; ++n) {
        for (Index ch = 0; ch < channels; ++ch) {
            const Scalar* src = xv.slab(n, ch);
            Scalar* dst = out.slab(n, ch);
            for_each_voxel(dims, [&](Index flat, const Vec3& p) {
                Scalar acc(0);
                const Index cnt = neighbours(Index(p[0]), Index(p[1]), Index(p[2]), [&](Index q) { acc += src[q]; });
                dst[flat] = acc / Scalar(cnt);
            });
        }
    }
    return x.tape->record(std::move(out), {x}, [x, dims, batch, channels, neighbours](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        auto& gx = t.grad(x);
        for (Index n = 0; n < batch; ++n) {
            for (Index ch = 0; ch < channels; ++ch) {
                const Scalar* src = g.slab(n, ch);
                Scalar* dst = gx.slab(n, ch);
                for_each_voxel(dims, [&](Index flat, const Vec3& p) {
                    const Index i = Index(p[0]), j = Index(p[1]), k = Index(p[2]);
                    const Index cnt = neighbours(i, j, k, [](Index) {});
                    const Scalar share = src[flat] / Scalar(cnt);
                    neighbours(i, j, k, [&](Index q) { dst[q] += share; });
                });
            }
        }
    });
}

/// cost(d, p) + lambda * ||q d - ubar(p)||^2
template <typename Scalar>
Var<Scalar> coupled_cost(Var<Scalar> cost, Var<Scalar> ubar, const SolverConfig& cfg)
{
    const auto& cv = cost.value();
    const auto& uv = ubar.value();
    const Index batch = cv.dim(0), K = cv.dim(1), nc = cv.spatial().count();
    const Scalar lambda = Scalar(cfg.lambda);
    std::vector<Eigen::Matrix<Scalar, 3, 1>> disp(static_cast<std::size_t>(K));
    for (Index k = 0; k < K; ++k)
        disp[std::size_t(k)] =
            (double(cfg.quantization) * window_offset(k, cfg.radius).cast<double>()).template cast<Scalar>();

    Tensor<Scalar> out = cv;
    for (Index n = 0; n < batch; ++n) {
        for (Index k = 0; k < K; ++k) {
            Scalar* dst = out.slab(n, k);
            const auto& d = disp[std::size_t(k)];
            for (Index p = 0; p < nc; ++p) {
                Scalar e(0);
                for (int a = 0; a < 3; ++a) {
                    const Scalar diff = d[a] - uv.slab(n, a)[p];
                    e += diff * diff;
                }
                dst[p] += lambda * e;
            }
        }
    }
    return cost.tape->record(std::move(out), {cost, ubar}, [cost, ubar, disp, batch, K, nc, lambda](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        if (cost.requires_grad())
            t.grad(cost).data += g.data;
        if (!ubar.requires_grad())
            return;
        auto& gu = t.grad(ubar);
        const auto& uv = ubar.value();
        for (Index n = 0; n < batch; ++n) {
            for (Index k = 0; k < K; ++k) {
                const Scalar* gk = g.slab(n, k);
                const auto& d = disp[std::size_t(k)];
                for (int a = 0; a < 3; ++a) {
                    const Scalar* u = uv.slab(n, a);
                    Scalar* dst = gu.slab(n, a);
                    for (Index p = 0; p < nc; ++p)
                        dst[p] -= Scalar(2) * lambda * gk[p] * (d[a] - u[p]);
                }
            }
        }
    });
}

/// Coupled soft-argmin on the control grid; result in feature voxels, (N, 3, Dc, Hc, Wc).
template <typename Scalar>
Var<Scalar> solve_control(Var<Scalar> cost, const SolverConfig& cfg)
{
    auto u = soft_argmin(cost, cfg);
    for (int it = 0; it < cfg.coupling_iters; ++it)
        u = soft_argmin(coupled_cost(cost, box_mean(u), cfg), cfg);
    return u;
}

/// Stencil sampling a control grid at x / factor for every voxel x of `target`.
template <typename Scalar>
std::shared_ptr<const Stencil<Scalar>> upsample_stencil(const Dims& control, double factor, const Dims& target)
{
    return Stencil<Scalar>::build(control, target, [factor](const Vec3& p) { return Vec3(p / factor); });
}

namespace detail {

/// Calls fn(n, c, lo, hi) for every forward-difference pair along each axis.
template <typename Fn>
void for_each_forward_pair(const Dims& dims, Index batch, Index channels, Fn&& fn)
{
    const std::array<Index, 3> stride{dims.h * dims.w, dims.w, 1};
    for (Index n = 0; n < batch; ++n)
        for (Index c = 0; c < channels; ++c)
            for (int a = 0; a < 3; ++a)
                for_each_voxel(dims, [&](Index flat, const Vec3& p) {
                    if (Index(p[a]) + 1 < dims[a])
                        fn(n, c, flat, flat + stride[std::size_t(a)]);
                });
}

} // namespace detail

/// Σ over axes and voxels of squared forward differences, all channels.
template <typename Scalar>
Var<Scalar> diffusion_energy(Var<Scalar> u)
{
    const auto& uv = u.value();
    const Dims dims = uv.spatial();
    const Index batch = uv.dim(0), channels = uv.dim(1);
    Tensor<Scalar> out({1});
    Scalar acc(0);
    detail::for_each_forward_pair(dims, batch, channels, [&](Index n, Index c, Index lo, Index hi) {
        const Scalar d = uv.slab(n, c)[hi] - uv.slab(n, c)[lo];
        acc += d * d;
    });
    out.data[0] = acc;
    return u.tape->record(std::move(out), {u}, [u, dims, batch, channels](Tape<Scalar>& t) {
        const Scalar g = t.upstream().data[0];
        auto& gu = t.grad(u);
        const auto& uv = u.value();
        detail::for_each_forward_pair(dims, batch, channels, [&](Index n, Index c, Index lo, Index hi) {
            const Scalar d = Scalar(2) * g * (uv.slab(n, c)[hi] - uv.slab(n, c)[lo]);
            gu.slab(n, c)[hi] += d;
            gu.slab(n, c)[lo] -= d;
        });
    });
}

// ---------------------------------------------------------------------------
// Value-level API

template <typename Scalar>
CostVolume<Scalar> build_cost_volume(const FeatureMap<Scalar>& fixed, const FeatureMap<Scalar>& moving,
                                     const SolverConfig& cfg)
{
    require(fixed.channels() == moving.channels(), "build_cost_volume: channel counts differ");
    require(fixed.stride == moving.stride, "build_cost_volume: strides differ");
    Tape<Scalar> tape;
    auto c = cost_volume(tape.constant(fixed.values), tape.constant(moving.values), cfg);
    return {c.value(), cfg.radius, cfg.grid_stride, cfg.quantization};
}

template <typename Scalar>
DisplacementField<Scalar> field_from_tensor(const Tensor<Scalar>& t, Index n = 0)
{
    DisplacementField<Scalar> f(t.spatial());
    f.data = t.data.segment(n * 3 * f.dims.count(), 3 * f.dims.count());
    return f;
}

template <typename Scalar>
Tensor<Scalar> tensor_from_fields(const std::vector<const DisplacementField<Scalar>*>& fields)
{
    const Dims dims = fields.front()->dims;
    Tensor<Scalar> t(spatial_shape(Index(fields.size()), 3, dims));
    for (std::size_t n = 0; n < fields.size(); ++n) {
        require(fields[n]->dims == dims, "tensor_from_fields: extents differ");
        t.data.segment(Index(n) * 3 * dims.count(), 3 * dims.count()) = fields[n]->data;
    }
    return t;
}

/// Coupled soft-argmin solve, upsampled from the control grid to the feature-map grid.
/// `feature_dims` defaults to control extent * stride.
template <typename Scalar>
DisplacementField<Scalar> solve_displacement(const CostVolume<Scalar>& cost, const SolverConfig& cfg,
                                             std::optional<Dims> feature_dims = std::nullopt)
{
    require(cost.costs.dim(1) == cfg.offsets(), "solve_displacement: cost volume does not match the window");
    Tape<Scalar> tape;
    auto u = solve_control(tape.constant(cost.costs), cfg);
    const Dims ctrl = cost.control_dims();
    const Dims target = feature_dims.value_or(Dims{ctrl.d * cfg.grid_stride, ctrl.h * cfg.grid_stride, ctrl.w * cfg.grid_stride});
    const auto up = resample(u, upsample_stencil<Scalar>(ctrl, double(cfg.grid_stride), target));
    return field_from_tensor(up.value());
}

/// Adam on a flat list of tensors.
template <typename Scalar>
struct Adam {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Index steps = 0;
    std::vector<Eigen::ArrayXd> m, v;

    void step(const std::vector<Tensor<Scalar>*>& params, const std::vector<const Tensor<Scalar>*>& grads, double lr)
    {
        if (m.empty()) {
            for (const auto* p : params) {
                m.push_back(Eigen::ArrayXd::Zero(p->size()));
                v.push_back(Eigen::ArrayXd::Zero(p->size()));
            }
        }
        ++steps;
        const double c1 = 1.0 - std::pow(beta1, double(steps));
        const double c2 = 1.0 - std::pow(beta2, double(steps));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Eigen::ArrayXd g = grads[i]->data.template cast<double>();
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g.square();
            const Eigen::ArrayXd update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            params[i]->data -= update.cast<Scalar>();
        }
    }
};

struct InstanceOptimConfig {
    int iters = 50;
    double lr = 0.02;
    double lambda = 0.5;
    Index control_stride = 2;
};

template <typename Scalar>
struct InstanceResult {
    DisplacementField<Scalar> field;
    double initial_objective = 0.0;
    double final_objective = 0.0;
    bool fell_back = false;
};

namespace detail {

/// Σ ||F_f(x) - F_m(x + u(x))||^2 + lambda Σ ||∇u||^2 with u on the feature grid (feature voxels).
template <typename Scalar>
Var<Scalar> instance_objective(Var<Scalar> fixed, Var<Scalar> moving, Var<Scalar> u, double lambda)
{
    auto data = sum_squared_difference(fixed, warp_sample(moving, u));
    return add(data, scale(diffusion_energy(u), Scalar(lambda)));
}

template <typename Scalar>
double objective_of(const FeatureMap<Scalar>& fixed, const FeatureMap<Scalar>& moving,
                    const DisplacementField<Scalar>& field, double lambda)
{
    const auto onfeat = subsample_field(field, fixed.stride, 1.0 / double(fixed.stride));
    Tape<Scalar> tape;
    auto j = instance_objective(tape.constant(fixed.values), tape.constant(moving.values),
                                tape.constant(tensor_from_fields<Scalar>({&onfeat})), lambda);
    return double(j.value().data[0]);
}

} // namespace detail

/// Gradient refinement of a displacement field against feature dissimilarity plus diffusion.
/// `init` lives on the image grid (feature extent * stride); the result never has a higher
/// objective than `init`.
template <typename Scalar>
InstanceResult<Scalar> instance_optimize(const FeatureMap<Scalar>& fixed, const FeatureMap<Scalar>& moving,
                                         const DisplacementField<Scalar>& init, const InstanceOptimConfig& cfg)
{
    require(fixed.values.shape == moving.values.shape && fixed.stride == moving.stride,
            "instance_optimize: feature maps differ");
    require(all_finite(init.data), "instance_optimize: non-finite initial field");
    const Index stride = fixed.stride;
    require(ceil_div(init.dims, stride) == fixed.dims(), "instance_optimize: initial field does not match the fixed grid");

    const Dims feat = fixed.dims();
    const Index cs = cfg.control_stride;
    auto control = subsample_field(init, stride * cs, 1.0 / double(stride));
    const auto up = upsample_stencil<Scalar>(control.dims, double(cs), feat);

    Tensor<Scalar> param = tensor_from_fields<Scalar>({&control});
    Adam<Scalar> adam;
    for (int it = 0; it < cfg.iters; ++it) {
        Tape<Scalar> tape;
        auto c = tape.leaf(param);
        auto u = resample(c, up);
        auto j = detail::instance_objective(tape.constant(fixed.values), tape.constant(moving.values), u, cfg.lambda);
        tape.backward(j);
        adam.step({&param}, {&tape.grad(c)}, cfg.lr);
    }

    const auto refined_control = field_from_tensor(param);
    InstanceResult<Scalar> out;
    out.field = upsample_field(refined_control, double(stride * cs), double(stride), init.dims);
    out.initial_objective = detail::objective_of(fixed, moving, init, cfg.lambda);
    out.final_objective = detail::objective_of(fixed, moving, out.field, cfg.lambda);
    if (!all_finite(out.field.data) || !(out.final_objective <= out.initial_objective)) {
        out.field = init;
        out.final_objective = out.initial_objective;
        out.fell_back = true;
    }
    return out;
}

} // namespace eqreg
