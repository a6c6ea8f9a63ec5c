#pragma once

// Differentiable layers on (N, C, D, H, W) tensors: 3D convolution, batch
// normalization, ReLU, channel bias, fixed-stencil resampling, field-driven
// warping and location gathering.

#include "eqreg/autodiff.hpp"
#include "eqreg/grid.hpp"

#include <memory>
#include <vector>

namespace eqreg {

namespace detail {

/// Flat layout of a grid padded by one voxel on every face. A stride-1 3x3x3
/// convolution becomes 27 shifted GEMMs over one contiguous column range.
struct PaddedLayout {
    Dims inner;
    Dims padded;
    Index first = 0;
    Index length = 0;
    std::array<Index, 27> offset{};

    explicit PaddedLayout(const Dims& d) : inner(d), padded{d.d + 2, d.h + 2, d.w + 2}
    {
        first = padded.flat(1, 1, 1);
        length = padded.flat(d.d, d.h, d.w) - first + 1;
        int k = 0;
        for (Index a = -1; a <= 1; ++a)
            for (Index b = -1; b <= 1; ++b)
                for (Index c = -1; c <= 1; ++c)
                    offset[k++] = (a * padded.h + b) * padded.w + c;
    }

    template <typename Scalar>
    void pad(const Scalar* src, Scalar* dst) const
    {
        for (Index i = 0; i < inner.d; ++i)
            for (Index j = 0; j < inner.h; ++j)
                std::copy_n(src + inner.flat(i, j, 0), inner.w, dst + padded.flat(i + 1, j + 1, 1));
    }

    template <typename Scalar>
    void crop(const Scalar* src, Scalar* dst) const
    {
        for (Index i = 0; i < inner.d; ++i)
            for (Index j = 0; j < inner.h; ++j)
                std::copy_n(src + padded.flat(i + 1, j + 1, 1), inner.w, dst + inner.flat(i, j, 0));
    }

    template <typename Scalar>
    void crop_add(const Scalar* src, Scalar* dst) const
    {
        for (Index i = 0; i < inner.d; ++i) {
            for (Index j = 0; j < inner.h; ++j) {
                const Scalar* s = src + padded.flat(i + 1, j + 1, 1);
                Scalar* t = dst + inner.flat(i, j, 0);
                for (Index k = 0; k < inner.w; ++k)
                    t[k] += s[k];
            }
        }
    }
};

/// Input flat index feeding each (tap, output) pair of a 3x3x3 conv with padding 1, or -1.
inline std::vector<Index> im2col_table(const Dims& in, const Dims& out, Index stride)
{
    std::vector<Index> table(std::size_t(27 * out.count()), -1);
    int tap = 0;
    for (Index a = -1; a <= 1; ++a) {
        for (Index b = -1; b <= 1; ++b) {
            for (Index c = -1; c <= 1; ++c, ++tap) {
                Index o = 0;
                for (Index i = 0; i < out.d; ++i) {
                    for (Index j = 0; j < out.h; ++j) {
                        for (Index k = 0; k < out.w; ++k, ++o) {
                            const Index z = i * stride + a, y = j * stride + b, x = k * stride + c;
                            if (z >= 0 && z < in.d && y >= 0 && y < in.h && x >= 0 && x < in.w)
                                table[std::size_t(tap * out.count() + o)] = in.flat(z, y, x);
                        }
                    }
                }
            }
        }
    }
    return table;
}

template <typename Scalar>
std::vector<RowMatrix<Scalar>> split_taps(const Tensor<Scalar>& w)
{
    const Index co = w.dim(0), ci = w.dim(1);
    std::vector<RowMatrix<Scalar>> taps(27, RowMatrix<Scalar>(co, ci));
    for (Index o = 0; o < co; ++o)
        for (Index i = 0; i < ci; ++i)
            for (int k = 0; k < 27; ++k)
                taps[std::size_t(k)](o, i) = w.data[(o * ci + i) * 27 + k];
    return taps;
}

} // namespace detail

inline Dims conv_output_dims(const Dims& in, Index kernel, Index stride)
{
    const Index pad = kernel / 2;
    auto out = [&](Index n) { return (n + 2 * pad - kernel) / stride + 1; };
    return {out(in.d), out(in.h), out(in.w)};
}

/// 3D convolution without bias. x: (N, Ci, D, H, W); w: (Co, Ci, k, k, k) with k in {1, 3};
/// zero padding k/2.
template <typename Scalar>
Var<Scalar> conv3d(Var<Scalar> x, Var<Scalar> w, Index stride = 1)
{
    const auto& xv = x.value();
    const auto& wv = w.value();
    require(xv.rank() == 5 && wv.rank() == 5, "conv3d: expected rank-5 input and weight");
    require(xv.dim(1) == wv.dim(1), "conv3d: input channels do not match weight");
    const Index kernel = wv.dim(2);
    require(kernel == 1 || kernel == 3, "conv3d: kernel must be 1 or 3");
    require(kernel == 3 || stride == 1, "conv3d: 1x1x1 kernels support stride 1 only");

    const Index batch = xv.dim(0), ci = xv.dim(1), co = wv.dim(0);
    const Dims in = xv.spatial();
    const Dims out = conv_output_dims(in, kernel, stride);
    Tensor<Scalar> y(spatial_shape(batch, co, out));

    if (kernel == 1) {
        const ConstRowMap<Scalar> wm(wv.ptr(), co, ci);
        for (Index n = 0; n < batch; ++n) {
            RowMap<Scalar>(y.slab(n, 0), co, out.count()).noalias() =
                wm * ConstRowMap<Scalar>(xv.slab(n, 0), ci, in.count());
        }
        return x.tape->record(std::move(y), {x, w}, [x, w, batch, ci, co, in](Tape<Scalar>& t) {
            const auto& g = t.upstream();
            const ConstRowMap<Scalar> wm(w.value().ptr(), co, ci);
            for (Index n = 0; n < batch; ++n) {
                const ConstRowMap<Scalar> gn(g.slab(n, 0), co, in.count());
                if (w.requires_grad())
                    RowMap<Scalar>(t.grad(w).ptr(), co, ci).noalias() +=
                        gn * ConstRowMap<Scalar>(x.value().slab(n, 0), ci, in.count()).transpose();
                if (x.requires_grad())
                    RowMap<Scalar>(t.grad(x).slab(n, 0), ci, in.count()).noalias() += wm.transpose() * gn;
            }
        });
    }

    if (stride == 1) {
        const detail::PaddedLayout layout(in);
        const auto taps = detail::split_taps(wv);
        const Index np = layout.padded.count();
        RowMatrix<Scalar> xp(ci, np), yp(co, np);
        for (Index n = 0; n < batch; ++n) {
            xp.setZero();
            for (Index c = 0; c < ci; ++c)
                layout.pad(xv.slab(n, c), xp.row(c).data());
            yp.setZero();
            for (int k = 0; k < 27; ++k)
                yp.middleCols(layout.first, layout.length).noalias() +=
                    taps[std::size_t(k)] * xp.middleCols(layout.first + layout.offset[std::size_t(k)], layout.length);
            for (Index c = 0; c < co; ++c)
                layout.crop(yp.row(c).data(), y.slab(n, c));
        }
        return x.tape->record(std::move(y), {x, w}, [x, w, batch, ci, co, in](Tape<Scalar>& t) {
            const detail::PaddedLayout layout(in);
            const auto& g = t.upstream();
            const auto taps = detail::split_taps(w.value());
            const Index np = layout.padded.count();
            RowMatrix<Scalar> xp(ci, np), gp(co, np), dxp;
            std::vector<RowMatrix<Scalar>> dtaps(27, RowMatrix<Scalar>::Zero(co, ci));
            if (x.requires_grad())
                dxp.resize(ci, np);
            for (Index n = 0; n < batch; ++n) {
                gp.setZero();
                for (Index c = 0; c < co; ++c)
                    layout.pad(g.slab(n, c), gp.row(c).data());
                const auto gmid = gp.middleCols(layout.first, layout.length);
                if (w.requires_grad()) {
                    xp.setZero();
                    for (Index c = 0; c < ci; ++c)
                        layout.pad(x.value().slab(n, c), xp.row(c).data());
                    for (int k = 0; k < 27; ++k)
                        dtaps[std::size_t(k)].noalias() +=
                            gmid * xp.middleCols(layout.first + layout.offset[std::size_t(k)], layout.length).transpose();
                }
                if (x.requires_grad()) {
                    dxp.setZero();
                    for (int k = 0; k < 27; ++k)
                        dxp.middleCols(layout.first + layout.offset[std::size_t(k)], layout.length).noalias() +=
                            taps[std::size_t(k)].transpose() * gmid;
                    auto& gx = t.grad(x);
                    for (Index c = 0; c < ci; ++c)
                        layout.crop_add(dxp.row(c).data(), gx.slab(n, c));
                }
            }
            if (w.requires_grad()) {
                auto& gw = t.grad(w);
                for (Index o = 0; o < co; ++o)
                    for (Index i = 0; i < ci; ++i)
                        for (int k = 0; k < 27; ++k)
                            gw.data[(o * ci + i) * 27 + k] += dtaps[std::size_t(k)](o, i);
            }
        });
    }

    auto table = std::make_shared<const std::vector<Index>>(detail::im2col_table(in, out, stride));
    const Index no = out.count();
    auto im2col = [ci, no, in](const Scalar* src, const std::vector<Index>& tab) {
        RowMatrix<Scalar> col(ci * 27, no);
        for (Index c = 0; c < ci; ++c) {
            const Scalar* s = src + c * in.count();
            for (Index k = 0; k < 27; ++k) {
                Scalar* row = col.row(c * 27 + k).data();
                const Index* idx = tab.data() + k * no;
                for (Index o = 0; o < no; ++o)
                    row[o] = idx[o] >= 0 ? s[idx[o]] : Scalar(0);
            }
        }
        return col;
    };
    const ConstRowMap<Scalar> wm(wv.ptr(), co, ci * 27);
    for (Index n = 0; n < batch; ++n)
        RowMap<Scalar>(y.slab(n, 0), co, no).noalias() = wm * im2col(xv.slab(n, 0), *table);

    return x.tape->record(std::move(y), {x, w}, [x, w, batch, ci, co, in, no, table, im2col](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        const ConstRowMap<Scalar> wm(w.value().ptr(), co, ci * 27);
        for (Index n = 0; n < batch; ++n) {
            const ConstRowMap<Scalar> gn(g.slab(n, 0), co, no);
            if (w.requires_grad())
                RowMap<Scalar>(t.grad(w).ptr(), co, ci * 27).noalias() +=
                    gn * im2col(x.value().slab(n, 0), *table).transpose();
            if (x.requires_grad()) {
                const RowMatrix<Scalar> dcol = wm.transpose() * gn;
                Scalar* gx = t.grad(x).slab(n, 0);
                for (Index c = 0; c < ci; ++c) {
                    Scalar* dst = gx + c * in.count();
                    for (Index k = 0; k < 27; ++k) {
                        const Scalar* row = dcol.row(c * 27 + k).data();
                        const Index* idx = table->data() + k * no;
                        for (Index o = 0; o < no; ++o)
                            if (idx[o] >= 0)
                                dst[idx[o]] += row[o];
                    }
                }
            }
        }
    });
}

/// y[n, c, :] = x[n, c, :] + b[c]
template <typename Scalar>
Var<Scalar> add_channel_bias(Var<Scalar> x, Var<Scalar> b)
{
    const auto& xv = x.value();
    const Index batch = xv.dim(0), channels = xv.dim(1), count = xv.spatial().count();
    require(b.value().size() == channels, "add_channel_bias: bias size does not match channels");
    Tensor<Scalar> y = xv;
    for (Index n = 0; n < batch; ++n)
        for (Index c = 0; c < channels; ++c)
            y.data.segment((n * channels + c) * count, count) += b.value().data[c];
    return x.tape->record(std::move(y), {x, b}, [x, b, batch, channels, count](Tape<Scalar>& t) {
        const auto& g = t.upstream().data;
        if (x.requires_grad())
            t.grad(x).data += g;
        if (b.requires_grad()) {
            auto& gb = t.grad(b).data;
            for (Index n = 0; n < batch; ++n)
                for (Index c = 0; c < channels; ++c)
                    gb[c] += g.segment((n * channels + c) * count, count).sum();
        }
    });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x)
{
    Tensor<Scalar> y(x.shape());
    y.data = x.value().data.max(Scalar(0));
    return x.tape->record(std::move(y), {x}, [x](Tape<Scalar>& t) {
        t.grad(x).data += (x.value().data > Scalar(0)).select(t.upstream().data, Scalar(0));
    });
}

struct BatchNormState {
    bool training = true;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel normalization. Training mode uses batch statistics over (N, D, H, W) and
/// updates the running estimates in place; evaluation mode uses the running estimates.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Tensor<Scalar>& running_mean,
                       Tensor<Scalar>& running_var, const BatchNormState& state)
{
    const auto& xv = x.value();
    const Index batch = xv.dim(0), channels = xv.dim(1), count = xv.spatial().count();
    const Index m = batch * count;
    require(gamma.value().size() == channels && beta.value().size() == channels,
            "batch_norm: parameter size does not match channels");

    Eigen::Array<Scalar, Eigen::Dynamic, 1> mean(channels), invstd(channels);
    for (Index c = 0; c < channels; ++c) {
        if (state.training) {
            double s = 0.0, ss = 0.0;
            for (Index n = 0; n < batch; ++n) {
                const auto seg = xv.data.segment((n * channels + c) * count, count);
                s += double(seg.sum());
            }
            const double mu = s / double(m);
            for (Index n = 0; n < batch; ++n) {
                const auto seg = xv.data.segment((n * channels + c) * count, count);
                ss += double((seg - Scalar(mu)).square().sum());
            }
            const double var = ss / double(m);
            mean[c] = Scalar(mu);
            invstd[c] = Scalar(1.0 / std::sqrt(var + state.eps));
            const double unbiased = m > 1 ? ss / double(m - 1) : var;
            running_mean.data[c] = Scalar((1.0 - state.momentum) * double(running_mean.data[c]) + state.momentum * mu);
            running_var.data[c] =
                Scalar((1.0 - state.momentum) * double(running_var.data[c]) + state.momentum * unbiased);
        } else {
            mean[c] = running_mean.data[c];
            invstd[c] = Scalar(1.0 / std::sqrt(double(running_var.data[c]) + state.eps));
        }
    }

    Tensor<Scalar> y(xv.shape);
    for (Index n = 0; n < batch; ++n) {
        for (Index c = 0; c < channels; ++c) {
            const Index off = (n * channels + c) * count;
            y.data.segment(off, count) = (xv.data.segment(off, count) - mean[c]) * (invstd[c] * gamma.value().data[c]) +
                                         beta.value().data[c];
        }
    }

    const bool training = state.training;
    return x.tape->record(std::move(y), {x, gamma, beta},
                          [x, gamma, beta, mean, invstd, batch, channels, count, m, training](Tape<Scalar>& t) {
        const auto& g = t.upstream().data;
        const auto& xv = x.value().data;
        for (Index c = 0; c < channels; ++c) {
            Scalar sum_g(0), sum_gx(0);
            for (Index n = 0; n < batch; ++n) {
                const Index off = (n * channels + c) * count;
                const auto gs = g.segment(off, count);
                sum_g += gs.sum();
                sum_gx += (gs * (xv.segment(off, count) - mean[c])).sum();
            }
            sum_gx *= invstd[c];
            if (gamma.requires_grad())
                t.grad(gamma).data[c] += sum_gx;
            if (beta.requires_grad())
                t.grad(beta).data[c] += sum_g;
            if (!x.requires_grad())
                continue;
            const Scalar k = gamma.value().data[c] * invstd[c];
            auto& gx = t.grad(x).data;
            for (Index n = 0; n < batch; ++n) {
                const Index off = (n * channels + c) * count;
                if (training) {
                    const auto xhat = ((xv.segment(off, count) - mean[c]) * invstd[c]).eval();
                    gx.segment(off, count) +=
                        (k / Scalar(m)) * (Scalar(m) * g.segment(off, count) - sum_g - xhat * sum_gx);
                } else {
                    gx.segment(off, count) += k * g.segment(off, count);
                }
            }
        }
    });
}

/// Precomputed trilinear taps mapping a source grid onto a target grid.
template <typename Scalar>
struct Stencil {
    Dims source;
    Dims target;
    std::vector<Trilinear<Scalar>> taps;
    std::vector<std::uint8_t> valid;

    /// coord(p) gives the source-grid sample point for target voxel p.
    template <typename CoordFn>
    static std::shared_ptr<const Stencil> build(const Dims& source, const Dims& target, CoordFn&& coord)
    {
        auto s = std::make_shared<Stencil>();
        s->source = source;
        s->target = target;
        s->taps.resize(std::size_t(target.count()));
        s->valid.resize(std::size_t(target.count()));
        for_each_voxel(target, [&](Index flat, const Vec3& p) {
            const Vec3 q = coord(p);
            s->taps[std::size_t(flat)] = trilinear_at<Scalar>(source, q);
            s->valid[std::size_t(flat)] = inside_domain(source, q) ? 1 : 0;
        });
        return s;
    }
};

/// Channel-wise linear resampling of (N, C, source) onto (N, C, target), optionally scaled.
template <typename Scalar>
Var<Scalar> resample(Var<Scalar> x, std::shared_ptr<const Stencil<Scalar>> stencil, Scalar factor = Scalar(1))
{
    const auto& xv = x.value();
    require(xv.spatial() == stencil->source, "resample: input extent does not match stencil source");
    const Index batch = xv.dim(0), channels = xv.dim(1);
    const Index nout = stencil->target.count();
    Tensor<Scalar> y(spatial_shape(batch, channels, stencil->target));
    for (Index n = 0; n < batch; ++n) {
        for (Index c = 0; c < channels; ++c) {
            const Scalar* src = xv.slab(n, c);
            Scalar* dst = y.slab(n, c);
            for (Index o = 0; o < nout; ++o)
                dst[o] = factor * stencil->taps[std::size_t(o)].sample(src);
        }
    }
    return x.tape->record(std::move(y), {x}, [x, stencil, batch, channels, nout, factor](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        auto& gx = t.grad(x);
        for (Index n = 0; n < batch; ++n) {
            for (Index c = 0; c < channels; ++c) {
                const Scalar* src = g.slab(n, c);
                Scalar* dst = gx.slab(n, c);
                for (Index o = 0; o < nout; ++o) {
                    const auto& tap = stencil->taps[std::size_t(o)];
                    const Scalar go = factor * src[o];
                    for (int k = 0; k < 8; ++k)
                        dst[tap.index[k]] += tap.weight[k] * go;
                }
            }
        }
    });
}

/// out[n, c, p] = x[n, c, p + u[n, :, p]] (trilinear, border clamp); differentiable in x and u.
template <typename Scalar>
Var<Scalar> warp_sample(Var<Scalar> x, Var<Scalar> u)
{
    const auto& xv = x.value();
    const auto& uv = u.value();
    const Dims dims = xv.spatial();
    require(uv.spatial() == dims && uv.dim(1) == 3 && uv.dim(0) == xv.dim(0), "warp_sample: field does not match input");
    const Index batch = xv.dim(0), channels = xv.dim(1), count = dims.count();

    Tensor<Scalar> y(xv.shape);
    for (Index n = 0; n < batch; ++n) {
        const Scalar* un = uv.slab(n, 0);
        for_each_voxel(dims, [&](Index flat, const Vec3& p) {
            const Vec3 q = p + Vec3(double(un[flat]), double(un[count + flat]), double(un[2 * count + flat]));
            const auto tap = trilinear_at<Scalar>(dims, q);
            for (Index c = 0; c < channels; ++c)
                y.slab(n, c)[flat] = tap.sample(xv.slab(n, c));
        });
    }

    return x.tape->record(std::move(y), {x, u}, [x, u, dims, batch, channels, count](Tape<Scalar>& t) {
        const auto& g = t.upstream();
        const auto& xv = x.value();
        for (Index n = 0; n < batch; ++n) {
            const Scalar* un = u.value().slab(n, 0);
            for_each_voxel(dims, [&](Index flat, const Vec3& p) {
                const Vec3 q = p + Vec3(double(un[flat]), double(un[count + flat]), double(un[2 * count + flat]));
                const auto tap = trilinear_at<Scalar>(dims, q);
                if (x.requires_grad()) {
                    auto& gx = t.grad(x);
                    for (Index c = 0; c < channels; ++c) {
                        const Scalar go = g.slab(n, c)[flat];
                        Scalar* dst = gx.slab(n, c);
                        for (int k = 0; k < 8; ++k)
                            dst[tap.index[k]] += tap.weight[k] * go;
                    }
                }
                if (!u.requires_grad())
                    return;
                // d sample / d coord per axis; zero where the coordinate is clamped.
                std::array<detail::AxisSample, 3> ax{detail::clamp_axis(q[0], dims.d), detail::clamp_axis(q[1], dims.h),
                                                     detail::clamp_axis(q[2], dims.w)};
                std::array<bool, 3> live{};
                for (int a = 0; a < 3; ++a)
                    live[a] = q[a] >= 0.0 && q[a] <= double(dims[a] - 1);
                std::array<Scalar, 3> dcoord{Scalar(0), Scalar(0), Scalar(0)};
                for (Index c = 0; c < channels; ++c) {
                    const Scalar go = g.slab(n, c)[flat];
                    if (go == Scalar(0))
                        continue;
                    const Scalar* v = xv.slab(n, c);
                    Scalar corner[2][2][2];
                    int idx = 0;
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int e = 0; e < 2; ++e)
                                corner[a][b][e] = v[tap.index[idx++]];
                    const Scalar fz(ax[0].frac), fy(ax[1].frac), fx(ax[2].frac);
                    Scalar dz(0), dy(0), dx(0);
                    for (int b = 0; b < 2; ++b)
                        for (int e = 0; e < 2; ++e)
                            dz += (corner[1][b][e] - corner[0][b][e]) * (b ? fy : Scalar(1) - fy) * (e ? fx : Scalar(1) - fx);
                    for (int a = 0; a < 2; ++a)
                        for (int e = 0; e < 2; ++e)
                            dy += (corner[a][1][e] - corner[a][0][e]) * (a ? fz : Scalar(1) - fz) * (e ? fx : Scalar(1) - fx);
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            dx += (corner[a][b][1] - corner[a][b][0]) * (a ? fz : Scalar(1) - fz) * (b ? fy : Scalar(1) - fy);
                    dcoord[0] += go * dz;
                    dcoord[1] += go * dy;
                    dcoord[2] += go * dx;
                }
                Scalar* gu = t.grad(u).slab(n, 0);
                for (int a = 0; a < 3; ++a)
                    if (live[a])
                        gu[a * count + flat] += dcoord[a];
            });
        }
    });
}

/// Rows of feature vectors x[n, :, loc] for the given flat locations; result shape (L, C).
template <typename Scalar>
Var<Scalar> gather_locations(Var<Scalar> x, Index n, std::shared_ptr<const std::vector<Index>> locations)
{
    const auto& xv = x.value();
    const Index channels = xv.dim(1);
    const Index rows = static_cast<Index>(locations->size());
    Tensor<Scalar> y({rows, channels});
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < channels; ++c)
            y.data[r * channels + c] = xv.slab(n, c)[(*locations)[std::size_t(r)]];
    return x.tape->record(std::move(y), {x}, [x, n, locations, rows, channels](Tape<Scalar>& t) {
        const auto& g = t.upstream().data;
        auto& gx = t.grad(x);
        for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < channels; ++c)
                gx.slab(n, c)[(*locations)[std::size_t(r)]] += g[r * channels + c];
    });
}

} // namespace eqreg
