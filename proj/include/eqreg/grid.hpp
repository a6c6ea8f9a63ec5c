#pragma once

// Volumes, displacement fields and affine transforms in voxel-index space.
//
// Conventions: coordinates are (i, j, k) along (D, H, W); displacements are
// in voxels of the grid they are defined on; all resampling is pull-back,
// out(p) = in(p + u(p)), with border-clamp extension outside the domain.

#include "eqreg/common.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <vector>

namespace eqreg {

enum class Interpolation { trilinear, nearest };

using Vec3 = Eigen::Vector3d;

template <typename Scalar>
struct Volume {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    Dims dims;
    Vec3 spacing = Vec3::Ones();
    Array data;

    Volume() = default;
    explicit Volume(const Dims& d, Scalar fill = Scalar(0), const Vec3& sp = Vec3::Ones())
        : dims(d), spacing(sp), data(Array::Constant(d.count(), fill))
    {
    }

    Scalar& operator()(Index i, Index j, Index k) { return data[dims.flat(i, j, k)]; }
    Scalar operator()(Index i, Index j, Index k) const { return data[dims.flat(i, j, k)]; }

    void validate() const
    {
        require(dims.d >= 2 && dims.h >= 2 && dims.w >= 2, "volume extent must be >= 2 per axis, got " + dims.str());
        require(data.size() == dims.count(), "volume data size does not match its extent");
        require(all_finite(data), "volume contains non-finite intensities");
    }

    template <typename Other>
    Volume<Other> cast() const
    {
        Volume<Other> out(dims, Other(0), spacing);
        out.data = data.template cast<Other>();
        return out;
    }
};

/// Per-voxel offsets stored component-major: all of component 0, then 1, then 2.
template <typename Scalar>
struct DisplacementField {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using Vector = Eigen::Matrix<Scalar, 3, 1>;

    Dims dims;
    Array data;

    DisplacementField() = default;
    explicit DisplacementField(const Dims& d) : dims(d), data(Array::Zero(3 * d.count())) {}

    auto component(int c) { return data.segment(c * dims.count(), dims.count()); }
    auto component(int c) const { return data.segment(c * dims.count(), dims.count()); }

    Vector at(Index flat) const
    {
        const Index n = dims.count();
        return {data[flat], data[n + flat], data[2 * n + flat]};
    }

    void set(Index flat, const Vector& v)
    {
        const Index n = dims.count();
        data[flat] = v[0];
        data[n + flat] = v[1];
        data[2 * n + flat] = v[2];
    }

    template <typename Other>
    DisplacementField<Other> cast() const
    {
        DisplacementField<Other> out(dims);
        out.data = data.template cast<Other>();
        return out;
    }
};

struct LabelMap {
    Dims dims;
    Eigen::Array<std::int32_t, Eigen::Dynamic, 1> labels;

    LabelMap() = default;
    explicit LabelMap(const Dims& d) : dims(d), labels(Eigen::Array<std::int32_t, Eigen::Dynamic, 1>::Zero(d.count())) {}
};

/// x -> linear * x + translation, acting on voxel coordinates.
struct AffineTransform {
    Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
    Vec3 translation = Vec3::Zero();

    static AffineTransform identity() { return {}; }
    static AffineTransform shift(const Vec3& t) { return {Eigen::Matrix3d::Identity(), t}; }

    Vec3 operator()(const Vec3& p) const { return linear * p + translation; }

    bool invertible() const { return std::abs(linear.determinant()) > 1e-12; }

    bool is_identity() const { return linear == Eigen::Matrix3d::Identity() && translation.isZero(0.0); }

    AffineTransform inverse() const
    {
        require(invertible(), "affine transform has a singular linear part");
        const Eigen::Matrix3d inv = linear.inverse();
        return {inv, -(inv * translation)};
    }

    /// (this ∘ inner)(x) = this(inner(x))
    AffineTransform after(const AffineTransform& inner) const
    {
        return {linear * inner.linear, linear * inner.translation + translation};
    }
};

/// Eight corner indices and weights of a trilinear sample with border clamp.
template <typename Scalar>
struct Trilinear {
    std::array<Index, 8> index{};
    std::array<Scalar, 8> weight{};

    Scalar sample(const Scalar* values) const
    {
        Scalar acc(0);
        for (int c = 0; c < 8; ++c)
            acc += weight[c] * values[index[c]];
        return acc;
    }
};

namespace detail {

struct AxisSample {
    Index lo;
    double frac;
};

inline AxisSample clamp_axis(double coord, Index extent)
{
    const double c = std::clamp(coord, 0.0, static_cast<double>(extent - 1));
    Index lo = static_cast<Index>(std::floor(c));
    lo = std::min(lo, extent - 2);
    return {lo, c - static_cast<double>(lo)};
}

inline Index nearest_axis(double coord, Index extent)
{
    const double c = std::clamp(coord, 0.0, static_cast<double>(extent - 1));
    return static_cast<Index>(std::lround(c));
}

} // namespace detail

template <typename Scalar>
Trilinear<Scalar> trilinear_at(const Dims& dims, const Vec3& coord)
{
    const auto z = detail::clamp_axis(coord[0], dims.d);
    const auto y = detail::clamp_axis(coord[1], dims.h);
    const auto x = detail::clamp_axis(coord[2], dims.w);
    const Scalar fz(z.frac), fy(y.frac), fx(x.frac);
    const Scalar gz = Scalar(1) - fz, gy = Scalar(1) - fy, gx = Scalar(1) - fx;

    Trilinear<Scalar> t;
    int c = 0;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            for (int e = 0; e < 2; ++e, ++c) {
                t.index[c] = dims.flat(z.lo + a, y.lo + b, x.lo + e);
                t.weight[c] = (a ? fz : gz) * (b ? fy : gy) * (e ? fx : gx);
            }
        }
    }
    return t;
}

inline Index nearest_at(const Dims& dims, const Vec3& coord)
{
    return dims.flat(detail::nearest_axis(coord[0], dims.d), detail::nearest_axis(coord[1], dims.h),
                     detail::nearest_axis(coord[2], dims.w));
}

inline bool inside_domain(const Dims& dims, const Vec3& coord)
{
    for (int a = 0; a < 3; ++a) {
        if (!(coord[a] >= 0.0 && coord[a] <= static_cast<double>(dims[a] - 1)))
            return false;
    }
    return true;
}

/// Calls fn(flat, p) for every voxel in raster order.
template <typename Fn>
void for_each_voxel(const Dims& dims, Fn&& fn)
{
    Index flat = 0;
    for (Index i = 0; i < dims.d; ++i)
        for (Index j = 0; j < dims.h; ++j)
            for (Index k = 0; k < dims.w; ++k, ++flat)
                fn(flat, Vec3(double(i), double(j), double(k)));
}

/// Resamples `values` (defined on `source`) at coord(p) for every voxel p of `target`.
template <typename Scalar, typename CoordFn>
Eigen::Array<Scalar, Eigen::Dynamic, 1> resample(const Scalar* values, const Dims& source, const Dims& target,
                                                 Interpolation interp, CoordFn&& coord)
{
    Eigen::Array<Scalar, Eigen::Dynamic, 1> out(target.count());
    for_each_voxel(target, [&](Index flat, const Vec3& p) {
        const Vec3 q = coord(flat, p);
        out[flat] = interp == Interpolation::trilinear ? trilinear_at<Scalar>(source, q).sample(values)
                                                       : values[nearest_at(source, q)];
    });
    return out;
}

template <typename Scalar>
Volume<Scalar> warp(const Volume<Scalar>& image, const DisplacementField<Scalar>& field,
                    Interpolation interp = Interpolation::trilinear)
{
    require(image.dims == field.dims, "warp: field extent " + field.dims.str() + " != image extent " + image.dims.str());
    Volume<Scalar> out(field.dims, Scalar(0), image.spacing);
    out.data = resample(image.data.data(), image.dims, field.dims, interp,
                        [&](Index flat, const Vec3& p) { return Vec3(p + field.at(flat).template cast<double>()); });
    return out;
}

template <typename Scalar>
LabelMap warp_labels(const LabelMap& labels, const DisplacementField<Scalar>& field)
{
    require(labels.dims == field.dims, "warp_labels: field extent != label extent");
    LabelMap out(field.dims);
    for_each_voxel(field.dims, [&](Index flat, const Vec3& p) {
        out.labels[flat] = labels.labels[nearest_at(labels.dims, p + field.at(flat).template cast<double>())];
    });
    return out;
}

/// result(p) = inner(p) + outer(p + inner(p)): warping by the result equals warping by inner, then by outer.
template <typename Scalar>
DisplacementField<Scalar> compose(const DisplacementField<Scalar>& outer, const DisplacementField<Scalar>& inner)
{
    require(outer.dims == inner.dims, "compose: field extents differ");
    const Dims dims = inner.dims;
    const Index n = dims.count();
    DisplacementField<Scalar> out(dims);
    for_each_voxel(dims, [&](Index flat, const Vec3& p) {
        const auto u = inner.at(flat);
        const auto t = trilinear_at<Scalar>(dims, p + u.template cast<double>());
        for (int c = 0; c < 3; ++c)
            out.data[c * n + flat] = u[c] + t.sample(outer.data.data() + c * n);
    });
    return out;
}

/// output(q) = image(T(q)).
template <typename Scalar>
Volume<Scalar> apply_affine_to_volume(const Volume<Scalar>& image, const AffineTransform& transform,
                                      Interpolation interp = Interpolation::trilinear)
{
    require(transform.invertible(), "apply_affine_to_volume: singular transform");
    Volume<Scalar> out(image.dims, Scalar(0), image.spacing);
    out.data = resample(image.data.data(), image.dims, image.dims, interp,
                        [&](Index, const Vec3& p) { return transform(p); });
    return out;
}

template <typename Scalar>
DisplacementField<Scalar> affine_to_field(const AffineTransform& transform, const Dims& dims)
{
    require(transform.invertible(), "affine_to_field: singular transform");
    DisplacementField<Scalar> out(dims);
    for_each_voxel(dims, [&](Index flat, const Vec3& p) { out.set(flat, (transform(p) - p).template cast<Scalar>()); });
    return out;
}

/// det(d(p + u(p))/dp); central differences inside, one-sided on the faces.
template <typename Scalar>
Volume<Scalar> jacobian_determinant(const DisplacementField<Scalar>& field)
{
    const Dims dims = field.dims;
    require(dims.d >= 3 && dims.h >= 3 && dims.w >= 3, "jacobian_determinant: extent must be >= 3 per axis");
    const Index n = dims.count();
    const std::array<Index, 3> stride{dims.h * dims.w, dims.w, 1};

    Volume<Scalar> out(dims);
    Index flat = 0;
    for (Index i = 0; i < dims.d; ++i) {
        for (Index j = 0; j < dims.h; ++j) {
            for (Index k = 0; k < dims.w; ++k, ++flat) {
                const std::array<Index, 3> idx{i, j, k};
                Eigen::Matrix3d jac = Eigen::Matrix3d::Identity();
                for (int b = 0; b < 3; ++b) {
                    Index lo = flat, hi = flat;
                    double h = 2.0;
                    if (idx[b] == 0) {
                        hi = flat + stride[b];
                        h = 1.0;
                    } else if (idx[b] == dims[b] - 1) {
                        lo = flat - stride[b];
                        h = 1.0;
                    } else {
                        lo = flat - stride[b];
                        hi = flat + stride[b];
                    }
                    for (int a = 0; a < 3; ++a)
                        jac(a, b) += (double(field.data[a * n + hi]) - double(field.data[a * n + lo])) / h;
                }
                out.data[flat] = Scalar(jac.determinant());
            }
        }
    }
    return out;
}

/// out(x) = scale * coarse(x / factor), trilinear with border clamp.
template <typename Scalar>
DisplacementField<Scalar> upsample_field(const DisplacementField<Scalar>& coarse, double factor, double scale,
                                         const Dims& target)
{
    DisplacementField<Scalar> out(target);
    const Index n = target.count(), m = coarse.dims.count();
    for_each_voxel(target, [&](Index flat, const Vec3& p) {
        const auto t = trilinear_at<Scalar>(coarse.dims, p / factor);
        for (int c = 0; c < 3; ++c)
            out.data[c * n + flat] = Scalar(scale) * t.sample(coarse.data.data() + c * m);
    });
    return out;
}

/// coarse(i) = scale * fine(factor * i), clamped; extent is ceil(fine / factor).
template <typename Scalar>
DisplacementField<Scalar> subsample_field(const DisplacementField<Scalar>& fine, Index factor, double scale)
{
    const Dims target = ceil_div(fine.dims, factor);
    DisplacementField<Scalar> out(target);
    const Index n = target.count(), m = fine.dims.count();
    for_each_voxel(target, [&](Index flat, const Vec3& p) {
        const Index src = nearest_at(fine.dims, p * double(factor));
        for (int c = 0; c < 3; ++c)
            out.data[c * n + flat] = Scalar(scale) * fine.data[c * m + src];
    });
    return out;
}

/// Separable Gaussian filter with border clamp; sigma in voxels, 0 returns a copy.
template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, 1> gaussian_smooth(const Eigen::Array<Scalar, Eigen::Dynamic, 1>& values,
                                                        const Dims& dims, double sigma)
{
    if (sigma <= 0.0)
        return values;
    const Index radius = std::max<Index>(1, static_cast<Index>(std::ceil(3.0 * sigma)));
    Eigen::ArrayXd kernel(2 * radius + 1);
    for (Index t = -radius; t <= radius; ++t)
        kernel[t + radius] = std::exp(-0.5 * double(t * t) / (sigma * sigma));
    kernel /= kernel.sum();

    Eigen::ArrayXd cur = values.template cast<double>();
    Eigen::ArrayXd next(cur.size());
    const std::array<Index, 3> stride{dims.h * dims.w, dims.w, 1};
    for (int axis = 0; axis < 3; ++axis) {
        Index flat = 0;
        for (Index i = 0; i < dims.d; ++i) {
            for (Index j = 0; j < dims.h; ++j) {
                for (Index k = 0; k < dims.w; ++k, ++flat) {
                    const Index pos = axis == 0 ? i : (axis == 1 ? j : k);
                    double acc = 0.0;
                    for (Index t = -radius; t <= radius; ++t) {
                        const Index q = std::clamp<Index>(pos + t, 0, dims[axis] - 1);
                        acc += kernel[t + radius] * cur[flat + (q - pos) * stride[axis]];
                    }
                    next[flat] = acc;
                }
            }
        }
        std::swap(cur, next);
    }
    return cur.cast<Scalar>();
}

template <typename Scalar>
Volume<Scalar> gaussian_smooth(const Volume<Scalar>& image, double sigma)
{
    Volume<Scalar> out = image;
    out.data = gaussian_smooth<Scalar>(image.data, image.dims, sigma);
    return out;
}

template <typename Scalar>
DisplacementField<Scalar> gaussian_smooth(const DisplacementField<Scalar>& field, double sigma)
{
    DisplacementField<Scalar> out(field.dims);
    for (int c = 0; c < 3; ++c)
        out.component(c) = gaussian_smooth<Scalar>(field.component(c).eval(), field.dims, sigma);
    return out;
}

} // namespace eqreg
