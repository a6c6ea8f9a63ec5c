#pragma once

// Synthetic inputs shared by the unit tests and the acceptance runner.

#include "eqreg/nets.hpp"

#include <random>

namespace eqreg::testing {

/// C channels of Gaussian-smoothed white noise, normalized to unit variance.
template <typename Scalar>
FeatureMap<Scalar> smooth_features(Index channels, const Dims& dims, std::uint64_t seed, double sigma = 1.5,
                                   Index stride = 1)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    FeatureMap<Scalar> f{Tensor<Scalar>(spatial_shape(1, channels, dims)), stride};
    for (Index c = 0; c < channels; ++c) {
        Volume<double> v(dims);
        for (Index i = 0; i < v.data.size(); ++i)
            v.data[i] = n(rng);
        v = gaussian_smooth(v, sigma);
        const double mean = v.data.mean();
        const double sd = std::sqrt((v.data - mean).square().mean());
        for (Index i = 0; i < v.data.size(); ++i)
            f.values.slab(0, c)[i] = Scalar((v.data[i] - mean) / sd);
    }
    return f;
}

/// out(x) = f(x - shift), so out(p + shift) = f(p) and the displacement from f to out is +shift.
template <typename Scalar>
FeatureMap<Scalar> shifted(const FeatureMap<Scalar>& f, const Vec3& shift)
{
    return transform_featuremap(AffineTransform::shift(-shift), f).features;
}

inline bool in_interior(const Dims& dims, const Vec3& p, Index margin)
{
    for (int a = 0; a < 3; ++a)
        if (p[a] < double(margin) || p[a] > double(dims[a] - 1 - margin))
            return false;
    return true;
}

/// Mean |u(p) - expected| over voxels at least `margin` from every face.
template <typename Scalar>
double mean_interior_error(const DisplacementField<Scalar>& u, const Vec3& expected, Index margin)
{
    double acc = 0.0;
    Index n = 0;
    for_each_voxel(u.dims, [&](Index flat, const Vec3& p) {
        if (in_interior(u.dims, p, margin)) {
            acc += (u.at(flat).template cast<double>() - expected).norm();
            ++n;
        }
    });
    return n ? acc / double(n) : 0.0;
}

} // namespace eqreg::testing
