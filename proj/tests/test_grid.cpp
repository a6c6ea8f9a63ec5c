#include "eqreg/grid.hpp"

#include <doctest.h>

#include <random>

using namespace eqreg;

namespace {

Volume<double> ramp(const Dims& d, int axis, double slope = 1.0)
{
    Volume<double> v(d);
    for_each_voxel(d, [&](Index flat, const Vec3& p) { v.data[flat] = slope * p[axis]; });
    return v;
}

Volume<double> smooth_noise(const Dims& d, std::uint64_t seed, double sigma = 2.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Volume<double> v(d);
    for (Index i = 0; i < v.data.size(); ++i)
        v.data[i] = n(rng);
    return gaussian_smooth(v, sigma);
}

DisplacementField<double> smooth_field(const Dims& d, std::uint64_t seed, double amplitude)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    DisplacementField<double> u(d);
    for (Index i = 0; i < u.data.size(); ++i)
        u.data[i] = n(rng);
    u = gaussian_smooth(u, 3.0);
    u.data *= amplitude / u.data.abs().maxCoeff();
    return u;
}

DisplacementField<double> uniform(const Dims& d, const Vec3& t)
{
    DisplacementField<double> u(d);
    for (Index i = 0; i < d.count(); ++i)
        u.set(i, t);
    return u;
}

DisplacementField<double> linear_field(const Dims& d, const Eigen::Matrix3d& a, const Vec3& b)
{
    DisplacementField<double> u(d);
    for_each_voxel(d, [&](Index flat, const Vec3& p) { u.set(flat, a * p + b); });
    return u;
}

bool interior(const Dims& d, const Vec3& p, Index margin)
{
    for (int a = 0; a < 3; ++a)
        if (p[a] < double(margin) || p[a] > double(d[a] - 1 - margin))
            return false;
    return true;
}

double interior_rms(const Volume<double>& a, const Volume<double>& b, Index margin)
{
    double acc = 0.0;
    Index n = 0;
    for_each_voxel(a.dims, [&](Index flat, const Vec3& p) {
        if (interior(a.dims, p, margin)) {
            acc += (a.data[flat] - b.data[flat]) * (a.data[flat] - b.data[flat]);
            ++n;
        }
    });
    return std::sqrt(acc / double(n));
}

AffineTransform random_affine(std::mt19937_64& rng, const Dims& d)
{
    std::uniform_real_distribution<double> u(-0.1, 0.1), t(-1.5, 1.5);
    AffineTransform out;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            out.linear(r, c) += u(rng);
    const Vec3 centre(double(d.d - 1) / 2, double(d.h - 1) / 2, double(d.w - 1) / 2);
    out.translation = centre - out.linear * centre + Vec3(t(rng), t(rng), t(rng));
    return out;
}

} // namespace

TEST_CASE("warp: zero field is the identity")
{
    const Dims d{7, 8, 9};
    const auto img = smooth_noise(d, 1);
    CHECK((warp(img, DisplacementField<double>(d)).data == img.data).all());
}

TEST_CASE("warp: constant image is invariant under any finite field")
{
    const Dims d{6, 6, 6};
    const Volume<double> img(d, 2.5);
    auto u = smooth_field(d, 2, 9.0);
    CHECK((warp(img, u).data - 2.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("warp: ramp shifted by a uniform field")
{
    const Dims d{8, 8, 8};
    const auto img = ramp(d, 0);
    const auto out = warp(img, uniform(d, Vec3(1, 0, 0)));
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        if (p[0] < 7)
            CHECK(out.data[flat] == doctest::Approx(p[0] + 1));
    });
}

TEST_CASE("warp: mismatched shapes are rejected")
{
    CHECK_THROWS_AS(warp(Volume<double>(Dims{4, 4, 4}), DisplacementField<double>(Dims{4, 4, 5})), ContractError);
}

TEST_CASE("warp_labels: nearest neighbour keeps labels integral")
{
    const Dims d{6, 6, 6};
    LabelMap l(d);
    for (Index i = 0; i < d.count(); ++i)
        l.labels[i] = std::int32_t(i % 3) * 5;
    const auto out = warp_labels(l, smooth_field(d, 3, 1.3));
    for (Index i = 0; i < d.count(); ++i)
        CHECK(out.labels[i] % 5 == 0);
}

TEST_CASE("compose: identities and translation group")
{
    const Dims d{6, 7, 8};
    const auto u = smooth_field(d, 4, 1.5);
    const DisplacementField<double> zero(d);
    CHECK((compose(u, zero).data - u.data).abs().maxCoeff() < 1e-12);
    CHECK((compose(zero, u).data - u.data).abs().maxCoeff() < 1e-12);

    const auto ab = compose(uniform(d, Vec3(0.5, -1, 0.25)), uniform(d, Vec3(1, 0.5, -0.5)));
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        if (interior(d, p, 2))
            CHECK((ab.at(flat) - Vec3(1.5, -0.5, -0.25)).norm() < 1e-12);
    });
}

TEST_CASE("compose: successive warps match one warp by the composition")
{
    const Dims d{20, 20, 20};
    const auto img = smooth_noise(d, 5, 2.5);
    const auto inner = smooth_field(d, 6, 1.5);
    const auto outer = smooth_field(d, 7, 1.5);
    const auto twice = warp(warp(img, outer), inner);
    const auto once = warp(img, compose(outer, inner));
    const double scale = img.data.abs().maxCoeff();
    CHECK(interior_rms(twice, once, 3) / scale < 1e-2);
}

TEST_CASE("compose: associative within interpolation tolerance")
{
    const Dims d{16, 16, 16};
    const auto a = smooth_field(d, 8, 1.0), b = smooth_field(d, 9, 1.0), c = smooth_field(d, 10, 1.0);
    const auto left = compose(compose(a, b), c);
    const auto right = compose(a, compose(b, c));
    CHECK(std::sqrt((left.data - right.data).square().mean()) < 1e-2);
}

TEST_CASE("apply_affine_to_volume: identity, translation and scaling")
{
    const Dims d{8, 9, 10};
    const auto img = smooth_noise(d, 11);
    CHECK((apply_affine_to_volume(img, AffineTransform::identity()).data - img.data).abs().maxCoeff() < 1e-12);

    const auto shifted = apply_affine_to_volume(img, AffineTransform::shift(Vec3(1, 2, -1)));
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        if (p[0] + 1 < 8 && p[1] + 2 < 9 && p[2] - 1 >= 0)
            CHECK(shifted.data[flat] == doctest::Approx(img(Index(p[0]) + 1, Index(p[1]) + 2, Index(p[2]) - 1)));
    });

    const AffineTransform scale2{2.0 * Eigen::Matrix3d::Identity(), Vec3::Zero()};
    const auto scaled = apply_affine_to_volume(ramp(d, 0), scale2);
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        if (2 * p[0] <= 7)
            CHECK(scaled.data[flat] == doctest::Approx(2 * p[0]));
    });

    AffineTransform singular;
    singular.linear.setZero();
    CHECK_THROWS_AS(apply_affine_to_volume(img, singular), ContractError);
}

TEST_CASE("affine_to_field: closed forms")
{
    const Dims d{4, 4, 4};
    CHECK(affine_to_field<double>(AffineTransform::identity(), d).data.abs().maxCoeff() == 0.0);
    const auto t = affine_to_field<double>(AffineTransform::shift(Vec3(1, -2, 3)), d);
    CHECK((t.at(d.flat(2, 1, 3)) - Vec3(1, -2, 3)).norm() < 1e-15);
    const auto s = affine_to_field<double>({2.0 * Eigen::Matrix3d::Identity(), Vec3::Zero()}, d);
    CHECK((s.at(d.flat(1, 1, 1)) - Vec3(1, 1, 1)).norm() < 1e-15);
}

TEST_CASE("property: warp by affine_to_field equals apply_affine_to_volume")
{
    const Dims d{12, 12, 12};
    std::mt19937_64 rng(12);
    const auto img = smooth_noise(d, 13);
    for (int trial = 0; trial < 10; ++trial) {
        const auto t = random_affine(rng, d);
        const auto a = warp(img, affine_to_field<double>(t, d));
        const auto b = apply_affine_to_volume(img, t);
        double worst = 0.0;
        for_each_voxel(d, [&](Index flat, const Vec3& p) {
            if (interior(d, p, 2))
                worst = std::max(worst, std::abs(a.data[flat] - b.data[flat]));
        });
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("jacobian_determinant: closed forms")
{
    const Dims d{7, 7, 7};
    CHECK((jacobian_determinant(DisplacementField<double>(d)).data - 1.0).abs().maxCoeff() < 1e-15);
    CHECK((jacobian_determinant(uniform(d, Vec3(0.3, -2, 1))).data - 1.0).abs().maxCoeff() < 1e-12);

    const auto scale = jacobian_determinant(linear_field(d, 0.5 * Eigen::Matrix3d::Identity(), Vec3::Zero()));
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        if (interior(d, p, 1))
            CHECK(scale.data[flat] == doctest::Approx(3.375).epsilon(1e-12));
    });
}

TEST_CASE("property: jacobian exact on random affine fields")
{
    const Dims d{6, 7, 8};
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::Matrix3d a;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                a(r, c) = u(rng);
        const Vec3 b(u(rng), u(rng), u(rng));
        const double expected = (Eigen::Matrix3d::Identity() + a).determinant();
        const auto det = jacobian_determinant(linear_field(d, a, b));
        // One-sided differences are exact on linear fields too, so the whole grid qualifies.
        CHECK((det.data - expected).abs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("upsample_field and subsample_field round-trip a uniform field")
{
    const Dims fine{16, 16, 16};
    const auto u = uniform(fine, Vec3(2, -1, 0.5));
    const auto coarse = subsample_field(u, 4, 0.25);
    const auto back = upsample_field(coarse, 4.0, 4.0, fine);
    CHECK((back.data - u.data).abs().maxCoeff() < 1e-12);
}
