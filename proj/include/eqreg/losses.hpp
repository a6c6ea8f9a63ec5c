#pragma once

// Registration MSE, dense InfoNCE and the joint objective.

#include "eqreg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace eqreg {

struct LossWeights {
    double alpha = 1.0;
    double tau = 0.1;

    void validate() const
    {
        require(alpha >= 0.0, "contrastive weight alpha must be >= 0");
        require(tau > 0.0, "temperature tau must be > 0");
    }
};

inline constexpr double kNormFloor = 1e-8;

/// Mean over voxels and components of (pred - pseudo)^2.
template <typename Scalar>
double registration_loss(const DisplacementField<Scalar>& pred, const DisplacementField<Scalar>& pseudo)
{
    require(pred.dims == pseudo.dims, "registration_loss: shape mismatch");
    return (pred.data.template cast<double>() - pseudo.data.template cast<double>()).square().mean();
}

namespace detail {

/// Row-wise x / max(||x||, eps); returns the norms used.
template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, 1> normalize_rows(const RowMatrix<Scalar>& x, RowMatrix<Scalar>& out)
{
    Eigen::Array<Scalar, Eigen::Dynamic, 1> r = x.rowwise().norm().array().max(Scalar(kNormFloor));
    out = (x.array().colwise() / r).matrix();
    return r;
}

/// Backward of normalize_rows: dx = (da - a <a, da>) / r, or da / eps on the floor.
template <typename Scalar>
RowMatrix<Scalar> normalize_rows_backward(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& a,
                                          const Eigen::Array<Scalar, Eigen::Dynamic, 1>& r, const RowMatrix<Scalar>& da)
{
    RowMatrix<Scalar> dx(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        if (x.row(i).norm() > Scalar(kNormFloor))
            dx.row(i) = (da.row(i) - a.row(i) * a.row(i).dot(da.row(i))) / r[i];
        else
            dx.row(i) = da.row(i) / r[i];
    }
    return dx;
}

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Array<Scalar, Eigen::Dynamic, 1>& v)
{
    const Scalar m = v.maxCoeff();
    return m + std::log((v - m).exp().sum());
}

} // namespace detail

/// InfoNCE over (n, C) anchors A and positives B.
///
/// For anchor j the logits are <a_j, b_l>/tau for every l and <a_j, a_l>/tau for l != j,
/// so each anchor sees one positive and 2(n-1) negatives. Rows are L2-normalized first.
/// L = Σ_j (logsumexp_j - <a_j, b_j>/tau).
template <typename Scalar>
Var<Scalar> info_nce(Var<Scalar> va, Var<Scalar> vb, double tau)
{
    const auto& av = va.value();
    const auto& bv = vb.value();
    require(av.rank() == 2 && av.shape == bv.shape, "info_nce: A and B must be equal (n, C) arrays");
    require(av.dim(0) >= 1, "info_nce: needs at least one sample");
    require(tau > 0.0, "info_nce: tau must be > 0");
    const Index n = av.dim(0), c = av.dim(1);
    const Scalar inv_tau = Scalar(1.0 / tau);

    struct Saved {
        RowMatrix<Scalar> a, b;
        Eigen::Array<Scalar, Eigen::Dynamic, 1> ra, rb;
        RowMatrix<Scalar> p_ab, p_aa;
    };
    auto s = std::make_shared<Saved>();
    const RowMatrix<Scalar> xa = ConstRowMap<Scalar>(av.ptr(), n, c);
    const RowMatrix<Scalar> xb = ConstRowMap<Scalar>(bv.ptr(), n, c);
    s->ra = detail::normalize_rows(xa, s->a);
    s->rb = detail::normalize_rows(xb, s->b);
    const RowMatrix<Scalar> sab = (s->a * s->b.transpose()) * inv_tau;
    const RowMatrix<Scalar> saa = (s->a * s->a.transpose()) * inv_tau;

    s->p_ab.resize(n, n);
    s->p_aa.setZero(n, n);
    Scalar loss(0);
    Eigen::Array<Scalar, Eigen::Dynamic, 1> logits(2 * n - 1);
    for (Index j = 0; j < n; ++j) {
        logits.head(n) = sab.row(j).transpose().array();
        Index k = n;
        for (Index l = 0; l < n; ++l)
            if (l != j)
                logits[k++] = saa(j, l);
        const Scalar lse = detail::log_sum_exp(logits);
        loss += lse - sab(j, j);
        s->p_ab.row(j) = (sab.row(j).array() - lse).exp().matrix();
        for (Index l = 0; l < n; ++l)
            if (l != j)
                s->p_aa(j, l) = std::exp(saa(j, l) - lse);
    }

    Tensor<Scalar> out({1});
    out.data[0] = loss;
    return va.tape->record(std::move(out), {va, vb}, [va, vb, s, n, c, inv_tau](Tape<Scalar>& t) {
        const Scalar g = t.upstream().data[0];
        RowMatrix<Scalar> gab = s->p_ab;
        gab.diagonal().array() -= Scalar(1);
        const RowMatrix<Scalar>& gaa = s->p_aa;
        if (va.requires_grad()) {
            const RowMatrix<Scalar> da = (gab * s->b + (gaa + gaa.transpose()) * s->a) * (g * inv_tau);
            const RowMatrix<Scalar> xa = ConstRowMap<Scalar>(va.value().ptr(), n, c);
            RowMap<Scalar>(t.grad(va).ptr(), n, c) += detail::normalize_rows_backward(xa, s->a, s->ra, da);
        }
        if (vb.requires_grad()) {
            const RowMatrix<Scalar> db = (gab.transpose() * s->a) * (g * inv_tau);
            const RowMatrix<Scalar> xb = ConstRowMap<Scalar>(vb.value().ptr(), n, c);
            RowMap<Scalar>(t.grad(vb).ptr(), n, c) += detail::normalize_rows_backward(xb, s->b, s->rb, db);
        }
    });
}

/// Feature vectors from corresponding locations of two maps.
template <typename Scalar>
struct SampledFeatureSet {
    RowMatrix<Scalar> vectors_a;
    RowMatrix<Scalar> vectors_b;
    std::vector<Eigen::Vector3i> locations;

    Index size() const { return vectors_a.rows(); }
};

template <typename Scalar>
double info_nce(const SampledFeatureSet<Scalar>& samples, double tau)
{
    require(samples.vectors_a.rows() == samples.vectors_b.rows() && samples.vectors_a.cols() == samples.vectors_b.cols(),
            "info_nce: A and B differ in shape");
    const Index n = samples.vectors_a.rows(), c = samples.vectors_a.cols();
    Tape<Scalar> tape;
    Tensor<Scalar> a({n, c}), b({n, c});
    RowMap<Scalar>(a.ptr(), n, c) = samples.vectors_a;
    RowMap<Scalar>(b.ptr(), n, c) = samples.vectors_b;
    return double(info_nce(tape.constant(std::move(a)), tape.constant(std::move(b)), tau).value().data[0]);
}

struct LocationSample {
    std::vector<Index> flat;   // raster-ordered flat indices
    Index requested = 0;
    std::string diagnostic;    // non-empty when fewer than `requested` were available

    Index size() const { return static_cast<Index>(flat.size()); }
    std::vector<Eigen::Vector3i> coords(const Dims& dims) const
    {
        std::vector<Eigen::Vector3i> out;
        out.reserve(flat.size());
        for (Index f : flat)
            out.emplace_back(int(f / (dims.h * dims.w)), int((f / dims.w) % dims.h), int(f % dims.w));
        return out;
    }
};

/// Uniform sample of n valid voxels without replacement, deterministic in seed.
inline LocationSample sample_locations(const std::vector<std::uint8_t>& mask, Index n, std::uint64_t seed)
{
    require(n >= 1, "sample_locations: n must be >= 1");
    LocationSample out;
    out.requested = n;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i])
            out.flat.push_back(Index(i));
    const Index valid = out.size();
    if (valid <= n) {
        if (valid < n)
            out.diagnostic = "requested " + std::to_string(n) + " locations, only " + std::to_string(valid) + " valid";
        return out;
    }
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < n; ++i) {
        std::uniform_int_distribution<Index> pick(i, valid - 1);
        std::swap(out.flat[std::size_t(i)], out.flat[std::size_t(pick(rng))]);
    }
    out.flat.resize(std::size_t(n));
    std::sort(out.flat.begin(), out.flat.end());
    return out;
}

/// L_reg + alpha (L_c,fixed + L_c,moving)
inline double total_loss(double l_reg, double l_c_fixed, double l_c_moving, const LossWeights& w)
{
    return l_reg + w.alpha * (l_c_fixed + l_c_moving);
}

} // namespace eqreg
