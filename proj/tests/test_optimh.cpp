#include "eqreg/optimh.hpp"

#include "fd_check.hpp"
#include "fixtures.hpp"

#include <doctest.h>

using namespace eqreg;
using namespace eqreg::testing;

namespace {

SolverConfig config(Index r, Index s, int kcc, double beta = 0.05, double lambda = 1.0)
{
    SolverConfig c;
    c.radius = r;
    c.grid_stride = s;
    c.coupling_iters = kcc;
    c.beta = beta;
    c.lambda = lambda;
    return c;
}

CostVolume<double> single_point_costs(const SolverConfig& cfg, const std::vector<std::vector<double>>& per_point)
{
    CostVolume<double> cv;
    cv.costs = Tensor<double>({1, cfg.offsets(), 1, 1, Index(per_point.size())});
    for (std::size_t p = 0; p < per_point.size(); ++p)
        for (Index k = 0; k < cfg.offsets(); ++k)
            cv.costs.slab(0, k)[p] = per_point[p][std::size_t(k)];
    cv.radius = cfg.radius;
    cv.grid_stride = cfg.grid_stride;
    return cv;
}

Index offset_index(const Eigen::Vector3i& d, Index r)
{
    const Index w = 2 * r + 1;
    return (d[0] + r) * w * w + (d[1] + r) * w + (d[2] + r);
}

} // namespace

TEST_CASE("window offsets enumerate the cube with the first axis slowest")
{
    CHECK(window_offset(0, 1) == Eigen::Vector3i(-1, -1, -1));
    CHECK(window_offset(1, 1) == Eigen::Vector3i(-1, -1, 0));
    CHECK(window_offset(13, 1) == Eigen::Vector3i(0, 0, 0));
    CHECK(window_offset(26, 1) == Eigen::Vector3i(1, 1, 1));
    for (Index k = 0; k < 343; ++k)
        CHECK(offset_index(window_offset(k, 3), 3) == k);
}

TEST_CASE("cost volume: identical maps, constant maps, shape")
{
    const auto cfg = config(2, 2, 3);
    const auto f = smooth_features<double>(3, {10, 9, 8}, 1);
    const auto cv = build_cost_volume(f, f, cfg);
    CHECK(cv.costs.shape == std::vector<Index>{1, 125, 5, 5, 4});
    const Index zero = offset_index({0, 0, 0}, 2);
    CHECK(Eigen::Map<const Eigen::ArrayXd>(cv.costs.slab(0, zero), 100).abs().maxCoeff() == 0.0);
    CHECK(cv.costs.data.minCoeff() >= 0.0);

    FeatureMap<double> a{Tensor<double>({1, 1, 8, 8, 8}, 0.5), 1}, b{Tensor<double>({1, 1, 8, 8, 8}, -1.5), 1};
    const auto c = build_cost_volume(a, b, cfg);
    CHECK((c.costs.data - 4.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("cost volume: contract violations")
{
    const auto f = smooth_features<double>(2, {6, 6, 6}, 2);
    const auto g = smooth_features<double>(3, {6, 6, 6}, 3);
    CHECK_THROWS_AS(build_cost_volume(f, g, config(1, 1, 0)), ContractError);
    CHECK_THROWS_AS(build_cost_volume(f, f, config(4, 1, 0)), ContractError);
}

TEST_CASE("cost volume: interior argmin sits exactly at the applied integer shift")
{
    const auto cfg = config(3, 2, 3);
    const auto f = smooth_features<double>(4, {20, 20, 20}, 4);
    for (const Eigen::Vector3i& d0 : {Eigen::Vector3i(1, -2, 3), Eigen::Vector3i(-3, 0, 1), Eigen::Vector3i(0, 0, 0)}) {
        const auto m = shifted(f, d0.cast<double>());
        const auto cv = build_cost_volume(f, m, cfg);
        const Dims ctrl = cv.control_dims();
        for_each_voxel(ctrl, [&](Index flat, const Vec3& p) {
            if (!in_interior(ctrl, p, 2))
                return;
            Index best = 0;
            for (Index k = 1; k < cfg.offsets(); ++k)
                if (cv.costs.slab(0, k)[flat] < cv.costs.slab(0, best)[flat])
                    best = k;
            CHECK(window_offset(best, cfg.radius) == d0);
        });
    }
}

TEST_CASE("solve_displacement: equal costs give zero; a single zero cost concentrates the soft-argmin")
{
    const auto cfg = config(2, 1, 0, 0.1);
    const auto flat = single_point_costs(cfg, {std::vector<double>(125, 7.0)});
    CHECK(solve_displacement(flat, cfg).data.abs().maxCoeff() < 1e-12);

    const Eigen::Vector3i d0(2, -1, 0);
    std::vector<double> costs(125, 100.0);
    costs[std::size_t(offset_index(d0, 2))] = 0.0;
    const auto u = solve_displacement(single_point_costs(cfg, {costs}), cfg);
    CHECK((u.at(0) - d0.cast<double>()).norm() < 1e-3);
}

TEST_CASE("solve_displacement: strong coupling pulls opposing neighbours to the brute-force minimizer")
{
    // Two control points, one preferring +d and one -d, with equal quadratic costs. The
    // coupled minimizer for large lambda is the common displacement minimizing both costs, 0.
    const Index r = 2;
    const auto loose = config(r, 1, 3, 0.5, 1e-6);
    const auto tight = config(r, 1, 10, 0.5, 50.0);
    const Eigen::Vector3d d(2, 0, 0);
    std::vector<double> a(125), b(125);
    for (Index k = 0; k < 125; ++k) {
        const Eigen::Vector3d x = window_offset(k, r).cast<double>();
        a[std::size_t(k)] = 4.0 * (x - d).squaredNorm();
        b[std::size_t(k)] = 4.0 * (x + d).squaredNorm();
    }
    const auto cv = single_point_costs(loose, {a, b});
    const auto free = solve_displacement(cv, loose);
    const auto coupled = solve_displacement(cv, tight);

    // Brute force over the discrete window for the shared displacement minimizing both costs.
    double best = 1e300;
    Eigen::Vector3d best_x = Eigen::Vector3d::Zero();
    for (Index k = 0; k < 125; ++k)
        if (a[std::size_t(k)] + b[std::size_t(k)] < best) {
            best = a[std::size_t(k)] + b[std::size_t(k)];
            best_x = window_offset(k, r).cast<double>();
        }
    CHECK(free.at(0)[0] > 1.5);
    CHECK(free.at(1)[0] < -1.5);
    CHECK((coupled.at(0) - best_x).norm() < 0.1);
    CHECK((coupled.at(1) - best_x).norm() < 0.1);
}

TEST_CASE("property: control-grid solution is bounded by q r per component")
{
    std::mt19937_64 rng(5);
    std::exponential_distribution<double> e(0.3);
    for (int trial = 0; trial < 10; ++trial) {
        auto cfg = config(2, 1, trial % 4, 0.05 + 0.1 * trial);
        cfg.quantization = 1 + trial % 2;
        CostVolume<double> cv;
        cv.costs = Tensor<double>({1, cfg.offsets(), 3, 3, 3});
        for (Index i = 0; i < cv.costs.size(); ++i)
            cv.costs.data[i] = e(rng);
        const auto u = solve_displacement(cv, cfg, Dims{3, 3, 3});
        CHECK(u.data.abs().maxCoeff() <= double(cfg.quantization * cfg.radius) + 1e-12);
    }
}

TEST_CASE("finite differences: sum of squared displacement w.r.t. both feature maps")
{
    const auto cfg = config(1, 2, 3, 0.5, 1.0);
    const auto f = smooth_features<double>(2, {6, 6, 6}, 6, 1.0);
    const auto m = smooth_features<double>(2, {6, 6, 6}, 7, 1.0);
    const auto stencil = upsample_stencil<double>({3, 3, 3}, 2.0, {6, 6, 6});
    const double err = max_relative_error(
        [&](Tape<double>& t, const std::vector<Var<double>>& v) {
            const auto u = resample(solve_control(cost_volume(v[0], v[1], cfg), cfg), stencil);
            return sum_squared_difference(u, t.constant(Tensor<double>(u.shape())));
        },
        {f.values, m.values}, 1e-5, 80, 1e-4);
    CHECK(err < 1e-3);
}

TEST_CASE("shift recovery: mean interior error below a quarter voxel")
{
    const auto cfg = config(3, 2, 3);
    const Dims dims{24, 24, 24};
    const auto f = smooth_features<double>(4, dims, 8);
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> pick(-3, 3);
    for (int trial = 0; trial < 8; ++trial) {
        const Vec3 d0(pick(rng), pick(rng), pick(rng));
        const auto u = solve_displacement(build_cost_volume(f, shifted(f, d0), cfg), cfg, dims);
        CHECK(mean_interior_error(u, d0, 6) < 0.25);
    }
}

TEST_CASE("diffusion energy: closed form on a linear ramp")
{
    Tape<double> tape;
    Tensor<double> u({1, 1, 3, 3, 3});
    for (Index i = 0; i < 27; ++i)
        u.data[i] = double(i % 3);   // slope 1 along W only
    CHECK(diffusion_energy(tape.constant(u)).value().data[0] == doctest::Approx(18.0));
}

TEST_CASE("instance_optimize: identical maps keep the zero field")
{
    const auto f = smooth_features<double>(3, {12, 12, 12}, 10);
    const auto res = instance_optimize(f, f, DisplacementField<double>({12, 12, 12}), InstanceOptimConfig{});
    CHECK(res.field.data.abs().maxCoeff() < 1e-12);
    CHECK(res.final_objective <= res.initial_objective);
}

TEST_CASE("instance_optimize: ground-truth shift is stationary within 0.1 voxel")
{
    const Dims dims{16, 16, 16};
    const auto f = smooth_features<double>(3, dims, 11, 2.0);
    const Vec3 d0(1, -1, 2);
    const auto m = shifted(f, d0);
    DisplacementField<double> init(dims);
    for (Index i = 0; i < dims.count(); ++i)
        init.set(i, d0);
    const auto res = instance_optimize(f, m, init, InstanceOptimConfig{});
    CHECK(mean_interior_error(res.field, d0, 4) < 0.1);
}

TEST_CASE("instance_optimize: heavy regularization approaches the best uniform translation")
{
    const Dims dims{16, 16, 16};
    const auto f = smooth_features<double>(3, dims, 12, 2.5);
    const auto m = shifted(f, Vec3(1, 0, 0));

    // Brute force over integer uniform translations of the data term.
    double best = 1e300;
    Vec3 best_t = Vec3::Zero();
    for (int a = -2; a <= 2; ++a)
        for (int b = -2; b <= 2; ++b)
            for (int c = -2; c <= 2; ++c) {
                DisplacementField<double> t(dims);
                for (Index i = 0; i < dims.count(); ++i)
                    t.set(i, Vec3(a, b, c));
                const double j = detail::objective_of(f, m, t, 0.0);
                if (j < best) {
                    best = j;
                    best_t = Vec3(a, b, c);
                }
            }
    InstanceOptimConfig cfg;
    cfg.iters = 150;
    cfg.lambda = 100.0;
    const auto res = instance_optimize(f, m, DisplacementField<double>(dims), cfg);
    CHECK(mean_interior_error(res.field, best_t, 3) < 0.1);
    for (int a = 0; a < 3; ++a) {
        const auto comp = res.field.component(a);
        CHECK(std::sqrt((comp - comp.mean()).square().mean()) < 0.05);
    }
}

TEST_CASE("property: instance_optimize never increases its objective")
{
    const Dims dims{12, 12, 12};
    std::mt19937_64 rng(13);
    std::normal_distribution<double> n(0.0, 1.5);
    for (int trial = 0; trial < 5; ++trial) {
        const auto f = smooth_features<double>(2, dims, 20 + std::uint64_t(trial));
        const auto m = smooth_features<double>(2, dims, 40 + std::uint64_t(trial));
        DisplacementField<double> init(dims);
        for (Index i = 0; i < init.data.size(); ++i)
            init.data[i] = n(rng);
        InstanceOptimConfig cfg;
        cfg.iters = 10;
        cfg.lr = trial == 4 ? 50.0 : 0.02;   // the last draw diverges and must fall back
        const auto res = instance_optimize(f, m, init, cfg);
        CHECK(res.final_objective <= res.initial_objective);
        if (res.fell_back)
            CHECK((res.field.data == init.data).all());
    }
}

TEST_CASE("instance_optimize rejects non-finite initial fields")
{
    const auto f = smooth_features<double>(2, {8, 8, 8}, 14);
    DisplacementField<double> init({8, 8, 8});
    init.data[3] = std::nan("");
    CHECK_THROWS_AS(instance_optimize(f, f, init, InstanceOptimConfig{}), ContractError);
}
