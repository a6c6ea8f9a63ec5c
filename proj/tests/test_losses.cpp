#include "eqreg/losses.hpp"

#include "fd_check.hpp"
#include "infonce_oracle.hpp"

#include <doctest.h>

#include <set>

using namespace eqreg;
using namespace eqreg::testing;

namespace {

SampledFeatureSet<double> to_set(const Rows& a, const Rows& b)
{
    SampledFeatureSet<double> s;
    s.vectors_a.resize(Index(a.size()), Index(a[0].size()));
    s.vectors_b.resize(Index(b.size()), Index(b[0].size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t c = 0; c < a[0].size(); ++c) {
            s.vectors_a(Index(i), Index(c)) = a[i][c];
            s.vectors_b(Index(i), Index(c)) = b[i][c];
        }
    return s;
}

Rows random_rows(Index n, Index c, std::mt19937_64& rng)
{
    std::normal_distribution<double> g(0.0, 1.0);
    Rows out(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(c)));
    for (auto& r : out)
        for (auto& v : r)
            v = g(rng);
    return out;
}

DisplacementField<double> constant_field(const Dims& d, const Vec3& v)
{
    DisplacementField<double> u(d);
    for (Index i = 0; i < d.count(); ++i)
        u.set(i, v);
    return u;
}

} // namespace

TEST_CASE("registration_loss closed forms")
{
    const Dims d{3, 4, 5};
    const auto a = constant_field(d, Vec3(0.5, -1, 2));
    CHECK(registration_loss(a, a) == 0.0);
    CHECK(registration_loss(constant_field(d, Vec3(1.5, -1, 2)), a) == doctest::Approx(1.0 / 3.0));
    CHECK(registration_loss(DisplacementField<double>(d), constant_field(d, Vec3(1, 2, 2))) == doctest::Approx(3.0));
    CHECK_THROWS_AS(registration_loss(a, DisplacementField<double>({3, 4, 4})), ContractError);
}

TEST_CASE("property: registration_loss is symmetric, non-negative and zero only on equality")
{
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        DisplacementField<double> a({4, 4, 4}), b({4, 4, 4});
        for (Index i = 0; i < a.data.size(); ++i)
            a.data[i] = g(rng), b.data[i] = g(rng);
        CHECK(registration_loss(a, b) == registration_loss(b, a));
        CHECK(registration_loss(a, b) > 0.0);
    }
}

TEST_CASE("info_nce: a single sample has no negatives and zero loss")
{
    CHECK(info_nce(to_set({{1, 2, 3}}, {{-3, 0, 1}}), 0.1) == doctest::Approx(0.0));
}

TEST_CASE("info_nce: identical vectors give n log(2n - 1)")
{
    for (Index n : {2, 3, 5, 8}) {
        const Rows a(std::size_t(n), std::vector<double>{0.3, -0.2, 0.9});
        CHECK(info_nce(to_set(a, a), 0.1) == doctest::Approx(double(n) * std::log(2.0 * double(n) - 1.0)).epsilon(1e-12));
    }
    CHECK(3.0 * std::log(5.0) == doctest::Approx(4.8283).epsilon(1e-4));
}

TEST_CASE("info_nce: orthonormal two-sample case matches the oracle")
{
    const Rows a{{1, 0, 0, 0}, {0, 1, 0, 0}};
    const double expected = brute_force_info_nce(a, a, 0.1);
    CHECK(info_nce(to_set(a, a), 0.1) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(2.0 * std::log(1.0 + 2.0 * std::exp(-10.0))).epsilon(1e-9));
}

TEST_CASE("info_nce agrees with the brute-force double loop to 1e-10")
{
    std::mt19937_64 rng(2);
    for (Index n = 1; n <= 5; ++n)
        for (double tau : {0.05, 0.1, 1.0}) {
            const auto a = random_rows(n, 4, rng), b = random_rows(n, 4, rng);
            CHECK(std::abs(info_nce(to_set(a, b), tau) - brute_force_info_nce(a, b, tau)) < 1e-10);
        }
}

TEST_CASE("property: info_nce is non-negative and invariant to a shared permutation")
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_rows(6, 3, rng), b = random_rows(6, 3, rng);
        const double base = info_nce(to_set(a, b), 0.1);
        CHECK(base >= 0.0);
        std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
        std::shuffle(perm.begin(), perm.end(), rng);
        Rows pa, pb;
        for (auto i : perm)
            pa.push_back(a[i]), pb.push_back(b[i]);
        CHECK(info_nce(to_set(pa, pb), 0.1) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("info_nce: zero vectors use the norm floor and stay finite")
{
    const Rows a{{0, 0, 0}, {1, 0, 0}}, b{{0, 0, 0}, {0, 1, 0}};
    const double v = info_nce(to_set(a, b), 0.1);
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(brute_force_info_nce(a, b, 0.1)).epsilon(1e-12));
}

TEST_CASE("finite differences: info_nce gradients w.r.t. both sample sets")
{
    std::mt19937_64 rng(4);
    for (Index n = 1; n <= 4; ++n)
        for (Index c = 1; c <= 3; ++c) {
            const std::vector<Tensor<double>> in{random_tensor({n, c}, rng), random_tensor({n, c}, rng)};
            const double err = max_relative_error(
                [](Tape<double>&, const std::vector<Var<double>>& v) { return info_nce(v[0], v[1], 0.1); }, in, 1e-6,
                60, 1e-6);
            CHECK(err < 1e-3);
        }
}

TEST_CASE("sample_locations")
{
    std::vector<std::uint8_t> mask(1000, 0);
    for (std::size_t i = 0; i < mask.size(); i += 7)
        mask[i] = 1;
    const auto exact = sample_locations(mask, 143, 5);
    CHECK(exact.size() == 143);
    CHECK(exact.diagnostic.empty());
    CHECK(std::is_sorted(exact.flat.begin(), exact.flat.end()));
    CHECK(exact.flat == sample_locations(mask, 143, 99).flat);

    const auto fewer = sample_locations(mask, 500, 5);
    CHECK(fewer.size() == 143);
    CHECK(!fewer.diagnostic.empty());

    const std::vector<std::uint8_t> full(48 * 48 * 48, 1);
    const auto s = sample_locations(full, 1000, 6);
    CHECK(s.size() == 1000);
    CHECK(std::set<Index>(s.flat.begin(), s.flat.end()).size() == 1000);
    CHECK(s.flat.front() >= 0);
    CHECK(s.flat.back() < Index(full.size()));
    CHECK(s.flat == sample_locations(full, 1000, 6).flat);
    CHECK(s.flat != sample_locations(full, 1000, 7).flat);
    for (const auto& p : s.coords({48, 48, 48}))
        CHECK((p.array() >= 0).all());

    const auto empty = sample_locations(std::vector<std::uint8_t>(10, 0), 5, 1);
    CHECK(empty.size() == 0);
    CHECK(!empty.diagnostic.empty());
}

TEST_CASE("total_loss")
{
    CHECK(total_loss(2.5, 7.0, 9.0, {0.0, 0.1}) == 2.5);
    CHECK(total_loss(0.0, 0.5, 0.5, {1.0, 0.1}) == 1.0);
    CHECK(total_loss(1.0, 0.25, 0.5, {2.0, 0.1}) == doctest::Approx(2.5));
    CHECK_THROWS_AS((LossWeights{1.0, 0.0}.validate()), ContractError);
}
