#pragma once

// Direct double-loop evaluation of the dense InfoNCE sum, written independently of the library.

#include <cmath>
#include <vector>

namespace eqreg::testing {

using Rows = std::vector<std::vector<double>>;

inline std::vector<double> unit(const std::vector<double>& x)
{
    double norm = 0.0;
    for (double v : x)
        norm += v * v;
    norm = std::max(std::sqrt(norm), 1e-8);
    std::vector<double> out;
    for (double v : x)
        out.push_back(v / norm);
    return out;
}

inline double dot(const std::vector<double>& x, const std::vector<double>& y)
{
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        s += x[i] * y[i];
    return s;
}

/// -Σ_j log( d(A_j, B_j) / (d(A_j, B_j) + Σ_{l≠j} [d(A_j, A_l) + d(A_j, B_l)]) ), d = exp(<.,.>/tau).
inline double brute_force_info_nce(const Rows& a_raw, const Rows& b_raw, double tau)
{
    Rows a, b;
    for (const auto& r : a_raw)
        a.push_back(unit(r));
    for (const auto& r : b_raw)
        b.push_back(unit(r));
    auto d = [&](const std::vector<double>& x, const std::vector<double>& y) { return std::exp(dot(x, y) / tau); };
    double loss = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double pos = d(a[j], b[j]);
        double denom = pos;
        for (std::size_t l = 0; l < a.size(); ++l)
            if (l != j)
                denom += d(a[j], a[l]) + d(a[j], b[l]);
        loss -= std::log(pos / denom);
    }
    return loss;
}

} // namespace eqreg::testing
