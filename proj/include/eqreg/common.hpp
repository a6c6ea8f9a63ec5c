#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace eqreg {

using Index = Eigen::Index;

/// Precondition or shape violation by the caller.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or missing input data (files, manifests, headers).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values or a numerical breakdown during optimization.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Spatial extent of a 3D grid in (D, H, W) order; W is the fastest axis.
struct Dims {
    Index d = 0;
    Index h = 0;
    Index w = 0;

    Index count() const { return d * h * w; }
    Index operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    Index flat(Index i, Index j, Index k) const { return (i * h + j) * w + k; }
    bool operator==(const Dims&) const = default;

    std::string str() const
    {
        return "(" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline Dims ceil_div(const Dims& dims, Index factor)
{
    return {(dims.d + factor - 1) / factor, (dims.h + factor - 1) / factor, (dims.w + factor - 1) / factor};
}

inline void require(bool condition, const std::string& message)
{
    if (!condition)
        throw ContractError(message);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& values)
{
    return values.derived().array().isFinite().all();
}

} // namespace eqreg
