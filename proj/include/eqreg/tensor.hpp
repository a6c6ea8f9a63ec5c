#pragma once

#include "eqreg/common.hpp"

#include <Eigen/Core>

#include <numeric>
#include <vector>

namespace eqreg {

/// Dense row-major n-d array. Spatial tensors use the layout (N, C, D, H, W).
template <typename Scalar>
struct Tensor {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    std::vector<Index> shape;
    Array data;

    Tensor() = default;

    explicit Tensor(std::vector<Index> s, Scalar fill = Scalar(0)) : shape(std::move(s))
    {
        data = Array::Constant(numel(shape), fill);
    }

    Tensor(std::vector<Index> s, Array values) : shape(std::move(s)), data(std::move(values))
    {
        require(data.size() == numel(shape), "tensor data does not match its shape");
    }

    static Index numel(const std::vector<Index>& s)
    {
        return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
    }

    Index size() const { return data.size(); }
    Index rank() const { return static_cast<Index>(shape.size()); }
    Index dim(Index i) const { return shape[static_cast<std::size_t>(i)]; }

    /// Spatial extent of a rank-5 tensor.
    Dims spatial() const { return {shape[2], shape[3], shape[4]}; }

    Scalar* ptr() { return data.data(); }
    const Scalar* ptr() const { return data.data(); }

    /// Start of the (n, c) spatial slab of a rank-5 tensor.
    Scalar* slab(Index n, Index c) { return data.data() + (n * shape[1] + c) * spatial().count(); }
    const Scalar* slab(Index n, Index c) const { return data.data() + (n * shape[1] + c) * spatial().count(); }

    template <typename Other>
    Tensor<Other> cast() const
    {
        return Tensor<Other>(shape, data.template cast<Other>().eval());
    }
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

inline std::vector<Index> spatial_shape(Index n, Index c, const Dims& dims)
{
    return {n, c, dims.d, dims.h, dims.w};
}

} // namespace eqreg
