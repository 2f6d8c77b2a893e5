#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace refocus {

using Index = Eigen::Index;

/** Dense matrix templated on scalar. */
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/** Dense column vector templated on scalar. */
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/** Engine-wide storage precision. */
using Real = double;
using Matrix = MatrixX<Real>;
using Vector = VectorX<Real>;

/** Sorted list of token (or column) indices. */
using IndexSet = std::vector<Index>;

}  // namespace refocus
