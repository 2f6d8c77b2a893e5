#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "refocus/errors.hpp"
#include "refocus/types.hpp"

namespace refocus {

namespace detail {

inline std::string shape_string(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace detail

/// Matrix product with 64-bit accumulation. Single precision operands are
/// promoted for the reduction and rounded once on the way out.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  static_assert(std::is_same_v<Scalar, typename DerivedB::Scalar>, "operand scalar types differ");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_string(a.rows(), a.cols()) + " times " +
                     detail::shape_string(b.rows(), b.cols()));
  }
  if constexpr (std::is_same_v<Scalar, double>) {
    return a * b;
  } else {
    return (a.template cast<double>() * b.template cast<double>()).template cast<Scalar>();
  }
}

/// Affine map `x * weight^T + bias` applied to every row of `x`. `weight` uses
/// the (out, in) layout of linear layers in published checkpoints.
template <typename Scalar>
MatrixX<Scalar> linear(const MatrixX<Scalar>& x, const MatrixX<Scalar>& weight,
                       const VectorX<Scalar>& bias) {
  if (x.cols() != weight.cols()) {
    throw ShapeError("linear: input " + detail::shape_string(x.rows(), x.cols()) +
                     " vs weight " + detail::shape_string(weight.rows(), weight.cols()));
  }
  MatrixX<Scalar> y = matmul(x, weight.transpose());
  if (bias.size() > 0) {
    if (bias.size() != weight.rows()) throw ShapeError("linear: bias length mismatch");
    y.rowwise() += bias.transpose();
  }
  return y;
}

/// Row-wise softmax of `scale * m`, stabilized by subtracting the row maximum.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m,
                                               typename Derived::Scalar scale) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(m.rows(), m.cols());
  VectorX<double> e(m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    e = m.row(i).transpose().template cast<double>() * static_cast<double>(scale);
    e = (e.array() - e.maxCoeff()).exp().matrix();
    out.row(i) = (e / e.sum()).transpose().template cast<Scalar>();
  }
  return out;
}

/// Layer normalization of a single vector (population variance).
template <typename Scalar>
VectorX<Scalar> layernorm(const VectorX<Scalar>& x, const VectorX<Scalar>& gain,
                          const VectorX<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  if (x.size() != gain.size() || x.size() != bias.size()) {
    throw ShapeError("layernorm: length mismatch");
  }
  if (!(eps > 0)) throw ParameterError("layernorm: eps must be positive");
  const double n = static_cast<double>(x.size());
  const double mean = x.template cast<double>().sum() / n;
  const double var = (x.template cast<double>().array() - mean).square().sum() / n;
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
  VectorX<Scalar> y(x.size());
  for (Index k = 0; k < x.size(); ++k) {
    y(k) = static_cast<Scalar>((static_cast<double>(x(k)) - mean) * inv * static_cast<double>(gain(k)) +
                               static_cast<double>(bias(k)));
  }
  return y;
}

/// Layer normalization applied independently to every row.
template <typename Scalar>
MatrixX<Scalar> layernorm_rows(const MatrixX<Scalar>& x, const VectorX<Scalar>& gain,
                               const VectorX<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  MatrixX<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    y.row(i) = layernorm<Scalar>(x.row(i).transpose(), gain, bias, eps).transpose();
  }
  return y;
}

/// Exact (erf) GELU.
template <typename Scalar>
Scalar gelu(Scalar x) {
  const double v = static_cast<double>(x);
  return static_cast<Scalar>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
}

/// Sigmoid approximation used by the OpenAI CLIP checkpoints.
template <typename Scalar>
Scalar quick_gelu(Scalar x) {
  const double v = static_cast<double>(x);
  return static_cast<Scalar>(v / (1.0 + std::exp(-1.702 * v)));
}

/// Eigenvalue with its unit-norm eigenvector.
template <typename Scalar>
struct EigenPair {
  Scalar eigenvalue{};
  VectorX<Scalar> eigenvector;
};

/// Full spectrum of a symmetric matrix, eigenvalues ascending, eigenvectors
/// in the matching columns.
template <typename Scalar>
struct SymmetricEigen {
  VectorX<Scalar> eigenvalues;
  MatrixX<Scalar> eigenvectors;
};

namespace detail {

// Householder reduction to tridiagonal form. On return `v` holds the
// accumulated orthogonal transform, `d` the diagonal and `e` the subdiagonal
// (e[0] unused).
inline void tridiagonalize(MatrixX<double>& v, VectorX<double>& d, VectorX<double>& e) {
  const Index n = v.rows();
  d.resize(n);
  e.resize(n);
  for (Index j = 0; j < n; ++j) d(j) = v(n - 1, j);

  for (Index i = n - 1; i > 0; --i) {
    double scale = 0.0;
    double h = 0.0;
    for (Index k = 0; k < i; ++k) scale += std::abs(d(k));
    if (scale == 0.0) {
      e(i) = d(i - 1);
      for (Index j = 0; j < i; ++j) {
        d(j) = v(i - 1, j);
        v(i, j) = 0.0;
        v(j, i) = 0.0;
      }
    } else {
      for (Index k = 0; k < i; ++k) {
        d(k) /= scale;
        h += d(k) * d(k);
      }
      double f = d(i - 1);
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e(i) = scale * g;
      h -= f * g;
      d(i - 1) = f - g;
      for (Index j = 0; j < i; ++j) e(j) = 0.0;

      for (Index j = 0; j < i; ++j) {
        f = d(j);
        v(j, i) = f;
        g = e(j) + v(j, j) * f;
        for (Index k = j + 1; k <= i - 1; ++k) {
          g += v(k, j) * d(k);
          e(k) += v(k, j) * f;
        }
        e(j) = g;
      }
      f = 0.0;
      for (Index j = 0; j < i; ++j) {
        e(j) /= h;
        f += e(j) * d(j);
      }
      const double hh = f / (h + h);
      for (Index j = 0; j < i; ++j) e(j) -= hh * d(j);
      for (Index j = 0; j < i; ++j) {
        f = d(j);
        g = e(j);
        for (Index k = j; k <= i - 1; ++k) v(k, j) -= (f * e(k) + g * d(k));
        d(j) = v(i - 1, j);
        v(i, j) = 0.0;
      }
    }
    d(i) = h;
  }

  for (Index i = 0; i < n - 1; ++i) {
    v(n - 1, i) = v(i, i);
    v(i, i) = 1.0;
    const double h = d(i + 1);
    if (h != 0.0) {
      for (Index k = 0; k <= i; ++k) d(k) = v(k, i + 1) / h;
      for (Index j = 0; j <= i; ++j) {
        double g = 0.0;
        for (Index k = 0; k <= i; ++k) g += v(k, i + 1) * v(k, j);
        for (Index k = 0; k <= i; ++k) v(k, j) -= g * d(k);
      }
    }
    for (Index k = 0; k <= i; ++k) v(k, i + 1) = 0.0;
  }
  for (Index j = 0; j < n; ++j) {
    d(j) = v(n - 1, j);
    v(n - 1, j) = 0.0;
  }
  v(n - 1, n - 1) = 1.0;
  e(0) = 0.0;
}

// Implicit-shift QL iteration on the tridiagonal (d, e), rotating `v`.
inline void tridiagonal_ql(MatrixX<double>& v, VectorX<double>& d, VectorX<double>& e) {
  const Index n = v.rows();
  for (Index i = 1; i < n; ++i) e(i - 1) = e(i);
  e(n - 1) = 0.0;

  constexpr double eps = std::numeric_limits<double>::epsilon();
  const int max_iter = 60 + 30 * static_cast<int>(n);
  double f = 0.0;
  double tst1 = 0.0;
  for (Index l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d(l)) + std::abs(e(l)));
    Index m = l;
    while (m < n - 1) {
      if (std::abs(e(m)) <= eps * tst1) break;
      ++m;
    }
    if (m > l) {
      int iter = 0;
      do {
        if (++iter > max_iter) {
          throw NumericError("tridiagonal QL failed to converge at index " + std::to_string(l) +
                             " (|e|=" + std::to_string(std::abs(e(l))) + ")");
        }
        double g = d(l);
        double p = (d(l + 1) - g) / (2.0 * e(l));
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d(l) = e(l) / (p + r);
        d(l + 1) = e(l) * (p + r);
        const double dl1 = d(l + 1);
        double h = g - d(l);
        for (Index i = l + 2; i < n; ++i) d(i) -= h;
        f += h;

        p = d(m);
        double c = 1.0;
        double c2 = c;
        double c3 = c;
        const double el1 = e(l + 1);
        double s = 0.0;
        double s2 = 0.0;
        for (Index i = m - 1; i >= l; --i) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e(i);
          h = c * p;
          r = std::hypot(p, e(i));
          e(i + 1) = s * r;
          s = e(i) / r;
          c = p / r;
          p = c * d(i) - s * g;
          d(i + 1) = h + s * (c * g + s * d(i));
          for (Index k = 0; k < n; ++k) {
            h = v(k, i + 1);
            v(k, i + 1) = s * v(k, i) + c * h;
            v(k, i) = c * v(k, i) - s * h;
          }
        }
        p = -s * s2 * c3 * el1 * e(l) / dl1;
        e(l) = s * p;
        d(l) = c * p;
      } while (std::abs(e(l)) > eps * tst1);
    }
    d(l) += f;
    e(l) = 0.0;
  }
}

}  // namespace detail

/// Maximum absolute asymmetry |a - a^T| of a square matrix.
template <typename Derived>
double asymmetry(const Eigen::MatrixBase<Derived>& a) {
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

/// Full eigendecomposition of a dense symmetric matrix by Householder
/// tridiagonalization followed by implicit-shift QL. Eigenvalues ascend; each
/// eigenvector is oriented so its largest-magnitude entry is positive.
template <typename Derived>
SymmetricEigen<typename Derived::Scalar> sym_eigen(const Eigen::MatrixBase<Derived>& a,
                                                   double symmetry_tol = 1e-8) {
  using Scalar = typename Derived::Scalar;
  if (a.rows() != a.cols()) {
    throw ShapeError("sym_eigen: matrix is " + detail::shape_string(a.rows(), a.cols()));
  }
  const Index n = a.rows();
  if (n == 0) return {};
  MatrixX<double> v = a.template cast<double>();
  if (!v.allFinite()) throw ContractError("sym_eigen: non-finite entries");
  const double scale = std::max(1.0, v.cwiseAbs().maxCoeff());
  const double asym = asymmetry(v);
  if (asym > symmetry_tol * scale) {
    throw ContractError("sym_eigen: matrix not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
  v = (0.5 * (v + v.transpose())).eval();

  VectorX<double> d;
  VectorX<double> e;
  if (n == 1) {
    d = v.diagonal();
    v.setOnes();
  } else {
    detail::tridiagonalize(v, d, e);
    detail::tridiagonal_ql(v, d, e);
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return d(x) < d(y); });

  SymmetricEigen<Scalar> out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Index k = 0; k < n; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    VectorX<double> col = v.col(src);
    col.normalize();
    Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    out.eigenvalues(k) = static_cast<Scalar>(d(src));
    out.eigenvectors.col(k) = col.template cast<Scalar>();
  }
  return out;
}

/// The `k` smallest eigenpairs of a dense symmetric matrix in ascending order.
template <typename Derived>
std::vector<EigenPair<typename Derived::Scalar>> sym_eigen_smallest(const Eigen::MatrixBase<Derived>& a,
                                                                    Index k) {
  using Scalar = typename Derived::Scalar;
  if (k < 1 || k > a.rows()) {
    throw ParameterError("sym_eigen_smallest: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(a.rows()) + "]");
  }
  const auto full = sym_eigen(a);
  std::vector<EigenPair<Scalar>> pairs;
  pairs.reserve(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) {
    pairs.push_back({full.eigenvalues(i), full.eigenvectors.col(i)});
  }
  return pairs;
}

}  // namespace refocus
