#include "refocus/spectral.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>

#include "refocus/errors.hpp"
#include "refocus/numerics.hpp"

namespace refocus {

SimilarityGraph build_graph(const Matrix& attention) {
  if (attention.rows() != attention.cols() || attention.rows() < 3) {
    throw ShapeError("build_graph: expected a square matrix over the global token and at least two patches");
  }
  const Index n = attention.rows() - 1;
  SimilarityGraph g;
  const auto a = attention.bottomRightCorner(n, n);
  g.weights = 0.5 * (a + a.transpose());
  if (!g.weights.allFinite() || g.weights.minCoeff() < 0) {
    throw ContractError("build_graph: similarity weights must be finite and nonnegative");
  }
  g.degrees = g.weights.rowwise().sum();
  Index worst = 0;
  const double dmin = g.degrees.minCoeff(&worst);
  if (dmin <= 1e-12) {
    throw NumericError("build_graph: degenerate graph, token " + std::to_string(worst) + " has degree " +
                       std::to_string(dmin));
  }
  return g;
}

PartitionResult fiedler(const SimilarityGraph& graph) {
  const Index n = graph.weights.rows();
  if (n < 2 || graph.weights.cols() != n || graph.degrees.size() != n) {
    throw ShapeError("fiedler: graph needs at least two nodes and matching degrees");
  }
  if (graph.degrees.minCoeff() <= 1e-12) throw NumericError("fiedler: degenerate graph (zero degree)");

  const Vector inv_sqrt = graph.degrees.cwiseSqrt().cwiseInverse();
  Matrix l_sym = -(inv_sqrt.asDiagonal() * graph.weights * inv_sqrt.asDiagonal());
  l_sym.diagonal().array() += 1.0;
  l_sym = (0.5 * (l_sym + l_sym.transpose())).eval();

  const auto pairs = sym_eigen_smallest(l_sym, 2);
  Vector z = pairs[1].eigenvector;
  // Remove any leakage onto the trivial eigenvector D^{1/2} 1.
  const Vector trivial = graph.degrees.cwiseSqrt().normalized();
  z -= trivial.dot(z) * trivial;
  if (z.norm() == 0.0) throw NumericError("fiedler: second eigenvector collapsed onto the trivial one");
  z.normalize();

  PartitionResult r;
  r.eigenvalue = pairs[1].eigenvalue;
  r.fiedler = inv_sqrt.cwiseProduct(z);

  const Vector& y = r.fiedler;
  const Vector dy = graph.degrees.cwiseProduct(y);
  const Vector residual = dy - graph.weights * y - r.eigenvalue * dy;
  const double res = residual.cwiseAbs().maxCoeff();
  const double bound = 1e-6 * (1.0 + y.cwiseAbs().maxCoeff());
  if (!(res <= bound) || r.eigenvalue < -1e-9 || r.eigenvalue > 2.0 + 1e-9) {
    std::ostringstream msg;
    msg << "fiedler: eigen-solve failed (residual " << res << " > " << bound << ", lambda " << r.eigenvalue
        << ", lambda_1 " << pairs[0].eigenvalue << ", degree range [" << graph.degrees.minCoeff() << ", "
        << graph.degrees.maxCoeff() << "])";
    throw NumericError(msg.str());
  }
  return r;
}

double otsu_threshold(const Vector& values) {
  if (values.size() == 0) throw ParameterError("otsu_threshold: empty input");
  std::vector<double> v(values.data(), values.data() + values.size());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  double best_score = -1.0;
  double best = v.front();
  double prefix = 0.0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    prefix += v[i];
    if (v[i] == v[i + 1]) continue;
    const double n0 = static_cast<double>(i + 1);
    const double n1 = n - n0;
    const double m0 = prefix / n0;
    const double m1 = (total - prefix) / n1;
    const double score = (n0 / n) * (n1 / n) * (m0 - m1) * (m0 - m1);
    if (score > best_score) {
      best_score = score;
      best = 0.5 * (v[i] + v[i + 1]);
    }
  }
  return best;
}

Vector column_mass(const Matrix& attention) {
  if (attention.rows() != attention.cols() || attention.cols() < 2) {
    throw ShapeError("column_mass: expected a square attention matrix");
  }
  return attention.rightCols(attention.cols() - 1).colwise().sum().transpose();
}

namespace {

double threshold_of(const Vector& v, ThresholdRule rule) {
  return rule == ThresholdRule::Mean ? v.mean() : otsu_threshold(v);
}

IndexSet above(const Vector& v, double t) {
  IndexSet out;
  for (Index i = 0; i < v.size(); ++i) {
    if (v(i) > t) out.push_back(i);
  }
  return out;
}

// An empty side never wins the comparison.
double mean_mass(const IndexSet& set, const Vector& mass) {
  if (set.empty()) return std::numeric_limits<double>::infinity();
  if (mass.size() == 0) return 0.0;
  double s = 0.0;
  for (auto i : set) s += mass(i);
  return s / static_cast<double>(set.size());
}

double median(Vector v) {
  std::sort(v.data(), v.data() + v.size());
  const Index n = v.size();
  return n % 2 ? v(n / 2) : 0.5 * (v(n / 2 - 1) + v(n / 2));
}

}  // namespace

PartitionResult select_defocused(PartitionResult partition, ThresholdRule rule, const IndexSet& distraction,
                                 const Vector& column_mass) {
  const Vector& y = partition.fiedler;
  const Index n = y.size();
  if (n == 0) throw ParameterError("select_defocused: empty Fiedler vector");
  if (column_mass.size() != 0 && column_mass.size() != n) {
    throw ShapeError("select_defocused: column mass length differs from the Fiedler vector");
  }

  struct Side {
    int sign;
    double threshold;
    IndexSet members;
    bool fallback = false;
  };
  auto side = [&](int sign) {
    const Vector v = static_cast<double>(sign) * y;
    Side s{sign, threshold_of(v, rule), {}};
    s.members = above(v, s.threshold);
    if (s.members.empty() || static_cast<Index>(s.members.size()) == n) {
      s.fallback = true;
      s.threshold = median(v);
      s.members = above(v, s.threshold);
    }
    if (n > 1 && (s.members.empty() || static_cast<Index>(s.members.size()) == n)) {
      // Ties at the median: upper half by value, lower index first.
      std::vector<Index> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), Index{0});
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return v(a) > v(b); });
      s.members.assign(order.begin(), order.begin() + n / 2);
      std::sort(s.members.begin(), s.members.end());
    }
    return s;
  };
  const Side pos = side(+1);
  const Side neg = side(-1);
  const bool use_neg = mean_mass(neg.members, column_mass) < mean_mass(pos.members, column_mass);
  const Side& chosen = use_neg ? neg : pos;
  if (chosen.fallback) {
    spdlog::debug("select_defocused: threshold left one side empty, using a median split");
  }

  partition.orientation = chosen.sign;
  partition.threshold = chosen.threshold;
  partition.median_fallback = chosen.fallback;
  partition.candidates = chosen.members;
  partition.defocused.clear();
  IndexSet dis = distraction;
  std::sort(dis.begin(), dis.end());
  std::set_difference(chosen.members.begin(), chosen.members.end(), dis.begin(), dis.end(),
                      std::back_inserter(partition.defocused));
  return partition;
}

}  // namespace refocus
