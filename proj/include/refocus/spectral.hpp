#pragma once

#include "refocus/config.hpp"
#include "refocus/types.hpp"

namespace refocus {

/// Symmetric patch-token affinity graph.
struct SimilarityGraph {
  Matrix weights;
  Vector degrees;
};

/// Symmetrized graph (A + A^T) / 2 over patch tokens. `attention` is
/// (N+1) x (N+1) with the global token in row/column 0, which is dropped.
SimilarityGraph build_graph(const Matrix& attention);

/// Normalized-cut relaxation of a graph plus the resulting partition.
struct PartitionResult {
  /// Generalized eigenvector y of (D - W) y = lambda D y for the second
  /// smallest eigenvalue, D-orthogonal to the constant vector.
  Vector fiedler;
  double eigenvalue = 0.0;
  /// Threshold applied to orientation * fiedler.
  double threshold = 0.0;
  /// +1 or -1: which side of the threshold was selected.
  int orientation = 1;
  /// Tokens on the selected side (patch indices), before removing t_dis.
  IndexSet candidates;
  /// candidates \ t_dis.
  IndexSet defocused;
  /// Set when the threshold left one side empty and a median split was used.
  bool median_fallback = false;
};

/// Second-smallest generalized eigenpair through the symmetric normalized
/// Laplacian. Throws NumericError for degenerate degrees or when the
/// eigen-residual exceeds 1e-6 (1 + max|y|).
PartitionResult fiedler(const SimilarityGraph& graph);

/// Threshold maximizing the between-class variance of `values` over all
/// cut points between consecutive distinct sorted values.
double otsu_threshold(const Vector& values);

/// Chooses the defocused side of the Fiedler partition: the side with the
/// smaller mean column mass (ties go to the positive side), then removes
/// distraction tokens. `column_mass` may be empty, in which case the positive
/// side is used.
PartitionResult select_defocused(PartitionResult partition, ThresholdRule rule, const IndexSet& distraction,
                                 const Vector& column_mass);

/// Column mass over patch tokens: omega_j = sum_i A[i, j + 1].
Vector column_mass(const Matrix& attention);

}  // namespace refocus
