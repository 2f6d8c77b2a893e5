#pragma once

#include <optional>
#include <vector>

#include "refocus/config.hpp"
#include "refocus/spectral.hpp"
#include "refocus/types.hpp"
#include "refocus/vit.hpp"

namespace refocus {

/// Distraction analysis of one layer input.
struct DistractionProfile {
  /// 1-based layer the profile was computed for (0 when unknown).
  int layer = 0;
  /// Maximum relative weight over the distraction dimensions per patch token;
  /// NaN for tokens with a near-zero embedding sum.
  Vector phi;
  /// Patch tokens whose embedding sum was too close to zero to score.
  IndexSet excluded;
  /// Distraction tokens (patch indices, ascending).
  IndexSet distraction;
  /// Column mass used by the joint rule and the defocus orientation.
  Vector column_mass;
};

/// Per-row redistribution budget and the share of each defocused column.
struct RedistributionBudget {
  /// beta times the pre-update mass of each row on the distraction columns.
  Vector omega;
  /// rows x |defocused| matrix; rows with zero defocus mass are all zero.
  Matrix rho;
};

/// phi_i = max_{j in dims} f_i[j] / sum_k f_i[k] for each row of `patches`.
/// Rows with |sum_k f_i[k]| < 1e-8 get NaN and are listed in `excluded`.
Vector max_embedding_weight(const Matrix& patches, const std::vector<Index>& dims, bool abs_denominator = false,
                            IndexSet* excluded = nullptr);

/// Distraction tokens of a layer input: phi > tau, and with the joint rule
/// also column_mass > attn_weight_floor. `column_mass` (length N) is only
/// required by the joint rule.
DistractionProfile localize_distractors(const TokenState& state, const ModelConfig& config,
                                        const Vector& column_mass = {});

RedistributionBudget redistribution_budget(const Matrix& attention, const IndexSet& distraction_cols,
                                           const IndexSet& defocus_cols, double beta);

/// Scales the distraction columns by (1 - beta) and hands each row's removed
/// mass to the defocus columns in proportion to their existing weights.
/// Column indices address `attention` directly. Rows without defocus mass
/// and an empty defocus set leave the matrix unchanged.
Matrix redistribute_attention(const Matrix& attention, const IndexSet& distraction_cols,
                              const IndexSet& defocus_cols, double beta);

/// Replaces f_i[j] for i in `distraction` (patch indices) and j in `dims` by
/// the mean of the same entry over the receptive_field x receptive_field
/// neighborhood, centre excluded, divided by the number of neighbors inside
/// the grid.
TokenState redistribute_embeddings(const TokenState& state, const IndexSet& distraction,
                                   const std::vector<Index>& dims, int receptive_field = 3);

/// Zeroes the listed columns and renormalizes every row over the rest. A row
/// whose entire mass sat on the listed columns is left unchanged.
Matrix mask_attention_columns(const Matrix& attention, const IndexSet& cols);

/// Embedding-side suppression of distraction tokens. neg_inf_mask acts on
/// attention and returns the state unchanged.
TokenState apply_suppression(const TokenState& state, const IndexSet& distraction, SuppressionStrategy strategy,
                             const ModelConfig& config);

/// Patch index i maps to attention column i + 1.
IndexSet to_columns(const IndexSet& patches);

/// What a hook decided for one layer.
struct LayerDiagnostics {
  DistractionProfile profile;
  std::optional<PartitionResult> partition;
  IndexSet defocused;
};

/// Attention and embedding redistribution on every layer inside the
/// configured range.
class RefocusHook : public LayerHook {
 public:
  explicit RefocusHook(RunConfig run);

  void on_attention(const LayerContext& ctx, std::vector<Matrix>& attention) override;
  void on_output(const LayerContext& ctx, TokenState& output) override;

  const std::vector<LayerDiagnostics>& diagnostics() const { return diagnostics_; }

 private:
  RunConfig run_;
  IndexSet current_;
  std::vector<LayerDiagnostics> diagnostics_;
};

/// One of the four suppression strategies on every layer inside the
/// configured range.
class SuppressionHook : public LayerHook {
 public:
  explicit SuppressionHook(RunConfig run);

  void on_attention(const LayerContext& ctx, std::vector<Matrix>& attention) override;
  void on_output(const LayerContext& ctx, TokenState& output) override;

  const std::vector<LayerDiagnostics>& diagnostics() const { return diagnostics_; }

 private:
  RunConfig run_;
  IndexSet current_;
  std::vector<LayerDiagnostics> diagnostics_;
};

}  // namespace refocus
