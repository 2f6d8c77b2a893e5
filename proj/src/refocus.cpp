#include "refocus/refocus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "refocus/errors.hpp"

namespace refocus {

namespace {

void check_columns(const IndexSet& cols, Index n, const char* what) {
  for (auto c : cols) {
    if (c < 0 || c >= n) throw ContractError(std::string(what) + " column " + std::to_string(c) + " out of range");
  }
}

bool disjoint(IndexSet a, IndexSet b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  IndexSet both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return both.empty();
}

// Neighbors of patch i on a g x g grid inside a k x k window, centre excluded.
IndexSet grid_neighbors(Index i, Index g, int k) {
  const Index r = i / g;
  const Index c = i % g;
  const Index half = k / 2;
  IndexSet out;
  for (Index dr = -half; dr <= half; ++dr) {
    for (Index dc = -half; dc <= half; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const Index rr = r + dr;
      const Index cc = c + dc;
      if (rr < 0 || rr >= g || cc < 0 || cc >= g) continue;
      out.push_back(rr * g + cc);
    }
  }
  return out;
}

void check_grid(const TokenState& state) {
  if (state.grid_side * state.grid_side != state.num_patches()) {
    throw ShapeError("token state holds " + std::to_string(state.num_patches()) + " patches, not a " +
                     std::to_string(state.grid_side) + "x" + std::to_string(state.grid_side) + " grid");
  }
}

double median_of(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Vector max_embedding_weight(const Matrix& patches, const std::vector<Index>& dims, bool abs_denominator,
                            IndexSet* excluded) {
  if (dims.empty()) throw ParameterError("no distraction dimensions configured");
  for (auto j : dims) {
    if (j < 0 || j >= patches.cols()) throw ParameterError("distraction dim " + std::to_string(j) + " out of range");
  }
  Vector phi(patches.rows());
  if (excluded) excluded->clear();
  for (Index i = 0; i < patches.rows(); ++i) {
    double denom = patches.row(i).sum();
    if (std::abs(denom) < 1e-8) {
      phi(i) = std::numeric_limits<double>::quiet_NaN();
      if (excluded) excluded->push_back(i);
      continue;
    }
    if (abs_denominator) denom = std::abs(denom);
    double best = -std::numeric_limits<double>::infinity();
    for (auto j : dims) best = std::max(best, patches(i, j) / denom);
    phi(i) = best;
  }
  return phi;
}

DistractionProfile localize_distractors(const TokenState& state, const ModelConfig& config,
                                        const Vector& column_mass) {
  DistractionProfile p;
  p.layer = state.layer + 1;
  const Matrix patches = state.patches();
  p.phi = max_embedding_weight(patches, config.distraction_dims, config.abs_denominator, &p.excluded);
  p.column_mass = column_mass;
  if (config.joint_rule && column_mass.size() != patches.rows()) {
    throw ContractError("joint distraction rule needs a column mass per patch token");
  }
  for (Index i = 0; i < p.phi.size(); ++i) {
    if (!(p.phi(i) > config.tau)) continue;
    if (config.joint_rule && !(column_mass(i) > config.attn_weight_floor)) continue;
    p.distraction.push_back(i);
  }
  return p;
}

RedistributionBudget redistribution_budget(const Matrix& attention, const IndexSet& distraction_cols,
                                           const IndexSet& defocus_cols, double beta) {
  const Index n = attention.cols();
  check_columns(distraction_cols, n, "distraction");
  check_columns(defocus_cols, n, "defocus");
  RedistributionBudget b;
  b.omega = Vector::Zero(attention.rows());
  b.rho = Matrix::Zero(attention.rows(), static_cast<Index>(defocus_cols.size()));
  for (Index i = 0; i < attention.rows(); ++i) {
    double dis = 0.0;
    for (auto j : distraction_cols) dis += attention(i, j);
    b.omega(i) = beta * dis;
    double def = 0.0;
    for (auto j : defocus_cols) def += attention(i, j);
    if (def <= 0.0) continue;
    for (std::size_t k = 0; k < defocus_cols.size(); ++k) {
      b.rho(i, static_cast<Index>(k)) = attention(i, defocus_cols[k]) / def;
    }
  }
  return b;
}

Matrix redistribute_attention(const Matrix& attention, const IndexSet& distraction_cols,
                              const IndexSet& defocus_cols, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  if (!disjoint(distraction_cols, defocus_cols)) {
    throw ContractError("distraction and defocus column sets overlap");
  }
  if (distraction_cols.empty() || defocus_cols.empty()) {
    check_columns(distraction_cols, attention.cols(), "distraction");
    check_columns(defocus_cols, attention.cols(), "defocus");
    return attention;
  }
  const auto budget = redistribution_budget(attention, distraction_cols, defocus_cols, beta);
  Matrix out = attention;
  for (Index i = 0; i < out.rows(); ++i) {
    double def = 0.0;
    for (auto j : defocus_cols) def += attention(i, j);
    if (def <= 0.0) continue;
    for (auto j : distraction_cols) out(i, j) = (1.0 - beta) * attention(i, j);
    for (std::size_t k = 0; k < defocus_cols.size(); ++k) {
      const Index j = defocus_cols[k];
      out(i, j) = attention(i, j) + budget.omega(i) * budget.rho(i, static_cast<Index>(k));
    }
  }
  return out;
}

TokenState redistribute_embeddings(const TokenState& state, const IndexSet& distraction,
                                   const std::vector<Index>& dims, int receptive_field) {
  if (receptive_field < 3 || receptive_field % 2 == 0) {
    throw ParameterError("receptive field must be an odd size >= 3");
  }
  check_grid(state);
  const Index g = state.grid_side;
  TokenState out = state;
  const auto in = state.patches();
  auto dst = out.patches();
  for (auto i : distraction) {
    if (i < 0 || i >= g * g) throw ContractError("distraction token " + std::to_string(i) + " out of range");
    const auto nb = grid_neighbors(i, g, receptive_field);
    if (nb.empty()) continue;
    for (auto j : dims) {
      if (j < 0 || j >= state.width()) throw ParameterError("distraction dim out of range");
      double sum = 0.0;
      for (auto n : nb) sum += in(n, j);
      dst(i, j) = sum / static_cast<double>(nb.size());
    }
  }
  return out;
}

Matrix mask_attention_columns(const Matrix& attention, const IndexSet& cols) {
  check_columns(cols, attention.cols(), "masked");
  if (cols.empty()) return attention;
  Matrix out = attention;
  for (auto j : cols) out.col(j).setZero();
  for (Index i = 0; i < out.rows(); ++i) {
    const double s = out.row(i).sum();
    if (s > 0.0) {
      out.row(i) /= s;
    } else {
      spdlog::debug("mask_attention_columns: row {} has no mass outside the masked columns", i);
      out.row(i) = attention.row(i);
    }
  }
  return out;
}

TokenState apply_suppression(const TokenState& state, const IndexSet& distraction, SuppressionStrategy strategy,
                             const ModelConfig& config) {
  if (strategy == SuppressionStrategy::NegInfMask || distraction.empty()) return state;
  check_grid(state);
  TokenState out = state;
  const auto in = state.patches();
  auto dst = out.patches();
  const Index g = state.grid_side;
  for (auto i : distraction) {
    if (i < 0 || i >= g * g) throw ContractError("distraction token " + std::to_string(i) + " out of range");
    switch (strategy) {
      case SuppressionStrategy::LowPass: {
        const double cap = config.tau * in.row(i).sum();
        for (auto j : config.distraction_dims) dst(i, j) = std::min(in(i, j), cap);
        break;
      }
      case SuppressionStrategy::MeanFilter: {
        const auto nb = grid_neighbors(i, g, 3);
        if (nb.empty()) break;
        Vector sum = Vector::Zero(state.width());
        for (auto n : nb) sum += in.row(n).transpose();
        dst.row(i) = (sum / static_cast<double>(nb.size())).transpose();
        break;
      }
      case SuppressionStrategy::MedianFilter: {
        const auto nb = grid_neighbors(i, g, 3);
        if (nb.empty()) break;
        std::vector<double> vals(nb.size());
        for (Index j = 0; j < state.width(); ++j) {
          for (std::size_t k = 0; k < nb.size(); ++k) vals[k] = in(nb[k], j);
          dst(i, j) = median_of(vals);
        }
        break;
      }
      case SuppressionStrategy::NegInfMask: break;
    }
  }
  return out;
}

IndexSet to_columns(const IndexSet& patches) {
  IndexSet cols(patches.size());
  std::transform(patches.begin(), patches.end(), cols.begin(), [](Index i) { return i + 1; });
  return cols;
}

namespace {

bool in_range(const RunConfig& run, int layer) {
  return run.model.redistribution_layers.contains(layer, run.model.layers);
}

Vector cumulative_column_mass(const AttentionStack& stack) {
  return column_mass(stack.qk_cumulative_average());
}

Matrix similarity_source(const AttentionStack& stack, SimilaritySource source, int layer) {
  const int l = layer - 1;
  switch (source) {
    case SimilaritySource::Qk: return stack.qk_mean(l);
    case SimilaritySource::Qq: return stack.qq_mean(l);
    case SimilaritySource::Kk: return stack.kk_mean(l);
    case SimilaritySource::KkCumAvg: return stack.kk_cumulative_average();
  }
  throw ParameterError("unknown similarity source");
}

}  // namespace

RefocusHook::RefocusHook(RunConfig run) : run_(std::move(run)) {}

void RefocusHook::on_attention(const LayerContext& ctx, std::vector<Matrix>& attention) {
  current_.clear();
  if (!in_range(run_, ctx.layer)) return;

  LayerDiagnostics diag;
  diag.profile = localize_distractors(ctx.input, ctx.config, cumulative_column_mass(ctx.stack));
  current_ = diag.profile.distraction;

  if (!current_.empty() && run_.attention_redistribution) {
    const Index n = ctx.input.num_patches();
    if (run_.defocus_localization) {
      const auto graph = build_graph(similarity_source(ctx.stack, run_.similarity_source, ctx.layer));
      diag.partition = select_defocused(fiedler(graph), run_.threshold_rule, current_, diag.profile.column_mass);
      diag.defocused = diag.partition->defocused;
    } else {
      for (Index i = 0; i < n; ++i) {
        if (!std::binary_search(current_.begin(), current_.end(), i)) diag.defocused.push_back(i);
      }
    }
    const auto dis_cols = to_columns(current_);
    const auto def_cols = to_columns(diag.defocused);
    for (auto& a : attention) a = redistribute_attention(a, dis_cols, def_cols, ctx.config.beta);
  }
  diagnostics_.push_back(std::move(diag));
}

void RefocusHook::on_output(const LayerContext& ctx, TokenState& output) {
  if (current_.empty() || !run_.embedding_redistribution) return;
  output = redistribute_embeddings(output, current_, ctx.config.distraction_dims, run_.receptive_field);
}

SuppressionHook::SuppressionHook(RunConfig run) : run_(std::move(run)) {}

void SuppressionHook::on_attention(const LayerContext& ctx, std::vector<Matrix>& attention) {
  current_.clear();
  if (!in_range(run_, ctx.layer)) return;
  LayerDiagnostics diag;
  diag.profile = localize_distractors(ctx.input, ctx.config, cumulative_column_mass(ctx.stack));
  current_ = diag.profile.distraction;
  if (run_.suppression == SuppressionStrategy::NegInfMask && !current_.empty()) {
    const auto cols = to_columns(current_);
    for (auto& a : attention) a = mask_attention_columns(a, cols);
  }
  diagnostics_.push_back(std::move(diag));
}

void SuppressionHook::on_output(const LayerContext& ctx, TokenState& output) {
  if (current_.empty()) return;
  output = apply_suppression(output, current_, run_.suppression, ctx.config);
}

}  // namespace refocus
