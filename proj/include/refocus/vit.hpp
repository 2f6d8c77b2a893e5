#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "refocus/checkpoint.hpp"
#include "refocus/config.hpp"
#include "refocus/image.hpp"
#include "refocus/types.hpp"

namespace refocus {

/// Token embeddings between residual layers. Row 0 is the global token,
/// rows 1..N are patch tokens in row-major grid order.
struct TokenState {
  /// Number of residual layers applied so far (0 = patch embedding output).
  int layer = 0;
  Matrix embeddings;
  Index grid_side = 0;

  Index num_patches() const { return embeddings.rows() - 1; }
  Index width() const { return embeddings.cols(); }
  auto patches() const { return embeddings.bottomRows(num_patches()); }
  auto patches() { return embeddings.bottomRows(num_patches()); }
};

/// Post-softmax attention record of a tower evaluation. Per layer it keeps
/// head-averaged query-key, key-key and query-query matrices; the running
/// sums behind the cumulative averages run over individual (layer, head)
/// matrices.
class AttentionStack {
 public:
  AttentionStack() = default;
  AttentionStack(Index tokens, int heads, bool keep_per_head = false);

  /// Records one layer. `applied` is the (possibly hook-modified) query-key
  /// attention that actually multiplied V; pass an empty vector when it
  /// equals `qk`.
  void push_layer(const std::vector<Matrix>& qk, const std::vector<Matrix>& kk, const std::vector<Matrix>& qq,
                  const std::vector<Matrix>& applied = {});

  /// Replaces the applied attention of the most recent layer.
  void set_applied(const std::vector<Matrix>& applied);

  int layers() const { return static_cast<int>(qk_mean_.size()); }
  int heads() const { return heads_; }
  Index tokens() const { return tokens_; }
  /// Count of (layer, head) matrices behind each running sum.
  Index matrices_accumulated() const { return static_cast<Index>(layers()) * heads_; }

  /// Head-averaged matrices of layer `l` (0-based).
  const Matrix& qk_mean(int l) const { return qk_mean_.at(static_cast<std::size_t>(l)); }
  const Matrix& kk_mean(int l) const { return kk_mean_.at(static_cast<std::size_t>(l)); }
  const Matrix& qq_mean(int l) const { return qq_mean_.at(static_cast<std::size_t>(l)); }
  const Matrix& applied_mean(int l) const { return applied_mean_.at(static_cast<std::size_t>(l)); }
  /// Per-head query-key matrices of layer `l`; only when constructed with
  /// keep_per_head.
  const std::vector<Matrix>& qk_heads(int l) const;
  const std::vector<Matrix>& kk_heads(int l) const;

  /// (1 / (l H)) times the sum over every recorded (layer, head) matrix.
  Matrix kk_cumulative_average() const;
  Matrix qq_cumulative_average() const;
  Matrix qk_cumulative_average() const;

 private:
  Index tokens_ = 0;
  int heads_ = 0;
  bool keep_per_head_ = false;
  Matrix qk_sum_, kk_sum_, qq_sum_;
  std::vector<Matrix> qk_mean_, kk_mean_, qq_mean_, applied_mean_;
  std::vector<std::vector<Matrix>> qk_heads_, kk_heads_;
};

/// Everything a hook sees while a residual layer runs.
struct LayerContext {
  /// 1-based index of the layer being evaluated.
  int layer = 0;
  const ModelConfig& config;
  /// Embeddings entering the layer (f^l, before normalization).
  const TokenState& input;
  /// Per-head projections, each (N+1) x d/H.
  const std::vector<Matrix>& q;
  const std::vector<Matrix>& k;
  const std::vector<Matrix>& v;
  /// Attention record including this layer's matrices.
  const AttentionStack& stack;
};

/// Per-layer modulation seam. `on_attention` may rewrite the per-head
/// post-softmax attention before it multiplies V (rows must stay
/// stochastic); `on_output` may rewrite the layer's output embeddings.
class LayerHook {
 public:
  virtual ~LayerHook() = default;
  virtual void on_attention(const LayerContext& ctx, std::vector<Matrix>& attention) {
    (void)ctx;
    (void)attention;
  }
  virtual void on_output(const LayerContext& ctx, TokenState& output) {
    (void)ctx;
    (void)output;
  }
};

struct TowerOptions {
#ifdef NDEBUG
  bool validate_hooks = false;
#else
  bool validate_hooks = true;
#endif
  bool keep_per_head = false;
  /// Keep the state entering every layer in TowerOutput::states.
  bool keep_states = false;
};

struct TowerOutput {
  /// (N+1) x shared width, after the final norm and visual projection.
  Matrix features;
  AttentionStack stack;
  /// States entering layers 1..L when TowerOptions::keep_states is set.
  std::vector<TokenState> states;
};

/// Max |row sum - 1| and the most negative entry of a matrix.
bool is_row_stochastic(const Matrix& a, double tol = 1e-5);

/// Forward pass of the CLIP visual tower over one window.
class VisionTower {
 public:
  VisionTower(std::shared_ptr<const CheckpointStore> checkpoint, ModelConfig config, TowerOptions options = {});

  const ModelConfig& config() const { return config_; }
  const TowerOptions& options() const { return options_; }

  /// Patch tokens plus the global token with positional embeddings and the
  /// pre-tower norm. `window` is a normalized (S, S, 3) image, S = image_size.
  TokenState embed_patches(const Image& window) const;

  /// Residual layer `layer` (0-based): attention block with the hook seam,
  /// then the MLP block, then the hook's output rewrite. Records the layer's
  /// attention matrices in `stack`.
  TokenState attention_layer(const TokenState& state, int layer, AttentionStack& stack,
                             LayerHook* hook = nullptr) const;

  /// Per-head Q, K, V of the layer `layer` for `state`.
  void project_qkv(const TokenState& state, int layer, std::vector<Matrix>& q, std::vector<Matrix>& k,
                   std::vector<Matrix>& v) const;

  /// Last-layer rule: A V through the last layer's output projection, the
  /// final norm and the visual projection; no residual and no MLP.
  /// `attention` holds one matrix shared by all heads or one per head.
  Matrix final_layer(const TokenState& state, const std::vector<Matrix>& attention) const;

  /// Final norm plus visual projection of every row.
  Matrix project(const Matrix& tokens) const;

  /// Full tower. With `final_attention` unset the last layer runs as an
  /// ordinary residual layer (plain CLIP); otherwise the last-layer rule
  /// applies with the selected proxy attention.
  TowerOutput forward(const Image& window, std::optional<FinalAttention> final_attention,
                      LayerHook* hook = nullptr) const;

 private:
  struct LayerWeights {
    Vector norm1_gain, norm1_bias, norm2_gain, norm2_bias;
    const Matrix* w_q;
    const Matrix* w_k;
    const Matrix* w_v;
    const Matrix* w_o;
    const Matrix* w_fc1;
    const Matrix* w_fc2;
    Vector b_q, b_k, b_v, b_o, b_fc1, b_fc2;
  };

  Matrix activation(const Matrix& x) const;
  std::vector<Matrix> attention_maps(const std::vector<Matrix>& a, const std::vector<Matrix>& b) const;

  std::shared_ptr<const CheckpointStore> ckpt_;
  ModelConfig config_;
  TowerOptions options_;
  std::vector<LayerWeights> layers_;
  Vector class_embedding_;
  Matrix patch_kernel_;  // d x (3 p p), channel-major then row, column
  const Matrix* position_embedding_;
  std::optional<std::pair<Vector, Vector>> pre_norm_;
  Vector post_norm_gain_, post_norm_bias_;
  const Matrix* projection_;
};

}  // namespace refocus
