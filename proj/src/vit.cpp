#include "refocus/vit.hpp"

#include "refocus/errors.hpp"
#include "refocus/numerics.hpp"

namespace refocus {

namespace {

Matrix head_average(const std::vector<Matrix>& per_head) {
  Matrix sum = per_head.front();
  for (std::size_t h = 1; h < per_head.size(); ++h) sum += per_head[h];
  return sum / static_cast<double>(per_head.size());
}

Matrix head_sum(const std::vector<Matrix>& per_head) {
  Matrix sum = per_head.front();
  for (std::size_t h = 1; h < per_head.size(); ++h) sum += per_head[h];
  return sum;
}

}  // namespace

AttentionStack::AttentionStack(Index tokens, int heads, bool keep_per_head)
    : tokens_(tokens), heads_(heads), keep_per_head_(keep_per_head) {
  qk_sum_ = Matrix::Zero(tokens, tokens);
  kk_sum_ = Matrix::Zero(tokens, tokens);
  qq_sum_ = Matrix::Zero(tokens, tokens);
}

void AttentionStack::push_layer(const std::vector<Matrix>& qk, const std::vector<Matrix>& kk,
                                const std::vector<Matrix>& qq, const std::vector<Matrix>& applied) {
  const auto h = static_cast<std::size_t>(heads_);
  if (qk.size() != h || kk.size() != h || qq.size() != h || (!applied.empty() && applied.size() != h)) {
    throw ContractError("attention stack expects " + std::to_string(heads_) + " heads per layer");
  }
  for (const auto* group : {&qk, &kk, &qq}) {
    for (const auto& m : *group) {
      if (m.rows() != tokens_ || m.cols() != tokens_) throw ShapeError("attention stack: matrix size mismatch");
    }
  }
  qk_sum_ += head_sum(qk);
  kk_sum_ += head_sum(kk);
  qq_sum_ += head_sum(qq);
  qk_mean_.push_back(head_average(qk));
  kk_mean_.push_back(head_average(kk));
  qq_mean_.push_back(head_average(qq));
  applied_mean_.push_back(applied.empty() ? qk_mean_.back() : head_average(applied));
  if (keep_per_head_) {
    qk_heads_.push_back(qk);
    kk_heads_.push_back(kk);
  }
}

void AttentionStack::set_applied(const std::vector<Matrix>& applied) {
  if (applied_mean_.empty() || applied.size() != static_cast<std::size_t>(heads_)) {
    throw ContractError("attention stack: no layer to annotate");
  }
  applied_mean_.back() = head_average(applied);
}

const std::vector<Matrix>& AttentionStack::qk_heads(int l) const {
  if (!keep_per_head_) throw ContractError("attention stack was built without per-head storage");
  return qk_heads_.at(static_cast<std::size_t>(l));
}

const std::vector<Matrix>& AttentionStack::kk_heads(int l) const {
  if (!keep_per_head_) throw ContractError("attention stack was built without per-head storage");
  return kk_heads_.at(static_cast<std::size_t>(l));
}

Matrix AttentionStack::kk_cumulative_average() const {
  if (layers() == 0) throw ContractError("attention stack is empty");
  return kk_sum_ / static_cast<double>(matrices_accumulated());
}

Matrix AttentionStack::qq_cumulative_average() const {
  if (layers() == 0) throw ContractError("attention stack is empty");
  return qq_sum_ / static_cast<double>(matrices_accumulated());
}

Matrix AttentionStack::qk_cumulative_average() const {
  if (layers() == 0) throw ContractError("attention stack is empty");
  return qk_sum_ / static_cast<double>(matrices_accumulated());
}

bool is_row_stochastic(const Matrix& a, double tol) {
  if (a.size() == 0) return false;
  if (!a.allFinite()) return false;
  if (a.minCoeff() < -tol) return false;
  return ((a.rowwise().sum().array() - 1.0).abs() <= tol).all();
}

VisionTower::VisionTower(std::shared_ptr<const CheckpointStore> checkpoint, ModelConfig config,
                         TowerOptions options)
    : ckpt_(std::move(checkpoint)), config_(std::move(config)), options_(options) {
  if (!ckpt_) throw ParameterError("vision tower needs a checkpoint");
  config_.validate();
  const auto& c = *ckpt_;
  class_embedding_ = c.vector("vision_model.embeddings.class_embedding");
  patch_kernel_ = c.matrix("vision_model.embeddings.patch_embedding.weight");
  position_embedding_ = &c.matrix("vision_model.embeddings.position_embedding.weight");
  if (c.contains("vision_model.pre_layrnorm.weight")) {
    pre_norm_.emplace(c.vector("vision_model.pre_layrnorm.weight"), c.vector("vision_model.pre_layrnorm.bias"));
  }
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "vision_model.encoder.layers." + std::to_string(l) + ".";
    LayerWeights w;
    w.norm1_gain = c.vector(p + "layer_norm1.weight");
    w.norm1_bias = c.vector(p + "layer_norm1.bias");
    w.norm2_gain = c.vector(p + "layer_norm2.weight");
    w.norm2_bias = c.vector(p + "layer_norm2.bias");
    w.w_q = &c.matrix(p + "self_attn.q_proj.weight");
    w.w_k = &c.matrix(p + "self_attn.k_proj.weight");
    w.w_v = &c.matrix(p + "self_attn.v_proj.weight");
    w.w_o = &c.matrix(p + "self_attn.out_proj.weight");
    w.w_fc1 = &c.matrix(p + "mlp.fc1.weight");
    w.w_fc2 = &c.matrix(p + "mlp.fc2.weight");
    w.b_q = c.vector(p + "self_attn.q_proj.bias");
    w.b_k = c.vector(p + "self_attn.k_proj.bias");
    w.b_v = c.vector(p + "self_attn.v_proj.bias");
    w.b_o = c.vector(p + "self_attn.out_proj.bias");
    w.b_fc1 = c.vector(p + "mlp.fc1.bias");
    w.b_fc2 = c.vector(p + "mlp.fc2.bias");
    layers_.push_back(std::move(w));
  }
  post_norm_gain_ = c.vector("vision_model.post_layernorm.weight");
  post_norm_bias_ = c.vector("vision_model.post_layernorm.bias");
  projection_ = &c.matrix("visual_projection.weight");
}

TokenState VisionTower::embed_patches(const Image& window) const {
  const Index s = config_.image_size;
  const Index p = config_.patch_size;
  const Index g = config_.grid_side();
  if (window.height != s || window.width != s || window.channels != 3) {
    throw ShapeError("window must be " + std::to_string(s) + "x" + std::to_string(s) + "x3, got " +
                     std::to_string(window.height) + "x" + std::to_string(window.width) + "x" +
                     std::to_string(window.channels));
  }
  Matrix patches(g * g, 3 * p * p);
  for (Index gy = 0; gy < g; ++gy) {
    for (Index gx = 0; gx < g; ++gx) {
      const Index row = gy * g + gx;
      Index col = 0;
      for (Index c = 0; c < 3; ++c) {
        for (Index y = 0; y < p; ++y) {
          for (Index x = 0; x < p; ++x) patches(row, col++) = window.at(gy * p + y, gx * p + x, c);
        }
      }
    }
  }
  TokenState state;
  state.grid_side = g;
  state.embeddings.resize(g * g + 1, config_.width);
  state.embeddings.row(0) = class_embedding_.transpose();
  state.embeddings.bottomRows(g * g) = matmul(patches, patch_kernel_.transpose());
  state.embeddings += *position_embedding_;
  if (pre_norm_) {
    state.embeddings =
        layernorm_rows(state.embeddings, pre_norm_->first, pre_norm_->second, config_.layernorm_eps);
  }
  return state;
}

Matrix VisionTower::activation(const Matrix& x) const {
  if (config_.activation == Activation::QuickGelu) return x.unaryExpr([](double v) { return quick_gelu(v); });
  return x.unaryExpr([](double v) { return gelu(v); });
}

std::vector<Matrix> VisionTower::attention_maps(const std::vector<Matrix>& a, const std::vector<Matrix>& b) const {
  std::vector<Matrix> out;
  out.reserve(a.size());
  const double scale = config_.attention_scale_factor();
  for (std::size_t h = 0; h < a.size(); ++h) out.push_back(softmax_rows(matmul(a[h], b[h].transpose()), scale));
  return out;
}

void VisionTower::project_qkv(const TokenState& state, int layer, std::vector<Matrix>& q, std::vector<Matrix>& k,
                              std::vector<Matrix>& v) const {
  const auto& w = layers_.at(static_cast<std::size_t>(layer));
  const Matrix x = layernorm_rows(state.embeddings, w.norm1_gain, w.norm1_bias, config_.layernorm_eps);
  const Matrix qf = linear(x, *w.w_q, w.b_q);
  const Matrix kf = linear(x, *w.w_k, w.b_k);
  const Matrix vf = linear(x, *w.w_v, w.b_v);
  const Index dh = config_.head_dim();
  q.clear();
  k.clear();
  v.clear();
  for (int h = 0; h < config_.heads; ++h) {
    q.push_back(qf.middleCols(h * dh, dh));
    k.push_back(kf.middleCols(h * dh, dh));
    v.push_back(vf.middleCols(h * dh, dh));
  }
}

TokenState VisionTower::attention_layer(const TokenState& state, int layer, AttentionStack& stack,
                                        LayerHook* hook) const {
  if (layer < 0 || layer >= config_.layers) throw ParameterError("layer index out of range");
  const auto& w = layers_[static_cast<std::size_t>(layer)];
  std::vector<Matrix> q, k, v;
  project_qkv(state, layer, q, k, v);
  const auto qk = attention_maps(q, k);
  const auto kk = attention_maps(k, k);
  const auto qq = attention_maps(q, q);

  std::vector<Matrix> attn = qk;
  LayerContext ctx{layer + 1, config_, state, q, k, v, stack};
  if (hook) {
    // The hook sees this layer's qk/kk/qq through the stack, so record the
    // unmodified matrices first and the applied attention afterwards.
    stack.push_layer(qk, kk, qq);
    hook->on_attention(ctx, attn);
    if (attn.size() != qk.size()) throw ContractError("hook changed the number of attention heads");
    for (std::size_t h = 0; h < attn.size(); ++h) {
      if (attn[h].rows() != qk[h].rows() || attn[h].cols() != qk[h].cols()) {
        throw ContractError("hook changed the attention shape");
      }
      if (options_.validate_hooks && !is_row_stochastic(attn[h])) {
        throw ContractError("layer " + std::to_string(layer + 1) + " head " + std::to_string(h) +
                            ": hooked attention is not row-stochastic");
      }
    }
    stack.set_applied(attn);
  } else {
    stack.push_layer(qk, kk, qq);
  }

  const Index tokens = state.embeddings.rows();
  const Index dh = config_.head_dim();
  Matrix heads(tokens, config_.width);
  for (int h = 0; h < config_.heads; ++h) heads.middleCols(h * dh, dh) = matmul(attn[static_cast<std::size_t>(h)], v[static_cast<std::size_t>(h)]);

  TokenState out;
  out.layer = state.layer + 1;
  out.grid_side = state.grid_side;
  out.embeddings = state.embeddings + linear(heads, *w.w_o, w.b_o);
  const Matrix y = layernorm_rows(out.embeddings, w.norm2_gain, w.norm2_bias, config_.layernorm_eps);
  out.embeddings += linear(activation(linear(y, *w.w_fc1, w.b_fc1)), *w.w_fc2, w.b_fc2);

  if (hook) hook->on_output(ctx, out);
  if (out.embeddings.rows() != tokens || out.embeddings.cols() != config_.width) {
    throw ContractError("hook changed the embedding shape");
  }
  return out;
}

Matrix VisionTower::project(const Matrix& tokens) const {
  const Matrix y = layernorm_rows(tokens, post_norm_gain_, post_norm_bias_, config_.layernorm_eps);
  return matmul(y, projection_->transpose());
}

Matrix VisionTower::final_layer(const TokenState& state, const std::vector<Matrix>& attention) const {
  const int last = config_.layers - 1;
  const auto& w = layers_[static_cast<std::size_t>(last)];
  std::vector<Matrix> q, k, v;
  project_qkv(state, last, q, k, v);
  if (attention.size() != 1 && attention.size() != v.size()) {
    throw ContractError("final attention needs 1 or " + std::to_string(v.size()) + " matrices");
  }
  const Index tokens = state.embeddings.rows();
  const Index dh = config_.head_dim();
  Matrix heads(tokens, config_.width);
  for (std::size_t h = 0; h < v.size(); ++h) {
    const Matrix& a = attention.size() == 1 ? attention.front() : attention[h];
    if (a.rows() != tokens || a.cols() != tokens) throw ShapeError("final attention has the wrong size");
    if (!is_row_stochastic(a)) throw ContractError("final attention is not row-stochastic");
    heads.middleCols(static_cast<Index>(h) * dh, dh) = matmul(a, v[h]);
  }
  return project(linear(heads, *w.w_o, w.b_o));
}

TowerOutput VisionTower::forward(const Image& window, std::optional<FinalAttention> final_attention,
                                 LayerHook* hook) const {
  TowerOutput out;
  TokenState state = embed_patches(window);
  out.stack = AttentionStack(state.embeddings.rows(), config_.heads, options_.keep_per_head);
  const int last = config_.layers - 1;
  for (int l = 0; l < last; ++l) {
    if (options_.keep_states) out.states.push_back(state);
    state = attention_layer(state, l, out.stack, hook);
  }
  if (options_.keep_states) out.states.push_back(state);

  if (!final_attention) {
    state = attention_layer(state, last, out.stack, nullptr);
    out.features = project(state.embeddings);
    return out;
  }

  std::vector<Matrix> q, k, v;
  project_qkv(state, last, q, k, v);
  const auto kk = attention_maps(k, k);
  const auto qq = attention_maps(q, q);
  out.stack.push_layer(attention_maps(q, k), kk, qq);

  std::vector<Matrix> attn;
  switch (*final_attention) {
    case FinalAttention::KkAvg: attn.push_back(out.stack.kk_cumulative_average()); break;
    case FinalAttention::QqAvg: attn.push_back(out.stack.qq_cumulative_average()); break;
    case FinalAttention::KkLast: attn = kk; break;
    case FinalAttention::QqLast: attn = qq; break;
  }
  out.features = final_layer(state, attn);
  return out;
}

}  // namespace refocus
