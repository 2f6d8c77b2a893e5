#include <gtest/gtest.h>

#include <random>

#include "reference_forward.hpp"
#include "refocus/errors.hpp"
#include "refocus/vit.hpp"
#include "test_support.hpp"

using namespace refocus;
using testing_support::random_image;
using testing_support::random_stochastic;
using testing_support::tiny_checkpoint;
using testing_support::tiny_model;

namespace {

TowerOptions checked_options() {
  TowerOptions o;
  o.validate_hooks = true;
  return o;
}

class ScaleRestoreHook : public LayerHook {
 public:
  void on_attention(const LayerContext&, std::vector<Matrix>& attention) override {
    for (auto& a : attention) {
      a *= 4.0;
      a *= 0.25;
    }
  }
};

class RecordingHook : public LayerHook {
 public:
  std::vector<int> attention_layers;
  std::vector<int> output_layers;
  std::vector<Index> stack_depths;
  void on_attention(const LayerContext& ctx, std::vector<Matrix>& attention) override {
    attention_layers.push_back(ctx.layer);
    stack_depths.push_back(ctx.stack.layers());
    EXPECT_EQ(static_cast<int>(attention.size()), ctx.config.heads);
    EXPECT_EQ(static_cast<int>(ctx.q.size()), ctx.config.heads);
    EXPECT_EQ(ctx.input.layer, ctx.layer - 1);
  }
  void on_output(const LayerContext& ctx, TokenState& output) override {
    output_layers.push_back(ctx.layer);
    EXPECT_EQ(output.layer, ctx.layer);
  }
};

class BreakRowsHook : public LayerHook {
 public:
  void on_attention(const LayerContext&, std::vector<Matrix>& attention) override { attention[0](1, 1) += 0.5; }
};

class WrongHeadCountHook : public LayerHook {
 public:
  void on_attention(const LayerContext&, std::vector<Matrix>& attention) override { attention.pop_back(); }
};

Matrix concat_heads(const std::vector<Matrix>& parts) {
  Index cols = 0;
  for (const auto& p : parts) cols += p.cols();
  Matrix out(parts.front().rows(), cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  return out;
}

}  // namespace

TEST(VisionTower, PlainForwardMatchesNaiveReference) {
  const auto config = tiny_model();
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const auto ckpt = tiny_checkpoint(seed);
    std::mt19937_64 rng(seed + 100);
    const Image window = random_image(config.image_size, config.image_size, rng);
    const auto ref = reference::forward(*ckpt, config, window);
    TowerOptions opts = checked_options();
    opts.keep_states = true;
    opts.keep_per_head = true;
    const VisionTower tower(ckpt, config, opts);
    const auto out = tower.forward(window, std::nullopt);
    EXPECT_LE(reference::max_abs_diff(ref.plain_features, out.features), 1e-4) << "seed " << seed;
    ASSERT_EQ(out.states.size(), static_cast<std::size_t>(config.layers));
    for (int l = 0; l < config.layers; ++l) {
      EXPECT_LE(reference::max_abs_diff(ref.states[static_cast<std::size_t>(l)], out.states[l].embeddings), 1e-4);
      for (int h = 0; h < config.heads; ++h) {
        EXPECT_LE(reference::max_abs_diff(ref.kk[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)],
                                          out.stack.kk_heads(l)[static_cast<std::size_t>(h)]),
                  1e-6);
      }
    }
  }
}

TEST(VisionTower, LastLayerRuleMatchesNaiveReference) {
  const auto config = tiny_model();
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    const auto ckpt = tiny_checkpoint(seed);
    std::mt19937_64 rng(seed);
    const Image window = random_image(config.image_size, config.image_size, rng);
    const auto ref = reference::forward(*ckpt, config, window);
    const VisionTower tower(ckpt, config, checked_options());
    const auto out = tower.forward(window, FinalAttention::KkAvg);
    EXPECT_LE(reference::max_abs_diff(ref.kk_features, out.features), 1e-4) << "seed " << seed;
  }
}

TEST(VisionTower, WidthScaleIsDistinguishedFromHeadScale) {
  auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(9);
  std::mt19937_64 rng(9);
  const Image window = random_image(config.image_size, config.image_size, rng);
  const auto ref = reference::forward(*ckpt, config, window);
  EXPECT_DOUBLE_EQ(config.attention_scale_factor(), 1.0 / std::sqrt(8.0));
  const auto head = VisionTower(ckpt, config).forward(window, std::nullopt);
  config.attention_scale = AttentionScale::Width;
  EXPECT_DOUBLE_EQ(config.attention_scale_factor(), 1.0 / std::sqrt(16.0));
  const auto width = VisionTower(ckpt, config).forward(window, std::nullopt);
  EXPECT_LE(reference::max_abs_diff(ref.plain_features, head.features), 1e-4);
  EXPECT_GT(reference::max_abs_diff(ref.plain_features, width.features), 1e-3);
}

TEST(VisionTower, EmbedPatchesShapes) {
  const auto config = tiny_model();
  const VisionTower tower(tiny_checkpoint(), config);
  std::mt19937_64 rng(1);
  const auto state = tower.embed_patches(random_image(24, 24, rng));
  EXPECT_EQ(state.layer, 0);
  EXPECT_EQ(state.grid_side, 3);
  EXPECT_EQ(state.num_patches(), 9);
  EXPECT_EQ(state.width(), 16);
  EXPECT_THROW(tower.embed_patches(random_image(24, 32, rng)), ShapeError);
  EXPECT_THROW(tower.embed_patches(random_image(16, 16, rng)), ShapeError);
}

TEST(VisionTower, B16GridHas196Patches) {
  const auto b16 = ModelConfig::preset(Variant::B16);
  EXPECT_EQ(b16.grid_side(), 14);
  EXPECT_EQ(b16.num_patches(), 196);
}

TEST(VisionTower, ZeroImageAndKernelGivePositionalEmbeddings) {
  const auto config = tiny_model();
  const auto base = make_random_checkpoint(config, 3);
  std::map<std::string, Tensor> tensors;
  for (const auto& [k, t] : base.tensors()) {
    if (k.find("pre_layrnorm") != std::string::npos) continue;
    tensors.emplace(k, t);
  }
  tensors.at("vision_model.embeddings.patch_embedding.weight").data.setZero();
  const auto ckpt = std::make_shared<const CheckpointStore>(tensors, "");
  const VisionTower tower(ckpt, config);
  const auto state = tower.embed_patches(Image(24, 24, 3, 0.0));
  const Matrix& pos = ckpt->matrix("vision_model.embeddings.position_embedding.weight");
  const Vector cls = ckpt->vector("vision_model.embeddings.class_embedding");
  EXPECT_EQ(state.patches(), pos.bottomRows(9));
  EXPECT_EQ(Vector(state.embeddings.row(0).transpose()), Vector(cls + pos.row(0).transpose()));
}

TEST(VisionTower, IdentityHookEqualsNoHook) {
  const auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(12);
  std::mt19937_64 rng(12);
  const Image window = random_image(24, 24, rng);
  const VisionTower tower(ckpt, config, checked_options());
  LayerHook identity;
  for (auto mode : {std::optional<FinalAttention>{}, std::optional<FinalAttention>{FinalAttention::KkAvg}}) {
    const auto a = tower.forward(window, mode);
    const auto b = tower.forward(window, mode, &identity);
    EXPECT_EQ(a.features, b.features);
  }
}

TEST(VisionTower, ScaleThenRestoreHookIsBitIdentical) {
  const auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(13);
  std::mt19937_64 rng(13);
  const Image window = random_image(24, 24, rng);
  const VisionTower tower(ckpt, config, checked_options());
  ScaleRestoreHook hook;
  const auto a = tower.forward(window, FinalAttention::KkAvg);
  const auto b = tower.forward(window, FinalAttention::KkAvg, &hook);
  EXPECT_EQ(a.features, b.features);
}

TEST(VisionTower, HookSeesEveryLayerButTheLast) {
  auto config = tiny_model();
  config.layers = 4;
  const auto ckpt = std::make_shared<const CheckpointStore>(make_random_checkpoint(config, 2));
  std::mt19937_64 rng(2);
  const Image window = random_image(24, 24, rng);
  const VisionTower tower(ckpt, config, checked_options());
  for (auto mode : {std::optional<FinalAttention>{}, std::optional<FinalAttention>{FinalAttention::KkAvg}}) {
    RecordingHook hook;
    tower.forward(window, mode, &hook);
    EXPECT_EQ(hook.attention_layers, (std::vector<int>{1, 2, 3}));
    EXPECT_EQ(hook.output_layers, (std::vector<int>{1, 2, 3}));
    EXPECT_EQ(hook.stack_depths, (std::vector<Index>{1, 2, 3}));
  }
}

TEST(VisionTower, NonStochasticHookIsContractError) {
  const auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(14);
  std::mt19937_64 rng(14);
  const Image window = random_image(24, 24, rng);
  const VisionTower tower(ckpt, config, checked_options());
  BreakRowsHook broken;
  EXPECT_THROW(tower.forward(window, FinalAttention::KkAvg, &broken), ContractError);
  WrongHeadCountHook short_heads;
  EXPECT_THROW(tower.forward(window, FinalAttention::KkAvg, &short_heads), ContractError);
}

TEST(VisionTower, EveryRecordedAttentionIsRowStochastic) {
  const auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(15);
  std::mt19937_64 rng(15);
  const VisionTower tower(ckpt, config);
  const auto out = tower.forward(random_image(24, 24, rng), FinalAttention::KkAvg);
  ASSERT_EQ(out.stack.layers(), config.layers);
  for (int l = 0; l < config.layers; ++l) {
    EXPECT_TRUE(is_row_stochastic(out.stack.qk_mean(l)));
    EXPECT_TRUE(is_row_stochastic(out.stack.kk_mean(l)));
    EXPECT_TRUE(is_row_stochastic(out.stack.qq_mean(l)));
  }
  EXPECT_TRUE(is_row_stochastic(out.stack.kk_cumulative_average()));
  EXPECT_TRUE(out.features.allFinite());
  EXPECT_EQ(out.features.rows(), 10);
  EXPECT_EQ(out.features.cols(), config.shared_width);
}

TEST(VisionTower, LastLayerRuleChangesOnlyFinalFeatures) {
  const auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(16);
  std::mt19937_64 rng(16);
  const Image window = random_image(24, 24, rng);
  TowerOptions opts;
  opts.keep_states = true;
  const VisionTower tower(ckpt, config, opts);
  const auto plain = tower.forward(window, std::nullopt);
  const auto rule = tower.forward(window, FinalAttention::KkAvg);
  ASSERT_EQ(plain.states.size(), rule.states.size());
  for (std::size_t i = 0; i < plain.states.size(); ++i) EXPECT_EQ(plain.states[i].embeddings, rule.states[i].embeddings);
  EXPECT_GT((plain.features - rule.features).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FinalLayer, IdentityAttentionProjectsValues) {
  const auto config = tiny_model();
  const auto ckpt = tiny_checkpoint(17);
  std::mt19937_64 rng(17);
  const VisionTower tower(ckpt, config);
  AttentionStack stack(10, config.heads);
  const auto state = tower.attention_layer(tower.embed_patches(random_image(24, 24, rng)), 0, stack);
  std::vector<Matrix> q, k, v;
  tower.project_qkv(state, config.layers - 1, q, k, v);
  const std::string p = "vision_model.encoder.layers." + std::to_string(config.layers - 1) + ".self_attn.out_proj.";
  const Matrix o = (concat_heads(v) * ckpt->matrix(p + "weight").transpose()).rowwise() +
                   ckpt->vector(p + "bias").transpose();
  const Matrix want = tower.project(o);
  const Matrix got = tower.final_layer(state, {Matrix::Identity(10, 10)});
  EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FinalLayer, UniformAttentionGivesIdenticalRows) {
  const auto config = tiny_model();
  const VisionTower tower(tiny_checkpoint(18), config);
  std::mt19937_64 rng(18);
  const auto state = tower.embed_patches(random_image(24, 24, rng));
  const Matrix out = tower.final_layer(state, {Matrix::Constant(10, 10, 0.1)});
  for (Index i = 1; i < out.rows(); ++i) EXPECT_LE((out.row(i) - out.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FinalLayer, PerHeadAttentionMatchesSharedWhenEqual) {
  const auto config = tiny_model();
  const VisionTower tower(tiny_checkpoint(19), config);
  std::mt19937_64 rng(19);
  const auto state = tower.embed_patches(random_image(24, 24, rng));
  const Matrix a = random_stochastic(10, rng);
  const Matrix shared = tower.final_layer(state, {a});
  const Matrix per_head = tower.final_layer(state, {a, a});
  EXPECT_LE((shared - per_head).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FinalLayer, NonStochasticAttentionIsContractError) {
  const auto config = tiny_model();
  const VisionTower tower(tiny_checkpoint(20), config);
  std::mt19937_64 rng(20);
  const auto state = tower.embed_patches(random_image(24, 24, rng));
  EXPECT_THROW(tower.final_layer(state, {Matrix::Constant(10, 10, 0.2)}), ContractError);
  Matrix neg = Matrix::Identity(10, 10);
  neg(0, 0) = 1.5;
  neg(0, 1) = -0.5;
  EXPECT_THROW(tower.final_layer(state, {neg}), ContractError);
}

TEST(FinalLayer, WrongSizedAttentionIsShapeError) {
  const auto config = tiny_model();
  const VisionTower tower(tiny_checkpoint(20), config);
  std::mt19937_64 rng(20);
  const auto state = tower.embed_patches(random_image(24, 24, rng));
  EXPECT_THROW(tower.final_layer(state, {Matrix::Identity(9, 9)}), ShapeError);
}

TEST(AttentionStack, CumulativeAverageEqualsDirectMean) {
  std::mt19937_64 rng(21);
  const int heads = 3;
  const Index n = 6;
  AttentionStack stack(n, heads, true);
  std::vector<Matrix> all_kk, all_qk;
  for (int l = 0; l < 5; ++l) {
    std::vector<Matrix> qk, kk, qq;
    for (int h = 0; h < heads; ++h) {
      qk.push_back(random_stochastic(n, rng));
      kk.push_back(random_stochastic(n, rng));
      qq.push_back(random_stochastic(n, rng));
    }
    all_kk.insert(all_kk.end(), kk.begin(), kk.end());
    all_qk.insert(all_qk.end(), qk.begin(), qk.end());
    stack.push_layer(qk, kk, qq);
    EXPECT_EQ(stack.matrices_accumulated(), (l + 1) * heads);
    Matrix direct_kk = Matrix::Zero(n, n), direct_qk = Matrix::Zero(n, n);
    for (const auto& m : all_kk) direct_kk += m;
    for (const auto& m : all_qk) direct_qk += m;
    direct_kk /= static_cast<double>(all_kk.size());
    direct_qk /= static_cast<double>(all_qk.size());
    EXPECT_LE((stack.kk_cumulative_average() - direct_kk).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((stack.qk_cumulative_average() - direct_qk).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((stack.kk_mean(l) - (kk[0] + kk[1] + kk[2]) / 3.0).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(stack.applied_mean(l), stack.qk_mean(l));
    EXPECT_EQ(stack.kk_heads(l)[1], kk[1]);
  }
}

TEST(AttentionStack, PerHeadAccessRequiresOptIn) {
  AttentionStack stack(3, 1);
  stack.push_layer({Matrix::Identity(3, 3)}, {Matrix::Identity(3, 3)}, {Matrix::Identity(3, 3)});
  EXPECT_THROW(stack.kk_heads(0), ContractError);
  EXPECT_THROW(stack.qk_heads(0), ContractError);
}

TEST(AttentionStack, RecordsAppliedAttentionSeparately) {
  AttentionStack stack(2, 1);
  Matrix swapped(2, 2);
  swapped << 0, 1, 1, 0;
  stack.push_layer({Matrix::Identity(2, 2)}, {Matrix::Identity(2, 2)}, {Matrix::Identity(2, 2)});
  stack.set_applied({swapped});
  EXPECT_EQ(stack.applied_mean(0), swapped);
  EXPECT_EQ(stack.qk_mean(0), Matrix::Identity(2, 2));
}
