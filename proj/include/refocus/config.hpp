#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "refocus/types.hpp"

namespace refocus {

enum class Variant { B16, L14, Custom };
enum class Activation { QuickGelu, Gelu };
/// Softmax temperature convention: sqrt(d/H) (checkpoint convention) or sqrt(d).
enum class AttentionScale { Head, Width };

/// Inclusive 1-based layer interval; `last == 0` means "through the last layer".
struct LayerRange {
  int first = 1;
  int last = 0;

  bool contains(int layer, int num_layers) const {
    const int hi = last == 0 ? num_layers : last;
    return layer >= first && layer <= hi;
  }
  bool operator==(const LayerRange&) const = default;
};

/// Architecture hyperparameters plus the refocus parameters.
struct ModelConfig {
  Variant variant = Variant::Custom;
  int layers = 12;
  int heads = 12;
  int width = 768;
  int shared_width = 512;
  int patch_size = 16;
  int image_size = 224;
  std::vector<Index> distraction_dims;
  double tau = 5.0 / 768.0;
  double beta = 0.7;
  bool joint_rule = false;
  double attn_weight_floor = 15.0;
  LayerRange redistribution_layers;
  Activation activation = Activation::QuickGelu;
  AttentionScale attention_scale = AttentionScale::Head;
  double layernorm_eps = 1e-5;
  /// Use |sum_k f[k]| as the denominator of the embedding-weight ratio.
  bool abs_denominator = false;

  int grid_side() const { return image_size / patch_size; }
  int num_patches() const { return grid_side() * grid_side(); }
  int head_dim() const { return width / heads; }
  double attention_scale_factor() const;

  /// Throws ParameterError on any violated invariant.
  void validate() const;

  static ModelConfig preset(Variant v);
};

/// Distraction dimensions of the ViT-B/16 checkpoint.
inline const std::vector<Index> kB16DistractionDims = {4, 162, 189, 326, 429, 474, 633, 713};
/// Distraction dimensions of the ViT-L/14 checkpoint.
inline const std::vector<Index> kL14DistractionDims = {250, 261, 437, 650, 720, 779, 936, 1005};

enum class Mode { Refocus, KkProxyBaseline, PlainClip, Suppression };
enum class SuppressionStrategy { NegInfMask, LowPass, MeanFilter, MedianFilter };
enum class ThresholdRule { Mean, Otsu };
enum class SimilaritySource { Qk, Qq, Kk, KkCumAvg };
/// Attention used in place of the last layer's query-key attention.
enum class FinalAttention { KkAvg, KkLast, QqAvg, QqLast };

struct RunConfig {
  ModelConfig model;
  int window = 224;
  int stride = 112;
  int short_side = 336;
  Mode mode = Mode::Refocus;
  SuppressionStrategy suppression = SuppressionStrategy::MeanFilter;
  ThresholdRule threshold_rule = ThresholdRule::Mean;
  SimilaritySource similarity_source = SimilaritySource::KkCumAvg;
  FinalAttention final_attention = FinalAttention::KkAvg;
  int receptive_field = 3;
  bool attention_redistribution = true;
  bool embedding_redistribution = true;
  /// When false the budget goes to every non-distraction patch token.
  bool defocus_localization = true;
  std::array<double, 3> pixel_mean{0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> pixel_std{0.26862954, 0.26130258, 0.27577711};
  std::string output_dir = "out";
  int threads = 1;

  void validate() const;
};

std::string to_string(Variant v);
std::string to_string(Activation v);
std::string to_string(AttentionScale v);
std::string to_string(Mode v);
std::string to_string(SuppressionStrategy v);
std::string to_string(ThresholdRule v);
std::string to_string(SimilaritySource v);
std::string to_string(FinalAttention v);
std::string to_string(const LayerRange& r);
/// Mode string including the strategy suffix, e.g. "suppression:mean_filter".
std::string mode_string(const RunConfig& run);

Variant parse_variant(std::string_view s);
Activation parse_activation(std::string_view s);
AttentionScale parse_attention_scale(std::string_view s);
SuppressionStrategy parse_suppression(std::string_view s);
ThresholdRule parse_threshold_rule(std::string_view s);
SimilaritySource parse_similarity_source(std::string_view s);
FinalAttention parse_final_attention(std::string_view s);
/// Accepts "N" (single layer) or "A-B".
LayerRange parse_layer_range(std::string_view s);
/// Parses "refocus", "kk_proxy_baseline", "plain_clip" or "suppression:<strategy>".
void apply_mode(std::string_view s, RunConfig& run);

nlohmann::json to_json(const ModelConfig& m);
nlohmann::json to_json(const RunConfig& r);
/// Fields absent from `j` keep their value in `base`; a "variant" key resets
/// to the named preset before the remaining fields apply.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::string& path);

}  // namespace refocus
