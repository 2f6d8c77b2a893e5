#include "refocus/config.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>

#include "refocus/errors.hpp"

namespace refocus {

namespace {

template <typename Enum, std::size_t N>
Enum lookup(std::string_view s, const std::array<std::pair<std::string_view, Enum>, N>& table,
            std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  std::string valid;
  for (const auto& [name, value] : table) {
    if (!valid.empty()) valid += ", ";
    valid += name;
  }
  throw ParameterError("unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of: " +
                       valid + ")");
}

template <typename Enum, std::size_t N>
std::string name_of(Enum v, const std::array<std::pair<std::string_view, Enum>, N>& table) {
  for (const auto& [name, value] : table) {
    if (value == v) return std::string(name);
  }
  return "?";
}

constexpr std::array<std::pair<std::string_view, Variant>, 3> kVariants{{
    {"B16", Variant::B16}, {"L14", Variant::L14}, {"custom", Variant::Custom}}};
constexpr std::array<std::pair<std::string_view, Activation>, 2> kActivations{{
    {"quick_gelu", Activation::QuickGelu}, {"gelu", Activation::Gelu}}};
constexpr std::array<std::pair<std::string_view, AttentionScale>, 2> kScales{{
    {"head", AttentionScale::Head}, {"width", AttentionScale::Width}}};
constexpr std::array<std::pair<std::string_view, Mode>, 4> kModes{{
    {"refocus", Mode::Refocus},
    {"kk_proxy_baseline", Mode::KkProxyBaseline},
    {"plain_clip", Mode::PlainClip},
    {"suppression", Mode::Suppression}}};
constexpr std::array<std::pair<std::string_view, SuppressionStrategy>, 4> kStrategies{{
    {"neg_inf_mask", SuppressionStrategy::NegInfMask},
    {"low_pass", SuppressionStrategy::LowPass},
    {"mean_filter", SuppressionStrategy::MeanFilter},
    {"median_filter", SuppressionStrategy::MedianFilter}}};
constexpr std::array<std::pair<std::string_view, ThresholdRule>, 2> kRules{{
    {"mean", ThresholdRule::Mean}, {"otsu", ThresholdRule::Otsu}}};
constexpr std::array<std::pair<std::string_view, SimilaritySource>, 4> kSources{{
    {"qk", SimilaritySource::Qk},
    {"qq", SimilaritySource::Qq},
    {"kk", SimilaritySource::Kk},
    {"kk_cum_avg", SimilaritySource::KkCumAvg}}};
constexpr std::array<std::pair<std::string_view, FinalAttention>, 4> kFinal{{
    {"kk_avg", FinalAttention::KkAvg},
    {"kk_last", FinalAttention::KkLast},
    {"qq_avg", FinalAttention::QqAvg},
    {"qq_last", FinalAttention::QqLast}}};

int parse_int(std::string_view s, std::string_view what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(std::string(s), &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ParameterError("invalid " + std::string(what) + " '" + std::string(s) + "'");
  }
}

}  // namespace

double ModelConfig::attention_scale_factor() const {
  const double d = attention_scale == AttentionScale::Head ? head_dim() : width;
  return 1.0 / std::sqrt(d);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ParameterError("model config: " + msg); };
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (width < 1 || width % heads != 0) fail("width must be a positive multiple of heads");
  if (shared_width < 1) fail("shared_width must be >= 1");
  if (patch_size < 1 || image_size < 1) fail("patch_size and image_size must be >= 1");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not a multiple of patch_size " +
         std::to_string(patch_size));
  }
  if (!(tau > 0)) fail("tau must be positive");
  if (tau >= 1 && std::isfinite(tau)) {
    spdlog::warn("tau = {} >= 1: the distraction threshold exceeds the unit range", tau);
  }
  if (!(beta > 0 && beta < 1)) fail("beta must lie in (0, 1)");
  if (!(layernorm_eps > 0)) fail("layernorm_eps must be positive");
  for (Index dim : distraction_dims) {
    if (dim < 0 || dim >= width) fail("distraction dim " + std::to_string(dim) + " outside [0, width)");
  }
  if (redistribution_layers.first < 1) fail("redistribution layer range must start at >= 1");
  if (redistribution_layers.last != 0 && redistribution_layers.last < redistribution_layers.first) {
    fail("redistribution layer range is empty");
  }
  if (redistribution_layers.last > layers) fail("redistribution layer range exceeds layer count");
}

ModelConfig ModelConfig::preset(Variant v) {
  ModelConfig m;
  m.variant = v;
  switch (v) {
    case Variant::B16:
      m.layers = 12;
      m.heads = 12;
      m.width = 768;
      m.shared_width = 512;
      m.patch_size = 16;
      m.image_size = 224;
      m.distraction_dims = kB16DistractionDims;
      m.tau = 5.0 / 768.0;
      m.joint_rule = false;
      break;
    case Variant::L14:
      m.layers = 24;
      m.heads = 16;
      m.width = 1024;
      m.shared_width = 768;
      m.patch_size = 14;
      m.image_size = 224;
      m.distraction_dims = kL14DistractionDims;
      m.tau = 6.0 / 1024.0;
      m.joint_rule = true;
      m.attn_weight_floor = 15.0;
      break;
    case Variant::Custom:
      break;
  }
  return m;
}

void RunConfig::validate() const {
  model.validate();
  auto fail = [](const std::string& msg) { throw ParameterError("run config: " + msg); };
  if (window != model.image_size) {
    fail("window " + std::to_string(window) + " differs from model image_size " +
         std::to_string(model.image_size));
  }
  if (stride < 1 || stride > window) fail("stride must lie in [1, window]");
  if (short_side < window) fail("short_side must be >= window");
  if (receptive_field < 3 || receptive_field % 2 == 0) fail("receptive_field must be an odd size >= 3");
  if (threads < 1) fail("threads must be >= 1");
  for (double s : pixel_std) {
    if (!(s > 0)) fail("pixel_std entries must be positive");
  }
}

std::string to_string(Variant v) { return name_of(v, kVariants); }
std::string to_string(Activation v) { return name_of(v, kActivations); }
std::string to_string(AttentionScale v) { return name_of(v, kScales); }
std::string to_string(Mode v) { return name_of(v, kModes); }
std::string to_string(SuppressionStrategy v) { return name_of(v, kStrategies); }
std::string to_string(ThresholdRule v) { return name_of(v, kRules); }
std::string to_string(SimilaritySource v) { return name_of(v, kSources); }
std::string to_string(FinalAttention v) { return name_of(v, kFinal); }

std::string to_string(const LayerRange& r) {
  if (r.last == 0) return std::to_string(r.first) + "-last";
  if (r.first == r.last) return std::to_string(r.first);
  return std::to_string(r.first) + "-" + std::to_string(r.last);
}

std::string mode_string(const RunConfig& run) {
  if (run.mode == Mode::Suppression) return "suppression:" + to_string(run.suppression);
  return to_string(run.mode);
}

Variant parse_variant(std::string_view s) { return lookup(s, kVariants, "model variant"); }
Activation parse_activation(std::string_view s) { return lookup(s, kActivations, "activation"); }
AttentionScale parse_attention_scale(std::string_view s) { return lookup(s, kScales, "attention scale"); }
SuppressionStrategy parse_suppression(std::string_view s) {
  return lookup(s, kStrategies, "suppression strategy");
}
ThresholdRule parse_threshold_rule(std::string_view s) { return lookup(s, kRules, "threshold rule"); }
SimilaritySource parse_similarity_source(std::string_view s) {
  return lookup(s, kSources, "similarity source");
}
FinalAttention parse_final_attention(std::string_view s) { return lookup(s, kFinal, "final attention"); }

LayerRange parse_layer_range(std::string_view s) {
  LayerRange r;
  const auto dash = s.find('-');
  if (dash == std::string_view::npos) {
    r.first = r.last = parse_int(s, "layer range");
  } else {
    r.first = parse_int(s.substr(0, dash), "layer range");
    const auto tail = s.substr(dash + 1);
    r.last = tail == "last" ? 0 : parse_int(tail, "layer range");
  }
  if (r.first < 1 || (r.last != 0 && r.last < r.first)) {
    throw ParameterError("invalid layer range '" + std::string(s) + "'");
  }
  return r;
}

void apply_mode(std::string_view s, RunConfig& run) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) {
    run.mode = lookup(s, kModes, "mode");
    if (run.mode == Mode::Suppression) throw ParameterError("mode 'suppression' needs a ':<strategy>' suffix");
    return;
  }
  if (s.substr(0, colon) != "suppression") throw ParameterError("unknown mode '" + std::string(s) + "'");
  run.mode = Mode::Suppression;
  run.suppression = parse_suppression(s.substr(colon + 1));
}

nlohmann::json to_json(const ModelConfig& m) {
  return {
      {"variant", to_string(m.variant)},
      {"layers", m.layers},
      {"heads", m.heads},
      {"width", m.width},
      {"shared_width", m.shared_width},
      {"patch_size", m.patch_size},
      {"image_size", m.image_size},
      {"distraction_dims", m.distraction_dims},
      {"tau", m.tau},
      {"beta", m.beta},
      {"joint_rule", m.joint_rule},
      {"attn_weight_floor", m.attn_weight_floor},
      {"redistribution_layers", to_string(m.redistribution_layers)},
      {"activation", to_string(m.activation)},
      {"attention_scale", to_string(m.attention_scale)},
      {"layernorm_eps", m.layernorm_eps},
      {"abs_denominator", m.abs_denominator},
  };
}

nlohmann::json to_json(const RunConfig& r) {
  return {
      {"model", to_json(r.model)},
      {"window", r.window},
      {"stride", r.stride},
      {"short_side", r.short_side},
      {"mode", mode_string(r)},
      {"threshold_rule", to_string(r.threshold_rule)},
      {"similarity_source", to_string(r.similarity_source)},
      {"final_attention", to_string(r.final_attention)},
      {"receptive_field", r.receptive_field},
      {"attention_redistribution", r.attention_redistribution},
      {"embedding_redistribution", r.embedding_redistribution},
      {"defocus_localization", r.defocus_localization},
      {"pixel_mean", r.pixel_mean},
      {"pixel_std", r.pixel_std},
      {"output_dir", r.output_dir},
      {"threads", r.threads},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base) {
  try {
    ModelConfig m = j.contains("variant") ? ModelConfig::preset(parse_variant(j.at("variant").get<std::string>()))
                                          : std::move(base);
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("layers", m.layers);
    get("heads", m.heads);
    get("width", m.width);
    get("shared_width", m.shared_width);
    get("patch_size", m.patch_size);
    get("image_size", m.image_size);
    get("distraction_dims", m.distraction_dims);
    get("beta", m.beta);
    get("joint_rule", m.joint_rule);
    get("attn_weight_floor", m.attn_weight_floor);
    get("layernorm_eps", m.layernorm_eps);
    get("abs_denominator", m.abs_denominator);
    if (j.contains("tau")) {
      m.tau = j.at("tau").get<double>();
    } else if (j.contains("width") && m.variant == Variant::Custom) {
      m.tau = 5.0 / m.width;
    }
    if (j.contains("redistribution_layers")) {
      m.redistribution_layers = parse_layer_range(j.at("redistribution_layers").get<std::string>());
    }
    if (j.contains("activation")) m.activation = parse_activation(j.at("activation").get<std::string>());
    if (j.contains("attention_scale")) {
      m.attention_scale = parse_attention_scale(j.at("attention_scale").get<std::string>());
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("model config: ") + e.what());
  }
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base) {
  try {
    RunConfig r = std::move(base);
    if (j.contains("model")) r.model = model_config_from_json(j.at("model"), r.model);
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    r.window = r.model.image_size;
    get("window", r.window);
    get("stride", r.stride);
    get("short_side", r.short_side);
    get("receptive_field", r.receptive_field);
    get("attention_redistribution", r.attention_redistribution);
    get("embedding_redistribution", r.embedding_redistribution);
    get("defocus_localization", r.defocus_localization);
    get("pixel_mean", r.pixel_mean);
    get("pixel_std", r.pixel_std);
    get("output_dir", r.output_dir);
    get("threads", r.threads);
    if (j.contains("mode")) apply_mode(j.at("mode").get<std::string>(), r);
    if (j.contains("threshold_rule")) r.threshold_rule = parse_threshold_rule(j.at("threshold_rule").get<std::string>());
    if (j.contains("similarity_source")) {
      r.similarity_source = parse_similarity_source(j.at("similarity_source").get<std::string>());
    }
    if (j.contains("final_attention")) {
      r.final_attention = parse_final_attention(j.at("final_attention").get<std::string>());
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("run config: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError("config file '" + path + "': " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace refocus
