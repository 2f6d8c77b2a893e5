#include "refocus/checkpoint.hpp"

#include <random>

#include "refocus/errors.hpp"
#include "refocus/safetensors.hpp"

namespace refocus {

namespace {

std::string shape_str(const std::vector<std::int64_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool shape_matches(const std::vector<std::int64_t>& want, const std::vector<std::int64_t>& got) {
  if (want.size() != got.size()) return false;
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i] >= 0 && want[i] != got[i]) return false;
  }
  return true;
}

Tensor to_tensor(const std::vector<std::int64_t>& shape, const std::vector<double>& values) {
  Tensor t;
  t.shape = shape;
  const Index rows = shape.empty() ? 1 : shape[0];
  const Index cols = rows == 0 ? 0 : static_cast<Index>(values.size()) / rows;
  // row-major payload into a column-major matrix
  t.data = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), rows, cols);
  return t;
}

std::vector<double> to_row_major(const Tensor& t) {
  std::vector<double> out(static_cast<std::size_t>(t.data.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.data(), t.data.rows(), t.data.cols()) = t.data;
  return out;
}

}  // namespace

std::vector<TensorSpec> required_tensors(const ModelConfig& c) {
  const std::int64_t d = c.width;
  const std::int64_t p = c.patch_size;
  const std::int64_t n = c.num_patches();
  std::vector<TensorSpec> specs = {
      {"class_embedding", "vision_model.embeddings.class_embedding", {d}},
      {"patch_embedding", "vision_model.embeddings.patch_embedding.weight", {d, 3, p, p}},
      {"position_embedding", "vision_model.embeddings.position_embedding.weight", {n + 1, d}},
      {"pre_norm.gain", "vision_model.pre_layrnorm.weight", {d}, true},
      {"pre_norm.bias", "vision_model.pre_layrnorm.bias", {d}, true},
  };
  for (int l = 0; l < c.layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    const std::string kp = "vision_model.encoder.layers." + std::to_string(l) + ".";
    const std::vector<TensorSpec> layer = {
        {lp + "norm1.gain", kp + "layer_norm1.weight", {d}},
        {lp + "norm1.bias", kp + "layer_norm1.bias", {d}},
        {lp + "W_q", kp + "self_attn.q_proj.weight", {d, d}},
        {lp + "b_q", kp + "self_attn.q_proj.bias", {d}},
        {lp + "W_k", kp + "self_attn.k_proj.weight", {d, d}},
        {lp + "b_k", kp + "self_attn.k_proj.bias", {d}},
        {lp + "W_v", kp + "self_attn.v_proj.weight", {d, d}},
        {lp + "b_v", kp + "self_attn.v_proj.bias", {d}},
        {lp + "W_o", kp + "self_attn.out_proj.weight", {d, d}},
        {lp + "b_o", kp + "self_attn.out_proj.bias", {d}},
        {lp + "norm2.gain", kp + "layer_norm2.weight", {d}},
        {lp + "norm2.bias", kp + "layer_norm2.bias", {d}},
        {lp + "W_fc1", kp + "mlp.fc1.weight", {-1, d}},
        {lp + "b_fc1", kp + "mlp.fc1.bias", {-1}},
        {lp + "W_fc2", kp + "mlp.fc2.weight", {d, -1}},
        {lp + "b_fc2", kp + "mlp.fc2.bias", {d}},
    };
    specs.insert(specs.end(), layer.begin(), layer.end());
  }
  specs.push_back({"post_norm.gain", "vision_model.post_layernorm.weight", {d}});
  specs.push_back({"post_norm.bias", "vision_model.post_layernorm.bias", {d}});
  specs.push_back({"visual_projection", "visual_projection.weight", {c.shared_width, d}});
  return specs;
}

const Tensor& CheckpointStore::tensor(const std::string& key) const {
  auto it = tensors_.find(key);
  if (it == tensors_.end()) throw DataError("tensor '" + key + "' not loaded");
  return it->second;
}

Vector CheckpointStore::vector(const std::string& key) const {
  const auto& t = tensor(key);
  if (t.shape.size() != 1) throw ShapeError("tensor '" + key + "' is not 1-D");
  return t.data.col(0);
}

CheckpointStore load_checkpoint(const std::string& path, const ModelConfig& config) {
  config.validate();
  const auto file = SafetensorsFile::open(path);
  std::map<std::string, Tensor> tensors;
  for (const auto& spec : required_tensors(config)) {
    if (!file.contains(spec.key)) {
      if (spec.optional) continue;
      throw MissingTensorError(spec.logical, spec.key);
    }
    const auto& e = file.entry(spec.key);
    if (!shape_matches(spec.shape, e.shape)) {
      throw ShapeError("tensor '" + spec.logical + "' (" + spec.key + ") has shape " + shape_str(e.shape) +
                       ", expected " + shape_str(spec.shape));
    }
    tensors.emplace(spec.key, to_tensor(e.shape, file.read_values(spec.key)));
  }
  for (int l = 0; l < config.layers; ++l) {
    const std::string kp = "vision_model.encoder.layers." + std::to_string(l) + ".mlp.";
    const auto hidden = tensors.at(kp + "fc1.weight").shape[0];
    if (tensors.at(kp + "fc1.bias").shape[0] != hidden || tensors.at(kp + "fc2.weight").shape[1] != hidden) {
      throw ShapeError("layer" + std::to_string(l) + " MLP hidden widths disagree");
    }
  }
  const bool has_gain = tensors.count("vision_model.pre_layrnorm.weight") > 0;
  const bool has_bias = tensors.count("vision_model.pre_layrnorm.bias") > 0;
  if (has_gain != has_bias) throw DataError("pre-tower norm has only one of gain/bias");
  return CheckpointStore(std::move(tensors), sha256_file(path));
}

void write_checkpoint(const std::string& path, const CheckpointStore& store) {
  std::vector<NamedTensor> out;
  for (const auto& [key, t] : store.tensors()) out.push_back({key, t.shape, to_row_major(t)});
  write_safetensors(path, out, DType::F32);
}

CheckpointStore make_random_checkpoint(const ModelConfig& config, std::uint64_t seed, double scale,
                                       int mlp_width) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, static_cast<float>(scale));
  const std::int64_t hidden = mlp_width > 0 ? mlp_width : 4 * config.width;
  std::map<std::string, Tensor> tensors;
  for (auto spec : required_tensors(config)) {
    for (auto& s : spec.shape) {
      if (s < 0) s = hidden;
    }
    std::int64_t numel = 1;
    for (auto s : spec.shape) numel *= s;
    std::vector<double> values(static_cast<std::size_t>(numel));
    const bool is_gain = spec.logical.find(".gain") != std::string::npos;
    for (auto& v : values) v = is_gain ? static_cast<double>(1.0f + normal(rng)) : static_cast<double>(normal(rng));
    tensors.emplace(spec.key, to_tensor(spec.shape, values));
  }
  return CheckpointStore(std::move(tensors), "random:" + std::to_string(seed));
}

}  // namespace refocus
