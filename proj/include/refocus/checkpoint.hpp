#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "refocus/config.hpp"
#include "refocus/types.hpp"

namespace refocus {

/// One named tensor. `data` is the row-major tensor flattened to
/// shape[0] x prod(shape[1..]) (a column vector for 1-D tensors).
struct Tensor {
  std::vector<std::int64_t> shape;
  Matrix data;
};

/// Where a logical weight lives in the checkpoint and the shape it must have
/// (-1 entries accept any extent).
struct TensorSpec {
  std::string logical;
  std::string key;
  std::vector<std::int64_t> shape;
  bool optional = false;
};

/// Tensors the vision tower needs for `config`, in load order.
std::vector<TensorSpec> required_tensors(const ModelConfig& config);

/// Immutable set of named tensors backing one vision tower.
class CheckpointStore {
 public:
  CheckpointStore() = default;
  CheckpointStore(std::map<std::string, Tensor> tensors, std::string checksum)
      : tensors_(std::move(tensors)), checksum_(std::move(checksum)) {}

  bool contains(const std::string& key) const { return tensors_.count(key) > 0; }
  const Tensor& tensor(const std::string& key) const;
  const Matrix& matrix(const std::string& key) const { return tensor(key).data; }
  /// 1-D tensor as a vector.
  Vector vector(const std::string& key) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  /// SHA-256 of the checkpoint file.
  const std::string& checksum() const { return checksum_; }

 private:
  std::map<std::string, Tensor> tensors_;
  std::string checksum_;
};

/// Reads and validates every tensor required by `config`. Throws
/// MissingTensorError naming the logical tensor, or ShapeError.
CheckpointStore load_checkpoint(const std::string& path, const ModelConfig& config);

/// Writes a store as an F32 safetensors file.
void write_checkpoint(const std::string& path, const CheckpointStore& store);

/// Random-weight checkpoint for `config` (weights ~ N(0, scale^2)).
CheckpointStore make_random_checkpoint(const ModelConfig& config, std::uint64_t seed, double scale = 0.2,
                                       int mlp_width = 0);

}  // namespace refocus
