#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refocus/types.hpp"

namespace refocus {

/// Element types understood by the named-tensor container.
enum class DType { F64, F32, F16, BF16 };

std::size_t dtype_size(DType t);
std::string to_string(DType t);
DType parse_dtype(const std::string& s);

/// Header entry of one tensor.
struct TensorEntry {
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::int64_t numel() const;
};

/// Read-only view of a safetensors file: an 8-byte little-endian header
/// length, a JSON header mapping names to dtype/shape/offsets, then the raw
/// little-endian payload. Tensors are read lazily.
class SafetensorsFile {
 public:
  static SafetensorsFile open(const std::string& path);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const TensorEntry& entry(const std::string& name) const;
  std::vector<std::string> names() const;
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  const std::string& path() const { return path_; }

  /// Raw payload bytes of one tensor.
  std::vector<std::uint8_t> read_raw(const std::string& name) const;
  /// Values of one tensor converted to double, in row-major order.
  std::vector<double> read_values(const std::string& name) const;

 private:
  std::string path_;
  std::uint64_t payload_offset_ = 0;
  std::map<std::string, TensorEntry> entries_;
  std::map<std::string, std::string> metadata_;
};

/// Tensor to be written: row-major values.
struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> values;
};

void write_safetensors(const std::string& path, const std::vector<NamedTensor>& tensors,
                       DType dtype = DType::F32,
                       const std::map<std::string, std::string>& metadata = {});

/// Decodes little-endian elements of `dtype` into doubles.
std::vector<double> decode_values(const std::uint8_t* bytes, std::size_t count, DType dtype);

/// Lowercase hex SHA-256 of a byte range / of a whole file.
std::string sha256_hex(const std::uint8_t* data, std::size_t size);
std::string sha256_file(const std::string& path);

}  // namespace refocus
