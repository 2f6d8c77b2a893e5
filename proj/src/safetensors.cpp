#include "refocus/safetensors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>

#include "json.hpp"
#include "refocus/errors.hpp"

namespace refocus {

namespace {

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

template <typename T>
T load_le(const std::uint8_t* p) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

template <typename T>
void store_le(std::uint8_t* p, T v) {
  std::memcpy(p, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(p, p + sizeof(T));
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F64: return 8;
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
  }
  return 0;
}

std::string to_string(DType t) {
  switch (t) {
    case DType::F64: return "F64";
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "?";
}

DType parse_dtype(const std::string& s) {
  if (s == "F64") return DType::F64;
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  throw DecodeError("unsupported tensor dtype '" + s + "'");
}

std::int64_t TensorEntry::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::vector<double> decode_values(const std::uint8_t* bytes, std::size_t count, DType dtype) {
  std::vector<double> out(count);
  const std::size_t w = dtype_size(dtype);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* p = bytes + i * w;
    switch (dtype) {
      case DType::F64: out[i] = load_le<double>(p); break;
      case DType::F32: out[i] = load_le<float>(p); break;
      case DType::F16: out[i] = half_to_float(load_le<std::uint16_t>(p)); break;
      case DType::BF16:
        out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(load_le<std::uint16_t>(p)) << 16);
        break;
    }
  }
  return out;
}

SafetensorsFile SafetensorsFile::open(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  std::uint8_t len_bytes[8];
  if (file_size < 8 || !in.read(reinterpret_cast<char*>(len_bytes), 8)) {
    throw DecodeError("'" + path + "' is too short for a tensor container");
  }
  const std::uint64_t header_len = read_u64_le(len_bytes);
  if (header_len > file_size - 8 || header_len > (std::uint64_t{1} << 30)) {
    throw DecodeError("'" + path + "' declares an invalid header length");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));

  SafetensorsFile file;
  file.path_ = path;
  file.payload_offset_ = 8 + header_len;
  const std::uint64_t payload_size = file_size - file.payload_offset_;
  try {
    const auto j = nlohmann::json::parse(header);
    for (const auto& [name, value] : j.items()) {
      if (name == "__metadata__") {
        for (const auto& [k, v] : value.items()) file.metadata_[k] = v.get<std::string>();
        continue;
      }
      TensorEntry e;
      e.dtype = parse_dtype(value.at("dtype").get<std::string>());
      e.shape = value.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = value.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2) throw DecodeError("tensor '" + name + "' has malformed data_offsets");
      e.begin = offsets[0];
      e.end = offsets[1];
      if (e.end < e.begin || e.end > payload_size ||
          e.end - e.begin != static_cast<std::uint64_t>(e.numel()) * dtype_size(e.dtype)) {
        throw DecodeError("tensor '" + name + "' has inconsistent offsets in '" + path + "'");
      }
      file.entries_.emplace(name, std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DecodeError("'" + path + "': malformed header: " + ex.what());
  }
  return file;
}

const TensorEntry& SafetensorsFile::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("tensor '" + name + "' not in '" + path_ + "'");
  return it->second;
}

std::vector<std::string> SafetensorsFile::names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

std::vector<std::uint8_t> SafetensorsFile::read_raw(const std::string& name) const {
  const auto& e = entry(name);
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path_ + "'");
  std::vector<std::uint8_t> bytes(e.end - e.begin);
  in.seekg(static_cast<std::streamoff>(payload_offset_ + e.begin));
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw DecodeError("truncated payload for tensor '" + name + "'");
  }
  return bytes;
}

std::vector<double> SafetensorsFile::read_values(const std::string& name) const {
  const auto& e = entry(name);
  const auto raw = read_raw(name);
  return decode_values(raw.data(), static_cast<std::size_t>(e.numel()), e.dtype);
}

void write_safetensors(const std::string& path, const std::vector<NamedTensor>& tensors, DType dtype,
                       const std::map<std::string, std::string>& metadata) {
  if (dtype != DType::F32 && dtype != DType::F64) throw ParameterError("writer supports F32 and F64 only");
  std::vector<const NamedTensor*> order;
  for (const auto& t : tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->name < b->name; });

  nlohmann::ordered_json header;
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  const std::size_t w = dtype_size(dtype);
  for (const auto* t : order) {
    std::int64_t numel = 1;
    for (auto s : t->shape) numel *= s;
    if (numel != static_cast<std::int64_t>(t->values.size())) {
      throw ShapeError("tensor '" + t->name + "': shape does not match value count");
    }
    const std::uint64_t bytes = static_cast<std::uint64_t>(numel) * w;
    header[t->name] = {{"dtype", to_string(dtype)}, {"shape", t->shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<std::uint8_t> buf;
  for (const auto* t : order) {
    buf.resize(t->values.size() * w);
    for (std::size_t i = 0; i < t->values.size(); ++i) {
      if (dtype == DType::F32) {
        store_le(buf.data() + i * w, static_cast<float>(t->values[i]));
      } else {
        store_le(buf.data() + i * w, t->values[i]);
      }
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  }
  void update(const void* data, std::size_t size) {
    if (EVP_DigestUpdate(ctx_.get(), data, size) != 1) throw Error("sha256 update failed");
  }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), digest, &len) != 1) throw Error("sha256 final failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[digest[i] >> 4]);
      out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(const std::uint8_t* data, std::size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

}  // namespace refocus
