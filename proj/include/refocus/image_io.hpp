#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "refocus/image.hpp"
#include "refocus/safetensors.hpp"

namespace refocus {

/// Per-pixel integer labels (class indices or the ignore value).
struct LabelMap {
  Index height = 0;
  Index width = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(Index h, Index w, std::int32_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h * w), fill) {}
  std::int32_t& at(Index y, Index x) { return labels[static_cast<std::size_t>(y * width + x)]; }
  std::int32_t at(Index y, Index x) const { return labels[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const LabelMap&) const = default;
};

/// Loads an RGB image as a (H, W, 3) tensor in [0, 1]. Supports binary
/// PPM/PGM (grayscale is replicated to three channels), PNG, and the
/// raw-tensor format (a `.json` sidecar naming a little-endian payload,
/// loaded verbatim).
Image load_image(const std::string& path);

/// In-place per-channel (x - mean) / std.
void normalize_image(Image& img, const std::array<double, 3>& mean, const std::array<double, 3>& std);

/// (height, width) read from the file header only.
std::pair<Index, Index> image_dimensions(const std::string& path);

/// Loads integer labels from a PGM (8 or 16 bit), a grayscale/palette PNG or
/// a raw-tensor sidecar with one channel.
LabelMap load_label_map(const std::string& path);

/// 8-bit binary PPM (3 channels) or PGM (1 channel) from values in [0, 1].
void write_pnm(const std::string& path, const Image& img);
/// Label map as PGM; 16-bit samples when any label exceeds 255.
void write_label_pgm(const std::string& path, const LabelMap& labels);
/// Label map as an indexed PNG (palette) when every label fits in 8 bits,
/// else as a 16-bit grayscale PNG.
void write_label_png(const std::string& path, const LabelMap& labels);

/// Raw-tensor format: `json_path` gets {"shape","dtype","data"} and the
/// payload goes to the file named by "data" next to it.
void save_raw_tensor(const std::string& json_path, const Image& img, DType dtype = DType::F64);
Image load_raw_tensor(const std::string& json_path);

}  // namespace refocus
