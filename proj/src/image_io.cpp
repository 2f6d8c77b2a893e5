#include "refocus/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

#include "json.hpp"
#include "refocus/errors.hpp"

namespace refocus {

namespace fs = std::filesystem;

namespace {

std::string extension(const std::string& path) {
  std::string ext = fs::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

struct Pnm {
  int channels = 0;
  Index width = 0;
  Index height = 0;
  int maxval = 0;
  std::vector<std::uint32_t> samples;
};

int read_header_int(std::istream& in, const std::string& path) {
  int c = in.get();
  while (in && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (in && c != '\n') c = in.get();
    }
    c = in.get();
  }
  if (!in || !std::isdigit(c)) throw DecodeError("'" + path + "': malformed PNM header");
  long v = 0;
  while (in && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > (1 << 24)) throw DecodeError("'" + path + "': PNM header value too large");
    c = in.get();
  }
  return static_cast<int>(v);
}

Pnm read_pnm(const std::string& path, bool header_only) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  Pnm p;
  if (magic[0] == 'P' && magic[1] == '5') {
    p.channels = 1;
  } else if (magic[0] == 'P' && magic[1] == '6') {
    p.channels = 3;
  } else {
    throw DecodeError("'" + path + "' is not a binary PPM/PGM file");
  }
  p.width = read_header_int(in, path);
  p.height = read_header_int(in, path);
  p.maxval = read_header_int(in, path);
  if (p.width < 1 || p.height < 1 || p.maxval < 1 || p.maxval > 65535) {
    throw DecodeError("'" + path + "': invalid PNM dimensions or maxval");
  }
  if (header_only) return p;
  const std::size_t count = static_cast<std::size_t>(p.width * p.height * p.channels);
  const std::size_t width = p.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * width);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DecodeError("'" + path + "': truncated PNM payload");
  }
  p.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    p.samples[i] = width == 2 ? (static_cast<std::uint32_t>(raw[2 * i]) << 8) | raw[2 * i + 1] : raw[i];
  }
  return p;
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* file = nullptr;

  explicit PngReader(const std::string& path) {
    file = std::fopen(path.c_str(), "rb");
    if (!file) throw IoError("cannot open '" + path + "'");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
      std::fclose(file);
      throw DecodeError("'" + path + "' is not a PNG file");
    }
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_read_struct(&png, &info, nullptr);
      std::fclose(file);
      throw DecodeError("libpng initialization failed");
    }
    png_init_io(png, file);
    png_set_sig_bytes(png, 8);
  }
  ~PngReader() {
    png_destroy_read_struct(&png, &info, nullptr);
    if (file) std::fclose(file);
  }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;
};

// Decoded PNG rows as 16-bit samples. `expand` converts palette and low bit
// depths to RGB/gray; without it palette indices are preserved.
struct PngPixels {
  Index width = 0;
  Index height = 0;
  int channels = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::vector<std::uint32_t> samples;
};

PngPixels read_png(const std::string& path, bool expand, bool header_only) {
  PngReader r(path);
  PngPixels out;
  if (setjmp(png_jmpbuf(r.png))) throw DecodeError("'" + path + "': corrupt PNG data");
  png_read_info(r.png, r.info);
  out.width = png_get_image_width(r.png, r.info);
  out.height = png_get_image_height(r.png, r.info);
  out.color_type = png_get_color_type(r.png, r.info);
  if (header_only) return out;
  if (expand) {
    if (out.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (out.color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(r.png, r.info) < 8) {
      png_set_expand_gray_1_2_4_to_8(r.png);
    }
    if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
    png_set_strip_alpha(r.png);
  } else {
    png_set_packing(r.png);
  }
  png_read_update_info(r.png, r.info);
  out.channels = png_get_channels(r.png, r.info);
  out.bit_depth = png_get_bit_depth(r.png, r.info);
  const std::size_t rowbytes = png_get_rowbytes(r.png, r.info);
  std::vector<unsigned char> buf(rowbytes * static_cast<std::size_t>(out.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(out.height));
  for (Index y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + y * rowbytes;
  png_read_image(r.png, rows.data());
  const std::size_t count = static_cast<std::size_t>(out.width * out.height * out.channels);
  out.samples.resize(count);
  for (Index y = 0; y < out.height; ++y) {
    const unsigned char* row = rows[static_cast<std::size_t>(y)];
    for (Index i = 0; i < out.width * out.channels; ++i) {
      const std::size_t dst = static_cast<std::size_t>(y * out.width * out.channels + i);
      out.samples[dst] = out.bit_depth == 16 ? (static_cast<std::uint32_t>(row[2 * i]) << 8) | row[2 * i + 1]
                                             : row[i];
    }
  }
  return out;
}

Image image_from_samples(Index h, Index w, int channels, const std::vector<std::uint32_t>& samples,
                         double maxval) {
  if (channels != 1 && channels != 3) throw DecodeError("unsupported channel count " + std::to_string(channels));
  Image img(h, w, 3);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) {
        const Index src_c = channels == 1 ? 0 : c;
        img.at(y, x, c) = samples[static_cast<std::size_t>((y * w + x) * channels + src_c)] / maxval;
      }
    }
  }
  return img;
}

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* file = nullptr;

  explicit PngWriter(const std::string& path) {
    file = std::fopen(path.c_str(), "wb");
    if (!file) throw IoError("cannot write '" + path + "'");
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      std::fclose(file);
      throw IoError("libpng initialization failed");
    }
    png_init_io(png, file);
  }
  ~PngWriter() {
    png_destroy_write_struct(&png, &info);
    if (file) std::fclose(file);
  }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;
};

}  // namespace

Image load_image(const std::string& path) {
  const auto ext = extension(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    const auto p = read_pnm(path, false);
    return image_from_samples(p.height, p.width, p.channels, p.samples, p.maxval);
  }
  if (ext == ".png") {
    const auto p = read_png(path, true, false);
    const double maxval = p.bit_depth == 16 ? 65535.0 : 255.0;
    return image_from_samples(p.height, p.width, p.channels, p.samples, maxval);
  }
  if (ext == ".json") return load_raw_tensor(path);
  throw DecodeError("unsupported image format '" + ext + "' for '" + path + "'");
}

void normalize_image(Image& img, const std::array<double, 3>& mean, const std::array<double, 3>& std) {
  if (img.channels != 3) throw ShapeError("normalize_image: expected 3 channels");
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < img.width; ++x) {
      for (Index c = 0; c < 3; ++c) {
        img.at(y, x, c) = (img.at(y, x, c) - mean[static_cast<std::size_t>(c)]) / std[static_cast<std::size_t>(c)];
      }
    }
  }
}

std::pair<Index, Index> image_dimensions(const std::string& path) {
  const auto ext = extension(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    const auto p = read_pnm(path, true);
    return {p.height, p.width};
  }
  if (ext == ".png") {
    const auto p = read_png(path, false, true);
    return {p.height, p.width};
  }
  if (ext == ".json") {
    const auto img = load_raw_tensor(path);
    return {img.height, img.width};
  }
  throw DecodeError("unsupported image format '" + ext + "' for '" + path + "'");
}

LabelMap load_label_map(const std::string& path) {
  const auto ext = extension(path);
  LabelMap out;
  if (ext == ".pgm" || ext == ".pnm") {
    const auto p = read_pnm(path, false);
    if (p.channels != 1) throw DecodeError("'" + path + "': label maps must be single-channel");
    out = LabelMap(p.height, p.width);
    for (std::size_t i = 0; i < p.samples.size(); ++i) out.labels[i] = static_cast<std::int32_t>(p.samples[i]);
    return out;
  }
  if (ext == ".png") {
    const auto p = read_png(path, false, false);
    if (p.channels != 1) throw DecodeError("'" + path + "': label maps must be gray or palette PNG");
    out = LabelMap(p.height, p.width);
    for (std::size_t i = 0; i < p.samples.size(); ++i) out.labels[i] = static_cast<std::int32_t>(p.samples[i]);
    return out;
  }
  if (ext == ".json") {
    const auto img = load_raw_tensor(path);
    if (img.channels != 1) throw DecodeError("'" + path + "': label tensors must have one channel");
    out = LabelMap(img.height, img.width);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      const double v = img.data[i];
      if (v != std::floor(v)) throw DecodeError("'" + path + "': non-integer label value");
      out.labels[i] = static_cast<std::int32_t>(v);
    }
    return out;
  }
  throw DecodeError("unsupported label-map format '" + ext + "' for '" + path + "'");
}

void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("write_pnm: need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

void write_label_pgm(const std::string& path, const LabelMap& labels) {
  const auto [lo, hi] = std::minmax_element(labels.labels.begin(), labels.labels.end());
  if (labels.labels.empty() || *lo < 0 || *hi > 65535) throw ContractError("write_label_pgm: labels outside [0, 65535]");
  const bool wide = *hi > 255;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "P5\n" << labels.width << " " << labels.height << "\n" << (wide ? 65535 : 255) << "\n";
  for (auto v : labels.labels) {
    if (wide) out.put(static_cast<char>((v >> 8) & 0xff));
    out.put(static_cast<char>(v & 0xff));
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

void write_label_png(const std::string& path, const LabelMap& labels) {
  const auto [lo, hi] = std::minmax_element(labels.labels.begin(), labels.labels.end());
  if (labels.labels.empty() || *lo < 0 || *hi > 65535) throw ContractError("write_label_png: labels outside [0, 65535]");
  const bool indexed = *hi <= 255;
  PngWriter w(path);
  if (setjmp(png_jmpbuf(w.png))) throw IoError("write failed for '" + path + "'");
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(labels.width), static_cast<png_uint_32>(labels.height),
               indexed ? 8 : 16, indexed ? PNG_COLOR_TYPE_PALETTE : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> palette(256);
  if (indexed) {
    // bit-interleaved color map, distinct for the first 256 labels
    for (int i = 0; i < 256; ++i) {
      int r = 0, g = 0, b = 0, c = i;
      for (int j = 0; j < 8; ++j) {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
      }
      palette[static_cast<std::size_t>(i)] = {static_cast<png_byte>(r), static_cast<png_byte>(g),
                                              static_cast<png_byte>(b)};
    }
    png_set_PLTE(w.png, w.info, palette.data(), 256);
  }
  png_write_info(w.png, w.info);
  const std::size_t bpp = indexed ? 1 : 2;
  std::vector<unsigned char> row(static_cast<std::size_t>(labels.width) * bpp);
  for (Index y = 0; y < labels.height; ++y) {
    for (Index x = 0; x < labels.width; ++x) {
      const auto v = static_cast<std::uint32_t>(labels.at(y, x));
      if (indexed) {
        row[static_cast<std::size_t>(x)] = static_cast<unsigned char>(v);
      } else {
        row[static_cast<std::size_t>(2 * x)] = static_cast<unsigned char>(v >> 8);
        row[static_cast<std::size_t>(2 * x + 1)] = static_cast<unsigned char>(v & 0xff);
      }
    }
    png_write_row(w.png, row.data());
  }
  png_write_end(w.png, nullptr);
}

void save_raw_tensor(const std::string& json_path, const Image& img, DType dtype) {
  const fs::path sidecar(json_path);
  const std::string data_name = sidecar.stem().string() + ".raw";
  std::ofstream payload(sidecar.parent_path() / data_name, std::ios::binary);
  if (!payload) throw IoError("cannot write raw tensor payload for '" + json_path + "'");
  for (double v : img.data) {
    if (dtype == DType::F64) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) payload.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    } else if (dtype == DType::F32) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) payload.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    } else {
      throw ParameterError("raw tensors are written as F32 or F64");
    }
  }
  nlohmann::json j = {{"shape", {img.height, img.width, img.channels}}, {"dtype", to_string(dtype)}, {"data", data_name}};
  std::ofstream out(json_path);
  if (!out) throw IoError("cannot write '" + json_path + "'");
  out << j.dump(2) << "\n";
}

Image load_raw_tensor(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open '" + json_path + "'");
  try {
    nlohmann::json j;
    in >> j;
    const auto shape = j.at("shape").get<std::vector<Index>>();
    if (shape.size() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1) {
      throw DecodeError("'" + json_path + "': raw tensor shape must be [H, W, C]");
    }
    const DType dtype = parse_dtype(j.at("dtype").get<std::string>());
    const fs::path data = fs::path(json_path).parent_path() / j.at("data").get<std::string>();
    std::ifstream payload(data, std::ios::binary);
    if (!payload) throw IoError("cannot open raw tensor payload '" + data.string() + "'");
    Image img(shape[0], shape[1], shape[2]);
    std::vector<std::uint8_t> bytes(img.data.size() * dtype_size(dtype));
    if (!payload.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
      throw DecodeError("'" + data.string() + "': truncated raw tensor payload");
    }
    img.data = decode_values(bytes.data(), img.data.size(), dtype);
    return img;
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError("'" + json_path + "': " + e.what());
  }
}

}  // namespace refocus
