#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "refocus/errors.hpp"
#include "refocus/types.hpp"

namespace refocus {

/// Channels-last image tensor (H x W x C).
template <typename Scalar>
struct ImageT {
  Index height = 0;
  Index width = 0;
  Index channels = 0;
  std::vector<Scalar> data;

  ImageT() = default;
  ImageT(Index h, Index w, Index c, Scalar fill = Scalar(0))
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h * w * c), fill) {}

  Scalar& at(Index y, Index x, Index c) {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  const Scalar& at(Index y, Index x, Index c) const {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool empty() const { return data.empty(); }
  bool operator==(const ImageT&) const = default;
};

using Image = ImageT<Real>;

namespace detail {

struct ResampleTap {
  Index lo = 0;
  Index hi = 0;
  double frac = 0.0;
};

// Half-pixel-center source coordinates (align_corners = false), clamped at
// the borders.
inline std::vector<ResampleTap> resample_taps(Index in, Index out) {
  std::vector<ResampleTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize with half-pixel centers (align_corners = false).
template <typename Scalar>
ImageT<Scalar> bilinear_resize(const ImageT<Scalar>& img, Index out_h, Index out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw ParameterError("bilinear_resize: target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " has a zero dimension");
  }
  if (img.height < 1 || img.width < 1) throw ShapeError("bilinear_resize: empty source image");
  if (out_h == img.height && out_w == img.width) return img;

  const auto ty = detail::resample_taps(img.height, out_h);
  const auto tx = detail::resample_taps(img.width, out_w);
  ImageT<Scalar> out(out_h, out_w, img.channels);
  for (Index y = 0; y < out_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (Index x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      for (Index c = 0; c < img.channels; ++c) {
        const double top = (1.0 - b.frac) * static_cast<double>(img.at(a.lo, b.lo, c)) +
                           b.frac * static_cast<double>(img.at(a.lo, b.hi, c));
        const double bottom = (1.0 - b.frac) * static_cast<double>(img.at(a.hi, b.lo, c)) +
                              b.frac * static_cast<double>(img.at(a.hi, b.hi, c));
        out.at(y, x, c) = static_cast<Scalar>((1.0 - a.frac) * top + a.frac * bottom);
      }
    }
  }
  return out;
}

}  // namespace refocus
