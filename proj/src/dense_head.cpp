#include "refocus/dense_head.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

#include "refocus/errors.hpp"
#include "refocus/numerics.hpp"

namespace refocus {

Matrix layer_averaged_kk(const AttentionStack& stack, int expected_layers) {
  if (stack.layers() < expected_layers || stack.layers() == 0) {
    throw ContractError("attention stack holds " + std::to_string(stack.layers()) + " of " +
                        std::to_string(expected_layers) + " layers");
  }
  return stack.kk_cumulative_average();
}

LogitsMap classify_patches(const Matrix& features, const ClassEmbeddingSet& classes) {
  if (features.cols() != classes.width()) {
    throw ShapeError("patch features have width " + std::to_string(features.cols()) +
                     " but class embeddings have width " + std::to_string(classes.width()));
  }
  const auto g = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(features.rows()))));
  if (g * g != features.rows()) throw ShapeError("patch count is not a square grid");

  Matrix normalized = features;
  for (Index i = 0; i < normalized.rows(); ++i) {
    const double n = normalized.row(i).norm();
    if (n > 1e-12) {
      normalized.row(i) /= n;
    } else {
      spdlog::warn("patch {} has a near-zero feature; scoring it by raw dot product", i);
    }
  }
  // Class rows are unit-norm on load; renormalize to stay exact for
  // hand-built sets.
  Matrix cls = classes.embeddings;
  for (Index c = 0; c < cls.rows(); ++c) {
    const double n = cls.row(c).norm();
    if (n > 0) cls.row(c) /= n;
  }
  LogitsMap out;
  out.grid_side = g;
  out.scores = matmul(normalized, cls.transpose());
  return out;
}

Image upsample_logits(const LogitsMap& logits, Index height, Index width) {
  const Index g = logits.grid_side;
  const Index nc = logits.scores.cols();
  if (g * g != logits.scores.rows()) throw ShapeError("logits map does not match its grid side");
  Image grid(g, g, nc);
  for (Index i = 0; i < g * g; ++i) {
    for (Index c = 0; c < nc; ++c) grid.at(i / g, i % g, c) = logits.scores(i, c);
  }
  return bilinear_resize(grid, height, width);
}

LabelMap argmax_labels(const Image& scores) {
  if (scores.channels < 1) throw ShapeError("argmax over an image without channels");
  LabelMap out(scores.height, scores.width);
  for (Index y = 0; y < scores.height; ++y) {
    for (Index x = 0; x < scores.width; ++x) {
      Index best = 0;
      for (Index c = 1; c < scores.channels; ++c) {
        if (scores.at(y, x, c) > scores.at(y, x, best)) best = c;
      }
      out.at(y, x) = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

}  // namespace refocus
