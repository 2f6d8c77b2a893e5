#pragma once

#include "refocus/dataset.hpp"
#include "refocus/image.hpp"
#include "refocus/image_io.hpp"
#include "refocus/types.hpp"
#include "refocus/vit.hpp"

namespace refocus {

/// Per-patch cosine scores on the patch grid.
struct LogitsMap {
  /// N x N_c, row-major grid order.
  Matrix scores;
  Index grid_side = 0;
};

/// Key-key attention averaged over every layer and head of a complete stack.
/// Throws ContractError when the stack holds fewer than `expected_layers`.
Matrix layer_averaged_kk(const AttentionStack& stack, int expected_layers);

/// Cosine similarity of every patch feature with every class embedding.
/// `features` holds the patch rows only (N x shared width, N = g^2).
LogitsMap classify_patches(const Matrix& features, const ClassEmbeddingSet& classes);

/// Bilinear upsampling of each class plane to (height, width, N_c).
Image upsample_logits(const LogitsMap& logits, Index height, Index width);

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
LabelMap argmax_labels(const Image& scores);

}  // namespace refocus
