#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "refocus/image_io.hpp"
#include "refocus/types.hpp"

namespace refocus {

/// Precomputed class text embeddings, one unit-norm row per class.
struct ClassEmbeddingSet {
  std::vector<std::string> names;
  Matrix embeddings;  // N_c x shared width
  std::string prompt_note;

  Index size() const { return static_cast<Index>(names.size()); }
  Index width() const { return embeddings.cols(); }
};

/// Builds a set from raw rows, L2-normalizing each row. Throws ParameterError
/// on an empty class list and DataError on a zero row.
ClassEmbeddingSet make_class_embeddings(std::vector<std::string> names, Matrix rows, std::string note = {});

/// Loads a `.csv` file (`name,v0,v1,...` per line) or a named-tensor container
/// holding an "embeddings" tensor with "names" (JSON list) and "prompt_note"
/// metadata. When `expected_width` is positive the row width must match.
ClassEmbeddingSet load_class_embeddings(const std::string& path, Index expected_width = -1);
void write_class_embeddings(const std::string& path, const ClassEmbeddingSet& set);

struct ManifestItem {
  std::string image;
  std::string label;
};

/// Image / ground-truth pairs plus the class table they are labelled with.
struct DatasetManifest {
  std::vector<ManifestItem> items;
  std::vector<std::string> class_names;
  std::int32_t ignore_index = 255;
};

/// Parses {"classes": [...], "ignore_index": 255, "items": [{"image", "label"}]}.
/// Relative paths resolve against the manifest's directory. Every referenced
/// file must exist and each label map must match its image's dimensions.
DatasetManifest load_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);

/// Per-pixel class indices with the class table and the producing config.
struct SegmentationMap {
  LabelMap labels;
  std::vector<std::string> class_names;
  nlohmann::json provenance;
};

/// Writes the label image (`.png` indexed or `.pgm`) and a JSON sidecar at
/// `path + ".json"` holding the class table, config echo and the image's
/// SHA-256. Throws ContractError for an empty map or an out-of-table label.
void write_segmentation(const SegmentationMap& map, const std::string& path);

}  // namespace refocus
