#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "refocus/checkpoint.hpp"
#include "refocus/config.hpp"
#include "refocus/dataset.hpp"
#include "refocus/dense_head.hpp"
#include "refocus/image.hpp"
#include "refocus/refocus.hpp"

namespace refocus {

/// Window origins along one axis: multiples of `stride`, with the last one
/// clamped so the window ends at the edge. `extent <= window` gives {0}.
std::vector<Index> window_starts(Index extent, Index window, Index stride);

struct Window {
  Index y = 0;
  Index x = 0;
  bool operator==(const Window&) const = default;
};

/// Row-major list of window origins covering a height x width image.
std::vector<Window> enumerate_windows(Index height, Index width, Index window, Index stride);

/// Size after scaling the short side to `short_side` (aspect ratio kept,
/// long side rounded to nearest).
std::pair<Index, Index> resized_shape(Index height, Index width, Index short_side);

/// Reflect-pads (mirror without repeating the edge) to at least
/// min_height x min_width, extending bottom and right.
Image reflect_pad(const Image& img, Index min_height, Index min_width);

/// Sliding-window dense prediction with a fixed tower, class set and run
/// configuration.
class Segmenter {
 public:
  Segmenter(std::shared_ptr<const CheckpointStore> checkpoint, RunConfig run, ClassEmbeddingSet classes);

  const RunConfig& run() const { return run_; }
  const ClassEmbeddingSet& classes() const { return classes_; }
  const VisionTower& tower() const { return tower_; }

  /// Tower output for one normalized window in the configured mode. Hook
  /// diagnostics land in `diagnostics` when given.
  TowerOutput run_window(const Image& window, std::vector<LayerDiagnostics>* diagnostics = nullptr) const;

  /// window x window x N_c class scores for one normalized window.
  Image window_logits(const Image& window) const;

  /// Overlap-averaged class scores at the input resolution for an RGB image
  /// in [0, 1].
  Image image_logits(const Image& image) const;

  SegmentationMap segment(const Image& image) const;

 private:
  std::shared_ptr<const CheckpointStore> ckpt_;
  RunConfig run_;
  ClassEmbeddingSet classes_;
  VisionTower tower_;
};

SegmentationMap segment_image(const Image& image, std::shared_ptr<const CheckpointStore> checkpoint,
                              const ClassEmbeddingSet& classes, const RunConfig& run);

struct ClassIoU {
  std::string name;
  std::int64_t gt_pixels = 0;
  std::int64_t pred_pixels = 0;
  std::int64_t intersection = 0;
  std::int64_t union_pixels = 0;
  /// Unset for classes absent from the ground truth.
  std::optional<double> iou;
};

struct EvalReport {
  std::vector<ClassIoU> classes;
  /// Unset when no evaluated pixel carried a class label.
  std::optional<double> miou;
  std::int64_t pixels = 0;
  std::int64_t images = 0;
  nlohmann::json config;
  std::string checkpoint;
  std::vector<double> seconds_per_image;

  bool empty() const { return !miou.has_value(); }
  nlohmann::json to_json(bool include_timing = true) const;
};

/// Pixel-level confusion counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  ConfusionMatrix(Index num_classes, std::int32_t ignore_index);

  /// Throws DataError for a ground-truth label outside the class table (and
  /// not the ignore value) and ContractError for a bad prediction.
  void add(const LabelMap& truth, const LabelMap& prediction);
  void merge(const ConfusionMatrix& other);

  std::int64_t count(Index truth, Index prediction) const;
  Index num_classes() const { return n_; }
  std::int64_t pixels() const { return pixels_; }

  /// Per-class IoU = TP / (TP + FP + FN) and their mean over classes present
  /// in the ground truth.
  EvalReport report(const std::vector<std::string>& names) const;

 private:
  Index n_;
  std::int32_t ignore_;
  std::vector<std::int64_t> counts_;
  std::int64_t pixels_ = 0;
};

/// Segments every manifest item and scores it against its label map. The
/// manifest's class table must equal the embedding set's.
EvalReport evaluate(const DatasetManifest& manifest, std::shared_ptr<const CheckpointStore> checkpoint,
                    const ClassEmbeddingSet& classes, const RunConfig& run);

struct ScatterRow {
  Index index = 0;
  double omega = 0.0;
  double phi = 0.0;
  bool distraction = false;
};

/// Diagnostics of one window.
struct AnalysisBundle {
  Index grid_side = 0;
  /// Query row of the applied attention per layer, as a g x g grid.
  std::vector<Matrix> heatmaps;
  std::optional<Index> query;
  /// Mean embedding weight f[j] / sum_k f[k] per dimension over patch tokens
  /// and layers.
  Vector dimension_weights;
  std::vector<ScatterRow> scatter;
  /// Distraction tokens of each layer input.
  std::vector<IndexSet> masks;
};

/// Per-dimension mean of f[j] / sum_k f[k] over the rows of every matrix,
/// skipping rows with a near-zero sum.
Vector mean_embedding_weights(const std::vector<Matrix>& patch_embeddings);

/// Runs one window (the image resized to the window size) with every layer
/// state retained and derives heatmaps, the dimension-weight profile, the
/// (omega, phi) scatter and per-layer distraction masks.
AnalysisBundle analyze(const Image& image, std::shared_ptr<const CheckpointStore> checkpoint, const RunConfig& run,
                       std::optional<Index> query = std::nullopt);

/// Writes heatmap_layerNN.{pgm,csv}, dimension_weights.csv, scatter.csv and
/// mask_layerNN.pgm into `dir`.
void write_analysis(const AnalysisBundle& bundle, const std::string& dir);

struct SweepRow {
  std::string param;
  std::string value;
  std::optional<double> miou;
};

/// Parameters accepted by sweep().
const std::vector<std::string>& sweep_parameters();

/// Default grid: tau {3..7}/d, beta {0.1..0.9}, every similarity source and
/// threshold rule, receptive fields {3, 5, 7}, and layer ranges covering
/// single layers L/2..L plus L/2-L and 1-L.
std::vector<std::string> default_sweep_values(const std::string& param, const ModelConfig& model);

/// Sets one swept parameter. tau accepts "k/d" (d = width), "a/b" or a
/// number. Throws ParameterError for an unknown parameter.
void apply_sweep_value(RunConfig& run, const std::string& param, const std::string& value);

/// One evaluation per value with everything else held fixed.
std::vector<SweepRow> sweep(const std::string& param, const std::vector<std::string>& values,
                            const DatasetManifest& manifest, std::shared_ptr<const CheckpointStore> checkpoint,
                            const ClassEmbeddingSet& classes, const RunConfig& run);

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

/// Run configuration of the bundled tiny fixture.
RunConfig fixture_run_config();

struct FixturePaths {
  std::string config;
  std::string checkpoint;
  std::string classes;
  std::string manifest;
  std::vector<std::string> images;
};

/// Writes a random-weight checkpoint (L=2, H=2, d=16, patch 8, window 24),
/// three class embeddings, four synthetic images with label maps, a manifest
/// and a run configuration into `dir`.
FixturePaths make_fixture(const std::string& dir, std::uint64_t seed = 7);

}  // namespace refocus
