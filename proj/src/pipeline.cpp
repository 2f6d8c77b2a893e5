#include "refocus/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "refocus/errors.hpp"
#include "refocus/image_io.hpp"

namespace refocus {

namespace fs = std::filesystem;

std::vector<Index> window_starts(Index extent, Index window, Index stride) {
  if (window < 1 || stride < 1) throw ParameterError("window and stride must be positive");
  if (extent <= window) return {0};
  const Index count = (extent - window + stride - 1) / stride + 1;
  std::vector<Index> starts;
  for (Index k = 0; k + 1 < count; ++k) starts.push_back(k * stride);
  starts.push_back(extent - window);
  return starts;
}

std::vector<Window> enumerate_windows(Index height, Index width, Index window, Index stride) {
  std::vector<Window> out;
  for (auto y : window_starts(height, window, stride)) {
    for (auto x : window_starts(width, window, stride)) out.push_back({y, x});
  }
  return out;
}

std::pair<Index, Index> resized_shape(Index height, Index width, Index short_side) {
  if (height < 1 || width < 1) throw ShapeError("image has a zero dimension");
  if (short_side < 1) throw ParameterError("short side must be positive");
  const double scale = static_cast<double>(short_side) / static_cast<double>(std::min(height, width));
  auto scaled = [&](Index v) { return std::max<Index>(1, static_cast<Index>(std::floor(v * scale + 0.5))); };
  if (height <= width) return {short_side, scaled(width)};
  return {scaled(height), short_side};
}

namespace {

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  Index m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

Image crop(const Image& img, Index y0, Index x0, Index h, Index w) {
  Image out(h, w, img.channels);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    }
  }
  return out;
}

}  // namespace

Image reflect_pad(const Image& img, Index min_height, Index min_width) {
  const Index h = std::max(img.height, min_height);
  const Index w = std::max(img.width, min_width);
  if (h == img.height && w == img.width) return img;
  Image out(h, w, img.channels);
  for (Index y = 0; y < h; ++y) {
    const Index sy = reflect_index(y, img.height);
    for (Index x = 0; x < w; ++x) {
      const Index sx = reflect_index(x, img.width);
      for (Index c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

Segmenter::Segmenter(std::shared_ptr<const CheckpointStore> checkpoint, RunConfig run, ClassEmbeddingSet classes)
    : ckpt_(checkpoint), run_(std::move(run)), classes_(std::move(classes)), tower_(checkpoint, run_.model) {
  run_.validate();
  if (classes_.size() == 0) throw ParameterError("no classes to segment");
  if (classes_.width() != run_.model.shared_width) {
    throw ShapeError("class embeddings have width " + std::to_string(classes_.width()) + ", model shares " +
                     std::to_string(run_.model.shared_width));
  }
}

TowerOutput Segmenter::run_window(const Image& window, std::vector<LayerDiagnostics>* diagnostics) const {
  switch (run_.mode) {
    case Mode::PlainClip: return tower_.forward(window, std::nullopt, nullptr);
    case Mode::KkProxyBaseline: return tower_.forward(window, run_.final_attention, nullptr);
    case Mode::Refocus: {
      RefocusHook hook(run_);
      auto out = tower_.forward(window, run_.final_attention, &hook);
      if (diagnostics) *diagnostics = hook.diagnostics();
      return out;
    }
    case Mode::Suppression: {
      SuppressionHook hook(run_);
      auto out = tower_.forward(window, run_.final_attention, &hook);
      if (diagnostics) *diagnostics = hook.diagnostics();
      return out;
    }
  }
  throw ParameterError("unknown mode");
}

Image Segmenter::window_logits(const Image& window) const {
  const auto out = run_window(window);
  const Index n = out.features.rows() - 1;
  const auto logits = classify_patches(out.features.bottomRows(n), classes_);
  return upsample_logits(logits, run_.window, run_.window);
}

Image Segmenter::image_logits(const Image& image) const {
  if (image.channels != 3) throw ShapeError("expected an RGB image");
  const auto [rh, rw] = resized_shape(image.height, image.width, run_.short_side);
  Image resized = bilinear_resize(image, rh, rw);
  normalize_image(resized, run_.pixel_mean, run_.pixel_std);
  const Index win = run_.window;
  if (rh < win || rw < win) {
    spdlog::info("resized image {}x{} is smaller than the {} window; reflect-padding", rh, rw, win);
  }
  const Image padded = reflect_pad(resized, win, win);

  const auto windows = enumerate_windows(padded.height, padded.width, win, run_.stride);
  const Index nc = classes_.size();
  Image sum(padded.height, padded.width, nc);
  std::vector<int> hits(static_cast<std::size_t>(padded.height * padded.width), 0);

  auto accumulate = [&](const Window& w, const Image& logits) {
    for (Index y = 0; y < win; ++y) {
      for (Index x = 0; x < win; ++x) {
        ++hits[static_cast<std::size_t>((w.y + y) * padded.width + w.x + x)];
        for (Index c = 0; c < nc; ++c) sum.at(w.y + y, w.x + x, c) += logits.at(y, x, c);
      }
    }
  };

  const auto threads = static_cast<std::size_t>(run_.threads);
  for (std::size_t begin = 0; begin < windows.size(); begin += threads) {
    const std::size_t end = std::min(windows.size(), begin + threads);
    std::vector<std::future<Image>> jobs;
    for (std::size_t i = begin; i < end; ++i) {
      const Window w = windows[i];
      auto job = [this, &padded, w, win] { return window_logits(crop(padded, w.y, w.x, win, win)); };
      jobs.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred, job));
    }
    // Merge in window order so results do not depend on the worker count.
    for (std::size_t i = begin; i < end; ++i) accumulate(windows[i], jobs[i - begin].get());
  }

  Image merged(rh, rw, nc);
  for (Index y = 0; y < rh; ++y) {
    for (Index x = 0; x < rw; ++x) {
      const double count = hits[static_cast<std::size_t>(y * padded.width + x)];
      if (count == 0) throw ContractError("pixel not covered by any window");
      for (Index c = 0; c < nc; ++c) merged.at(y, x, c) = sum.at(y, x, c) / count;
    }
  }
  return bilinear_resize(merged, image.height, image.width);
}

SegmentationMap Segmenter::segment(const Image& image) const {
  SegmentationMap map;
  map.labels = argmax_labels(image_logits(image));
  map.class_names = classes_.names;
  map.provenance = {{"config", to_json(run_)}, {"checkpoint", ckpt_->checksum()}};
  return map;
}

SegmentationMap segment_image(const Image& image, std::shared_ptr<const CheckpointStore> checkpoint,
                              const ClassEmbeddingSet& classes, const RunConfig& run) {
  return Segmenter(std::move(checkpoint), run, classes).segment(image);
}

ConfusionMatrix::ConfusionMatrix(Index num_classes, std::int32_t ignore_index)
    : n_(num_classes), ignore_(ignore_index), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ParameterError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const LabelMap& truth, const LabelMap& prediction) {
  if (truth.height != prediction.height || truth.width != prediction.width) {
    throw ShapeError("prediction and ground truth sizes differ");
  }
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const auto t = truth.labels[i];
    if (t == ignore_) continue;
    if (t < 0 || t >= n_) throw DataError("ground-truth label " + std::to_string(t) + " outside the class table");
    const auto p = prediction.labels[i];
    if (p < 0 || p >= n_) throw ContractError("predicted label " + std::to_string(p) + " outside the class table");
    ++counts_[static_cast<std::size_t>(t * n_ + p)];
    ++pixels_;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ShapeError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  pixels_ += other.pixels_;
}

std::int64_t ConfusionMatrix::count(Index truth, Index prediction) const {
  return counts_.at(static_cast<std::size_t>(truth * n_ + prediction));
}

EvalReport ConfusionMatrix::report(const std::vector<std::string>& names) const {
  if (static_cast<Index>(names.size()) != n_) throw ParameterError("class name count differs from the matrix");
  EvalReport r;
  r.pixels = pixels_;
  // Extended-precision sum so the mean is rounded once.
  long double total = 0.0L;
  int present = 0;
  for (Index c = 0; c < n_; ++c) {
    ClassIoU k;
    k.name = names[static_cast<std::size_t>(c)];
    for (Index j = 0; j < n_; ++j) {
      k.gt_pixels += count(c, j);
      k.pred_pixels += count(j, c);
    }
    k.intersection = count(c, c);
    k.union_pixels = k.gt_pixels + k.pred_pixels - k.intersection;
    if (k.gt_pixels > 0) {
      k.iou = static_cast<double>(k.intersection) / static_cast<double>(k.union_pixels);
      total += static_cast<long double>(k.intersection) / static_cast<long double>(k.union_pixels);
      ++present;
    }
    r.classes.push_back(std::move(k));
  }
  if (present > 0) r.miou = static_cast<double>(total / present);
  return r;
}

nlohmann::json EvalReport::to_json(bool include_timing) const {
  nlohmann::json j;
  j["miou"] = miou ? nlohmann::json(*miou) : nlohmann::json(nullptr);
  j["empty"] = empty();
  j["pixels"] = pixels;
  j["images"] = images;
  j["checkpoint"] = checkpoint;
  j["config"] = config;
  auto& cls = j["classes"] = nlohmann::json::array();
  for (const auto& c : classes) {
    cls.push_back({{"name", c.name},
                   {"iou", c.iou ? nlohmann::json(*c.iou) : nlohmann::json(nullptr)},
                   {"gt_pixels", c.gt_pixels},
                   {"pred_pixels", c.pred_pixels},
                   {"intersection", c.intersection},
                   {"union", c.union_pixels}});
  }
  if (include_timing) {
    double total = 0.0;
    for (double s : seconds_per_image) total += s;
    j["timing"] = {{"seconds_per_image", seconds_per_image}, {"total_seconds", total}};
  }
  return j;
}

EvalReport evaluate(const DatasetManifest& manifest, std::shared_ptr<const CheckpointStore> checkpoint,
                    const ClassEmbeddingSet& classes, const RunConfig& run) {
  if (manifest.class_names != classes.names) {
    throw ParameterError("manifest class table does not match the class embeddings");
  }
  const std::string checksum = checkpoint->checksum();
  const Segmenter seg(std::move(checkpoint), run, classes);
  ConfusionMatrix confusion(classes.size(), manifest.ignore_index);
  std::vector<double> seconds;
  for (const auto& item : manifest.items) {
    const auto t0 = std::chrono::steady_clock::now();
    const Image image = load_image(item.image);
    const LabelMap truth = load_label_map(item.label);
    if (truth.height != image.height || truth.width != image.width) {
      throw DataError("label map '" + item.label + "' does not match its image size");
    }
    confusion.add(truth, seg.segment(image).labels);
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    spdlog::info("evaluated {} in {:.2f}s", item.image, seconds.back());
  }
  EvalReport report = confusion.report(classes.names);
  report.images = static_cast<std::int64_t>(manifest.items.size());
  report.config = to_json(run);
  report.checkpoint = checksum;
  report.seconds_per_image = std::move(seconds);
  if (report.empty()) spdlog::warn("evaluation found no labelled pixels");
  return report;
}

Vector mean_embedding_weights(const std::vector<Matrix>& patch_embeddings) {
  if (patch_embeddings.empty()) throw ParameterError("no embeddings to profile");
  const Index d = patch_embeddings.front().cols();
  Vector sum = Vector::Zero(d);
  Index rows = 0;
  for (const auto& m : patch_embeddings) {
    if (m.cols() != d) throw ShapeError("embedding widths differ across layers");
    for (Index i = 0; i < m.rows(); ++i) {
      const double s = m.row(i).sum();
      if (std::abs(s) < 1e-8) continue;
      sum += m.row(i).transpose() / s;
      ++rows;
    }
  }
  if (rows == 0) throw NumericError("every token has a near-zero embedding sum");
  return sum / static_cast<double>(rows);
}

AnalysisBundle analyze(const Image& image, std::shared_ptr<const CheckpointStore> checkpoint, const RunConfig& run,
                       std::optional<Index> query) {
  run.validate();
  const auto& model = run.model;
  const Index n = model.num_patches();
  if (query && (*query < 0 || *query >= n)) {
    throw ParameterError("query patch " + std::to_string(*query) + " outside [0, " + std::to_string(n) + ")");
  }
  TowerOptions opts;
  opts.keep_states = true;
  const VisionTower tower(std::move(checkpoint), model, opts);

  Image window = bilinear_resize(image, run.window, run.window);
  normalize_image(window, run.pixel_mean, run.pixel_std);

  TowerOutput out;
  if (run.mode == Mode::Refocus) {
    RefocusHook hook(run);
    out = tower.forward(window, run.final_attention, &hook);
  } else if (run.mode == Mode::Suppression) {
    SuppressionHook hook(run);
    out = tower.forward(window, run.final_attention, &hook);
  } else {
    out = tower.forward(window, run.mode == Mode::PlainClip ? std::nullopt : std::optional(run.final_attention));
  }

  AnalysisBundle b;
  b.grid_side = model.grid_side();
  b.query = query;
  const int layers = out.stack.layers();
  const Index g = b.grid_side;

  if (query) {
    for (int l = 0; l < layers; ++l) {
      const auto row = out.stack.applied_mean(l).row(*query + 1).tail(n);
      Matrix grid(g, g);
      for (Index i = 0; i < n; ++i) grid(i / g, i % g) = row(i);
      b.heatmaps.push_back(std::move(grid));
    }
  }

  std::vector<Matrix> patches;
  Vector phi_sum = Vector::Zero(n);
  Vector phi_count = Vector::Zero(n);
  Matrix qk_running = Matrix::Zero(n + 1, n + 1);
  for (std::size_t l = 0; l < out.states.size(); ++l) {
    const auto& state = out.states[l];
    patches.push_back(state.patches());
    qk_running += out.stack.qk_mean(static_cast<int>(l));
    const Vector omega = column_mass(qk_running / static_cast<double>(l + 1));
    const auto profile = localize_distractors(state, model, omega);
    b.masks.push_back(profile.distraction);
    for (Index i = 0; i < n; ++i) {
      if (std::isnan(profile.phi(i))) continue;
      phi_sum(i) += profile.phi(i);
      phi_count(i) += 1.0;
    }
  }
  b.dimension_weights = mean_embedding_weights(patches);

  const Vector omega = column_mass(out.stack.qk_cumulative_average());
  for (Index i = 0; i < n; ++i) {
    ScatterRow r;
    r.index = i;
    r.omega = omega(i);
    r.phi = phi_count(i) > 0 ? phi_sum(i) / phi_count(i) : std::numeric_limits<double>::quiet_NaN();
    r.distraction = r.phi > model.tau && (!model.joint_rule || r.omega > model.attn_weight_floor);
    b.scatter.push_back(r);
  }
  return b;
}

namespace {

std::string layer_name(const std::string& stem, std::size_t layer, const std::string& ext) {
  std::ostringstream s;
  s << stem << std::setw(2) << std::setfill('0') << layer << ext;
  return s.str();
}

void write_grid(const std::string& dir, const std::string& stem, std::size_t layer, const Matrix& grid) {
  Image img(grid.rows(), grid.cols(), 1);
  const double lo = grid.minCoeff();
  const double span = grid.maxCoeff() - lo;
  for (Index y = 0; y < grid.rows(); ++y) {
    for (Index x = 0; x < grid.cols(); ++x) img.at(y, x, 0) = span > 0 ? (grid(y, x) - lo) / span : 0.0;
  }
  write_pnm((fs::path(dir) / layer_name(stem, layer, ".pgm")).string(), img);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << std::setprecision(17);
  return out;
}

}  // namespace

void write_analysis(const AnalysisBundle& bundle, const std::string& dir) {
  fs::create_directories(dir);
  for (std::size_t l = 0; l < bundle.heatmaps.size(); ++l) {
    const auto& h = bundle.heatmaps[l];
    write_grid(dir, "heatmap_layer", l + 1, h);
    auto csv = open_out(fs::path(dir) / layer_name("heatmap_layer", l + 1, ".csv"));
    for (Index y = 0; y < h.rows(); ++y) {
      for (Index x = 0; x < h.cols(); ++x) csv << (x ? "," : "") << h(y, x);
      csv << "\n";
    }
  }
  {
    auto csv = open_out(fs::path(dir) / "dimension_weights.csv");
    csv << "dim,mean_weight\n";
    for (Index j = 0; j < bundle.dimension_weights.size(); ++j) csv << j << "," << bundle.dimension_weights(j) << "\n";
  }
  {
    auto csv = open_out(fs::path(dir) / "scatter.csv");
    csv << "index,omega,phi,is_distraction\n";
    for (const auto& r : bundle.scatter) {
      csv << r.index << "," << r.omega << "," << r.phi << "," << (r.distraction ? 1 : 0) << "\n";
    }
  }
  const Index g = bundle.grid_side;
  for (std::size_t l = 0; l < bundle.masks.size(); ++l) {
    Matrix grid = Matrix::Zero(g, g);
    for (auto i : bundle.masks[l]) grid(i / g, i % g) = 1.0;
    Image img(g, g, 1);
    for (Index i = 0; i < g * g; ++i) img.at(i / g, i % g, 0) = grid(i / g, i % g);
    write_pnm((fs::path(dir) / layer_name("mask_layer", l + 1, ".pgm")).string(), img);
  }
}

const std::vector<std::string>& sweep_parameters() {
  static const std::vector<std::string> params = {"tau",       "beta",           "similarity_source",
                                                  "threshold_rule", "receptive_field", "layer_range"};
  return params;
}

std::vector<std::string> default_sweep_values(const std::string& param, const ModelConfig& model) {
  if (param == "tau") return {"3/d", "4/d", "5/d", "6/d", "7/d"};
  if (param == "beta") return {"0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"};
  if (param == "similarity_source") return {"qk", "qq", "kk", "kk_cum_avg"};
  if (param == "threshold_rule") return {"mean", "otsu"};
  if (param == "receptive_field") return {"3", "5", "7"};
  if (param == "layer_range") {
    const int half = std::max(1, model.layers / 2);
    std::vector<std::string> v;
    for (int l = half; l <= model.layers; ++l) v.push_back(std::to_string(l));
    v.push_back(std::to_string(half) + "-" + std::to_string(model.layers));
    v.push_back("1-" + std::to_string(model.layers));
    return v;
  }
  throw ParameterError("unknown sweep parameter '" + param + "'");
}

namespace {

double parse_number(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParameterError("'" + s + "' is not a number");
  }
  if (used != s.size()) throw ParameterError("'" + s + "' is not a number");
  return v;
}

double parse_tau(const std::string& s, int width) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) return parse_number(s);
  const std::string num = s.substr(0, slash);
  const std::string den = s.substr(slash + 1);
  const double d = den == "d" ? static_cast<double>(width) : parse_number(den);
  if (d == 0) throw ParameterError("tau '" + s + "' divides by zero");
  return parse_number(num) / d;
}

}  // namespace

void apply_sweep_value(RunConfig& run, const std::string& param, const std::string& value) {
  if (param == "tau") {
    run.model.tau = parse_tau(value, run.model.width);
  } else if (param == "beta") {
    run.model.beta = parse_number(value);
  } else if (param == "similarity_source") {
    run.similarity_source = parse_similarity_source(value);
  } else if (param == "threshold_rule") {
    run.threshold_rule = parse_threshold_rule(value);
  } else if (param == "receptive_field") {
    const double v = parse_number(value);
    if (v != std::floor(v)) throw ParameterError("receptive field must be an integer");
    run.receptive_field = static_cast<int>(v);
  } else if (param == "layer_range") {
    run.model.redistribution_layers = parse_layer_range(value);
  } else {
    throw ParameterError("unknown sweep parameter '" + param + "'");
  }
  run.validate();
}

std::vector<SweepRow> sweep(const std::string& param, const std::vector<std::string>& values,
                            const DatasetManifest& manifest, std::shared_ptr<const CheckpointStore> checkpoint,
                            const ClassEmbeddingSet& classes, const RunConfig& run) {
  if (std::find(sweep_parameters().begin(), sweep_parameters().end(), param) == sweep_parameters().end()) {
    throw ParameterError("unknown sweep parameter '" + param + "'");
  }
  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig r = run;
    apply_sweep_value(r, param, v);
    runs.push_back(std::move(r));
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto report = evaluate(manifest, checkpoint, classes, runs[i]);
    rows.push_back({param, values[i], report.miou});
    spdlog::info("sweep {}={}: mIoU {}", param, values[i], report.miou ? std::to_string(*report.miou) : "n/a");
  }
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  auto out = open_out(path);
  out << "param,value,miou\n";
  for (const auto& r : rows) {
    out << r.param << "," << r.value << ",";
    if (r.miou) out << *r.miou;
    out << "\n";
  }
}

RunConfig fixture_run_config() {
  RunConfig run;
  ModelConfig& m = run.model;
  m.variant = Variant::Custom;
  m.layers = 2;
  m.heads = 2;
  m.width = 16;
  m.shared_width = 8;
  m.patch_size = 8;
  m.image_size = 24;
  m.distraction_dims = {3, 11};
  m.tau = 5.0 / 16.0;
  m.beta = 0.7;
  run.window = 24;
  run.stride = 12;
  run.short_side = 36;
  return run;
}

namespace {

// Synthetic scene: background (0) with a red disc (1) and a blue bar (2).
std::pair<Image, LabelMap> synthetic_scene(Index h, Index w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w, 3);
  LabelMap labels(h, w, 0);
  const double cy = h * (0.3 + 0.4 * u(rng));
  const double cx = w * (0.3 + 0.4 * u(rng));
  const double radius = std::min(h, w) * (0.2 + 0.1 * u(rng));
  const Index bar = static_cast<Index>(w * (0.1 + 0.2 * u(rng)));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double r = 0.45, g = 0.55, b = 0.4;
      std::int32_t label = 0;
      if (x < bar) {
        r = 0.1, g = 0.2, b = 0.9;
        label = 2;
      }
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= radius * radius) {
        r = 0.9, g = 0.15, b = 0.1;
        label = 1;
      }
      const double noise = 0.05 * (u(rng) - 0.5);
      img.at(y, x, 0) = std::clamp(r + noise, 0.0, 1.0);
      img.at(y, x, 1) = std::clamp(g + noise, 0.0, 1.0);
      img.at(y, x, 2) = std::clamp(b + noise, 0.0, 1.0);
      labels.at(y, x) = label;
    }
  }
  // A strip of ignore pixels along the bottom edge.
  for (Index x = 0; x < w; ++x) labels.at(h - 1, x) = 255;
  return {std::move(img), std::move(labels)};
}

}  // namespace

FixturePaths make_fixture(const std::string& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  const fs::path root(dir);
  const RunConfig run = fixture_run_config();
  FixturePaths paths;

  paths.checkpoint = (root / "checkpoint.safetensors").string();
  write_checkpoint(paths.checkpoint, make_random_checkpoint(run.model, seed));

  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix rows(3, run.model.shared_width);
  for (Index i = 0; i < rows.size(); ++i) rows(i) = static_cast<float>(normal(rng));
  const auto classes = make_class_embeddings({"background", "red", "blue"}, rows, "synthetic fixture");
  paths.classes = (root / "classes.safetensors").string();
  write_class_embeddings(paths.classes, classes);

  DatasetManifest manifest;
  manifest.class_names = classes.names;
  const std::vector<std::pair<Index, Index>> sizes = {{24, 24}, {36, 48}, {30, 40}, {40, 30}};
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const auto [img, labels] = synthetic_scene(sizes[i].first, sizes[i].second, rng);
    const std::string stem = "image" + std::to_string(i);
    write_pnm((root / (stem + ".ppm")).string(), img);
    write_label_pgm((root / (stem + "_label.pgm")).string(), labels);
    manifest.items.push_back({stem + ".ppm", stem + "_label.pgm"});
    paths.images.push_back((root / (stem + ".ppm")).string());
  }
  paths.manifest = (root / "manifest.json").string();
  write_manifest(paths.manifest, manifest);

  paths.config = (root / "config.json").string();
  RunConfig saved = run;
  saved.output_dir = (root / "out").string();
  auto j = to_json(saved);
  // Resource paths for the command-line tool, relative to this file.
  j["checkpoint"] = "checkpoint.safetensors";
  j["classes"] = "classes.safetensors";
  auto out = open_out(paths.config);
  out << j.dump(2) << "\n";
  return paths;
}

}  // namespace refocus
