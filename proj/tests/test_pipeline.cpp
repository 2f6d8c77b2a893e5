#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>

#include "refocus/errors.hpp"
#include "refocus/image_io.hpp"
#include "refocus/pipeline.hpp"
#include "test_support.hpp"

using namespace refocus;
namespace fs = std::filesystem;
using testing_support::random_image;
using testing_support::scratch_dir;

namespace {

LabelMap labels(Index h, Index w, std::vector<std::int32_t> v) {
  LabelMap m(h, w);
  m.labels = std::move(v);
  return m;
}

struct Fixture {
  FixturePaths paths;
  RunConfig run;
  std::shared_ptr<const CheckpointStore> ckpt;
  ClassEmbeddingSet classes;
  DatasetManifest manifest;
};

Fixture load_fixture(const std::string& name) {
  Fixture f;
  f.paths = make_fixture(scratch_dir(name).string());
  f.run = fixture_run_config();
  f.ckpt = std::make_shared<const CheckpointStore>(load_checkpoint(f.paths.checkpoint, f.run.model));
  f.classes = load_class_embeddings(f.paths.classes, f.run.model.shared_width);
  f.manifest = load_manifest(f.paths.manifest);
  return f;
}

// Independent overlap-average oracle: crop, score and average in plain loops.
Image averaged_logits_oracle(const Segmenter& seg, const Image& normalized) {
  const Index win = seg.run().window, stride = seg.run().stride;
  const Index nc = seg.classes().size();
  Image sum(normalized.height, normalized.width, nc);
  std::vector<double> count(static_cast<std::size_t>(normalized.height * normalized.width), 0.0);
  std::vector<Index> ys, xs;
  for (Index y = 0;; y += stride) {
    ys.push_back(std::min(y, normalized.height - win));
    if (y + win >= normalized.height) break;
  }
  for (Index x = 0;; x += stride) {
    xs.push_back(std::min(x, normalized.width - win));
    if (x + win >= normalized.width) break;
  }
  for (Index oy : ys) {
    for (Index ox : xs) {
      Image crop(win, win, 3);
      for (Index y = 0; y < win; ++y) {
        for (Index x = 0; x < win; ++x) {
          for (Index c = 0; c < 3; ++c) crop.at(y, x, c) = normalized.at(oy + y, ox + x, c);
        }
      }
      const Image l = seg.window_logits(crop);
      for (Index y = 0; y < win; ++y) {
        for (Index x = 0; x < win; ++x) {
          count[static_cast<std::size_t>((oy + y) * normalized.width + ox + x)] += 1.0;
          for (Index c = 0; c < nc; ++c) sum.at(oy + y, ox + x, c) += l.at(y, x, c);
        }
      }
    }
  }
  for (Index y = 0; y < normalized.height; ++y) {
    for (Index x = 0; x < normalized.width; ++x) {
      for (Index c = 0; c < nc; ++c) sum.at(y, x, c) /= count[static_cast<std::size_t>(y * normalized.width + x)];
    }
  }
  return sum;
}

}  // namespace

TEST(Windows, ExactWindowGivesOne) {
  EXPECT_EQ(window_starts(224, 224, 112), (std::vector<Index>{0}));
  EXPECT_EQ(enumerate_windows(224, 224, 224, 112).size(), 1u);
}

TEST(Windows, StandardResolutionGivesSix) {
  EXPECT_EQ(window_starts(336, 224, 112), (std::vector<Index>{0, 112}));
  EXPECT_EQ(window_starts(448, 224, 112), (std::vector<Index>{0, 112, 224}));
  const auto w = enumerate_windows(336, 448, 224, 112);
  ASSERT_EQ(w.size(), 6u);
  EXPECT_EQ(w[0], (Window{0, 0}));
  EXPECT_EQ(w[2], (Window{0, 224}));
  EXPECT_EQ(w[5], (Window{112, 224}));
}

TEST(Windows, LastWindowIsEdgeAligned) {
  EXPECT_EQ(window_starts(300, 224, 112), (std::vector<Index>{0, 76}));
  EXPECT_EQ(window_starts(500, 224, 112), (std::vector<Index>{0, 112, 224, 276}));
}

TEST(Windows, CoverageIsConservedOnRandomSizes) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Index> win_d(4, 40);
  for (int trial = 0; trial < 200; ++trial) {
    const Index win = win_d(rng);
    const Index stride = std::uniform_int_distribution<Index>(1, win)(rng);
    const Index h = std::uniform_int_distribution<Index>(win, 4 * win)(rng);
    const Index w = std::uniform_int_distribution<Index>(win, 4 * win)(rng);
    const auto windows = enumerate_windows(h, w, win, stride);
    const auto ys = window_starts(h, win, stride), xs = window_starts(w, win, stride);
    EXPECT_EQ(windows.size(), ys.size() * xs.size());
    const std::size_t expected =
        static_cast<std::size_t>((h - win + stride - 1) / stride + 1) * static_cast<std::size_t>((w - win + stride - 1) / stride + 1);
    EXPECT_EQ(windows.size(), expected);
    std::vector<int> hits(static_cast<std::size_t>(h * w), 0);
    for (const auto& win_at : windows) {
      ASSERT_LE(win_at.y + win, h);
      ASSERT_LE(win_at.x + win, w);
      for (Index y = 0; y < win; ++y) {
        for (Index x = 0; x < win; ++x) ++hits[static_cast<std::size_t>((win_at.y + y) * w + win_at.x + x)];
      }
    }
    long total = 0;
    for (int v : hits) {
      EXPECT_GE(v, 1);
      total += v;
    }
    EXPECT_EQ(total, static_cast<long>(windows.size()) * win * win);
  }
}

TEST(Resize, ShortSideScaling) {
  EXPECT_EQ(resized_shape(500, 375, 336), std::make_pair(Index{448}, Index{336}));
  EXPECT_EQ(resized_shape(224, 224, 336), std::make_pair(Index{336}, Index{336}));
  EXPECT_EQ(resized_shape(30, 40, 36), std::make_pair(Index{36}, Index{48}));
  EXPECT_EQ(resized_shape(1, 3, 24), std::make_pair(Index{24}, Index{72}));
}

TEST(Resize, ReflectPadMirrorsWithoutRepeatingEdge) {
  Image img(2, 3, 1);
  img.data = {1, 2, 3, 4, 5, 6};
  const Image p = reflect_pad(img, 3, 5);
  ASSERT_EQ(p.height, 3);
  ASSERT_EQ(p.width, 5);
  EXPECT_EQ(p.at(0, 3, 0), 2.0);
  EXPECT_EQ(p.at(0, 4, 0), 1.0);
  EXPECT_EQ(p.at(2, 0, 0), 1.0);
  EXPECT_EQ(p.at(1, 2, 0), 6.0);
  EXPECT_EQ(reflect_pad(img, 2, 3), img);
}

TEST(Confusion, ToyExampleIsSevenTwelfths) {
  ConfusionMatrix cm(2, 255);
  cm.add(labels(2, 2, {0, 0, 1, 1}), labels(2, 2, {0, 1, 1, 1}));
  const auto r = cm.report({"a", "b"});
  ASSERT_TRUE(r.miou.has_value());
  EXPECT_DOUBLE_EQ(*r.classes[0].iou, 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(*r.classes[1].iou, 2.0 / 3.0);
  EXPECT_EQ(*r.miou, 7.0 / 12.0);
  EXPECT_EQ(r.pixels, 4);
}

TEST(Confusion, PerfectPredictionIsOne) {
  ConfusionMatrix cm(3, 255);
  const auto gt = labels(2, 3, {0, 1, 2, 2, 1, 0});
  cm.add(gt, gt);
  EXPECT_DOUBLE_EQ(*cm.report({"a", "b", "c"}).miou, 1.0);
}

TEST(Confusion, AbsentClassesAndIgnorePixels) {
  ConfusionMatrix cm(3, 255);
  cm.add(labels(1, 4, {0, 255, 0, 255}), labels(1, 4, {0, 2, 1, 2}));
  const auto r = cm.report({"a", "b", "c"});
  EXPECT_EQ(r.pixels, 2);
  EXPECT_FALSE(r.classes[1].iou.has_value());
  EXPECT_FALSE(r.classes[2].iou.has_value());
  EXPECT_EQ(r.classes[2].pred_pixels, 0);
  EXPECT_DOUBLE_EQ(*r.miou, 0.5);
}

TEST(Confusion, AllIgnoreIsFlaggedEmpty) {
  ConfusionMatrix cm(2, 255);
  cm.add(labels(2, 2, {255, 255, 255, 255}), labels(2, 2, {0, 1, 0, 1}));
  const auto r = cm.report({"a", "b"});
  EXPECT_TRUE(r.empty());
  EXPECT_TRUE(r.to_json().at("miou").is_null());
  EXPECT_TRUE(r.to_json().at("empty").get<bool>());
}

TEST(Confusion, RejectsBadLabels) {
  ConfusionMatrix cm(2, 255);
  EXPECT_THROW(cm.add(labels(1, 1, {5}), labels(1, 1, {0})), DataError);
  EXPECT_THROW(cm.add(labels(1, 1, {0}), labels(1, 1, {2})), ContractError);
  EXPECT_THROW(cm.add(labels(1, 2, {0, 0}), labels(2, 1, {0, 0})), ShapeError);
}

TEST(Confusion, MergeIsOrderIndependent) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> lab(0, 3);
  std::vector<std::pair<LabelMap, LabelMap>> pairs;
  for (int i = 0; i < 6; ++i) {
    LabelMap a(5, 5), b(5, 5);
    for (auto& v : a.labels) v = lab(rng) == 3 ? 255 : lab(rng) % 3;
    for (auto& v : b.labels) v = lab(rng) % 3;
    pairs.emplace_back(a, b);
  }
  ConfusionMatrix fwd(3, 255), rev(3, 255);
  for (const auto& [a, b] : pairs) fwd.add(a, b);
  for (auto it = pairs.rbegin(); it != pairs.rend(); ++it) {
    ConfusionMatrix one(3, 255);
    one.add(it->first, it->second);
    rev.merge(one);
  }
  EXPECT_EQ(fwd.report({"a", "b", "c"}).to_json(false), rev.report({"a", "b", "c"}).to_json(false));
}

TEST(Segmenter, ImageLogitsMatchOverlapAverageOracle) {
  const auto f = load_fixture("seg_oracle");
  const Segmenter seg(f.ckpt, f.run, f.classes);
  std::mt19937_64 rng(3);
  // 36 x 48 is already at the short side, so no resize happens.
  Image img = random_image(36, 48, rng, 0.0, 1.0);
  Image normalized = img;
  normalize_image(normalized, f.run.pixel_mean, f.run.pixel_std);
  const Image want = averaged_logits_oracle(seg, normalized);
  const Image got = seg.image_logits(img);
  ASSERT_EQ(got.height, 36);
  ASSERT_EQ(got.width, 48);
  double worst = 0.0;
  for (std::size_t i = 0; i < got.data.size(); ++i) worst = std::max(worst, std::abs(got.data[i] - want.data[i]));
  EXPECT_LE(worst, 1e-12);
}

TEST(Segmenter, OutputMatchesInputResolution) {
  const auto f = load_fixture("seg_shapes");
  std::mt19937_64 rng(4);
  for (auto [h, w] : {std::pair<Index, Index>{24, 24}, {10, 13}, {50, 31}}) {
    const auto map = segment_image(random_image(h, w, rng, 0.0, 1.0), f.ckpt, f.classes, f.run);
    EXPECT_EQ(map.labels.height, h);
    EXPECT_EQ(map.labels.width, w);
    for (auto v : map.labels.labels) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, 3);
    }
  }
}

TEST(Segmenter, EveryModeProducesAMap) {
  const auto f = load_fixture("seg_modes");
  const Image img = load_image(f.paths.images[1]);
  for (const char* mode : {"refocus", "kk_proxy_baseline", "plain_clip", "suppression:neg_inf_mask",
                           "suppression:low_pass", "suppression:mean_filter", "suppression:median_filter"}) {
    auto run = f.run;
    apply_mode(mode, run);
    const auto map = segment_image(img, f.ckpt, f.classes, run);
    EXPECT_EQ(map.labels.height, img.height) << mode;
    EXPECT_EQ(map.provenance.at("config").at("mode").get<std::string>(), mode);
  }
}

TEST(Segmenter, ThreadCountDoesNotChangeLogits) {
  const auto f = load_fixture("seg_threads");
  const Image img = load_image(f.paths.images[1]);
  auto many = f.run;
  many.threads = 3;
  EXPECT_EQ(Segmenter(f.ckpt, f.run, f.classes).image_logits(img),
            Segmenter(f.ckpt, many, f.classes).image_logits(img));
}

TEST(Segmenter, HugeTauDegeneratesToBaseline) {
  const auto f = load_fixture("seg_degenerate");
  auto quiet = f.run;
  quiet.model.tau = 1e9;
  auto baseline = f.run;
  apply_mode("kk_proxy_baseline", baseline);
  for (const auto& path : f.paths.images) {
    const Image img = load_image(path);
    EXPECT_EQ(Segmenter(f.ckpt, quiet, f.classes).image_logits(img),
              Segmenter(f.ckpt, baseline, f.classes).image_logits(img));
  }
}

TEST(Segmenter, FixtureRefocusFindsDistractionTokens) {
  const auto f = load_fixture("seg_distraction");
  const Segmenter seg(f.ckpt, f.run, f.classes);
  std::size_t found = 0;
  for (const auto& path : f.paths.images) {
    Image img = bilinear_resize(load_image(path), 24, 24);
    normalize_image(img, f.run.pixel_mean, f.run.pixel_std);
    std::vector<LayerDiagnostics> diag;
    seg.run_window(img, &diag);
    for (const auto& d : diag) found += d.profile.distraction.size();
  }
  EXPECT_GT(found, 0u);
}

TEST(Segmenter, RejectsMismatchedClasses) {
  const auto f = load_fixture("seg_bad_classes");
  const auto wrong = make_class_embeddings({"a"}, Matrix::Ones(1, 5));
  EXPECT_THROW(Segmenter(f.ckpt, f.run, wrong), ShapeError);
  ClassEmbeddingSet none;
  EXPECT_THROW(Segmenter(f.ckpt, f.run, none), ParameterError);
}

TEST(Evaluate, ManifestOrderDoesNotMatter) {
  const auto f = load_fixture("eval_order");
  const auto a = evaluate(f.manifest, f.ckpt, f.classes, f.run);
  auto reversed = f.manifest;
  std::reverse(reversed.items.begin(), reversed.items.end());
  const auto b = evaluate(reversed, f.ckpt, f.classes, f.run);
  EXPECT_EQ(a.to_json(false), b.to_json(false));
  ASSERT_TRUE(a.miou.has_value());
  EXPECT_EQ(a.images, 4);
  EXPECT_EQ(a.seconds_per_image.size(), 4u);
}

TEST(Evaluate, RepeatedRunsAreIdentical) {
  const auto f = load_fixture("eval_repeat");
  const auto a = evaluate(f.manifest, f.ckpt, f.classes, f.run);
  const auto b = evaluate(f.manifest, f.ckpt, f.classes, f.run);
  EXPECT_EQ(a.to_json(false).dump(), b.to_json(false).dump());
  EXPECT_TRUE(a.to_json(true).contains("timing"));
  EXPECT_FALSE(a.to_json(false).contains("timing"));
}

TEST(Evaluate, ClassTableMismatchIsParameterError) {
  const auto f = load_fixture("eval_mismatch");
  auto m = f.manifest;
  m.class_names = {"background", "blue", "red"};
  EXPECT_THROW(evaluate(m, f.ckpt, f.classes, f.run), ParameterError);
}

TEST(Evaluate, IgnorePixelsAreExcluded) {
  const auto f = load_fixture("eval_ignore");
  std::int64_t labelled = 0;
  for (const auto& item : f.manifest.items) {
    for (auto v : load_label_map(item.label).labels) labelled += v != f.manifest.ignore_index;
  }
  const auto r = evaluate(f.manifest, f.ckpt, f.classes, f.run);
  EXPECT_EQ(r.pixels, labelled);
  std::int64_t gt = 0;
  for (const auto& c : r.classes) gt += c.gt_pixels;
  EXPECT_EQ(gt, labelled);
}

TEST(Analyze, ShapesAndFiles) {
  const auto f = load_fixture("analyze");
  const Image img = load_image(f.paths.images[0]);
  const auto bundle = analyze(img, f.ckpt, f.run, Index{4});
  EXPECT_EQ(bundle.grid_side, 3);
  ASSERT_FALSE(bundle.heatmaps.empty());
  for (const auto& h : bundle.heatmaps) {
    EXPECT_EQ(h.rows(), 3);
    EXPECT_EQ(h.cols(), 3);
  }
  EXPECT_EQ(bundle.scatter.size(), 9u);
  EXPECT_EQ(bundle.dimension_weights.size(), 16);
  EXPECT_EQ(bundle.masks.size(), static_cast<std::size_t>(f.run.model.layers));
  EXPECT_THROW(analyze(img, f.ckpt, f.run, Index{9}), ParameterError);

  const auto dir = scratch_dir("analyze_out");
  write_analysis(bundle, dir.string());
  EXPECT_TRUE(fs::exists(dir / "heatmap_layer01.pgm"));
  EXPECT_TRUE(fs::exists(dir / "heatmap_layer01.csv"));
  EXPECT_TRUE(fs::exists(dir / "mask_layer01.pgm"));
  EXPECT_TRUE(fs::exists(dir / "dimension_weights.csv"));
  std::ifstream scatter(dir / "scatter.csv");
  std::string header;
  std::getline(scatter, header);
  EXPECT_EQ(header, "index,omega,phi,is_distraction");
  int rows = 0;
  for (std::string line; std::getline(scatter, line);) ++rows;
  EXPECT_EQ(rows, 9);
  const auto mask = load_label_map((dir / "mask_layer01.pgm").string());
  EXPECT_EQ(mask.height, 3);
}

TEST(Analyze, HeatmapRowsAreAttentionDistributions) {
  const auto f = load_fixture("analyze_rows");
  const auto bundle = analyze(load_image(f.paths.images[2]), f.ckpt, f.run, Index{0});
  for (const auto& h : bundle.heatmaps) {
    EXPECT_GE(h.minCoeff(), 0.0);
    EXPECT_LE(h.sum(), 1.0 + 1e-9);
  }
}

TEST(Analyze, SpikedDimensionIsTheUniquePeak) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<Matrix> layers;
  for (int l = 0; l < 3; ++l) {
    Matrix m(20, 12);
    for (Index i = 0; i < m.size(); ++i) m(i) = u(rng);
    m.col(7).array() += 15.0;
    layers.push_back(m);
  }
  const Vector w = mean_embedding_weights(layers);
  Index peak;
  const double top = w.maxCoeff(&peak);
  EXPECT_EQ(peak, 7);
  for (Index j = 0; j < 12; ++j) {
    if (j != 7) {
      EXPECT_LT(w(j), top / 5.0);
    }
  }
  EXPECT_NEAR(w.sum(), 1.0, 1e-12);
}

TEST(Sweep, DefaultGrids) {
  const auto m = fixture_run_config().model;
  EXPECT_EQ(default_sweep_values("beta", m).size(), 9u);
  EXPECT_EQ(default_sweep_values("tau", m), (std::vector<std::string>{"3/d", "4/d", "5/d", "6/d", "7/d"}));
  const auto b16 = ModelConfig::preset(Variant::B16);
  EXPECT_EQ(default_sweep_values("layer_range", b16),
            (std::vector<std::string>{"6", "7", "8", "9", "10", "11", "12", "6-12", "1-12"}));
  EXPECT_EQ(default_sweep_values("similarity_source", m).size(), 4u);
  EXPECT_EQ(default_sweep_values("threshold_rule", m).size(), 2u);
  EXPECT_THROW(default_sweep_values("gamma", m), ParameterError);
}

TEST(Sweep, ApplyValues) {
  RunConfig run = fixture_run_config();
  apply_sweep_value(run, "tau", "5/d");
  EXPECT_DOUBLE_EQ(run.model.tau, 5.0 / 16.0);
  apply_sweep_value(run, "tau", "1/8");
  EXPECT_DOUBLE_EQ(run.model.tau, 0.125);
  apply_sweep_value(run, "tau", "0.2");
  EXPECT_DOUBLE_EQ(run.model.tau, 0.2);
  apply_sweep_value(run, "beta", "0.3");
  EXPECT_DOUBLE_EQ(run.model.beta, 0.3);
  apply_sweep_value(run, "layer_range", "2-2");
  EXPECT_EQ(run.model.redistribution_layers, (LayerRange{2, 2}));
  apply_sweep_value(run, "receptive_field", "5");
  EXPECT_EQ(run.receptive_field, 5);
  EXPECT_THROW(apply_sweep_value(run, "gamma", "1"), ParameterError);
  EXPECT_THROW(apply_sweep_value(run, "beta", "1.5"), ParameterError);
  EXPECT_THROW(apply_sweep_value(run, "tau", "x/d"), ParameterError);
}

TEST(Sweep, BetaSweepEmitsNineRows) {
  const auto f = load_fixture("sweep");
  auto subset = f.manifest;
  subset.items.resize(1);
  const auto values = default_sweep_values("beta", f.run.model);
  const auto rows = sweep("beta", values, subset, f.ckpt, f.classes, f.run);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].param, "beta");
    EXPECT_EQ(rows[i].value, values[i]);
    EXPECT_TRUE(rows[i].miou.has_value());
  }
  const auto path = (scratch_dir("sweep_csv") / "beta.csv").string();
  write_sweep_csv(path, rows);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "param,value,miou");
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  EXPECT_EQ(n, 9);
  EXPECT_THROW(sweep("gamma", {"1"}, subset, f.ckpt, f.classes, f.run), ParameterError);
}

TEST(Fixture, WritesLoadableArtifacts) {
  const auto f = load_fixture("fixture");
  EXPECT_EQ(f.paths.images.size(), 4u);
  EXPECT_EQ(f.manifest.items.size(), 4u);
  EXPECT_EQ(f.classes.size(), 3);
  const auto cfg = load_run_config(f.paths.config);
  EXPECT_EQ(cfg.window, 24);
  EXPECT_EQ(cfg.model.layers, 2);
  // Deterministic for a fixed seed.
  const auto again = make_fixture(scratch_dir("fixture_again").string());
  EXPECT_EQ(sha256_file(again.checkpoint), sha256_file(f.paths.checkpoint));
}
