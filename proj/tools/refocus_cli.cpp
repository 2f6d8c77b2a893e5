// Command-line front end: segment, evaluate, analyze, sweep, make-fixture.

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "refocus/checkpoint.hpp"
#include "refocus/config.hpp"
#include "refocus/dataset.hpp"
#include "refocus/errors.hpp"
#include "refocus/image_io.hpp"
#include "refocus/pipeline.hpp"

namespace fs = std::filesystem;
using namespace refocus;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Options {
  std::string config;
  std::string variant;
  std::string checkpoint;
  std::string classes;
  std::string output_dir;
  std::string mode;
  std::optional<double> tau;
  std::optional<double> beta;
  std::string threshold_rule;
  std::string similarity_source;
  std::string final_attention;
  std::string layer_range;
  std::optional<int> receptive_field;
  std::optional<int> window;
  std::optional<int> stride;
  std::optional<int> short_side;
  std::optional<int> threads;
  std::optional<bool> joint_rule;
  std::optional<bool> attention_redistribution;
  std::optional<bool> embedding_redistribution;
  std::optional<bool> defocus_localization;
  std::optional<bool> abs_denominator;
  std::string attention_scale;
  bool verbose = false;
};

void add_run_flags(CLI::App& cmd, Options& o) {
  cmd.add_option("--config", o.config, "JSON run configuration");
  cmd.add_option("--variant", o.variant, "Model preset: B16, L14 or custom");
  cmd.add_option("--checkpoint", o.checkpoint, "Vision tower weights (.safetensors)");
  cmd.add_option("--classes", o.classes, "Class embeddings (.csv or .safetensors)");
  cmd.add_option("--output-dir", o.output_dir, "Output directory (overrides REFOCUS_OUTPUT_DIR)");
  cmd.add_option("--mode", o.mode, "refocus, kk_proxy_baseline, plain_clip or suppression:<strategy>");
  cmd.add_option("--tau", o.tau, "Distraction threshold");
  cmd.add_option("--beta", o.beta, "Attenuation factor in [0, 1]");
  cmd.add_option("--threshold-rule", o.threshold_rule, "Fiedler threshold: mean or otsu");
  cmd.add_option("--similarity-source", o.similarity_source, "Graph source: qk, qq, kk or kk_cum_avg");
  cmd.add_option("--final-attention", o.final_attention, "Last-layer attention: kk_avg, kk_last, qq_avg, qq_last");
  cmd.add_option("--layer-range", o.layer_range, "Layers receiving redistribution, e.g. 1-last or 6-12");
  cmd.add_option("--receptive-field", o.receptive_field, "Neighborhood size for embedding redistribution");
  cmd.add_option("--window", o.window, "Sliding window side");
  cmd.add_option("--stride", o.stride, "Sliding window stride");
  cmd.add_option("--short-side", o.short_side, "Short side after resizing");
  cmd.add_option("--threads", o.threads, "Worker threads for window evaluation");
  cmd.add_option("--joint-rule", o.joint_rule, "Require attention mass above the floor for distraction tokens");
  cmd.add_option("--attention-redistribution", o.attention_redistribution, "Enable attention redistribution");
  cmd.add_option("--embedding-redistribution", o.embedding_redistribution, "Enable embedding redistribution");
  cmd.add_option("--defocus-localization", o.defocus_localization,
                 "Locate defocused tokens by graph cut (otherwise all non-distraction patches)");
  cmd.add_option("--abs-denominator", o.abs_denominator, "Use |sum f| in the embedding-weight ratio");
  cmd.add_option("--attention-scale", o.attention_scale, "Softmax temperature: head or width");
  cmd.add_flag("-v,--verbose", o.verbose, "Debug logging");
}

struct Resolved {
  RunConfig run;
  std::string checkpoint;
  std::string classes;
};

std::string resolve_relative(const std::string& value, const std::string& config_path) {
  if (value.empty() || fs::path(value).is_absolute() || config_path.empty()) return value;
  return (fs::path(config_path).parent_path() / value).string();
}

Resolved resolve(const Options& o) {
  Resolved r;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw IoError("cannot open config '" + o.config + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError("config '" + o.config + "': " + e.what());
    }
    r.run = run_config_from_json(j);
    if (j.contains("checkpoint")) r.checkpoint = resolve_relative(j.at("checkpoint").get<std::string>(), o.config);
    if (j.contains("classes")) r.classes = resolve_relative(j.at("classes").get<std::string>(), o.config);
  }
  auto& run = r.run;
  if (!o.variant.empty()) {
    run.model = ModelConfig::preset(parse_variant(o.variant));
  }
  if (const char* env = std::getenv("REFOCUS_OUTPUT_DIR"); env && *env) run.output_dir = env;
  if (!o.output_dir.empty()) run.output_dir = o.output_dir;
  if (!o.checkpoint.empty()) r.checkpoint = o.checkpoint;
  if (!o.classes.empty()) r.classes = o.classes;
  if (!o.mode.empty()) apply_mode(o.mode, run);
  if (o.tau) run.model.tau = *o.tau;
  if (o.beta) run.model.beta = *o.beta;
  if (!o.threshold_rule.empty()) run.threshold_rule = parse_threshold_rule(o.threshold_rule);
  if (!o.similarity_source.empty()) run.similarity_source = parse_similarity_source(o.similarity_source);
  if (!o.final_attention.empty()) run.final_attention = parse_final_attention(o.final_attention);
  if (!o.layer_range.empty()) run.model.redistribution_layers = parse_layer_range(o.layer_range);
  if (!o.attention_scale.empty()) run.model.attention_scale = parse_attention_scale(o.attention_scale);
  if (o.receptive_field) run.receptive_field = *o.receptive_field;
  if (o.window) run.window = *o.window;
  if (o.stride) run.stride = *o.stride;
  if (o.short_side) run.short_side = *o.short_side;
  if (o.threads) run.threads = *o.threads;
  if (o.joint_rule) run.model.joint_rule = *o.joint_rule;
  if (o.attention_redistribution) run.attention_redistribution = *o.attention_redistribution;
  if (o.embedding_redistribution) run.embedding_redistribution = *o.embedding_redistribution;
  if (o.defocus_localization) run.defocus_localization = *o.defocus_localization;
  if (o.abs_denominator) run.model.abs_denominator = *o.abs_denominator;
  run.validate();
  return r;
}

std::shared_ptr<const CheckpointStore> open_checkpoint(const Resolved& r) {
  if (r.checkpoint.empty()) throw ParameterError("no checkpoint given (--checkpoint or \"checkpoint\" in config)");
  return std::make_shared<const CheckpointStore>(load_checkpoint(r.checkpoint, r.run.model));
}

ClassEmbeddingSet open_classes(const Resolved& r) {
  if (r.classes.empty()) throw ParameterError("no class embeddings given (--classes or \"classes\" in config)");
  return load_class_embeddings(r.classes, r.run.model.shared_width);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int run_main(int argc, char** argv) {
  CLI::App app{"Training-free attention refocusing for dense CLIP inference"};
  app.require_subcommand(1);
  Options o;

  auto* segment = app.add_subcommand("segment", "Segment images into class maps");
  add_run_flags(*segment, o);
  std::vector<std::string> images;
  segment->add_option("images", images, "Input images")->required();

  auto* evaluate_cmd = app.add_subcommand("evaluate", "mIoU over a dataset manifest");
  add_run_flags(*evaluate_cmd, o);
  std::string manifest_path;
  bool no_timing = false;
  evaluate_cmd->add_option("--manifest", manifest_path, "Dataset manifest (.json)")->required();
  evaluate_cmd->add_flag("--no-timing", no_timing, "Omit wall-clock fields from the report");

  auto* analyze_cmd = app.add_subcommand("analyze", "Attention and embedding diagnostics for one image");
  add_run_flags(*analyze_cmd, o);
  std::string analyze_image;
  std::optional<Index> query;
  analyze_cmd->add_option("image", analyze_image, "Input image")->required();
  analyze_cmd->add_option("--query", query, "Patch index whose attention row is exported per layer");

  auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate a grid of values for one parameter");
  add_run_flags(*sweep_cmd, o);
  std::string param;
  std::string values;
  std::optional<std::size_t> limit;
  sweep_cmd->add_option("--manifest", manifest_path, "Dataset manifest (.json)")->required();
  sweep_cmd->add_option("--param", param, "tau, beta, similarity_source, threshold_rule, receptive_field, layer_range")
      ->required();
  sweep_cmd->add_option("--values", values, "Comma-separated values (default grid when omitted)");
  sweep_cmd->add_option("--limit", limit, "Use only the first N manifest items");

  auto* fixture_cmd = app.add_subcommand("make-fixture", "Write the tiny synthetic checkpoint and dataset");
  std::string fixture_dir = "fixture";
  std::uint64_t seed = 7;
  fixture_cmd->add_option("--dir", fixture_dir, "Destination directory");
  fixture_cmd->add_option("--seed", seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::warn);

  if (fixture_cmd->parsed()) {
    const auto paths = make_fixture(fixture_dir, seed);
    std::cout << paths.config << "\n";
    return kExitOk;
  }

  const Resolved r = resolve(o);
  const fs::path out_dir(r.run.output_dir);
  fs::create_directories(out_dir);

  if (segment->parsed()) {
    const Segmenter seg(open_checkpoint(r), r.run, open_classes(r));
    for (const auto& path : images) {
      auto map = seg.segment(load_image(path));
      map.provenance["image"] = path;
      const auto dest = out_dir / (fs::path(path).stem().string() + ".png");
      write_segmentation(map, dest.string());
      std::cout << dest.string() << "\n";
    }
  } else if (evaluate_cmd->parsed()) {
    const auto report = evaluate(load_manifest(manifest_path), open_checkpoint(r), open_classes(r), r.run);
    write_json(out_dir / "report.json", report.to_json(!no_timing));
    if (report.miou) {
      std::cout << "mIoU " << *report.miou << "\n";
    } else {
      std::cout << "mIoU n/a (no labelled pixels)\n";
    }
  } else if (analyze_cmd->parsed()) {
    const auto bundle = analyze(load_image(analyze_image), open_checkpoint(r), r.run, query);
    write_analysis(bundle, (out_dir / "analysis").string());
    std::cout << (out_dir / "analysis").string() << "\n";
  } else if (sweep_cmd->parsed()) {
    auto manifest = load_manifest(manifest_path);
    if (limit && *limit < manifest.items.size()) manifest.items.resize(*limit);
    const auto grid = values.empty() ? default_sweep_values(param, r.run.model) : split_list(values);
    const auto rows = sweep(param, grid, manifest, open_checkpoint(r), open_classes(r), r.run);
    const auto dest = out_dir / ("sweep_" + param + ".csv");
    write_sweep_csv(dest.string(), rows);
    std::cout << dest.string() << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
