#include "refocus/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "refocus/errors.hpp"
#include "refocus/safetensors.hpp"

namespace refocus {

namespace fs = std::filesystem;

ClassEmbeddingSet make_class_embeddings(std::vector<std::string> names, Matrix rows, std::string note) {
  if (names.empty()) throw ParameterError("class embedding set is empty");
  if (static_cast<Index>(names.size()) != rows.rows()) {
    throw ShapeError("class embeddings: " + std::to_string(names.size()) + " names for " +
                     std::to_string(rows.rows()) + " rows");
  }
  for (Index i = 0; i < rows.rows(); ++i) {
    const double norm = rows.row(i).norm();
    if (!(norm > 0) || !std::isfinite(norm)) {
      throw DataError("class embedding '" + names[static_cast<std::size_t>(i)] + "' has zero or non-finite norm");
    }
    rows.row(i) /= norm;
  }
  return {std::move(names), std::move(rows), std::move(note)};
}

ClassEmbeddingSet load_class_embeddings(const std::string& path, Index expected_width) {
  ClassEmbeddingSet set;
  if (fs::path(path).extension() == ".csv") {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::vector<std::string> names;
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::stringstream ss(line);
      std::string cell;
      std::getline(ss, cell, ',');
      names.push_back(cell);
      rows.emplace_back();
      while (std::getline(ss, cell, ',')) {
        try {
          rows.back().push_back(std::stod(cell));
        } catch (const std::exception&) {
          throw DecodeError("'" + path + "': bad number '" + cell + "'");
        }
      }
      if (rows.back().size() != rows.front().size()) throw ShapeError("'" + path + "': ragged embedding rows");
    }
    if (names.empty()) throw ParameterError("'" + path + "' holds no classes");
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
    set = make_class_embeddings(std::move(names), std::move(m));
  } else {
    const auto file = SafetensorsFile::open(path);
    if (!file.contains("embeddings")) throw DataError("'" + path + "' has no 'embeddings' tensor");
    const auto& e = file.entry("embeddings");
    if (e.shape.size() != 2) throw ShapeError("'" + path + "': embeddings must be 2-D");
    std::vector<std::string> names;
    std::string note;
    try {
      const auto& meta = file.metadata();
      if (meta.count("names")) names = nlohmann::json::parse(meta.at("names")).get<std::vector<std::string>>();
      if (meta.count("prompt_note")) note = meta.at("prompt_note");
    } catch (const nlohmann::json::exception& ex) {
      throw DecodeError("'" + path + "': bad names metadata: " + ex.what());
    }
    if (e.shape[0] == 0 || names.empty()) throw ParameterError("'" + path + "' holds no classes");
    const auto values = file.read_values("embeddings");
    Matrix m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), e.shape[0], e.shape[1]);
    set = make_class_embeddings(std::move(names), std::move(m), std::move(note));
  }
  if (expected_width > 0 && set.width() != expected_width) {
    throw ShapeError("class embedding width " + std::to_string(set.width()) + " differs from model shared width " +
                     std::to_string(expected_width));
  }
  return set;
}

void write_class_embeddings(const std::string& path, const ClassEmbeddingSet& set) {
  if (fs::path(path).extension() == ".csv") {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.precision(17);
    for (Index i = 0; i < set.size(); ++i) {
      out << set.names[static_cast<std::size_t>(i)];
      for (Index j = 0; j < set.width(); ++j) out << "," << set.embeddings(i, j);
      out << "\n";
    }
    return;
  }
  std::vector<double> values(static_cast<std::size_t>(set.embeddings.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), set.embeddings.rows(), set.embeddings.cols()) = set.embeddings;
  write_safetensors(path, {{"embeddings", {set.embeddings.rows(), set.embeddings.cols()}, values}}, DType::F32,
                    {{"names", nlohmann::json(set.names).dump()}, {"prompt_note", set.prompt_note}});
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  DatasetManifest m;
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q.string() : (base / q).string();
  };
  try {
    nlohmann::json j;
    in >> j;
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    if (j.contains("ignore_index")) m.ignore_index = j.at("ignore_index").get<std::int32_t>();
    for (const auto& item : j.at("items")) {
      m.items.push_back({resolve(item.at("image").get<std::string>()), resolve(item.at("label").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + path + "': " + e.what());
  }
  if (m.class_names.empty()) throw DataError("manifest '" + path + "' has an empty class table");
  for (const auto& item : m.items) {
    for (const auto& f : {item.image, item.label}) {
      if (!fs::exists(f)) throw DataError("manifest '" + path + "' references missing file '" + f + "'");
    }
    if (image_dimensions(item.image) != image_dimensions(item.label)) {
      throw ShapeError("label map '" + item.label + "' does not match the dimensions of '" + item.image + "'");
    }
  }
  return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : m.items) items.push_back({{"image", item.image}, {"label", item.label}});
  nlohmann::json j = {{"classes", m.class_names}, {"ignore_index", m.ignore_index}, {"items", items}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

void write_segmentation(const SegmentationMap& map, const std::string& path) {
  if (map.labels.labels.empty()) throw ContractError("write_segmentation: empty map");
  const auto n = static_cast<std::int32_t>(map.class_names.size());
  for (auto v : map.labels.labels) {
    if (v < 0 || v >= n) {
      throw ContractError("write_segmentation: label " + std::to_string(v) + " outside class table of size " +
                          std::to_string(n));
    }
  }
  const auto ext = fs::path(path).extension().string();
  if (ext == ".png") {
    write_label_png(path, map.labels);
  } else if (ext == ".pgm") {
    write_label_pgm(path, map.labels);
  } else {
    throw ParameterError("segmentation output must end in .png or .pgm: '" + path + "'");
  }
  nlohmann::ordered_json sidecar;
  sidecar["image"] = fs::path(path).filename().string();
  sidecar["height"] = map.labels.height;
  sidecar["width"] = map.labels.width;
  sidecar["classes"] = map.class_names;
  sidecar["config"] = map.provenance;
  sidecar["sha256"] = sha256_file(path);
  std::ofstream out(path + ".json");
  if (!out) throw IoError("cannot write '" + path + ".json'");
  out << sidecar.dump(2) << "\n";
}

}  // namespace refocus
