#pragma once

// Embedding files ("IDOW") and dataset manifests. Everything is validated
// eagerly at load; downstream code assumes the manifest invariants hold.
//
// Embedding file layout (little-endian):
//   16-byte header: "IDOW", u16 version = 1, u16 reserved = 0, u32 n, u32 q
//   n*q binary32 values, row-major
// The file is exactly 16 + 4*n*q bytes.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "insdet/binary_io.hpp"
#include "insdet/core.hpp"

namespace insdet {

inline constexpr std::string_view kEmbeddingMagic = "IDOW";
inline constexpr int kManifestFormatVersion = 1;

inline binary::Bytes encode_embeddings(const EmbeddingMatrix& m) {
  if (!m.all_finite()) {
    throw Error(ErrorCode::NonFinite, "write_embeddings: matrix contains non-finite values");
  }
  if (m.rows() > 0xffffffffULL || m.cols() > 0xffffffffULL) {
    throw Error(ErrorCode::InvalidArgument, "write_embeddings: matrix too large for u32 extents");
  }
  binary::Bytes out;
  out.reserve(binary::kHeaderSize + 4 * m.data().size());
  binary::put_header(out, kEmbeddingMagic, static_cast<std::uint32_t>(m.rows()),
                     static_cast<std::uint32_t>(m.cols()));
  for (float v : m.data()) binary::put_f32(out, v);
  return out;
}

inline EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes,
                                         std::string_view what = "embedding file") {
  const auto h = binary::parse_header(
      bytes, kEmbeddingMagic, [](std::uint64_t n, std::uint64_t q) { return 4 * n * q; }, what);
  std::vector<float> values(std::size_t(h.extent0) * h.extent1);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = binary::get_f32(bytes, binary::kHeaderSize + 4 * i);
    if (!std::isfinite(values[i])) {
      throw Error(ErrorCode::NonFinite, std::string(what) + ": non-finite value at element " +
                                            std::to_string(i));
    }
  }
  return EmbeddingMatrix(h.extent0, h.extent1, std::move(values));
}

inline void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  const auto bytes = encode_embeddings(m);
  binary::write_file_atomic(path, bytes);
}

inline EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(binary::read_file(path), path.string());
}

struct Scene {
  SceneId id = 0;
  int width = 0;
  int height = 0;
  Difficulty difficulty = Difficulty::Untagged;
  std::vector<Proposal> proposals;
  EmbeddingMatrix proposal_embeddings;  // one row per proposal, in order
  std::vector<GroundTruth> ground_truth;
};

/// A fully validated dataset with every embedding row resolved into memory.
struct DatasetManifest {
  int format_version = kManifestFormatVersion;
  std::size_t dim = 0;
  SizeThresholds size_thresholds;
  std::vector<ReferenceImage> references;
  EmbeddingMatrix reference_embeddings;  // reference i -> row references[i].embedding
  std::vector<Scene> scenes;
  EmbeddingMatrix distractors;
  std::string distractor_source;
  std::vector<InstanceId> novel_instances;

  /// Instances with at least one reference, ascending.
  std::vector<InstanceId> reference_instances() const {
    std::set<InstanceId> ids;
    for (const auto& r : references) ids.insert(r.instance);
    return {ids.begin(), ids.end()};
  }

  const Scene* find_scene(SceneId id) const {
    for (const auto& s : scenes) {
      if (s.id == id) return &s;
    }
    return nullptr;
  }

  std::size_t ground_truth_count() const {
    std::size_t n = 0;
    for (const auto& s : scenes) n += s.ground_truth.size();
    return n;
  }
};

namespace detail {

using nlohmann::json;

[[noreturn]] inline void schema_error(const std::string& msg) {
  throw Error(ErrorCode::SchemaViolation, "manifest: " + msg);
}

inline const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) schema_error(where + ": missing field '" + key + "'");
  return obj.at(key);
}

template <typename T>
T get_as(const json& v, const std::string& where) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    schema_error(where + ": wrong type");
  }
}

inline std::uint64_t get_index(const json& v, const std::string& where) {
  const bool negative = v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0;
  if (!v.is_number_integer() || negative) schema_error(where + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

inline BoundingBox parse_box(const json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 4) schema_error(where + ": bbox must be [x, y, w, h]");
  BoundingBox b;
  for (const auto& c : v) {
    if (!c.is_number()) schema_error(where + ": bbox entries must be numbers");
  }
  b.x = v[0].get<double>();
  b.y = v[1].get<double>();
  b.w = v[2].get<double>();
  b.h = v[3].get<double>();
  if (!b.valid()) schema_error(where + ": bbox needs finite coordinates and w, h > 0");
  return b;
}

inline Difficulty parse_difficulty(const json& v, const std::string& where) {
  const auto s = get_as<std::string>(v, where);
  if (s == "easy") return Difficulty::Easy;
  if (s == "hard") return Difficulty::Hard;
  if (s == "untagged") return Difficulty::Untagged;
  schema_error(where + ": difficulty must be easy, hard or untagged");
}

inline Origin parse_origin(const json& v, const std::string& where) {
  const auto s = get_as<std::string>(v, where);
  if (s == "real") return Origin::Real;
  if (s == "synthetic") return Origin::Synthetic;
  schema_error(where + ": origin must be real or synthetic");
}

/// Lazily loads each named embedding group once and checks its dimension.
class FileTable {
 public:
  FileTable(const json& files, std::filesystem::path base, std::size_t dim)
      : base_(std::move(base)), dim_(dim) {
    if (!files.is_object()) schema_error("embedding_files must be an object");
    for (const auto& [key, value] : files.items()) {
      paths_[key] = get_as<std::string>(value, "embedding_files." + key);
    }
  }

  const EmbeddingMatrix& get(const std::string& key, const std::string& where) {
    auto it = loaded_.find(key);
    if (it != loaded_.end()) return it->second;
    auto p = paths_.find(key);
    if (p == paths_.end()) schema_error(where + ": unknown embedding file '" + key + "'");
    std::filesystem::path path = p->second;
    if (path.is_relative()) path = base_ / path;
    auto m = read_embeddings(path);
    if (m.cols() != dim_) {
      throw Error(ErrorCode::DimMismatch, "manifest: file '" + key + "' has dimension " +
                                              std::to_string(m.cols()) + " but manifest dim is " +
                                              std::to_string(dim_));
    }
    return loaded_.emplace(key, std::move(m)).first->second;
  }

  std::span<const float> row(const std::string& key, std::uint64_t r, const std::string& where) {
    const auto& m = get(key, where);
    if (r >= m.rows()) {
      throw Error(ErrorCode::DanglingIndex, "manifest: " + where + " references row " +
                                                std::to_string(r) + " of '" + key + "' which has " +
                                                std::to_string(m.rows()) + " rows");
    }
    return m.row(static_cast<std::size_t>(r));
  }

 private:
  std::filesystem::path base_;
  std::size_t dim_;
  std::map<std::string, std::string> paths_;
  std::map<std::string, EmbeddingMatrix> loaded_;
};

}  // namespace detail

/// Parses and validates a manifest document. Relative embedding paths
/// resolve against `base_dir`.
inline DatasetManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  using detail::get_as;
  using detail::require;
  using detail::schema_error;

  if (!doc.is_object()) schema_error("document root must be an object");
  static const std::set<std::string> known = {"format_version", "dim", "size_thresholds",
                                              "embedding_files", "references", "scenes",
                                              "distractors", "novel_instances", "generator"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) schema_error("unknown top-level field '" + key + "'");
  }

  DatasetManifest m;
  m.format_version = get_as<int>(require(doc, "format_version", "root"), "format_version");
  if (m.format_version != kManifestFormatVersion) {
    throw Error(ErrorCode::VersionMismatch,
                "manifest: unsupported format_version " + std::to_string(m.format_version));
  }
  m.dim = detail::get_index(require(doc, "dim", "root"), "dim");
  if (m.dim == 0) schema_error("dim must be positive");

  if (doc.contains("size_thresholds")) {
    const auto& t = doc.at("size_thresholds");
    m.size_thresholds.small = get_as<double>(require(t, "small", "size_thresholds"), "size_thresholds.small");
    m.size_thresholds.medium = get_as<double>(require(t, "medium", "size_thresholds"), "size_thresholds.medium");
    if (!(m.size_thresholds.small > 0) || !(m.size_thresholds.small < m.size_thresholds.medium) ||
        !std::isfinite(m.size_thresholds.medium)) {
      schema_error("size_thresholds must satisfy 0 < small < medium");
    }
  }

  detail::FileTable files(require(doc, "embedding_files", "root"), base_dir, m.dim);

  const auto& refs = require(doc, "references", "root");
  if (!refs.is_array()) schema_error("references must be an array");
  m.reference_embeddings = EmbeddingMatrix(0, m.dim);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const std::string where = "references[" + std::to_string(i) + "]";
    const auto& r = refs[i];
    ReferenceImage ref;
    ref.instance.value = static_cast<std::uint32_t>(detail::get_index(require(r, "instance", where), where + ".instance"));
    const auto file = get_as<std::string>(require(r, "file", where), where + ".file");
    const auto row = detail::get_index(require(r, "row", where), where + ".row");
    ref.origin = r.contains("origin") ? detail::parse_origin(r.at("origin"), where + ".origin") : Origin::Real;
    ref.view_index = r.contains("view") ? get_as<std::int64_t>(r.at("view"), where + ".view") : 0;
    ref.embedding = m.reference_embeddings.rows();
    m.reference_embeddings.append_row(files.row(file, row, where));
    m.references.push_back(ref);
  }

  if (doc.contains("novel_instances")) {
    const auto& nov = doc.at("novel_instances");
    if (!nov.is_array()) schema_error("novel_instances must be an array");
    for (const auto& v : nov) {
      m.novel_instances.push_back(InstanceId{static_cast<std::uint32_t>(detail::get_index(v, "novel_instances"))});
    }
  }
  const auto known_instances = m.reference_instances();
  auto instance_known = [&](InstanceId id) {
    return std::binary_search(known_instances.begin(), known_instances.end(), id) ||
           std::find(m.novel_instances.begin(), m.novel_instances.end(), id) != m.novel_instances.end();
  };

  const auto& scenes = require(doc, "scenes", "root");
  if (!scenes.is_array()) schema_error("scenes must be an array");
  std::set<SceneId> seen;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const std::string where = "scenes[" + std::to_string(si) + "]";
    const auto& s = scenes[si];
    Scene scene;
    scene.id = detail::get_index(require(s, "id", where), where + ".id");
    if (!seen.insert(scene.id).second) {
      throw Error(ErrorCode::DuplicateSceneId, "manifest: duplicate scene id " + std::to_string(scene.id));
    }
    scene.width = s.contains("width") ? get_as<int>(s.at("width"), where + ".width") : 0;
    scene.height = s.contains("height") ? get_as<int>(s.at("height"), where + ".height") : 0;
    if (scene.width < 0 || scene.height < 0) schema_error(where + ": negative image size");
    scene.difficulty = s.contains("difficulty") ? detail::parse_difficulty(s.at("difficulty"), where + ".difficulty")
                                                : Difficulty::Untagged;
    scene.proposal_embeddings = EmbeddingMatrix(0, m.dim);
    const auto& props = s.contains("proposals") ? s.at("proposals") : nlohmann::json::array();
    if (!props.is_array()) schema_error(where + ".proposals must be an array");
    for (std::size_t pi = 0; pi < props.size(); ++pi) {
      const std::string pw = where + ".proposals[" + std::to_string(pi) + "]";
      const auto& p = props[pi];
      Proposal prop;
      prop.scene = scene.id;
      prop.box = detail::parse_box(require(p, "bbox", pw), pw + ".bbox");
      const auto file = get_as<std::string>(require(p, "file", pw), pw + ".file");
      const auto row = detail::get_index(require(p, "row", pw), pw + ".row");
      if (p.contains("detector_score") && !p.at("detector_score").is_null()) {
        const double ds = get_as<double>(p.at("detector_score"), pw + ".detector_score");
        if (!(ds >= 0.0 && ds <= 1.0)) schema_error(pw + ": detector_score must lie in [0, 1]");
        prop.detector_score = ds;
      }
      prop.embedding = scene.proposal_embeddings.rows();
      scene.proposal_embeddings.append_row(files.row(file, row, pw));
      scene.proposals.push_back(prop);
    }
    const auto& gts = s.contains("ground_truth") ? s.at("ground_truth") : nlohmann::json::array();
    if (!gts.is_array()) schema_error(where + ".ground_truth must be an array");
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const std::string gw = where + ".ground_truth[" + std::to_string(gi) + "]";
      GroundTruth gt;
      gt.scene = scene.id;
      gt.instance.value = static_cast<std::uint32_t>(detail::get_index(require(gts[gi], "instance", gw), gw + ".instance"));
      if (!instance_known(gt.instance)) {
        throw Error(ErrorCode::UnknownInstance, "manifest: " + gw + " names instance " +
                                                    std::to_string(gt.instance.value) +
                                                    " which has no references and is not flagged novel");
      }
      gt.box = detail::parse_box(require(gts[gi], "bbox", gw), gw + ".bbox");
      gt.size_class = size_class(gt.box, m.size_thresholds);
      gt.difficulty = scene.difficulty;
      scene.ground_truth.push_back(gt);
    }
    m.scenes.push_back(std::move(scene));
  }

  m.distractors = EmbeddingMatrix(0, m.dim);
  if (doc.contains("distractors") && !doc.at("distractors").is_null()) {
    const auto& d = doc.at("distractors");
    const auto file = get_as<std::string>(require(d, "file", "distractors"), "distractors.file");
    const auto& all = files.get(file, "distractors");
    std::uint64_t count = d.contains("count") ? detail::get_index(d.at("count"), "distractors.count") : all.rows();
    if (count > all.rows()) {
      throw Error(ErrorCode::DanglingIndex, "manifest: distractors.count " + std::to_string(count) +
                                                " exceeds the " + std::to_string(all.rows()) +
                                                " rows in '" + file + "'");
    }
    for (std::uint64_t r = 0; r < count; ++r) m.distractors.append_row(all.row(static_cast<std::size_t>(r)));
    m.distractor_source = d.contains("source") ? get_as<std::string>(d.at("source"), "distractors.source") : file;
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, "manifest: not valid JSON: " + std::string(e.what()));
  }
  return parse_manifest(doc, path.parent_path());
}

}  // namespace insdet
