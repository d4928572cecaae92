#pragma once

// Proposal <-> reference similarity, one-to-one stable matching, and
// threshold acceptance.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "insdet/augment.hpp"
#include "insdet/core.hpp"
#include "insdet/parallel.hpp"
#include "insdet/store.hpp"
#include "insdet/trainer.hpp"

namespace insdet {

/// Rows are proposals, columns references; entries are cosine similarities.
using SimilarityMatrix = Matrix<double>;

inline constexpr double kDefaultThreshold = 0.4;

/// Entry (i, j) = f(p_i) . g(r_j) with g = f unless a separate reference-side
/// adapter is supplied (used to evaluate proposal-only oracles).
template <typename T>
SimilarityMatrix similarity_matrix(const Adapter& adapter, const Matrix<T>& proposals, const Matrix<T>& references,
                                   unsigned threads = 1, const Adapter* reference_adapter = nullptr) {
  if (proposals.rows() > 0 && references.rows() > 0 && proposals.cols() != references.cols()) {
    throw Error(ErrorCode::DimMismatch, "similarity_matrix: proposal and reference dimensions differ");
  }
  auto adapt = [&](const Matrix<T>& m, const char* what) {
    try {
      return forward_rows(reference_adapter != nullptr ? *reference_adapter : adapter, m, threads);
    } catch (const Error& e) {
      throw Error(e.code(), std::string("similarity_matrix: ") + what + ": " + e.what());
    }
  };
  const auto refs = adapt(references, "reference");
  SimilarityMatrix s(proposals.rows(), references.rows());
  parallel_for(proposals.rows(), threads, [&](std::size_t i) {
    Activation act;
    try {
      act = forward_trace(adapter, proposals.row(i));
    } catch (const Error& e) {
      throw Error(e.code(), "similarity_matrix: proposal row " + std::to_string(i) + ": " + e.what());
    }
    for (std::size_t j = 0; j < refs.rows(); ++j) {
      s(i, j) = std::clamp(dot(act.output, refs.row(j)), -1.0, 1.0);
    }
  });
  return s;
}

/// For each proposal, the matched reference (if any).
using Assignment = std::vector<std::optional<std::size_t>>;

/// `a` strictly better than `b` by score, lower index on ties.
constexpr bool preferred(double score_a, std::size_t a, double score_b, std::size_t b) {
  return score_a > score_b || (score_a == score_b && a < b);
}

/// Proposer-optimal stable matching (Gale-Shapley, proposals propose). Both
/// sides rank by similarity, breaking ties toward the lower index. Every
/// proposal is matched when there are at least as many references.
inline Assignment stable_match(const SimilarityMatrix& s) {
  const std::size_t n = s.rows();
  const std::size_t m = s.cols();
  Assignment match(n);
  if (n == 0 || m == 0) return match;

  std::vector<std::vector<std::size_t>> prefs(n, std::vector<std::size_t>(m));
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(prefs[i].begin(), prefs[i].end(), 0);
    std::sort(prefs[i].begin(), prefs[i].end(),
              [&](std::size_t a, std::size_t b) { return preferred(s(i, a), a, s(i, b), b); });
  }
  std::vector<std::size_t> next(n, 0);
  std::vector<std::optional<std::size_t>> holder(m);
  std::vector<std::size_t> free;
  for (std::size_t i = n; i-- > 0;) free.push_back(i);

  while (!free.empty()) {
    const std::size_t i = free.back();
    if (next[i] == m) {
      free.pop_back();  // rejected everywhere; stays unmatched
      continue;
    }
    const std::size_t j = prefs[i][next[i]++];
    if (!holder[j]) {
      holder[j] = i;
      match[i] = j;
      free.pop_back();
    } else if (preferred(s(i, j), i, s(*holder[j], j), *holder[j])) {
      const std::size_t dropped = *holder[j];
      match[dropped].reset();
      holder[j] = i;
      match[i] = j;
      free.back() = dropped;
    }
  }
  return match;
}

struct Detection {
  SceneId scene = 0;
  InstanceId instance;
  BoundingBox box;
  double score = 0;
  std::size_t reference = 0;  // index into the selected reference list
  std::size_t proposal = 0;  // index within the scene
};

using DetectionSet = std::vector<Detection>;

/// One detection per matched pair whose similarity is strictly above tau.
inline DetectionSet emit_detections(const Assignment& assignment, const SimilarityMatrix& s,
                                    const std::vector<Proposal>& proposals,
                                    const std::vector<ReferenceImage>& references, double threshold) {
  DetectionSet out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (!assignment[i]) continue;
    const std::size_t j = *assignment[i];
    const double score = s(i, j);
    if (!(score > threshold)) continue;
    out.push_back({proposals[i].scene, references[j].instance, proposals[i].box, score, j, i});
  }
  return out;
}

struct InferenceOptions {
  double threshold = kDefaultThreshold;
  unsigned threads = 1;
  std::optional<Adapter> reference_adapter;  // defaults to the proposal adapter
};

/// Per scene: select test references, adapt, stable-match, threshold. Output
/// is ordered by scene (manifest order) then proposal index.
inline DetectionSet run_inference(const DatasetManifest& manifest, const Adapter& adapter,
                                  const AugmentationConfig& aug, const InferenceOptions& opts = {}) {
  const Adapter* ref_adapter = opts.reference_adapter ? &*opts.reference_adapter : &adapter;
  for (const Adapter* a : {&adapter, ref_adapter}) {
    if (a->input_dim() != manifest.dim) {
      throw Error(ErrorCode::DimMismatch, "run_inference: adapter input dim " + std::to_string(a->input_dim()) +
                                              " != manifest dim " + std::to_string(manifest.dim));
    }
  }
  if (ref_adapter->output_dim() != adapter.output_dim()) {
    throw Error(ErrorCode::DimMismatch, "run_inference: proposal and reference adapters disagree on output dim");
  }
  const auto refs = select_references(manifest, aug, Phase::Test);
  const auto ref_rows = reference_rows(manifest, refs);
  std::vector<DetectionSet> per_scene(manifest.scenes.size());
  parallel_for(manifest.scenes.size(), opts.threads, [&](std::size_t k) {
    const auto& scene = manifest.scenes[k];
    if (scene.proposals.empty()) return;
    const auto s = similarity_matrix(adapter, scene.proposal_embeddings, ref_rows, 1, ref_adapter);
    per_scene[k] = emit_detections(stable_match(s), s, scene.proposals, refs, opts.threshold);
  });
  DetectionSet all;
  for (auto& d : per_scene) all.insert(all.end(), d.begin(), d.end());
  return all;
}

// COCO-results-style records, plus the reference/proposal indices used for
// deterministic tie-breaking downstream.
inline nlohmann::json detections_to_json(const DetectionSet& dets) {
  auto arr = nlohmann::json::array();
  for (const auto& d : dets) {
    arr.push_back({{"image_id", d.scene},
                   {"instance_id", d.instance.value},
                   {"bbox", {d.box.x, d.box.y, d.box.w, d.box.h}},
                   {"score", d.score},
                   {"proposal_index", d.proposal},
                   {"reference_index", d.reference}});
  }
  return arr;
}

inline DetectionSet detections_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::SchemaViolation, "detections: document must be an array");
  DetectionSet out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "detections[" + std::to_string(i) + "]";
    const auto& r = arr[i];
    try {
      Detection d;
      d.scene = r.at("image_id").get<SceneId>();
      d.instance.value = r.at("instance_id").get<std::uint32_t>();
      d.box = detail::parse_box(r.at("bbox"), where + ".bbox");
      d.score = r.at("score").get<double>();
      d.proposal = r.value("proposal_index", std::size_t(i));
      d.reference = r.value("reference_index", std::size_t(0));
      if (!std::isfinite(d.score)) throw Error(ErrorCode::SchemaViolation, where + ": non-finite score");
      out.push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::SchemaViolation, where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace insdet
