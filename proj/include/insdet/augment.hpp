#pragma once

// Distractor pools, synthetic-view merging for train/test references, and
// distractor-vs-reference similarity statistics.

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "insdet/core.hpp"
#include "insdet/parallel.hpp"
#include "insdet/random.hpp"
#include "insdet/store.hpp"

namespace insdet {

struct DistractorPool {
  EmbeddingMatrix embeddings;
  std::string source;

  bool empty() const noexcept { return embeddings.rows() == 0; }
  std::size_t size() const noexcept { return embeddings.rows(); }
};

inline DistractorPool distractor_pool(const DatasetManifest& m) {
  return {m.distractors, m.distractor_source};
}

struct AugmentationConfig {
  bool use_synthetic_in_train = false;
  std::size_t synth_per_instance_train = 0;
  bool use_synthetic_in_test = false;
  std::size_t synth_per_instance_test = 0;
  std::uint64_t seed = 0;
};

enum class Phase { Train, Test };

/// All real references plus, when enabled for `phase`, exactly the configured
/// number of synthetic views per instance. Views are drawn uniformly without
/// replacement (seeded), and the result keeps manifest order.
inline std::vector<ReferenceImage> select_references(const DatasetManifest& manifest,
                                                     const AugmentationConfig& config, Phase phase) {
  const bool enabled = phase == Phase::Train ? config.use_synthetic_in_train : config.use_synthetic_in_test;
  const std::size_t per_instance =
      phase == Phase::Train ? config.synth_per_instance_train : config.synth_per_instance_test;

  std::vector<bool> keep(manifest.references.size(), false);
  std::map<InstanceId, std::vector<std::size_t>> synthetic;
  for (std::size_t i = 0; i < manifest.references.size(); ++i) {
    const auto& r = manifest.references[i];
    if (r.origin == Origin::Real) {
      keep[i] = true;
    } else {
      synthetic[r.instance].push_back(i);
    }
  }

  if (enabled && per_instance > 0) {
    for (const auto& inst : manifest.reference_instances()) {
      auto& views = synthetic[inst];
      if (views.size() < per_instance) {
        throw Error(ErrorCode::InsufficientViews,
                    "instance " + std::to_string(inst.value) + " has " + std::to_string(views.size()) +
                        " synthetic views, " + std::to_string(per_instance) + " requested");
      }
      std::stable_sort(views.begin(), views.end(), [&](std::size_t a, std::size_t b) {
        return manifest.references[a].view_index < manifest.references[b].view_index;
      });
      auto rng = make_rng(config.seed, (std::uint64_t(inst.value) << 1) | (phase == Phase::Test ? 1u : 0u));
      // partial Fisher-Yates: the first `per_instance` slots become the sample
      for (std::size_t k = 0; k < per_instance; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, views.size() - 1);
        std::swap(views[k], views[pick(rng)]);
        keep[views[k]] = true;
      }
    }
  }

  std::vector<ReferenceImage> out;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.push_back(manifest.references[i]);
  }
  return out;
}

/// Gathers the embedding rows for a reference selection.
inline EmbeddingMatrix reference_rows(const DatasetManifest& manifest,
                                      const std::vector<ReferenceImage>& refs) {
  std::vector<std::size_t> idx;
  idx.reserve(refs.size());
  for (const auto& r : refs) idx.push_back(r.embedding);
  auto out = manifest.reference_embeddings.gather(idx);
  if (refs.empty()) out = EmbeddingMatrix(0, manifest.dim);
  return out;
}

struct DistractorStats {
  double avg_sim = 0;
  double max_sim = 0;
};

/// Per distractor: mean and max cosine similarity against every reference row.
inline std::vector<DistractorStats> distractor_correlation(const DistractorPool& pool,
                                                           const EmbeddingMatrix& references,
                                                           unsigned threads = 1) {
  if (pool.empty() || references.rows() == 0) {
    throw Error(ErrorCode::EmptyInput, "distractor_correlation: distractors and references must be non-empty");
  }
  if (pool.embeddings.cols() != references.cols()) {
    throw Error(ErrorCode::DimMismatch, "distractor_correlation: dimension mismatch");
  }
  std::vector<DistractorStats> out(pool.size());
  parallel_for(pool.size(), threads, [&](std::size_t i) {
    const auto d = pool.embeddings.row(i);
    double sum = 0;
    double best = -1.0;
    for (std::size_t j = 0; j < references.rows(); ++j) {
      const double s = cosine_similarity(d, references.row(j));
      sum += s;
      best = std::max(best, s);
    }
    out[i] = {std::min(sum / double(references.rows()), best), best};  // rounding can push the mean past the max
  });
  return out;
}

inline std::string distractor_stats_csv(const std::vector<DistractorStats>& stats) {
  std::ostringstream os;
  os.precision(17);
  os << "distractor_index,avg_sim,max_sim\n";
  for (std::size_t i = 0; i < stats.size(); ++i) {
    os << i << ',' << stats[i].avg_sim << ',' << stats[i].max_sim << '\n';
  }
  return os.str();
}

}  // namespace insdet
