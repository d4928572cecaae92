#pragma once

// COCO-style detection metrics with instances playing the role of classes:
// AP over IoU 0.50:0.05:0.95 with 101-point interpolation, AP50/AP75,
// difficulty and object-size breakdowns, AR@maxK, and precision-recall curves.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "insdet/core.hpp"
#include "insdet/matcher.hpp"
#include "insdet/store.hpp"

namespace insdet {

inline constexpr std::size_t kRecallPoints = 101;

inline std::array<double, 10> iou_thresholds() {
  std::array<double, 10> t{};
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = 0.5 + 0.05 * double(k);
  return t;
}

inline double recall_grid(std::size_t k) { return double(k) / double(kRecallPoints - 1); }

/// Canonical detection order: score descending, then scene, proposal,
/// instance and reference. Makes every metric independent of input order.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.scene != b.scene) return a.scene < b.scene;
  if (a.proposal != b.proposal) return a.proposal < b.proposal;
  if (a.instance != b.instance) return a.instance < b.instance;
  return a.reference < b.reference;
}

inline DetectionSet sorted_detections(DetectionSet dets) {
  std::stable_sort(dets.begin(), dets.end(), detection_before);
  return dets;
}

enum class MatchLabel { TruePositive, FalsePositive, Ignored };

namespace detail {

struct GtEntry {
  const GroundTruth* gt;
  bool ignore;
};

/// Greedy matching of score-sorted detections to ground truth of the same
/// scene and instance. A detection takes the unmatched GT with the highest
/// IoU >= iou_t (lowest index on ties), preferring non-ignored GTs.
/// Detections matched to ignored GTs, or unmatched with `det_ignorable` set,
/// come out as Ignored.
inline std::vector<MatchLabel> greedy_match(std::span<const Detection> dets, std::span<const GtEntry> gts,
                                            double iou_t, const std::vector<bool>& det_ignorable) {
  std::vector<MatchLabel> labels(dets.size(), MatchLabel::FalsePositive);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    std::optional<std::size_t> best;
    double best_iou = 0;
    for (int pass = 0; pass < 2 && !best; ++pass) {
      const bool want_ignored = pass == 1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (taken[g] || gts[g].ignore != want_ignored) continue;
        if (gts[g].gt->scene != dets[d].scene || gts[g].gt->instance != dets[d].instance) continue;
        const double v = iou(dets[d].box, gts[g].gt->box);
        if (v >= iou_t && (!best || v > best_iou)) {
          best = g;
          best_iou = v;
        }
      }
    }
    if (best) {
      taken[*best] = true;
      labels[d] = gts[*best].ignore ? MatchLabel::Ignored : MatchLabel::TruePositive;
    } else if (det_ignorable[d]) {
      labels[d] = MatchLabel::Ignored;
    }
  }
  return labels;
}

}  // namespace detail

/// TP/FP label for each detection. `dets` must already be in canonical order.
inline std::vector<MatchLabel> match_detections_to_gt(std::span<const Detection> dets,
                                                      std::span<const GroundTruth> gts, double iou_t) {
  std::vector<detail::GtEntry> entries;
  for (const auto& g : gts) entries.push_back({&g, false});
  return detail::greedy_match(dets, entries, iou_t, std::vector<bool>(dets.size(), false));
}

/// 101-point interpolated AP of a ranked TP/FP list (ignored entries are
/// dropped). nullopt when there is neither ground truth nor a detection;
/// 0 when there are detections but no ground truth.
inline std::optional<double> average_precision(std::span<const MatchLabel> labels, std::size_t n_gt) {
  std::vector<bool> tp;
  for (auto l : labels) {
    if (l != MatchLabel::Ignored) tp.push_back(l == MatchLabel::TruePositive);
  }
  if (n_gt == 0) {
    if (tp.empty()) return std::nullopt;
    return 0.0;
  }
  std::vector<double> recall(tp.size()), precision(tp.size());
  double ctp = 0, cfp = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    (tp[i] ? ctp : cfp) += 1;
    recall[i] = ctp / double(n_gt);
    precision[i] = ctp / (ctp + cfp);
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (std::size_t k = 0; k < kRecallPoints; ++k) {
    const auto it = std::lower_bound(recall.begin(), recall.end(), recall_grid(k));
    if (it != recall.end()) sum += precision[std::size_t(it - recall.begin())];
  }
  return sum / double(kRecallPoints);
}

struct InstanceMetrics {
  InstanceId instance;
  std::size_t n_gt = 0;
  std::optional<double> ap, ap50, ap75;
};

/// All values are percentages in [0, 100]. Breakdowns are empty when the
/// slice holds neither ground truth nor detections.
struct MetricsReport {
  std::optional<double> ap, ap50, ap75;
  std::optional<double> ap_hard, ap_easy;
  std::optional<double> ap_small, ap_medium, ap_large;
  std::optional<double> ar_max10, ar_max100;
  std::optional<double> ar_small, ar_medium, ar_large;
  std::vector<InstanceMetrics> per_instance;

  double ap_avg() const { return ap.value_or(0.0); }
};

struct SliceFilter {
  std::optional<Difficulty> difficulty;
  std::optional<SizeClass> size;
  std::optional<std::size_t> max_dets_per_image;
};

namespace detail {

struct SliceResult {
  // [instance][threshold]
  std::vector<std::array<std::optional<double>, 10>> ap;
  std::vector<std::array<std::optional<double>, 10>> recall;
  std::vector<std::size_t> n_gt;
};

inline SliceResult evaluate_slice(const DetectionSet& sorted, const DatasetManifest& manifest,
                                  const std::vector<InstanceId>& instances, const SliceFilter& f) {
  auto scene_ok = [&](SceneId id) {
    if (!f.difficulty) return true;
    const Scene* s = manifest.find_scene(id);
    return s != nullptr && s->difficulty == *f.difficulty;
  };

  std::vector<Detection> kept;
  std::map<SceneId, std::size_t> per_image;
  for (const auto& d : sorted) {
    if (!scene_ok(d.scene)) continue;
    if (f.max_dets_per_image && per_image[d.scene]++ >= *f.max_dets_per_image) continue;
    kept.push_back(d);
  }

  const auto thresholds = iou_thresholds();
  SliceResult r;
  r.ap.resize(instances.size());
  r.recall.resize(instances.size());
  r.n_gt.assign(instances.size(), 0);
  for (std::size_t k = 0; k < instances.size(); ++k) {
    const InstanceId inst = instances[k];
    std::vector<Detection> dets;
    std::vector<bool> ignorable;
    for (const auto& d : kept) {
      if (d.instance != inst) continue;
      dets.push_back(d);
      ignorable.push_back(f.size && size_class(d.box, manifest.size_thresholds) != *f.size);
    }
    std::vector<GtEntry> gts;
    for (const auto& s : manifest.scenes) {
      if (!scene_ok(s.id)) continue;
      for (const auto& g : s.ground_truth) {
        if (g.instance != inst) continue;
        const bool ignore = f.size && g.size_class != *f.size;
        gts.push_back({&g, ignore});
        if (!ignore) ++r.n_gt[k];
      }
    }
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const auto labels = greedy_match(dets, gts, thresholds[t], ignorable);
      r.ap[k][t] = average_precision(labels, r.n_gt[k]);
      if (r.n_gt[k] > 0) {
        const auto tp = std::count(labels.begin(), labels.end(), MatchLabel::TruePositive);
        r.recall[k][t] = double(tp) / double(r.n_gt[k]);
      }
    }
  }
  return r;
}

/// Mean over instances of the per-instance mean over thresholds [lo, hi).
inline std::optional<double> mean_over(const std::vector<std::array<std::optional<double>, 10>>& table,
                                       std::size_t lo, std::size_t hi) {
  double sum = 0;
  std::size_t count = 0;
  for (const auto& row : table) {
    double s = 0;
    std::size_t c = 0;
    for (std::size_t t = lo; t < hi; ++t) {
      if (row[t]) {
        s += *row[t];
        ++c;
      }
    }
    if (c > 0) {
      sum += s / double(c);
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return 100.0 * sum / double(count);
}

inline std::optional<double> row_mean(const std::array<std::optional<double>, 10>& row, std::size_t lo,
                                      std::size_t hi) {
  return mean_over({row}, lo, hi);
}

}  // namespace detail

/// Every instance that has references, ground truth, or detections.
inline std::vector<InstanceId> evaluation_instances(const DetectionSet& dets, const DatasetManifest& manifest) {
  std::set<InstanceId> ids;
  for (const auto& r : manifest.references) ids.insert(r.instance);
  for (const auto& n : manifest.novel_instances) ids.insert(n);
  for (const auto& s : manifest.scenes) {
    for (const auto& g : s.ground_truth) ids.insert(g.instance);
  }
  for (const auto& d : dets) ids.insert(d.instance);
  return {ids.begin(), ids.end()};
}

inline void check_detection_scenes(const DetectionSet& dets, const DatasetManifest& manifest) {
  std::set<SceneId> known;
  for (const auto& s : manifest.scenes) known.insert(s.id);
  for (const auto& d : dets) {
    if (!known.count(d.scene)) {
      throw Error(ErrorCode::UnknownScene, "evaluate: detection references unknown scene " + std::to_string(d.scene));
    }
  }
}

inline MetricsReport evaluate(const DetectionSet& detections, const DatasetManifest& manifest) {
  check_detection_scenes(detections, manifest);
  const auto sorted = sorted_detections(detections);
  const auto instances = evaluation_instances(sorted, manifest);
  using detail::mean_over;

  MetricsReport rep;
  const auto all = detail::evaluate_slice(sorted, manifest, instances, {});
  rep.ap = mean_over(all.ap, 0, 10);
  rep.ap50 = mean_over(all.ap, 0, 1);
  rep.ap75 = mean_over(all.ap, 5, 6);
  for (std::size_t k = 0; k < instances.size(); ++k) {
    rep.per_instance.push_back({instances[k], all.n_gt[k], detail::row_mean(all.ap[k], 0, 10),
                                detail::row_mean(all.ap[k], 0, 1), detail::row_mean(all.ap[k], 5, 6)});
  }

  rep.ap_hard = mean_over(detail::evaluate_slice(sorted, manifest, instances, {Difficulty::Hard, {}, {}}).ap, 0, 10);
  rep.ap_easy = mean_over(detail::evaluate_slice(sorted, manifest, instances, {Difficulty::Easy, {}, {}}).ap, 0, 10);

  const std::array<SizeClass, 3> sizes = {SizeClass::Small, SizeClass::Medium, SizeClass::Large};
  std::array<std::optional<double>*, 3> ap_slots = {&rep.ap_small, &rep.ap_medium, &rep.ap_large};
  std::array<std::optional<double>*, 3> ar_slots = {&rep.ar_small, &rep.ar_medium, &rep.ar_large};
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    *ap_slots[i] = mean_over(detail::evaluate_slice(sorted, manifest, instances, {{}, sizes[i], {}}).ap, 0, 10);
    *ar_slots[i] = mean_over(detail::evaluate_slice(sorted, manifest, instances, {{}, sizes[i], 100}).recall, 0, 10);
  }
  rep.ar_max10 = mean_over(detail::evaluate_slice(sorted, manifest, instances, {{}, {}, 10}).recall, 0, 10);
  rep.ar_max100 = mean_over(detail::evaluate_slice(sorted, manifest, instances, {{}, {}, 100}).recall, 0, 10);
  return rep;
}

namespace detail {

inline nlohmann::json metric_value(const std::optional<double>& v) {
  if (!v) return nullptr;
  return std::round(*v * 100.0) / 100.0;
}

}  // namespace detail

/// Percentages rounded to two decimals; absent breakdowns are null.
inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  using detail::metric_value;
  nlohmann::json j;
  j["AP"] = metric_value(r.ap);
  j["AP50"] = metric_value(r.ap50);
  j["AP75"] = metric_value(r.ap75);
  j["hard"] = metric_value(r.ap_hard);
  j["easy"] = metric_value(r.ap_easy);
  j["small"] = metric_value(r.ap_small);
  j["medium"] = metric_value(r.ap_medium);
  j["large"] = metric_value(r.ap_large);
  j["AR_max10"] = metric_value(r.ar_max10);
  j["AR_max100"] = metric_value(r.ar_max100);
  j["AR_small"] = metric_value(r.ar_small);
  j["AR_medium"] = metric_value(r.ar_medium);
  j["AR_large"] = metric_value(r.ar_large);
  auto per = nlohmann::json::array();
  for (const auto& m : r.per_instance) {
    per.push_back({{"instance_id", m.instance.value},
                   {"num_gt", m.n_gt},
                   {"AP", metric_value(m.ap)},
                   {"AP50", metric_value(m.ap50)},
                   {"AP75", metric_value(m.ap75)}});
  }
  j["per_instance"] = per;
  return j;
}

struct PrCurve {
  double iou_threshold = 0.5;
  std::array<double, kRecallPoints> recall{};
  std::array<double, kRecallPoints> precision{};
};

/// Micro-averaged curve: detections of every instance pooled in canonical
/// order, labelled by per-instance matching, against the total GT count.
inline PrCurve pr_curve(const DetectionSet& detections, const DatasetManifest& manifest, double iou_t = 0.5) {
  check_detection_scenes(detections, manifest);
  const auto sorted = sorted_detections(detections);
  std::vector<GroundTruth> gts;
  for (const auto& s : manifest.scenes) gts.insert(gts.end(), s.ground_truth.begin(), s.ground_truth.end());
  const auto labels = match_detections_to_gt(sorted, gts, iou_t);

  PrCurve c;
  c.iou_threshold = iou_t;
  std::vector<double> recall, precision;
  double ctp = 0, cfp = 0;
  for (auto l : labels) {
    (l == MatchLabel::TruePositive ? ctp : cfp) += 1;
    recall.push_back(gts.empty() ? 0.0 : ctp / double(gts.size()));
    precision.push_back(ctp / (ctp + cfp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  for (std::size_t k = 0; k < kRecallPoints; ++k) {
    c.recall[k] = recall_grid(k);
    const auto it = std::lower_bound(recall.begin(), recall.end(), c.recall[k]);
    c.precision[k] = (it == recall.end() || gts.empty()) ? 0.0 : precision[std::size_t(it - recall.begin())];
  }
  return c;
}

inline std::string pr_curve_csv(const PrCurve& c) {
  std::ostringstream os;
  os.precision(17);
  os << "recall,precision\n";
  for (std::size_t k = 0; k < kRecallPoints; ++k) os << c.recall[k] << ',' << c.precision[k] << '\n';
  return os.str();
}

}  // namespace insdet
