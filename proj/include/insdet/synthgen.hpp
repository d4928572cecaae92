#pragma once

// Deterministic synthetic instance worlds with known ground truth.
//
// Instance prototypes are uniform on the unit sphere. References are noisy
// copies of their prototype; besides isotropic noise they vary along a
// "nuisance" subspace (view/appearance changes across reference images).
// Proposals see the prototype through a domain shift that rotates and
// rescales that same nuisance subspace, so the gap between reference space
// and proposal space is linear, invertible, and learnable from references.
//
// Output tree:
//   manifest.json, references.idow, proposals.idow, distractors.idow,
//   truth.idot (never referenced by the manifest)
//
// truth.idot layout (little-endian):
//   16-byte header: "IDOT", u16 version = 1, u16 reserved = 0,
//                   u32 n_instances, u32 q
//   q*q binary64 shift matrix (row-major), then n*q binary64 prototypes

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "insdet/binary_io.hpp"
#include "insdet/core.hpp"
#include "insdet/random.hpp"
#include "insdet/store.hpp"
#include "insdet/trainer.hpp"

namespace insdet {

struct SynthConfig {
  std::size_t n_instances = 20;
  std::size_t refs_per_instance = 12;
  std::size_t synth_views_per_instance = 12;
  std::size_t dim = 16;
  std::size_t scenes = 40;
  std::size_t proposals_per_scene = 8;
  std::size_t distractor_count = 400;
  std::size_t background_dim = 3;  // distractors concentrate near this subspace of the unshifted part; 0 = uniform
  double background_spread = 0.3;
  double ref_noise = 0.05;
  double view_variation = 0.35;  // per-coordinate std of reference variation in the nuisance subspace
  double proposal_noise = 0.05;
  double proposal_view_variation = 0.0;  // nuisance-subspace variation of objects as seen in scenes
  bool domain_shift = true;
  std::size_t nuisance_dim = 8;  // dimension of the subspace the shift acts on; dim = whole space
  double shift_scale_min = 1.5;
  double shift_scale_max = 3.0;
  bool shift_rotation = true;
  bool shift_scaling = true;
  double clutter_fraction = 0.25;
  double hard_fraction = 0.5;
  double hard_noise_scale = 2.0;  // proposal noise multiplier in hard scenes
  int canvas = 1024;
  double min_box = 16;
  double max_box = 256;
  double box_jitter = 0.0;  // relative std of proposal box perturbation vs. its GT box
  std::uint64_t seed = 0;
};

struct SynthTruth {
  Matrix<double> shift;  // q x q, maps reference space to proposal space
  Matrix<double> prototypes;  // n x q
};

inline constexpr std::string_view kTruthMagic = "IDOT";

inline binary::Bytes encode_truth(const SynthTruth& t) {
  binary::Bytes out;
  binary::put_header(out, kTruthMagic, static_cast<std::uint32_t>(t.prototypes.rows()),
                     static_cast<std::uint32_t>(t.shift.rows()));
  for (double v : t.shift.data()) binary::put_f64(out, v);
  for (double v : t.prototypes.data()) binary::put_f64(out, v);
  return out;
}

inline SynthTruth decode_truth(std::span<const std::uint8_t> bytes) {
  const auto h = binary::parse_header(
      bytes, kTruthMagic, [](std::uint64_t n, std::uint64_t q) { return 8 * (q * q + n * q); }, "truth file");
  SynthTruth t{Matrix<double>(h.extent1, h.extent1), Matrix<double>(h.extent0, h.extent1)};
  std::size_t at = binary::kHeaderSize;
  for (double& v : t.shift.data()) v = binary::get_f64(bytes, (at += 8) - 8);
  for (double& v : t.prototypes.data()) v = binary::get_f64(bytes, (at += 8) - 8);
  if (!t.shift.all_finite() || !t.prototypes.all_finite()) {
    throw Error(ErrorCode::NonFinite, "truth file: non-finite values");
  }
  return t;
}

inline SynthTruth read_truth(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::MissingTruth, "truth file not found: " + path.string());
  }
  return decode_truth(binary::read_file(path));
}

namespace detail {

inline Eigen::MatrixXd random_rotation(std::size_t k, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(k, k);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = g(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  if (k > 0 && q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

inline std::vector<double> gaussian(std::size_t n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

inline std::vector<float> normalized_f32(const std::vector<double>& v) {
  const double n = norm(v);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
  return out;
}

inline std::vector<double> unit_sphere(std::size_t n, Rng& rng) {
  auto v = gaussian(n, rng);
  const double s = norm(v);
  for (double& x : v) x /= s;
  return v;
}

inline std::vector<double> apply(const Matrix<double>& m, const std::vector<double>& x) {
  std::vector<double> y(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) y[i] = dot(m.row(i), x);
  return y;
}

inline bool overlaps(const BoundingBox& a, const BoundingBox& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

inline void check_synth_config(const SynthConfig& c) {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "gen-synth: " + m); };
  if (c.dim == 0) bad("dim must be positive");
  if (c.nuisance_dim > c.dim) bad("nuisance_dim cannot exceed dim");
  if (c.ref_noise < 0 || c.proposal_noise < 0 || c.view_variation < 0 || c.proposal_view_variation < 0 ||
      c.background_spread < 0) {
    bad("noise levels must be >= 0");
  }
  if (c.background_dim + c.nuisance_dim > c.dim) bad("background_dim + nuisance_dim cannot exceed dim");
  if (!(c.clutter_fraction >= 0 && c.clutter_fraction <= 1)) bad("clutter_fraction must lie in [0, 1]");
  if (!(c.hard_fraction >= 0 && c.hard_fraction <= 1)) bad("hard_fraction must lie in [0, 1]");
  if (!(c.shift_scale_min > 0) || c.shift_scale_max < c.shift_scale_min) bad("shift scales must satisfy 0 < min <= max");
  if (!(c.min_box > 0) || c.max_box < c.min_box || c.max_box > c.canvas) bad("box sizes must satisfy 0 < min <= max <= canvas");
  if (c.clutter_fraction > 0 && c.distractor_count == 0 && c.proposals_per_scene > 0) {
    bad("clutter requires a non-empty distractor pool");
  }
}

}  // namespace detail

/// Shift = B * blockdiag(I, R * D) * B^T for a random orthonormal basis B whose
/// last `nuisance_dim` columns span the nuisance subspace.
struct NuisanceGeometry {
  Matrix<double> basis;  // q x k, orthonormal columns spanning the nuisance subspace
  Matrix<double> background;  // q x g, orthonormal, inside the subspace the shift leaves fixed
  Matrix<double> shift;  // q x q
};

inline NuisanceGeometry make_geometry(const SynthConfig& c, Rng& rng) {
  const auto q = static_cast<Eigen::Index>(c.dim);
  const auto k = static_cast<Eigen::Index>(c.nuisance_dim);
  const Eigen::MatrixXd basis = detail::random_rotation(c.dim, rng);
  Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(k, k);
  Eigen::VectorXd scales = Eigen::VectorXd::Ones(k);
  if (k > 0) {
    const Eigen::MatrixXd r = detail::random_rotation(c.nuisance_dim, rng);
    std::uniform_real_distribution<double> s(c.shift_scale_min, c.shift_scale_max);
    Eigen::VectorXd drawn(k);
    for (Eigen::Index i = 0; i < k; ++i) drawn(i) = s(rng);
    if (c.shift_rotation) rot = r;
    if (c.shift_scaling) scales = drawn;
  }
  Eigen::MatrixXd block = Eigen::MatrixXd::Identity(q, q);
  if (c.domain_shift && k > 0) block.bottomRightCorner(k, k) = rot * scales.asDiagonal();
  const Eigen::MatrixXd shift = basis * block * basis.transpose();

  NuisanceGeometry g{Matrix<double>(c.dim, c.nuisance_dim), Matrix<double>(c.dim, c.background_dim),
                     Matrix<double>(c.dim, c.dim)};
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) g.basis(i, j) = basis(i, q - k + j);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(c.background_dim); ++j) g.background(i, j) = basis(i, j);
    for (Eigen::Index j = 0; j < q; ++j) g.shift(i, j) = shift(i, j);
  }
  return g;
}

struct SynthWorld {
  nlohmann::json manifest;
  EmbeddingMatrix references;
  EmbeddingMatrix proposals;
  EmbeddingMatrix distractors;
  SynthTruth truth;
};

/// Builds the world in memory. Every random draw happens regardless of the
/// noise magnitudes, so changing a sigma never changes any other draw.
inline SynthWorld build_world(const SynthConfig& c) {
  detail::check_synth_config(c);
  const std::size_t q = c.dim;
  auto geo_rng = make_rng(c.seed, 1);
  auto proto_rng = make_rng(c.seed, 2);
  auto ref_rng = make_rng(c.seed, 3);
  auto dist_rng = make_rng(c.seed, 4);
  auto scene_rng = make_rng(c.seed, 5);
  auto noise_rng = make_rng(c.seed, 6);

  const auto geo = make_geometry(c, geo_rng);

  SynthWorld w;
  w.truth.shift = geo.shift;
  w.truth.prototypes = Matrix<double>(0, q);
  for (std::size_t i = 0; i < c.n_instances; ++i) w.truth.prototypes.append_row(std::span<const double>(detail::unit_sphere(q, proto_rng)));

  auto refs_json = nlohmann::json::array();
  w.references = EmbeddingMatrix(0, q);
  const std::size_t views = c.refs_per_instance + c.synth_views_per_instance;
  for (std::size_t i = 0; i < c.n_instances; ++i) {
    for (std::size_t v = 0; v < views; ++v) {
      const auto iso = detail::gaussian(q, ref_rng);
      const auto nuis = detail::gaussian(c.nuisance_dim, ref_rng);
      std::vector<double> x(q);
      for (std::size_t d = 0; d < q; ++d) {
        double along = 0;
        for (std::size_t k = 0; k < c.nuisance_dim; ++k) along += geo.basis(d, k) * nuis[k];
        x[d] = w.truth.prototypes(i, d) + c.ref_noise * iso[d] + c.view_variation * along;
      }
      const bool synthetic = v >= c.refs_per_instance;
      refs_json.push_back({{"instance", i},
                           {"file", "references"},
                           {"row", w.references.rows()},
                           {"origin", synthetic ? "synthetic" : "real"},
                           {"view", synthetic ? v - c.refs_per_instance : v}});
      w.references.append_row(std::span<const float>(detail::normalized_f32(x)));
    }
  }

  w.distractors = EmbeddingMatrix(0, q);
  for (std::size_t i = 0; i < c.distractor_count; ++i) {
    auto x = detail::unit_sphere(q, dist_rng);
    const auto coef = detail::gaussian(c.background_dim, dist_rng);
    if (c.background_dim > 0) {
      for (std::size_t d = 0; d < q; ++d) {
        double along = 0;
        for (std::size_t j = 0; j < c.background_dim; ++j) along += geo.background(d, j) * coef[j];
        x[d] = along + c.background_spread * x[d];
      }
      if (norm(x) == 0.0) x[0] = 1.0;
    }
    w.distractors.append_row(std::span<const float>(detail::normalized_f32(x)));
  }

  const std::size_t clutter_per_scene =
      static_cast<std::size_t>(std::llround(c.clutter_fraction * double(c.proposals_per_scene)));
  const std::size_t objects_per_scene =
      std::min(c.n_instances, c.proposals_per_scene - std::min(clutter_per_scene, c.proposals_per_scene));

  auto scenes_json = nlohmann::json::array();
  w.proposals = EmbeddingMatrix(0, q);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double log_min = std::log(c.min_box);
  const double log_max = std::log(c.max_box);
  for (std::size_t s = 0; s < c.scenes; ++s) {
    const bool hard = unit(scene_rng) < c.hard_fraction;
    std::vector<std::size_t> instances(c.n_instances);
    std::iota(instances.begin(), instances.end(), 0);
    std::shuffle(instances.begin(), instances.end(), scene_rng);
    instances.resize(objects_per_scene);
    // -1 marks clutter; shuffled so clutter is not always last
    std::vector<long> slots(instances.begin(), instances.end());
    for (std::size_t k = 0; k < clutter_per_scene; ++k) slots.push_back(-1);
    std::shuffle(slots.begin(), slots.end(), scene_rng);

    std::vector<BoundingBox> placed;
    auto props_json = nlohmann::json::array();
    auto gts_json = nlohmann::json::array();
    for (const long slot : slots) {
      BoundingBox box;
      bool ok = false;
      for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
        box.w = std::round(std::exp(log_min + (log_max - log_min) * unit(scene_rng)));
        box.h = std::round(std::exp(log_min + (log_max - log_min) * unit(scene_rng)));
        box.x = std::floor(unit(scene_rng) * (c.canvas - box.w));
        box.y = std::floor(unit(scene_rng) * (c.canvas - box.h));
        ok = std::none_of(placed.begin(), placed.end(), [&](const BoundingBox& b) { return detail::overlaps(b, box); });
      }
      if (!ok) {
        throw Error(ErrorCode::PlacementFailed, "gen-synth: could not place " + std::to_string(slots.size()) +
                                                    " non-overlapping boxes in scene " + std::to_string(s) +
                                                    " after 1000 attempts; lower proposals_per_scene or max_box");
      }
      placed.push_back(box);

      const auto noise = detail::gaussian(q, noise_rng);
      const auto view = detail::gaussian(c.nuisance_dim, noise_rng);
      const double jx = jitter(noise_rng), jy = jitter(noise_rng);
      const std::size_t pick = c.distractor_count > 0 ? std::size_t(unit(noise_rng) * double(c.distractor_count)) % c.distractor_count : 0;
      std::vector<double> source(q);
      if (slot >= 0) {
        for (std::size_t d = 0; d < q; ++d) {
          double along = 0;
          for (std::size_t k = 0; k < c.nuisance_dim; ++k) along += geo.basis(d, k) * view[k];
          source[d] = w.truth.prototypes(std::size_t(slot), d) + c.proposal_view_variation * along;
        }
      } else {
        for (std::size_t d = 0; d < q; ++d) source[d] = w.distractors(pick, d);
      }
      auto x = detail::apply(geo.shift, source);
      const double sigma = c.proposal_noise * (hard ? c.hard_noise_scale : 1.0);
      for (std::size_t d = 0; d < q; ++d) x[d] += sigma * noise[d];
      if (norm(x) == 0.0) x[0] = 1.0;

      BoundingBox pbox = box;
      pbox.x = std::round(box.x + c.box_jitter * box.w * jx);
      pbox.y = std::round(box.y + c.box_jitter * box.h * jy);
      props_json.push_back({{"file", "proposals"},
                            {"row", w.proposals.rows()},
                            {"bbox", {pbox.x, pbox.y, pbox.w, pbox.h}},
                            {"detector_score", std::round(1000.0 * (0.5 + 0.5 * unit(noise_rng))) / 1000.0}});
      w.proposals.append_row(std::span<const float>(detail::normalized_f32(x)));
      if (slot >= 0) gts_json.push_back({{"instance", slot}, {"bbox", {box.x, box.y, box.w, box.h}}});
    }
    scenes_json.push_back({{"id", s},
                           {"width", c.canvas},
                           {"height", c.canvas},
                           {"difficulty", hard ? "hard" : "easy"},
                           {"proposals", props_json},
                           {"ground_truth", gts_json}});
  }

  w.manifest = {{"format_version", kManifestFormatVersion},
                {"dim", q},
                {"size_thresholds", {{"small", 32 * 32}, {"medium", 96 * 96}}},
                {"embedding_files",
                 {{"references", "references.idow"}, {"proposals", "proposals.idow"}, {"distractors", "distractors.idow"}}},
                {"references", refs_json},
                {"scenes", scenes_json},
                {"generator", {{"name", "synthgen"}, {"seed", c.seed}}}};
  if (c.distractor_count > 0) {
    w.manifest["distractors"] = {{"file", "distractors"}, {"count", c.distractor_count}, {"source", "synthgen"}};
  }
  return w;
}

struct GeneratedPaths {
  std::filesystem::path manifest;
  std::filesystem::path truth;
};

/// Writes the world to `out_dir` and returns the manifest and truth paths.
inline GeneratedPaths generate(const SynthConfig& c, const std::filesystem::path& out_dir) {
  const auto world = build_world(c);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::Io, "gen-synth: cannot create " + out_dir.string());
  write_embeddings(world.references, out_dir / "references.idow");
  write_embeddings(world.proposals, out_dir / "proposals.idow");
  write_embeddings(world.distractors, out_dir / "distractors.idow");
  binary::write_file_atomic(out_dir / "truth.idot", encode_truth(world.truth));
  binary::write_text_atomic(out_dir / "manifest.json", world.manifest.dump(1) + "\n");
  return {out_dir / "manifest.json", out_dir / "truth.idot"};
}

/// W = shift^-1, b = 0: maps proposal space back onto reference space. It
/// undoes the shift on the proposal side only, so evaluate it with the
/// identity as InferenceOptions::reference_adapter; applied to references it
/// would distort them.
inline Adapter oracle_adapter(const SynthTruth& truth) {
  const auto q = static_cast<Eigen::Index>(truth.shift.rows());
  Eigen::MatrixXd s(q, q);
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < q; ++j) s(i, j) = truth.shift(std::size_t(i), std::size_t(j));
  }
  const Eigen::MatrixXd inv = s.partialPivLu().inverse();
  Adapter a{Matrix<double>(std::size_t(q), std::size_t(q)), std::vector<double>(std::size_t(q), 0.0)};
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < q; ++j) a.weight(std::size_t(i), std::size_t(j)) = inv(i, j);
  }
  return a;
}

inline Adapter oracle_adapter(const std::filesystem::path& truth_path) {
  return oracle_adapter(read_truth(truth_path));
}

}  // namespace insdet
