#pragma once

// Domain types and the geometric/vector primitives every other header builds on.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ranges>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace insdet {

enum class ErrorCode {
  // embedding / checkpoint files
  Io,
  BadMagic,
  VersionMismatch,
  Truncated,
  TrailingData,
  NonFinite,
  // manifest validation
  SchemaViolation,
  DanglingIndex,
  DimMismatch,
  DuplicateSceneId,
  UnknownInstance,
  UnknownScene,
  // numerical
  ZeroNorm,
  DegenerateProjection,
  NonFiniteLoss,
  // preconditions
  InvalidArgument,
  InsufficientViews,
  EmptyInput,
  PlacementFailed,
  MissingTruth,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io: return "Io";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::TrailingData: return "TrailingData";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::DanglingIndex: return "DanglingIndex";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::DuplicateSceneId: return "DuplicateSceneId";
    case ErrorCode::UnknownInstance: return "UnknownInstance";
    case ErrorCode::UnknownScene: return "UnknownScene";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::DegenerateProjection: return "DegenerateProjection";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InsufficientViews: return "InsufficientViews";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::PlacementFailed: return "PlacementFailed";
    case ErrorCode::MissingTruth: return "MissingTruth";
  }
  return "Unknown";
}

/// True for errors caused by bad user input (files, manifests, flags), as
/// opposed to failures inside the engine.
constexpr bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic:
    case ErrorCode::VersionMismatch:
    case ErrorCode::Truncated:
    case ErrorCode::TrailingData:
    case ErrorCode::NonFinite:
    case ErrorCode::SchemaViolation:
    case ErrorCode::DanglingIndex:
    case ErrorCode::DimMismatch:
    case ErrorCode::DuplicateSceneId:
    case ErrorCode::UnknownInstance:
    case ErrorCode::UnknownScene:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InsufficientViews:
    case ErrorCode::EmptyInput:
    case ErrorCode::MissingTruth:
      return true;
    default:
      return false;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Dense row-major matrix. Rows are feature vectors.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::InvalidArgument, "matrix data size does not match shape");
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  void append_row(std::span<const T> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) {
      throw Error(ErrorCode::DimMismatch, "appended row has wrong dimension");
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  /// New matrix holding the given rows, in order.
  Matrix gather(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(row(indices[i]).begin(), cols_, out.row(i).begin());
    }
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// On-disk features are binary32; computation happens in double.
using EmbeddingMatrix = Matrix<float>;

struct InstanceId {
  std::uint32_t value = 0;
  friend auto operator<=>(const InstanceId&, const InstanceId&) = default;
};

using SceneId = std::uint64_t;

enum class Origin { Real, Synthetic };
enum class Difficulty { Easy, Hard, Untagged };
enum class SizeClass { Small, Medium, Large };

constexpr std::string_view to_string(Origin o) {
  return o == Origin::Real ? "real" : "synthetic";
}
constexpr std::string_view to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Hard: return "hard";
    case Difficulty::Untagged: return "untagged";
  }
  return "untagged";
}
constexpr std::string_view to_string(SizeClass s) {
  switch (s) {
    case SizeClass::Small: return "small";
    case SizeClass::Medium: return "medium";
    case SizeClass::Large: return "large";
  }
  return "large";
}

/// Axis-aligned box, top-left corner plus extent, in pixels. Area is w*h.
struct BoundingBox {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;

  double area() const noexcept { return w * h; }
  bool valid() const noexcept {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
           w > 0 && h > 0;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Pixel-area cutoffs separating small/medium/large objects.
struct SizeThresholds {
  double small = 32.0 * 32.0;
  double medium = 96.0 * 96.0;
};

struct ReferenceImage {
  InstanceId instance;
  std::size_t embedding = 0;  // row in the reference matrix
  Origin origin = Origin::Real;
  std::int64_t view_index = 0;
};

struct Proposal {
  SceneId scene = 0;
  BoundingBox box;
  std::size_t embedding = 0;  // row in the scene's proposal matrix
  std::optional<double> detector_score;
};

struct GroundTruth {
  SceneId scene = 0;
  InstanceId instance;
  BoundingBox box;
  SizeClass size_class = SizeClass::Large;
  Difficulty difficulty = Difficulty::Untagged;
};

/// Any contiguous range of arithmetic values: spans, vectors, matrix rows.
template <typename R>
concept FeatureRange = std::ranges::contiguous_range<R> && std::ranges::sized_range<R> &&
                       std::is_arithmetic_v<std::ranges::range_value_t<R>>;

template <FeatureRange A, FeatureRange B>
double dot(const A& a, const B& b) {
  const auto* pa = std::ranges::data(a);
  const auto* pb = std::ranges::data(b);
  const std::size_t n = std::ranges::size(a);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += double(pa[i]) * double(pb[i]);
  return s;
}

template <FeatureRange A>
double norm(const A& a) {
  return std::sqrt(dot(a, a));
}

/// 1 - cos(u, v), in [0, 2]. Throws ZeroNorm rather than returning NaN.
template <FeatureRange A, FeatureRange B>
double cosine_distance(const A& u, const B& v) {
  if (std::ranges::size(u) != std::ranges::size(v)) {
    throw Error(ErrorCode::DimMismatch, "cosine_distance: dimension mismatch");
  }
  const double nu = norm(u);
  const double nv = norm(v);
  if (!(nu > 0) || !(nv > 0)) {
    throw Error(ErrorCode::ZeroNorm, "cosine_distance: zero-norm input");
  }
  const double c = std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
  return 1.0 - c;
}

template <FeatureRange A, FeatureRange B>
double cosine_similarity(const A& u, const B& v) {
  return 1.0 - cosine_distance(u, v);
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  if (inter <= 0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline SizeClass size_class(double area, const SizeThresholds& t) {
  if (area < t.small) return SizeClass::Small;
  if (area < t.medium) return SizeClass::Medium;
  return SizeClass::Large;
}

inline SizeClass size_class(const BoundingBox& box, const SizeThresholds& t) {
  return size_class(box.area(), t);
}

}  // namespace insdet
