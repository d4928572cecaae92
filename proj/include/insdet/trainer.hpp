#pragma once

// Embedding adapter f(x) = normalize(W * normalize(x) + b) and its
// metric-learning adaptation.
//
// The raw input is L2-normalized before the affine map so that the adapter
// (and every loss built on it) is invariant to positive rescaling of the
// incoming features, bias included.
//
// Gradients are derived by hand. With z = W x^ + b, s = |z|, y = z / s and an
// upstream gradient g = dL/dy:
//   dL/dz = (g - y (y . g)) / s,   dL/dW = dL/dz x^T,   dL/db = dL/dz.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "insdet/augment.hpp"
#include "insdet/binary_io.hpp"
#include "insdet/core.hpp"
#include "insdet/parallel.hpp"
#include "insdet/random.hpp"
#include "insdet/store.hpp"

namespace insdet {

struct Adapter {
  Matrix<double> weight;  // p x q
  std::vector<double> bias;  // p

  std::size_t input_dim() const noexcept { return weight.cols(); }
  std::size_t output_dim() const noexcept { return weight.rows(); }

  bool all_finite() const {
    return weight.all_finite() &&
           std::all_of(bias.begin(), bias.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Adapter&, const Adapter&) = default;
};

inline Adapter identity_adapter(std::size_t q) {
  return {Matrix<double>::identity(q), std::vector<double>(q, 0.0)};
}

/// Identity (or its p x q truncation) plus N(0, sigma^2) entries, zero bias.
inline Adapter initial_adapter(std::size_t q, std::size_t p, std::uint64_t seed, double sigma = 0.01) {
  Adapter a{Matrix<double>(p, q), std::vector<double>(p, 0.0)};
  auto rng = make_rng(seed, 0xada);
  std::normal_distribution<double> noise(0.0, sigma);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) a.weight(i, j) = (i == j ? 1.0 : 0.0) + noise(rng);
  }
  return a;
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Activation {
  std::vector<double> input;  // normalized input x^
  std::vector<double> output;  // y, unit norm
  double pre_norm = 0;  // |W x^ + b|
};

template <FeatureRange R>
Activation forward_trace(const Adapter& adapter, const R& x) {
  if (std::ranges::size(x) != adapter.input_dim()) {
    throw Error(ErrorCode::DimMismatch, "forward: input has dimension " + std::to_string(std::ranges::size(x)) +
                                            ", adapter expects " + std::to_string(adapter.input_dim()));
  }
  const double xn = norm(x);
  if (!(xn > 0) || !std::isfinite(xn)) {
    throw Error(ErrorCode::ZeroNorm, "forward: input embedding has zero or non-finite norm");
  }
  Activation act;
  act.input.resize(std::ranges::size(x));
  for (std::size_t j = 0; j < act.input.size(); ++j) act.input[j] = double(std::ranges::data(x)[j]) / xn;
  const std::size_t p = adapter.output_dim();
  act.output.resize(p);
  for (std::size_t i = 0; i < p; ++i) {
    act.output[i] = adapter.bias[i] + dot(adapter.weight.row(i), act.input);
  }
  act.pre_norm = norm(act.output);
  if (act.pre_norm == 0.0) {
    throw Error(ErrorCode::DegenerateProjection, "forward: W x + b is exactly zero");
  }
  for (double& v : act.output) v /= act.pre_norm;
  return act;
}

template <FeatureRange R>
std::vector<double> forward(const Adapter& adapter, const R& x) {
  return forward_trace(adapter, x).output;
}

/// Applies the adapter to every row.
template <typename T>
Matrix<double> forward_rows(const Adapter& adapter, const Matrix<T>& rows, unsigned threads = 1) {
  Matrix<double> out(rows.rows(), adapter.output_dim());
  parallel_for(rows.rows(), threads, [&](std::size_t i) {
    const auto y = forward(adapter, rows.row(i));
    std::copy(y.begin(), y.end(), out.row(i).begin());
  });
  return out;
}

/// Gradient with respect to all trainable parameters. `head` stays empty
/// unless the cross-entropy objective is in use.
struct Gradient {
  Matrix<double> weight;
  std::vector<double> bias;
  Matrix<double> head;

  static Gradient zeros_like(const Adapter& a, const Matrix<double>* head = nullptr) {
    Gradient g{Matrix<double>(a.output_dim(), a.input_dim()), std::vector<double>(a.output_dim(), 0.0), {}};
    if (head != nullptr) g.head = Matrix<double>(head->rows(), head->cols());
    return g;
  }

  void add(const Gradient& other, double scale = 1.0) {
    for (std::size_t i = 0; i < weight.data().size(); ++i) weight.data()[i] += scale * other.weight.data()[i];
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] += scale * other.bias[i];
    for (std::size_t i = 0; i < head.data().size(); ++i) head.data()[i] += scale * other.head.data()[i];
  }

  bool is_zero() const {
    auto zero = [](double v) { return v == 0.0; };
    return std::all_of(weight.data().begin(), weight.data().end(), zero) &&
           std::all_of(bias.begin(), bias.end(), zero) &&
           std::all_of(head.data().begin(), head.data().end(), zero);
  }
};

/// Backpropagates dL/dy through normalization and the affine map.
inline void backprop(const Activation& act, std::span<const double> grad_out, Gradient& grad) {
  const auto& y = act.output;
  const double proj = dot(y, grad_out);
  const std::size_t p = y.size();
  const std::size_t q = act.input.size();
  for (std::size_t i = 0; i < p; ++i) {
    const double dz = (grad_out[i] - y[i] * proj) / act.pre_norm;
    grad.bias[i] += dz;
    auto row = grad.weight.row(i);
    for (std::size_t j = 0; j < q; ++j) row[j] += dz * act.input[j];
  }
}

namespace detail {

inline double unit_distance(const std::vector<double>& a, const std::vector<double>& b) {
  return 1.0 - dot(a, b);
}

inline std::vector<double> scaled(const std::vector<double>& v, double s) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = s * v[i];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- triplet

/// Hinge value before clamping: d(a, p) - d(a, n) + alpha.
template <FeatureRange A, FeatureRange P, FeatureRange N>
double triplet_pre_hinge(const Adapter& adapter, const A& anchor, const P& positive, const N& negative,
                         double alpha) {
  const auto a = forward(adapter, anchor);
  const auto p = forward(adapter, positive);
  const auto n = forward(adapter, negative);
  return detail::unit_distance(a, p) - detail::unit_distance(a, n) + alpha;
}

template <FeatureRange A, FeatureRange P, FeatureRange N>
double triplet_loss(const Adapter& adapter, const A& anchor, const P& positive, const N& negative, double alpha) {
  return std::max(0.0, triplet_pre_hinge(adapter, anchor, positive, negative, alpha));
}

/// Adds scale * dloss/dtheta into `grad`; returns the loss. A hinge value of
/// exactly zero counts as inactive.
template <FeatureRange A, FeatureRange P, FeatureRange N>
double triplet_loss_accumulate(const Adapter& adapter, const A& anchor, const P& positive, const N& negative,
                               double alpha, Gradient& grad, double scale = 1.0) {
  const auto a = forward_trace(adapter, anchor);
  const auto p = forward_trace(adapter, positive);
  const auto n = forward_trace(adapter, negative);
  const double pre = detail::unit_distance(a.output, p.output) - detail::unit_distance(a.output, n.output) + alpha;
  if (!(pre > 0.0)) return 0.0;
  std::vector<double> ga(a.output.size());
  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = scale * (n.output[i] - p.output[i]);
  backprop(a, ga, grad);
  backprop(p, detail::scaled(a.output, -scale), grad);
  backprop(n, detail::scaled(a.output, scale), grad);
  return pre;
}

template <typename T>
struct TripletView {
  std::span<const T> anchor;
  std::span<const T> positive;
  std::span<const T> negative;
};

/// Mean per-triplet gradient over the batch.
template <typename T>
Gradient loss_gradient(const Adapter& adapter, std::span<const TripletView<T>> batch, double alpha) {
  Gradient g = Gradient::zeros_like(adapter);
  if (batch.empty()) return g;
  const double scale = 1.0 / double(batch.size());
  for (const auto& t : batch) triplet_loss_accumulate(adapter, t.anchor, t.positive, t.negative, alpha, g, scale);
  return g;
}

// ------------------------------------------------------------ contrastive

/// Positive pair: d^2. Negative pair: max(0, margin - d)^2. d = cosine distance.
template <FeatureRange A, FeatureRange B>
double contrastive_loss(const Adapter& adapter, const A& first, const B& second, bool same_instance,
                        double margin) {
  const double d = detail::unit_distance(forward(adapter, first), forward(adapter, second));
  if (same_instance) return d * d;
  const double gap = std::max(0.0, margin - d);
  return gap * gap;
}

template <FeatureRange A, FeatureRange B>
double contrastive_loss_accumulate(const Adapter& adapter, const A& first, const B& second, bool same_instance,
                                   double margin, Gradient& grad, double scale = 1.0) {
  const auto u = forward_trace(adapter, first);
  const auto v = forward_trace(adapter, second);
  const double d = detail::unit_distance(u.output, v.output);
  double loss = 0;
  double dl_dd = 0;
  if (same_instance) {
    loss = d * d;
    dl_dd = 2.0 * d;
  } else if (margin - d > 0.0) {
    loss = (margin - d) * (margin - d);
    dl_dd = -2.0 * (margin - d);
  }
  if (dl_dd != 0.0) {
    // dd/du = -v, dd/dv = -u
    backprop(u, detail::scaled(v.output, -scale * dl_dd), grad);
    backprop(v, detail::scaled(u.output, -scale * dl_dd), grad);
  }
  return loss;
}

// ---------------------------------------------------------- cross entropy

inline double log_sum_exp(std::span<const double> v) {
  const double peak = *std::max_element(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += std::exp(x - peak);
  return peak + std::log(s);
}

inline std::vector<double> head_logits(const Matrix<double>& head, const std::vector<double>& features) {
  std::vector<double> logits(head.rows());
  for (std::size_t k = 0; k < head.rows(); ++k) logits[k] = dot(head.row(k), features);
  return logits;
}

/// Softmax cross-entropy of a linear head (K x p) over adapted features.
template <FeatureRange R>
double ce_loss(const Adapter& adapter, const Matrix<double>& head, const R& sample, std::size_t label) {
  if (label >= head.rows()) throw Error(ErrorCode::InvalidArgument, "ce_loss: label out of range");
  const auto logits = head_logits(head, forward(adapter, sample));
  return log_sum_exp(logits) - logits[label];
}

template <FeatureRange R>
double ce_loss_accumulate(const Adapter& adapter, const Matrix<double>& head, const R& sample, std::size_t label,
                          Gradient& grad, double scale = 1.0) {
  if (label >= head.rows()) throw Error(ErrorCode::InvalidArgument, "ce_loss: label out of range");
  const auto act = forward_trace(adapter, sample);
  const auto logits = head_logits(head, act.output);
  const double lse = log_sum_exp(logits);
  std::vector<double> grad_y(act.output.size(), 0.0);
  for (std::size_t k = 0; k < head.rows(); ++k) {
    const double dlogit = scale * (std::exp(logits[k] - lse) - (k == label ? 1.0 : 0.0));
    auto hrow = grad.head.row(k);
    for (std::size_t i = 0; i < act.output.size(); ++i) {
      hrow[i] += dlogit * act.output[i];
      grad_y[i] += dlogit * head(k, i);
    }
  }
  backprop(act, grad_y, grad);
  return lse - logits[label];
}

// ---------------------------------------------------------- hard negatives

/// Index of the candidate closest to the anchor (both already adapted, unit
/// norm). Ties go to the lowest index.
inline std::size_t hardest_candidate(std::span<const double> anchor, const Matrix<double>& candidates) {
  if (candidates.rows() == 0) throw Error(ErrorCode::EmptyInput, "hard_negative: empty candidate set");
  std::size_t best = 0;
  double best_d = 1.0 - dot(anchor, candidates.row(0));
  for (std::size_t i = 1; i < candidates.rows(); ++i) {
    const double d = 1.0 - dot(anchor, candidates.row(i));
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

/// argmin over candidate rows of d(f(anchor), f(candidate)).
template <FeatureRange R, typename T>
std::size_t hard_negative(const Adapter& adapter, const R& anchor, const Matrix<T>& candidates) {
  if (candidates.rows() == 0) throw Error(ErrorCode::EmptyInput, "hard_negative: empty candidate set");
  const auto a = forward(adapter, anchor);
  return hardest_candidate(a, forward_rows(adapter, candidates));
}

// -------------------------------------------------------------------- Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  bool decoupled = false;  // AdamW-style decay instead of L2 added to the gradient
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
};

/// One Adam update of `params` at step t (1-based).
inline void adam_update(std::span<double> params, std::span<const double> grad, AdamState& state,
                        std::size_t t, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double g = grad[i];
    if (!cfg.decoupled) g += cfg.weight_decay * params[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double step = (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.epsilon);
    params[i] -= cfg.lr * step;
    if (cfg.decoupled) params[i] -= cfg.lr * cfg.weight_decay * params[i];
  }
}

// ---------------------------------------------------------------- training

enum class LossKind { Triplet, Contrastive, CrossEntropy };

constexpr std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::Triplet: return "triplet";
    case LossKind::Contrastive: return "contrastive";
    case LossKind::CrossEntropy: return "ce";
  }
  return "triplet";
}

struct TrainConfig {
  LossKind loss = LossKind::Triplet;
  double alpha = 0.5;
  double contrastive_margin = -1;  // negative: use alpha
  double lr = 1e-3;
  double weight_decay = 0.5;
  bool decoupled_weight_decay = false;
  std::size_t batch_size = 100;
  std::size_t epochs = 10;
  std::size_t distractors_per_batch = 100;
  std::size_t output_dim = 0;  // 0: same as input
  double init_noise = 0.01;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double active_fraction = 0;
};

struct TrainResult {
  Adapter adapter;
  Matrix<double> head;  // auxiliary CE head, empty for the other objectives
  std::vector<EpochStats> trace;
};

/// Which row a triplet member comes from.
enum class Source { Reference, Distractor };

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  Source negative_source = Source::Reference;
  std::size_t negative = 0;
};

inline std::string loss_trace_csv(const std::vector<EpochStats>& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean_loss,active_triplet_fraction\n";
  for (const auto& e : trace) os << e.epoch << ',' << e.mean_loss << ',' << e.active_fraction << '\n';
  return os.str();
}

namespace detail {

inline void check_train_config(const TrainConfig& c) {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "train: " + m); };
  if (c.batch_size < 2) bad("batch size must be at least 2");
  if (!(c.alpha >= 0) || !std::isfinite(c.alpha)) bad("alpha must be a finite value >= 0");
  if (!(c.lr > 0) || !std::isfinite(c.lr)) bad("learning rate must be positive");
  if (!(c.weight_decay >= 0) || !std::isfinite(c.weight_decay)) bad("weight decay must be >= 0");
  if (!(c.init_noise >= 0)) bad("init noise must be >= 0");
}

}  // namespace detail

/// Metric-learning adaptation over the training reference selection.
///
/// One epoch is a shuffled pass in which every selected reference is the
/// anchor once. Positives are drawn uniformly from the anchor's other
/// references. The negative is the hardest (closest after adaptation) among
/// the batch members of other instances plus `distractors_per_batch`
/// distractors sampled afresh for each batch.
inline TrainResult train(const DatasetManifest& manifest, const DistractorPool& pool, const TrainConfig& config,
                         const AugmentationConfig& aug) {
  detail::check_train_config(config);
  const auto refs = select_references(manifest, aug, Phase::Train);
  const EmbeddingMatrix inputs = reference_rows(manifest, refs);
  const std::size_t q = manifest.dim;
  const std::size_t p = config.output_dim == 0 ? q : config.output_dim;

  std::map<InstanceId, std::vector<std::size_t>> by_instance;
  for (std::size_t i = 0; i < refs.size(); ++i) by_instance[refs[i].instance].push_back(i);
  if (by_instance.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "train: need at least 2 instances, found " +
                                                std::to_string(by_instance.size()));
  }
  for (const auto& [inst, rows] : by_instance) {
    if (rows.size() < 2) {
      throw Error(ErrorCode::InvalidArgument, "train: instance " + std::to_string(inst.value) +
                                                  " has fewer than 2 references, cannot sample positives");
    }
  }
  std::map<InstanceId, std::size_t> class_of;
  for (const auto& [inst, _] : by_instance) class_of.emplace(inst, class_of.size());

  TrainResult result;
  result.adapter = initial_adapter(q, p, config.seed, config.init_noise);
  if (config.loss == LossKind::CrossEntropy) {
    result.head = Matrix<double>(by_instance.size(), p);
    auto hrng = make_rng(config.seed, 0xce);
    std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(double(p)));
    for (double& v : result.head.data()) v = init(hrng);
  }
  const double margin = config.contrastive_margin < 0 ? config.alpha : config.contrastive_margin;
  const AdamConfig adam{config.lr, 0.9, 0.999, 1e-8, config.weight_decay, config.decoupled_weight_decay};
  AdamState state_w, state_b, state_h;
  std::size_t step = 0;

  auto rng = make_rng(config.seed, 0x7a1);
  std::vector<std::size_t> order(refs.size());
  std::vector<std::size_t> pool_order(pool.size());
  const std::size_t per_batch_distractors = std::min(config.distractors_per_batch, pool.size());

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t active = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);

      // fresh distractor sample for this batch (uniform, without replacement)
      std::iota(pool_order.begin(), pool_order.end(), 0);
      for (std::size_t k = 0; k < per_batch_distractors; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, pool_order.size() - 1);
        std::swap(pool_order[k], pool_order[pick(rng)]);
      }

      // positives are drawn sequentially so the rng stream does not depend on threads
      std::vector<std::size_t> positives(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& same = by_instance[refs[batch[b]].instance];
        std::uniform_int_distribution<std::size_t> pick(0, same.size() - 2);
        std::size_t k = pick(rng);
        if (same[k] == batch[b]) k = same.size() - 1;  // skip the anchor itself
        positives[b] = same[k];
      }

      // adapted features of all candidate negatives under the current parameters
      Matrix<double> batch_out(batch.size(), p);
      parallel_for(batch.size(), config.threads, [&](std::size_t b) {
        const auto y = forward(result.adapter, inputs.row(batch[b]));
        std::copy(y.begin(), y.end(), batch_out.row(b).begin());
      });
      Matrix<double> distractor_out(per_batch_distractors, p);
      parallel_for(per_batch_distractors, config.threads, [&](std::size_t k) {
        const auto y = forward(result.adapter, pool.embeddings.row(pool_order[k]));
        std::copy(y.begin(), y.end(), distractor_out.row(k).begin());
      });

      std::vector<Gradient> slots(batch.size());
      std::vector<double> losses(batch.size(), 0.0);
      const double scale = 1.0 / double(batch.size());
      parallel_for(batch.size(), config.threads, [&](std::size_t b) {
        const std::size_t anchor = batch[b];
        const InstanceId inst = refs[anchor].instance;
        slots[b] = Gradient::zeros_like(result.adapter, result.head.empty() ? nullptr : &result.head);
        const auto anchor_row = inputs.row(anchor);
        if (config.loss == LossKind::CrossEntropy) {
          losses[b] = ce_loss_accumulate(result.adapter, result.head, anchor_row, class_of.at(inst), slots[b], scale);
          return;
        }
        // candidate list: other-instance batch members, then sampled distractors
        std::vector<std::span<const float>> cand_rows;
        Matrix<double> cand_out(0, p);
        for (std::size_t c = 0; c < batch.size(); ++c) {
          if (refs[batch[c]].instance == inst) continue;
          cand_rows.push_back(inputs.row(batch[c]));
          cand_out.append_row(batch_out.row(c));
        }
        for (std::size_t k = 0; k < per_batch_distractors; ++k) {
          cand_rows.push_back(pool.embeddings.row(pool_order[k]));
          cand_out.append_row(distractor_out.row(k));
        }
        if (cand_rows.empty()) {
          // a batch holding a single instance and no distractors: fall back to every other-instance reference
          for (std::size_t r = 0; r < refs.size(); ++r) {
            if (refs[r].instance == inst) continue;
            cand_rows.push_back(inputs.row(r));
            const auto y = forward(result.adapter, inputs.row(r));
            cand_out.append_row(std::span<const double>(y));
          }
        }
        const std::size_t hard = hardest_candidate(batch_out.row(b), cand_out);
        const auto positive_row = inputs.row(positives[b]);
        if (config.loss == LossKind::Triplet) {
          losses[b] = std::max(0.0, triplet_loss_accumulate(result.adapter, anchor_row, positive_row, cand_rows[hard],
                                                            config.alpha, slots[b], scale));
        } else {
          losses[b] = contrastive_loss_accumulate(result.adapter, anchor_row, positive_row, true, margin, slots[b], scale) +
                      contrastive_loss_accumulate(result.adapter, anchor_row, cand_rows[hard], false, margin, slots[b], scale);
        }
      });

      Gradient total = Gradient::zeros_like(result.adapter, result.head.empty() ? nullptr : &result.head);
      double batch_loss = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (!std::isfinite(losses[b])) {
          throw Error(ErrorCode::NonFiniteLoss, "train: non-finite loss at epoch " + std::to_string(epoch) +
                                                    ", anchor reference " + std::to_string(batch[b]));
        }
        total.add(slots[b]);
        batch_loss += losses[b];
        if (losses[b] > 0) ++active;
      }
      loss_sum += batch_loss;

      ++step;
      adam_update(result.adapter.weight.data(), total.weight.data(), state_w, step, adam);
      adam_update(result.adapter.bias, total.bias, state_b, step, adam);
      if (!result.head.empty()) adam_update(result.head.data(), total.head.data(), state_h, step, adam);
      if (!result.adapter.all_finite()) {
        throw Error(ErrorCode::NonFiniteLoss, "train: parameters became non-finite at epoch " + std::to_string(epoch));
      }
    }
    result.trace.push_back({epoch, loss_sum / double(refs.size()), double(active) / double(refs.size())});
  }
  return result;
}

/// Uniformly sampled (anchor, positive, random other-instance negative)
/// triplets over a reference selection; used for held-out loss measurement.
inline std::vector<Triplet> sample_triplets(const std::vector<ReferenceImage>& refs, std::size_t count,
                                            std::uint64_t seed) {
  std::map<InstanceId, std::vector<std::size_t>> by_instance;
  for (std::size_t i = 0; i < refs.size(); ++i) by_instance[refs[i].instance].push_back(i);
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (by_instance[refs[i].instance].size() >= 2) anchors.push_back(i);
  }
  if (anchors.empty() || by_instance.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "sample_triplets: need 2 instances with 2 references");
  }
  auto rng = make_rng(seed, 0x5a3);
  std::vector<Triplet> out;
  out.reserve(count);
  std::uniform_int_distribution<std::size_t> pick_anchor(0, anchors.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_any(0, refs.size() - 1);
  while (out.size() < count) {
    Triplet t;
    t.anchor = anchors[pick_anchor(rng)];
    const auto& same = by_instance[refs[t.anchor].instance];
    std::uniform_int_distribution<std::size_t> pick_same(0, same.size() - 1);
    do t.positive = same[pick_same(rng)]; while (t.positive == t.anchor);
    do t.negative = pick_any(rng); while (refs[t.negative].instance == refs[t.anchor].instance);
    out.push_back(t);
  }
  return out;
}

/// Mean triplet loss over reference-sourced triplets (rows of `inputs`).
inline double mean_triplet_loss(const Adapter& adapter, const EmbeddingMatrix& inputs,
                                const std::vector<Triplet>& triplets, double alpha) {
  if (triplets.empty()) return 0.0;
  double s = 0;
  for (const auto& t : triplets) {
    s += triplet_loss(adapter, inputs.row(t.anchor), inputs.row(t.positive), inputs.row(t.negative), alpha);
  }
  return s / double(triplets.size());
}

// ------------------------------------------------------------- checkpoint

// Adapter checkpoint layout (little-endian):
//   16-byte header: "IDOA", u16 version = 1, u16 reserved = 0, u32 p, u32 q
//   p*q binary64 W values, row-major, then p binary64 b values
// The file is exactly 16 + 8*(p*q + p) bytes.
inline constexpr std::string_view kAdapterMagic = "IDOA";

inline binary::Bytes encode_adapter(const Adapter& a) {
  if (!a.all_finite()) throw Error(ErrorCode::NonFinite, "adapter: non-finite parameters");
  binary::Bytes out;
  binary::put_header(out, kAdapterMagic, static_cast<std::uint32_t>(a.output_dim()),
                     static_cast<std::uint32_t>(a.input_dim()));
  for (double v : a.weight.data()) binary::put_f64(out, v);
  for (double v : a.bias) binary::put_f64(out, v);
  return out;
}

inline Adapter decode_adapter(std::span<const std::uint8_t> bytes, std::string_view what = "adapter file") {
  const auto h = binary::parse_header(
      bytes, kAdapterMagic, [](std::uint64_t p, std::uint64_t q) { return 8 * (p * q + p); }, what);
  if (h.extent0 == 0 || h.extent1 == 0) {
    throw Error(ErrorCode::SchemaViolation, std::string(what) + ": adapter dimensions must be positive");
  }
  Adapter a{Matrix<double>(h.extent0, h.extent1), std::vector<double>(h.extent0)};
  std::size_t at = binary::kHeaderSize;
  for (double& v : a.weight.data()) {
    v = binary::get_f64(bytes, at);
    at += 8;
  }
  for (double& v : a.bias) {
    v = binary::get_f64(bytes, at);
    at += 8;
  }
  if (!a.all_finite()) throw Error(ErrorCode::NonFinite, std::string(what) + ": non-finite parameters");
  return a;
}

inline void write_adapter(const Adapter& a, const std::filesystem::path& path) {
  binary::write_file_atomic(path, encode_adapter(a));
}

inline Adapter read_adapter(const std::filesystem::path& path) {
  return decode_adapter(binary::read_file(path), path.string());
}

}  // namespace insdet
