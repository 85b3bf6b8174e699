#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cplab/dataset.hpp"
#include "cplab/distance.hpp"
#include "cplab/nettail.hpp"
#include "cplab/rng.hpp"

namespace cplab {

enum class ScoreKind {
  label_distance,
  margin_distance,
  mean_distance,
  knn_ratio,
  aps,
  raps,
  saps,
  gradient,
  fast_gradient,
};

inline const char* score_kind_name(ScoreKind k) {
  switch (k) {
    case ScoreKind::label_distance: return "label_distance";
    case ScoreKind::margin_distance: return "margin_distance";
    case ScoreKind::mean_distance: return "mean_distance";
    case ScoreKind::knn_ratio: return "knn_ratio";
    case ScoreKind::aps: return "aps";
    case ScoreKind::raps: return "raps";
    case ScoreKind::saps: return "saps";
    case ScoreKind::gradient: return "gradient";
    default: return "fast_gradient";
  }
}

inline ScoreKind parse_score_kind(const std::string& s) {
  for (const ScoreKind k :
       {ScoreKind::label_distance, ScoreKind::margin_distance, ScoreKind::mean_distance,
        ScoreKind::knn_ratio, ScoreKind::aps, ScoreKind::raps, ScoreKind::saps,
        ScoreKind::gradient, ScoreKind::fast_gradient}) {
    if (s == score_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown score kind: " + s);
}

inline bool is_aps_family(ScoreKind k) {
  return k == ScoreKind::aps || k == ScoreKind::raps || k == ScoreKind::saps;
}

inline bool is_gradient_kind(ScoreKind k) {
  return k == ScoreKind::gradient || k == ScoreKind::fast_gradient;
}

// Weight of the true-class term in the APS family. The constant mode (a small
// positive tie-break) is the default; the random mode hashes (seed, example,
// class) so calibration and inference are reproducible and class loops are
// order-independent.
struct UMode {
  bool random = false;
  double value = 0.001;
  std::uint64_t seed = 0;

  static UMode constant(double v) { return {false, v, 0}; }
  static UMode randomized(std::uint64_t seed) { return {true, 0.0, seed}; }
};

inline double resolve_u(const UMode& mode, std::int64_t example_index, int class_index) {
  if (!mode.random) return mode.value;
  std::uint64_t h = splitmix64(mode.seed ^ splitmix64(static_cast<std::uint64_t>(example_index)));
  h = splitmix64(h ^ static_cast<std::uint64_t>(class_index));
  return unit_double(h);
}

struct ScoreConfig {
  ScoreKind kind = ScoreKind::aps;
  DomainTag domain = DomainTag::probability;
  Metric metric = Metric::euclidean;
  UMode u_mode{};
  double lambda = 0.2;  // raps / saps regularization strength
  int k_reg = 1;        // raps rank cutoff
  double lr = 0.1;      // gradient descent step
  int steps = 100;      // gradient descent iterations

  void validate(bool has_tail) const {
    switch (kind) {
      case ScoreKind::label_distance:
        if (domain != DomainTag::probability) {
          throw std::invalid_argument(
              "label_distance requires the probability domain: the label must be "
              "representable as a point in the conformal domain");
        }
        break;
      case ScoreKind::margin_distance:
      case ScoreKind::aps:
      case ScoreKind::raps:
      case ScoreKind::saps:
        if (domain == DomainTag::feature) {
          throw std::invalid_argument(std::string(score_kind_name(kind)) +
                                      " requires the probability or logit domain");
        }
        break;
      case ScoreKind::gradient:
      case ScoreKind::fast_gradient:
        if (domain != DomainTag::feature) {
          throw std::invalid_argument(std::string(score_kind_name(kind)) +
                                      " requires the feature domain");
        }
        if (!has_tail) {
          throw std::invalid_argument(std::string(score_kind_name(kind)) +
                                      " requires a network tail");
        }
        break;
      default:
        break;
    }
    if (!u_mode.random && !(u_mode.value > 0.0 && u_mode.value <= 1.0)) {
      throw std::invalid_argument("u constant must lie in (0,1]");
    }
    if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
    if (k_reg < 1) throw std::invalid_argument("k_reg must be a positive integer");
    if (is_gradient_kind(kind)) {
      if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
      if (steps < 1) throw std::invalid_argument("steps must be a positive integer");
    }
  }
};

// Calibration-set statistics a score may consult. Immutable once built; the
// exclude-index argument of the scoring functions implements the
// leave-one-out view used while calibrating.
struct ScoreContext {
  int n_classes = 0;
  std::size_t dim = 0;
  // mean_distance
  std::vector<double> class_means;  // n_classes x dim row-major; zero row if absent
  std::vector<long> class_counts;
  std::vector<double> global_mean;
  long total_count = 0;
  // knn_ratio
  std::shared_ptr<const Dataset> calibration;
  // gradient kinds
  std::shared_ptr<const NetworkTail> tail;
  std::string tail_path;  // provenance when loaded from a file

  std::shared_ptr<std::atomic<bool>> warned_fallback =
      std::make_shared<std::atomic<bool>>(false);

  std::span<const double> class_mean(int c) const {
    return {class_means.data() + static_cast<std::size_t>(c) * dim, dim};
  }
};

inline ScoreContext build_context(const ScoreConfig& config, const Dataset& calib,
                                  std::shared_ptr<const NetworkTail> tail = nullptr) {
  ScoreContext ctx;
  ctx.n_classes = calib.n_classes;
  ctx.dim = calib.cols;
  if (config.kind == ScoreKind::mean_distance) {
    const std::size_t c = static_cast<std::size_t>(calib.n_classes);
    std::vector<double> sums(c * calib.cols, 0.0);
    ctx.class_counts.assign(c, 0);
    std::vector<double> total(calib.cols, 0.0);
    for (std::size_t i = 0; i < calib.rows; ++i) {
      const auto r = calib.row(i);
      double* s = sums.data() + static_cast<std::size_t>(calib.labels[i]) * calib.cols;
      for (std::size_t j = 0; j < calib.cols; ++j) {
        s[j] += r[j];
        total[j] += r[j];
      }
      ++ctx.class_counts[static_cast<std::size_t>(calib.labels[i])];
    }
    ctx.class_means.assign(c * calib.cols, 0.0);
    for (std::size_t cls = 0; cls < c; ++cls) {
      if (ctx.class_counts[cls] == 0) continue;
      for (std::size_t j = 0; j < calib.cols; ++j) {
        ctx.class_means[cls * calib.cols + j] =
            sums[cls * calib.cols + j] / static_cast<double>(ctx.class_counts[cls]);
      }
    }
    ctx.global_mean.assign(calib.cols, 0.0);
    for (std::size_t j = 0; j < calib.cols; ++j) {
      ctx.global_mean[j] = total[j] / static_cast<double>(calib.rows);
    }
    ctx.total_count = static_cast<long>(calib.rows);
  }
  if (config.kind == ScoreKind::knn_ratio) {
    ctx.calibration = std::make_shared<Dataset>(calib);
  }
  if (is_gradient_kind(config.kind)) {
    ctx.tail = std::move(tail);
  }
  return ctx;
}

namespace detail {

inline void check_label(int label, std::size_t n) {
  if (label < 0 || static_cast<std::size_t>(label) >= n) {
    throw std::invalid_argument("score: label " + std::to_string(label) +
                                " out of range [0," + std::to_string(n) + ")");
  }
}

// Classes ordered by descending value, ties broken by lower class index, with
// prefix sums accumulated in that order. All APS-family scoring goes through
// this so the per-class path and the sorted fast path are bit-identical.
struct SortedValues {
  std::vector<int> order;      // class index at each sorted position
  std::vector<double> prefix;  // prefix[j] = sum of the first j sorted values
  std::vector<int> rank;       // rank[class] = 1-based position in `order`
  double top = 0.0;            // highest value
};

inline SortedValues sort_descending(std::span<const double> values) {
  SortedValues s;
  const std::size_t n = values.size();
  s.order.resize(n);
  std::iota(s.order.begin(), s.order.end(), 0);
  std::sort(s.order.begin(), s.order.end(), [&](int a, int b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  s.prefix.resize(n + 1);
  s.prefix[0] = 0.0;
  s.rank.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    s.prefix[j + 1] = s.prefix[j] + values[s.order[j]];
    s.rank[s.order[j]] = static_cast<int>(j) + 1;
  }
  s.top = n > 0 ? values[s.order[0]] : 0.0;
  return s;
}

inline double aps_from_sorted(const SortedValues& s, std::span<const double> values,
                              int label, double u) {
  const int r = s.rank[label];
  return s.prefix[r - 1] + u * values[label];
}

inline double raps_from_sorted(const SortedValues& s, std::span<const double> values,
                               int label, double lambda, int k_reg, double u) {
  const int r = s.rank[label];
  const double reg = r > k_reg ? lambda * static_cast<double>(r - k_reg) : 0.0;
  return s.prefix[r - 1] + u * values[label] + reg;
}

inline double saps_from_sorted(const SortedValues& s, int label, double lambda, double u) {
  const int r = s.rank[label];
  if (r == 1) return u * s.top;
  return s.top + lambda * (static_cast<double>(r - 2) + u);
}

}  // namespace detail

// 1-based rank of `label` when values are ordered descending (ties broken by
// lower class index).
inline int descending_rank(std::span<const double> values, int label) {
  detail::check_label(label, values.size());
  const double v = values[label];
  int before = 0;
  for (std::size_t j = 0; j < values.size(); ++j) {
    if (values[j] > v || (values[j] == v && static_cast<int>(j) < label)) ++before;
  }
  return before + 1;
}

// Distance from an output vector to the one-hot vector of the label.
inline double label_distance_score(std::span<const double> point, int label, Metric metric) {
  detail::check_label(label, point.size());
  if (metric == Metric::euclidean) {
    double acc = 0.0;
    for (std::size_t j = 0; j < point.size(); ++j) {
      const double d = point[j] - (static_cast<int>(j) == label ? 1.0 : 0.0);
      acc += d * d;
    }
    return std::sqrt(acc);
  }
  double norm_sq = 0.0;
  for (const double x : point) norm_sq += x * x;
  if (norm_sq == 0.0) throw std::invalid_argument("label_distance: zero-norm vector");
  return 1.0 - point[label] / std::sqrt(norm_sq);
}

// Signed distance to the nearest correct/incorrect decision boundary, i.e.
// the locus where the true class value ties the best competing value.
// Negative when the true class is the strict argmax (deeper is more
// conforming); zero on the boundary itself. The euclidean variant returns the
// equivalent ordering form: the competing value minus the true value. The
// cosine variant measures the angle to the projection whose (y, z) components
// are replaced by their mean.
inline double margin_distance_score(std::span<const double> point, int label, Metric metric) {
  detail::check_label(label, point.size());
  if (point.size() < 2) {
    throw std::invalid_argument("margin_distance: need at least two classes");
  }
  const double own = point[label];
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < point.size(); ++j) {
    if (static_cast<int>(j) == label) continue;
    best = std::max(best, point[j]);
  }
  const double diff = best - own;
  if (metric == Metric::euclidean) return diff;

  double norm_sq = 0.0;
  for (const double x : point) norm_sq += x * x;
  if (norm_sq == 0.0) throw std::invalid_argument("margin_distance: zero-norm vector");
  if (diff == 0.0) return 0.0;
  const double mid = 0.5 * (own + best);
  const double boundary_sq =
      std::max(0.0, norm_sq - own * own - best * best + 2.0 * mid * mid);
  const double cosd = std::max(0.0, 1.0 - std::sqrt(boundary_sq / norm_sq));
  return diff > 0.0 ? cosd : -cosd;
}

// Distance to the mean same-class calibration point. While calibrating, pass
// exclude_count=1 to remove the scored point from its own class mean; a class
// left without points falls back to the calibration-set mean (with a warning)
// rather than silently excluding the class from every prediction set.
inline double mean_distance_score(std::span<const double> point, int label, Metric metric,
                                  const ScoreContext& ctx, bool exclude_self = false) {
  detail::check_label(label, static_cast<std::size_t>(ctx.n_classes));
  if (point.size() != ctx.dim) {
    throw std::invalid_argument("mean_distance: dimension mismatch");
  }
  const long count = ctx.class_counts[static_cast<std::size_t>(label)];
  std::vector<double> mean(ctx.dim);
  if (exclude_self) {
    if (count >= 2) {
      const auto m = ctx.class_mean(label);
      const double n = static_cast<double>(count);
      for (std::size_t j = 0; j < ctx.dim; ++j) {
        mean[j] = (m[j] * n - point[j]) / (n - 1.0);
      }
    } else {
      if (ctx.total_count < 2) {
        throw std::invalid_argument("mean_distance: calibration set too small");
      }
      if (!ctx.warned_fallback->exchange(true)) {
        std::cerr << "warning: mean_distance: class " << label
                  << " has a single calibration point; using the global mean\n";
      }
      const double n = static_cast<double>(ctx.total_count);
      for (std::size_t j = 0; j < ctx.dim; ++j) {
        mean[j] = (ctx.global_mean[j] * n - point[j]) / (n - 1.0);
      }
    }
  } else {
    if (count >= 1) {
      const auto m = ctx.class_mean(label);
      std::copy(m.begin(), m.end(), mean.begin());
    } else {
      if (ctx.total_count < 1) {
        throw std::invalid_argument("mean_distance: empty calibration context");
      }
      if (!ctx.warned_fallback->exchange(true)) {
        std::cerr << "warning: mean_distance: class " << label
                  << " absent from calibration; using the global mean\n";
      }
      std::copy(ctx.global_mean.begin(), ctx.global_mean.end(), mean.begin());
    }
  }
  return distance(metric, point, mean);
}

// Distance to the nearest same-class calibration point divided by the
// distance to the nearest point of any other class. A zero other-class
// distance yields +inf: coinciding with another class is maximally
// non-conforming.
inline double knn_ratio_score(std::span<const double> point, int label, Metric metric,
                              const ScoreContext& ctx, std::int64_t exclude_index = -1) {
  detail::check_label(label, static_cast<std::size_t>(ctx.n_classes));
  if (!ctx.calibration) throw std::invalid_argument("knn_ratio: missing calibration context");
  const Dataset& calib = *ctx.calibration;
  if (point.size() != calib.cols) {
    throw std::invalid_argument("knn_ratio: dimension mismatch");
  }
  double nearest_same = std::numeric_limits<double>::infinity();
  double nearest_other = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < calib.rows; ++i) {
    if (static_cast<std::int64_t>(i) == exclude_index) continue;
    const double d = distance(metric, point, calib.row(i));
    if (calib.labels[i] == label) {
      nearest_same = std::min(nearest_same, d);
    } else {
      nearest_other = std::min(nearest_other, d);
    }
  }
  if (!std::isfinite(nearest_same)) {
    throw std::invalid_argument("knn_ratio: no same-class calibration point for class " +
                                std::to_string(label));
  }
  if (!std::isfinite(nearest_other)) {
    throw std::invalid_argument("knn_ratio: no other-class calibration point");
  }
  if (nearest_other == 0.0) return std::numeric_limits<double>::infinity();
  return nearest_same / nearest_other;
}

// Cumulative sum of the values sorted descending, down to but excluding the
// label's value, plus u times the label's value.
inline double aps_score(std::span<const double> values, int label, double u) {
  detail::check_label(label, values.size());
  const auto s = detail::sort_descending(values);
  return detail::aps_from_sorted(s, values, label, u);
}

// APS plus the rank regularizer lambda * max(rank - k_reg, 0).
inline double raps_score(std::span<const double> values, int label, double lambda,
                         int k_reg, double u) {
  detail::check_label(label, values.size());
  if (lambda < 0.0) throw std::invalid_argument("raps: lambda must be non-negative");
  if (k_reg < 1) throw std::invalid_argument("raps: k_reg must be positive");
  const auto s = detail::sort_descending(values);
  return detail::raps_from_sorted(s, values, label, lambda, k_reg, u);
}

// Keeps only the highest value: u * max at rank 1, max + lambda*(rank-2+u)
// otherwise. Coincides with APS on every rank-1 example.
inline double saps_score(std::span<const double> values, int label, double lambda, double u) {
  detail::check_label(label, values.size());
  if (lambda < 0.0) throw std::invalid_argument("saps: lambda must be non-negative");
  const auto s = detail::sort_descending(values);
  return detail::saps_from_sorted(s, label, lambda, u);
}

// Distance travelled by gradient descent on h(v) = ||onehot(label) - g(v)||
// for a fixed number of steps, starting from the observed feature vector.
inline double gradient_score(std::span<const double> feature, int label,
                             const NetworkTail& tail, double lr, int steps) {
  detail::check_label(label, tail.output_dim());
  if (feature.size() != tail.input_dim()) {
    throw std::invalid_argument("gradient_score: feature dimension mismatch");
  }
  if (!(lr > 0.0)) throw std::invalid_argument("gradient_score: lr must be positive");
  if (steps < 0) throw std::invalid_argument("gradient_score: negative step count");

  std::vector<double> target(tail.output_dim(), 0.0);
  target[static_cast<std::size_t>(label)] = 1.0;
  std::vector<double> v(feature.begin(), feature.end());
  for (int step = 0; step < steps; ++step) {
    const LossGrad lg = tail_loss_grad(tail, v, target);
    if (lg.loss == 0.0) break;  // stationary: the gradient is zero from here on
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] -= lr * lg.grad[j];
      if (!std::isfinite(v[j])) {
        throw std::runtime_error("gradient_score: iterate diverged (non-finite); "
                                 "reduce the learning rate");
      }
    }
  }
  return euclidean(v, feature);
}

// First-order estimate of the distance to the zero set of h:
// h(v) / ||grad h(v)||. Exact whenever g is affine. A positive loss with a
// vanishing gradient is a flat direction and scores +inf.
inline double fast_gradient_score(std::span<const double> feature, int label,
                                  const NetworkTail& tail) {
  detail::check_label(label, tail.output_dim());
  if (feature.size() != tail.input_dim()) {
    throw std::invalid_argument("fast_gradient_score: feature dimension mismatch");
  }
  std::vector<double> target(tail.output_dim(), 0.0);
  target[static_cast<std::size_t>(label)] = 1.0;
  const LossGrad lg = tail_loss_grad(tail, feature, target);
  if (lg.loss == 0.0) return 0.0;
  double norm_sq = 0.0;
  for (const double g : lg.grad) norm_sq += g * g;
  if (norm_sq == 0.0) return std::numeric_limits<double>::infinity();
  return lg.loss / std::sqrt(norm_sq);
}

// Reference implementation of the threshold-search form of APS: walk a tau
// grid and return the smallest grid value at which the label enters the
// nested prediction set. Used as a test oracle for the closed form, under the
// convention that this u corresponds to 1-u of aps_score.
inline double aps_tau_naive(std::span<const double> values, int label, double u,
                            double grid_step) {
  detail::check_label(label, values.size());
  if (!(grid_step > 0.0)) throw std::invalid_argument("aps_tau_naive: grid_step must be positive");
  const auto s = detail::sort_descending(values);
  const int position = s.rank[label];  // 1-based position of the label
  const double own = values[label];
  const std::size_t n = values.size();
  for (std::size_t i = 0;; ++i) {
    const double tau = static_cast<double>(i) * grid_step;
    if (tau > 1.0) break;
    // smallest 1-based j' with cumulative sum >= tau
    int j_prime = static_cast<int>(n);
    for (std::size_t j = 1; j <= n; ++j) {
      if (s.prefix[j] >= tau) {
        j_prime = static_cast<int>(j);
        break;
      }
    }
    const double v_stat = (s.prefix[position] - tau) / own;
    const bool in_set = (u <= v_stat) ? (position <= j_prime - 1) : (position <= j_prime);
    if (in_set) return tau;
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Unified dispatch used by calibration and prediction.

// Scores one (point, candidate label) pair. example_index feeds the random u
// stream; exclude_index >= 0 marks the calibration row being scored so that
// context-based scores can leave it out.
inline double score_point(const ScoreConfig& config, const ScoreContext& ctx,
                          std::span<const double> point, int label,
                          std::int64_t example_index, std::int64_t exclude_index = -1) {
  detail::check_label(label, static_cast<std::size_t>(ctx.n_classes));
  switch (config.kind) {
    case ScoreKind::label_distance:
      return label_distance_score(point, label, config.metric);
    case ScoreKind::margin_distance:
      return margin_distance_score(point, label, config.metric);
    case ScoreKind::mean_distance:
      return mean_distance_score(point, label, config.metric, ctx, exclude_index >= 0);
    case ScoreKind::knn_ratio:
      return knn_ratio_score(point, label, config.metric, ctx, exclude_index);
    case ScoreKind::aps:
      return aps_score(point, label, resolve_u(config.u_mode, example_index, label));
    case ScoreKind::raps:
      return raps_score(point, label, config.lambda, config.k_reg,
                        resolve_u(config.u_mode, example_index, label));
    case ScoreKind::saps:
      return saps_score(point, label, config.lambda,
                        resolve_u(config.u_mode, example_index, label));
    case ScoreKind::gradient:
      return gradient_score(point, label, *ctx.tail, config.lr, config.steps);
    default:
      return fast_gradient_score(point, label, *ctx.tail);
  }
}

// Scores every candidate class of one point. Shares work across classes: one
// sort for the APS family, one scan over the calibration set for knn_ratio.
inline std::vector<double> score_all_classes(const ScoreConfig& config,
                                             const ScoreContext& ctx,
                                             std::span<const double> point,
                                             std::int64_t example_index) {
  const int c = ctx.n_classes;
  std::vector<double> scores(static_cast<std::size_t>(c));
  switch (config.kind) {
    case ScoreKind::aps:
    case ScoreKind::raps:
    case ScoreKind::saps: {
      const auto s = detail::sort_descending(point);
      for (int y = 0; y < c; ++y) {
        const double u = resolve_u(config.u_mode, example_index, y);
        if (config.kind == ScoreKind::aps) {
          scores[y] = detail::aps_from_sorted(s, point, y, u);
        } else if (config.kind == ScoreKind::raps) {
          scores[y] = detail::raps_from_sorted(s, point, y, config.lambda, config.k_reg, u);
        } else {
          scores[y] = detail::saps_from_sorted(s, y, config.lambda, u);
        }
      }
      return scores;
    }
    case ScoreKind::knn_ratio: {
      if (!ctx.calibration) throw std::invalid_argument("knn_ratio: missing calibration context");
      const Dataset& calib = *ctx.calibration;
      if (point.size() != calib.cols) {
        throw std::invalid_argument("knn_ratio: dimension mismatch");
      }
      std::vector<double> nearest(static_cast<std::size_t>(c),
                                  std::numeric_limits<double>::infinity());
      for (std::size_t i = 0; i < calib.rows; ++i) {
        const double d = distance(config.metric, point, calib.row(i));
        double& slot = nearest[static_cast<std::size_t>(calib.labels[i])];
        slot = std::min(slot, d);
      }
      // best and second-best over classes, to answer "nearest other class"
      int best_class = -1;
      double best = std::numeric_limits<double>::infinity();
      double second = std::numeric_limits<double>::infinity();
      for (int y = 0; y < c; ++y) {
        if (nearest[y] < best) {
          second = best;
          best = nearest[y];
          best_class = y;
        } else if (nearest[y] < second) {
          second = nearest[y];
        }
      }
      for (int y = 0; y < c; ++y) {
        if (!std::isfinite(nearest[y])) {
          throw std::invalid_argument(
              "knn_ratio: no same-class calibration point for class " + std::to_string(y));
        }
        const double other = (y == best_class) ? second : best;
        if (!std::isfinite(other)) {
          throw std::invalid_argument("knn_ratio: no other-class calibration point");
        }
        scores[y] = other == 0.0 ? std::numeric_limits<double>::infinity()
                                 : nearest[y] / other;
      }
      return scores;
    }
    default:
      for (int y = 0; y < c; ++y) {
        scores[y] = score_point(config, ctx, point, y, example_index, -1);
      }
      return scores;
  }
}

}  // namespace cplab
