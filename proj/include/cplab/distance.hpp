#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

namespace cplab {

enum class Metric { euclidean, cosine };

inline const char* metric_name(Metric m) {
  return m == Metric::euclidean ? "euclidean" : "cosine";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw std::invalid_argument("unknown metric: " + s);
}

namespace detail {
inline void check_same_dim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("distance: dimension mismatch (" +
                                std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()) + ")");
  }
}
}  // namespace detail

inline double euclidean(std::span<const double> u, std::span<const double> v) {
  detail::check_same_dim(u, v);
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - v[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// One minus cosine similarity, in [0, 2]. A zero-norm vector has no defined
// angle and is rejected; it cannot occur on the probability simplex.
inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  detail::check_same_dim(u, v);
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) {
    throw std::invalid_argument("cosine_distance: zero-norm vector");
  }
  return 1.0 - dot / (std::sqrt(nu) * std::sqrt(nv));
}

inline double distance(Metric m, std::span<const double> u, std::span<const double> v) {
  return m == Metric::euclidean ? euclidean(u, v) : cosine_distance(u, v);
}

}  // namespace cplab
