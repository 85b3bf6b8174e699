#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cplab/rng.hpp"

namespace cplab {

// The space a row of model outputs lives in. Probability rows lie on the
// simplex, logit rows are pre-softmax outputs (one dimension per class), and
// feature rows may have any dimensionality.
enum class DomainTag { probability, logit, feature };

inline const char* domain_name(DomainTag d) {
  switch (d) {
    case DomainTag::probability: return "probability";
    case DomainTag::logit: return "logit";
    default: return "feature";
  }
}

inline DomainTag parse_domain(const std::string& s) {
  if (s == "probability") return DomainTag::probability;
  if (s == "logit") return DomainTag::logit;
  if (s == "feature") return DomainTag::feature;
  throw std::invalid_argument("unknown domain: " + s);
}

// Ingestion tolerance for probability rows; rows further from sum 1 than this
// are rejected, rows within it are rescaled.
constexpr double kProbabilitySumTolerance = 1e-6;

struct Dataset {
  std::vector<double> values;  // row-major, rows x cols
  std::vector<int> labels;     // class index per row
  std::size_t rows = 0;
  std::size_t cols = 0;
  int n_classes = 0;
  DomainTag domain = DomainTag::probability;

  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * cols, cols};
  }
};

// Validates invariants and returns the dataset. Probability rows that sum to
// 1 within the ingestion tolerance are rescaled unless they are already exact
// to ~1e-12 (so that save/load round-trips do not perturb values).
inline Dataset make_dataset(std::vector<double> values, std::size_t rows,
                            std::size_t cols, std::vector<int> labels,
                            int n_classes, DomainTag domain) {
  if (rows == 0) throw std::invalid_argument("dataset: must contain at least one row");
  if (cols == 0) throw std::invalid_argument("dataset: zero columns");
  if (values.size() != rows * cols) {
    throw std::invalid_argument("dataset: value buffer size " +
                                std::to_string(values.size()) +
                                " does not match " + std::to_string(rows) +
                                "x" + std::to_string(cols));
  }
  if (labels.size() != rows) {
    throw std::invalid_argument("dataset: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(rows) + " rows");
  }
  if (n_classes < 1) throw std::invalid_argument("dataset: n_classes must be positive");
  if ((domain == DomainTag::probability || domain == DomainTag::logit) &&
      cols != static_cast<std::size_t>(n_classes)) {
    throw std::invalid_argument(
        "dataset: " + std::string(domain_name(domain)) + " data must have " +
        std::to_string(n_classes) + " columns, found " + std::to_string(cols));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) {
      throw std::invalid_argument("dataset: row " + std::to_string(i) +
                                  ": label " + std::to_string(labels[i]) +
                                  " out of range [0," + std::to_string(n_classes) + ")");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = values[i * cols + j];
      if (!std::isfinite(x)) {
        throw std::invalid_argument("dataset: row " + std::to_string(i) +
                                    ", column " + std::to_string(j) +
                                    ": non-finite value");
      }
      if (domain == DomainTag::probability && x < 0.0) {
        throw std::invalid_argument("dataset: row " + std::to_string(i) +
                                    ", column " + std::to_string(j) +
                                    ": negative probability");
      }
      sum += x;
    }
    if (domain == DomainTag::probability) {
      if (std::abs(sum - 1.0) > kProbabilitySumTolerance) {
        throw std::invalid_argument("dataset: row " + std::to_string(i) +
                                    ": probability row sums to " +
                                    std::to_string(sum) + ", outside tolerance");
      }
      if (std::abs(sum - 1.0) > 1e-12) {
        for (std::size_t j = 0; j < cols; ++j) values[i * cols + j] /= sum;
      }
    }
  }
  Dataset ds;
  ds.values = std::move(values);
  ds.labels = std::move(labels);
  ds.rows = rows;
  ds.cols = cols;
  ds.n_classes = n_classes;
  ds.domain = domain;
  return ds;
}

// Numerically stable softmax. Preserves the ordering of its input.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  double top = logits[0];
  for (const double x : logits) {
    if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite input");
    top = std::max(top, x);
  }
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

// Applies softmax row-wise, mapping a logit dataset onto the simplex.
inline Dataset to_probability(const Dataset& ds) {
  if (ds.domain != DomainTag::logit) {
    throw std::invalid_argument("to_probability: input must be logit-domain");
  }
  std::vector<double> values(ds.values.size());
  for (std::size_t i = 0; i < ds.rows; ++i) {
    const auto p = softmax(ds.row(i));
    std::copy(p.begin(), p.end(), values.begin() + i * ds.cols);
  }
  return make_dataset(std::move(values), ds.rows, ds.cols, ds.labels,
                      ds.n_classes, DomainTag::probability);
}

// Re-tags logit rows as generic feature vectors (same values).
inline Dataset retag_as_feature(const Dataset& ds) {
  Dataset out = ds;
  out.domain = DomainTag::feature;
  return out;
}

struct SplitSpec {
  double calib_fraction = 0.5;
  std::uint64_t seed = 0;
};

// Deterministic disjoint partition into (calibration, test).
inline std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitSpec& spec) {
  if (!(spec.calib_fraction > 0.0 && spec.calib_fraction < 1.0)) {
    throw std::invalid_argument("split: calib_fraction must lie in (0,1)");
  }
  const auto n_calib = static_cast<std::size_t>(
      std::llround(static_cast<double>(ds.rows) * spec.calib_fraction));
  if (n_calib == 0 || n_calib >= ds.rows) {
    throw std::invalid_argument("split: fraction " +
                                std::to_string(spec.calib_fraction) +
                                " leaves an empty part for " +
                                std::to_string(ds.rows) + " rows");
  }
  std::vector<std::size_t> perm(ds.rows);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(spec.seed);
  rng.shuffle(perm);

  const auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<double> values;
    values.reserve((end - begin) * ds.cols);
    std::vector<int> labels;
    labels.reserve(end - begin);
    for (std::size_t k = begin; k < end; ++k) {
      const auto r = ds.row(perm[k]);
      values.insert(values.end(), r.begin(), r.end());
      labels.push_back(ds.labels[perm[k]]);
    }
    return make_dataset(std::move(values), end - begin, ds.cols,
                        std::move(labels), ds.n_classes, ds.domain);
  };
  return {take(0, n_calib), take(n_calib, ds.rows)};
}

// Downsamples the listed classes to round(keep_fraction * count) rows each,
// chosen at random; all other rows are untouched and row order is preserved.
inline Dataset make_imbalanced(const Dataset& ds,
                               const std::set<int>& minority_classes,
                               double keep_fraction, std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw std::invalid_argument("make_imbalanced: keep_fraction must lie in (0,1]");
  }
  for (const int c : minority_classes) {
    if (c < 0 || c >= ds.n_classes) {
      throw std::invalid_argument("make_imbalanced: class " + std::to_string(c) +
                                  " out of range [0," +
                                  std::to_string(ds.n_classes) + ")");
    }
  }
  std::vector<char> keep(ds.rows, 1);
  Rng rng(seed);
  for (const int c : minority_classes) {  // std::set iterates in ascending order
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.rows; ++i) {
      if (ds.labels[i] == c) members.push_back(i);
    }
    const auto kept = static_cast<std::size_t>(
        std::llround(keep_fraction * static_cast<double>(members.size())));
    if (kept == 0) {
      throw std::invalid_argument("make_imbalanced: class " + std::to_string(c) +
                                  " would be reduced to zero rows");
    }
    if (kept >= members.size()) continue;
    rng.shuffle(members);
    for (std::size_t k = kept; k < members.size(); ++k) keep[members[k]] = 0;
  }
  std::vector<double> values;
  std::vector<int> labels;
  for (std::size_t i = 0; i < ds.rows; ++i) {
    if (!keep[i]) continue;
    const auto r = ds.row(i);
    values.insert(values.end(), r.begin(), r.end());
    labels.push_back(ds.labels[i]);
  }
  const std::size_t rows = labels.size();
  return make_dataset(std::move(values), rows, ds.cols, std::move(labels),
                      ds.n_classes, ds.domain);
}

struct SyntheticSpec {
  std::size_t n = 0;
  int n_classes = 0;
  double accuracy_target = 0.9;
  double noise_temperature = 1.0;
  std::uint64_t seed = 0;
};

// Synthetic classifier outputs in logit space: a uniformly drawn true label,
// Gaussian noise scaled by the temperature, and a signal added to the true
// class. The signal strength is found by bisection against unit-scale noise
// so the realized top-1 accuracy of the sample matches the target at
// noise_temperature 1; the relation between signal and accuracy is monotone,
// which makes the bisection valid. Temperatures below 1 shrink only the
// noise, so the noiseless limit saturates to perfect accuracy.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes < 2) {
    throw std::invalid_argument("generate_synthetic: need at least two classes");
  }
  if (spec.n < static_cast<std::size_t>(spec.n_classes)) {
    throw std::invalid_argument("generate_synthetic: n must be at least n_classes");
  }
  const double chance = 1.0 / spec.n_classes;
  if (!(spec.accuracy_target > chance && spec.accuracy_target < 1.0)) {
    throw std::invalid_argument(
        "generate_synthetic: accuracy_target must lie in (1/n_classes, 1)");
  }
  if (!(spec.noise_temperature > 0.0)) {
    throw std::invalid_argument("generate_synthetic: noise_temperature must be positive");
  }

  const std::size_t n = spec.n;
  const int c = spec.n_classes;
  Rng rng(spec.seed);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(c)));
  }
  std::vector<double> noise(n * static_cast<std::size_t>(c));
  for (double& x : noise) x = rng.normal();

  // Per row: unit-scale noise at the true class, and the best competing noise
  // value with its index (first maximum wins, matching the top-1 convention).
  std::vector<double> own(n), best_other(n);
  std::vector<int> best_other_idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = noise.data() + i * c;
    own[i] = r[labels[i]];
    double m = -std::numeric_limits<double>::infinity();
    int mi = -1;
    for (int j = 0; j < c; ++j) {
      if (j == labels[i]) continue;
      if (r[j] > m) {
        m = r[j];
        mi = j;
      }
    }
    best_other[i] = m;
    best_other_idx[i] = mi;
  }
  const auto realized = [&](double signal) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = own[i] + signal;
      if (v > best_other[i] || (v == best_other[i] && labels[i] < best_other_idx[i])) {
        ++hits;
      }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
  };

  double lo = 0.0, hi = 1.0;
  double signal = 0.0;
  if (realized(lo) < spec.accuracy_target) {
    int growth = 0;
    while (realized(hi) < spec.accuracy_target && growth++ < 128) hi *= 2.0;
    for (int it = 0; it < 96; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (realized(mid) >= spec.accuracy_target) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    signal = hi;
  }

  std::vector<double> values(std::move(noise));
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) values[i * c + j] *= spec.noise_temperature;
    values[i * c + labels[i]] += signal;
  }
  return make_dataset(std::move(values), n, static_cast<std::size_t>(c),
                      std::move(labels), c, DomainTag::logit);
}

}  // namespace cplab
