#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cplab/calibration.hpp"
#include "cplab/dataset.hpp"
#include "cplab/io.hpp"
#include "cplab/parallel.hpp"
#include "cplab/prediction.hpp"
#include "cplab/scores.hpp"

namespace cplab {

// Fraction of rows whose true class lies in its prediction set.
inline double coverage(const std::vector<PredictionSet>& sets,
                       const std::vector<int>& labels) {
  if (sets.empty()) throw std::invalid_argument("coverage: empty input");
  if (sets.size() != labels.size()) {
    throw std::invalid_argument("coverage: " + std::to_string(sets.size()) +
                                " sets vs " + std::to_string(labels.size()) + " labels");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].contains(labels[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(sets.size());
}

// Arithmetic mean of set cardinalities; empty sets count zero.
inline double mean_set_size(const std::vector<PredictionSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("mean_set_size: empty input");
  double sum = 0.0;
  for (const auto& s : sets) sum += static_cast<double>(s.size());
  return sum / static_cast<double>(sets.size());
}

// Fraction of rows whose label is among the k largest values (descending,
// ties broken by lower index). Needs rank semantics, so feature data is
// rejected.
inline double top_k_accuracy(const Dataset& ds, int k) {
  if (ds.domain == DomainTag::feature) {
    throw std::invalid_argument("top_k_accuracy: feature data carries no rank notion");
  }
  if (k < 1 || k > ds.n_classes) {
    throw std::invalid_argument("top_k_accuracy: k=" + std::to_string(k) +
                                " out of range [1," + std::to_string(ds.n_classes) + "]");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.rows; ++i) {
    if (descending_rank(ds.row(i), ds.labels[i]) <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.rows);
}

inline double trapezoid(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("trapezoid: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("trapezoid: need at least two points");
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    acc += (xs[i + 1] - xs[i]) * 0.5 * (ys[i] + ys[i + 1]);
  }
  return acc;
}

// For feature-domain configurations the rank-bearing model outputs are the
// tail outputs; otherwise the data itself carries the ranks.
inline Dataset rank_outputs(const Dataset& ds, const NetworkTail* tail) {
  if (ds.domain != DomainTag::feature) return ds;
  if (tail == nullptr) {
    throw std::invalid_argument("rank_outputs: feature data needs a network tail");
  }
  std::vector<double> values(ds.rows * tail->output_dim());
  for (std::size_t i = 0; i < ds.rows; ++i) {
    const auto out = tail_forward(*tail, ds.row(i));
    std::copy(out.begin(), out.end(), values.begin() + i * tail->output_dim());
  }
  const DomainTag out_domain = tail->layers.back().activation == Activation::softmax
                                   ? DomainTag::probability
                                   : DomainTag::logit;
  return make_dataset(std::move(values), ds.rows, tail->output_dim(), ds.labels,
                      ds.n_classes, out_domain);
}

struct SetSizeCurve {
  std::vector<double> alphas;
  std::vector<double> mean_sizes;
};

struct IkResult {
  double i_k = 0.0;
  double a_k = 0.0;  // top-k accuracy that bounds the integration interval
  SetSizeCurve curve;
};

namespace detail {

inline double threshold_from_sorted(const std::vector<double>& sorted, double alpha) {
  const long k = quantile_rank(sorted.size(), alpha);
  if (k > static_cast<long>(sorted.size())) {
    return std::numeric_limits<double>::infinity();
  }
  return sorted[static_cast<std::size_t>(k - 1)];
}

}  // namespace detail

// Mean prediction set size integrated over alpha in [0.001, 1 - A_k],
// normalized by (1 - A_k). Scores do not depend on alpha, so one scoring pass
// over calibration and test is shared by the whole grid; only the threshold
// changes per grid point. The lower clip at 0.001 exists because alpha = 0
// forces an infinite threshold for any finite calibration set.
inline IkResult compute_i_k(const Dataset& calib, const Dataset& test,
                            const ScoreConfig& config, CalibrationMode mode, int k,
                            int grid_points = 50,
                            std::shared_ptr<const NetworkTail> tail = nullptr) {
  if (grid_points < 2) {
    throw std::invalid_argument("compute_i_k: grid needs at least two points");
  }
  config.validate(tail != nullptr);
  if (calib.domain != config.domain || test.domain != config.domain) {
    throw std::invalid_argument("compute_i_k: dataset domain does not match score domain");
  }
  const Dataset outputs = rank_outputs(test, tail.get());
  const double a_k = top_k_accuracy(outputs, k);
  if (a_k >= 1.0) {
    throw std::invalid_argument("compute_i_k: top-" + std::to_string(k) +
                                " accuracy is 1; the alpha interval is empty");
  }
  const double alpha_lo = 0.001;
  const double alpha_hi = 1.0 - a_k;
  if (alpha_hi <= alpha_lo) {
    throw std::invalid_argument("compute_i_k: alpha interval is empty after the 0.001 clip");
  }

  ScoreContext ctx = build_context(config, calib, tail);
  const std::vector<double> calib_scores = calibration_scores(calib, config, ctx);

  std::vector<std::vector<double>> sorted_scores;
  if (mode == CalibrationMode::marginal) {
    sorted_scores.emplace_back(calib_scores);
    std::sort(sorted_scores[0].begin(), sorted_scores[0].end());
  } else {
    sorted_scores.resize(static_cast<std::size_t>(calib.n_classes));
    for (std::size_t i = 0; i < calib.rows; ++i) {
      sorted_scores[static_cast<std::size_t>(calib.labels[i])].push_back(calib_scores[i]);
    }
    for (auto& v : sorted_scores) {
      if (v.empty()) {
        throw std::invalid_argument("compute_i_k: mondrian mode but a class is absent "
                                    "from the calibration set");
      }
      std::sort(v.begin(), v.end());
    }
  }

  const std::size_t n_test = test.rows;
  const std::size_t c = static_cast<std::size_t>(test.n_classes);
  std::vector<double> all_scores(n_test * c);
  parallel_for(n_test, [&](std::size_t i) {
    const auto s = score_all_classes(config, ctx, test.row(i),
                                     static_cast<std::int64_t>(i));
    std::copy(s.begin(), s.end(), all_scores.begin() + i * c);
  });

  IkResult result;
  result.a_k = a_k;
  result.curve.alphas.resize(static_cast<std::size_t>(grid_points));
  result.curve.mean_sizes.resize(static_cast<std::size_t>(grid_points));
  const double step = (alpha_hi - alpha_lo) / static_cast<double>(grid_points - 1);
  std::vector<double> thresholds(sorted_scores.size());
  for (int g = 0; g < grid_points; ++g) {
    const double alpha =
        g + 1 == grid_points ? alpha_hi : alpha_lo + step * static_cast<double>(g);
    for (std::size_t s = 0; s < sorted_scores.size(); ++s) {
      thresholds[s] = detail::threshold_from_sorted(sorted_scores[s], alpha);
    }
    double size_sum = 0.0;
    for (std::size_t i = 0; i < n_test; ++i) {
      const double* row = all_scores.data() + i * c;
      std::size_t members = 0;
      for (std::size_t y = 0; y < c; ++y) {
        const double tau = mode == CalibrationMode::marginal ? thresholds[0] : thresholds[y];
        if (row[y] <= tau) ++members;
      }
      size_sum += static_cast<double>(members);
    }
    result.curve.alphas[static_cast<std::size_t>(g)] = alpha;
    result.curve.mean_sizes[static_cast<std::size_t>(g)] =
        size_sum / static_cast<double>(n_test);
  }
  result.i_k = trapezoid(result.curve.alphas, result.curve.mean_sizes) / (1.0 - a_k);
  return result;
}

struct Prevalence {
  std::map<int, double> observed;  // fraction of sets containing the class
  std::map<int, double> expected;  // fraction of test labels equal to the class
};

inline Prevalence minority_prevalence(const std::vector<PredictionSet>& sets,
                                      const std::set<int>& minority_classes,
                                      const std::vector<int>& test_labels) {
  if (sets.empty()) throw std::invalid_argument("minority_prevalence: empty input");
  if (sets.size() != test_labels.size()) {
    throw std::invalid_argument("minority_prevalence: sets/labels length mismatch");
  }
  Prevalence p;
  for (const int c : minority_classes) {
    std::size_t in_sets = 0, in_labels = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      if (sets[i].contains(c)) ++in_sets;
      if (test_labels[i] == c) ++in_labels;
    }
    p.observed[c] = static_cast<double>(in_sets) / static_cast<double>(sets.size());
    p.expected[c] = static_cast<double>(in_labels) / static_cast<double>(sets.size());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Monte-Carlo check of the coverage distribution. Once the calibration split
// is fixed, the underlying coverage probability of a split conformal
// predictor is Beta(a, b) with a = n+1-floor((n+1)*alpha), b =
// floor((n+1)*alpha); resampling the calibration/test partition of one pool
// and measuring test coverage estimates its moments.

struct BetaCheck {
  long a = 0;
  long b = 0;
  double empirical_mean = 0.0;
  double empirical_variance = 0.0;  // unbiased sample variance over trials
  long trials = 0;

  double beta_mean() const {
    return static_cast<double>(a) / static_cast<double>(a + b);
  }
  double beta_variance() const {
    const double da = static_cast<double>(a), db = static_cast<double>(b);
    const double s = da + db;
    return da * db / (s * s * (s + 1.0));
  }
};

namespace detail {

constexpr std::uint64_t kPoolStream = 0x706f6f6c00000001ull;

inline long beta_b_param(std::size_t n_calib, double alpha) {
  return static_cast<long>(std::floor(static_cast<double>(n_calib + 1) * alpha));
}

// Returns the dataset adapted to the score's domain plus the tail to use.
inline std::pair<Dataset, std::shared_ptr<const NetworkTail>> adapt_domain(
    Dataset logits, const ScoreConfig& config,
    std::shared_ptr<const NetworkTail> tail) {
  switch (config.domain) {
    case DomainTag::probability:
      return {to_probability(logits), std::move(tail)};
    case DomainTag::logit:
      return {std::move(logits), std::move(tail)};
    default: {
      if (!tail) {
        tail = std::make_shared<NetworkTail>(
            softmax_tail(static_cast<std::size_t>(logits.n_classes)));
      }
      return {retag_as_feature(logits), std::move(tail)};
    }
  }
}

}  // namespace detail

// Shares one synthetic pool and one scoring pass per trial across several
// alpha values (scores do not depend on alpha). Trials run in parallel; each
// derives its split seed from the check seed and the trial index.
inline std::vector<BetaCheck> beta_coverage_check_multi(
    const SyntheticSpec& generator, const ScoreConfig& config, std::size_t n_calib,
    std::span<const double> alphas, int trials, std::size_t test_size,
    std::uint64_t seed, std::shared_ptr<const NetworkTail> tail = nullptr) {
  if (trials < 100) {
    throw std::invalid_argument("beta_coverage_check: need at least 100 trials");
  }
  if (n_calib == 0 || test_size == 0) {
    throw std::invalid_argument("beta_coverage_check: empty calibration or test part");
  }
  for (const double alpha : alphas) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw std::invalid_argument("beta_coverage_check: alpha must lie in (0,1)");
    }
    if (detail::beta_b_param(n_calib, alpha) < 1) {
      throw std::invalid_argument(
          "beta_coverage_check: floor((n+1)*alpha) = 0; alpha too small for n_calib " +
          std::to_string(n_calib) + " (degenerate beta)");
    }
  }
  SyntheticSpec pool_spec = generator;
  pool_spec.n = n_calib + test_size;
  pool_spec.seed = derive_seed(seed, detail::kPoolStream);
  auto [pool, used_tail] = detail::adapt_domain(generate_synthetic(pool_spec), config, tail);
  config.validate(used_tail != nullptr);
  if (is_gradient_kind(config.kind)) validate_tail(*used_tail);

  const double frac = static_cast<double>(n_calib) / static_cast<double>(pool.rows);
  std::vector<std::vector<double>> coverages(alphas.size(),
                                             std::vector<double>(static_cast<std::size_t>(trials)));
  parallel_for(static_cast<std::size_t>(trials), [&](std::size_t t) {
    auto [calib, test] = split(pool, SplitSpec{frac, derive_seed(seed, t)});
    const ScoreContext ctx = build_context(config, calib, used_tail);
    std::vector<double> calib_scores(calib.rows);
    for (std::size_t i = 0; i < calib.rows; ++i) {
      calib_scores[i] = score_point(config, ctx, calib.row(i), calib.labels[i],
                                    static_cast<std::int64_t>(i),
                                    static_cast<std::int64_t>(i));
    }
    std::vector<double> test_scores(test.rows);
    for (std::size_t i = 0; i < test.rows; ++i) {
      test_scores[i] = score_point(config, ctx, test.row(i), test.labels[i],
                                   static_cast<std::int64_t>(i), -1);
    }
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
      const double tau = finite_sample_quantile(calib_scores, alphas[ai]);
      std::size_t hits = 0;
      for (const double s : test_scores) {
        if (s <= tau) ++hits;
      }
      coverages[ai][t] = static_cast<double>(hits) / static_cast<double>(test.rows);
    }
  });

  std::vector<BetaCheck> checks(alphas.size());
  for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
    BetaCheck& chk = checks[ai];
    chk.b = detail::beta_b_param(n_calib, alphas[ai]);
    chk.a = static_cast<long>(n_calib) + 1 - chk.b;
    chk.trials = trials;
    double mean = 0.0;
    for (const double c : coverages[ai]) mean += c;
    mean /= static_cast<double>(trials);
    double var = 0.0;
    for (const double c : coverages[ai]) var += (c - mean) * (c - mean);
    var /= static_cast<double>(trials - 1);
    chk.empirical_mean = mean;
    chk.empirical_variance = var;
  }
  return checks;
}

inline BetaCheck beta_coverage_check(const SyntheticSpec& generator,
                                     const ScoreConfig& config, std::size_t n_calib,
                                     double alpha, int trials, std::size_t test_size,
                                     std::uint64_t seed,
                                     std::shared_ptr<const NetworkTail> tail = nullptr) {
  const double alphas[1] = {alpha};
  return beta_coverage_check_multi(generator, config, n_calib, alphas, trials,
                                   test_size, seed, std::move(tail))[0];
}

// ---------------------------------------------------------------------------
// Single-run evaluation and the sweep over calibration/test randomizations.

struct EvalReport {
  double alpha = 0.0;
  CalibrationMode mode = CalibrationMode::marginal;
  double coverage_value = 0.0;
  double mean_size = 0.0;
  double i_k = 0.0;
  int k = 1;
  std::map<int, double> top_k;                // k -> accuracy
  std::vector<double> observed_prevalence;    // per class
  std::vector<double> expected_prevalence;    // per class
  SetSizeCurve curve;                         // per-repetition; empty in the median report
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t repetition = 0;
  std::string config_digest;
  std::size_t n_calib = 0;
  std::size_t n_test = 0;
  int n_classes = 0;
  ScoreKind kind = ScoreKind::aps;
  Metric metric = Metric::euclidean;
};

struct EvalPlan {
  Dataset pool;  // domain-adapted, imbalance already applied
  SplitSpec split_spec;
  ScoreConfig score;
  CalibrationMode mode = CalibrationMode::marginal;
  double alpha = 0.1;
  int k = 1;
  int grid_points = 50;
  std::shared_ptr<const NetworkTail> tail;
  std::uint64_t seed = 0;
  std::string config_digest;
};

// One repetition: split, calibrate, predict, measure. Repetition r reseeds
// the split with seed XOR r, so r = 0 reproduces the plain evaluation.
inline EvalReport evaluate_plan(const EvalPlan& plan, std::uint64_t repetition = 0) {
  const std::uint64_t split_seed = derive_seed(plan.split_spec.seed, repetition);
  auto [calib, test] = split(plan.pool, SplitSpec{plan.split_spec.calib_fraction, split_seed});
  const CalibratedPredictor pred =
      calibrate(calib, plan.score, plan.mode, plan.alpha, plan.tail);
  const std::vector<PredictionSet> sets = predict_batch(test, pred);

  EvalReport r;
  r.alpha = plan.alpha;
  r.mode = plan.mode;
  r.coverage_value = coverage(sets, test.labels);
  r.mean_size = mean_set_size(sets);
  r.k = plan.k;

  const Dataset outputs = rank_outputs(test, plan.tail.get());
  std::set<int> ks = {1, plan.k};
  if (test.n_classes >= 5) ks.insert(5);
  for (const int kk : ks) {
    if (kk >= 1 && kk <= test.n_classes) r.top_k[kk] = top_k_accuracy(outputs, kk);
  }

  std::set<int> all_classes;
  for (int c = 0; c < test.n_classes; ++c) all_classes.insert(c);
  const Prevalence prev = minority_prevalence(sets, all_classes, test.labels);
  r.observed_prevalence.resize(static_cast<std::size_t>(test.n_classes));
  r.expected_prevalence.resize(static_cast<std::size_t>(test.n_classes));
  for (int c = 0; c < test.n_classes; ++c) {
    r.observed_prevalence[static_cast<std::size_t>(c)] = prev.observed.at(c);
    r.expected_prevalence[static_cast<std::size_t>(c)] = prev.expected.at(c);
  }

  const IkResult ik = compute_i_k(calib, test, plan.score, plan.mode, plan.k,
                                  plan.grid_points, plan.tail);
  r.i_k = ik.i_k;
  r.curve = ik.curve;

  r.seed = plan.seed;
  r.split_seed = split_seed;
  r.repetition = repetition;
  r.config_digest = plan.config_digest;
  r.n_calib = calib.rows;
  r.n_test = test.rows;
  r.n_classes = test.n_classes;
  r.kind = plan.score.kind;
  r.metric = plan.score.metric;
  return r;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SweepResult {
  EvalReport median;                // scalar metrics summarized component-wise
  std::vector<EvalReport> reports;  // one per repetition, with curves
};

// The elementary protocol: the same calibration/test randomization is reused
// for every alpha within a repetition (the scoring pass is shared), and the
// whole evaluation is repeated over independently reseeded randomizations.
// Scalar metrics are summarized by the component-wise median; curves stay
// per-repetition.
inline SweepResult sweep(const EvalPlan& plan, int repetitions) {
  if (repetitions < 1) throw std::invalid_argument("sweep: repetitions must be >= 1");
  SweepResult result;
  result.reports.reserve(static_cast<std::size_t>(repetitions));
  for (int rep = 0; rep < repetitions; ++rep) {
    try {
      result.reports.push_back(evaluate_plan(plan, static_cast<std::uint64_t>(rep)));
    } catch (const std::exception& e) {
      throw std::runtime_error(
          "sweep: repetition " + std::to_string(rep) + " (split seed " +
          std::to_string(derive_seed(plan.split_spec.seed, static_cast<std::uint64_t>(rep))) +
          ") failed: " + e.what());
    }
  }

  EvalReport median = result.reports.front();
  median.curve = SetSizeCurve{};
  median.repetition = static_cast<std::uint64_t>(repetitions);
  const auto collect = [&](auto getter) {
    std::vector<double> v;
    v.reserve(result.reports.size());
    for (const auto& rep : result.reports) v.push_back(getter(rep));
    return median_of(std::move(v));
  };
  median.coverage_value = collect([](const EvalReport& r) { return r.coverage_value; });
  median.mean_size = collect([](const EvalReport& r) { return r.mean_size; });
  median.i_k = collect([](const EvalReport& r) { return r.i_k; });
  for (auto& [kk, acc] : median.top_k) {
    acc = collect([kk = kk](const EvalReport& r) { return r.top_k.at(kk); });
  }
  for (std::size_t c = 0; c < median.observed_prevalence.size(); ++c) {
    median.observed_prevalence[c] =
        collect([c](const EvalReport& r) { return r.observed_prevalence[c]; });
    median.expected_prevalence[c] =
        collect([c](const EvalReport& r) { return r.expected_prevalence[c]; });
  }
  result.median = std::move(median);
  return result;
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["alpha"] = r.alpha;
  j["mode"] = mode_name(r.mode);
  j["coverage"] = r.coverage_value;
  j["mean_set_size"] = r.mean_size;
  j["i_k"] = r.i_k;
  j["k"] = r.k;
  nlohmann::json top = nlohmann::json::object();
  for (const auto& [kk, acc] : r.top_k) top[std::to_string(kk)] = acc;
  j["top_k_accuracy"] = top;
  j["per_class_prevalence"] = r.observed_prevalence;
  j["expected_prevalence"] = r.expected_prevalence;
  if (!r.curve.alphas.empty()) {
    j["alpha_grid"] = r.curve.alphas;
    j["set_size_curve"] = r.curve.mean_sizes;
  }
  j["metadata"] = {{"seed", r.seed},
                   {"split_seed", r.split_seed},
                   {"repetition", r.repetition},
                   {"config_digest", r.config_digest},
                   {"n_calib", r.n_calib},
                   {"n_test", r.n_test},
                   {"n_classes", r.n_classes},
                   {"score_kind", score_kind_name(r.kind)},
                   {"metric", metric_name(r.metric)}};
  return j;
}

inline nlohmann::json beta_check_to_json(const BetaCheck& c) {
  return {{"a", c.a},
          {"b", c.b},
          {"beta_mean", c.beta_mean()},
          {"beta_variance", c.beta_variance()},
          {"empirical_mean", c.empirical_mean},
          {"empirical_variance", c.empirical_variance},
          {"trials", c.trials}};
}

inline void save_report(const EvalReport& r, const std::string& path) {
  write_file_atomic(path, report_to_json(r).dump(2) + "\n");
}

inline void save_curve_csv(const SetSizeCurve& curve, const std::string& path) {
  std::string out = "alpha,mean_set_size\n";
  for (std::size_t i = 0; i < curve.alphas.size(); ++i) {
    out += cplab::detail::format_double(curve.alphas[i]);
    out += ',';
    out += cplab::detail::format_double(curve.mean_sizes[i]);
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline void save_sweep(const SweepResult& result, const std::string& path) {
  nlohmann::json j;
  j["median"] = report_to_json(result.median);
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : result.reports) reps.push_back(report_to_json(r));
  j["repetitions"] = reps;
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace cplab
