#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cplab/calibration.hpp"
#include "cplab/dataset.hpp"
#include "cplab/io.hpp"
#include "cplab/parallel.hpp"
#include "cplab/scores.hpp"

namespace cplab {

struct PredictionSet {
  std::vector<int> members;  // ascending class indices, possibly empty

  bool contains(int c) const {
    return std::binary_search(members.begin(), members.end(), c);
  }
  std::size_t size() const { return members.size(); }
  bool operator==(const PredictionSet&) const = default;
};

// Generic per-class path: class y enters the set iff its score is at or below
// the (per-class, for mondrian) threshold. Membership is non-strict so the
// finite-sample guarantee of the k-th order statistic holds.
inline PredictionSet predict_set(std::span<const double> point,
                                 const CalibratedPredictor& pred,
                                 std::int64_t example_index = 0) {
  if (pred.context.dim != 0 && point.size() != pred.context.dim) {
    throw std::invalid_argument("predict_set: point dimension " +
                                std::to_string(point.size()) + ", expected " +
                                std::to_string(pred.context.dim));
  }
  const std::vector<double> scores =
      score_all_classes(pred.config, pred.context, point, example_index);
  PredictionSet set;
  for (int y = 0; y < pred.n_classes; ++y) {
    if (scores[static_cast<std::size_t>(y)] <= pred.threshold_for(y)) {
      set.members.push_back(y);
    }
  }
  return set;
}

// Cumulative-sum path for the APS family under a marginal threshold: include
// classes in descending value order until the running score exceeds the
// threshold. Along that order the score is non-decreasing (the prefix grows
// by v*(1-u_prev) + u*v_next >= 0 and the rank regularizers are monotone), so
// the first failure ends the set. Produces exactly the sets of predict_set
// without a per-class scoring loop.
inline PredictionSet predict_set_aps_fast(std::span<const double> values,
                                          const CalibratedPredictor& pred,
                                          std::int64_t example_index = 0) {
  if (!is_aps_family(pred.config.kind)) {
    throw std::invalid_argument("predict_set_aps_fast: score kind " +
                                std::string(score_kind_name(pred.config.kind)) +
                                " has no cumulative-sum form");
  }
  if (pred.mode != CalibrationMode::marginal) {
    throw std::invalid_argument("predict_set_aps_fast: defined for marginal mode only");
  }
  if (values.size() != static_cast<std::size_t>(pred.n_classes)) {
    throw std::invalid_argument("predict_set_aps_fast: dimension mismatch");
  }
  const double tau = pred.thresholds[0];
  const auto s = detail::sort_descending(values);
  PredictionSet set;
  for (int j = 1; j <= pred.n_classes; ++j) {
    const int cls = s.order[static_cast<std::size_t>(j - 1)];
    const double u = resolve_u(pred.config.u_mode, example_index, cls);
    double score = 0.0;
    switch (pred.config.kind) {
      case ScoreKind::aps:
        score = detail::aps_from_sorted(s, values, cls, u);
        break;
      case ScoreKind::raps:
        score = detail::raps_from_sorted(s, values, cls, pred.config.lambda,
                                         pred.config.k_reg, u);
        break;
      default:
        score = detail::saps_from_sorted(s, cls, pred.config.lambda, u);
        break;
    }
    if (score <= tau) {
      set.members.push_back(cls);
    } else {
      break;
    }
  }
  std::sort(set.members.begin(), set.members.end());
  return set;
}

// Element-wise predict_set over the rows of a test dataset, preserving row
// order. Row errors are rethrown with the row index attached.
inline std::vector<PredictionSet> predict_batch(const Dataset& test,
                                                const CalibratedPredictor& pred) {
  if (test.rows == 0) return {};
  if (test.domain != pred.config.domain) {
    throw std::invalid_argument(std::string("predict_batch: dataset domain ") +
                                domain_name(test.domain) +
                                " does not match predictor domain " +
                                domain_name(pred.config.domain));
  }
  std::vector<PredictionSet> sets(test.rows);
  parallel_for(test.rows, [&](std::size_t i) {
    try {
      sets[i] = predict_set(test.row(i), pred, static_cast<std::int64_t>(i));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("row " + std::to_string(i) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("row " + std::to_string(i) + ": " + e.what());
    }
  });
  return sets;
}

// Prediction CSV: "row,classes" with a semicolon-joined ascending class list
// (empty field for an empty set).
inline void save_predictions_csv(const std::vector<PredictionSet>& sets,
                                 const std::string& path) {
  std::string out = "row,classes\n";
  for (std::size_t i = 0; i < sets.size(); ++i) {
    out += std::to_string(i);
    out += ',';
    for (std::size_t j = 0; j < sets[i].members.size(); ++j) {
      if (j > 0) out += ';';
      out += std::to_string(sets[i].members[j]);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

}  // namespace cplab
