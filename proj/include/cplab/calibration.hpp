#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cplab/dataset.hpp"
#include "cplab/dataset_io.hpp"
#include "cplab/io.hpp"
#include "cplab/parallel.hpp"
#include "cplab/scores.hpp"

namespace cplab {

enum class CalibrationMode { marginal, mondrian };

inline const char* mode_name(CalibrationMode m) {
  return m == CalibrationMode::marginal ? "marginal" : "mondrian";
}

inline CalibrationMode parse_mode(const std::string& s) {
  if (s == "marginal") return CalibrationMode::marginal;
  if (s == "mondrian") return CalibrationMode::mondrian;
  throw std::invalid_argument("unknown calibration mode: " + s);
}

// Rank of the adjusted quantile: ceil((n+1)(1-alpha)) == (n+1) - floor((n+1)*alpha).
// The subtraction form avoids the rounding of 1-alpha, whose error would
// otherwise shift the index at exact-integer boundaries (e.g. n=9, alpha=0.1).
inline long quantile_rank(std::size_t n, double alpha) {
  const double m = static_cast<double>(n + 1);
  return static_cast<long>(n + 1) - static_cast<long>(std::floor(m * alpha));
}

// The k-th smallest score with k = ceil((n+1)(1-alpha)), or +inf when k
// exceeds n (every class will then be included).
inline double finite_sample_quantile(std::vector<double> scores, double alpha) {
  if (scores.empty()) throw std::invalid_argument("finite_sample_quantile: empty scores");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("finite_sample_quantile: alpha must lie in (0,1)");
  }
  for (const double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("finite_sample_quantile: NaN score");
  }
  const long k = quantile_rank(scores.size(), alpha);
  if (k > static_cast<long>(scores.size())) {
    return std::numeric_limits<double>::infinity();
  }
  std::nth_element(scores.begin(), scores.begin() + (k - 1), scores.end());
  return scores[static_cast<std::size_t>(k - 1)];
}

struct CalibratedPredictor {
  ScoreConfig config;
  CalibrationMode mode = CalibrationMode::marginal;
  double alpha = 0.1;
  int n_classes = 0;
  std::size_t n_calib = 0;
  std::vector<double> thresholds;  // one entry (marginal) or one per class (mondrian)
  ScoreContext context;            // inference-time statistics

  double threshold_for(int cls) const {
    return mode == CalibrationMode::marginal
               ? thresholds[0]
               : thresholds[static_cast<std::size_t>(cls)];
  }
};

// Non-conformity scores of the calibration rows under their true labels, with
// the leave-one-out view for context-based scores.
inline std::vector<double> calibration_scores(const Dataset& calib,
                                              const ScoreConfig& config,
                                              const ScoreContext& ctx) {
  std::vector<double> scores(calib.rows);
  parallel_for(calib.rows, [&](std::size_t i) {
    scores[i] = score_point(config, ctx, calib.row(i), calib.labels[i],
                            static_cast<std::int64_t>(i), static_cast<std::int64_t>(i));
  });
  return scores;
}

inline CalibratedPredictor calibrate(const Dataset& calib, const ScoreConfig& config,
                                     CalibrationMode mode, double alpha,
                                     std::shared_ptr<const NetworkTail> tail = nullptr) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("calibrate: alpha must lie in (0,1)");
  }
  config.validate(tail != nullptr);
  if (calib.domain != config.domain) {
    throw std::invalid_argument(std::string("calibrate: dataset domain ") +
                                domain_name(calib.domain) + " does not match score domain " +
                                domain_name(config.domain));
  }
  if (is_gradient_kind(config.kind)) {
    validate_tail(*tail);
    if (tail->input_dim() != calib.cols) {
      throw std::invalid_argument("calibrate: tail input dimension " +
                                  std::to_string(tail->input_dim()) +
                                  " does not match data dimension " +
                                  std::to_string(calib.cols));
    }
    if (tail->output_dim() != static_cast<std::size_t>(calib.n_classes)) {
      throw std::invalid_argument("calibrate: tail output dimension " +
                                  std::to_string(tail->output_dim()) +
                                  " does not match n_classes " +
                                  std::to_string(calib.n_classes));
    }
  }
  if (mode == CalibrationMode::mondrian) {
    std::vector<long> counts(static_cast<std::size_t>(calib.n_classes), 0);
    for (const int l : calib.labels) ++counts[static_cast<std::size_t>(l)];
    for (int c = 0; c < calib.n_classes; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        throw std::invalid_argument("calibrate: mondrian mode but class " +
                                    std::to_string(c) +
                                    " is absent from the calibration set");
      }
    }
  }

  CalibratedPredictor pred;
  pred.config = config;
  pred.mode = mode;
  pred.alpha = alpha;
  pred.n_classes = calib.n_classes;
  pred.n_calib = calib.rows;
  pred.context = build_context(config, calib, std::move(tail));

  const std::vector<double> scores = calibration_scores(calib, config, pred.context);
  if (mode == CalibrationMode::marginal) {
    pred.thresholds = {finite_sample_quantile(scores, alpha)};
  } else {
    pred.thresholds.resize(static_cast<std::size_t>(calib.n_classes));
    std::vector<std::vector<double>> per_class(static_cast<std::size_t>(calib.n_classes));
    for (std::size_t i = 0; i < calib.rows; ++i) {
      per_class[static_cast<std::size_t>(calib.labels[i])].push_back(scores[i]);
    }
    for (int c = 0; c < calib.n_classes; ++c) {
      pred.thresholds[static_cast<std::size_t>(c)] =
          finite_sample_quantile(std::move(per_class[static_cast<std::size_t>(c)]), alpha);
    }
  }
  return pred;
}

// ---------------------------------------------------------------------------
// Persistence. Thresholds may be +inf, which JSON cannot hold as a number, so
// non-finite values are stored as strings. Context payload: class means
// inline, calibration matrix and tail by file reference (relative to the
// predictor file).

namespace detail {

inline nlohmann::json threshold_to_json(double t) {
  if (std::isfinite(t)) return t;
  return t > 0 ? "inf" : "-inf";
}

inline double threshold_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw std::invalid_argument("predictor json: bad threshold '" + s + "'");
  }
  return j.get<double>();
}

inline nlohmann::json u_mode_to_json(const UMode& u) {
  if (u.random) return {{"random", u.seed}};
  return {{"constant", u.value}};
}

inline UMode u_mode_from_json(const nlohmann::json& j) {
  if (j.contains("random")) return UMode::randomized(j["random"].get<std::uint64_t>());
  return UMode::constant(j.at("constant").get<double>());
}

inline nlohmann::json score_config_to_json(const ScoreConfig& c) {
  return {{"kind", score_kind_name(c.kind)},
          {"domain", domain_name(c.domain)},
          {"metric", metric_name(c.metric)},
          {"u", u_mode_to_json(c.u_mode)},
          {"lambda", c.lambda},
          {"k_reg", c.k_reg},
          {"lr", c.lr},
          {"steps", c.steps}};
}

inline ScoreConfig score_config_from_json(const nlohmann::json& j) {
  ScoreConfig c;
  c.kind = parse_score_kind(j.at("kind").get<std::string>());
  c.domain = parse_domain(j.at("domain").get<std::string>());
  if (j.contains("metric")) c.metric = parse_metric(j["metric"].get<std::string>());
  if (j.contains("u")) c.u_mode = u_mode_from_json(j["u"]);
  if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
  if (j.contains("k_reg")) c.k_reg = j["k_reg"].get<int>();
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("steps")) c.steps = j["steps"].get<int>();
  return c;
}

}  // namespace detail

inline void save_predictor(const CalibratedPredictor& pred, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cplab-predictor";
  j["version"] = 1;
  j["config"] = detail::score_config_to_json(pred.config);
  j["mode"] = mode_name(pred.mode);
  j["alpha"] = pred.alpha;
  j["n_classes"] = pred.n_classes;
  j["n_calib"] = pred.n_calib;
  nlohmann::json thresholds = nlohmann::json::array();
  for (const double t : pred.thresholds) thresholds.push_back(detail::threshold_to_json(t));
  j["thresholds"] = thresholds;

  nlohmann::json ctx = nlohmann::json::object();
  const std::filesystem::path target(path);
  const std::string stem =
      (target.parent_path() / target.stem()).string();
  if (pred.config.kind == ScoreKind::mean_distance) {
    nlohmann::json means = nlohmann::json::array();
    for (int c = 0; c < pred.n_classes; ++c) {
      const auto m = pred.context.class_mean(c);
      means.push_back(std::vector<double>(m.begin(), m.end()));
    }
    ctx["class_means"] = means;
    ctx["class_counts"] = pred.context.class_counts;
    ctx["global_mean"] = pred.context.global_mean;
    ctx["total_count"] = pred.context.total_count;
    ctx["dim"] = pred.context.dim;
  }
  if (pred.config.kind == ScoreKind::knn_ratio) {
    const std::string calib_path = stem + ".calib.cpmx";
    save_dataset_binary(*pred.context.calibration, calib_path);
    ctx["calibration"] = std::filesystem::path(calib_path).filename().string();
  }
  if (is_gradient_kind(pred.config.kind)) {
    std::string tail_ref = pred.context.tail_path;
    if (tail_ref.empty()) {
      const std::string tail_path = stem + ".tail.json";
      save_tail(*pred.context.tail, tail_path);
      tail_ref = std::filesystem::path(tail_path).filename().string();
    }
    ctx["tail"] = tail_ref;
  }
  j["context"] = ctx;
  write_file_atomic(path, j.dump(2) + "\n");
}

inline CalibratedPredictor load_predictor(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("predictor json: " + path + ": " + e.what());
  }
  if (!j.contains("format") || j["format"] != "cplab-predictor") {
    throw std::invalid_argument("predictor json: " + path + ": not a predictor artifact");
  }
  CalibratedPredictor pred;
  pred.config = detail::score_config_from_json(j.at("config"));
  pred.mode = parse_mode(j.at("mode").get<std::string>());
  pred.alpha = j.at("alpha").get<double>();
  pred.n_classes = j.at("n_classes").get<int>();
  pred.n_calib = j.at("n_calib").get<std::size_t>();
  for (const auto& t : j.at("thresholds")) {
    pred.thresholds.push_back(detail::threshold_from_json(t));
  }
  const std::size_t expected =
      pred.mode == CalibrationMode::marginal ? 1 : static_cast<std::size_t>(pred.n_classes);
  if (pred.thresholds.size() != expected) {
    throw std::invalid_argument("predictor json: " + path + ": expected " +
                                std::to_string(expected) + " thresholds, found " +
                                std::to_string(pred.thresholds.size()));
  }

  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  const auto& ctx = j.at("context");
  pred.context.n_classes = pred.n_classes;
  if (pred.config.kind == ScoreKind::mean_distance) {
    pred.context.dim = ctx.at("dim").get<std::size_t>();
    pred.context.class_means.clear();
    for (const auto& m : ctx.at("class_means")) {
      const auto row = m.get<std::vector<double>>();
      if (row.size() != pred.context.dim) {
        throw std::invalid_argument("predictor json: class mean dimension mismatch");
      }
      pred.context.class_means.insert(pred.context.class_means.end(), row.begin(), row.end());
    }
    pred.context.class_counts = ctx.at("class_counts").get<std::vector<long>>();
    pred.context.global_mean = ctx.at("global_mean").get<std::vector<double>>();
    pred.context.total_count = ctx.at("total_count").get<long>();
  }
  if (pred.config.kind == ScoreKind::knn_ratio) {
    const std::string ref = ctx.at("calibration").get<std::string>();
    const Dataset calib = load_dataset_binary((dir / ref).string(), pred.config.domain,
                                              pred.n_classes);
    pred.context.calibration = std::make_shared<Dataset>(calib);
    pred.context.dim = calib.cols;
  }
  if (is_gradient_kind(pred.config.kind)) {
    const std::string ref = ctx.at("tail").get<std::string>();
    auto tail = std::make_shared<NetworkTail>(load_tail((dir / ref).string()));
    pred.context.dim = tail->input_dim();
    pred.context.tail = std::move(tail);
    pred.context.tail_path = ref;
  }
  if (pred.context.dim == 0 && pred.config.domain != DomainTag::feature) {
    pred.context.dim = static_cast<std::size_t>(pred.n_classes);
  }
  return pred;
}

}  // namespace cplab
