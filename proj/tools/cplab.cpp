// cplab command-line front end: configuration parsing, command dispatch,
// artifact persistence, and report emission.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cplab/cplab.hpp"

namespace {

using nlohmann::json;

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct ImbalanceSpec {
  std::set<int> minority_classes;
  double keep_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct DataSource {
  std::optional<cplab::SyntheticSpec> synthetic;
  std::string path;
  cplab::FileFormat format = cplab::FileFormat::binary;
  cplab::DomainTag domain = cplab::DomainTag::logit;
  int n_classes = 0;
};

struct RunConfig {
  DataSource data;
  std::optional<ImbalanceSpec> imbalance;
  cplab::SplitSpec split{0.5, 0};
  bool has_split = false;
  cplab::ScoreConfig score;
  bool has_score = false;
  std::string tail_path;
  cplab::CalibrationMode mode = cplab::CalibrationMode::marginal;
  double alpha = 0.1;
  int k = 1;
  int grid_points = 50;
  int repetitions = 100;
  // verify-coverage
  std::size_t n_calib = 0;
  std::size_t test_size = 0;
  int trials = 200;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string digest;
};

cplab::SyntheticSpec synthetic_from_json(const json& j) {
  cplab::SyntheticSpec s;
  s.n = j.at("n").get<std::size_t>();
  s.n_classes = j.at("n_classes").get<int>();
  s.accuracy_target = j.at("accuracy_target").get<double>();
  s.noise_temperature = j.value("noise_temperature", 1.0);
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

RunConfig parse_config(const std::string& path) {
  json j;
  try {
    j = json::parse(cplab::read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  RunConfig cfg;
  try {
    const auto& data = j.at("data");
    if (data.contains("synthetic")) {
      cfg.data.synthetic = synthetic_from_json(data["synthetic"]);
    }
    if (data.contains("path")) {
      cfg.data.path = data["path"].get<std::string>();
      cfg.data.format = cplab::parse_format(data.value("format", std::string("binary")));
      cfg.data.domain = cplab::parse_domain(data.at("domain").get<std::string>());
      cfg.data.n_classes = data.value("n_classes", 0);
    }
    if (j.contains("imbalance")) {
      ImbalanceSpec imb;
      for (const int c : j["imbalance"].at("minority_classes").get<std::vector<int>>()) {
        imb.minority_classes.insert(c);
      }
      imb.keep_fraction = j["imbalance"].at("keep_fraction").get<double>();
      imb.seed = j["imbalance"].value("seed", std::uint64_t{0});
      cfg.imbalance = imb;
    }
    if (j.contains("split")) {
      cfg.split.calib_fraction = j["split"].value("calib_fraction", 0.5);
      cfg.split.seed = j["split"].value("seed", std::uint64_t{0});
      cfg.has_split = true;
    }
    if (j.contains("score")) {
      cfg.has_score = true;
      const auto& s = j["score"];
      cfg.score.kind = cplab::parse_score_kind(s.at("kind").get<std::string>());
      cfg.score.domain = cplab::parse_domain(s.at("domain").get<std::string>());
      if (s.contains("metric")) cfg.score.metric = cplab::parse_metric(s["metric"].get<std::string>());
      if (s.contains("u")) {
        if (s["u"].contains("random")) {
          cfg.score.u_mode = cplab::UMode::randomized(s["u"]["random"].get<std::uint64_t>());
        } else {
          cfg.score.u_mode = cplab::UMode::constant(s["u"].at("constant").get<double>());
        }
      }
      cfg.score.lambda = s.value("lambda", 0.2);
      cfg.score.k_reg = s.value("k_reg", 1);
      cfg.score.lr = s.value("lr", 0.1);
      cfg.score.steps = s.value("steps", 100);
      cfg.tail_path = s.value("tail", std::string());
    }
    if (j.contains("mode")) cfg.mode = cplab::parse_mode(j["mode"].get<std::string>());
    cfg.alpha = j.value("alpha", 0.1);
    cfg.k = j.value("k", 1);
    cfg.grid_points = j.value("grid_points", 50);
    cfg.repetitions = j.value("repetitions", 100);
    cfg.n_calib = j.value("n_calib", std::size_t{0});
    cfg.test_size = j.value("test_size", std::size_t{0});
    cfg.trials = j.value("trials", 200);
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.out_dir = j.value("out", std::string("out"));
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  return cfg;
}

// Rejects inconsistent configurations before any computation starts.
void validate_config(const RunConfig& cfg, bool needs_score) {
  const bool has_synthetic = cfg.data.synthetic.has_value();
  const bool has_file = !cfg.data.path.empty();
  if (has_synthetic == has_file) {
    throw std::invalid_argument(
        "config: exactly one data source required ('data.synthetic' or 'data.path')");
  }
  if (has_file && !std::filesystem::exists(cfg.data.path)) {
    throw std::invalid_argument("config: data file does not exist: " + cfg.data.path);
  }
  if (!cfg.tail_path.empty() && !std::filesystem::exists(cfg.tail_path)) {
    throw std::invalid_argument("config: tail file does not exist: " + cfg.tail_path);
  }
  if (needs_score) {
    if (!cfg.has_score) {
      throw std::invalid_argument("config: missing the 'score' block");
    }
    // Synthetic feature-domain data pairs with the canonical softmax tail
    // when no tail file is named.
    const bool has_tail = !cfg.tail_path.empty() ||
                          (has_synthetic && cfg.score.domain == cplab::DomainTag::feature);
    cfg.score.validate(has_tail);
    if (has_file && cfg.data.domain != cfg.score.domain) {
      throw std::invalid_argument(std::string("config: data domain ") +
                                  cplab::domain_name(cfg.data.domain) +
                                  " does not match score domain " +
                                  cplab::domain_name(cfg.score.domain));
    }
  }
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) {
    throw std::invalid_argument("config: alpha must lie in (0,1)");
  }
}

// Resolves the configured data source into the score's domain.
struct ResolvedData {
  cplab::Dataset pool;
  std::shared_ptr<const cplab::NetworkTail> tail;
};

ResolvedData resolve_data(const RunConfig& cfg) {
  ResolvedData rd;
  if (!cfg.tail_path.empty()) {
    auto tail = std::make_shared<cplab::NetworkTail>(cplab::load_tail(cfg.tail_path));
    rd.tail = tail;
  }
  if (cfg.data.synthetic) {
    cplab::Dataset logits = cplab::generate_synthetic(*cfg.data.synthetic);
    switch (cfg.score.domain) {
      case cplab::DomainTag::probability:
        rd.pool = cplab::to_probability(logits);
        break;
      case cplab::DomainTag::logit:
        rd.pool = std::move(logits);
        break;
      default:
        rd.pool = cplab::retag_as_feature(logits);
        if (!rd.tail) {
          rd.tail = std::make_shared<cplab::NetworkTail>(
              cplab::softmax_tail(static_cast<std::size_t>(logits.n_classes)));
        }
        break;
    }
  } else {
    rd.pool = cplab::load_dataset(cfg.data.path, cfg.data.format, cfg.data.domain,
                                  cfg.data.n_classes);
  }
  if (cfg.imbalance) {
    rd.pool = cplab::make_imbalanced(rd.pool, cfg.imbalance->minority_classes,
                                     cfg.imbalance->keep_fraction, cfg.imbalance->seed);
  }
  return rd;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

cplab::EvalPlan make_plan(const RunConfig& cfg, ResolvedData rd) {
  cplab::EvalPlan plan;
  plan.pool = std::move(rd.pool);
  plan.split_spec = cfg.split;
  plan.score = cfg.score;
  plan.mode = cfg.mode;
  plan.alpha = cfg.alpha;
  plan.k = cfg.k;
  plan.grid_points = cfg.grid_points;
  plan.tail = std::move(rd.tail);
  plan.seed = cfg.seed;
  plan.config_digest = cfg.digest;
  return plan;
}

int cmd_generate(const RunConfig& cfg) {
  validate_config(cfg, false);
  if (!cfg.data.synthetic) {
    throw std::invalid_argument("generate: requires a 'data.synthetic' block");
  }
  const cplab::Dataset logits = cplab::generate_synthetic(*cfg.data.synthetic);
  if (cfg.data.format == cplab::FileFormat::csv) {
    cplab::save_dataset_csv(logits, out_path(cfg, "data.csv"));
    std::cout << "wrote " << out_path(cfg, "data.csv") << "\n";
  } else {
    cplab::save_dataset_binary(logits, out_path(cfg, "data.cpmx"));
    std::cout << "wrote " << out_path(cfg, "data.cpmx") << " and "
              << cplab::companion_label_path(out_path(cfg, "data.cpmx")) << "\n";
  }
  if (cfg.score.domain == cplab::DomainTag::feature && cfg.tail_path.empty()) {
    cplab::save_tail(cplab::softmax_tail(static_cast<std::size_t>(logits.n_classes)),
                     out_path(cfg, "tail.json"));
    std::cout << "wrote " << out_path(cfg, "tail.json") << "\n";
  }
  return 0;
}

int cmd_calibrate(const RunConfig& cfg) {
  validate_config(cfg, true);
  ResolvedData rd = resolve_data(cfg);
  cplab::Dataset calib = std::move(rd.pool);
  if (cfg.has_split) {
    calib = cplab::split(calib, cfg.split).first;
  }
  cplab::CalibratedPredictor pred =
      cplab::calibrate(calib, cfg.score, cfg.mode, cfg.alpha, rd.tail);
  if (!cfg.tail_path.empty()) pred.context.tail_path = cfg.tail_path;
  cplab::save_predictor(pred, out_path(cfg, "predictor.json"));
  std::cout << "wrote " << out_path(cfg, "predictor.json") << "\n";
  return 0;
}

int cmd_predict(const RunConfig& cfg, const std::string& predictor_path) {
  validate_config(cfg, true);
  const std::string ppath =
      predictor_path.empty() ? out_path(cfg, "predictor.json") : predictor_path;
  const cplab::CalibratedPredictor pred = cplab::load_predictor(ppath);
  ResolvedData rd = resolve_data(cfg);
  cplab::Dataset test = std::move(rd.pool);
  if (cfg.has_split) {
    test = cplab::split(test, cfg.split).second;
  }
  const auto sets = cplab::predict_batch(test, pred);
  cplab::save_predictions_csv(sets, out_path(cfg, "predictions.csv"));
  std::cout << "wrote " << out_path(cfg, "predictions.csv") << " (" << sets.size()
            << " rows)\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  validate_config(cfg, true);
  const cplab::EvalPlan plan = make_plan(cfg, resolve_data(cfg));
  const cplab::EvalReport report = cplab::evaluate_plan(plan, 0);
  cplab::save_report(report, out_path(cfg, "report.json"));
  cplab::save_curve_csv(report.curve, out_path(cfg, "curve.csv"));
  std::cout << "coverage " << report.coverage_value << ", mean set size "
            << report.mean_size << ", i_" << report.k << " " << report.i_k << "\n";
  std::cout << "wrote " << out_path(cfg, "report.json") << " and "
            << out_path(cfg, "curve.csv") << "\n";
  return 0;
}

int cmd_sweep(const RunConfig& cfg) {
  validate_config(cfg, true);
  const cplab::EvalPlan plan = make_plan(cfg, resolve_data(cfg));
  const cplab::SweepResult result = cplab::sweep(plan, cfg.repetitions);
  cplab::save_sweep(result, out_path(cfg, "sweep.json"));
  std::cout << "median over " << cfg.repetitions << " repetitions: coverage "
            << result.median.coverage_value << ", mean set size "
            << result.median.mean_size << ", i_" << result.median.k << " "
            << result.median.i_k << "\n";
  std::cout << "wrote " << out_path(cfg, "sweep.json") << "\n";
  return 0;
}

int cmd_verify_coverage(const RunConfig& cfg) {
  validate_config(cfg, true);
  if (!cfg.data.synthetic) {
    throw std::invalid_argument("verify-coverage: requires a 'data.synthetic' block");
  }
  if (cfg.n_calib == 0 || cfg.test_size == 0) {
    throw std::invalid_argument("verify-coverage: set 'n_calib' and 'test_size'");
  }
  std::shared_ptr<const cplab::NetworkTail> tail;
  if (!cfg.tail_path.empty()) {
    tail = std::make_shared<cplab::NetworkTail>(cplab::load_tail(cfg.tail_path));
  }
  const cplab::BetaCheck check =
      cplab::beta_coverage_check(*cfg.data.synthetic, cfg.score, cfg.n_calib, cfg.alpha,
                                 cfg.trials, cfg.test_size, cfg.seed, tail);
  std::cout << "a: " << check.a << "\n"
            << "b: " << check.b << "\n"
            << "beta_mean: " << check.beta_mean() << "\n"
            << "beta_variance: " << check.beta_variance() << "\n"
            << "empirical_mean: " << check.empirical_mean << "\n"
            << "empirical_variance: " << check.empirical_variance << "\n"
            << "trials: " << check.trials << "\n";
  cplab::write_file_atomic(out_path(cfg, "coverage_check.json"),
                           cplab::beta_check_to_json(check).dump(2) + "\n");
  std::cout << "wrote " << out_path(cfg, "coverage_check.json") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cplab: split conformal prediction engine and benchmark harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::string predictor_path;
  double alpha_override = -1.0;
  std::int64_t seed_override = -1;
  std::string out_override;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run configuration JSON")->required();
    sub->add_option("--alpha", alpha_override, "override the configured alpha");
    sub->add_option("--seed", seed_override, "override the configured seed");
    sub->add_option("--out", out_override, "override the output directory");
  };

  CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset");
  CLI::App* calibrate = app.add_subcommand("calibrate", "calibrate a predictor");
  CLI::App* predict = app.add_subcommand("predict", "emit prediction sets");
  CLI::App* evaluate = app.add_subcommand("evaluate", "single evaluation report");
  CLI::App* sweep = app.add_subcommand("sweep", "median report over repeated splits");
  CLI::App* verify = app.add_subcommand("verify-coverage",
                                        "Monte-Carlo check of the coverage distribution");
  for (CLI::App* sub : {generate, calibrate, predict, evaluate, sweep, verify}) {
    add_common(sub);
  }
  predict->add_option("--predictor", predictor_path, "predictor artifact path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = parse_config(config_path);
    if (alpha_override >= 0.0) cfg.alpha = alpha_override;
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (!out_override.empty()) cfg.out_dir = out_override;
    {
      json dj;
      dj["config"] = json::parse(cplab::read_file(config_path));
      dj["alpha"] = cfg.alpha;
      dj["seed"] = cfg.seed;
      cfg.digest = hex64(fnv1a64(dj.dump()));
    }

    if (generate->parsed()) return cmd_generate(cfg);
    if (calibrate->parsed()) return cmd_calibrate(cfg);
    if (predict->parsed()) return cmd_predict(cfg, predictor_path);
    if (evaluate->parsed()) return cmd_evaluate(cfg);
    if (sweep->parsed()) return cmd_sweep(cfg);
    if (verify->parsed()) return cmd_verify_coverage(cfg);
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
