#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "cplab/cplab.hpp"

using namespace cplab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cplab_bin() {
  const char* bin = std::getenv("CPLAB_BIN");
  REQUIRE(bin != nullptr);  // set by ctest
  return bin;
}

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + cplab_bin() + " " + args +
                          " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cplab_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json base_config() {
  return {
      {"data",
       {{"synthetic",
         {{"n", 400}, {"n_classes", 4}, {"accuracy_target", 0.8},
          {"noise_temperature", 1.0}, {"seed", 11}}}}},
      {"split", {{"calib_fraction", 0.5}, {"seed", 3}}},
      {"score", {{"kind", "raps"}, {"domain", "probability"},
                 {"u", {{"constant", 0.001}}}, {"lambda", 0.2}, {"k_reg", 1}}},
      {"mode", "marginal"},
      {"alpha", 0.1},
      {"k", 1},
      {"grid_points", 8},
      {"repetitions", 2},
      {"seed", 21},
  };
}

std::string write_config(const fs::path& dir, json cfg, const std::string& out_name) {
  cfg["out"] = (dir / out_name).string();
  const fs::path path = dir / (out_name + "_config.json");
  write_file_atomic(path.string(), cfg.dump(2));
  return path.string();
}

}  // namespace

TEST_CASE("generate produces loadable, reproducible datasets", "[cli]") {
  const auto dir = fresh_dir("generate");
  const auto cfg = write_config(dir, base_config(), "out_a");
  REQUIRE(run("generate -c " + cfg) == 0);

  const Dataset ds =
      load_dataset_binary((dir / "out_a" / "data.cpmx").string(), DomainTag::logit);
  CHECK(ds.rows == 400);
  CHECK(ds.n_classes == 4);

  const auto cfg_b = write_config(dir, base_config(), "out_b");
  REQUIRE(run("generate -c " + cfg_b) == 0);
  CHECK(read_file((dir / "out_a" / "data.cpmx").string()) ==
        read_file((dir / "out_b" / "data.cpmx").string()));
  CHECK(read_file((dir / "out_a" / "data.cplb").string()) ==
        read_file((dir / "out_b" / "data.cplb").string()));

  // an unreachable accuracy target exits with a validation error
  json bad = base_config();
  bad["data"]["synthetic"]["accuracy_target"] = 0.1;  // below chance
  const auto bad_cfg = write_config(dir, bad, "out_bad");
  CHECK(run("generate -c " + bad_cfg) == 1);
}

TEST_CASE("calibrate writes an artifact consistent with recomputed scores", "[cli]") {
  const auto dir = fresh_dir("calibrate");
  const auto cfg = write_config(dir, base_config(), "out");
  REQUIRE(run("calibrate -c " + cfg) == 0);

  const CalibratedPredictor pred =
      load_predictor((dir / "out" / "predictor.json").string());

  // recompute the threshold from scratch through the library
  SyntheticSpec spec;
  spec.n = 400;
  spec.n_classes = 4;
  spec.accuracy_target = 0.8;
  spec.noise_temperature = 1.0;
  spec.seed = 11;
  const Dataset pool = to_probability(generate_synthetic(spec));
  const auto [calib, test] = split(pool, SplitSpec{0.5, 3});
  ScoreConfig score;
  score.kind = ScoreKind::raps;
  score.domain = DomainTag::probability;
  const ScoreContext ctx = build_context(score, calib);
  const double tau = finite_sample_quantile(calibration_scores(calib, score, ctx), 0.1);
  CHECK(pred.thresholds[0] == tau);

  // mondrian calibration on data with an absent class exits non-zero
  json bad = base_config();
  bad["mode"] = "mondrian";
  bad["imbalance"] = {{"minority_classes", {0}}, {"keep_fraction", 0.002}, {"seed", 1}};
  const auto bad_cfg = write_config(dir, bad, "out_bad");
  CHECK(run("calibrate -c " + bad_cfg) == 1);
}

TEST_CASE("predict emits deterministic csv", "[cli]") {
  const auto dir = fresh_dir("predict");
  const auto cfg = write_config(dir, base_config(), "out");
  REQUIRE(run("calibrate -c " + cfg) == 0);
  REQUIRE(run("predict -c " + cfg) == 0);
  const std::string first = read_file((dir / "out" / "predictions.csv").string());
  CHECK(first.rfind("row,classes\n", 0) == 0);
  REQUIRE(run("predict -c " + cfg) == 0);
  CHECK(read_file((dir / "out" / "predictions.csv").string()) == first);

  // score domain mismatching the data domain is rejected up front
  json bad = base_config();
  bad["data"] = {{"path", (dir / "out" / "missing.cpmx").string()},
                 {"format", "binary"},
                 {"domain", "logit"}};
  bad["score"]["domain"] = "probability";
  const auto bad_cfg = write_config(dir, bad, "out_bad");
  CHECK(run("predict -c " + bad_cfg) == 1);
}

TEST_CASE("evaluate matches sweep with one repetition", "[cli]") {
  const auto dir = fresh_dir("evaluate");
  const auto cfg = write_config(dir, base_config(), "out");
  REQUIRE(run("evaluate -c " + cfg) == 0);
  json one = json::parse(read_file((dir / "out" / "report.json").string()));

  json sweep_cfg_json = base_config();
  sweep_cfg_json["repetitions"] = 1;
  const auto sweep_cfg = write_config(dir, sweep_cfg_json, "out_sweep");
  REQUIRE(run("sweep -c " + sweep_cfg) == 0);
  json swept = json::parse(read_file((dir / "out_sweep" / "sweep.json").string()));

  CHECK(swept["median"]["coverage"] == one["coverage"]);
  CHECK(swept["median"]["mean_set_size"] == one["mean_set_size"]);
  CHECK(swept["median"]["i_k"] == one["i_k"]);
  CHECK(swept["repetitions"].size() == 1);

  // curve csv is present and parses
  const std::string curve = read_file((dir / "out" / "curve.csv").string());
  CHECK(curve.rfind("alpha,mean_set_size\n", 0) == 0);
}

TEST_CASE("verify-coverage reports the beta parameters", "[cli]") {
  const auto dir = fresh_dir("verify");
  json cfg_json = base_config();
  cfg_json["n_calib"] = 99;
  cfg_json["test_size"] = 300;
  cfg_json["trials"] = 120;
  const auto cfg = write_config(dir, cfg_json, "out");
  REQUIRE(run("verify-coverage -c " + cfg) == 0);
  json chk = json::parse(read_file((dir / "out" / "coverage_check.json").string()));
  CHECK(chk["a"] == 90);
  CHECK(chk["b"] == 10);
  CHECK(chk["trials"] == 120);
  CHECK(std::abs(chk["empirical_mean"].get<double>() - 0.9) < 0.02);
}

TEST_CASE("results do not depend on the thread cap", "[cli]") {
  const auto dir = fresh_dir("threads");
  const auto cfg = write_config(dir, base_config(), "out");
  REQUIRE(run("evaluate -c " + cfg, "CPLAB_THREADS=1") == 0);
  const std::string serial = read_file((dir / "out" / "report.json").string());
  REQUIRE(run("evaluate -c " + cfg, "CPLAB_THREADS=4") == 0);
  CHECK(read_file((dir / "out" / "report.json").string()) == serial);
}

TEST_CASE("flag overrides win over the config file", "[cli]") {
  const auto dir = fresh_dir("overrides");
  const auto cfg = write_config(dir, base_config(), "out");
  const std::string alt_out = (dir / "alt").string();
  REQUIRE(run("evaluate -c " + cfg + " --alpha 0.2 --out " + alt_out) == 0);
  json rep = json::parse(read_file(alt_out + "/report.json"));
  CHECK(rep["alpha"] == 0.2);
}

TEST_CASE("bad invocations exit with a validation error", "[cli]") {
  const auto dir = fresh_dir("badinvoke");
  CHECK(run("evaluate -c " + (dir / "nope.json").string()) != 0);

  json two_sources = base_config();
  two_sources["data"]["path"] = "somewhere.cpmx";
  two_sources["data"]["domain"] = "logit";
  const auto cfg = write_config(dir, two_sources, "out");
  CHECK(run("evaluate -c " + cfg) == 1);

  CHECK(run("no-such-command") == 1);
}
