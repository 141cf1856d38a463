#include "qclt/errors.hpp"
#include "qclt/experiments.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace qclt;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("qclt_test_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig small_clt_config() {
  ExperimentConfig cfg;
  cfg.seed = 77;
  cfg.n_grid = {64, 128, 256};
  cfg.replicas = 120;
  return cfg;
}

}  // namespace

TEST_CASE("config parsing with sections, comments and lists") {
  const ExperimentConfig cfg = parse_config(R"(
# comment line
kind = moments
seed = 12
n_grid = 2^10, 2^12, 65536   # trailing comment
replicas = 300

[mdp]
S = 4
A = 3
gamma = 0.8

[step]
omega = 3/4
c0 = 2.5
k0 = auto

[coverage]
levels = 0.5, 0.9
)");
  CHECK(cfg.kind == ExperimentKind::moments);
  CHECK(cfg.seed == 12);
  CHECK(cfg.n_grid == std::vector<std::int64_t>{1024, 4096, 65536});
  CHECK(cfg.replicas == 300);
  CHECK(cfg.garnet_states == 4);
  CHECK(cfg.garnet_actions == 3);
  CHECK(cfg.garnet_gamma == 0.8);
  CHECK(cfg.step_omega == 0.75);
  REQUIRE(cfg.step_c0.has_value());
  CHECK(*cfg.step_c0 == 2.5);
  CHECK_FALSE(cfg.step_k0.has_value());
  CHECK(cfg.coverage_levels == std::vector<double>{0.5, 0.9});
  CHECK_NOTHROW(validate_config(cfg));
}

TEST_CASE("config errors name the line") {
  try {
    parse_config("seed = 1\nbogus = 3\n");
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConfigError);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("replicas = many\n"), Error);
  CHECK_THROWS_AS(parse_config("[mdp\n"), Error);
  CHECK_THROWS_AS(parse_config("no equals sign\n"), Error);
  CHECK_THROWS_AS(load_config("/nonexistent/qclt.conf"), Error);
}

TEST_CASE("overrides and validation") {
  ExperimentConfig cfg;
  apply_override(cfg, "seed=5");
  apply_override(cfg, " mdp.S = 6 ");
  CHECK(cfg.seed == 5);
  CHECK(cfg.garnet_states == 6);
  CHECK_THROWS_AS(apply_override(cfg, "seed"), Error);

  ExperimentConfig bad = cfg;
  bad.n_grid = {256, 128};
  CHECK_THROWS_AS(validate_config(bad), Error);
  bad = cfg;
  bad.replicas = 99;
  CHECK_THROWS_AS(validate_config(bad), Error);
  bad = cfg;
  bad.step_omega = 1.0;
  CHECK_THROWS_AS(validate_config(bad), Error);
  bad = cfg;
  bad.mdp_source = "file";
  CHECK_THROWS_AS(validate_config(bad), Error);
}

TEST_CASE("echo round-trips through the parser") {
  ExperimentConfig cfg;
  cfg.kind = ExperimentKind::bench;
  cfg.seed = 31;
  cfg.step_c0 = 3.25;
  cfg.bench_generator = MdsGenerator::scaled_deterministic_qv;
  cfg.coverage_levels = {0.85};
  std::string text;
  for (const auto& [k, v] : cfg.echo()) {
    if (!v.empty()) text += k + " = " + v + "\n";
  }
  CHECK(parse_config(text).echo() == cfg.echo());
}

TEST_CASE("git blob hashes match git") {
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("input hash ignores the output directory only") {
  ExperimentConfig a;
  ExperimentConfig b = a;
  b.output = "elsewhere";
  CHECK(input_hash(a, nullptr) == input_hash(b, nullptr));
  b.seed = 1;
  CHECK(input_hash(a, nullptr) != input_hash(b, nullptr));
}

TEST_CASE("problem preparation on the default garnet") {
  const Problem p = prepare_problem(ExperimentConfig{});
  CHECK(p.mdp.num_pairs() == 6);
  CHECK(p.chain.uge_certified);
  CHECK(p.schedule.k0 == 4096);
  CHECK(p.drift == doctest::Approx((1 - 0.7) * p.chain.mu_min));
  const nlohmann::json ctx = problem_context(p);
  CHECK(ctx.at("t_mix").get<int>() == p.chain.t_mix);

  ExperimentConfig eps;
  eps.behavior = "epsilon_greedy";
  eps.behavior_epsilon = 0.5;
  const Problem q = prepare_problem(eps);
  CHECK(q.behavior.kind() == Policy::Kind::stochastic);
}

TEST_CASE("run_clt is deterministic across worker counts") {
  const ExperimentConfig cfg = small_clt_config();
  const Problem p = prepare_problem(cfg);
  const CltResult one = run_clt(cfg, p, 1);
  const CltResult two = run_clt(cfg, p, 3);
  CHECK(clt_json(one).dump() == clt_json(two).dump());
  REQUIRE(one.cells.size() == 3);
  CHECK(one.family_count == 99 + 512);
  for (const auto& c : one.cells) {
    CHECK(c.dk.value >= 0.0);
    CHECK(c.dk.value <= 1.0);
    CHECK(c.bound_violations == 0);
  }
  const auto checks = check_clt(one);
  CHECK(checks.size() == 4);

  ExperimentConfig other = cfg;
  other.seed = 78;
  CHECK(clt_json(run_clt(other, p, 1)).dump() != clt_json(one).dump());
}

TEST_CASE("moments, coverage and bench runs at small scale") {
  ExperimentConfig cfg = small_clt_config();
  cfg.n_grid = {16, 64, 256};
  const Problem p = prepare_problem(cfg);
  const MomentResult m = run_moments(cfg, p, 2);
  CHECK(m.horizon == 256);
  CHECK(m.rows.size() == 9);
  CHECK(m.reference_slope == doctest::Approx(-1.0 / 3.0));
  const auto mc = check_moments(m, cfg.step_omega);
  CHECK(mc[1].passed);

  const CoverageResultSet c = run_coverage(cfg, p, 2);
  CHECK(c.levels.size() == 3);
  ExperimentConfig full = cfg;
  full.coverage_levels = {1.0};
  CHECK(run_coverage(full, p, 1).levels[0].rate == 1.0);

  cfg.bench_d = 2;
  const BenchResult b = run_bench(cfg, std::nullopt, 2);
  CHECK(b.cells.size() == 3);
  CHECK(b.ratios.front() == doctest::Approx(b.fitted_constant));
  cfg.bench_generator = MdsGenerator::markov_functional;
  CHECK_THROWS_AS(run_bench(cfg, std::nullopt, 1), Error);
  CHECK(run_bench(cfg, p, 1).cells.size() == 3);
}

TEST_CASE("decreasing_within") {
  CHECK(decreasing_within({0.3, 0.2, 0.1}, {0.0, 0.0, 0.0}, 2.0, true));
  CHECK_FALSE(decreasing_within({0.3, 0.3}, {0.0, 0.0}, 2.0, true));
  CHECK(decreasing_within({0.3, 0.3}, {0.0, 0.0}, 2.0, false));
  CHECK(decreasing_within({0.3, 0.31}, {0.01, 0.01}, 2.0, true));
  CHECK_FALSE(decreasing_within({0.3, 0.4}, {0.01, 0.01}, 2.0, true));
}

TEST_CASE("records persist and reload") {
  const fs::path dir = scratch_dir("persist");
  ResultRecord rec;
  rec.config = ExperimentConfig{}.echo();
  rec.input_hash = input_hash(ExperimentConfig{}, nullptr);
  rec.metrics = {{"dk", {0.125, 0.0625}}, {"slope", -0.3}};
  rec.wall_clock_seconds = 1.5;
  const std::string path = persist(rec, dir.string(), "clt", false);
  CHECK(load_record(path) == rec);

  try {
    persist(rec, dir.string(), "clt", false);
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::IoError);
  }
  CHECK_NOTHROW(persist(rec, dir.string(), "clt", true));

  {
    std::ofstream out(dir / "broken.json");
    out << "{\"config\": [1, 2";
  }
  try {
    load_record((dir / "broken.json").string());
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ParseError);
    CHECK(std::string(e.what()).find("at byte") != std::string::npos);
  }
  CHECK_THROWS_AS(load_record((dir / "missing.json").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("CSV output carries the schema line") {
  const fs::path dir = scratch_dir("csv");
  fs::create_directories(dir);
  const std::string path = (dir / "t.csv").string();
  write_csv(path, {"n", "dk"}, {{"1024", "0.1"}}, false);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first == kCsvSchemaLine);
  CHECK_THROWS_AS(write_csv(path, {"n"}, {}, false), Error);
  fs::remove_all(dir);
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.0, -2.5}) CHECK(std::stod(format_double(v)) == v);
}
