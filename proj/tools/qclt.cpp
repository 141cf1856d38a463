// Command-line runner: plan, analyze, clt, moments, coverage, bench.
#include "qclt/errors.hpp"
#include "qclt/experiments.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitCheck = 4;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out;
  bool force = false;
  bool check = false;
  std::vector<std::string> overrides;
};

int exit_code_for(qclt::ErrorKind kind) {
  using qclt::ErrorKind;
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::IoError:
    case ErrorKind::ParseError:
    case ErrorKind::InvalidParameter:
    case ErrorKind::InvalidSpec:
    case ErrorKind::DimensionMismatch:
      return kExitConfig;
    default:
      return kExitNumerical;
  }
}

qclt::ExperimentConfig resolve_config(const Options& opt, std::optional<qclt::ExperimentKind> kind) {
  qclt::ExperimentConfig cfg = opt.config_path.empty() ? qclt::ExperimentConfig{} : qclt::load_config(opt.config_path);
  for (const auto& o : opt.overrides) qclt::apply_override(cfg, o);
  if (const char* env = std::getenv("QCLT_SEED")) qclt::apply_override(cfg, std::string("seed=") + env);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.output = opt.out;
  if (kind) cfg.kind = *kind;
  qclt::validate_config(cfg);
  return cfg;
}

void write_json(const std::string& dir, const std::string& stem, const nlohmann::json& j, bool force) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto path = fs::path(dir) / (stem + ".json");
  if (fs::exists(path) && !force) qclt::fail(qclt::ErrorKind::IoError, "refusing to overwrite '" + path.string() + "' (pass --force)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) qclt::fail(qclt::ErrorKind::IoError, "cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  std::cout << "wrote " << path.string() << '\n';
}

int report_checks(const std::vector<qclt::CheckItem>& items, bool check) {
  bool all = true;
  for (const auto& item : items) {
    std::cout << (item.passed ? "PASS " : "FAIL ") << item.name;
    if (!item.detail.empty()) std::cout << " (" << item.detail << ")";
    std::cout << '\n';
    all = all && item.passed;
  }
  return check && !all ? kExitCheck : kExitOk;
}

int cmd_plan(const Options& opt) {
  const auto cfg = resolve_config(opt, std::nullopt);
  const auto mdp = qclt::load_problem_mdp(cfg);
  const auto planning = qclt::solve_optimal(mdp);
  write_json(cfg.output, "planning", qclt::planning_json(planning), opt.force);
  std::cout << "residual " << qclt::format_double(planning.residual) << " after " << planning.iterations
            << " iterations\n";
  return kExitOk;
}

int cmd_analyze(const Options& opt) {
  const auto cfg = resolve_config(opt, std::nullopt);
  const auto problem = qclt::prepare_problem(cfg);
  write_json(cfg.output, "chain", qclt::chain_json(problem.chain), opt.force);
  write_json(cfg.output, "covariance", qclt::covariance_json(problem.covariance), opt.force);
  std::cout << "t_mix " << problem.chain.t_mix << ", mu_min " << qclt::format_double(problem.chain.mu_min)
            << ", spectral gap " << qclt::format_double(problem.chain.spectral_gap) << ", k0 "
            << problem.schedule.k0 << '\n';
  return kExitOk;
}

int cmd_experiment(const Options& opt, qclt::ExperimentKind kind) {
  const auto cfg = resolve_config(opt, kind);
  const auto started = std::chrono::steady_clock::now();
  std::optional<qclt::Problem> problem;
  if (kind != qclt::ExperimentKind::bench || cfg.bench_generator == qclt::MdsGenerator::markov_functional) {
    problem = qclt::prepare_problem(cfg);
  }

  nlohmann::json metrics;
  std::vector<qclt::CheckItem> checks;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  switch (kind) {
    case qclt::ExperimentKind::clt: {
      const auto result = qclt::run_clt(cfg, *problem, opt.jobs);
      metrics = qclt::clt_json(result);
      checks = qclt::check_clt(result);
      header = {"n", "dk", "dk_se", "ks_max", "remainder_sup_mean", "remainder_g_sup_mean", "bias_sup"};
      rows = qclt::clt_csv_rows(result);
      break;
    }
    case qclt::ExperimentKind::moments: {
      const auto result = qclt::run_moments(cfg, *problem, opt.jobs);
      metrics = qclt::moments_json(result);
      checks = qclt::check_moments(result, cfg.step_omega);
      header = {"t", "mean_sup_err", "l2_sup_err", "l4_sup_err"};
      rows = qclt::moments_csv_rows(result);
      break;
    }
    case qclt::ExperimentKind::coverage: {
      const auto result = qclt::run_coverage(cfg, *problem, opt.jobs);
      metrics = qclt::coverage_json(result);
      checks = qclt::check_coverage(result);
      header = {"n", "nominal", "rate", "se", "threshold"};
      rows = qclt::coverage_csv_rows(result);
      break;
    }
    case qclt::ExperimentKind::bench: {
      const auto result = qclt::run_bench(cfg, problem, opt.jobs);
      metrics = qclt::bench_json(result);
      checks = qclt::check_bench(result);
      header = {"n", "dk", "dk_se", "bracket", "ratio"};
      rows = qclt::bench_csv_rows(result);
      break;
    }
  }
  if (problem) metrics["context"] = qclt::problem_context(*problem);

  qclt::ResultRecord record;
  record.config = cfg.echo();
  record.input_hash = qclt::input_hash(cfg, problem ? &problem->mdp : nullptr);
  record.metrics = metrics;
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  const std::string stem = qclt::to_string(kind);
  const auto csv_path = (std::filesystem::path(cfg.output) / (stem + ".csv")).string();
  if (std::filesystem::exists(csv_path) && !opt.force) {
    qclt::fail(qclt::ErrorKind::IoError, "refusing to overwrite '" + csv_path + "' (pass --force)");
  }
  const auto json_path = qclt::persist(record, cfg.output, stem, opt.force);
  qclt::write_csv(csv_path, header, rows, opt.force);
  std::cout << "wrote " << json_path << " and " << csv_path << '\n';
  return report_checks(checks, opt.check);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asynchronous Q-learning CLT lab"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "experiment config file");
    sub->add_option("--seed", opt.seed, "master seed (overrides config and QCLT_SEED)");
    sub->add_option("--jobs", opt.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", opt.out, "output directory");
    sub->add_flag("--force", opt.force, "overwrite existing outputs");
    sub->add_option("--set", opt.overrides, "override a config key (key=value)");
  };
  auto* plan = app.add_subcommand("plan", "solve the MDP and write planning.json");
  auto* analyze = app.add_subcommand("analyze", "chain and covariance analysis");
  auto* clt = app.add_subcommand("clt", "Gaussian approximation of the averaged error");
  auto* moments = app.add_subcommand("moments", "moment decay of the last iterate");
  auto* coverage = app.add_subcommand("coverage", "simultaneous confidence-box coverage");
  auto* bench = app.add_subcommand("bench", "martingale CLT bench");
  for (auto* sub : {plan, analyze, clt, moments, coverage, bench}) add_common(sub);
  for (auto* sub : {clt, moments, coverage, bench}) {
    sub->add_flag("--check", opt.check, "exit 4 when an acceptance check fails");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*plan) return cmd_plan(opt);
    if (*analyze) return cmd_analyze(opt);
    if (*clt) return cmd_experiment(opt, qclt::ExperimentKind::clt);
    if (*moments) return cmd_experiment(opt, qclt::ExperimentKind::moments);
    if (*coverage) return cmd_experiment(opt, qclt::ExperimentKind::coverage);
    if (*bench) return cmd_experiment(opt, qclt::ExperimentKind::bench);
  } catch (const qclt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}
