#include "qclt/experiments.hpp"

#include "qclt/errors.hpp"
#include "qclt/parallel.hpp"
#include "qclt/qlearning.hpp"
#include "qclt/rng.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace qclt {

namespace {

// Stream tags under the master seed.
enum : std::uint64_t {
  kTagClt = 1,
  kTagCltGaussian = 2,
  kTagFamily = 3,
  kTagMoments = 4,
  kTagCoverage = 5,
  kTagCalibration = 6,
  kTagBench = 7,
  kTagBenchGaussian = 8,
};

constexpr double kCheckSlopeLow = -0.50;
constexpr double kCheckSlopeHigh = -0.05;
constexpr double kCheckKs = 0.05;
constexpr double kCheckMomentBand = 0.15;
constexpr double kCheckCoverageBand = 0.03;
constexpr double kTrendSigmas = 2.0;

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  const auto caret = t.find('^');
  auto parse_plain = [&](const std::string& part) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || ptr != part.data() + part.size()) {
      fail(ErrorKind::ConfigError, "key '" + key + "': expected an integer, got '" + text + "'");
    }
    return v;
  };
  if (caret == std::string::npos) return parse_plain(t);
  const std::int64_t base = parse_plain(t.substr(0, caret));
  const std::int64_t exponent = parse_plain(t.substr(caret + 1));
  if (exponent < 0 || exponent > 62) fail(ErrorKind::ConfigError, "key '" + key + "': exponent out of range");
  std::int64_t v = 1;
  for (std::int64_t i = 0; i < exponent; ++i) {
    if (v > std::numeric_limits<std::int64_t>::max() / std::max<std::int64_t>(base, 1)) {
      fail(ErrorKind::ConfigError, "key '" + key + "': value overflows");
    }
    v *= base;
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) {
    fail(ErrorKind::ConfigError, "key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  const auto slash = t.find('/');
  if (slash != std::string::npos) {
    return parse_real(key, t.substr(0, slash)) / parse_real(key, t.substr(slash + 1));
  }
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) {
    fail(ErrorKind::ConfigError, "key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

MdsGenerator parse_generator(const std::string& text) {
  if (text == "rademacher_iid") return MdsGenerator::rademacher_iid;
  if (text == "scaled_deterministic_qv") return MdsGenerator::scaled_deterministic_qv;
  if (text == "markov_functional") return MdsGenerator::markov_functional;
  fail(ErrorKind::ConfigError, "unknown bench.generator '" + text + "'");
}

template <class T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (const T& v : values) {
    if (!out.empty()) out += ", ";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(v);
    } else {
      out += std::to_string(v);
    }
  }
  return out;
}

void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "kind") {
    cfg.kind = parse_experiment_kind(value);
  } else if (key == "seed") {
    cfg.seed = parse_uint(key, value);
  } else if (key == "mdp.source") {
    if (value != "garnet" && value != "file") fail(ErrorKind::ConfigError, "mdp.source must be garnet or file");
    cfg.mdp_source = value;
  } else if (key == "mdp.file") {
    cfg.mdp_file = value;
  } else if (key == "mdp.S") {
    cfg.garnet_states = static_cast<int>(parse_int(key, value));
  } else if (key == "mdp.A") {
    cfg.garnet_actions = static_cast<int>(parse_int(key, value));
  } else if (key == "mdp.branching") {
    cfg.garnet_branching = static_cast<int>(parse_int(key, value));
  } else if (key == "mdp.gamma") {
    cfg.garnet_gamma = parse_real(key, value);
  } else if (key == "mdp.seed") {
    cfg.garnet_seed = parse_uint(key, value);
  } else if (key == "behavior") {
    if (value != "uniform" && value != "epsilon_greedy") {
      fail(ErrorKind::ConfigError, "behavior must be uniform or epsilon_greedy");
    }
    cfg.behavior = value;
  } else if (key == "behavior.epsilon") {
    cfg.behavior_epsilon = parse_real(key, value);
  } else if (key == "step.c0") {
    if (value == "auto") {
      cfg.step_c0.reset();
    } else {
      cfg.step_c0 = parse_real(key, value);
    }
  } else if (key == "step.omega") {
    cfg.step_omega = parse_real(key, value);
  } else if (key == "step.k0") {
    if (value == "auto") {
      cfg.step_k0.reset();
    } else {
      cfg.step_k0 = parse_int(key, value);
    }
  } else if (key == "n_grid") {
    cfg.n_grid.clear();
    for (const auto& item : split_list(value)) cfg.n_grid.push_back(parse_int(key, item));
  } else if (key == "replicas") {
    cfg.replicas = parse_int(key, value);
  } else if (key == "output") {
    cfg.output = value;
  } else if (key == "family") {
    if (value != "default" && value != "two_sided") fail(ErrorKind::ConfigError, "family must be default or two_sided");
    cfg.family = value;
  } else if (key == "coverage.levels") {
    cfg.coverage_levels.clear();
    for (const auto& item : split_list(value)) cfg.coverage_levels.push_back(parse_real(key, item));
  } else if (key == "coverage.calibration_draws") {
    cfg.calibration_draws = parse_int(key, value);
  } else if (key == "bench.d") {
    cfg.bench_d = static_cast<int>(parse_int(key, value));
  } else if (key == "bench.generator") {
    cfg.bench_generator = parse_generator(value);
  } else if (key == "bench.condition") {
    cfg.bench_condition = parse_real(key, value);
  } else {
    fail(ErrorKind::ConfigError, "unknown key '" + key + "'");
  }
}

double cell_or_nan(const std::optional<RateFit>& fit, double RateFit::*field) {
  return fit ? (*fit).*field : std::numeric_limits<double>::quiet_NaN();
}

// Non-finite values become JSON null so that records round-trip.
nlohmann::json num(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

nlohmann::json vec_json(const VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(num(v(i)));
  return out;
}

nlohmann::json mat_json(const MatrixXd& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(vec_json(m.row(i).transpose()));
  return out;
}

nlohmann::json fit_json(const std::optional<RateFit>& fit) {
  if (!fit) return nullptr;
  return {{"slope", num(fit->slope)}, {"intercept", num(fit->intercept)},
          {"ci", {num(fit->ci_low), num(fit->ci_high)}}};
}

RectangleFamily build_family(const std::string& family, const SampleMatrix& a, const SampleMatrix& b,
                             std::uint64_t seed) {
  RectangleFamily fam = one_sided_max_family(a, b, percent_grid());
  if (family == "two_sided") {
    std::vector<double> levels;
    for (int i = 1; i < 50; ++i) levels.push_back(i / 100.0);
    fam.append(two_sided_grid_family(a, b, levels));
  }
  fam.append(randomized_corners_family(b, 512, seed));
  return fam;
}

struct ReplicaSummary {
  VectorXd scaled;
  double remainder = 0.0;
  double remainder_g = 0.0;
  std::int64_t violations = 0;
};

RunConfig base_run(const Problem& problem, std::int64_t n, std::uint64_t seed,
                   const std::optional<VectorXd>& q_init) {
  RunConfig run = make_run_config(problem.mdp, problem.behavior, problem.schedule, n, seed, problem.chain);
  if (q_init) run.q_init = *q_init;
  return run;
}

SampleMatrix scaled_error_samples(const std::vector<ReplicaSummary>& reps, const std::string& label) {
  MatrixXd rows(static_cast<Eigen::Index>(reps.size()), reps.front().scaled.size());
  for (std::size_t r = 0; r < reps.size(); ++r) rows.row(static_cast<Eigen::Index>(r)) = reps[r].scaled.transpose();
  return make_sample_matrix(std::move(rows), label);
}

}  // namespace

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  (void)ec;
  return std::string(buf, ptr);
}

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::clt: return "clt";
    case ExperimentKind::moments: return "moments";
    case ExperimentKind::coverage: return "coverage";
    case ExperimentKind::bench: return "bench";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(const std::string& text) {
  if (text == "clt") return ExperimentKind::clt;
  if (text == "moments") return ExperimentKind::moments;
  if (text == "coverage") return ExperimentKind::coverage;
  if (text == "bench") return ExperimentKind::bench;
  fail(ErrorKind::ConfigError, "unknown experiment kind '" + text + "'");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::echo() const {
  return {
      {"kind", to_string(kind)},
      {"seed", std::to_string(seed)},
      {"mdp.source", mdp_source},
      {"mdp.file", mdp_file},
      {"mdp.S", std::to_string(garnet_states)},
      {"mdp.A", std::to_string(garnet_actions)},
      {"mdp.branching", std::to_string(garnet_branching)},
      {"mdp.gamma", format_double(garnet_gamma)},
      {"mdp.seed", std::to_string(garnet_seed)},
      {"behavior", behavior},
      {"behavior.epsilon", format_double(behavior_epsilon)},
      {"step.c0", step_c0 ? format_double(*step_c0) : "auto"},
      {"step.omega", format_double(step_omega)},
      {"step.k0", step_k0 ? std::to_string(*step_k0) : "auto"},
      {"n_grid", join(n_grid)},
      {"replicas", std::to_string(replicas)},
      {"output", output},
      {"family", family},
      {"coverage.levels", join(coverage_levels)},
      {"coverage.calibration_draws", std::to_string(calibration_draws)},
      {"bench.d", std::to_string(bench_d)},
      {"bench.generator", to_string(bench_generator)},
      {"bench.condition", format_double(bench_condition)},
  };
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorKind::ConfigError, "line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::ConfigError, "line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    try {
      set_key(cfg, key, trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(ErrorKind::ConfigError, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorKind::ConfigError, "override '" + assignment + "' is not key=value");
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.n_grid.empty()) fail(ErrorKind::ConfigError, "n_grid is empty");
  for (std::size_t i = 0; i < cfg.n_grid.size(); ++i) {
    if (cfg.n_grid[i] < 1) fail(ErrorKind::ConfigError, "n_grid entries must be positive");
    if (i > 0 && cfg.n_grid[i] <= cfg.n_grid[i - 1]) fail(ErrorKind::ConfigError, "n_grid must be strictly increasing");
  }
  if (cfg.replicas < 100) fail(ErrorKind::ConfigError, "statistical experiments need replicas >= 100");
  if (cfg.mdp_source == "file" && cfg.mdp_file.empty()) fail(ErrorKind::ConfigError, "mdp.source = file needs mdp.file");
  if (!(cfg.step_omega > 0.5 && cfg.step_omega < 1.0)) fail(ErrorKind::ConfigError, "step.omega must lie in (1/2, 1)");
  if (cfg.behavior_epsilon <= 0.0 || cfg.behavior_epsilon > 1.0) {
    fail(ErrorKind::ConfigError, "behavior.epsilon must lie in (0, 1]");
  }
  for (double level : cfg.coverage_levels) {
    if (!(level > 0.0 && level <= 1.0)) fail(ErrorKind::ConfigError, "coverage levels must lie in (0, 1]");
  }
  if (cfg.calibration_draws < 2) fail(ErrorKind::ConfigError, "coverage.calibration_draws must be at least 2");
  if (cfg.bench_d < 1) fail(ErrorKind::ConfigError, "bench.d must be positive");
  if (!(cfg.bench_condition >= 1.0)) fail(ErrorKind::ConfigError, "bench.condition must be >= 1");
}

TabularMDP load_problem_mdp(const ExperimentConfig& cfg) {
  if (cfg.mdp_source == "file") return read_mdp_json(cfg.mdp_file);
  return garnet_random_mdp(cfg.garnet_seed, cfg.garnet_states, cfg.garnet_actions, cfg.garnet_branching,
                           cfg.garnet_gamma);
}

Policy make_behavior(const ExperimentConfig& cfg, const TabularMDP& mdp, const PlanningSolution& planning) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  if (cfg.behavior == "uniform") return Policy::uniform(S, A);
  // epsilon-greedy around the optimal policy
  MatrixXd probs = MatrixXd::Constant(S, A, cfg.behavior_epsilon / A);
  for (int s = 0; s < S; ++s) probs(s, planning.pi_star.action(s)) += 1.0 - cfg.behavior_epsilon;
  return Policy::stochastic(probs);
}

Problem prepare_problem(const ExperimentConfig& cfg) {
  Problem p;
  p.mdp = load_problem_mdp(cfg);
  p.planning = solve_optimal(p.mdp);
  p.behavior = make_behavior(cfg, p.mdp, p.planning);
  p.chain = analyze_chain(p.mdp, p.behavior);
  if (!p.chain.uge_certified) fail(ErrorKind::Singular, "behavior policy leaves some state-action pair unvisited");
  p.noise = make_noise_model(p.mdp, p.planning, p.chain);
  p.covariance = covariance_report(p.mdp, p.planning, p.chain, p.noise);
  p.drift = drift_constant(p.mdp.discount, p.chain.mu_min);
  const double c0 = cfg.step_c0.value_or(default_c0(p.drift));
  const std::int64_t k0 =
      cfg.step_k0.value_or(default_k0(c0, cfg.step_omega, p.mdp.discount, p.chain.mu_min));
  p.schedule = make_step_schedule(c0, cfg.step_omega, k0, p.drift);
  return p;
}

nlohmann::json chain_json(const ChainAnalysis& chain) {
  return {{"mu", vec_json(chain.mu)},
          {"mu_min", num(chain.mu_min)},
          {"t_mix", chain.t_mix},
          {"spectral_gap", num(chain.spectral_gap)}};
}

nlohmann::json covariance_json(const CovarianceReport& report) {
  return {{"sigma_eps", mat_json(report.sigma_eps)},
          {"G", mat_json(report.g)},
          {"sigma_infty", mat_json(report.sigma_infty)},
          {"series_K", report.series_lags},
          {"tail_bound", num(report.series_tail_bound)}};
}

nlohmann::json planning_json(const PlanningSolution& planning) {
  return {{"q_star", vec_json(planning.q_star)},
          {"v_star", vec_json(planning.v_star)},
          {"pi_star", planning.pi_star.actions()},
          {"kappa", planning.kappa.infinite ? nlohmann::json("infinite") : num(planning.kappa.value)},
          {"kappa_violated", planning.kappa.violated},
          {"residual", num(planning.residual)},
          {"iterations", planning.iterations}};
}

nlohmann::json problem_context(const Problem& problem) {
  return {{"S", problem.mdp.num_states},
          {"A", problem.mdp.num_actions},
          {"gamma", num(problem.mdp.discount)},
          {"t_mix", problem.chain.t_mix},
          {"mu_min", num(problem.chain.mu_min)},
          {"spectral_gap", num(problem.chain.spectral_gap)},
          {"kappa", problem.planning.kappa.infinite ? nlohmann::json("infinite") : num(problem.planning.kappa.value)},
          {"schedule", {{"c0", num(problem.schedule.c0)}, {"omega", num(problem.schedule.omega)}, {"k0", problem.schedule.k0}}},
          {"drift_b", num(problem.drift)},
          {"g_condition", num(problem.covariance.g_condition)}};
}

CltResult run_clt(const ExperimentConfig& cfg, const Problem& problem, int jobs,
                  const std::optional<VectorXd>& q_init) {
  CltResult result;
  result.seed = cfg.seed;
  const MatrixXd& sigma = problem.covariance.sigma_infty;
  for (std::size_t i = 0; i < cfg.n_grid.size(); ++i) {
    const std::int64_t n = cfg.n_grid[i];
    const RunConfig run = base_run(problem, n, derive_key(cfg.seed, {kTagClt, i}), q_init);
    const auto reps = parallel_map(cfg.replicas, jobs, [&](std::int64_t r) {
      const Trajectory traj = run_trajectory(run, problem.planning.q_star, static_cast<std::uint64_t>(r));
      const PrDecomposition pr = pr_decompose(traj, problem.noise, problem.covariance.g);
      return ReplicaSummary{pr.scaled_error, pr.sup_remainder, pr.sup_remainder_g, traj.bound_violations};
    });
    const SampleMatrix a = scaled_error_samples(reps, "sqrt(n) pr_error");
    const SampleMatrix b = sample_gaussian(sigma, cfg.replicas, derive_key(cfg.seed, {kTagCltGaussian, i}), jobs);
    const RectangleFamily fam = build_family(cfg.family, a, b, derive_key(cfg.seed, {kTagFamily, i}));

    CltCell cell;
    cell.n = n;
    cell.dk = estimate_dk(a, b, fam);
    cell.ks = marginal_ks(a, sigma);
    cell.ks_max = cell.ks.maxCoeff();
    for (const auto& rep : reps) {
      cell.remainder_mean += rep.remainder;
      cell.remainder_g_mean += rep.remainder_g;
      cell.bound_violations += rep.violations;
    }
    cell.remainder_mean /= static_cast<double>(reps.size());
    cell.remainder_g_mean /= static_cast<double>(reps.size());
    cell.bias_sup = a.rows.colwise().mean().cwiseAbs().maxCoeff();
    result.cells.push_back(std::move(cell));
    result.family_kind = fam.label();
    result.family_count = fam.count();
  }
  if (result.cells.size() >= 3) {
    std::vector<std::pair<double, double>> dk_points;
    std::vector<std::pair<double, double>> rem_points;
    bool dk_positive = true;
    bool rem_positive = true;
    for (const auto& c : result.cells) {
      dk_points.emplace_back(static_cast<double>(c.n), c.dk.value);
      rem_points.emplace_back(static_cast<double>(c.n), c.remainder_mean);
      dk_positive = dk_positive && c.dk.value > 0.0;
      rem_positive = rem_positive && c.remainder_mean > 0.0;
    }
    if (dk_positive) result.dk_fit = rate_fit(dk_points, cfg.seed);
    if (rem_positive) result.remainder_fit = rate_fit(rem_points, cfg.seed);
  }
  return result;
}

MomentResult run_moments(const ExperimentConfig& cfg, const Problem& problem, int jobs,
                         const std::optional<VectorXd>& q_init) {
  MomentResult result;
  result.horizon = cfg.n_grid.back();
  result.reference_slope = -cfg.step_omega / 2.0;
  const RunConfig run = base_run(problem, result.horizon, derive_key(cfg.seed, {kTagMoments}), q_init);
  const auto errors = parallel_map(cfg.replicas, jobs, [&](std::int64_t r) {
    return run_trajectory(run, problem.planning.q_star, static_cast<std::uint64_t>(r)).recorded_errors;
  });
  const std::size_t checkpoints = errors.front().size();
  const auto R = static_cast<double>(errors.size());
  std::vector<std::pair<double, double>> points;
  for (std::size_t c = 0; c < checkpoints; ++c) {
    MomentRow row;
    row.t = errors.front()[c].t;
    double m1 = 0.0;
    double m2 = 0.0;
    double m4 = 0.0;
    for (const auto& e : errors) {
      const double x = e[c].sup_err;
      m1 += x;
      m2 += x * x;
      m4 += x * x * x * x;
    }
    row.mean = m1 / R;
    row.l2 = std::sqrt(m2 / R);
    row.l4 = std::pow(m4 / R, 0.25);
    if (row.t >= cfg.n_grid.front() && row.t <= cfg.n_grid.back() && row.mean > 0.0) {
      points.emplace_back(static_cast<double>(row.t), row.mean);
    }
    result.rows.push_back(row);
  }
  result.fit = rate_fit(points, cfg.seed);
  return result;
}

CoverageResultSet run_coverage(const ExperimentConfig& cfg, const Problem& problem, int jobs,
                               const std::optional<VectorXd>& q_init) {
  CoverageResultSet result;
  result.n = cfg.n_grid.back();
  const RunConfig run = base_run(problem, result.n, derive_key(cfg.seed, {kTagCoverage}), q_init);
  const double root_n = std::sqrt(static_cast<double>(result.n));
  const auto reps = parallel_map(cfg.replicas, jobs, [&](std::int64_t r) {
    const Trajectory traj = run_trajectory(run, problem.planning.q_star, static_cast<std::uint64_t>(r));
    return ReplicaSummary{root_n * traj.pr_error, 0.0, 0.0, traj.bound_violations};
  });
  const SampleMatrix samples = scaled_error_samples(reps, "sqrt(n) pr_error");
  for (std::size_t l = 0; l < cfg.coverage_levels.size(); ++l) {
    result.levels.push_back(coverage_experiment(samples, problem.covariance.sigma_infty, cfg.coverage_levels[l],
                                                cfg.calibration_draws,
                                                derive_key(cfg.seed, {kTagCalibration, l}), jobs));
  }
  return result;
}

BenchResult run_bench(const ExperimentConfig& cfg, const std::optional<Problem>& problem, int jobs) {
  BenchResult result;
  for (std::size_t i = 0; i < cfg.n_grid.size(); ++i) {
    MdsBenchSpec spec;
    spec.d = cfg.bench_d;
    spec.n = cfg.n_grid[i];
    spec.generator = cfg.bench_generator;
    spec.seed = derive_key(cfg.seed, {kTagBench, i});
    spec.replicas = cfg.replicas;
    if (spec.generator == MdsGenerator::scaled_deterministic_qv) {
      // diagonal spread from 1 down to 1/condition, scaled so V_k sums to O(1)
      VectorXd diag(spec.d);
      for (int j = 0; j < spec.d; ++j) {
        const double frac = spec.d == 1 ? 0.0 : static_cast<double>(j) / (spec.d - 1);
        diag(j) = std::pow(cfg.bench_condition, -frac);
      }
      spec.mixing = {MatrixXd(diag.asDiagonal()) / std::sqrt(static_cast<double>(spec.n))};
    } else if (spec.generator == MdsGenerator::markov_functional) {
      if (!problem) fail(ErrorKind::InvalidSpec, "markov_functional bench needs an MDP");
      spec.d = problem->mdp.num_pairs();
      spec.chain = MarkovFunctional{problem->chain.triple_kernel, problem->chain.mu_bar,
                                    problem->noise.phi_eps.phi, problem->noise.next_phi_eps};
    }
    const MdsSample sample = mds_generate(spec, jobs);
    const MatrixXd shift = spec.shift_sigma.value_or(sample.sigma_n / static_cast<double>(spec.n));
    const SampleMatrix gauss = sample_gaussian(sample.sigma_n, cfg.replicas, derive_key(cfg.seed, {kTagBenchGaussian, i}), jobs);
    const RectangleFamily fam = build_family(cfg.family, sample.s_n, gauss, derive_key(cfg.seed, {kTagFamily, i}));

    BenchCell cell;
    cell.n = spec.n;
    cell.dk = estimate_dk(sample.s_n, gauss, fam);
    cell.moment_sum = bracket_moment_sum(sample, spec.n, shift);
    cell.bracket = theorem1_bracket(sample.sigma_n, shift, cell.moment_sum);
    result.cells.push_back(cell);
    result.family_kind = fam.label();
    result.family_count = fam.count();
  }
  result.fitted_constant = result.cells.front().dk.value / result.cells.front().bracket;
  for (const auto& c : result.cells) result.ratios.push_back(c.dk.value / c.bracket);
  if (result.cells.size() >= 3) {
    std::vector<std::pair<double, double>> dk_points;
    std::vector<std::pair<double, double>> br_points;
    bool positive = true;
    for (const auto& c : result.cells) {
      dk_points.emplace_back(static_cast<double>(c.n), c.dk.value);
      br_points.emplace_back(static_cast<double>(c.n), c.bracket);
      positive = positive && c.dk.value > 0.0;
    }
    if (positive) result.dk_fit = rate_fit(dk_points, cfg.seed);
    result.bracket_fit = rate_fit(br_points, cfg.seed);
  }
  return result;
}

bool decreasing_within(const std::vector<double>& values, const std::vector<double>& se, double k, bool strict) {
  for (std::size_t i = 0; i + 1 < values.size(); ++i) {
    const double slack = k * std::sqrt(se[i] * se[i] + se[i + 1] * se[i + 1]);
    const bool ok = strict ? values[i + 1] < values[i] + slack : values[i + 1] <= values[i] + slack;
    if (!ok) return false;
  }
  return true;
}

std::vector<CheckItem> check_clt(const CltResult& result) {
  std::vector<double> dk;
  std::vector<double> se;
  std::vector<double> rem;
  for (const auto& c : result.cells) {
    dk.push_back(c.dk.value);
    se.push_back(c.dk.standard_error);
    rem.push_back(c.remainder_mean);
  }
  std::vector<CheckItem> out;
  std::ostringstream d;
  d << "dk = [" << join(dk) << "], se = [" << join(se) << "]";
  out.push_back({"dk decreasing within 2 SE", decreasing_within(dk, se, kTrendSigmas, true), d.str()});

  const double slope = cell_or_nan(result.dk_fit, &RateFit::slope);
  out.push_back({"dk slope in [-0.50, -0.05]", slope >= kCheckSlopeLow && slope <= kCheckSlopeHigh,
                 "slope = " + format_double(slope)});

  const double ks = result.cells.back().ks_max;
  out.push_back({"marginal KS at largest n below 0.05", ks < kCheckKs, "max KS = " + format_double(ks)});

  bool rem_decreasing = true;
  for (std::size_t i = 0; i + 1 < rem.size(); ++i) rem_decreasing = rem_decreasing && rem[i + 1] < rem[i];
  const double rem_slope = cell_or_nan(result.remainder_fit, &RateFit::slope);
  out.push_back({"remainder decreasing with negative slope", rem_decreasing && rem_slope < 0.0,
                 "remainder = [" + join(rem) + "], slope = " + format_double(rem_slope)});
  return out;
}

std::vector<CheckItem> check_moments(const MomentResult& result, double omega) {
  std::vector<CheckItem> out;
  const double target = -omega / 2.0;
  out.push_back({"moment slope within -omega/2 +- 0.15", std::abs(result.fit.slope - target) <= kCheckMomentBand,
                 "slope = " + format_double(result.fit.slope) + ", reference = " + format_double(target)});
  bool monotone = true;
  for (const auto& row : result.rows) monotone = monotone && row.mean <= row.l2 * (1 + 1e-12) && row.l2 <= row.l4 * (1 + 1e-12);
  out.push_back({"power means ordered at every checkpoint", monotone, ""});
  return out;
}

std::vector<CheckItem> check_coverage(const CoverageResultSet& result) {
  std::vector<CheckItem> out;
  for (const auto& level : result.levels) {
    out.push_back({"coverage within 0.03 at nominal " + format_double(level.nominal),
                   std::abs(level.rate - level.nominal) <= kCheckCoverageBand,
                   "rate = " + format_double(level.rate) + ", threshold = " + format_double(level.threshold)});
  }
  return out;
}

std::vector<CheckItem> check_bench(const BenchResult& result) {
  std::vector<double> dk;
  std::vector<double> se;
  for (const auto& c : result.cells) {
    dk.push_back(c.dk.value);
    se.push_back(c.dk.standard_error);
  }
  std::vector<CheckItem> out;
  out.push_back({"dk non-increasing within 2 SE", decreasing_within(dk, se, kTrendSigmas, false),
                 "dk = [" + join(dk) + "], se = [" + join(se) + "]"});
  bool bounded = true;
  for (const auto& c : result.cells) {
    bounded = bounded && c.dk.value <= result.fitted_constant * c.bracket * (1.0 + 1e-12);
  }
  out.push_back({"dk <= c * bracket with c fitted at the smallest n", bounded,
                 "c = " + format_double(result.fitted_constant) + ", ratios = [" + join(result.ratios) + "]"});
  return out;
}

nlohmann::json clt_json(const CltResult& result) {
  nlohmann::json j;
  std::vector<std::int64_t> n;
  nlohmann::json dk = nlohmann::json::array();
  nlohmann::json se = nlohmann::json::array();
  nlohmann::json ks = nlohmann::json::array();
  nlohmann::json rem = nlohmann::json::array();
  nlohmann::json rem_g = nlohmann::json::array();
  nlohmann::json bias = nlohmann::json::array();
  std::int64_t violations = 0;
  for (const auto& c : result.cells) {
    n.push_back(c.n);
    dk.push_back(num(c.dk.value));
    se.push_back(num(c.dk.standard_error));
    ks.push_back(num(c.ks_max));
    rem.push_back(num(c.remainder_mean));
    rem_g.push_back(num(c.remainder_g_mean));
    bias.push_back(num(c.bias_sup));
    violations += c.bound_violations;
  }
  j["n"] = n;
  j["dk"] = dk;
  j["dk_se"] = se;
  j["slope"] = result.dk_fit ? num(result.dk_fit->slope) : nlohmann::json(nullptr);
  j["slope_ci"] = result.dk_fit ? nlohmann::json{num(result.dk_fit->ci_low), num(result.dk_fit->ci_high)}
                                : nlohmann::json(nullptr);
  j["family"] = {{"kind", result.family_kind}, {"count", result.family_count}};
  j["seed"] = result.seed;
  j["ks_max"] = ks;
  j["remainder_sup_mean"] = rem;
  j["remainder_g_sup_mean"] = rem_g;
  j["remainder_fit"] = fit_json(result.remainder_fit);
  j["bias_sup"] = bias;
  j["bound_violations"] = violations;
  return j;
}

nlohmann::json moments_json(const MomentResult& result) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"t", r.t}, {"mean", num(r.mean)}, {"l2", num(r.l2)}, {"l4", num(r.l4)}});
  }
  return {{"horizon", result.horizon}, {"rows", rows}, {"fit", fit_json(result.fit)},
          {"reference_slope", num(result.reference_slope)}};
}

nlohmann::json coverage_json(const CoverageResultSet& result) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : result.levels) {
    levels.push_back({{"nominal", num(l.nominal)}, {"rate", num(l.rate)}, {"se", num(l.standard_error)},
                      {"threshold", num(l.threshold)}});
  }
  return {{"n", result.n}, {"levels", levels}};
}

nlohmann::json bench_json(const BenchResult& result) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : result.cells) {
    cells.push_back({{"n", c.n}, {"dk", num(c.dk.value)}, {"dk_se", num(c.dk.standard_error)},
                     {"bracket", num(c.bracket)}, {"moment_sum", num(c.moment_sum)}});
  }
  nlohmann::json ratios = nlohmann::json::array();
  for (double r : result.ratios) ratios.push_back(num(r));
  return {{"cells", cells},
          {"dk_fit", fit_json(result.dk_fit)},
          {"bracket_fit", fit_json(result.bracket_fit)},
          {"fitted_constant", num(result.fitted_constant)},
          {"ratios", ratios},
          {"family", {{"kind", result.family_kind}, {"count", result.family_count}}}};
}

std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) fail(ErrorKind::IoError, "cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) fail(ErrorKind::IoError, "SHA-1 digest failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

std::string input_hash(const ExperimentConfig& cfg, const TabularMDP* mdp) {
  std::string content;
  for (const auto& [k, v] : cfg.echo()) {
    if (k == "output") continue;
    content += k + " = " + v + "\n";
  }
  if (mdp != nullptr) content += mdp_to_json_string(*mdp);
  return git_blob_hash(content);
}

nlohmann::json record_json(const ResultRecord& record) {
  nlohmann::json config = nlohmann::json::array();
  for (const auto& [k, v] : record.config) config.push_back({k, v});
  return {{"config", config},
          {"input_hash", record.input_hash},
          {"metrics", record.metrics},
          {"wall_clock_seconds", num(record.wall_clock_seconds)},
          {"library_version", record.library_version}};
}

ResultRecord record_from_json(const nlohmann::json& j) {
  try {
    ResultRecord r;
    for (const auto& pair : j.at("config")) r.config.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
    r.input_hash = j.at("input_hash").get<std::string>();
    r.metrics = j.at("metrics");
    r.wall_clock_seconds = j.at("wall_clock_seconds").is_null() ? 0.0 : j.at("wall_clock_seconds").get<double>();
    r.library_version = j.at("library_version").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ParseError, std::string("result record has the wrong shape: ") + e.what());
  }
}

std::string persist(const ResultRecord& record, const std::string& dir, const std::string& stem, bool force) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::IoError, "cannot create '" + dir + "': " + ec.message());
  const std::string path = (fs::path(dir) / (stem + ".json")).string();
  if (fs::exists(path) && !force) fail(ErrorKind::IoError, "refusing to overwrite '" + path + "' (pass --force)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot write '" + path + "'");
  out << record_json(record).dump(2) << '\n';
  if (!out) fail(ErrorKind::IoError, "write to '" + path + "' failed");
  return path;
}

ResultRecord load_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::ParseError, "'" + path + "' at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return record_from_json(j);
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(path) && !force) fail(ErrorKind::IoError, "refusing to overwrite '" + path + "' (pass --force)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot write '" + path + "'");
  out << kCsvSchemaLine << '\n';
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
  if (!out) fail(ErrorKind::IoError, "write to '" + path + "' failed");
}

std::vector<std::vector<std::string>> clt_csv_rows(const CltResult& result) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : result.cells) {
    rows.push_back({std::to_string(c.n), format_double(c.dk.value), format_double(c.dk.standard_error),
                    format_double(c.ks_max), format_double(c.remainder_mean), format_double(c.remainder_g_mean),
                    format_double(c.bias_sup)});
  }
  return rows;
}

std::vector<std::vector<std::string>> moments_csv_rows(const MomentResult& result) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : result.rows) {
    rows.push_back({std::to_string(r.t), format_double(r.mean), format_double(r.l2), format_double(r.l4)});
  }
  return rows;
}

std::vector<std::vector<std::string>> coverage_csv_rows(const CoverageResultSet& result) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& l : result.levels) {
    rows.push_back({std::to_string(result.n), format_double(l.nominal), format_double(l.rate),
                    format_double(l.standard_error), format_double(l.threshold)});
  }
  return rows;
}

std::vector<std::vector<std::string>> bench_csv_rows(const BenchResult& result) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const auto& c = result.cells[i];
    rows.push_back({std::to_string(c.n), format_double(c.dk.value), format_double(c.dk.standard_error),
                    format_double(c.bracket), format_double(result.ratios[i])});
  }
  return rows;
}

}  // namespace qclt
