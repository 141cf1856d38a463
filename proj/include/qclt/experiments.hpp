#pragma once

#include "qclt/chain.hpp"
#include "qclt/covariance.hpp"
#include "qclt/gaussian_eval.hpp"
#include "qclt/mdp.hpp"
#include "qclt/schedule.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qclt {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr const char* kCsvSchemaLine = "# q-clt-lab schema v1";

enum class ExperimentKind { clt, moments, coverage, bench };

std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(const std::string& text);

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::clt;
  std::uint64_t seed = 0;

  std::string mdp_source = "garnet";  // garnet | file
  std::string mdp_file;
  int garnet_states = 3;
  int garnet_actions = 2;
  int garnet_branching = 3;
  double garnet_gamma = 0.7;
  std::uint64_t garnet_seed = 1;

  std::string behavior = "uniform";  // uniform | epsilon_greedy
  double behavior_epsilon = 0.1;

  std::optional<double> step_c0;  // default 1/(2b)
  double step_omega = 2.0 / 3.0;
  std::optional<std::int64_t> step_k0;  // default from default_k0

  std::vector<std::int64_t> n_grid{1024, 4096, 16384, 65536};
  std::int64_t replicas = 2000;
  std::string output = "results";

  std::string family = "default";  // default | two_sided
  std::vector<double> coverage_levels{0.8, 0.9, 0.95};
  std::int64_t calibration_draws = 100000;

  int bench_d = 5;
  MdsGenerator bench_generator = MdsGenerator::rademacher_iid;
  double bench_condition = 1.0;  // spread of the scaled_deterministic_qv mixing matrix

  /// Flat key/value echo in a fixed key order.
  std::vector<std::pair<std::string, std::string>> echo() const;
};

/// Parses "key = value" lines; "[section]" headers prefix later keys with
/// "section."; '#' starts a comment. Lists are comma separated and integers
/// accept the form 2^k. Throws ConfigError naming the line.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Applies one "key=value" override.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

/// Throws ConfigError when invariants fail (n_grid strictly increasing,
/// R >= 100 for statistical experiments, ...).
void validate_config(const ExperimentConfig& cfg);

/// Everything derived from the MDP that the experiments share.
struct Problem {
  TabularMDP mdp;
  Policy behavior;
  PlanningSolution planning;
  ChainAnalysis chain;
  NoiseModel noise;
  CovarianceReport covariance;
  StepSchedule schedule;
  double drift = 0.0;  // b = (1 - gamma) mu_min
};

TabularMDP load_problem_mdp(const ExperimentConfig& cfg);
Policy make_behavior(const ExperimentConfig& cfg, const TabularMDP& mdp, const PlanningSolution& planning);
Problem prepare_problem(const ExperimentConfig& cfg);

/// Chain, schedule and optimality-gap summary embedded in every report.
nlohmann::json problem_context(const Problem& problem);

nlohmann::json chain_json(const ChainAnalysis& chain);
nlohmann::json covariance_json(const CovarianceReport& report);
nlohmann::json planning_json(const PlanningSolution& planning);

struct CltCell {
  std::int64_t n = 0;
  DkEstimate dk;
  double ks_max = 0.0;
  VectorXd ks;
  double remainder_mean = 0.0;    // mean ||sqrt(n) Delta-bar - W_n||_inf
  double remainder_g_mean = 0.0;  // mean ||sqrt(n) G Delta-bar - G W_n||_inf
  double bias_sup = 0.0;          // ||mean of sqrt(n) Delta-bar||_inf
  std::int64_t bound_violations = 0;
};

struct CltResult {
  std::vector<CltCell> cells;
  std::optional<RateFit> dk_fit;         // needs >= 3 grid points
  std::optional<RateFit> remainder_fit;
  std::string family_kind;
  int family_count = 0;
  std::uint64_t seed = 0;
};

/// R replicas per n of sqrt(n) Delta-bar_n compared against samples of
/// N(0, Sigma_infty). Replica r at grid index i draws from (seed, i, r).
/// `q_init` overrides the zero start.
CltResult run_clt(const ExperimentConfig& cfg, const Problem& problem, int jobs,
                  const std::optional<VectorXd>& q_init = std::nullopt);

struct MomentRow {
  std::int64_t t = 0;
  double mean = 0.0;  // E ||Delta_t||
  double l2 = 0.0;    // E^{1/2} ||Delta_t||^2
  double l4 = 0.0;    // E^{1/4} ||Delta_t||^4
};

struct MomentResult {
  std::vector<MomentRow> rows;
  RateFit fit;  // over t in [n_grid.front(), n_grid.back()]
  double reference_slope = 0.0;
  std::int64_t horizon = 0;
};

MomentResult run_moments(const ExperimentConfig& cfg, const Problem& problem, int jobs,
                         const std::optional<VectorXd>& q_init = std::nullopt);

struct CoverageResultSet {
  std::int64_t n = 0;
  std::vector<CoverageResult> levels;
};

CoverageResultSet run_coverage(const ExperimentConfig& cfg, const Problem& problem, int jobs,
                               const std::optional<VectorXd>& q_init = std::nullopt);

struct BenchCell {
  std::int64_t n = 0;
  DkEstimate dk;
  double bracket = 0.0;
  double moment_sum = 0.0;
};

struct BenchResult {
  std::vector<BenchCell> cells;
  std::optional<RateFit> dk_fit;  // needs >= 3 grid points
  std::optional<RateFit> bracket_fit;
  double fitted_constant = 0.0;  // dk / bracket at the smallest n
  std::vector<double> ratios;    // dk / bracket per n
  std::string family_kind;
  int family_count = 0;
};

/// The bench needs no MDP except for the markov_functional generator.
BenchResult run_bench(const ExperimentConfig& cfg, const std::optional<Problem>& problem, int jobs);

/// dk[i+1] < dk[i] + k sqrt(se_i^2 + se_{i+1}^2) for all i (strict), or <=
/// when `strict` is false.
bool decreasing_within(const std::vector<double>& values, const std::vector<double>& se, double k,
                       bool strict);

struct CheckItem {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<CheckItem> check_clt(const CltResult& result);
std::vector<CheckItem> check_moments(const MomentResult& result, double omega);
std::vector<CheckItem> check_coverage(const CoverageResultSet& result);
std::vector<CheckItem> check_bench(const BenchResult& result);

nlohmann::json clt_json(const CltResult& result);
nlohmann::json moments_json(const MomentResult& result);
nlohmann::json coverage_json(const CoverageResultSet& result);
nlohmann::json bench_json(const BenchResult& result);

struct ResultRecord {
  std::vector<std::pair<std::string, std::string>> config;
  std::string input_hash;  // git-style blob SHA-1 of the config echo and MDP
  nlohmann::json metrics;
  double wall_clock_seconds = 0.0;
  std::string library_version = kLibraryVersion;

  friend bool operator==(const ResultRecord&, const ResultRecord&) = default;
};

/// SHA-1 over "blob <size>\0" followed by the content, as git hashes files.
std::string git_blob_hash(const std::string& content);

std::string input_hash(const ExperimentConfig& cfg, const TabularMDP* mdp);

nlohmann::json record_json(const ResultRecord& record);
ResultRecord record_from_json(const nlohmann::json& j);

/// Writes <dir>/<stem>.json and returns its path. Refuses to overwrite an
/// existing file unless `force`. Throws IoError.
std::string persist(const ResultRecord& record, const std::string& dir, const std::string& stem, bool force);

/// Throws IoError or ParseError (naming the byte offset).
ResultRecord load_record(const std::string& path);

/// Writes a CSV with the schema header line; refuses to overwrite unless `force`.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows, bool force);

std::vector<std::vector<std::string>> clt_csv_rows(const CltResult& result);
std::vector<std::vector<std::string>> moments_csv_rows(const MomentResult& result);
std::vector<std::vector<std::string>> coverage_csv_rows(const CoverageResultSet& result);
std::vector<std::vector<std::string>> bench_csv_rows(const BenchResult& result);

/// Shortest round-trip decimal form.
std::string format_double(double value);

}  // namespace qclt
