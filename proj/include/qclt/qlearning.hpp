#pragma once

#include "qclt/chain.hpp"
#include "qclt/covariance.hpp"
#include "qclt/mdp.hpp"
#include "qclt/schedule.hpp"

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace qclt {

struct Triple {
  int s = 0;
  int a = 0;
  int s_next = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
};

struct RunConfig {
  TabularMDP mdp;
  Policy behavior;
  StepSchedule schedule;
  std::int64_t horizon = 1;
  std::uint64_t seed = 0;
  VectorXd q_init;                      // defaults to zero
  bool diagnostics = false;
  VectorXd initial_state_distribution;  // law of the preliminary state s_{-1}
  bool record_triples = false;
};

/// Config with the default start: Q_0 = 0 and s_{-1} drawn from the state
/// marginal of mu.
RunConfig make_run_config(const TabularMDP& mdp, const Policy& behavior,
                          const StepSchedule& schedule, std::int64_t horizon,
                          std::uint64_t seed, const ChainAnalysis& chain);

/// Throws InvalidParameter when the config breaks its invariants.
void validate_run_config(const RunConfig& cfg);

struct Checkpoint {
  std::int64_t t = 0;
  double sup_err = 0.0;
  double sup_err_delta1 = std::numeric_limits<double>::quiet_NaN();
  double sup_err_delta2 = std::numeric_limits<double>::quiet_NaN();
};

struct Trajectory {
  std::int64_t horizon = 0;
  VectorXd final_q;
  VectorXd pr_average;  // mean of Q_1..Q_n
  VectorXd pr_error;    // pr_average - Q*
  std::vector<std::int64_t> visit_counts;
  std::vector<Checkpoint> recorded_errors;  // t = 1, 2, 4, ... <= n
  /// x_{-1}, x_0, ..., x_n when triples are recorded.
  std::vector<Triple> triples;
  /// Visits of x_t for t = 1..n and of x_{t-1} for t = 1..n; together they
  /// give sum_t Phi(x_t) - (P-bar Phi)(x_{t-1}) for any Phi.
  std::vector<std::int64_t> head_counts;
  std::vector<std::int64_t> tail_counts;
  std::int64_t bound_violations = 0;
};

struct SandwichDiagnostics {
  VectorXd delta1;
  VectorXd delta2;
  std::int64_t violation_count = 0;
  double max_violation = 0.0;
  std::int64_t tie_events = 0;        // steps where Q_t had tied greedy actions
  std::int64_t max_changed_entries = 0;
  double recursion_residual = 0.0;    // error-recursion identity check, sup norm
};

struct DiagnosticRun {
  Trajectory trajectory;
  SandwichDiagnostics sandwich;
};

/// One asynchronous Q-learning update at (s, a) with target r + gamma max q(s', .).
void q_step_inplace(VectorXd& q, const Triple& x, double alpha, const TabularMDP& mdp);
VectorXd q_step(const VectorXd& q, const Triple& x, double alpha, const TabularMDP& mdp);

/// Simulates n steps of Algorithm-style asynchronous Q-learning driven by the
/// behavior policy. Replica r draws from the stream keyed by (seed, r).
Trajectory run_trajectory(const RunConfig& cfg, const VectorXd& q_star, std::uint64_t replica = 0);

/// Same trajectory (bit-identical iterates) plus the lower/upper envelope
/// sequences and the realized triples. Requires S*A <= 4096.
DiagnosticRun run_with_diagnostics(const RunConfig& cfg, const PlanningSolution& planning,
                                   const ChainAnalysis& chain, std::uint64_t replica = 0);

/// Noise term xi_t for iterate q observed at triple x.
VectorXd noise_xi(const VectorXd& q, const Triple& x, const TabularMDP& mdp,
                  const PlanningSolution& planning, const VectorXd& mu);

struct NoiseSplit {
  VectorXd xi;
  VectorXd martingale;  // xi^(0)
  VectorXd remainder;   // xi^(1)
};

/// Poisson split of xi_t given the previous and current triples.
NoiseSplit split_noise(const VectorXd& q, const Triple& prev, const Triple& cur,
                       const TabularMDP& mdp, const PlanningSolution& planning,
                       const ChainAnalysis& chain, const NoiseModel& noise,
                       const PoissonBundle& bundle);

/// E[xi^(0)_t | past] by enumeration over the successors of `prev`.
VectorXd conditional_mean_xi0(const VectorXd& q, const Triple& prev, const TabularMDP& mdp,
                              const ChainAnalysis& chain, const PlanningSolution& planning,
                              const NoiseModel& noise, const PoissonBundle& bundle);

/// Running mean with per-coordinate compensated summation.
class PolyakAverager {
public:
  void push(const VectorXd& q);
  std::int64_t count() const noexcept { return count_; }
  VectorXd mean() const;

private:
  VectorXd sum_;
  VectorXd carry_;
  std::int64_t count_ = 0;
};

VectorXd polyak_average(std::span<const VectorXd> stream);

}  // namespace qclt
