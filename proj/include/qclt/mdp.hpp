#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace qclt {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Finite discounted MDP with deterministic rewards in [0,1].
///
/// State-action pairs are flattened as `s * A + a` everywhere in the library
/// and in every file format; `transition` has one row per pair and one column
/// per next state.
struct TabularMDP {
  int num_states = 0;
  int num_actions = 0;
  MatrixXd transition;  // (S*A) x S
  VectorXd reward;      // S*A
  double discount = 0.0;

  int num_pairs() const noexcept { return num_states * num_actions; }
  int pair_index(int s, int a) const noexcept { return s * num_actions + a; }
  double horizon_bound() const noexcept { return 1.0 / (1.0 - discount); }
};

/// One human-readable line per violated invariant; empty when valid.
std::vector<std::string> validate_mdp(const TabularMDP& mdp);

/// Throws InvalidParameter listing every violation.
void require_valid(const TabularMDP& mdp);

class Policy {
public:
  enum class Kind { deterministic, stochastic };

  static Policy deterministic(std::vector<int> actions, int num_actions);
  static Policy stochastic(MatrixXd probabilities);
  static Policy uniform(int num_states, int num_actions);

  Kind kind() const noexcept { return kind_; }
  int num_states() const noexcept { return num_states_; }
  int num_actions() const noexcept { return num_actions_; }

  double prob(int s, int a) const;
  /// Only meaningful for deterministic policies.
  int action(int s) const { return actions_.at(static_cast<std::size_t>(s)); }
  const std::vector<int>& actions() const noexcept { return actions_; }
  /// S x A probability table regardless of kind.
  MatrixXd table() const;

private:
  Kind kind_ = Kind::deterministic;
  int num_states_ = 0;
  int num_actions_ = 0;
  std::vector<int> actions_;
  MatrixXd probs_;
};

/// Optimality gap; `infinite` when A = 1 (empty minimum).
struct OptimalityGap {
  double value = 0.0;
  bool infinite = false;
  /// Two maximizing actions in some state: unique-optimal-policy assumption fails.
  bool violated = false;
};

struct PlanningSolution {
  VectorXd q_star;
  VectorXd v_star;
  Policy pi_star;
  OptimalityGap kappa;
  double residual = 0.0;
  int iterations = 0;
};

PlanningSolution solve_optimal(const TabularMDP& mdp, double tol = 1e-12,
                               int max_iter = 1'000'000);

/// Argmax per state, ties toward the smallest action index.
Policy greedy_policy(const VectorXd& q, int num_states, int num_actions);

OptimalityGap optimality_gap(const VectorXd& q_star, const VectorXd& v_star,
                             int num_states, int num_actions);

/// Bellman optimality operator (T q)(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) max_a' q(s',a').
VectorXd bellman_optimality(const TabularMDP& mdp, const VectorXd& q);

/// Per-state maximum of a state-action vector.
VectorXd max_reduce(const VectorXd& q, int num_states, int num_actions);

/// P^pi((s,a),(s',a')) = P(s'|s,a) pi(a'|s').
MatrixXd induced_kernel(const TabularMDP& mdp, const Policy& policy);

TabularMDP garnet_random_mdp(std::uint64_t seed, int num_states, int num_actions,
                             int branching, double discount);

/// Reads {"S","A","gamma","reward","transition"}; validates on load.
TabularMDP read_mdp_json(const std::string& path);
void write_mdp_json(const TabularMDP& mdp, const std::string& path);
std::string mdp_to_json_string(const TabularMDP& mdp);
TabularMDP mdp_from_json_string(const std::string& text);

}  // namespace qclt
