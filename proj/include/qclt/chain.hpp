#pragma once

#include "qclt/mdp.hpp"

namespace qclt {

/// Flat index of the triple (s, a, s') in the triple chain.
inline int triple_index(int s, int a, int s_next, int num_actions, int num_states) noexcept {
  return (s * num_actions + a) * num_states + s_next;
}

struct ChainAnalysis {
  VectorXd mu;      // stationary law of (s,a) under the behavior policy, length S*A
  VectorXd mu_bar;  // stationary law of (s,a,s'), length S*A*S
  double mu_min = 0.0;
  int t_mix = 0;
  double spectral_gap = 0.0;
  bool uge_certified = false;
  /// Row-stochastic (S*A*S) x (S*A*S) kernel of the triple chain.
  MatrixXd triple_kernel;
};

struct PoissonSolution {
  MatrixXd phi;  // one column per component of the input function
  double residual = 0.0;
  double sup_norm = 0.0;
};

/// Unique v >= 0, sum v = 1, v K = v. Throws NonUniqueStationary for a
/// reducible kernel with several closed classes.
VectorXd stationary_distribution(const MatrixXd& kernel);

/// Entry ((s1,a1,s1'),(s2,a2,s2')) = 1{s2 = s1'} pi(a2|s2) P(s2'|s2,a2).
MatrixXd build_triple_kernel(const TabularMDP& mdp, const Policy& behavior);

/// Total variation distance (1/2) sum |p - q|.
double total_variation(const Eigen::Ref<const VectorXd>& p, const Eigen::Ref<const VectorXd>& q);

/// Worst-row TV distance of kernel^t to the stationary law, for t = 1..cap,
/// stopping at the first t with distance <= 1/4. Returned vector holds the
/// distances for t = 1..(returned size).
std::vector<double> tv_profile(const MatrixXd& kernel, const VectorXd& stationary, int cap);

/// Smallest t >= 1 with max_x TV(K^t(x,.), stationary) <= 1/4.
int mixing_time(const MatrixXd& kernel, const VectorXd& stationary, int cap = 4096);

/// 1 - (second-largest eigenvalue modulus) over the complex spectrum.
double spectral_gap(const MatrixXd& kernel);

/// Solves Phi - K Phi = f - 1 (stationary^T f) with stationary^T Phi = 0.
PoissonSolution poisson_solve(const MatrixXd& kernel, const VectorXd& stationary,
                              const MatrixXd& f);

/// Behavior-chain analysis of an MDP: both stationary laws, mixing time,
/// spectral gap, and the triple kernel.
ChainAnalysis analyze_chain(const TabularMDP& mdp, const Policy& behavior,
                            int mixing_cap = 4096);

}  // namespace qclt
