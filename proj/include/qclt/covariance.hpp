#pragma once

#include "qclt/chain.hpp"
#include "qclt/mdp.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qclt {

/// Bellman noise at optimality on the triple chain together with its
/// Poisson solution.
struct NoiseModel {
  MatrixXd eps_table;        // (S*A*S) x (S*A); row x is eps(x)^T
  PoissonSolution phi_eps;   // Poisson solution of eps on the triple chain
  MatrixXd next_phi_eps;     // (P-bar Phi_eps)(x), same shape
  VectorXd d_mu;             // diagonal of D_mu
  MatrixXd p_pi_star;        // P^{pi*}, (S*A) x (S*A)
};

/// Poisson solutions of the one-hot operator-valued functions Lambda(x) and
/// P(x) (flattened), needed to split the Q-learning noise into a martingale
/// part and a Markov remainder.
struct PoissonBundle {
  MatrixXd phi_p;            // (S*A*S) x (S*A*S); row x is vec(Phi_P(x)), vec index (s,a)*S + s'
  MatrixXd next_phi_p;
  MatrixXd phi_lambda;       // (S*A*S) x (S*A); row x is diag(Phi_Lambda(x))
  MatrixXd next_phi_lambda;
};

/// eps(x) = e_{s,a} (r(s,a) + gamma V*(s') - Q*(s,a)) for x = (s,a,s').
MatrixXd bellman_error(const PlanningSolution& planning, const TabularMDP& mdp);

NoiseModel make_noise_model(const TabularMDP& mdp, const PlanningSolution& planning,
                            const ChainAnalysis& chain);

PoissonBundle make_poisson_bundle(const TabularMDP& mdp, const ChainAnalysis& chain);

/// Which drift matrix to build. `proof` is D_mu (I - gamma P^{pi*}), the one
/// for which sqrt(n) G Delta-bar_n linearizes to the martingale sum;
/// `display` is I - D_mu (I - gamma P^{pi*}), kept for side-by-side reports.
enum class DriftConvention { proof, display };

struct DriftMatrix {
  MatrixXd g;
  double condition = 0.0;
  DriftConvention convention = DriftConvention::proof;
};

DriftMatrix drift_matrix(const ChainAnalysis& chain, const PlanningSolution& planning,
                         const TabularMDP& mdp,
                         DriftConvention convention = DriftConvention::proof);

/// Smallest eigenvalue of the symmetric part.
double min_eigenvalue(const MatrixXd& symmetric);

/// Throws NotPSD when the smallest eigenvalue is below -tol.
void require_psd(const MatrixXd& symmetric, const std::string& what, double tol = 1e-8);

/// Sigma_eps as the stationary covariance of the martingale increment
/// Phi(x1) - (P-bar Phi)(x0), by enumeration over (x0, x1).
MatrixXd sigma_eps_closed_form(const NoiseModel& noise, const ChainAnalysis& chain);

struct SeriesSigma {
  MatrixXd sigma;
  int lags = 0;
  double tail_bound = 0.0;
  double tail_constant = 0.0;
};

/// Truncated long-run variance E[e0 e0^T] + sum_{l=1}^{K} (E[e0 el^T] + E[e0 el^T]^T).
SeriesSigma sigma_eps_series(const NoiseModel& noise, const ChainAnalysis& chain, double tol);

/// G^{-1} Sigma_eps G^{-T} via two solves against an LU factorization of G.
MatrixXd sigma_infinity(const MatrixXd& sigma_eps, const MatrixXd& g);

/// Law of the first triple x_0 = (s_0, a_0, s_1) when the preliminary state
/// s_{-1} is drawn from `nu` and one behavior transition precedes step 0.
VectorXd initial_triple_law(const TabularMDP& mdp, const Policy& behavior, const VectorXd& nu);

struct PopulationSigmaN {
  MatrixXd increment_cov;  // (1/n) sum_t E[(Phi_t - P Phi_{t-1})(...)^T]
  MatrixXd sigma_n;        // G^{-1} increment_cov G^{-T}
};

/// Exact finite-n covariance of W_n by propagating the triple law.
PopulationSigmaN population_sigma_n(const NoiseModel& noise, const ChainAnalysis& chain,
                                    const MatrixXd& g, const VectorXd& x0_law, std::int64_t n);

struct SigmaNMismatch {
  MatrixXd sigma_n;          // empirical E[W W^T] over replicas
  MatrixXd standard_error;   // entrywise Monte-Carlo standard error
  double mismatch_ch = 0.0;  // max |sigma_n - sigma_infty|
  std::optional<MatrixXd> population;
  std::optional<double> population_mismatch_ch;  // max |population - sigma_infty|
  std::optional<double> max_z;                   // max |empirical - population| / se
};

/// Empirical covariance of W_n across replicas compared with Sigma_infty
/// and, when given, with the exact population Sigma_n. Needs >= 100 replicas.
SigmaNMismatch sigma_n_mismatch(std::span<const VectorXd> w_samples, const MatrixXd& sigma_infty,
                                const std::optional<MatrixXd>& population = std::nullopt);

struct CovarianceReport {
  MatrixXd sigma_eps;
  MatrixXd g;
  double g_condition = 0.0;
  MatrixXd sigma_infty;
  int series_lags = 0;
  double series_tail_bound = 0.0;
  double series_gap_ch = 0.0;  // Chebyshev distance between the two Sigma_eps routes
  std::optional<MatrixXd> g_display;
  std::optional<MatrixXd> sigma_infty_display;
  std::optional<MatrixXd> sigma_n;
  std::optional<double> mismatch_ch;
};

/// Runs both Sigma_eps routes, builds G and Sigma_infty. With
/// `with_display_variant` the alternative drift convention is emitted too.
CovarianceReport covariance_report(const TabularMDP& mdp, const PlanningSolution& planning,
                                   const ChainAnalysis& chain, const NoiseModel& noise,
                                   double series_tol = 1e-12, bool with_display_variant = false);

}  // namespace qclt
