#include "qclt/covariance.hpp"

#include "qclt/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>

namespace qclt {

MatrixXd bellman_error(const PlanningSolution& planning, const TabularMDP& mdp) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  MatrixXd eps = MatrixXd::Zero(S * A * S, S * A);
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) {
      const int sa = s * A + a;
      for (int s2 = 0; s2 < S; ++s2) {
        eps(triple_index(s, a, s2, A, S), sa) =
            mdp.reward(sa) + mdp.discount * planning.v_star(s2) - planning.q_star(sa);
      }
    }
  }
  return eps;
}

NoiseModel make_noise_model(const TabularMDP& mdp, const PlanningSolution& planning,
                            const ChainAnalysis& chain) {
  NoiseModel noise;
  noise.eps_table = bellman_error(planning, mdp);
  noise.phi_eps = poisson_solve(chain.triple_kernel, chain.mu_bar, noise.eps_table);
  noise.next_phi_eps = chain.triple_kernel * noise.phi_eps.phi;
  noise.d_mu = chain.mu;
  noise.p_pi_star = induced_kernel(mdp, planning.pi_star);
  return noise;
}

PoissonBundle make_poisson_bundle(const TabularMDP& mdp, const ChainAnalysis& chain) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const int n = S * A * S;
  PoissonBundle bundle;
  bundle.phi_p = poisson_solve(chain.triple_kernel, chain.mu_bar, MatrixXd::Identity(n, n)).phi;
  bundle.next_phi_p = chain.triple_kernel * bundle.phi_p;
  MatrixXd lambda = MatrixXd::Zero(n, S * A);
  for (int x = 0; x < n; ++x) lambda(x, x / S) = 1.0;
  bundle.phi_lambda = poisson_solve(chain.triple_kernel, chain.mu_bar, lambda).phi;
  bundle.next_phi_lambda = chain.triple_kernel * bundle.phi_lambda;
  return bundle;
}

DriftMatrix drift_matrix(const ChainAnalysis& chain, const PlanningSolution& planning,
                         const TabularMDP& mdp, DriftConvention convention) {
  const int d = mdp.num_pairs();
  if (chain.mu.size() != d) fail(ErrorKind::DimensionMismatch, "drift_matrix: mu has wrong length");
  const MatrixXd p_star = induced_kernel(mdp, planning.pi_star);
  DriftMatrix out;
  out.convention = convention;
  out.g = chain.mu.asDiagonal() * (MatrixXd::Identity(d, d) - mdp.discount * p_star);
  if (convention == DriftConvention::display) out.g = MatrixXd::Identity(d, d) - out.g;

  if (convention == DriftConvention::proof && !(chain.mu.minCoeff() > 0.0)) {
    fail(ErrorKind::Singular, "drift matrix is singular: some state-action pair has zero visitation");
  }
  Eigen::PartialPivLU<MatrixXd> lu(out.g);
  const double rcond = lu.rcond();
  out.condition = rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
  if (!(out.condition <= 1e14)) {
    fail(ErrorKind::Singular, "drift matrix condition estimate exceeds 1e14");
  }
  return out;
}

double min_eigenvalue(const MatrixXd& symmetric) {
  if (symmetric.size() == 0) return 0.0;
  const MatrixXd sym = 0.5 * (symmetric + symmetric.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(sym, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

void require_psd(const MatrixXd& symmetric, const std::string& what, double tol) {
  const double lo = min_eigenvalue(symmetric);
  if (lo < -tol) {
    fail(ErrorKind::NotPSD, what + " has smallest eigenvalue " + std::to_string(lo));
  }
}

MatrixXd sigma_eps_closed_form(const NoiseModel& noise, const ChainAnalysis& chain) {
  const MatrixXd& phi = noise.phi_eps.phi;
  const MatrixXd& next = noise.next_phi_eps;
  const MatrixXd& kernel = chain.triple_kernel;
  const Eigen::Index n = phi.rows();
  const Eigen::Index d = phi.cols();
  MatrixXd sigma = MatrixXd::Zero(d, d);
  VectorXd diff(d);
  for (Eigen::Index x0 = 0; x0 < n; ++x0) {
    const double w0 = chain.mu_bar(x0);
    if (w0 == 0.0) continue;
    for (Eigen::Index x1 = 0; x1 < n; ++x1) {
      const double w = w0 * kernel(x0, x1);
      if (w == 0.0) continue;
      diff = phi.row(x1).transpose() - next.row(x0).transpose();
      sigma.noalias() += w * diff * diff.transpose();
    }
  }
  sigma = 0.5 * (sigma + sigma.transpose());
  require_psd(sigma, "Sigma_eps (closed form)");
  return sigma;
}

SeriesSigma sigma_eps_series(const NoiseModel& noise, const ChainAnalysis& chain, double tol) {
  if (!(tol > 0.0)) fail(ErrorKind::InvalidParameter, "sigma_eps_series: tol must be positive");
  if (chain.t_mix < 1) fail(ErrorKind::NotMixing, "sigma_eps_series: chain has no mixing time");
  const MatrixXd& eps = noise.eps_table;
  const double sup = eps.size() == 0 ? 0.0 : eps.cwiseAbs().maxCoeff();
  const double t_mix = chain.t_mix;

  SeriesSigma out;
  out.tail_constant = 4.0 * sup * sup * (4.0 / 3.0) * t_mix;
  out.lags = out.tail_constant > tol
                 ? static_cast<int>(std::ceil(t_mix * std::log(out.tail_constant / tol) / std::log(4.0)))
                 : 0;
  out.tail_bound = out.tail_constant * std::pow(0.25, std::floor((out.lags + 1) / t_mix));

  const MatrixXd weighted = chain.mu_bar.asDiagonal() * eps;  // rows mu_bar(x) eps(x)
  MatrixXd sigma = eps.transpose() * weighted;
  MatrixXd propagated = eps;
  for (int lag = 1; lag <= out.lags; ++lag) {
    propagated = chain.triple_kernel * propagated;  // P-bar^lag eps
    const MatrixXd cross = weighted.transpose() * propagated;
    sigma += cross + cross.transpose();
  }
  out.sigma = 0.5 * (sigma + sigma.transpose());
  return out;
}

MatrixXd sigma_infinity(const MatrixXd& sigma_eps, const MatrixXd& g) {
  if (g.rows() != g.cols() || g.rows() != sigma_eps.rows() || sigma_eps.rows() != sigma_eps.cols()) {
    fail(ErrorKind::DimensionMismatch, "sigma_infinity: G and Sigma_eps disagree in shape");
  }
  Eigen::PartialPivLU<MatrixXd> lu(g);
  if (!(lu.rcond() > 1e-14)) fail(ErrorKind::Singular, "sigma_infinity: G is singular");
  const MatrixXd left = lu.solve(sigma_eps);                 // G^{-1} Sigma
  MatrixXd out = lu.solve(MatrixXd(left.transpose()));       // G^{-1} (G^{-1} Sigma)^T
  out = 0.5 * (out + out.transpose());
  require_psd(out, "Sigma_infty");
  return out;
}

VectorXd initial_triple_law(const TabularMDP& mdp, const Policy& behavior, const VectorXd& nu) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  if (nu.size() != S) fail(ErrorKind::DimensionMismatch, "initial law must have length S");
  const MatrixXd pi = behavior.table();
  VectorXd rho = VectorXd::Zero(S);  // law of s_0
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) rho += nu(s) * pi(s, a) * mdp.transition.row(s * A + a).transpose();
  }
  VectorXd law(S * A * S);
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) {
      for (int s2 = 0; s2 < S; ++s2) {
        law(triple_index(s, a, s2, A, S)) = rho(s) * pi(s, a) * mdp.transition(s * A + a, s2);
      }
    }
  }
  return law;
}

PopulationSigmaN population_sigma_n(const NoiseModel& noise, const ChainAnalysis& chain,
                                    const MatrixXd& g, const VectorXd& x0_law, std::int64_t n) {
  if (n < 1) fail(ErrorKind::InvalidParameter, "population_sigma_n: n must be positive");
  const MatrixXd& kernel = chain.triple_kernel;
  const MatrixXd& phi = noise.phi_eps.phi;
  const MatrixXd& next = noise.next_phi_eps;
  const Eigen::Index m = kernel.rows();
  const Eigen::Index d = phi.cols();

  // average law of x_{t-1} over t = 1..n
  Eigen::RowVectorXd law = x0_law.transpose();
  Eigen::RowVectorXd avg = Eigen::RowVectorXd::Zero(m);
  for (std::int64_t t = 0; t < n; ++t) {
    avg += law;
    law = law * kernel;
  }
  avg /= static_cast<double>(n);

  PopulationSigmaN out;
  out.increment_cov = MatrixXd::Zero(d, d);
  VectorXd diff(d);
  for (Eigen::Index x0 = 0; x0 < m; ++x0) {
    if (avg(x0) == 0.0) continue;
    for (Eigen::Index x1 = 0; x1 < m; ++x1) {
      const double w = avg(x0) * kernel(x0, x1);
      if (w == 0.0) continue;
      diff = phi.row(x1).transpose() - next.row(x0).transpose();
      out.increment_cov.noalias() += w * diff * diff.transpose();
    }
  }
  out.increment_cov = 0.5 * (out.increment_cov + out.increment_cov.transpose());
  out.sigma_n = sigma_infinity(out.increment_cov, g);
  return out;
}

SigmaNMismatch sigma_n_mismatch(std::span<const VectorXd> w_samples, const MatrixXd& sigma_infty,
                                const std::optional<MatrixXd>& population) {
  if (w_samples.size() < 100) {
    fail(ErrorKind::InsufficientReplicas,
         "need at least 100 replicas, got " + std::to_string(w_samples.size()));
  }
  const Eigen::Index d = sigma_infty.rows();
  const double r = static_cast<double>(w_samples.size());
  MatrixXd sum = MatrixXd::Zero(d, d);
  MatrixXd sum_sq = MatrixXd::Zero(d, d);
  for (const VectorXd& w : w_samples) {
    if (w.size() != d) fail(ErrorKind::DimensionMismatch, "sigma_n_mismatch: sample length differs from Sigma_infty");
    const MatrixXd outer = w * w.transpose();
    sum += outer;
    sum_sq += outer.cwiseProduct(outer);
  }
  SigmaNMismatch out;
  out.sigma_n = sum / r;
  const MatrixXd var = (sum_sq / r - out.sigma_n.cwiseProduct(out.sigma_n)).cwiseMax(0.0) * (r / (r - 1.0));
  out.standard_error = (var / r).cwiseSqrt();
  out.mismatch_ch = (out.sigma_n - sigma_infty).cwiseAbs().maxCoeff();
  if (population) {
    out.population = *population;
    out.population_mismatch_ch = (*population - sigma_infty).cwiseAbs().maxCoeff();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) {
        const double diff = std::abs(out.sigma_n(i, j) - (*population)(i, j));
        const double se = out.standard_error(i, j);
        if (se > 0.0) {
          worst = std::max(worst, diff / se);
        } else if (diff > 1e-12) {
          worst = std::numeric_limits<double>::infinity();
        }
      }
    }
    out.max_z = worst;
  }
  return out;
}

CovarianceReport covariance_report(const TabularMDP& mdp, const PlanningSolution& planning,
                                   const ChainAnalysis& chain, const NoiseModel& noise,
                                   double series_tol, bool with_display_variant) {
  CovarianceReport rep;
  rep.sigma_eps = sigma_eps_closed_form(noise, chain);
  const SeriesSigma series = sigma_eps_series(noise, chain, series_tol);
  rep.series_lags = series.lags;
  rep.series_tail_bound = series.tail_bound;
  rep.series_gap_ch = (rep.sigma_eps - series.sigma).cwiseAbs().maxCoeff();
  const DriftMatrix drift = drift_matrix(chain, planning, mdp);
  rep.g = drift.g;
  rep.g_condition = drift.condition;
  rep.sigma_infty = sigma_infinity(rep.sigma_eps, rep.g);
  if (with_display_variant) {
    const DriftMatrix alt = drift_matrix(chain, planning, mdp, DriftConvention::display);
    rep.g_display = alt.g;
    rep.sigma_infty_display = sigma_infinity(rep.sigma_eps, alt.g);
  }
  return rep;
}

}  // namespace qclt
