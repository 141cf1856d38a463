#include "qclt/chain.hpp"

#include "qclt/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>

namespace qclt {

namespace {

constexpr double kStationaryResidual = 1e-12;
constexpr double kPoissonResidual = 1e-10;
constexpr Eigen::Index kCompensatedRows = 10'000;

void require_square(const MatrixXd& m, const char* who) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    fail(ErrorKind::DimensionMismatch, std::string(who) + ": kernel must be square and non-empty");
  }
}

}  // namespace

VectorXd stationary_distribution(const MatrixXd& kernel) {
  require_square(kernel, "stationary_distribution");
  const Eigen::Index n = kernel.rows();
  const MatrixXd generator_t = (MatrixXd::Identity(n, n) - kernel).transpose();

  Eigen::FullPivLU<MatrixXd> lu(generator_t);
  lu.setThreshold(1e-10);
  if (lu.rank() < n - 1) {
    fail(ErrorKind::NonUniqueStationary,
         "eigenvalue 1 has multiplicity " + std::to_string(n - lu.rank()) +
             "; the chain has several closed classes");
  }

  MatrixXd system(n + 1, n);
  system.topRows(n) = generator_t;
  system.row(n).setOnes();
  VectorXd rhs = VectorXd::Zero(n + 1);
  rhs(n) = 1.0;

  Eigen::ColPivHouseholderQR<MatrixXd> qr(system);
  VectorXd v = qr.solve(rhs);
  // one step of iterative refinement
  v += qr.solve(rhs - system * v);

  for (Eigen::Index i = 0; i < n; ++i) v(i) = std::max(v(i), 0.0);
  v /= v.sum();

  const double residual = (kernel.transpose() * v - v).cwiseAbs().maxCoeff();
  if (residual > kStationaryResidual * std::max<double>(1.0, static_cast<double>(n) / 64.0)) {
    fail(ErrorKind::SingularSystem,
         "stationary solve residual " + std::to_string(residual) + " above tolerance");
  }
  return v;
}

MatrixXd build_triple_kernel(const TabularMDP& mdp, const Policy& behavior) {
  if (behavior.num_states() != mdp.num_states || behavior.num_actions() != mdp.num_actions) {
    fail(ErrorKind::DimensionMismatch, "behavior policy shape does not match the MDP");
  }
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const int n = S * A * S;
  const MatrixXd pi = behavior.table();
  MatrixXd k = MatrixXd::Zero(n, n);
  for (int s1 = 0; s1 < S; ++s1) {
    for (int a1 = 0; a1 < A; ++a1) {
      for (int s1n = 0; s1n < S; ++s1n) {
        const int row = triple_index(s1, a1, s1n, A, S);
        // only successors starting at s1n carry mass
        for (int a2 = 0; a2 < A; ++a2) {
          for (int s2n = 0; s2n < S; ++s2n) {
            k(row, triple_index(s1n, a2, s2n, A, S)) =
                pi(s1n, a2) * mdp.transition(s1n * A + a2, s2n);
          }
        }
      }
    }
  }
  return k;
}

double total_variation(const Eigen::Ref<const VectorXd>& p, const Eigen::Ref<const VectorXd>& q) {
  if (p.size() < kCompensatedRows) return 0.5 * (p - q).cwiseAbs().sum();
  double sum = 0.0;
  double carry = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double y = std::abs(p(i) - q(i)) - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
  return 0.5 * sum;
}

std::vector<double> tv_profile(const MatrixXd& kernel, const VectorXd& stationary, int cap) {
  require_square(kernel, "mixing_time");
  std::vector<double> profile;
  MatrixXd power = kernel;
  for (int t = 1; t <= cap; ++t) {
    double worst = 0.0;
    for (Eigen::Index x = 0; x < power.rows(); ++x) {
      worst = std::max(worst, total_variation(power.row(x).transpose(), stationary));
    }
    profile.push_back(worst);
    if (worst <= 0.25) break;
    power = power * kernel;
  }
  return profile;
}

int mixing_time(const MatrixXd& kernel, const VectorXd& stationary, int cap) {
  const auto profile = tv_profile(kernel, stationary, cap);
  if (profile.empty() || profile.back() > 0.25) {
    fail(ErrorKind::NotMixing, "worst-case TV distance stays above 1/4 for all t <= " +
                                   std::to_string(cap));
  }
  return static_cast<int>(profile.size());
}

double spectral_gap(const MatrixXd& kernel) {
  require_square(kernel, "spectral_gap");
  if (kernel.rows() == 1) return 1.0;
  Eigen::EigenSolver<MatrixXd> solver(kernel, false);
  if (solver.info() != Eigen::Success) {
    fail(ErrorKind::DegenerateSpectrum, "eigenvalue computation failed");
  }
  std::vector<double> moduli;
  moduli.reserve(static_cast<std::size_t>(kernel.rows()));
  for (Eigen::Index i = 0; i < kernel.rows(); ++i) moduli.push_back(std::abs(solver.eigenvalues()(i)));
  std::sort(moduli.begin(), moduli.end(), std::greater<>());
  const double second = moduli[1];
  if (second >= 1.0 - 1e-12) {
    fail(ErrorKind::DegenerateSpectrum,
         "second-largest eigenvalue modulus " + std::to_string(second) + " is 1");
  }
  return std::min(1.0, 1.0 - second);
}

PoissonSolution poisson_solve(const MatrixXd& kernel, const VectorXd& stationary,
                              const MatrixXd& f) {
  require_square(kernel, "poisson_solve");
  const Eigen::Index n = kernel.rows();
  if (stationary.size() != n || f.rows() != n) {
    fail(ErrorKind::DimensionMismatch, "poisson_solve: kernel, stationary law and f disagree in size");
  }

  // fundamental matrix Z^{-1} = I - K + 1 mu^T
  const MatrixXd fundamental =
      MatrixXd::Identity(n, n) - kernel + VectorXd::Ones(n) * stationary.transpose();
  Eigen::PartialPivLU<MatrixXd> lu(fundamental);
  const double rcond = lu.rcond();
  if (!(rcond > 1e-14)) {
    fail(ErrorKind::SingularSystem, "fundamental matrix condition estimate exceeds 1e14");
  }

  const Eigen::RowVectorXd means = stationary.transpose() * f;
  const MatrixXd centered = f.rowwise() - means;
  MatrixXd phi = lu.solve(centered);
  phi += lu.solve(centered - fundamental * phi);
  phi.rowwise() -= stationary.transpose() * phi;

  PoissonSolution sol;
  sol.residual = n == 0 ? 0.0 : (phi - kernel * phi - centered).cwiseAbs().maxCoeff();
  sol.sup_norm = phi.size() == 0 ? 0.0 : phi.cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, f.size() == 0 ? 0.0 : f.cwiseAbs().maxCoeff());
  if (sol.residual > kPoissonResidual * scale) {
    fail(ErrorKind::SingularSystem,
         "Poisson residual " + std::to_string(sol.residual) + " above 1e-10");
  }
  sol.phi = std::move(phi);
  return sol;
}

ChainAnalysis analyze_chain(const TabularMDP& mdp, const Policy& behavior, int mixing_cap) {
  require_valid(mdp);
  ChainAnalysis chain;
  chain.mu = stationary_distribution(induced_kernel(mdp, behavior));
  chain.triple_kernel = build_triple_kernel(mdp, behavior);
  chain.mu_bar = stationary_distribution(chain.triple_kernel);
  chain.mu_min = chain.mu.minCoeff();
  chain.t_mix = mixing_time(chain.triple_kernel, chain.mu_bar, mixing_cap);
  chain.spectral_gap = spectral_gap(chain.triple_kernel);
  chain.uge_certified = chain.mu_min > 0.0;
  return chain;
}

}  // namespace qclt
