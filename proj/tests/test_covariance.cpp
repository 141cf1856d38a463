#include "qclt/chain.hpp"
#include "qclt/covariance.hpp"
#include "qclt/errors.hpp"
#include "qclt/qlearning.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <cmath>

using namespace qclt;
using qclt::testing::single_mdp;
using qclt::testing::twostate_mdp;

namespace {

struct Built {
  TabularMDP mdp;
  Policy behavior;
  PlanningSolution planning;
  ChainAnalysis chain;
  NoiseModel noise;
};

Built build(const TabularMDP& mdp, const Policy& behavior) {
  Built b{mdp, behavior, solve_optimal(mdp), analyze_chain(mdp, behavior), {}};
  b.noise = make_noise_model(b.mdp, b.planning, b.chain);
  return b;
}

double cheb(const MatrixXd& a, const MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

VectorXd state_marginal(const Built& b) {
  VectorXd nu = VectorXd::Zero(b.mdp.num_states);
  for (int s = 0; s < b.mdp.num_states; ++s) nu(s) = b.chain.mu.segment(s * b.mdp.num_actions, b.mdp.num_actions).sum();
  return nu / nu.sum();
}

}  // namespace

TEST_CASE("Bellman error examples and support") {
  const Built single = build(single_mdp(), Policy::uniform(1, 1));
  CHECK(single.noise.eps_table.cwiseAbs().maxCoeff() <= 1e-12);

  const Built two = build(twostate_mdp(), Policy::uniform(2, 1));
  const int x = triple_index(0, 0, 0, 1, 2);
  CHECK(std::abs(two.noise.eps_table(x, 0) - 1.0 / 12.0) <= 1e-11);
  CHECK(two.noise.eps_table(x, 1) == 0.0);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Built g = build(garnet_random_mdp(seed, 3, 2, 2, 0.8), Policy::uniform(3, 2));
    const MatrixXd& eps = g.noise.eps_table;
    for (int row = 0; row < eps.rows(); ++row) {
      for (int col = 0; col < eps.cols(); ++col) {
        if (col != row / 3) CHECK(eps(row, col) == 0.0);
      }
    }
    CHECK(eps.cwiseAbs().maxCoeff() <= 2.0 / (1.0 - 0.8));
    CHECK((g.chain.mu_bar.transpose() * eps).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("drift matrix examples") {
  const Built single = build(single_mdp(), Policy::uniform(1, 1));
  CHECK(drift_matrix(single.chain, single.planning, single.mdp).g(0, 0) == doctest::Approx(0.5));

  const Built two = build(twostate_mdp(), Policy::uniform(2, 1));
  const MatrixXd expected = 0.5 * (MatrixXd::Identity(2, 2) - 0.5 * twostate_mdp().transition);
  CHECK(cheb(drift_matrix(two.chain, two.planning, two.mdp).g, expected) <= 1e-12);
  const MatrixXd display = drift_matrix(two.chain, two.planning, two.mdp, DriftConvention::display).g;
  CHECK(cheb(display, MatrixXd::Identity(2, 2) - expected) <= 1e-12);

  ChainAnalysis zero = two.chain;
  zero.mu << 1.0, 0.0;
  try {
    drift_matrix(zero, two.planning, two.mdp);
    FAIL("expected Singular");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Singular);
  }
}

TEST_CASE("Sigma_eps examples") {
  const Built single = build(single_mdp(), Policy::uniform(1, 1));
  CHECK(sigma_eps_closed_form(single.noise, single.chain).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(sigma_eps_series(single.noise, single.chain, 1e-12).sigma.cwiseAbs().maxCoeff() <= 1e-12);

  // every state-action pair jumps to the same next-state law: the triple chain is i.i.d.
  TabularMDP iid = garnet_random_mdp(3, 3, 2, 3, 0.6);
  for (int i = 1; i < iid.transition.rows(); ++i) iid.transition.row(i) = iid.transition.row(0);
  const Built b = build(iid, Policy::uniform(3, 2));
  MatrixXd second = MatrixXd::Zero(6, 6);
  for (int x = 0; x < b.noise.eps_table.rows(); ++x) {
    second += b.chain.mu_bar(x) * b.noise.eps_table.row(x).transpose() * b.noise.eps_table.row(x);
  }
  CHECK(cheb(sigma_eps_closed_form(b.noise, b.chain), second) <= 1e-12);
  CHECK(cheb(sigma_eps_series(b.noise, b.chain, 1e-12).sigma, second) <= 1e-12);

  const Built two = build(twostate_mdp(), Policy::uniform(2, 1));
  CHECK(cheb(sigma_eps_closed_form(two.noise, two.chain), sigma_eps_series(two.noise, two.chain, 1e-12).sigma) <= 1e-8);
}

TEST_CASE("two Sigma_eps routes agree on random garnets") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const int S = 2 + static_cast<int>(seed % 3);
    const int A = 1 + static_cast<int>(seed % 2);
    const Built b = build(garnet_random_mdp(seed, S, A, S, 0.5 + 0.008 * static_cast<double>(seed)), Policy::uniform(S, A));
    const double tol = 1e-10;
    const MatrixXd closed = sigma_eps_closed_form(b.noise, b.chain);
    const SeriesSigma series = sigma_eps_series(b.noise, b.chain, tol);
    CHECK(cheb(closed, series.sigma) <= std::max(1e-8, 10 * tol));
    CHECK(cheb(closed, closed.transpose()) <= 1e-10);
    CHECK(min_eigenvalue(closed) >= -1e-8);
  }
}

TEST_CASE("Sigma_infinity examples and round trip") {
  const MatrixXd g = MatrixXd::Identity(2, 2) * 0.5 + MatrixXd::Constant(2, 2, 0.1);
  CHECK(sigma_infinity(MatrixXd::Zero(2, 2), g).cwiseAbs().maxCoeff() == 0.0);
  MatrixXd se(2, 2);
  se << 2.0, 0.3, 0.3, 1.0;
  CHECK(cheb(sigma_infinity(se, MatrixXd::Identity(2, 2)), se) <= 1e-15);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Built b = build(garnet_random_mdp(seed, 3, 2, 3, 0.9), Policy::uniform(3, 2));
    const CovarianceReport r = covariance_report(b.mdp, b.planning, b.chain, b.noise);
    CHECK(cheb(r.g * r.sigma_infty * r.g.transpose(), r.sigma_eps) <= 1e-10);
    CHECK(cheb(r.sigma_infty, r.sigma_infty.transpose()) <= 1e-10);
    CHECK(min_eigenvalue(r.sigma_infty) >= -1e-8);
    CHECK(r.series_gap_ch <= 1e-8);
  }
  const Built two = build(twostate_mdp(), Policy::uniform(2, 1));
  const CovarianceReport r = covariance_report(two.mdp, two.planning, two.chain, two.noise, 1e-12, true);
  CHECK(cheb(r.g * r.sigma_infty * r.g.transpose(), r.sigma_eps) <= 1e-10);
  REQUIRE(r.g_display.has_value());
  REQUIRE(r.sigma_infty_display.has_value());

  MatrixXd bad(2, 2);
  bad << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(require_psd(bad, "test"), Error);
  CHECK_THROWS_AS(sigma_infinity(se, MatrixXd::Zero(2, 2)), Error);
}

TEST_CASE("population Sigma_n under a stationary start equals Sigma_eps") {
  const Built b = build(garnet_random_mdp(4, 3, 2, 2, 0.8), Policy::uniform(3, 2));
  const CovarianceReport r = covariance_report(b.mdp, b.planning, b.chain, b.noise);
  for (std::int64_t n : {1, 7, 100, 4096}) {
    const PopulationSigmaN pop = population_sigma_n(b.noise, b.chain, r.g, b.chain.mu_bar, n);
    CHECK(cheb(pop.increment_cov, r.sigma_eps) <= 1e-10);
    CHECK(cheb(pop.sigma_n, r.sigma_infty) <= 1e-9);
  }
  const Built single = build(single_mdp(), Policy::uniform(1, 1));
  const PopulationSigmaN pop = population_sigma_n(single.noise, single.chain, MatrixXd::Constant(1, 1, 0.5),
                                                  VectorXd::Ones(1), 64);
  CHECK(pop.sigma_n(0, 0) == 0.0);
}

TEST_CASE("population Sigma_n mismatch decays like 1/n from a fixed start") {
  const Built b = build(garnet_random_mdp(4, 3, 2, 2, 0.8), Policy::uniform(3, 2));
  const CovarianceReport r = covariance_report(b.mdp, b.planning, b.chain, b.noise);
  VectorXd nu = VectorXd::Zero(3);
  nu(0) = 1.0;
  const VectorXd x0_law = initial_triple_law(b.mdp, b.behavior, nu);
  CHECK(std::abs(x0_law.sum() - 1.0) <= 1e-12);
  double first = 0.0;
  for (std::int64_t n = 256; n <= 16384; n *= 2) {
    const double scaled = static_cast<double>(n) * cheb(population_sigma_n(b.noise, b.chain, r.g, x0_law, n).sigma_n, r.sigma_infty);
    if (n == 256) first = scaled;
    CHECK(scaled <= 2.0 * first + 1e-12);
  }
}

TEST_CASE("empirical Sigma_n agrees with the population value") {
  const Built b = build(garnet_random_mdp(2, 2, 2, 2, 0.7), Policy::uniform(2, 2));
  const CovarianceReport r = covariance_report(b.mdp, b.planning, b.chain, b.noise);
  const double drift = drift_constant(b.mdp.discount, b.chain.mu_min);
  const double c0 = default_c0(drift);
  const StepSchedule sched{c0, 2.0 / 3.0, default_k0(c0, 2.0 / 3.0, b.mdp.discount, b.chain.mu_min)};
  const std::int64_t n = 256;
  RunConfig cfg = make_run_config(b.mdp, b.behavior, sched, n, 99, b.chain);
  const Eigen::PartialPivLU<MatrixXd> lu(r.g);
  std::vector<VectorXd> w;
  for (std::uint64_t rep = 0; rep < 1500; ++rep) {
    const Trajectory t = run_trajectory(cfg, b.planning.q_star, rep);
    VectorXd sum = VectorXd::Zero(4);
    for (std::size_t x = 0; x < t.head_counts.size(); ++x) {
      const auto xi = static_cast<Eigen::Index>(x);
      sum += static_cast<double>(t.head_counts[x]) * b.noise.phi_eps.phi.row(xi).transpose() -
             static_cast<double>(t.tail_counts[x]) * b.noise.next_phi_eps.row(xi).transpose();
    }
    w.push_back(lu.solve(sum) / std::sqrt(static_cast<double>(n)));
  }
  const VectorXd x0_law = initial_triple_law(b.mdp, b.behavior, state_marginal(b));
  const PopulationSigmaN pop = population_sigma_n(b.noise, b.chain, r.g, x0_law, n);
  const SigmaNMismatch m = sigma_n_mismatch(w, r.sigma_infty, pop.sigma_n);
  REQUIRE(m.max_z.has_value());
  CHECK(*m.max_z <= 5.0);
  CHECK(m.mismatch_ch >= 0.0);

  std::vector<VectorXd> few(w.begin(), w.begin() + 50);
  try {
    sigma_n_mismatch(few, r.sigma_infty);
    FAIL("expected InsufficientReplicas");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InsufficientReplicas);
  }
}

TEST_CASE("Sigma_n mismatch vanishes on the single-state chain") {
  const Built single = build(single_mdp(), Policy::uniform(1, 1));
  std::vector<VectorXd> w(100, VectorXd::Zero(1));
  const SigmaNMismatch m = sigma_n_mismatch(w, MatrixXd::Zero(1, 1));
  CHECK(m.mismatch_ch == 0.0);
}
