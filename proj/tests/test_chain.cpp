#include "qclt/chain.hpp"
#include "qclt/errors.hpp"
#include "qclt/rng.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace qclt;
using qclt::testing::single_mdp;
using qclt::testing::twostate_mdp;

namespace {

MatrixXd twostate_kernel() { return twostate_mdp().transition; }

MatrixXd iid_kernel(const VectorXd& p) { return VectorXd::Ones(p.size()) * p.transpose(); }

}  // namespace

TEST_CASE("stationary_distribution examples") {
  MatrixXd doubly(3, 3);
  doubly << 0.2, 0.3, 0.5, 0.5, 0.2, 0.3, 0.3, 0.5, 0.2;
  CHECK((stationary_distribution(doubly).array() - 1.0 / 3.0).abs().maxCoeff() <= 1e-12);
  CHECK((stationary_distribution(twostate_kernel()).array() - 0.5).abs().maxCoeff() <= 1e-12);

  MatrixXd blocks = MatrixXd::Zero(4, 4);
  blocks.topLeftCorner(2, 2) = twostate_kernel();
  blocks.bottomRightCorner(2, 2) = twostate_kernel();
  try {
    stationary_distribution(blocks);
    FAIL("expected NonUniqueStationary");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonUniqueStationary);
  }
}

TEST_CASE("stationary_distribution agrees with power iteration") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TabularMDP m = garnet_random_mdp(seed, 4, 2, 3, 0.9);
    const MatrixXd k = induced_kernel(m, Policy::uniform(4, 2));
    const VectorXd mu = stationary_distribution(k);
    CHECK((mu - qclt::testing::stationary_by_power(k)).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((mu.transpose() * k - mu.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("triple kernel structure") {
  const MatrixXd single = build_triple_kernel(single_mdp(), Policy::uniform(1, 1));
  CHECK(single == MatrixXd::Ones(1, 1));

  // with one action, row (s,a,s') is P(s', .) placed on the triples starting at s'
  const MatrixXd two = build_triple_kernel(twostate_mdp(), Policy::uniform(2, 1));
  REQUIRE(two.rows() == 4);
  const MatrixXd& p = twostate_kernel();
  for (int s = 0; s < 2; ++s) {
    for (int s1 = 0; s1 < 2; ++s1) {
      for (int s2 = 0; s2 < 2; ++s2) {
        for (int s3 = 0; s3 < 2; ++s3) {
          const double expected = s2 == s1 ? p(s2, s3) : 0.0;
          CHECK(two(triple_index(s, 0, s1, 1, 2), triple_index(s2, 0, s3, 1, 2)) == expected);
        }
      }
    }
  }

  const TabularMDP g = garnet_random_mdp(4, 3, 2, 2, 0.8);
  const MatrixXd k = build_triple_kernel(g, Policy::uniform(3, 2));
  CHECK((k.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  for (int x = 0; x < 18; ++x) {
    for (int y = 0; y < 18; ++y) {
      const int s1_next = x % 3;
      const int s2 = y / 6;
      if (s2 != s1_next) CHECK(k(x, y) == 0.0);
    }
  }
  CHECK_THROWS_AS(build_triple_kernel(g, Policy::uniform(2, 2)), Error);
}

TEST_CASE("mixing_time examples") {
  VectorXd p(3);
  p << 0.2, 0.3, 0.5;
  CHECK(mixing_time(iid_kernel(p), p) == 1);
  CHECK(mixing_time(twostate_kernel(), VectorXd::Constant(2, 0.5)) == 4);

  MatrixXd flip(2, 2);
  flip << 0, 1, 1, 0;
  try {
    mixing_time(flip, VectorXd::Constant(2, 0.5), 64);
    FAIL("expected NotMixing");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NotMixing);
  }
}

TEST_CASE("mixing_time is minimal") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TabularMDP m = garnet_random_mdp(seed, 3, 2, 2 + static_cast<int>(seed % 2), 0.8);
    const ChainAnalysis c = analyze_chain(m, Policy::uniform(3, 2));
    CHECK(qclt::testing::worst_tv(c.triple_kernel, c.mu_bar, c.t_mix) <= 0.25);
    if (c.t_mix > 1) CHECK(qclt::testing::worst_tv(c.triple_kernel, c.mu_bar, c.t_mix - 1) > 0.25);
  }
}

TEST_CASE("spectral_gap examples") {
  VectorXd p(3);
  p << 0.2, 0.3, 0.5;
  CHECK(spectral_gap(iid_kernel(p)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(spectral_gap(twostate_kernel()) == doctest::Approx(0.2).epsilon(1e-12));
  MatrixXd flip(2, 2);
  flip << 0, 1, 1, 0;
  CHECK_THROWS_AS(spectral_gap(flip), Error);
}

TEST_CASE("poisson_solve examples") {
  VectorXd p(3);
  p << 0.2, 0.3, 0.5;
  MatrixXd f(3, 2);
  f << 1, 0, 4, 2, -1, 3;
  const PoissonSolution iid = poisson_solve(iid_kernel(p), p, f);
  const MatrixXd centered = f - VectorXd::Ones(3) * (p.transpose() * f);
  CHECK((iid.phi - centered).cwiseAbs().maxCoeff() <= 1e-12);

  const PoissonSolution constant = poisson_solve(twostate_kernel(), VectorXd::Constant(2, 0.5), MatrixXd::Constant(2, 1, 3.0));
  CHECK(constant.phi.cwiseAbs().maxCoeff() <= 1e-12);

  const ChainAnalysis c = analyze_chain(twostate_mdp(), Policy::uniform(2, 1));
  MatrixXd indicator = MatrixXd::Zero(4, 1);
  indicator(2, 0) = 1.0;
  const PoissonSolution sol = poisson_solve(c.triple_kernel, c.mu_bar, indicator);
  CHECK(sol.residual <= 1e-10);
  CHECK(std::abs(c.mu_bar.dot(sol.phi.col(0))) <= 1e-10);
}

TEST_CASE("poisson solution matches the truncated series") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TabularMDP m = garnet_random_mdp(seed + 100, 3, 2, 2, 0.8);
    const ChainAnalysis c = analyze_chain(m, Policy::uniform(3, 2));
    CounterRng rng(derive_key(seed, {1}));
    MatrixXd f(c.triple_kernel.rows(), 2);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.uniform() - 0.5;
    const PoissonSolution sol = poisson_solve(c.triple_kernel, c.mu_bar, f);
    const int terms = static_cast<int>(std::ceil(c.t_mix * std::log(1e10) / std::log(4.0)));
    const MatrixXd series = qclt::testing::poisson_series(c.triple_kernel, c.mu_bar, f, terms);
    CHECK((sol.phi - series).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("analyze_chain invariants") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TabularMDP m = garnet_random_mdp(seed, 4, 3, 2, 0.9);
    const Policy beh = Policy::uniform(4, 3);
    const ChainAnalysis c = analyze_chain(m, beh);
    CHECK(c.uge_certified);
    CHECK(c.mu_min == doctest::Approx(c.mu.minCoeff()));
    CHECK(std::abs(c.mu.sum() - 1.0) <= 1e-12);
    for (int sa = 0; sa < 12; ++sa) {
      for (int s2 = 0; s2 < 4; ++s2) {
        CHECK(std::abs(c.mu_bar(sa * 4 + s2) - c.mu(sa) * m.transition(sa, s2)) <= 1e-12);
      }
    }
    CHECK(c.spectral_gap > 0.0);
    CHECK(c.spectral_gap <= 1.0);
  }
}

TEST_CASE("total_variation") {
  VectorXd p(3), q(3);
  p << 0.5, 0.5, 0.0;
  q << 0.0, 0.5, 0.5;
  CHECK(total_variation(p, q) == doctest::Approx(0.5));
  CHECK(total_variation(p, p) == 0.0);
}
