#include "qclt/errors.hpp"
#include "qclt/rng.hpp"
#include "qclt/schedule.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <vector>

using namespace qclt;

TEST_CASE("default_k0 follows the closed form") {
  // base 8 / (0.5 * 0.25 * 1) = 64, exponent 3
  CHECK(default_k0(1.0, 2.0 / 3.0, 0.5, 0.25) == 262144);
  CHECK_THROWS_AS(default_k0(64.0, 2.0 / 3.0, 0.5, 0.25), Error);
  try {
    default_k0(1.0, 0.999, 0.5, 0.25);
    FAIL("expected Overflow");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Overflow);
  }
}

TEST_CASE("default_k0 satisfies the schedule invariants") {
  CounterRng rng(derive_key(7, {1}));
  for (int i = 0; i < 100; ++i) {
    const double gamma = 0.1 + 0.85 * rng.uniform();
    const double mu_min = 0.02 + 0.3 * rng.uniform();
    const double omega = 0.55 + 0.3 * rng.uniform();
    const double b = drift_constant(gamma, mu_min);
    const double c0 = default_c0(b) * (0.2 + 0.8 * rng.uniform());
    const auto k0 = default_k0(c0, omega, gamma, mu_min);
    CHECK(schedule_violations(StepSchedule{c0, omega, k0}, b).empty());
    if (k0 > 1) CHECK(std::pow(static_cast<double>(k0 - 1), 1.0 - omega) < 8.0 / (b * c0) * (1 + 1e-12));
  }
}

TEST_CASE("make_step_schedule rejects out-of-range parameters") {
  CHECK_THROWS_AS(make_step_schedule(1.0, 1.0, 100, 0.1), Error);
  CHECK_THROWS_AS(make_step_schedule(1.0, 0.5, 100, 0.1), Error);
  CHECK_THROWS_AS(make_step_schedule(10.0, 2.0 / 3.0, 1 << 20, 0.1), Error);
  CHECK_THROWS_AS(make_step_schedule(1.0, 2.0 / 3.0, 8, 0.1), Error);
  CHECK_NOTHROW(make_step_schedule(1.0, 2.0 / 3.0, 1 << 20, 0.1));
}

TEST_CASE("alpha_at examples and monotonicity") {
  const StepSchedule s{1.0, 2.0 / 3.0, 512};
  CHECK(alpha_at(s, 0) == doctest::Approx(1.0 / 64.0).epsilon(1e-14));
  CHECK(alpha_at(s, 512 * 7) == doctest::Approx(1.0 / 256.0).epsilon(1e-14));
  double prev = alpha_at(s, 0);
  for (std::int64_t k = 1; k < 100000; k += 37) {
    const double a = alpha_at(s, k);
    CHECK(a > 0.0);
    CHECK(a <= prev);
    prev = a;
  }
}

TEST_CASE("decay_product examples") {
  const std::vector<double> alpha{1.0, 0.5, 0.25};
  CHECK(decay_product(alpha, 1.0, 1, 2) == doctest::Approx(0.375));
  CHECK(decay_product(alpha, 1.0, 2, 1) == 1.0);
  CHECK(decay_product(alpha, 1.0, 2, 2) == doctest::Approx(0.75));
  CHECK_THROWS_AS(decay_product(alpha, 1.0, 0, 2), Error);  // factor 1 - 1*1 = 0 leaves [0,1)
  CHECK_THROWS_AS(decay_product(alpha, 1.0, 1, 3), Error);

  const StepSchedule s{1.0, 2.0 / 3.0, 512};
  const double b = 0.1;
  double direct = 1.0;
  for (std::int64_t j = 10; j <= 300000; ++j) direct *= 1.0 - alpha_at(s, j) * b;
  CHECK(decay_product(s, b, 10, 300000) == doctest::Approx(direct).epsilon(1e-9));
}

TEST_CASE("bsum example by direct expansion") {
  const std::vector<double> alpha{1.0, 0.5, 0.25};
  // sum_{j=1}^{2} alpha_j prod_{l=j+1}^{2} (1 - alpha_l)
  const double lhs = 0.5 * (1.0 - 0.25) + 0.25;
  const double rhs = 1.0 - (1.0 - 0.5) * (1.0 - 0.25);
  CHECK(lhs == doctest::Approx(0.625));
  CHECK(rhs == doctest::Approx(0.625));
  const auto report = verify_step_lemmas(alpha, 1.0, std::nullopt);
  CHECK(report.find("bsum").status == LemmaStatus::passed);
  CHECK(report.find("bsum").worst_slack <= 1e-15);
  for (const char* name : {"sum_as_Qell", "rate_of_convergence", "alpha_delta", "P_alpha_ineq"}) {
    CHECK(report.find(name).status == LemmaStatus::skipped);
  }
}

TEST_CASE("lemma checks are skipped when hypotheses fail") {
  const std::vector<double> increasing{0.1, 0.2, 0.3};
  const auto report = verify_step_lemmas(increasing, 1.0, std::nullopt);
  for (const auto& c : report.checks) CHECK(c.status == LemmaStatus::skipped);
  CHECK(report.all_passed());

  const std::vector<double> zero{0.0, 0.0};
  CHECK(verify_step_lemmas(zero, 1.0, std::nullopt).find("bsum").status == LemmaStatus::skipped);

  // k0 too small for the strongest precondition
  const StepSchedule short_k0{1.0, 2.0 / 3.0, 8};
  const auto r = verify_step_lemmas(short_k0, 0.1, 1000);
  CHECK(r.find("rate_of_convergence").status == LemmaStatus::skipped);
  CHECK(r.find("P_alpha_ineq").status == LemmaStatus::skipped);
}

TEST_CASE("all five lemmas hold for valid schedules") {
  CounterRng rng(derive_key(11, {2}));
  for (int i = 0; i < 100; ++i) {
    const double b = 0.01 + 0.4 * rng.uniform();
    const double omega = 0.55 + 0.35 * rng.uniform();
    const double c0 = default_c0(b) * (0.3 + 0.7 * rng.uniform());
    const auto k0 = static_cast<std::int64_t>(std::ceil(std::pow(8.0 / (b * c0), 1.0 / (1.0 - omega)))) +
                    static_cast<std::int64_t>(50 * rng.uniform());
    if (k0 > (std::int64_t{1} << 40)) continue;
    const StepSchedule s{c0, omega, k0};
    REQUIRE(schedule_violations(s, b).empty());
    const auto report = verify_step_lemmas(s, b, 10000);
    REQUIRE(report.checks.size() == 5);
    for (const auto& c : report.checks) {
      INFO(c.name << " slack " << c.worst_slack << " at " << c.worst_index);
      CHECK(c.status == LemmaStatus::passed);
    }
    CHECK(report.find("bsum").worst_slack <= 1e-10);
  }
}

TEST_CASE("summation-by-parts identity for matrix step products") {
  CounterRng rng(derive_key(13, {3}));
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 4;
    const long t = 5 + trial;
    MatrixXd g(d, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform() - 0.5;
    g += MatrixXd::Identity(d, d);
    std::vector<double> alpha;
    for (long k = 0; k <= t + 1; ++k) alpha.push_back(0.3 / std::pow(k + 2.0, 2.0 / 3.0));
    std::vector<VectorXd> v;
    for (long j = -1; j <= t; ++j) {
      VectorXd x(d);
      for (int i = 0; i < d; ++i) x(i) = 2.0 * rng.uniform() - 1.0;
      v.push_back(x);
    }
    const auto sides = qclt::testing::telescope_sides(alpha, g, v, t);
    CHECK((sides.lhs - sides.rhs).cwiseAbs().maxCoeff() <= 1e-10);

    // with the scalar product P_{1:t} in place of Gamma_{1:t} the identity breaks
    const double b = 0.7;
    const VectorXd literal = sides.rhs + alpha[0] * (qclt::testing::gamma_product(alpha, g, 1, t) -
                                                     decay_product(alpha, b, 1, t) * MatrixXd::Identity(d, d)) * v[0];
    CHECK((sides.lhs - literal).cwiseAbs().maxCoeff() > 1e-6);
  }
}

TEST_CASE("scalar step products agree with decay_product") {
  const std::vector<double> alpha{0.4, 0.3, 0.2, 0.1, 0.05};
  const MatrixXd g = MatrixXd::Identity(1, 1) * 0.9;
  for (long m = 0; m <= 4; ++m) {
    for (long n = m - 1; n <= 4; ++n) {
      CHECK(qclt::testing::gamma_product(alpha, g, m, n)(0, 0) == doctest::Approx(decay_product(alpha, 0.9, m, n)));
    }
  }
}
