#include "qclt/errors.hpp"
#include "qclt/mdp.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace qclt;
using qclt::testing::single_mdp;
using qclt::testing::twostate_mdp;

TEST_CASE("validate_mdp reports each violated bound") {
  CHECK(validate_mdp(single_mdp()).empty());

  TabularMDP bad_row = single_mdp();
  bad_row.num_states = 2;
  bad_row.transition.resize(2, 2);
  bad_row.transition << 0.5, 0.6, 0.5, 0.5;
  bad_row.reward = VectorXd::Ones(2);
  const auto row_report = validate_mdp(bad_row);
  REQUIRE(row_report.size() == 1);
  CHECK(row_report[0].find("row 0 sums to 1.1") != std::string::npos);

  TabularMDP bad_reward = single_mdp();
  bad_reward.reward(0) = 1.5;
  const auto reward_report = validate_mdp(bad_reward);
  REQUIRE(reward_report.size() == 1);
  CHECK(reward_report[0].find("reward out of [0,1]") != std::string::npos);

  TabularMDP bad_gamma = single_mdp();
  bad_gamma.discount = 1.0;
  CHECK_FALSE(validate_mdp(bad_gamma).empty());
}

TEST_CASE("solve_optimal on the fixtures") {
  const auto single = solve_optimal(single_mdp());
  CHECK(single.q_star(0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(single.v_star(0) == doctest::Approx(2.0).epsilon(1e-12));

  const auto two = solve_optimal(twostate_mdp());
  CHECK(std::abs(two.q_star(0) - 11.0 / 6.0) <= 1e-11);
  CHECK(std::abs(two.q_star(1) - 1.0 / 6.0) <= 1e-11);
  const VectorXd dense = qclt::testing::policy_q_dense(twostate_mdp(), Policy::deterministic({0, 0}, 1));
  CHECK((two.q_star - dense).cwiseAbs().maxCoeff() <= 1e-11);
}

TEST_CASE("tiny discount reduces Q* to the reward") {
  TabularMDP m = twostate_mdp();
  m.discount = 1e-9;
  const auto sol = solve_optimal(m);
  CHECK((sol.q_star - m.reward).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("solve_optimal signals non-convergence") {
  TabularMDP m = twostate_mdp();
  m.discount = 0.999;
  CHECK_THROWS_AS(solve_optimal(m, 1e-12, 5), Error);
}

TEST_CASE("greedy_policy breaks ties toward the smallest action") {
  VectorXd q(4);
  q << 0.3, 0.7, 0.5, 0.5;
  const Policy pi = greedy_policy(q, 2, 2);
  CHECK(pi.action(0) == 1);
  CHECK(pi.action(1) == 0);
  const Policy single = greedy_policy(solve_optimal(twostate_mdp()).q_star, 2, 1);
  CHECK(single.action(0) == 0);
  CHECK(single.action(1) == 0);
}

TEST_CASE("optimality_gap conventions") {
  const auto two = solve_optimal(twostate_mdp());
  CHECK(optimality_gap(two.q_star, two.v_star, 2, 1).infinite);

  VectorXd q(2);
  q << 2.0, 1.5;
  VectorXd v = VectorXd::Constant(1, 2.0);
  const auto gap = optimality_gap(q, v, 1, 2);
  CHECK_FALSE(gap.infinite);
  CHECK(gap.value == doctest::Approx(0.5));
  CHECK_FALSE(gap.violated);

  q << 2.0, 2.0;
  const auto tie = optimality_gap(q, v, 1, 2);
  CHECK(tie.value == 0.0);
  CHECK(tie.violated);
}

TEST_CASE("induced_kernel shapes and row sums") {
  CHECK(induced_kernel(single_mdp(), Policy::uniform(1, 1)) == MatrixXd::Ones(1, 1));
  const MatrixXd k2 = induced_kernel(twostate_mdp(), Policy::deterministic({0, 0}, 1));
  CHECK((k2 - twostate_mdp().transition).cwiseAbs().maxCoeff() == 0.0);

  const TabularMDP g = garnet_random_mdp(3, 2, 2, 2, 0.9);
  const MatrixXd k = induced_kernel(g, Policy::uniform(2, 2));
  CHECK((k.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(induced_kernel(g, Policy::uniform(3, 2)), Error);
}

TEST_CASE("garnet generator contracts") {
  const TabularMDP full = garnet_random_mdp(11, 4, 3, 4, 0.8);
  CHECK(validate_mdp(full).empty());
  CHECK((full.transition.array() > 0.0).all());

  const TabularMDP again = garnet_random_mdp(11, 4, 3, 4, 0.8);
  CHECK(full.transition == again.transition);
  CHECK(full.reward == again.reward);

  const TabularMDP basis = garnet_random_mdp(5, 4, 2, 1, 0.8);
  for (Eigen::Index i = 0; i < basis.transition.rows(); ++i) {
    CHECK(basis.transition.row(i).maxCoeff() == 1.0);
    CHECK(basis.transition.row(i).sum() == 1.0);
  }

  const TabularMDP sparse = garnet_random_mdp(6, 5, 2, 2, 0.8);
  for (Eigen::Index i = 0; i < sparse.transition.rows(); ++i) {
    CHECK((sparse.transition.row(i).array() > 0.0).count() == 2);
  }
  CHECK_THROWS_AS(garnet_random_mdp(1, 3, 2, 4, 0.5), Error);
  CHECK_THROWS_AS(garnet_random_mdp(1, 3, 2, 0, 0.5), Error);
}

TEST_CASE("planning properties over random garnets") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int S = 2 + static_cast<int>(seed % 4);
    const int A = 1 + static_cast<int>(seed % 3);
    const double gamma = 0.5 + 0.02 * static_cast<double>(seed);
    const TabularMDP m = garnet_random_mdp(seed, S, A, 1 + static_cast<int>(seed % S), gamma);
    const double tol = 1e-12;
    const auto sol = solve_optimal(m, tol);
    const VectorXd backup = m.reward + m.discount * m.transition * sol.v_star;
    CHECK((backup - sol.q_star).cwiseAbs().maxCoeff() <= 10 * tol);
    CHECK(sol.q_star.minCoeff() >= 0.0);
    CHECK(sol.q_star.maxCoeff() <= 1.0 / (1.0 - gamma));
    CHECK((max_reduce(sol.q_star, S, A) - sol.v_star).cwiseAbs().maxCoeff() == 0.0);
    CHECK((bellman_optimality(m, sol.q_star) - sol.q_star).cwiseAbs().maxCoeff() <= 10 * tol);
    CHECK((qclt::testing::q_star_by_enumeration(m) - sol.q_star).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("MDP JSON round trip and parse errors") {
  const TabularMDP m = garnet_random_mdp(2, 3, 2, 2, 0.7);
  const TabularMDP back = mdp_from_json_string(mdp_to_json_string(m));
  CHECK(back.transition == m.transition);
  CHECK(back.reward == m.reward);
  CHECK(back.discount == m.discount);

  const auto path = std::filesystem::temp_directory_path() / "qclt_mdp_roundtrip.json";
  write_mdp_json(m, path.string());
  CHECK(read_mdp_json(path.string()).reward == m.reward);
  std::filesystem::remove(path);

  try {
    mdp_from_json_string("{\"S\": 1, \"A\": ");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ParseError);
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  CHECK_THROWS_AS(mdp_from_json_string(R"({"S":1,"A":1,"gamma":0.5,"reward":[2.0],"transition":[[1.0]]})"), Error);
}
