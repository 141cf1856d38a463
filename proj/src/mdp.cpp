#include "qclt/mdp.hpp"

#include "qclt/errors.hpp"
#include "qclt/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace qclt {

namespace {

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(12);
  os << x;
  return os.str();
}

}  // namespace

std::vector<std::string> validate_mdp(const TabularMDP& mdp) {
  std::vector<std::string> out;
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  if (S <= 0) out.push_back("num_states must be positive, got " + std::to_string(S));
  if (A <= 0) out.push_back("num_actions must be positive, got " + std::to_string(A));
  if (!(mdp.discount > 0.0 && mdp.discount < 1.0)) {
    out.push_back("discount " + fmt_double(mdp.discount) + " outside (0,1)");
  }
  if (S <= 0 || A <= 0) return out;

  if (mdp.transition.rows() != S * A || mdp.transition.cols() != S) {
    out.push_back("transition has shape " + std::to_string(mdp.transition.rows()) + "x" +
                  std::to_string(mdp.transition.cols()) + ", expected " +
                  std::to_string(S * A) + "x" + std::to_string(S));
  } else {
    for (Eigen::Index i = 0; i < mdp.transition.rows(); ++i) {
      double sum = 0.0;
      for (Eigen::Index j = 0; j < mdp.transition.cols(); ++j) {
        const double p = mdp.transition(i, j);
        if (!(p >= 0.0)) {
          out.push_back("row " + std::to_string(i) + " entry " + std::to_string(j) +
                        " is negative (" + fmt_double(p) + ")");
        }
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) {
        out.push_back("row " + std::to_string(i) + " sums to " + fmt_double(sum));
      }
    }
  }

  if (mdp.reward.size() != S * A) {
    out.push_back("reward has length " + std::to_string(mdp.reward.size()) + ", expected " +
                  std::to_string(S * A));
  } else {
    for (Eigen::Index i = 0; i < mdp.reward.size(); ++i) {
      const double r = mdp.reward(i);
      if (!(r >= 0.0 && r <= 1.0)) {
        out.push_back("reward out of [0,1] at entry " + std::to_string(i) + " (" +
                      fmt_double(r) + ")");
      }
    }
  }
  return out;
}

void require_valid(const TabularMDP& mdp) {
  const auto violations = validate_mdp(mdp);
  if (violations.empty()) return;
  std::string msg = "invalid MDP:";
  for (const auto& v : violations) msg += "\n  " + v;
  fail(ErrorKind::InvalidParameter, msg);
}

Policy Policy::deterministic(std::vector<int> actions, int num_actions) {
  for (std::size_t s = 0; s < actions.size(); ++s) {
    if (actions[s] < 0 || actions[s] >= num_actions) {
      fail(ErrorKind::InvalidParameter, "deterministic policy action " +
                                            std::to_string(actions[s]) + " at state " +
                                            std::to_string(s) + " outside [0," +
                                            std::to_string(num_actions) + ")");
    }
  }
  Policy p;
  p.kind_ = Kind::deterministic;
  p.num_states_ = static_cast<int>(actions.size());
  p.num_actions_ = num_actions;
  p.actions_ = std::move(actions);
  return p;
}

Policy Policy::stochastic(MatrixXd probabilities) {
  for (Eigen::Index s = 0; s < probabilities.rows(); ++s) {
    double sum = 0.0;
    for (Eigen::Index a = 0; a < probabilities.cols(); ++a) {
      if (!(probabilities(s, a) >= 0.0)) {
        fail(ErrorKind::InvalidParameter,
             "stochastic policy has a negative entry in row " + std::to_string(s));
      }
      sum += probabilities(s, a);
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      fail(ErrorKind::InvalidParameter,
           "stochastic policy row " + std::to_string(s) + " sums to " + fmt_double(sum));
    }
  }
  Policy p;
  p.kind_ = Kind::stochastic;
  p.num_states_ = static_cast<int>(probabilities.rows());
  p.num_actions_ = static_cast<int>(probabilities.cols());
  p.probs_ = std::move(probabilities);
  return p;
}

Policy Policy::uniform(int num_states, int num_actions) {
  return stochastic(MatrixXd::Constant(num_states, num_actions, 1.0 / num_actions));
}

double Policy::prob(int s, int a) const {
  if (kind_ == Kind::deterministic) return actions_.at(static_cast<std::size_t>(s)) == a ? 1.0 : 0.0;
  return probs_(s, a);
}

MatrixXd Policy::table() const {
  if (kind_ == Kind::stochastic) return probs_;
  MatrixXd t = MatrixXd::Zero(num_states_, num_actions_);
  for (int s = 0; s < num_states_; ++s) t(s, actions_[static_cast<std::size_t>(s)]) = 1.0;
  return t;
}

VectorXd max_reduce(const VectorXd& q, int num_states, int num_actions) {
  VectorXd v(num_states);
  for (int s = 0; s < num_states; ++s) {
    v(s) = q.segment(static_cast<Eigen::Index>(s) * num_actions, num_actions).maxCoeff();
  }
  return v;
}

VectorXd bellman_optimality(const TabularMDP& mdp, const VectorXd& q) {
  const VectorXd v = max_reduce(q, mdp.num_states, mdp.num_actions);
  return mdp.reward + mdp.discount * (mdp.transition * v);
}

Policy greedy_policy(const VectorXd& q, int num_states, int num_actions) {
  if (q.size() != static_cast<Eigen::Index>(num_states) * num_actions) {
    fail(ErrorKind::DimensionMismatch, "greedy_policy: q has length " +
                                           std::to_string(q.size()) + ", expected S*A");
  }
  std::vector<int> actions(static_cast<std::size_t>(num_states));
  for (int s = 0; s < num_states; ++s) {
    int best = 0;
    double best_value = q(s * num_actions);
    for (int a = 1; a < num_actions; ++a) {
      // strict comparison keeps the smallest index on ties
      if (q(s * num_actions + a) > best_value) {
        best = a;
        best_value = q(s * num_actions + a);
      }
    }
    actions[static_cast<std::size_t>(s)] = best;
  }
  return Policy::deterministic(std::move(actions), num_actions);
}

OptimalityGap optimality_gap(const VectorXd& q_star, const VectorXd& v_star,
                             int num_states, int num_actions) {
  OptimalityGap gap;
  if (num_actions == 1) {
    gap.infinite = true;
    gap.value = std::numeric_limits<double>::infinity();
    return gap;
  }
  const Policy greedy = greedy_policy(q_star, num_states, num_actions);
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s < num_states; ++s) {
    for (int a = 0; a < num_actions; ++a) {
      if (a == greedy.action(s)) continue;
      best = std::min(best, std::abs(v_star(s) - q_star(s * num_actions + a)));
    }
  }
  gap.value = best;
  gap.violated = !(best > 0.0);
  return gap;
}

PlanningSolution solve_optimal(const TabularMDP& mdp, double tol, int max_iter) {
  require_valid(mdp);
  if (!(tol > 0.0)) fail(ErrorKind::InvalidParameter, "planning tolerance must be positive");

  const double gamma = mdp.discount;
  const double stop = tol * (1.0 - gamma) / gamma;
  VectorXd q = VectorXd::Zero(mdp.num_pairs());
  int it = 0;
  bool converged = false;
  while (it < max_iter) {
    VectorXd next = bellman_optimality(mdp, q);
    const double change = (next - q).cwiseAbs().maxCoeff();
    q = std::move(next);
    ++it;
    if (change <= stop) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    fail(ErrorKind::NonConvergence, "value iteration did not reach tolerance " +
                                        fmt_double(tol) + " within " +
                                        std::to_string(max_iter) + " iterations");
  }

  PlanningSolution sol;
  sol.q_star = std::move(q);
  sol.v_star = max_reduce(sol.q_star, mdp.num_states, mdp.num_actions);
  sol.pi_star = greedy_policy(sol.q_star, mdp.num_states, mdp.num_actions);
  sol.kappa = optimality_gap(sol.q_star, sol.v_star, mdp.num_states, mdp.num_actions);
  sol.residual = (bellman_optimality(mdp, sol.q_star) - sol.q_star).cwiseAbs().maxCoeff();
  sol.iterations = it;
  return sol;
}

MatrixXd induced_kernel(const TabularMDP& mdp, const Policy& policy) {
  if (policy.num_states() != mdp.num_states || policy.num_actions() != mdp.num_actions) {
    fail(ErrorKind::DimensionMismatch, "policy shape does not match the MDP");
  }
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const MatrixXd pi = policy.table();
  MatrixXd k(S * A, S * A);
  for (int i = 0; i < S * A; ++i) {
    for (int s2 = 0; s2 < S; ++s2) {
      for (int a2 = 0; a2 < A; ++a2) {
        k(i, s2 * A + a2) = mdp.transition(i, s2) * pi(s2, a2);
      }
    }
  }
  return k;
}

TabularMDP garnet_random_mdp(std::uint64_t seed, int num_states, int num_actions,
                             int branching, double discount) {
  if (num_states < 1 || num_actions < 1) {
    fail(ErrorKind::InvalidParameter, "garnet: S and A must be positive");
  }
  if (branching < 1 || branching > num_states) {
    fail(ErrorKind::InvalidParameter, "garnet: branching must lie in [1, S]");
  }
  if (!(discount > 0.0 && discount < 1.0)) {
    fail(ErrorKind::InvalidParameter, "garnet: discount must lie in (0,1)");
  }

  CounterRng rng(derive_key(seed, {0x6a72u}));
  TabularMDP mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.discount = discount;
  mdp.transition = MatrixXd::Zero(num_states * num_actions, num_states);
  mdp.reward.resize(num_states * num_actions);

  std::vector<int> states(static_cast<std::size_t>(num_states));
  std::vector<double> cuts(static_cast<std::size_t>(branching + 1));
  for (int i = 0; i < num_states * num_actions; ++i) {
    // partial Fisher-Yates: the first `branching` slots are a uniform subset
    std::iota(states.begin(), states.end(), 0);
    for (int j = 0; j < branching; ++j) {
      const int pick = j + static_cast<int>(rng.uniform() * (num_states - j));
      std::swap(states[static_cast<std::size_t>(j)], states[static_cast<std::size_t>(pick)]);
    }
    // uniform partition of [0,1] by branching-1 sorted cut points
    cuts.front() = 0.0;
    cuts.back() = 1.0;
    for (int j = 1; j < branching; ++j) cuts[static_cast<std::size_t>(j)] = rng.uniform();
    std::sort(cuts.begin() + 1, cuts.end() - 1);
    double total = 0.0;
    for (int j = 0; j < branching; ++j) {
      const double w = cuts[static_cast<std::size_t>(j + 1)] - cuts[static_cast<std::size_t>(j)];
      mdp.transition(i, states[static_cast<std::size_t>(j)]) = w;
      total += w;
    }
    mdp.transition.row(i) /= total;
    mdp.reward(i) = rng.uniform();
  }
  return mdp;
}

std::string mdp_to_json_string(const TabularMDP& mdp) {
  nlohmann::json j;
  j["S"] = mdp.num_states;
  j["A"] = mdp.num_actions;
  j["gamma"] = mdp.discount;
  j["reward"] = std::vector<double>(mdp.reward.data(), mdp.reward.data() + mdp.reward.size());
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < mdp.transition.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(mdp.transition.cols()));
    for (Eigen::Index k = 0; k < mdp.transition.cols(); ++k) row[static_cast<std::size_t>(k)] = mdp.transition(i, k);
    rows.push_back(row);
  }
  j["transition"] = rows;
  return j.dump(2);
}

TabularMDP mdp_from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::ParseError, "MDP JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  TabularMDP mdp;
  try {
    mdp.num_states = j.at("S").get<int>();
    mdp.num_actions = j.at("A").get<int>();
    mdp.discount = j.at("gamma").get<double>();
    const auto reward = j.at("reward").get<std::vector<double>>();
    const auto rows = j.at("transition").get<std::vector<std::vector<double>>>();
    mdp.reward = Eigen::Map<const VectorXd>(reward.data(), static_cast<Eigen::Index>(reward.size()));
    const Eigen::Index cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
    mdp.transition.resize(static_cast<Eigen::Index>(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (static_cast<Eigen::Index>(rows[i].size()) != cols) {
        fail(ErrorKind::ParseError, "MDP JSON: ragged transition row " + std::to_string(i));
      }
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        mdp.transition(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ParseError, std::string("MDP JSON: ") + e.what());
  }
  require_valid(mdp);
  return mdp;
}

TabularMDP read_mdp_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return mdp_from_json_string(ss.str());
}

void write_mdp_json(const TabularMDP& mdp, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path);
  out << mdp_to_json_string(mdp) << '\n';
}

}  // namespace qclt
