#include "qclt/qlearning.hpp"

#include "qclt/errors.hpp"
#include "qclt/rng.hpp"

#include <cmath>

namespace qclt {

namespace {

constexpr int kDiagnosticsGuard = 4096;
constexpr double kSandwichTol = 1e-9;

bool is_power_of_two(std::int64_t t) { return t > 0 && (t & (t - 1)) == 0; }

// Cumulative tables for drawing actions and next states.
class TransitionSampler {
public:
  TransitionSampler(const TabularMDP& mdp, const Policy& behavior, const VectorXd& nu)
      : S_(mdp.num_states), A_(mdp.num_actions) {
    const MatrixXd pi = behavior.table();
    actions_.resize(static_cast<std::size_t>(S_ * A_));
    next_.resize(static_cast<std::size_t>(S_ * A_ * S_));
    initial_.resize(static_cast<std::size_t>(S_));
    for (int s = 0; s < S_; ++s) {
      double acc = 0.0;
      for (int a = 0; a < A_; ++a) actions_[static_cast<std::size_t>(s * A_ + a)] = (acc += pi(s, a));
    }
    for (int sa = 0; sa < S_ * A_; ++sa) {
      double acc = 0.0;
      for (int s2 = 0; s2 < S_; ++s2) next_[static_cast<std::size_t>(sa * S_ + s2)] = (acc += mdp.transition(sa, s2));
    }
    double acc = 0.0;
    for (int s = 0; s < S_; ++s) initial_[static_cast<std::size_t>(s)] = (acc += nu(s));
  }

  int initial(CounterRng& rng) const { return sample_from_cumulative(initial_, rng.uniform()); }
  int action(int s, CounterRng& rng) const {
    return sample_from_cumulative(std::span(actions_).subspan(static_cast<std::size_t>(s * A_), static_cast<std::size_t>(A_)),
                                  rng.uniform());
  }
  int next_state(int sa, CounterRng& rng) const {
    return sample_from_cumulative(std::span(next_).subspan(static_cast<std::size_t>(sa * S_), static_cast<std::size_t>(S_)),
                                  rng.uniform());
  }
  Triple transition_from(int s, CounterRng& rng) const {
    Triple x;
    x.s = s;
    x.a = action(s, rng);
    x.s_next = next_state(s * A_ + x.a, rng);
    return x;
  }

private:
  int S_;
  int A_;
  std::vector<double> actions_;
  std::vector<double> next_;
  std::vector<double> initial_;
};

// (P^pi x)(s,a) = sum_s' P(s'|s,a) x(s', pi(s')).
VectorXd apply_policy_kernel(const TabularMDP& mdp, const std::vector<int>& pi, const VectorXd& x) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  VectorXd selected(S);
  for (int s = 0; s < S; ++s) selected(s) = x(s * A + pi[static_cast<std::size_t>(s)]);
  return mdp.transition * selected;
}

// Per-coordinate compensated sums of Q_1..Q_n, touched only when a coordinate changes.
class LazyAverage {
public:
  explicit LazyAverage(const VectorXd& q0)
      : value_(q0), sum_(VectorXd::Zero(q0.size())), carry_(VectorXd::Zero(q0.size())),
        since_(q0.size(), 1) {}

  // Q_k(i) becomes `v` starting at k = t.
  void update(Eigen::Index i, double v, std::int64_t t) {
    add(i, value_(i) * static_cast<double>(t - since_[static_cast<std::size_t>(i)]));
    value_(i) = v;
    since_[static_cast<std::size_t>(i)] = t;
  }

  VectorXd mean(std::int64_t n) {
    for (Eigen::Index i = 0; i < value_.size(); ++i) update(i, value_(i), n + 1);
    return sum_ / static_cast<double>(n);
  }

private:
  void add(Eigen::Index i, double x) {
    const double y = x - carry_(i);
    const double t = sum_(i) + y;
    carry_(i) = (t - sum_(i)) - y;
    sum_(i) = t;
  }

  VectorXd value_;
  VectorXd sum_;
  VectorXd carry_;
  std::vector<std::int64_t> since_;
};

struct DiagnosticState {
  const PlanningSolution* planning = nullptr;
  const VectorXd* mu = nullptr;
  VectorXd delta1;
  VectorXd delta2;
  SandwichDiagnostics* out = nullptr;
};

Trajectory simulate(const RunConfig& cfg, const VectorXd& q_star, std::uint64_t replica,
                    DiagnosticState* diag) {
  validate_run_config(cfg);
  const TabularMDP& mdp = cfg.mdp;
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const int d = S * A;
  const std::int64_t n = cfg.horizon;
  if (q_star.size() != d) fail(ErrorKind::DimensionMismatch, "q_star has the wrong length");
  const double upper = mdp.horizon_bound();
  const double bound_tol = 1e-12 * upper;

  TransitionSampler sampler(mdp, cfg.behavior, cfg.initial_state_distribution);
  CounterRng rng(derive_key(cfg.seed, {replica}));

  Trajectory traj;
  traj.horizon = n;
  traj.visit_counts.assign(static_cast<std::size_t>(d), 0);
  traj.head_counts.assign(static_cast<std::size_t>(d * S), 0);
  traj.tail_counts.assign(static_cast<std::size_t>(d * S), 0);

  VectorXd q = cfg.q_init;
  LazyAverage average(q);

  // preliminary transition x_{-1}; its endpoint is s_0
  const Triple x_pre = sampler.transition_from(sampler.initial(rng), rng);
  const bool keep_triples = cfg.record_triples || diag != nullptr;
  if (keep_triples) {
    traj.triples.reserve(static_cast<std::size_t>(n + 2));
    traj.triples.push_back(x_pre);
  }
  int s = x_pre.s_next;

  VectorXd q_prev;
  for (std::int64_t t = 0; t < n; ++t) {
    const Triple x = sampler.transition_from(s, rng);
    const int sa = x.s * A + x.a;
    const int xi = sa * S + x.s_next;
    const double alpha = alpha_at(cfg.schedule, t);
    if (keep_triples) traj.triples.push_back(x);
    ++traj.visit_counts[static_cast<std::size_t>(sa)];
    ++traj.tail_counts[static_cast<std::size_t>(xi)];
    if (t > 0) ++traj.head_counts[static_cast<std::size_t>(xi)];

    if (diag != nullptr) {
      const PlanningSolution& plan = *diag->planning;
      const VectorXd& mu = *diag->mu;
      const VectorXd xi_t = noise_xi(q, x, mdp, plan, mu);
      const std::vector<int> pi_t = greedy_policy(q, S, A).actions();
      for (int st = 0; st < S; ++st) {
        const double best = q(st * A + pi_t[static_cast<std::size_t>(st)]);
        for (int a = 0; a < A; ++a) {
          if (a != pi_t[static_cast<std::size_t>(st)] && q(st * A + a) == best) {
            ++diag->out->tie_events;
            st = S;
            break;
          }
        }
      }
      // Delta_{t+1} = (I - alpha D_mu) Delta_t + alpha gamma D_mu P (V_t - V*) + alpha xi_t
      const VectorXd delta = q - plan.q_star;
      const VectorXd dv = max_reduce(q, S, A) - plan.v_star;
      VectorXd predicted = delta - alpha * mu.cwiseProduct(delta) +
                           alpha * mdp.discount * mu.cwiseProduct(mdp.transition * dv) + alpha * xi_t;
      const auto& pi_star = plan.pi_star.actions();
      diag->delta1 += alpha * (xi_t - mu.cwiseProduct(diag->delta1 - mdp.discount * apply_policy_kernel(mdp, pi_star, diag->delta1)));
      diag->delta2 += alpha * (xi_t - mu.cwiseProduct(diag->delta2 - mdp.discount * apply_policy_kernel(mdp, pi_t, diag->delta2)));
      q_prev = q;
      q_step_inplace(q, x, alpha, mdp);
      const VectorXd delta_next = q - plan.q_star;
      diag->out->recursion_residual =
          std::max(diag->out->recursion_residual, (predicted - delta_next).cwiseAbs().maxCoeff());
      std::int64_t changed = 0;
      for (int i = 0; i < d; ++i) {
        if (q(i) != q_prev(i)) ++changed;
        const double below = diag->delta1(i) - delta_next(i);
        const double above = delta_next(i) - diag->delta2(i);
        const double worst = std::max(below, above);
        if (worst > kSandwichTol) ++diag->out->violation_count;
        diag->out->max_violation = std::max(diag->out->max_violation, worst);
      }
      diag->out->max_changed_entries = std::max(diag->out->max_changed_entries, changed);
    } else {
      q_step_inplace(q, x, alpha, mdp);
    }

    const double updated = q(sa);
    if (updated < -bound_tol || updated > upper + bound_tol) ++traj.bound_violations;
    average.update(sa, updated, t + 1);

    if (is_power_of_two(t + 1)) {
      Checkpoint cp;
      cp.t = t + 1;
      cp.sup_err = (q - q_star).cwiseAbs().maxCoeff();
      if (diag != nullptr) {
        cp.sup_err_delta1 = diag->delta1.cwiseAbs().maxCoeff();
        cp.sup_err_delta2 = diag->delta2.cwiseAbs().maxCoeff();
      }
      traj.recorded_errors.push_back(cp);
    }
    s = x.s_next;
  }

  // x_n closes the last martingale increment; it never touches Q
  const Triple x_last = sampler.transition_from(s, rng);
  if (keep_triples) traj.triples.push_back(x_last);
  ++traj.head_counts[static_cast<std::size_t>((x_last.s * A + x_last.a) * S + x_last.s_next)];

  traj.final_q = q;
  traj.pr_average = average.mean(n);
  traj.pr_error = traj.pr_average - q_star;
  return traj;
}

}  // namespace

RunConfig make_run_config(const TabularMDP& mdp, const Policy& behavior,
                          const StepSchedule& schedule, std::int64_t horizon,
                          std::uint64_t seed, const ChainAnalysis& chain) {
  RunConfig cfg;
  cfg.mdp = mdp;
  cfg.behavior = behavior;
  cfg.schedule = schedule;
  cfg.horizon = horizon;
  cfg.seed = seed;
  cfg.q_init = VectorXd::Zero(mdp.num_pairs());
  cfg.initial_state_distribution = VectorXd::Zero(mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) {
    cfg.initial_state_distribution(s) = chain.mu.segment(s * mdp.num_actions, mdp.num_actions).sum();
  }
  cfg.initial_state_distribution /= cfg.initial_state_distribution.sum();
  return cfg;
}

void validate_run_config(const RunConfig& cfg) {
  require_valid(cfg.mdp);
  const int d = cfg.mdp.num_pairs();
  if (cfg.horizon < 1) fail(ErrorKind::InvalidParameter, "horizon n must be at least 1");
  if (cfg.behavior.num_states() != cfg.mdp.num_states || cfg.behavior.num_actions() != cfg.mdp.num_actions) {
    fail(ErrorKind::DimensionMismatch, "behavior policy shape does not match the MDP");
  }
  if (cfg.q_init.size() != d) fail(ErrorKind::DimensionMismatch, "q_init must have length S*A");
  const double upper = cfg.mdp.horizon_bound();
  for (int i = 0; i < d; ++i) {
    if (!(cfg.q_init(i) >= 0.0 && cfg.q_init(i) <= upper)) {
      fail(ErrorKind::InvalidParameter, "q_init must lie in [0, 1/(1-gamma)] componentwise");
    }
  }
  const VectorXd& nu = cfg.initial_state_distribution;
  if (nu.size() != cfg.mdp.num_states || nu.minCoeff() < 0.0 || std::abs(nu.sum() - 1.0) > 1e-12) {
    fail(ErrorKind::InvalidParameter, "initial_state_distribution must be a probability vector of length S");
  }
  if (!(cfg.schedule.omega > 0.5 && cfg.schedule.omega < 1.0) || cfg.schedule.c0 <= 0.0 ||
      cfg.schedule.k0 < 1 || alpha_at(cfg.schedule, 0) > 1.0) {
    fail(ErrorKind::InvalidParameter, "step schedule must have omega in (1/2,1), c0 > 0, k0 >= 1, alpha_0 <= 1");
  }
}

void q_step_inplace(VectorXd& q, const Triple& x, double alpha, const TabularMDP& mdp) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  if (x.s < 0 || x.s >= S || x.a < 0 || x.a >= A || x.s_next < 0 || x.s_next >= S) {
    fail(ErrorKind::IndexOutOfRange, "triple index outside the MDP");
  }
  if (q.size() != S * A) fail(ErrorKind::DimensionMismatch, "q must have length S*A");
  const int sa = x.s * A + x.a;
  const double next_value = q.segment(static_cast<Eigen::Index>(x.s_next) * A, A).maxCoeff();
  q(sa) += alpha * (mdp.reward(sa) + mdp.discount * next_value - q(sa));
}

VectorXd q_step(const VectorXd& q, const Triple& x, double alpha, const TabularMDP& mdp) {
  if (!(alpha > 0.0 && alpha <= 1.0)) fail(ErrorKind::InvalidParameter, "alpha must lie in (0,1]");
  VectorXd out = q;
  q_step_inplace(out, x, alpha, mdp);
  return out;
}

Trajectory run_trajectory(const RunConfig& cfg, const VectorXd& q_star, std::uint64_t replica) {
  return simulate(cfg, q_star, replica, nullptr);
}

DiagnosticRun run_with_diagnostics(const RunConfig& cfg, const PlanningSolution& planning,
                                   const ChainAnalysis& chain, std::uint64_t replica) {
  if (cfg.mdp.num_pairs() > kDiagnosticsGuard) {
    fail(ErrorKind::GuardExceeded, "diagnostics need S*A <= 4096");
  }
  DiagnosticRun run;
  DiagnosticState state;
  state.planning = &planning;
  state.mu = &chain.mu;
  state.delta1 = cfg.q_init - planning.q_star;
  state.delta2 = state.delta1;
  state.out = &run.sandwich;
  run.trajectory = simulate(cfg, planning.q_star, replica, &state);
  run.sandwich.delta1 = state.delta1;
  run.sandwich.delta2 = state.delta2;
  return run;
}

VectorXd noise_xi(const VectorXd& q, const Triple& x, const TabularMDP& mdp,
                  const PlanningSolution& planning, const VectorXd& mu) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const int sa = x.s * A + x.a;
  const double gamma = mdp.discount;
  const VectorXd delta = q - planning.q_star;
  const VectorXd dv = max_reduce(q, S, A) - planning.v_star;
  // gamma (P_t - D_mu P) dV - (Lambda_t - D_mu) Delta + eps_t
  VectorXd xi = -gamma * mu.cwiseProduct(mdp.transition * dv) + mu.cwiseProduct(delta);
  const double eps = mdp.reward(sa) + gamma * planning.v_star(x.s_next) - planning.q_star(sa);
  xi(sa) += gamma * dv(x.s_next) - delta(sa) + eps;
  return xi;
}

namespace {

void require_bundle(const NoiseModel& noise, const PoissonBundle& bundle, Eigen::Index n) {
  if (noise.phi_eps.phi.rows() != n || bundle.phi_p.rows() != n || bundle.phi_lambda.rows() != n ||
      bundle.next_phi_p.rows() != n || bundle.next_phi_lambda.rows() != n || noise.next_phi_eps.rows() != n) {
    fail(ErrorKind::MissingPoisson, "Poisson solutions for eps, Lambda and P are required");
  }
}

// Phi_eps(y) + gamma Phi_P(y) dV - Phi_Lambda(y) o dQ, for a row-selected triple of tables.
VectorXd poisson_combination(const MatrixXd& eps_rows, const MatrixXd& p_rows,
                             const MatrixXd& lambda_rows, Eigen::Index row, const VectorXd& dv,
                             const VectorXd& dq, double gamma, int S) {
  const Eigen::Index d = eps_rows.cols();
  VectorXd out = eps_rows.row(row).transpose();
  for (Eigen::Index sa = 0; sa < d; ++sa) {
    double acc = 0.0;
    for (int s2 = 0; s2 < S; ++s2) acc += p_rows(row, sa * S + s2) * dv(s2);
    out(sa) += gamma * acc - lambda_rows(row, sa) * dq(sa);
  }
  return out;
}

}  // namespace

NoiseSplit split_noise(const VectorXd& q, const Triple& prev, const Triple& cur,
                       const TabularMDP& mdp, const PlanningSolution& planning,
                       const ChainAnalysis& chain, const NoiseModel& noise,
                       const PoissonBundle& bundle) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  require_bundle(noise, bundle, chain.triple_kernel.rows());
  const Eigen::Index p = triple_index(prev.s, prev.a, prev.s_next, A, S);
  const Eigen::Index c = triple_index(cur.s, cur.a, cur.s_next, A, S);
  const VectorXd dv = max_reduce(q, S, A) - planning.v_star;
  const VectorXd dq = q - planning.q_star;
  const double g = mdp.discount;

  const VectorXd phi_cur = poisson_combination(noise.phi_eps.phi, bundle.phi_p, bundle.phi_lambda, c, dv, dq, g, S);
  const VectorXd next_prev = poisson_combination(noise.next_phi_eps, bundle.next_phi_p, bundle.next_phi_lambda, p, dv, dq, g, S);
  const VectorXd next_cur = poisson_combination(noise.next_phi_eps, bundle.next_phi_p, bundle.next_phi_lambda, c, dv, dq, g, S);

  NoiseSplit out;
  out.xi = noise_xi(q, cur, mdp, planning, chain.mu);
  out.martingale = phi_cur - next_prev;
  out.remainder = next_prev - next_cur;
  return out;
}

VectorXd conditional_mean_xi0(const VectorXd& q, const Triple& prev, const TabularMDP& mdp,
                              const ChainAnalysis& chain, const PlanningSolution& planning,
                              const NoiseModel& noise, const PoissonBundle& bundle) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  require_bundle(noise, bundle, chain.triple_kernel.rows());
  const Eigen::Index p = triple_index(prev.s, prev.a, prev.s_next, A, S);
  const VectorXd dv = max_reduce(q, S, A) - planning.v_star;
  const VectorXd dq = q - planning.q_star;
  const double g = mdp.discount;
  const VectorXd next_prev =
      poisson_combination(noise.next_phi_eps, bundle.next_phi_p, bundle.next_phi_lambda, p, dv, dq, g, S);

  VectorXd mean = VectorXd::Zero(mdp.num_pairs());
  for (Eigen::Index y = 0; y < chain.triple_kernel.cols(); ++y) {
    const double w = chain.triple_kernel(p, y);
    if (w == 0.0) continue;
    mean += w * (poisson_combination(noise.phi_eps.phi, bundle.phi_p, bundle.phi_lambda, y, dv, dq, g, S) - next_prev);
  }
  return mean;
}

void PolyakAverager::push(const VectorXd& q) {
  if (count_ == 0) {
    sum_ = VectorXd::Zero(q.size());
    carry_ = VectorXd::Zero(q.size());
  } else if (q.size() != sum_.size()) {
    fail(ErrorKind::DimensionMismatch, "PolyakAverager: vector length changed");
  }
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const double y = q(i) - carry_(i);
    const double t = sum_(i) + y;
    carry_(i) = (t - sum_(i)) - y;
    sum_(i) = t;
  }
  ++count_;
}

VectorXd PolyakAverager::mean() const {
  if (count_ == 0) fail(ErrorKind::EmptyStream, "Polyak average of an empty stream");
  return sum_ / static_cast<double>(count_);
}

VectorXd polyak_average(std::span<const VectorXd> stream) {
  PolyakAverager avg;
  for (const VectorXd& q : stream) avg.push(q);
  return avg.mean();
}

}  // namespace qclt
