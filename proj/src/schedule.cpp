#include "qclt/schedule.hpp"

#include "qclt/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qclt {

namespace {

constexpr double kLogSpaceThreshold = 1e5;
constexpr double kBsumRelTol = 1e-10;

bool k0_bound_holds(double c0, double omega, std::int64_t k0, double b, double constant) {
  return std::pow(static_cast<double>(k0), 1.0 - omega) >= constant / (b * c0);
}

}  // namespace

std::vector<std::string> schedule_violations(const StepSchedule& sched, double b) {
  std::vector<std::string> out;
  if (!(sched.omega > 0.5 && sched.omega < 1.0)) {
    out.push_back("omega must lie in the open interval (1/2, 1); omega = 1 is not supported");
  }
  if (!(sched.c0 > 0.0)) out.push_back("c0 must be positive");
  if (sched.k0 < 1) out.push_back("k0 must be a positive integer");
  if (!(b > 0.0)) out.push_back("drift constant b must be positive");
  if (!out.empty()) return out;
  if (sched.c0 * b > 0.5) out.push_back("c0 * b = " + std::to_string(sched.c0 * b) + " exceeds 1/2");
  if (!k0_bound_holds(sched.c0, sched.omega, sched.k0, b, 8.0)) {
    out.push_back("k0^(1-omega) below 8/(b*c0)");
  }
  if (alpha_at(sched, 0) > 1.0) out.push_back("alpha_0 = c0/k0^omega exceeds 1");
  return out;
}

StepSchedule make_step_schedule(double c0, double omega, std::int64_t k0, double b) {
  StepSchedule s{c0, omega, k0};
  const auto violations = schedule_violations(s, b);
  if (!violations.empty()) {
    std::string msg = "invalid step schedule:";
    for (const auto& v : violations) msg += " " + v + ";";
    fail(ErrorKind::InvalidParameter, msg);
  }
  return s;
}

std::int64_t default_k0(double c0, double omega, double gamma, double mu_min) {
  if (!(c0 > 0.0 && mu_min > 0.0 && gamma > 0.0 && gamma < 1.0)) {
    fail(ErrorKind::InvalidParameter, "default_k0: c0, mu_min must be positive and gamma in (0,1)");
  }
  if (!(omega > 0.5 && omega < 1.0)) {
    fail(ErrorKind::InvalidParameter, "default_k0: omega must lie in (1/2, 1)");
  }
  const double b = drift_constant(gamma, mu_min);
  if (c0 * b > 0.5) {
    fail(ErrorKind::InvalidParameter, "default_k0: c0 * (1-gamma) * mu_min exceeds 1/2");
  }
  const double base = 8.0 / (b * c0);
  const double exact = std::pow(base, 1.0 / (1.0 - omega));
  constexpr double kLimit = 9.0e18;
  if (!std::isfinite(exact) || exact > kLimit) {
    fail(ErrorKind::Overflow, "default_k0: k0 exceeds the 64-bit range (omega too close to 1)");
  }
  // absorb pow() rounding just above an integer, then restore the bound
  auto k0 = static_cast<std::int64_t>(std::ceil(exact * (1.0 - 1e-12)));
  k0 = std::max<std::int64_t>(k0, 1);
  while (!k0_bound_holds(c0, omega, k0, b, 8.0)) ++k0;
  return k0;
}

double alpha_at(const StepSchedule& sched, std::int64_t k) {
  return sched.c0 / std::pow(static_cast<double>(k + sched.k0), sched.omega);
}

std::vector<double> alpha_sequence(const StepSchedule& sched, std::int64_t horizon) {
  std::vector<double> out(static_cast<std::size_t>(horizon + 1));
  for (std::int64_t k = 0; k <= horizon; ++k) out[static_cast<std::size_t>(k)] = alpha_at(sched, k);
  return out;
}

namespace {

template <class AlphaFn>
double product_impl(AlphaFn&& alpha, double b, std::int64_t m, std::int64_t n) {
  if (m > n) return 1.0;
  const bool log_space = static_cast<double>(n - m) > kLogSpaceThreshold;
  double prod = 1.0;
  double log_sum = 0.0;
  for (std::int64_t j = m; j <= n; ++j) {
    const double x = alpha(j) * b;
    if (!(x >= 0.0 && x < 1.0)) {
      fail(ErrorKind::InvalidRange, "factor 1 - alpha_j b leaves (0,1] at j = " + std::to_string(j));
    }
    if (log_space) {
      log_sum += std::log1p(-x);
    } else {
      prod *= 1.0 - x;
    }
  }
  return log_space ? std::exp(log_sum) : prod;
}

}  // namespace

double decay_product(const StepSchedule& sched, double b, std::int64_t m, std::int64_t n) {
  return product_impl([&](std::int64_t j) { return alpha_at(sched, j); }, b, m, n);
}

double decay_product(std::span<const double> alpha, double b, std::int64_t m, std::int64_t n) {
  if (m <= n && (m < 0 || n >= static_cast<std::int64_t>(alpha.size()))) {
    fail(ErrorKind::InvalidRange, "decay_product: index range outside the sequence");
  }
  return product_impl([&](std::int64_t j) { return alpha[static_cast<std::size_t>(j)]; }, b, m, n);
}

std::string to_string(LemmaStatus status) {
  switch (status) {
    case LemmaStatus::passed: return "passed";
    case LemmaStatus::failed: return "failed";
    case LemmaStatus::skipped: return "skipped";
  }
  return "unknown";
}

bool StepLemmaReport::all_passed() const {
  return std::none_of(checks.begin(), checks.end(),
                      [](const LemmaCheck& c) { return c.status == LemmaStatus::failed; });
}

const LemmaCheck& StepLemmaReport::find(const std::string& name) const {
  for (const auto& c : checks) {
    if (c.name == name) return c;
  }
  fail(ErrorKind::InvalidParameter, "no lemma check named " + name);
}

namespace {

LemmaCheck skipped(std::string name, std::string why) {
  LemmaCheck c;
  c.name = std::move(name);
  c.status = LemmaStatus::skipped;
  c.note = std::move(why);
  return c;
}

// Tracks the smallest bound-minus-value over a lemma's range.
struct SlackTracker {
  double worst = std::numeric_limits<double>::infinity();
  std::int64_t at = -1;
  void observe(double bound, double value, std::int64_t k) {
    const double slack = bound - value;
    if (slack < worst) {
      worst = slack;
      at = k;
    }
  }
  LemmaCheck finish(std::string name) const {
    LemmaCheck c;
    c.name = std::move(name);
    c.worst_slack = worst;
    c.worst_index = at;
    c.status = worst >= 0.0 ? LemmaStatus::passed : LemmaStatus::failed;
    return c;
  }
};

}  // namespace

StepLemmaReport verify_step_lemmas(std::span<const double> alpha, double b,
                                   std::optional<PolynomialForm> form) {
  StepLemmaReport report;
  const auto horizon = static_cast<std::int64_t>(alpha.size()) - 1;

  // (i) bsum identity: needs a positive non-increasing sequence with alpha_0 <= 1/b.
  bool monotone = horizon >= 1 && b > 0.0;
  for (std::size_t j = 0; monotone && j < alpha.size(); ++j) {
    if (!(alpha[j] > 0.0)) monotone = false;
    if (j > 0 && alpha[j] > alpha[j - 1]) monotone = false;
  }
  if (!monotone || alpha[0] > 1.0 / b) {
    report.checks.push_back(skipped("bsum", "sequence not positive non-increasing with alpha_0 <= 1/b"));
  } else {
    LemmaCheck c;
    c.name = "bsum";
    double lhs = 0.0;   // sum_{j=1}^{k} alpha_j prod_{l=j+1}^{k} (1 - alpha_l b)
    double log_prod = 0.0;  // ln prod_{l=1}^{k} (1 - alpha_l b); expm1 avoids cancellation in 1 - prod
    double worst = 0.0;
    for (std::int64_t k = 1; k <= horizon; ++k) {
      const double a = alpha[static_cast<std::size_t>(k)];
      lhs = (1.0 - a * b) * lhs + a;
      log_prod += std::log1p(-a * b);
      const double rhs = -std::expm1(log_prod) / b;
      const double rel = std::abs(lhs - rhs) / std::max(std::abs(rhs), std::numeric_limits<double>::min());
      if (rel > worst) {
        worst = rel;
        c.worst_index = k;
      }
    }
    c.worst_slack = worst;
    c.status = worst <= kBsumRelTol ? LemmaStatus::passed : LemmaStatus::failed;
    c.note = "worst_slack is the largest relative error";
    report.checks.push_back(c);
  }

  const bool poly_ok = form.has_value() && form->omega > 0.5 && form->omega < 1.0 &&
                       form->c0 > 0.0 && form->k0 >= 0 && b > 0.0 && form->c0 * b <= 0.5;
  const auto k0_ok = [&](double constant) {
    return poly_ok && form->k0 > 0 && k0_bound_holds(form->c0, form->omega, form->k0, b, constant);
  };
  const std::string poly_note = "requires alpha_k = c0/(k+k0)^omega with omega in (1/2,1) and b*c0 <= 1/2";

  // (ii) sum_{k=l}^{n-1} alpha_l prod_{j=l+1}^{k} (1 - b alpha_j) <= c0 + 2/(b(1-omega)), n = horizon + 1
  if (!k0_ok(2.0)) {
    report.checks.push_back(skipped("sum_as_Qell", poly_note + " and k0^(1-omega) >= 2/(b c0)"));
  } else {
    SlackTracker t;
    const double bound = form->c0 + 2.0 / (b * (1.0 - form->omega));
    double tail = 1.0;  // sum_{k=l}^{n-1} prod_{j=l+1}^{k}; equals 1 at l = n-1
    for (std::int64_t l = horizon; l >= 0; --l) {
      if (l < horizon) tail = 1.0 + (1.0 - b * alpha[static_cast<std::size_t>(l + 1)]) * tail;
      t.observe(bound, alpha[static_cast<std::size_t>(l)] * tail, l);
    }
    report.checks.push_back(t.finish("sum_as_Qell"));
  }

  // (iii) sum_{j=1}^{k} alpha_j^q prod_{l=j+1}^{k} (1 - alpha_l b) <= (4/b) alpha_k^(q-1)
  if (!k0_ok(8.0)) {
    report.checks.push_back(skipped("rate_of_convergence", poly_note + " and k0^(1-omega) >= 8/(b c0)"));
  } else {
    SlackTracker t;
    for (double q : {1.5, 2.0, 3.0}) {
      double acc = 0.0;
      for (std::int64_t k = 1; k <= horizon; ++k) {
        const double a = alpha[static_cast<std::size_t>(k)];
        acc = (1.0 - a * b) * acc + std::pow(a, q);
        t.observe(4.0 / b * std::pow(a, q - 1.0), acc, k);
      }
    }
    auto c = t.finish("rate_of_convergence");
    c.note = "q in {1.5, 2, 3}";
    report.checks.push_back(c);
  }

  // (iv) alpha_k / alpha_{k+1} <= 1 + b alpha_{k+1}
  if (!k0_ok(8.0)) {
    report.checks.push_back(skipped("alpha_delta", poly_note + " and k0^(1-omega) >= 8/(b c0)"));
  } else {
    SlackTracker t;
    for (std::int64_t k = 0; k < horizon; ++k) {
      const double a = alpha[static_cast<std::size_t>(k)];
      const double a1 = alpha[static_cast<std::size_t>(k + 1)];
      t.observe(1.0 + b * a1, a / a1, k);
    }
    report.checks.push_back(t.finish("alpha_delta"));
  }

  // (v) alpha_j prod_{l=j+1}^{k} (1 - alpha_l b) <= alpha_k for all j <= k
  if (!k0_ok(8.0)) {
    report.checks.push_back(skipped("P_alpha_ineq", poly_note + " and k0^(1-omega) >= 8/(b c0)"));
  } else {
    SlackTracker t;
    double running_max = 0.0;  // max_{j<=k} alpha_j prod_{l=j+1}^{k}(1 - alpha_l b)
    for (std::int64_t k = 0; k <= horizon; ++k) {
      const double a = alpha[static_cast<std::size_t>(k)];
      running_max = std::max(a, (1.0 - a * b) * running_max);
      t.observe(a, running_max, k);
    }
    report.checks.push_back(t.finish("P_alpha_ineq"));
  }
  return report;
}

StepLemmaReport verify_step_lemmas(const StepSchedule& sched, double b, std::int64_t horizon) {
  const auto alpha = alpha_sequence(sched, horizon);
  return verify_step_lemmas(alpha, b, PolynomialForm{sched.c0, sched.omega, sched.k0});
}

}  // namespace qclt
