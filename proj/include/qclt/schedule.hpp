#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qclt {

/// Polynomial step sizes alpha_k = c0 / (k + k0)^omega with omega in (1/2, 1).
struct StepSchedule {
  double c0 = 1.0;
  double omega = 2.0 / 3.0;
  std::int64_t k0 = 1;
};

/// Drift constant b = (1 - gamma) * mu_min used by every step-size bound.
inline double drift_constant(double gamma, double mu_min) { return (1.0 - gamma) * mu_min; }

/// Violations of the schedule invariants for drift constant b:
/// omega in (1/2,1), c0 > 0, k0 >= 1, c0*b <= 1/2, k0^(1-omega) >= 8/(b*c0), alpha_0 <= 1.
std::vector<std::string> schedule_violations(const StepSchedule& sched, double b);

/// Builds a schedule and throws InvalidParameter when any invariant fails.
StepSchedule make_step_schedule(double c0, double omega, std::int64_t k0, double b);

/// k0 = ceil((8 / ((1-gamma) mu_min c0))^(1/(1-omega))), bumped upward if rounding
/// leaves k0^(1-omega) short of the bound. Throws InvalidParameter when
/// c0*b > 1/2 and Overflow when k0 exceeds the int64 range.
std::int64_t default_k0(double c0, double omega, double gamma, double mu_min);

/// Largest admissible c0 for drift constant b (c0 * b = 1/2); this choice
/// minimizes the default k0.
inline double default_c0(double b) { return 0.5 / b; }

double alpha_at(const StepSchedule& sched, std::int64_t k);

/// prod_{j=m}^{n} (1 - alpha_j b); 1 when m > n. Log-space beyond 1e5 factors.
double decay_product(const StepSchedule& sched, double b, std::int64_t m, std::int64_t n);

/// Same product over an explicit sequence, alpha[j] being alpha_j.
double decay_product(std::span<const double> alpha, double b, std::int64_t m, std::int64_t n);

enum class LemmaStatus { passed, failed, skipped };

std::string to_string(LemmaStatus status);

struct LemmaCheck {
  std::string name;
  LemmaStatus status = LemmaStatus::skipped;
  /// Smallest (bound - value) seen; for the bsum identity, largest relative error.
  double worst_slack = 0.0;
  std::int64_t worst_index = -1;
  std::string note;
};

struct StepLemmaReport {
  std::vector<LemmaCheck> checks;
  bool all_passed() const;
  const LemmaCheck& find(const std::string& name) const;
};

/// Polynomial parameters that unlock the lemmas requiring the schedule form.
struct PolynomialForm {
  double c0;
  double omega;
  std::int64_t k0;
};

/// Evaluates the five step-size lemmas over alpha[0..horizon]. Lemmas whose
/// hypotheses fail (or that need the polynomial form when none is given)
/// are reported as skipped.
StepLemmaReport verify_step_lemmas(std::span<const double> alpha, double b,
                                   std::optional<PolynomialForm> form);

StepLemmaReport verify_step_lemmas(const StepSchedule& sched, double b, std::int64_t horizon);

/// alpha_0 .. alpha_horizon.
std::vector<double> alpha_sequence(const StepSchedule& sched, std::int64_t horizon);

}  // namespace qclt
