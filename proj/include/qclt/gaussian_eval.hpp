#pragma once

#include "qclt/chain.hpp"
#include "qclt/covariance.hpp"
#include "qclt/mdp.hpp"
#include "qclt/qlearning.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace qclt {

/// R x d matrix of Monte-Carlo draws, one replica per row.
struct SampleMatrix {
  MatrixXd rows;
  std::string label;

  Eigen::Index replicas() const noexcept { return rows.rows(); }
  Eigen::Index dim() const noexcept { return rows.cols(); }
};

/// Checks R >= 2 and finiteness; throws InvalidParameter otherwise.
SampleMatrix make_sample_matrix(MatrixXd rows, std::string label);

/// Symmetric square root with negative eigenvalues clamped at zero.
/// Throws NotPSD when an eigenvalue is below -1e-8.
MatrixXd psd_sqrt(const MatrixXd& sigma);

/// R draws of sigma^{1/2} Y, Y standard normal. Row r uses the stream
/// keyed by (seed, r).
SampleMatrix sample_gaussian(const MatrixXd& sigma, std::int64_t replicas, std::uint64_t seed,
                             int jobs = 1);

enum class RectangleKind { one_sided_max, two_sided_grid, randomized_corners };

std::string to_string(RectangleKind kind);

/// Axis-aligned rectangles prod_j (lower_j, upper_j]; infinite ends allowed.
/// Row i of `lower`/`upper` is rectangle i; kinds[i] records its builder.
struct RectangleFamily {
  std::vector<RectangleKind> kinds;
  MatrixXd lower;
  MatrixXd upper;

  int count() const noexcept { return static_cast<int>(kinds.size()); }
  /// Builder names joined by '+', in order of first appearance.
  std::string label() const;
  void append(const RectangleFamily& other);
};

/// Lower orthants (-inf, q_j] at the pooled per-coordinate quantiles for
/// each level in `levels` (fractions in (0,1)).
RectangleFamily one_sided_max_family(const SampleMatrix& a, const SampleMatrix& b,
                                     const std::vector<double>& levels);

/// Central boxes (q_j(level), q_j(1 - level)] for each level in (0, 1/2).
RectangleFamily two_sided_grid_family(const SampleMatrix& a, const SampleMatrix& b,
                                      const std::vector<double>& levels);

/// Rectangles whose corners are rows of `reference`: half are lower orthants
/// at one row, half are boxes spanned by two rows.
RectangleFamily randomized_corners_family(const SampleMatrix& reference, int count,
                                          std::uint64_t seed);

/// Levels 1%, 2%, ..., 99%.
std::vector<double> percent_grid();

/// One-sided family at percent_grid() plus 512 randomized corners from b.
RectangleFamily default_family(const SampleMatrix& a, const SampleMatrix& b, std::uint64_t seed);

struct DkEstimate {
  double value = 0.0;
  double standard_error = 0.0;
  int argmax = -1;
  int count = 0;
};

/// max over the family of |P_a(A) - P_b(A)|, a lower bound on the
/// rectangle Kolmogorov distance between the sampled laws.
DkEstimate estimate_dk(const SampleMatrix& a, const SampleMatrix& b, const RectangleFamily& family);

/// Uses default_family(a, b, seed).
DkEstimate estimate_dk(const SampleMatrix& a, const SampleMatrix& b, std::uint64_t seed = 0);

/// One-sample Kolmogorov-Smirnov distance of each column against
/// N(0, sigma_jj); a zero variance compares against the point mass at 0.
VectorXd marginal_ks(const SampleMatrix& a, const MatrixXd& sigma);

struct PrDecomposition {
  VectorXd scaled_error;  // sqrt(n) Delta-bar_n
  VectorXd w_n;
  VectorXd remainder;     // scaled_error - w_n
  VectorXd remainder_g;   // G scaled_error - G w_n
  double sup_remainder = 0.0;
  double sup_remainder_g = 0.0;
};

/// W_n = n^{-1/2} G^{-1} sum_t (Phi_eps(x_t) - (P-bar Phi_eps)(x_{t-1})) from
/// the head/tail triple counts; the remainder is the difference to
/// sqrt(n) Delta-bar_n. Throws MissingDiagnostics without triple counts.
PrDecomposition pr_decompose(const Trajectory& traj, const NoiseModel& noise, const MatrixXd& g);

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Least squares of ln(value) on ln(n) with a 1000-resample bootstrap 90%
/// interval for the slope. Throws InsufficientPoints or NonPositiveValue.
RateFit rate_fit(const std::vector<std::pair<double, double>>& points, std::uint64_t seed = 0x5eed);

struct CoverageResult {
  double nominal = 0.0;
  double threshold = 0.0;  // calibrated c; +inf when nominal == 1
  double rate = 0.0;
  double standard_error = 0.0;
};

/// Fraction of rows with max_j |x_j| <= c, c the nominal quantile of
/// max_j |(sigma^{1/2} Y)_j| over `calibration_draws` Gaussian draws.
CoverageResult coverage_experiment(const SampleMatrix& samples, const MatrixXd& sigma_infty,
                                   double nominal, std::int64_t calibration_draws,
                                   std::uint64_t seed, int jobs = 1);

enum class MdsGenerator { rademacher_iid, scaled_deterministic_qv, markov_functional };

std::string to_string(MdsGenerator generator);

/// Chain data driving the markov_functional generator.
struct MarkovFunctional {
  MatrixXd kernel;      // m x m
  VectorXd stationary;  // start law of z_0
  MatrixXd phi;         // m x d, row z is Phi(z)
  MatrixXd next_phi;    // m x d, row z is (P Phi)(z)
};

struct MdsBenchSpec {
  int d = 1;
  std::int64_t n = 1;
  MdsGenerator generator = MdsGenerator::rademacher_iid;
  std::optional<MatrixXd> shift_sigma;  // defaults to Sigma_n / n
  std::uint64_t seed = 0;
  std::int64_t replicas = 1000;
  /// scaled_deterministic_qv: X_k = A_k eta_k; one matrix reused for all k,
  /// or exactly n matrices.
  std::vector<MatrixXd> mixing;
  std::optional<MarkovFunctional> chain;
};

/// Throws InvalidSpec when the spec is inconsistent.
void validate_bench_spec(const MdsBenchSpec& spec);

struct MdsSample {
  SampleMatrix s_n;
  MatrixXd sigma_n;
  /// V_k for k = 1..n; a single entry when all V_k coincide.
  std::vector<MatrixXd> v_k;
  /// E ||X_k||_inf^3 per k (replica means); a single entry when constant in k.
  std::vector<double> max_abs_cubed;
};

MdsSample mds_generate(const MdsBenchSpec& spec, int jobs = 1);

/// sum_k E||X_k||^3_inf / lambda_min(P_k + shift), P_k = sum_{i >= k} V_i.
double bracket_moment_sum(const MdsSample& sample, std::int64_t n, const MatrixXd& shift);

/// (ln+ d)^{5/4} / sigma_min(Sigma_n)^{1/2} * (sigma-bar(shift) + moment_sum)^{1/2}
/// with ln+ = max(1, ln), sigma_min the smallest diagonal entry of sigma_n
/// and sigma-bar^2 the largest diagonal entry of the shift.
/// Throws DegenerateSigma when sigma_min <= 0.
double theorem1_bracket(const MatrixXd& sigma_n, const MatrixXd& shift, double moment_sum);

}  // namespace qclt
