#include "qclt/gaussian_eval.hpp"

#include "qclt/errors.hpp"
#include "qclt/parallel.hpp"
#include "qclt/rng.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace qclt {

namespace {

constexpr double kPsdTol = 1e-8;
constexpr std::int64_t kChunk = 64;

double quantile_sorted(const std::vector<double>& sorted, double level) {
  const auto idx = static_cast<std::size_t>(std::floor(level * static_cast<double>(sorted.size() - 1)));
  return sorted[std::min(idx, sorted.size() - 1)];
}

std::vector<std::vector<double>> pooled_sorted_columns(const SampleMatrix& a, const SampleMatrix& b) {
  if (a.dim() != b.dim()) fail(ErrorKind::DimensionMismatch, "samples have different dimensions");
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(a.dim()));
  for (Eigen::Index j = 0; j < a.dim(); ++j) {
    auto& col = cols[static_cast<std::size_t>(j)];
    col.reserve(static_cast<std::size_t>(a.replicas() + b.replicas()));
    for (Eigen::Index r = 0; r < a.replicas(); ++r) col.push_back(a.rows(r, j));
    for (Eigen::Index r = 0; r < b.replicas(); ++r) col.push_back(b.rows(r, j));
    std::sort(col.begin(), col.end());
  }
  return cols;
}

double normal_cdf(double x, double sd) {
  if (sd == 0.0) return x >= 0.0 ? 1.0 : 0.0;
  return 0.5 * std::erfc(-x / (sd * std::sqrt(2.0)));
}

double rademacher_sum(CounterRng& rng, std::int64_t n) {
  std::int64_t ones = 0;
  std::int64_t left = n;
  while (left >= 64) {
    ones += std::popcount(rng());
    left -= 64;
  }
  if (left > 0) ones += std::popcount(rng() & ((std::uint64_t{1} << left) - 1));
  return static_cast<double>(2 * ones - n);
}

double min_sym_eigenvalue(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

}  // namespace

SampleMatrix make_sample_matrix(MatrixXd rows, std::string label) {
  if (rows.rows() < 2) fail(ErrorKind::InvalidParameter, "a sample matrix needs at least 2 replicas");
  if (!rows.allFinite()) fail(ErrorKind::InvalidParameter, "sample matrix has non-finite entries");
  return SampleMatrix{std::move(rows), std::move(label)};
}

MatrixXd psd_sqrt(const MatrixXd& sigma) {
  if (sigma.rows() != sigma.cols()) fail(ErrorKind::DimensionMismatch, "covariance must be square");
  if (sigma.size() == 0) return sigma;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(0.5 * (sigma + sigma.transpose()));
  const VectorXd lambda = eig.eigenvalues();
  if (lambda.minCoeff() < -kPsdTol) {
    fail(ErrorKind::NotPSD, "covariance has eigenvalue " + std::to_string(lambda.minCoeff()));
  }
  const VectorXd root = lambda.cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

SampleMatrix sample_gaussian(const MatrixXd& sigma, std::int64_t replicas, std::uint64_t seed, int jobs) {
  if (replicas < 2) fail(ErrorKind::InvalidParameter, "sample_gaussian needs at least 2 replicas");
  const MatrixXd root = psd_sqrt(sigma);
  const Eigen::Index d = sigma.rows();
  const auto rows = parallel_map(replicas, jobs, [&](std::int64_t r) {
    CounterRng rng(derive_key(seed, {static_cast<std::uint64_t>(r)}));
    std::normal_distribution<double> normal;
    VectorXd y(d);
    for (Eigen::Index j = 0; j < d; ++j) y(j) = normal(rng);
    return VectorXd(root * y);
  });
  MatrixXd out(replicas, d);
  for (std::int64_t r = 0; r < replicas; ++r) out.row(r) = rows[static_cast<std::size_t>(r)].transpose();
  return make_sample_matrix(std::move(out), "gaussian");
}

std::string to_string(RectangleKind kind) {
  switch (kind) {
    case RectangleKind::one_sided_max: return "one_sided_max";
    case RectangleKind::two_sided_grid: return "two_sided_grid";
    case RectangleKind::randomized_corners: return "randomized_corners";
  }
  return "unknown";
}

std::string RectangleFamily::label() const {
  std::vector<RectangleKind> seen;
  for (RectangleKind k : kinds) {
    if (std::find(seen.begin(), seen.end(), k) == seen.end()) seen.push_back(k);
  }
  std::string out;
  for (RectangleKind k : seen) {
    if (!out.empty()) out += '+';
    out += to_string(k);
  }
  return out;
}

void RectangleFamily::append(const RectangleFamily& other) {
  if (count() == 0) {
    *this = other;
    return;
  }
  if (other.count() == 0) return;
  if (other.lower.cols() != lower.cols()) fail(ErrorKind::DimensionMismatch, "rectangle families differ in dimension");
  MatrixXd lo(lower.rows() + other.lower.rows(), lower.cols());
  MatrixXd hi(lo.rows(), lo.cols());
  lo << lower, other.lower;
  hi << upper, other.upper;
  lower = std::move(lo);
  upper = std::move(hi);
  kinds.insert(kinds.end(), other.kinds.begin(), other.kinds.end());
}

std::vector<double> percent_grid() {
  std::vector<double> levels(99);
  for (int i = 0; i < 99; ++i) levels[static_cast<std::size_t>(i)] = (i + 1) / 100.0;
  return levels;
}

RectangleFamily one_sided_max_family(const SampleMatrix& a, const SampleMatrix& b,
                                     const std::vector<double>& levels) {
  const auto cols = pooled_sorted_columns(a, b);
  const Eigen::Index d = a.dim();
  const auto m = static_cast<Eigen::Index>(levels.size());
  RectangleFamily fam;
  fam.kinds.assign(levels.size(), RectangleKind::one_sided_max);
  fam.lower = MatrixXd::Constant(m, d, -std::numeric_limits<double>::infinity());
  fam.upper.resize(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double level = levels[static_cast<std::size_t>(i)];
    if (!(level > 0.0 && level < 1.0)) fail(ErrorKind::InvalidParameter, "quantile levels must lie in (0,1)");
    for (Eigen::Index j = 0; j < d; ++j) fam.upper(i, j) = quantile_sorted(cols[static_cast<std::size_t>(j)], level);
  }
  return fam;
}

RectangleFamily two_sided_grid_family(const SampleMatrix& a, const SampleMatrix& b,
                                      const std::vector<double>& levels) {
  const auto cols = pooled_sorted_columns(a, b);
  const Eigen::Index d = a.dim();
  const auto m = static_cast<Eigen::Index>(levels.size());
  RectangleFamily fam;
  fam.kinds.assign(levels.size(), RectangleKind::two_sided_grid);
  fam.lower.resize(m, d);
  fam.upper.resize(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double level = levels[static_cast<std::size_t>(i)];
    if (!(level > 0.0 && level < 0.5)) fail(ErrorKind::InvalidParameter, "two-sided levels must lie in (0,1/2)");
    for (Eigen::Index j = 0; j < d; ++j) {
      fam.lower(i, j) = quantile_sorted(cols[static_cast<std::size_t>(j)], level);
      fam.upper(i, j) = quantile_sorted(cols[static_cast<std::size_t>(j)], 1.0 - level);
    }
  }
  return fam;
}

RectangleFamily randomized_corners_family(const SampleMatrix& reference, int count, std::uint64_t seed) {
  if (count < 1) fail(ErrorKind::InvalidParameter, "family count must be at least 1");
  const Eigen::Index d = reference.dim();
  const auto R = static_cast<std::uint64_t>(reference.replicas());
  CounterRng rng(derive_key(seed, {0x7265637473ULL}));
  RectangleFamily fam;
  fam.kinds.assign(static_cast<std::size_t>(count), RectangleKind::randomized_corners);
  fam.lower.resize(count, d);
  fam.upper.resize(count, d);
  for (int i = 0; i < count; ++i) {
    const auto r1 = static_cast<Eigen::Index>(rng() % R);
    if (i % 2 == 0) {
      fam.lower.row(i).setConstant(-std::numeric_limits<double>::infinity());
      fam.upper.row(i) = reference.rows.row(r1);
    } else {
      const auto r2 = static_cast<Eigen::Index>(rng() % R);
      fam.lower.row(i) = reference.rows.row(r1).cwiseMin(reference.rows.row(r2));
      fam.upper.row(i) = reference.rows.row(r1).cwiseMax(reference.rows.row(r2));
    }
  }
  return fam;
}

RectangleFamily default_family(const SampleMatrix& a, const SampleMatrix& b, std::uint64_t seed) {
  RectangleFamily fam = one_sided_max_family(a, b, percent_grid());
  fam.append(randomized_corners_family(b, 512, seed));
  return fam;
}

DkEstimate estimate_dk(const SampleMatrix& a, const SampleMatrix& b, const RectangleFamily& family) {
  if (a.dim() != b.dim() || family.lower.cols() != a.dim()) {
    fail(ErrorKind::DimensionMismatch, "samples and rectangles must share a dimension");
  }
  if (family.count() < 1) fail(ErrorKind::InvalidParameter, "empty rectangle family");
  const Eigen::Index d = a.dim();
  auto mass = [&](const MatrixXd& x, int i) {
    std::int64_t inside = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      bool in = true;
      for (Eigen::Index j = 0; j < d && in; ++j) {
        const double v = x(r, j);
        in = v > family.lower(i, j) && v <= family.upper(i, j);
      }
      inside += in ? 1 : 0;
    }
    return static_cast<double>(inside) / static_cast<double>(x.rows());
  };
  DkEstimate best;
  best.count = family.count();
  double pa_best = 0.0;
  double pb_best = 0.0;
  for (int i = 0; i < family.count(); ++i) {
    const double pa = mass(a.rows, i);
    const double pb = mass(b.rows, i);
    const double gap = std::abs(pa - pb);
    if (best.argmax < 0 || gap > best.value) {
      best.value = gap;
      best.argmax = i;
      pa_best = pa;
      pb_best = pb;
    }
  }
  best.standard_error = std::sqrt(pa_best * (1.0 - pa_best) / static_cast<double>(a.replicas()) +
                                  pb_best * (1.0 - pb_best) / static_cast<double>(b.replicas()));
  return best;
}

DkEstimate estimate_dk(const SampleMatrix& a, const SampleMatrix& b, std::uint64_t seed) {
  return estimate_dk(a, b, default_family(a, b, seed));
}

VectorXd marginal_ks(const SampleMatrix& a, const MatrixXd& sigma) {
  if (sigma.rows() != a.dim() || sigma.cols() != a.dim()) {
    fail(ErrorKind::DimensionMismatch, "covariance does not match the sample dimension");
  }
  const auto R = static_cast<std::size_t>(a.replicas());
  VectorXd out(a.dim());
  std::vector<double> col(R);
  for (Eigen::Index j = 0; j < a.dim(); ++j) {
    for (std::size_t r = 0; r < R; ++r) col[r] = a.rows(static_cast<Eigen::Index>(r), j);
    std::sort(col.begin(), col.end());
    const double sd = std::sqrt(std::max(sigma(j, j), 0.0));
    double worst = 0.0;
    for (std::size_t i = 0; i < R; ++i) {
      const double f = normal_cdf(col[i], sd);
      // left limit matters for the point-mass reference
      const double f_left = sd == 0.0 ? (col[i] > 0.0 ? 1.0 : 0.0) : f;
      worst = std::max({worst, static_cast<double>(i + 1) / static_cast<double>(R) - f,
                        f_left - static_cast<double>(i) / static_cast<double>(R)});
    }
    out(j) = worst;
  }
  return out;
}

PrDecomposition pr_decompose(const Trajectory& traj, const NoiseModel& noise, const MatrixXd& g) {
  const Eigen::Index m = noise.phi_eps.phi.rows();
  if (traj.head_counts.empty() || traj.tail_counts.empty()) {
    fail(ErrorKind::MissingDiagnostics, "trajectory carries no triple counts");
  }
  if (static_cast<Eigen::Index>(traj.head_counts.size()) != m || noise.next_phi_eps.rows() != m) {
    fail(ErrorKind::MissingDiagnostics, "triple counts do not match the Poisson solution");
  }
  const Eigen::Index d = noise.phi_eps.phi.cols();
  if (g.rows() != d || traj.pr_error.size() != d) fail(ErrorKind::DimensionMismatch, "G or pr_error has the wrong size");
  VectorXd increment_sum = VectorXd::Zero(d);
  for (Eigen::Index x = 0; x < m; ++x) {
    const auto head = static_cast<double>(traj.head_counts[static_cast<std::size_t>(x)]);
    const auto tail = static_cast<double>(traj.tail_counts[static_cast<std::size_t>(x)]);
    if (head != 0.0) increment_sum += head * noise.phi_eps.phi.row(x).transpose();
    if (tail != 0.0) increment_sum -= tail * noise.next_phi_eps.row(x).transpose();
  }
  const double root_n = std::sqrt(static_cast<double>(traj.horizon));
  PrDecomposition out;
  out.scaled_error = root_n * traj.pr_error;
  out.w_n = Eigen::PartialPivLU<MatrixXd>(g).solve(increment_sum) / root_n;
  out.remainder = out.scaled_error - out.w_n;
  out.remainder_g = g * out.scaled_error - g * out.w_n;
  out.sup_remainder = out.remainder.cwiseAbs().maxCoeff();
  out.sup_remainder_g = out.remainder_g.cwiseAbs().maxCoeff();
  return out;
}

RateFit rate_fit(const std::vector<std::pair<double, double>>& points, std::uint64_t seed) {
  if (points.size() < 3) fail(ErrorKind::InsufficientPoints, "rate_fit needs at least 3 points");
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& [n, v] : points) {
    if (!(n > 0.0) || !(v > 0.0)) fail(ErrorKind::NonPositiveValue, "rate_fit needs positive n and values");
    x.push_back(std::log(n));
    y.push_back(std::log(v));
  }
  auto fit = [](const std::vector<double>& xs, const std::vector<double>& ys,
                const std::vector<std::size_t>& idx) -> std::optional<std::pair<double, double>> {
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i : idx) {
      mx += xs[i];
      my += ys[i];
    }
    mx /= static_cast<double>(idx.size());
    my /= static_cast<double>(idx.size());
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i : idx) {
      sxx += (xs[i] - mx) * (xs[i] - mx);
      sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx <= 1e-300) return std::nullopt;
    const double slope = sxy / sxx;
    return std::make_pair(slope, my - slope * mx);
  };
  std::vector<std::size_t> all(points.size());
  std::iota(all.begin(), all.end(), 0);
  const auto base = fit(x, y, all);
  if (!base) fail(ErrorKind::InsufficientPoints, "rate_fit needs at least two distinct n");

  RateFit out;
  out.slope = base->first;
  out.intercept = base->second;
  CounterRng rng(derive_key(seed, {0x626f6f74ULL}));
  std::vector<double> slopes;
  slopes.reserve(1000);
  std::vector<std::size_t> idx(points.size());
  for (int b = 0; b < 1000; ++b) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng() % points.size());
    if (const auto r = fit(x, y, idx)) slopes.push_back(r->first);
  }
  if (slopes.empty()) {
    out.ci_low = out.ci_high = out.slope;
    return out;
  }
  std::sort(slopes.begin(), slopes.end());
  out.ci_low = quantile_sorted(slopes, 0.05);
  out.ci_high = quantile_sorted(slopes, 0.95);
  return out;
}

CoverageResult coverage_experiment(const SampleMatrix& samples, const MatrixXd& sigma_infty,
                                   double nominal, std::int64_t calibration_draws,
                                   std::uint64_t seed, int jobs) {
  if (!(nominal > 0.0 && nominal <= 1.0)) fail(ErrorKind::InvalidParameter, "nominal level must lie in (0,1]");
  if (sigma_infty.rows() != samples.dim()) fail(ErrorKind::DimensionMismatch, "covariance does not match the samples");
  CoverageResult out;
  out.nominal = nominal;
  if (nominal == 1.0) {
    psd_sqrt(sigma_infty);
    out.threshold = std::numeric_limits<double>::infinity();
  } else {
    const SampleMatrix cal = sample_gaussian(sigma_infty, calibration_draws, seed, jobs);
    std::vector<double> maxima(static_cast<std::size_t>(cal.replicas()));
    for (Eigen::Index r = 0; r < cal.replicas(); ++r) {
      maxima[static_cast<std::size_t>(r)] = cal.rows.row(r).cwiseAbs().maxCoeff();
    }
    std::sort(maxima.begin(), maxima.end());
    const auto k = static_cast<std::size_t>(std::ceil(nominal * static_cast<double>(maxima.size())));
    out.threshold = maxima[std::clamp<std::size_t>(k, 1, maxima.size()) - 1];
  }
  std::int64_t covered = 0;
  for (Eigen::Index r = 0; r < samples.replicas(); ++r) {
    if (samples.rows.row(r).cwiseAbs().maxCoeff() <= out.threshold) ++covered;
  }
  const auto R = static_cast<double>(samples.replicas());
  out.rate = static_cast<double>(covered) / R;
  out.standard_error = std::sqrt(nominal * (1.0 - nominal) / R);
  return out;
}

std::string to_string(MdsGenerator generator) {
  switch (generator) {
    case MdsGenerator::rademacher_iid: return "rademacher_iid";
    case MdsGenerator::scaled_deterministic_qv: return "scaled_deterministic_qv";
    case MdsGenerator::markov_functional: return "markov_functional";
  }
  return "unknown";
}

void validate_bench_spec(const MdsBenchSpec& spec) {
  if (spec.d < 1 || spec.n < 1) fail(ErrorKind::InvalidSpec, "bench needs d >= 1 and n >= 1");
  if (spec.replicas < 2) fail(ErrorKind::InvalidSpec, "bench needs at least 2 replicas");
  if (spec.shift_sigma && (spec.shift_sigma->rows() != spec.d || spec.shift_sigma->cols() != spec.d)) {
    fail(ErrorKind::InvalidSpec, "shift_sigma must be d x d");
  }
  switch (spec.generator) {
    case MdsGenerator::rademacher_iid:
      break;
    case MdsGenerator::scaled_deterministic_qv: {
      const auto k = static_cast<std::int64_t>(spec.mixing.size());
      if (k != 1 && k != spec.n) fail(ErrorKind::InvalidSpec, "scaled_deterministic_qv needs 1 or n mixing matrices");
      const Eigen::Index cols = spec.mixing.front().cols();
      for (const MatrixXd& a : spec.mixing) {
        if (a.rows() != spec.d || a.cols() != cols || cols < 1) {
          fail(ErrorKind::InvalidSpec, "mixing matrices must be d x m with a common m");
        }
      }
      break;
    }
    case MdsGenerator::markov_functional: {
      if (!spec.chain) fail(ErrorKind::InvalidSpec, "markov_functional needs a chain");
      const MarkovFunctional& c = *spec.chain;
      const Eigen::Index m = c.kernel.rows();
      if (c.kernel.cols() != m || c.stationary.size() != m || c.phi.rows() != m || c.next_phi.rows() != m ||
          c.phi.cols() != spec.d || c.next_phi.cols() != spec.d) {
        fail(ErrorKind::InvalidSpec, "markov_functional chain tables have inconsistent shapes");
      }
      break;
    }
  }
}

MdsSample mds_generate(const MdsBenchSpec& spec, int jobs) {
  validate_bench_spec(spec);
  const int d = spec.d;
  const std::int64_t n = spec.n;
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  const bool per_step = spec.generator == MdsGenerator::scaled_deterministic_qv && spec.mixing.size() > 1;

  // Cumulative tables for the Markov generator.
  std::vector<double> start_cdf;
  std::vector<double> kernel_cdf;
  if (spec.chain) {
    const MarkovFunctional& c = *spec.chain;
    const Eigen::Index m = c.kernel.rows();
    double acc = 0.0;
    for (Eigen::Index z = 0; z < m; ++z) start_cdf.push_back(acc += c.stationary(z));
    for (Eigen::Index z = 0; z < m; ++z) {
      acc = 0.0;
      for (Eigen::Index w = 0; w < m; ++w) kernel_cdf.push_back(acc += c.kernel(z, w));
    }
  }

  struct Chunk {
    MatrixXd sums;
    std::vector<double> cubed;  // per-k sums, or a single total
  };
  const std::int64_t chunks = (spec.replicas + kChunk - 1) / kChunk;
  const auto parts = parallel_map(chunks, jobs, [&](std::int64_t c) {
    const std::int64_t first = c * kChunk;
    const std::int64_t last = std::min(spec.replicas, first + kChunk);
    Chunk out;
    out.sums = MatrixXd::Zero(last - first, d);
    out.cubed.assign(per_step ? static_cast<std::size_t>(n) : 1, 0.0);
    for (std::int64_t r = first; r < last; ++r) {
      CounterRng rng(derive_key(spec.seed, {static_cast<std::uint64_t>(r)}));
      auto row = out.sums.row(r - first);
      switch (spec.generator) {
        case MdsGenerator::rademacher_iid:
          for (int j = 0; j < d; ++j) row(j) = rademacher_sum(rng, n) * scale;
          out.cubed[0] += static_cast<double>(n) * scale * scale * scale;
          break;
        case MdsGenerator::scaled_deterministic_qv: {
          const Eigen::Index m = spec.mixing.front().cols();
          VectorXd eta(m);
          VectorXd acc = VectorXd::Zero(d);
          for (std::int64_t k = 0; k < n; ++k) {
            for (Eigen::Index i = 0; i < m; ++i) eta(i) = (rng() >> 63) != 0 ? 1.0 : -1.0;
            const MatrixXd& a = spec.mixing[per_step ? static_cast<std::size_t>(k) : 0];
            const VectorXd x = a * eta;
            acc += x;
            const double norm = x.cwiseAbs().maxCoeff();
            out.cubed[per_step ? static_cast<std::size_t>(k) : 0] += norm * norm * norm;
          }
          row = acc.transpose();
          break;
        }
        case MdsGenerator::markov_functional: {
          const MarkovFunctional& ch = *spec.chain;
          const auto m = static_cast<std::size_t>(ch.kernel.rows());
          int z = sample_from_cumulative(start_cdf, rng.uniform());
          VectorXd acc = VectorXd::Zero(d);
          for (std::int64_t k = 0; k < n; ++k) {
            const int next = sample_from_cumulative(
                std::span<const double>(kernel_cdf).subspan(static_cast<std::size_t>(z) * m, m), rng.uniform());
            const VectorXd x = scale * (ch.phi.row(next) - ch.next_phi.row(z)).transpose();
            acc += x;
            const double norm = x.cwiseAbs().maxCoeff();
            out.cubed[0] += norm * norm * norm;
            z = next;
          }
          row = acc.transpose();
          break;
        }
      }
    }
    return out;
  });

  MdsSample sample;
  MatrixXd rows(spec.replicas, d);
  std::vector<double> cubed(per_step ? static_cast<std::size_t>(n) : 1, 0.0);
  for (std::int64_t c = 0; c < chunks; ++c) {
    const Chunk& part = parts[static_cast<std::size_t>(c)];
    rows.middleRows(c * kChunk, part.sums.rows()) = part.sums;
    for (std::size_t k = 0; k < cubed.size(); ++k) cubed[k] += part.cubed[k];
  }
  sample.s_n = make_sample_matrix(std::move(rows), to_string(spec.generator));
  const auto R = static_cast<double>(spec.replicas);
  for (double& v : cubed) v /= per_step ? R : R * static_cast<double>(n);
  sample.max_abs_cubed = std::move(cubed);

  switch (spec.generator) {
    case MdsGenerator::rademacher_iid:
      sample.sigma_n = MatrixXd::Identity(d, d);
      sample.v_k = {MatrixXd::Identity(d, d) / static_cast<double>(n)};
      break;
    case MdsGenerator::scaled_deterministic_qv:
      sample.sigma_n = MatrixXd::Zero(d, d);
      for (const MatrixXd& a : spec.mixing) sample.v_k.push_back(a * a.transpose());
      if (per_step) {
        for (const MatrixXd& v : sample.v_k) sample.sigma_n += v;
      } else {
        sample.sigma_n = static_cast<double>(n) * sample.v_k.front();
      }
      break;
    case MdsGenerator::markov_functional: {
      // stationary covariance of Phi(z_1) - (P Phi)(z_0)
      const MarkovFunctional& ch = *spec.chain;
      MatrixXd cov = MatrixXd::Zero(d, d);
      for (Eigen::Index z = 0; z < ch.kernel.rows(); ++z) {
        if (ch.stationary(z) == 0.0) continue;
        MatrixXd second = MatrixXd::Zero(d, d);
        for (Eigen::Index w = 0; w < ch.kernel.cols(); ++w) {
          if (ch.kernel(z, w) == 0.0) continue;
          second += ch.kernel(z, w) * ch.phi.row(w).transpose() * ch.phi.row(w);
        }
        cov += ch.stationary(z) * (second - ch.next_phi.row(z).transpose() * ch.next_phi.row(z));
      }
      sample.sigma_n = 0.5 * (cov + cov.transpose());
      sample.v_k = {sample.sigma_n / static_cast<double>(n)};
      break;
    }
  }
  return sample;
}

double bracket_moment_sum(const MdsSample& sample, std::int64_t n, const MatrixXd& shift) {
  if (sample.v_k.empty() || sample.max_abs_cubed.empty()) fail(ErrorKind::InvalidSpec, "bench sample lacks V_k");
  const bool v_const = sample.v_k.size() == 1;
  const bool m_const = sample.max_abs_cubed.size() == 1;
  if ((!v_const && static_cast<std::int64_t>(sample.v_k.size()) != n) ||
      (!m_const && static_cast<std::int64_t>(sample.max_abs_cubed.size()) != n)) {
    fail(ErrorKind::InvalidSpec, "V_k and moment lists must have length 1 or n");
  }
  MatrixXd tail = MatrixXd::Zero(shift.rows(), shift.cols());
  double total = 0.0;
  // P_k accumulates from k = n down to 1
  for (std::int64_t k = n; k >= 1; --k) {
    tail += sample.v_k[v_const ? 0 : static_cast<std::size_t>(k - 1)];
    const double lambda = min_sym_eigenvalue(tail + shift);
    if (!(lambda > 0.0)) {
      fail(ErrorKind::DegenerateSigma, "lambda_min(P_k + Sigma) is not positive at k = " + std::to_string(k));
    }
    total += sample.max_abs_cubed[m_const ? 0 : static_cast<std::size_t>(k - 1)] / lambda;
  }
  return total;
}

double theorem1_bracket(const MatrixXd& sigma_n, const MatrixXd& shift, double moment_sum) {
  if (sigma_n.rows() != sigma_n.cols() || shift.rows() != sigma_n.rows() || shift.cols() != sigma_n.cols()) {
    fail(ErrorKind::DimensionMismatch, "bracket matrices must be d x d");
  }
  const double sigma_min = sigma_n.diagonal().minCoeff();
  if (!(sigma_min > 0.0)) fail(ErrorKind::DegenerateSigma, "smallest diagonal entry of Sigma_n is not positive");
  const double log_d = std::max(1.0, std::log(static_cast<double>(sigma_n.rows())));
  const double sigma_bar = std::sqrt(std::max(shift.diagonal().maxCoeff(), 0.0));
  return std::pow(log_d, 1.25) / std::sqrt(sigma_min) * std::sqrt(sigma_bar + moment_sum);
}

}  // namespace qclt
