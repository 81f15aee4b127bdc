#include "stackpost/targets.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "stackpost/errors.hpp"

namespace stackpost {

namespace {

constexpr int kGridPoints = 2000;
constexpr double kGridHalfWidthSd = 6.0;

double ring_log_density(const RingGeometry& g, double x, double y) {
  const double r = std::hypot(x - g.cx, y - g.cy);
  const double u = (r - g.radius) / g.width;
  return -0.5 * u * u;
}

// Marginal of one coordinate of the ring: c + r cos(phi) with phi uniform
// and r from the radial density. Bin-averaged densities come from
// differencing the exact CDF at the bin edges.
MarginalGrid ring_marginal(const RingGeometry& g, double center, double half_width) {
  const int n_r = 4000;
  const auto r = linspace(g.radius - 5 * g.width, g.radius + 5 * g.width, n_r);
  std::vector<double> w(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double u = (r[i] - g.radius) / g.width;
    w[i] = r[i] * std::exp(-0.5 * u * u);
  }
  // Trapezoid weights for the radial integral.
  const double dr = r[1] - r[0];
  double total = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    w[i] *= (i == 0 || i + 1 == r.size()) ? 0.5 * dr : dr;
    total += w[i];
  }
  for (double& wi : w) wi /= total;

  auto cdf = [&](double offset) {
    double acc = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double s = std::clamp(offset / r[i], -1.0, 1.0);
      acc += w[i] * (0.5 + std::asin(s) / std::numbers::pi);
    }
    return acc;
  };

  MarginalGrid m;
  m.x = linspace(center - half_width, center + half_width, kGridPoints);
  const double h = m.x[1] - m.x[0];
  m.density.resize(m.x.size());
  double prev = cdf(m.x[0] - center - 0.5 * h);
  for (std::size_t i = 0; i < m.x.size(); ++i) {
    const double next = cdf(m.x[i] - center + 0.5 * h);
    m.density[i] = std::max(0.0, (next - prev) / h);
    prev = next;
  }
  return m;
}

}  // namespace

double Evaluator::operator()(const Vector& theta) {
  ++count_;
  const double value = (*fn_)(theta);
  return sigma_ > 0.0 ? value + sigma_ * rng_.normal() : value;
}

TargetProblem::TargetProblem(std::string name, int dimension, LogJoint log_joint, Vector lower, Vector upper,
                             GroundTruth truth, std::uint64_t seed)
    : name_(std::move(name)), dimension_(dimension),
      fn_(std::make_shared<const LogJoint>(std::move(log_joint))), lower_(std::move(lower)),
      upper_(std::move(upper)), truth_(std::move(truth)), seed_(seed) {
  if (dimension_ < 1) throw ArgumentError("TargetProblem: dimension must be positive");
  if (lower_.size() != dimension_ || upper_.size() != dimension_) {
    throw ArgumentError("TargetProblem: bounds must have length D");
  }
}

Evaluator TargetProblem::evaluator(std::uint64_t stream) const {
  return Evaluator(fn_, noise_sigma_, Rng(derive_seed(seed_, 0x6e6f697365ULL), stream));
}

std::vector<Vector> gmm_centroids() {
  return {Vector{{-8.0, -8.0}}, Vector{{-7.0, 7.0}}, Vector{{6.0, -6.0}}, Vector{{5.0, 5.0}}};
}

std::vector<MarginalGrid> mixture_marginal_grids(const GaussianMixture& q, int n) {
  const Moments mom = q.moments();
  std::vector<MarginalGrid> grids;
  for (int d = 0; d < q.dimension(); ++d) {
    const GaussianMixture marg = q.marginal_1d(d);
    const double sd = std::sqrt(mom.covariance(d, d));
    MarginalGrid g;
    g.x = linspace(mom.mean[d] - kGridHalfWidthSd * sd, mom.mean[d] + kGridHalfWidthSd * sd, n);
    g.density.reserve(g.x.size());
    for (double x : g.x) g.density.push_back(std::exp(marg.log_pdf(Vector::Constant(1, x))));
    grids.push_back(std::move(g));
  }
  return grids;
}

TargetProblem build_gmm_target(std::uint64_t seed) {
  Rng rng(seed, 0x676d6dULL);
  std::vector<GaussianComponent> comps;
  for (const Vector& c : gmm_centroids()) {
    for (int j = 0; j < 5; ++j) {
      Vector mu(2);
      mu[0] = c[0] + rng.normal();
      mu[1] = c[1] + rng.normal();
      const double rho = rng.uniform() < 0.5 ? -0.5 : 0.5;
      Matrix cov{{1.0, rho}, {rho, 1.0}};
      comps.emplace_back(std::move(mu), std::move(cov));
    }
  }
  GaussianMixture q(std::move(comps), Vector::Constant(20, 1.0 / 20.0));
  GroundTruth truth;
  truth.log_marginal_likelihood = 0.0;
  const Moments mom = q.moments();
  truth.mean = mom.mean;
  truth.covariance = mom.covariance;
  truth.marginals = mixture_marginal_grids(q, kGridPoints);
  TargetProblem t(
      "gmm", 2, [q](const Vector& x) { return q.log_pdf(x); }, Vector::Constant(2, -12.0),
      Vector::Constant(2, 12.0), std::move(truth), seed);
  t.set_exact_mixture(std::move(q));
  return t;
}

double polar_log_integral(const std::function<double(double, double)>& log_f, double cx, double cy, double r_min,
                          double r_max, int n_r, int n_theta) {
  const auto r = linspace(r_min, r_max, n_r);
  const auto th = linspace(0.0, 2.0 * std::numbers::pi, n_theta);
  std::vector<double> cos_t(th.size()), sin_t(th.size());
  for (std::size_t j = 0; j < th.size(); ++j) {
    cos_t[j] = std::cos(th[j]);
    sin_t[j] = std::sin(th[j]);
  }
  // log_f must peak at O(1) values; no rescaling is applied.
  std::vector<double> radial(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    std::vector<double> row(th.size());
    for (std::size_t j = 0; j < th.size(); ++j) {
      row[j] = std::exp(log_f(cx + r[i] * cos_t[j], cy + r[i] * sin_t[j]));
    }
    radial[i] = r[i] * trapezoid(th, row);
  }
  return std::log(trapezoid(r, radial));
}

double ring_log_evidence(const RingGeometry& ring, int n_r, int n_theta) {
  return polar_log_integral([&](double x, double y) { return ring_log_density(ring, x, y); }, ring.cx, ring.cy,
                            ring.radius - 5 * ring.width, ring.radius + 5 * ring.width, n_r, n_theta);
}

TargetProblem build_ring_target() {
  const RingGeometry g;
  GroundTruth truth;
  truth.log_marginal_likelihood = ring_log_evidence(g);
  truth.mean = Vector{{g.cx, g.cy}};
  // E[r^2] under the radial density r exp(-(r-R)^2 / 2 sigma^2).
  const auto r = linspace(g.radius - 5 * g.width, g.radius + 5 * g.width, 4000);
  std::vector<double> w(r.size()), w2(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double u = (r[i] - g.radius) / g.width;
    w[i] = r[i] * std::exp(-0.5 * u * u);
    w2[i] = w[i] * r[i] * r[i];
  }
  const double er2 = trapezoid(r, w2) / trapezoid(r, w);
  truth.covariance = Matrix::Identity(2, 2) * (0.5 * er2);
  const double half = kGridHalfWidthSd * std::sqrt(0.5 * er2);
  truth.marginals.push_back(ring_marginal(g, g.cx, half));
  truth.marginals.push_back(ring_marginal(g, g.cy, half));
  const double reach = g.radius + 5 * g.width;
  return TargetProblem(
      "ring", 2, [g](const Vector& x) { return ring_log_density(g, x[0], x[1]); },
      Vector{{g.cx - reach, g.cy - reach}}, Vector{{g.cx + reach, g.cy + reach}}, std::move(truth), 0);
}

TargetProblem with_noise(const TargetProblem& t, double sigma) {
  if (!(sigma >= 0.0)) throw ArgumentError("with_noise: sigma must be nonnegative");
  TargetProblem out = t;
  out.noise_sigma_ = sigma;
  return out;
}

TargetProblem build_target(const std::string& name, std::uint64_t seed, double noise_sigma) {
  if (name == "gmm") return with_noise(build_gmm_target(seed), noise_sigma);
  if (name == "ring") return with_noise(build_ring_target(), noise_sigma);
  throw ArgumentError("unknown benchmark '" + name + "' (expected gmm or ring)");
}

}  // namespace stackpost
