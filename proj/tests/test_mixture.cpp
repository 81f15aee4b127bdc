#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "stackpost/errors.hpp"
#include "stackpost/mixture.hpp"
#include "stackpost/targets.hpp"

using namespace stackpost;

namespace {

GaussianMixture two_bumps() {
  std::vector<GaussianComponent> c;
  c.emplace_back(Vector{{-1.0}}, Matrix{{1.0}});
  c.emplace_back(Vector{{1.0}}, Matrix{{1.0}});
  return GaussianMixture(std::move(c), Vector{{0.5, 0.5}});
}

// Direct density sum in long double.
long double direct_density(const GaussianMixture& q, const Vector& x) {
  long double acc = 0.0L;
  for (int k = 0; k < q.size(); ++k) {
    const auto& c = q.component(k);
    const Matrix inv = c.covariance().inverse();
    const Vector r = x - c.mean();
    const long double quad = static_cast<long double>(r.dot(inv * r));
    const long double det = static_cast<long double>(c.covariance().determinant());
    acc += static_cast<long double>(q.weights()[k]) * std::exp(-0.5L * quad) /
           std::sqrt(std::pow(2.0L * std::numbers::pi_v<long double>, static_cast<long double>(x.size())) * det);
  }
  return acc;
}

}  // namespace

TEST_CASE("standard normal log density at the mode") {
  const GaussianMixture q(GaussianComponent(Vector::Zero(2), Matrix::Identity(2, 2)));
  CHECK(q.log_pdf(Vector::Zero(2)) == doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-14));
}

TEST_CASE("identical components give the single-component density") {
  const GaussianComponent c(Vector{{0.3, -1.0}}, Matrix{{2.0, 0.4}, {0.4, 1.0}});
  const GaussianMixture single(c);
  const GaussianMixture twin({c, c}, Vector{{0.3, 0.7}});
  const Vector x{{1.0, 0.5}};
  CHECK(twin.log_pdf(x) == doctest::Approx(single.log_pdf(x)).epsilon(1e-14));
}

TEST_CASE("gmm target density matches extended-precision summation") {
  const TargetProblem t = build_gmm_target(1);
  const GaussianMixture& q = *t.exact_mixture();
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const Vector x{{rng.uniform(-12, 12), rng.uniform(-12, 12)}};
    const long double ref = direct_density(q, x);
    if (ref < 1e-300L) continue;
    CHECK(std::abs(std::exp(q.log_pdf(x)) / static_cast<double>(ref) - 1.0) < 1e-12);
  }
}

TEST_CASE("log_pdf rejects a dimension mismatch") {
  const GaussianMixture q(GaussianComponent(Vector::Zero(2), Matrix::Identity(2, 2)));
  CHECK_THROWS_AS(q.log_pdf(Vector::Zero(3)), ArgumentError);
}

TEST_CASE("zero-weight components contribute nothing") {
  std::vector<GaussianComponent> c;
  c.emplace_back(Vector{{0.0}}, Matrix{{1.0}});
  c.emplace_back(Vector{{50.0}}, Matrix{{1.0}});
  const GaussianMixture q(c, Vector{{1.0, 0.0}});
  CHECK(std::isfinite(q.log_pdf(Vector{{0.0}})));
  CHECK(q.log_pdf(Vector{{0.0}}) == doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi)));
  Rng rng(2);
  const Matrix s = q.sample(10000, rng);
  CHECK(s.maxCoeff() < 10.0);
}

TEST_CASE("sample mean lies within four standard errors") {
  const Matrix cov{{4.0, 1.0}, {1.0, 2.0}};
  const GaussianMixture q(GaussianComponent(Vector{{1.0, -2.0}}, cov));
  Rng rng(3);
  const int n = 100000;
  const Matrix s = q.sample(n, rng);
  const Vector m = s.colwise().mean();
  for (int d = 0; d < 2; ++d) CHECK(std::abs(m[d] - q.component(0).mean()[d]) < 4.0 * std::sqrt(cov(d, d) / n));
}

TEST_CASE("sampling is deterministic under a fixed stream") {
  const GaussianMixture q = two_bumps();
  Rng a(8), b(8);
  CHECK(q.sample(50, a) == q.sample(50, b));
}

TEST_CASE("marginal_1d projects mean and variance") {
  const GaussianMixture q(GaussianComponent(Vector{{1.0, 2.0}}, Matrix{{4.0, 0.0}, {0.0, 9.0}}));
  const GaussianMixture m = q.marginal_1d(1);
  CHECK(m.component(0).mean()[0] == 2.0);
  CHECK(m.component(0).covariance()(0, 0) == 9.0);
  CHECK(m.weights() == q.weights());
  CHECK_THROWS_AS(q.marginal_1d(2), ArgumentError);
  CHECK_THROWS_AS(q.marginal_1d(-1), ArgumentError);
}

TEST_CASE("marginal density integrates to one on a grid") {
  const TargetProblem t = build_gmm_target(4);
  const GaussianMixture m = t.exact_mixture()->marginal_1d(0);
  const auto x = linspace(-25.0, 25.0, 20001);
  std::vector<double> y;
  for (double v : x) y.push_back(std::exp(m.log_pdf(Vector{{v}})));
  CHECK(std::abs(trapezoid(x, y) - 1.0) < 1e-6);
}

TEST_CASE("moments of two symmetric bumps") {
  const Moments m = two_bumps().moments();
  CHECK(m.mean[0] == doctest::Approx(0.0));
  CHECK(m.covariance(0, 0) == doctest::Approx(2.0));
  const GaussianComponent c(Vector{{1.0, 2.0}}, Matrix{{2.0, 0.5}, {0.5, 1.0}});
  const Moments s = GaussianMixture(c).moments();
  CHECK((s.mean - c.mean()).norm() < 1e-15);
  CHECK((s.covariance - c.covariance()).norm() < 1e-14);
}

TEST_CASE("gmm moments match a million samples within three standard errors") {
  const TargetProblem t = build_gmm_target(1);
  const GaussianMixture& q = *t.exact_mixture();
  const Moments m = q.moments();
  Rng rng(21);
  const int n = 1000000;
  const Matrix s = q.sample(n, rng);
  const Vector mean = s.colwise().mean();
  const Matrix c = s.rowwise() - mean.transpose();
  const Matrix cov = c.transpose() * c / (n - 1.0);
  for (int d = 0; d < 2; ++d) {
    CHECK(std::abs(mean[d] - m.mean[d]) < 3.0 * std::sqrt(m.covariance(d, d) / n));
    // Variance standard error from the fourth central moment.
    const double m4 = c.col(d).array().pow(4).mean();
    CHECK(std::abs(cov(d, d) - m.covariance(d, d)) < 3.0 * std::sqrt((m4 - cov(d, d) * cov(d, d)) / n));
  }
  CHECK((t.ground_truth().mean - m.mean).norm() < 1e-12);
}

TEST_CASE("log_pdf is invariant to component order") {
  const TargetProblem t = build_gmm_target(2);
  const GaussianMixture& q = *t.exact_mixture();
  std::vector<GaussianComponent> rev(q.components().rbegin(), q.components().rend());
  const GaussianMixture r(rev, q.weights().reverse());
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Vector x{{rng.uniform(-12, 12), rng.uniform(-12, 12)}};
    CHECK(std::abs(q.log_pdf(x) - r.log_pdf(x)) < 1e-12 * std::max(1.0, std::abs(q.log_pdf(x))));
  }
}

TEST_CASE("density integrates to one over an eight-sd grid") {
  const GaussianMixture q(GaussianComponent(Vector{{0.5, -1.0}}, Matrix{{2.0, 0.6}, {0.6, 1.0}}));
  const int n = 401;
  const double sx = std::sqrt(2.0), sy = 1.0;
  const auto xs = linspace(0.5 - 8 * sx, 0.5 + 8 * sx, n);
  const auto ys = linspace(-1.0 - 8 * sy, -1.0 + 8 * sy, n);
  std::vector<double> inner(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(n);
    for (int j = 0; j < n; ++j) row[j] = std::exp(q.log_pdf(Vector{{xs[i], ys[j]}}));
    inner[i] = trapezoid(ys, row);
  }
  CHECK(std::abs(trapezoid(xs, inner) - 1.0) < 1e-4);
}

TEST_CASE("marginal moments equal the diagonal of the joint moments") {
  const TargetProblem t = build_gmm_target(3);
  const GaussianMixture& q = *t.exact_mixture();
  const Moments m = q.moments();
  for (int d = 0; d < 2; ++d) {
    const Moments md = q.marginal_1d(d).moments();
    CHECK(md.mean[0] == doctest::Approx(m.mean[d]).epsilon(1e-13));
    CHECK(md.covariance(0, 0) == doctest::Approx(m.covariance(d, d)).epsilon(1e-13));
  }
}

TEST_CASE("construction rejects non-SPD covariances and bad weights") {
  CHECK_THROWS_AS(GaussianComponent(Vector::Zero(2), Matrix{{1.0, 2.0}, {2.0, 1.0}}), ValidationError);
  CHECK_THROWS_AS(GaussianComponent(Vector::Zero(2), Matrix{{1.0, 0.1}, {0.0, 1.0}}), ValidationError);
  const GaussianComponent c(Vector::Zero(1), Matrix{{1.0}});
  CHECK_THROWS(GaussianMixture({c, c}, Vector{{0.5, 0.4}}));
  CHECK_THROWS(GaussianMixture({c, c}, Vector{{1.5, -0.5}}));
}
