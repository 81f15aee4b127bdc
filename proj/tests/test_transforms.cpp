#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "stackpost/errors.hpp"
#include "stackpost/transforms.hpp"

using namespace stackpost;

namespace {

ParamTransform sample_bounded() {
  return ParamTransform::bounded_affine(Vector{{-2.0, 0.0}}, Vector{{3.0, 10.0}}, Matrix{{1.5, 0.3}, {-0.2, 0.8}},
                                        Vector{{0.1, -0.4}});
}

// log |det| of the central finite-difference Jacobian of g^{-1} at z.
double fd_log_det(const ParamTransform& t, const Vector& z) {
  const double h = 1e-5;
  Matrix jac(z.size(), z.size());
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    Vector zp = z, zm = z;
    zp[j] += h;
    zm[j] -= h;
    jac.col(j) = (t.invert(zp) - t.invert(zm)) / (2 * h);
  }
  return std::log(std::abs(jac.determinant()));
}

}  // namespace

TEST_CASE("identity and affine apply") {
  const Vector th{{1.0, 2.0}};
  CHECK(ParamTransform::identity(2).apply(th) == th);
  const auto a = ParamTransform::affine(2.0 * Matrix::Identity(2, 2), Vector::Zero(2));
  CHECK(a.apply(th) == Vector{{2.0, 4.0}});
}

TEST_CASE("apply then invert round-trips on random points") {
  Rng rng(1);
  const ParamTransform ts[] = {ParamTransform::affine(Matrix{{2.0, 1.0}, {0.5, -3.0}}, Vector{{1.0, -1.0}}),
                               sample_bounded()};
  for (const auto& t : ts) {
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Vector th{{rng.uniform(-1.9, 2.9), rng.uniform(0.1, 9.9)}};
      const Vector back = t.invert(t.apply(th));
      worst = std::max(worst, ((back - th).cwiseAbs().array() / th.cwiseAbs().array().max(1.0)).maxCoeff());
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("bounded kind rejects points on or outside the bounds") {
  const auto t = sample_bounded();
  CHECK_THROWS_AS(t.apply(Vector{{-2.0, 5.0}}), DomainError);
  CHECK_THROWS_AS(t.apply(Vector{{0.0, 11.0}}), DomainError);
}

TEST_CASE("log Jacobian of identity and affine maps") {
  CHECK(ParamTransform::identity(2).log_abs_det_jacobian_inverse(Vector{{0.3, 0.2}}) == 0.0);
  const auto a = ParamTransform::affine(Matrix{{2.0, 0.0}, {0.0, 2.0}}, Vector::Zero(2));
  CHECK(a.log_abs_det_jacobian_inverse(Vector{{5.0, -1.0}}) == doctest::Approx(-std::log(4.0)));
}

TEST_CASE("affine log Jacobian is constant in z") {
  const auto a = ParamTransform::affine(Matrix{{2.0, 1.0}, {0.5, -3.0}}, Vector{{1.0, -1.0}});
  Rng rng(2);
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < 100; ++i) {
    const double v = a.log_abs_det_jacobian_inverse(Vector{{rng.uniform(-50, 50), rng.uniform(-50, 50)}});
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi - lo < 1e-12);
}

TEST_CASE("bounded log Jacobian matches finite differences") {
  const auto t = sample_bounded();
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vector z{{rng.uniform(-3, 3), rng.uniform(-3, 3)}};
    const double exact = t.log_abs_det_jacobian_inverse(z);
    CHECK(std::abs(exact - fd_log_det(t, z)) < 1e-6 * std::max(1.0, std::abs(exact)));
  }
}

TEST_CASE("corrected density under the identity is the plain density") {
  const GaussianComponent c(Vector{{0.2, 0.1}}, Matrix{{1.0, 0.2}, {0.2, 0.5}});
  const Vector th{{0.7, -0.3}};
  CHECK(corrected_log_density(ParamTransform::identity(2), c, th) == c.log_pdf(th));
}

TEST_CASE("corrected density integrates to one over the common space") {
  const auto a = ParamTransform::affine(2.0 * Matrix::Identity(2, 2), Vector::Zero(2));
  const GaussianComponent c(Vector{{1.0, -1.0}}, Matrix{{1.0, 0.3}, {0.3, 2.0}});
  // In theta space the component is N((0.5,-0.5), cov / 4).
  const double mass = oracle::integrate_2d(
      [&](double x, double y) { return std::exp(corrected_log_density(a, c, Vector{{x, y}})); }, -4.0, 5.0, -5.0,
      4.0, 1e-9);
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("bounded run posterior density integrates to one") {
  const auto t = sample_bounded();
  std::vector<GaussianComponent> comps;
  comps.emplace_back(Vector{{0.0, 0.5}}, Matrix{{0.6, 0.1}, {0.1, 0.4}});
  comps.emplace_back(Vector{{1.0, -0.5}}, Matrix{{0.3, 0.0}, {0.0, 0.2}});
  const GaussianMixture q(comps, Vector{{0.4, 0.6}});
  auto dens = [&](double x, double y) {
    const Vector th{{x, y}};
    double acc = 0.0;
    for (int k = 0; k < 2; ++k) acc += q.weights()[k] * std::exp(corrected_log_density(t, q.component(k), th));
    return acc;
  };
  const int n = 801;
  const auto xs = linspace(-2.0 + 1e-9, 3.0 - 1e-9, n);
  const auto ys = linspace(1e-9, 10.0 - 1e-9, n);
  std::vector<double> inner(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(n);
    for (int j = 0; j < n; ++j) row[j] = dens(xs[i], ys[j]);
    inner[i] = trapezoid(ys, row);
  }
  CHECK(std::abs(trapezoid(xs, inner) - 1.0) < 1e-3);
}

TEST_CASE("two runs describing one Gaussian agree after correction") {
  const GaussianComponent common(Vector{{0.3, -0.7}}, Matrix{{1.2, -0.4}, {-0.4, 0.9}});
  const auto t1 = ParamTransform::affine(Matrix{{2.0, 0.5}, {0.0, 1.0}}, Vector{{1.0, 0.0}});
  const auto t2 = ParamTransform::affine(Matrix{{0.3, -1.0}, {1.4, 0.2}}, Vector{{-2.0, 3.0}});
  const GaussianComponent c1 = push_forward(t1, common);
  const GaussianComponent c2 = push_forward(t2, common);
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Vector th{{rng.uniform(-3, 3), rng.uniform(-3, 3)}};
    CHECK(std::abs(corrected_log_density(t1, c1, th) - corrected_log_density(t2, c2, th)) < 1e-10);
    CHECK(std::abs(corrected_log_density(t1, c1, th) - common.log_pdf(th)) < 1e-10);
  }
}

TEST_CASE("expected log-joint correction for identity and affine maps") {
  const GaussianComponent c(Vector::Zero(2), Matrix::Identity(2, 2));
  const Matrix s = Matrix::Zero(3, 2);
  CHECK(correct_expected_log_joint(ParamTransform::identity(2), c, 1.7, s) == 1.7);
  const auto a = ParamTransform::affine(2.0 * Matrix::Identity(2, 2), Vector::Zero(2));
  CHECK(correct_expected_log_joint(a, c, 1.7, s) == doctest::Approx(1.7 + std::log(4.0)));
  CHECK_THROWS_AS(correct_expected_log_joint(a, c, 1.7, Matrix(0, 2)), ArgumentError);
}

TEST_CASE("correction is linear in L_hat with unit slope") {
  const auto t = sample_bounded();
  const GaussianComponent c(Vector{{0.2, 0.1}}, Matrix{{0.5, 0.1}, {0.1, 0.3}});
  Rng rng(5);
  Matrix s(200, 2);
  for (int i = 0; i < 200; ++i) s.row(i) = c.sample(rng).transpose();
  const double base = correct_expected_log_joint(t, c, 0.0, s);
  for (double l : {-3.0, 1.0, 12.5}) CHECK(correct_expected_log_joint(t, c, l, s) - base == doctest::Approx(l));
}

TEST_CASE("bounded correction matches a quadrature oracle within three standard errors") {
  const auto t = sample_bounded();
  const GaussianComponent c(Vector{{0.4, -0.2}}, Matrix{{0.8, 0.2}, {0.2, 0.5}});
  // s = A^{-1}(z - b) is Gaussian; log J separates over its coordinates.
  const Matrix ainv = t.linear().inverse();
  const Vector ms = ainv * (c.mean() - t.offset());
  const Matrix cs = ainv * c.covariance() * ainv.transpose();
  double expected = -std::log(std::abs(t.linear().determinant()));
  for (int i = 0; i < 2; ++i) {
    const double sd = std::sqrt(cs(i, i));
    const double width = (*t.upper())[i] - (*t.lower())[i];
    expected += oracle::integrate(
        [&](double x) {
          const double sig = 1.0 / (1.0 + std::exp(-x));
          const double u = (x - ms[i]) / sd;
          return std::log(width * sig * (1.0 - sig)) * std::exp(-0.5 * u * u) / (sd * std::sqrt(2 * std::numbers::pi));
        },
        ms[i] - 12 * sd, ms[i] + 12 * sd);
  }
  Rng rng(6);
  const int n = 10000;
  Matrix s(n, 2);
  std::vector<double> lj(n);
  for (int i = 0; i < n; ++i) {
    s.row(i) = c.sample(rng).transpose();
    lj[i] = t.log_abs_det_jacobian_inverse(s.row(i).transpose());
  }
  double mean = 0.0, var = 0.0;
  for (double v : lj) mean += v / n;
  for (double v : lj) var += (v - mean) * (v - mean) / (n - 1);
  const double corrected = correct_expected_log_joint(t, c, 0.0, s);
  CHECK(std::abs(-corrected - expected) < 3.0 * std::sqrt(var / n));
}

TEST_CASE("transform validation") {
  CHECK_THROWS_AS(ParamTransform::affine(Matrix{{1.0, 2.0}, {2.0, 4.0}}, Vector::Zero(2)), ValidationError);
  CHECK_THROWS_AS(ParamTransform::bounded_affine(Vector{{1.0}}, Vector{{0.0}}, Matrix{{1.0}}, Vector{{0.0}}),
                  ValidationError);
  CHECK_THROWS_AS(transform_kind_from_string("spline"), ParseError);
  CHECK(transform_kind_from_string("bounded-affine") == TransformKind::bounded_affine);
}
