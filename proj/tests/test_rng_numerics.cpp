#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "stackpost/numerics.hpp"
#include "stackpost/rng.hpp"

using namespace stackpost;

TEST_CASE("rng replays exactly from seed and stream") {
  Rng a(42, 7), b(42, 7), c(42, 8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a();
    CHECK(x == b());
    differs = differs || x != c();
  }
  CHECK(differs);
}

TEST_CASE("split streams do not advance the parent") {
  Rng a(1);
  const Rng child = a.split(3);
  Rng fresh(1);
  CHECK(a() == fresh());
  CHECK(child.counter() == 0);
}

TEST_CASE("uniform draws lie in the open unit interval with mean one half") {
  Rng r(3);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(std::abs(sum / n - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST_CASE("normal draws have unit variance") {
  Rng r(5);
  const int n = 200000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s1 += z;
    s2 += z * z;
  }
  CHECK(std::abs(s1 / n) < 4.0 / std::sqrt(n));
  CHECK(std::abs(s2 / n - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("below covers its range uniformly") {
  Rng r(9);
  int counts[5] = {};
  for (int i = 0; i < 50000; ++i) ++counts[r.below(5)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("log_sum_exp is stable and skips -inf") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(log_sum_exp(Vector{{1000.0, 1000.0}}) == doctest::Approx(1000.0 + std::log(2.0)));
  CHECK(log_sum_exp(Vector{{-inf, 0.0}}) == doctest::Approx(0.0));
  CHECK(log_sum_exp(Vector{{-inf, -inf}}) == -inf);
}

TEST_CASE("median uses the midpoint for even counts") {
  CHECK(median({1.0, 2.0, 9.0}) == 2.0);
  CHECK(median({3.0, 1.0}) == 2.0);
  std::vector<double> v;
  for (int i = 1; i <= 20; ++i) v.push_back(i);
  CHECK(median(v) == 10.5);
}

TEST_CASE("trapezoid integrates linear functions exactly") {
  const auto x = linspace(0.0, 2.0, 11);
  std::vector<double> y;
  for (double xi : x) y.push_back(3.0 * xi + 1.0);
  CHECK(trapezoid(x, y) == doctest::Approx(8.0).epsilon(1e-14));
  CHECK(x.front() == 0.0);
  CHECK(x.back() == 2.0);
}
