#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "stackpost/errors.hpp"
#include "stackpost/localfit.hpp"

using namespace stackpost;
namespace fs = std::filesystem;

namespace {

RunOutput small_run(int k, TransformKind kind = TransformKind::affine) {
  Rng rng(static_cast<std::uint64_t>(k) + 100);
  std::vector<GaussianComponent> comps;
  Vector w(k);
  for (int i = 0; i < k; ++i) {
    const double r = rng.uniform(-0.4, 0.4);
    comps.emplace_back(Vector{{rng.normal(), rng.normal()}}, Matrix{{1.0 + rng.uniform(), r}, {r, 0.5 + rng.uniform()}});
    w[i] = rng.uniform() + 0.1;
  }
  w /= w.sum();
  ParamTransform t = ParamTransform::identity(2);
  if (kind == TransformKind::affine) t = ParamTransform::affine(Matrix{{1.5, 0.2}, {-0.3, 0.7}}, Vector{{0.1, 2.0}});
  if (kind == TransformKind::bounded_affine) {
    t = ParamTransform::bounded_affine(Vector{{-5.0, 0.0}}, Vector{{5.0, 3.0}}, Matrix{{1.5, 0.2}, {-0.3, 0.7}},
                                       Vector{{0.1, 2.0}});
  }
  Vector l(k), ih(k);
  for (int i = 0; i < k; ++i) {
    l[i] = -3.0 - rng.uniform();
    ih[i] = l[i] + 0.25;
  }
  Matrix j = Matrix::Identity(k, k) * 0.01;
  RunOutput run{GaussianMixture(comps, w), t, l, ih, j, -2.0, true, {12, 150}};
  run.validate();
  return run;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "stackpost_test_localfit";
  fs::create_directories(dir);
  return dir / name;
}

TargetProblem gaussian_target(double log_z) {
  const GaussianComponent g(Vector{{1.0, -1.0}}, Matrix{{1.0, 0.3}, {0.3, 0.5}});
  GroundTruth truth;
  truth.log_marginal_likelihood = log_z;
  truth.mean = g.mean();
  truth.covariance = g.covariance();
  return TargetProblem(
      "gaussian", 2, [g, log_z](const Vector& x) { return g.log_pdf(x) + log_z; }, Vector{{-4.0, -6.0}},
      Vector{{6.0, 4.0}}, truth);
}

int nearest_centroid(const Vector& x) {
  const auto c = gmm_centroids();
  int best = 0;
  for (int i = 1; i < 4; ++i)
    if ((x - c[i]).norm() < (x - c[best]).norm()) best = i;
  return best;
}

// Clusters holding at least 10% of a run's mass, in the common space.
std::set<int> covered_clusters(const RunOutput& r) {
  Vector mass = Vector::Zero(4);
  for (int k = 0; k < r.size(); ++k) {
    const Vector m = r.transform.invert(r.posterior.component(k).mean());
    mass[nearest_centroid(m)] += r.posterior.weights()[k];
  }
  std::set<int> out;
  for (int i = 0; i < 4; ++i)
    if (mass[i] >= 0.1) out.insert(i);
  return out;
}

const std::vector<RunOutput>& gmm_fits() {
  static const std::vector<RunOutput> fits = [] {
    const TargetProblem t = build_gmm_target(1);
    std::vector<RunOutput> out;
    for (std::uint64_t s = 0; s < 20; ++s) {
      FitConfig cfg;
      cfg.K_target = 10;
      cfg.budget = 200 * 4;
      cfg.seed = s;
      out.push_back(run_local_fit(t, cfg));
    }
    return out;
  }();
  return fits;
}

}  // namespace

TEST_CASE("export then import round-trips") {
  for (auto kind : {TransformKind::identity, TransformKind::affine, TransformKind::bounded_affine}) {
    const RunOutput a = small_run(4, kind);
    const fs::path p = temp_file("round.json");
    export_run(a, p);
    const RunOutput b = import_run(p);
    CHECK(b.transform.kind() == kind);
    CHECK((b.posterior.weights() - a.posterior.weights()).cwiseAbs().maxCoeff() < 1e-12);
    for (int k = 0; k < 4; ++k) {
      CHECK((b.posterior.component(k).mean() - a.posterior.component(k).mean()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((b.posterior.component(k).covariance() - a.posterior.component(k).covariance()).cwiseAbs().maxCoeff() <
            1e-12);
    }
    CHECK((b.transform.linear() - a.transform.linear()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((b.I_hat - a.I_hat).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((*b.L_hat - *a.L_hat).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((b.J - a.J).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(b.elbo == a.elbo);
    CHECK(b.converged == a.converged);
  }
}

TEST_CASE("weights summing to 0.9 are rejected") {
  auto j = run_to_json(small_run(2));
  j["weights"] = {0.45, 0.45};
  CHECK_THROWS_AS(run_from_json(j), ValidationError);
}

TEST_CASE("fifty components with a 50x50 J are accepted") {
  const RunOutput r = small_run(50);
  const RunOutput b = run_from_json(run_to_json(r));
  CHECK(b.size() == 50);
  CHECK(b.J.rows() == 50);
  CHECK(b.J.cols() == 50);
}

TEST_CASE("schema violations name the field") {
  auto j = run_to_json(small_run(2));
  j.erase("J");
  try {
    run_from_json(j);
    FAIL("no error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("J") != std::string::npos);
  }
  auto k = run_to_json(small_run(2));
  k["transform"]["kind"] = "spline";
  CHECK_THROWS_AS(run_from_json(k), ParseError);
  auto n = run_to_json(small_run(2));
  n["covariances"][0] = {{1.0, 2.0}, {2.0, 1.0}};
  CHECK_THROWS_AS(run_from_json(n), ValidationError);
  auto m = run_to_json(small_run(2));
  m.erase("I_hat");
  m.erase("L_hat");
  CHECK_THROWS_AS(run_from_json(m), ParseError);
}

TEST_CASE("files with only L_hat get corrected I_hat") {
  const RunOutput r = small_run(3);
  auto j = run_to_json(r);
  j.erase("I_hat");
  const RunOutput b = run_from_json(j);
  const double shift = std::log(std::abs(r.transform.linear().determinant()));
  for (int k = 0; k < 3; ++k) CHECK(b.I_hat[k] == doctest::Approx((*r.L_hat)[k] + shift).epsilon(1e-12));
}

TEST_CASE("filter keeps converged low-variance runs in order") {
  RunOutput a = small_run(2), b = small_run(3), c = small_run(4);
  b.J(1, 1) = 5.1;
  CHECK_FALSE(passes_filter(b));
  c.converged = false;
  CHECK_FALSE(passes_filter(c));
  RunOutput d = small_run(5);
  const auto kept = filter_runs({a, b, c, d});
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].size() == 2);
  CHECK(kept[1].size() == 5);
  CHECK(filter_runs({}).empty());
}

TEST_CASE("default budgets") {
  CHECK(default_budget(2, 0.0) == 200);
  CHECK(default_budget(2, 3.0) == 300);
}

TEST_CASE("Gaussian target: ELBO within 0.1 of the log evidence") {
  const double log_z = -2.3;
  const TargetProblem t = gaussian_target(log_z);
  FitConfig cfg;
  cfg.K_target = 10;
  cfg.seed = 3;
  const RunOutput r = run_local_fit(t, cfg);
  CHECK(std::abs(r.elbo - log_z) < 0.1);
  CHECK(r.diagnostics.evaluations <= 200);
}

TEST_CASE("fixed seed gives a bit-identical run") {
  const TargetProblem t = build_gmm_target(1);
  FitConfig cfg;
  cfg.K_target = 6;
  cfg.seed = 9;
  cfg.budget = 120;
  const auto a = run_to_json(run_local_fit(t, cfg));
  const auto b = run_to_json(run_local_fit(t, cfg));
  CHECK(a.dump() == b.dump());
}

TEST_CASE("evaluation count never exceeds the budget") {
  const TargetProblem noisy = with_noise(build_gmm_target(1), 3.0);
  const TargetProblem ring = build_ring_target();
  for (int budget : {20, 57, 150}) {
    for (const TargetProblem* t : {&noisy, &ring}) {
      FitConfig cfg;
      cfg.K_target = 8;
      cfg.budget = budget;
      cfg.seed = static_cast<std::uint64_t>(budget);
      const RunOutput r = run_local_fit(*t, cfg);
      CHECK(r.diagnostics.evaluations <= budget);
      if (budget == 20) CHECK_FALSE(r.converged);
    }
  }
  FitConfig bad;
  bad.budget = 19;
  CHECK_THROWS_AS(run_local_fit(noisy, bad), ArgumentError);
}

TEST_CASE("emitted runs satisfy the ELBO identity at 1e4 entropy draws") {
  const RunOutput& r = gmm_fits()[0];
  r.validate();
  Rng rng(21);
  const double h = run_entropy(r.posterior, r.transform, 10000 / r.size(), rng);
  CHECK(std::abs(r.expected_log_joint() + h - r.elbo) < 0.05);
}

TEST_CASE("GMM fits land near a true cluster") {
  const auto c = gmm_centroids();
  int near = 0;
  for (const RunOutput& r : gmm_fits()) {
    Eigen::Index top = 0;
    r.posterior.weights().maxCoeff(&top);
    const Vector m = r.transform.invert(r.posterior.component(static_cast<int>(top)).mean());
    double best = 1e300;
    for (const auto& ci : c) best = std::min(best, (m - ci).norm());
    near += best < 1.5;
  }
  MESSAGE("runs with top component within 1.5 of a centroid: " << near << "/20");
  CHECK(near > 10);
}

TEST_CASE("fits with different seeds explore different clusters") {
  const auto& fits = gmm_fits();
  int pairs = 0, differ = 0;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    for (std::size_t j = i + 1; j < fits.size() && pairs < 50; ++j) {
      ++pairs;
      differ += covered_clusters(fits[i]) != covered_clusters(fits[j]);
    }
  }
  MESSAGE("pairs covering different clusters: " << differ << "/" << pairs);
  CHECK(differ >= 0.3 * pairs);
}
