#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "stackpost/localfit.hpp"
#include "stackpost/stacking.hpp"

namespace fixture {

using namespace stackpost;

/// E_{q_k}[log p] for each component of q under the target, by plain MC.
inline Vector mc_expected_log_joint(const GaussianMixture& q, const TargetProblem& t, int draws, Rng& rng) {
  Vector out(q.size());
  for (int k = 0; k < q.size(); ++k) {
    double acc = 0.0;
    for (int s = 0; s < draws; ++s) acc += t.log_joint(q.component(k).sample(rng));
    out[k] = acc / draws;
  }
  return out;
}

/// A run built from a subset of the exact GMM components, identity transform,
/// with accurate I_hat and a consistent ELBO.
inline RunOutput exact_gmm_run(const TargetProblem& t, const std::vector<int>& subset, std::uint64_t seed) {
  const GaussianMixture& full = *t.exact_mixture();
  std::vector<GaussianComponent> comps;
  Vector w(static_cast<Eigen::Index>(subset.size()));
  for (std::size_t i = 0; i < subset.size(); ++i) {
    comps.push_back(full.component(subset[i]));
    w[static_cast<Eigen::Index>(i)] = full.weights()[subset[i]];
  }
  w /= w.sum();
  GaussianMixture q(comps, w);
  Rng rng(seed, 1);
  Vector ih = mc_expected_log_joint(q, t, 4000, rng);
  const double h = run_entropy(q, ParamTransform::identity(2), 2000, rng);
  const double elbo = w.dot(ih) + h;
  const int k = q.size();
  RunOutput run{std::move(q), ParamTransform::identity(2), ih, ih, Matrix::Zero(k, k), elbo, true, {1, 0}};
  run.validate();
  return run;
}

/// Indices of exact GMM components whose mean is nearest the given centroids.
inline std::vector<int> components_near(const TargetProblem& t, const std::vector<int>& clusters) {
  const auto c = gmm_centroids();
  std::vector<int> out;
  for (int k = 0; k < t.exact_mixture()->size(); ++k) {
    const Vector& m = t.exact_mixture()->component(k).mean();
    int best = 0;
    for (int i = 1; i < 4; ++i)
      if ((m - c[i]).norm() < (m - c[best]).norm()) best = i;
    for (int cl : clusters)
      if (cl == best) out.push_back(k);
  }
  return out;
}

/// Single-Gaussian run equal to a standard bivariate normal target with
/// log evidence 0, whose I_hat carries N(0, j_var) noise.
inline RunOutput noisy_gaussian_run(double noise, double j_var) {
  const double true_i = -std::log(2.0 * std::numbers::pi * std::numbers::e);
  const double h = std::log(2.0 * std::numbers::pi * std::numbers::e);
  GaussianMixture q(GaussianComponent(Vector::Zero(2), Matrix::Identity(2, 2)));
  const Vector ih = Vector::Constant(1, true_i + noise);
  RunOutput run{std::move(q), ParamTransform::identity(2), ih, ih, Matrix::Constant(1, 1, j_var), ih[0] + h, true,
                {1, 0}};
  return run;
}

struct CurseTrial {
  std::vector<RunOutput> runs;
  StackResult result;
};

/// One winner's-curse trial: M identical unit-Gaussian runs with noisy I_hat.
inline CurseTrial winners_curse_trial(int M, double j_var, std::uint64_t seed) {
  Rng rng(seed, 0x776300);
  std::vector<RunOutput> runs;
  for (int m = 0; m < M; ++m) runs.push_back(noisy_gaussian_run(std::sqrt(j_var) * rng.normal(), j_var));
  StackConfig cfg;
  cfg.seed = seed;
  StackResult r = optimize(runs, cfg);
  return {std::move(runs), std::move(r)};
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// E[max of M standard normals] by quadrature on a fine grid.
inline double expected_max_normal(int M) {
  double acc = 0.0;
  const double h = 1e-3;
  for (double x = -10.0; x < 10.0; x += h) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi);
    const double cdf = 0.5 * std::erfc(-x / std::sqrt(2.0));
    acc += x * M * phi * std::pow(cdf, M - 1) * h;
  }
  return acc;
}

}  // namespace fixture
