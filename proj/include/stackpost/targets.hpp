#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stackpost/mixture.hpp"

namespace stackpost {

/// True 1-D marginal tabulated on an evenly spaced grid.
struct MarginalGrid {
  std::vector<double> x;
  std::vector<double> density;
};

struct GroundTruth {
  double log_marginal_likelihood = 0.0;
  std::optional<Matrix> reference_samples;  // one draw per row
  std::vector<MarginalGrid> marginals;      // one per dimension
  Vector mean;
  Matrix covariance;
};

class TargetProblem;

/// Evaluates a target's log-joint on one noise stream. Each worker owns
/// its evaluator, so results depend only on (seed, stream, call order).
class Evaluator {
 public:
  double operator()(const Vector& theta);
  long count() const { return count_; }

 private:
  friend class TargetProblem;
  Evaluator(std::shared_ptr<const std::function<double(const Vector&)>> fn, double sigma, Rng rng)
      : fn_(std::move(fn)), sigma_(sigma), rng_(rng) {}

  std::shared_ptr<const std::function<double(const Vector&)>> fn_;
  double sigma_;
  Rng rng_;
  long count_ = 0;
};

/// Black-box log-joint with plausible bounds and ground-truth assets.
class TargetProblem {
 public:
  using LogJoint = std::function<double(const Vector&)>;

  TargetProblem(std::string name, int dimension, LogJoint log_joint, Vector lower, Vector upper,
                GroundTruth truth, std::uint64_t seed = 0);

  const std::string& name() const { return name_; }
  int dimension() const { return dimension_; }
  double noise_sigma() const { return noise_sigma_; }
  const Vector& lower_bounds() const { return lower_; }
  const Vector& upper_bounds() const { return upper_; }
  const GroundTruth& ground_truth() const { return truth_; }
  std::uint64_t seed() const { return seed_; }

  /// Noise-free log-joint; safe to call concurrently.
  double log_joint(const Vector& theta) const { return (*fn_)(theta); }
  /// Noisy evaluator on the given stream index.
  Evaluator evaluator(std::uint64_t stream) const;

  /// Exact mixture density when the target is itself a Gaussian mixture.
  const std::optional<GaussianMixture>& exact_mixture() const { return exact_; }
  void set_exact_mixture(GaussianMixture q) { exact_ = std::move(q); }

 private:
  friend TargetProblem with_noise(const TargetProblem& t, double sigma);

  std::string name_;
  int dimension_;
  std::shared_ptr<const LogJoint> fn_;
  Vector lower_;
  Vector upper_;
  GroundTruth truth_;
  std::uint64_t seed_;
  double noise_sigma_ = 0.0;
  std::optional<GaussianMixture> exact_;
};

struct RingGeometry {
  double radius = 8.0;
  double width = 0.1;
  double cx = 1.0;
  double cy = -2.0;
};

/// Centroids of the four GMM clusters.
std::vector<Vector> gmm_centroids();

/// 20-component bivariate mixture in four clusters; means drawn from `seed`.
TargetProblem build_gmm_target(std::uint64_t seed);
/// Narrow ring of radius 8 and width 0.1 around (1, -2).
TargetProblem build_ring_target();
/// Adds independent N(0, sigma^2) noise to every evaluation.
TargetProblem with_noise(const TargetProblem& t, double sigma);
/// Target by CLI name ("gmm" or "ring").
TargetProblem build_target(const std::string& name, std::uint64_t seed, double noise_sigma);

/// Trapezoid integral of exp(log_f) on a polar grid around (cx, cy); returns the log.
double polar_log_integral(const std::function<double(double, double)>& log_f, double cx, double cy, double r_min,
                          double r_max, int n_r, int n_theta);

/// Log evidence of the ring via the polar-grid quadrature.
double ring_log_evidence(const RingGeometry& ring, int n_r = 4000, int n_theta = 4000);

/// Marginal grids of a Gaussian mixture over mean +- 6 SD with n points each.
std::vector<MarginalGrid> mixture_marginal_grids(const GaussianMixture& q, int n = 2000);

}  // namespace stackpost
