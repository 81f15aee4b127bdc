#pragma once

#include <vector>

#include "stackpost/numerics.hpp"
#include "stackpost/rng.hpp"

namespace stackpost {

/// Multivariate normal with a cached lower Cholesky factor.
///
/// Construction rejects covariances that are not symmetric positive
/// definite instead of patching them.
class GaussianComponent {
 public:
  GaussianComponent(Vector mean, Matrix covariance);

  int dimension() const { return static_cast<int>(mean_.size()); }
  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return covariance_; }
  const Matrix& cholesky() const { return chol_; }
  /// log of the normalizing constant, -D/2 log(2 pi) - log|L|.
  double log_normalizer() const { return log_norm_; }

  double log_pdf(const Vector& x) const;
  Vector sample(Rng& rng) const;
  /// Draw from the standard-normal noise eps: mean + L eps.
  Vector transform_noise(const Vector& eps) const { return mean_ + chol_ * eps; }
  double entropy() const;

 private:
  Vector mean_;
  Matrix covariance_;
  Matrix chol_;
  double log_norm_ = 0.0;
};

struct Moments {
  Vector mean;
  Matrix covariance;
};

/// Finite mixture of full-covariance Gaussians. Immutable after construction.
class GaussianMixture {
 public:
  /// Weights must be nonnegative and sum to one within 1e-12.
  GaussianMixture(std::vector<GaussianComponent> components, Vector weights);
  explicit GaussianMixture(GaussianComponent single);

  int dimension() const { return components_.front().dimension(); }
  int size() const { return static_cast<int>(components_.size()); }
  const std::vector<GaussianComponent>& components() const { return components_; }
  const GaussianComponent& component(int k) const { return components_[static_cast<std::size_t>(k)]; }
  const Vector& weights() const { return weights_; }

  double log_pdf(const Vector& x) const;
  /// One draw per row.
  Matrix sample(int n, Rng& rng) const;
  GaussianMixture marginal_1d(int dim) const;
  Moments moments() const;

 private:
  std::vector<GaussianComponent> components_;
  Vector weights_;
  Vector log_weights_;
};

/// Weights at or below this are exact zeros in log-sum-exp.
inline constexpr double kZeroWeight = 1e-300;

}  // namespace stackpost
