#pragma once

#include <cstdint>
#include <optional>

#include "stackpost/mixture.hpp"

namespace stackpost {

/// Hyperparameters of the log-joint surrogate: an ARD exponentiated-quadratic
/// kernel and a negative-quadratic prior mean
///   m(x) = peak - 1/2 sum_d (x_d - location_d)^2 / width_d^2.
struct GpHyperparameters {
  Vector lengthscales;
  double output_scale = 1.0;
  double mean_peak = 0.0;
  Vector mean_location;
  Vector mean_widths;

  int dimension() const { return static_cast<int>(lengthscales.size()); }
  /// Packed as [log l (D), log sf, peak, location (D), log width (D)].
  Vector pack() const;
  static GpHyperparameters unpack(const Vector& packed, int dimension);
};

/// Independent Gaussian prior on packed hyperparameters; sd <= 0 disables an entry.
struct HyperPrior {
  Vector mean;
  Vector sd;
  double log_density(const Vector& packed, Vector* grad) const;
};

struct GpFitOptions {
  int restarts = 3;
  int max_iterations = 200;
  std::optional<HyperPrior> prior;
  std::uint64_t seed = 0;
};

struct GpPrediction {
  double mean;
  double variance;
};

/// Exact GP regression with per-point noise variances and a cached Gram factor.
class GpModel {
 public:
  GpModel(Matrix inputs, Vector values, Vector noise_variance, GpHyperparameters hypers);

  int dimension() const { return hypers_.dimension(); }
  int size() const { return static_cast<int>(inputs_.rows()); }
  const Matrix& inputs() const { return inputs_; }
  const Vector& values() const { return values_; }
  const Vector& noise_variance() const { return noise_; }
  const GpHyperparameters& hypers() const { return hypers_; }
  double jitter() const { return jitter_; }

  double kernel(const Vector& a, const Vector& b) const;
  double prior_mean(const Vector& x) const;
  GpPrediction posterior(const Vector& x) const;
  /// Joint posterior covariance of the latent function at the given rows.
  Matrix posterior_covariance(const Matrix& points) const;
  double log_marginal_likelihood() const { return lml_; }

  /// (K + S)^{-1} (y - m(X)).
  const Vector& alpha() const { return alpha_; }
  /// Lower Cholesky factor of K + S + jitter.
  const Matrix& gram_cholesky() const { return chol_; }

 private:
  Matrix inputs_;
  Vector values_;
  Vector noise_;
  GpHyperparameters hypers_;
  Matrix chol_;
  Vector alpha_;
  double jitter_ = 0.0;
  double lml_ = 0.0;
};

/// Log marginal likelihood and its gradient with respect to the packed
/// hyperparameters. Returns false when the Gram matrix is not SPD at any jitter.
bool gp_log_marginal_likelihood(const Matrix& inputs, const Vector& values, const Vector& noise_variance,
                                const Vector& packed, double* lml, Vector* grad);

/// Maximizes the (optionally penalized) marginal likelihood over log-hyperparameters.
GpModel gp_fit(const Matrix& inputs, const Vector& values, const Vector& noise_variance,
               const GpHyperparameters& init, const GpFitOptions& options = {});

/// Posterior over per-component expected log-joints.
struct BqEstimate {
  Vector I_hat;
  Matrix J;
};

BqEstimate bq_expected_log_joint(const GpModel& gp, const GaussianMixture& q);

/// Posterior mean of E_{N(mu, diag(sd^2))}[f] with gradients wrt mu and log sd.
double bq_diagonal_mean(const GpModel& gp, const Vector& mu, const Vector& sd, Vector* grad_mu,
                        Vector* grad_log_sd);

}  // namespace stackpost
