#include "stackpost/mixture.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "stackpost/errors.hpp"

namespace stackpost {

GaussianComponent::GaussianComponent(Vector mean, Matrix covariance)
    : mean_(std::move(mean)), covariance_(std::move(covariance)) {
  const auto d = mean_.size();
  if (d == 0) throw ArgumentError("GaussianComponent: empty mean");
  if (covariance_.rows() != d || covariance_.cols() != d) {
    throw ArgumentError("GaussianComponent: covariance shape does not match mean");
  }
  if (!mean_.allFinite() || !covariance_.allFinite()) {
    throw ValidationError("GaussianComponent: non-finite mean or covariance");
  }
  const double scale = covariance_.cwiseAbs().maxCoeff();
  if ((covariance_ - covariance_.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(scale, 1.0)) {
    throw ValidationError("GaussianComponent: covariance is not symmetric");
  }
  covariance_ = symmetrize(covariance_);
  Eigen::LLT<Matrix> llt(covariance_);
  if (llt.info() != Eigen::Success) {
    throw ValidationError("GaussianComponent: covariance is not positive definite");
  }
  chol_ = llt.matrixL();
  if ((chol_.diagonal().array() <= 0.0).any()) {
    throw ValidationError("GaussianComponent: covariance is not positive definite");
  }
  log_norm_ = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
              chol_.diagonal().array().log().sum();
}

double GaussianComponent::log_pdf(const Vector& x) const {
  if (x.size() != mean_.size()) throw ArgumentError("log_pdf: dimension mismatch");
  const Vector r = chol_.triangularView<Eigen::Lower>().solve(x - mean_);
  return log_norm_ - 0.5 * r.squaredNorm();
}

Vector GaussianComponent::sample(Rng& rng) const {
  Vector eps(mean_.size());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  return transform_noise(eps);
}

double GaussianComponent::entropy() const {
  return 0.5 * static_cast<double>(dimension()) * (1.0 + std::log(2.0 * std::numbers::pi)) +
         chol_.diagonal().array().log().sum();
}

GaussianMixture::GaussianMixture(std::vector<GaussianComponent> components, Vector weights)
    : components_(std::move(components)), weights_(std::move(weights)) {
  if (components_.empty()) throw ArgumentError("GaussianMixture: no components");
  if (weights_.size() != static_cast<Eigen::Index>(components_.size())) {
    throw ArgumentError("GaussianMixture: weight count does not match component count");
  }
  const int d = components_.front().dimension();
  for (const auto& c : components_) {
    if (c.dimension() != d) throw ArgumentError("GaussianMixture: components differ in dimension");
  }
  if (!weights_.allFinite() || (weights_.array() < 0.0).any()) {
    throw ValidationError("GaussianMixture: weights must be finite and nonnegative");
  }
  const double total = weights_.sum();
  if (std::abs(total - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "GaussianMixture: weights sum to " << total << ", expected 1";
    throw ValidationError(msg.str());
  }
  log_weights_.resize(weights_.size());
  for (Eigen::Index k = 0; k < weights_.size(); ++k) {
    log_weights_[k] = weights_[k] <= kZeroWeight ? -std::numeric_limits<double>::infinity()
                                                 : std::log(weights_[k]);
  }
}

GaussianMixture::GaussianMixture(GaussianComponent single)
    : GaussianMixture(std::vector<GaussianComponent>{std::move(single)}, Vector::Ones(1)) {}

double GaussianMixture::log_pdf(const Vector& x) const {
  if (x.size() != dimension()) throw ArgumentError("log_pdf: dimension mismatch");
  Vector terms(size());
  for (int k = 0; k < size(); ++k) {
    terms[k] = std::isinf(log_weights_[k]) ? log_weights_[k]
                                           : log_weights_[k] + components_[static_cast<std::size_t>(k)].log_pdf(x);
  }
  return log_sum_exp(terms);
}

Matrix GaussianMixture::sample(int n, Rng& rng) const {
  if (n < 1) throw ArgumentError("sample: n must be at least 1");
  Vector cumulative(size());
  double acc = 0.0;
  for (int k = 0; k < size(); ++k) {
    acc += weights_[k];
    cumulative[k] = acc;
  }
  Matrix out(n, dimension());
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    int k = 0;
    while (k + 1 < size() && (cumulative[k] < u || weights_[k] <= kZeroWeight)) ++k;
    out.row(i) = components_[static_cast<std::size_t>(k)].sample(rng).transpose();
  }
  return out;
}

GaussianMixture GaussianMixture::marginal_1d(int dim) const {
  if (dim < 0 || dim >= dimension()) throw ArgumentError("marginal_1d: dimension out of range");
  std::vector<GaussianComponent> parts;
  parts.reserve(components_.size());
  for (const auto& c : components_) {
    parts.emplace_back(Vector::Constant(1, c.mean()[dim]), Matrix::Constant(1, 1, c.covariance()(dim, dim)));
  }
  GaussianMixture out = *this;
  out.components_ = std::move(parts);
  return out;
}

Moments GaussianMixture::moments() const {
  const int d = dimension();
  Vector mean = Vector::Zero(d);
  Matrix second = Matrix::Zero(d, d);
  for (int k = 0; k < size(); ++k) {
    const auto& c = components_[static_cast<std::size_t>(k)];
    mean += weights_[k] * c.mean();
    second += weights_[k] * (c.covariance() + c.mean() * c.mean().transpose());
  }
  return {mean, symmetrize(second - mean * mean.transpose())};
}

}  // namespace stackpost
