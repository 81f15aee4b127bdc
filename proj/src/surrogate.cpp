#include "stackpost/surrogate.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <ceres/ceres.h>

#include "stackpost/errors.hpp"

namespace stackpost {

namespace {

constexpr double kJitterStart = 1e-10;
constexpr double kJitterCeiling = 1e-6;
constexpr double kLogParamLimit = 30.0;

Matrix se_kernel(const Matrix& a, const Matrix& b, const Vector& ell, double sf2) {
  Matrix k(a.rows(), b.rows());
  const Vector inv = ell.array().inverse().matrix();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double d2 = ((a.row(i) - b.row(j)).transpose().cwiseProduct(inv)).squaredNorm();
      k(i, j) = sf2 * std::exp(-0.5 * d2);
    }
  }
  return k;
}

Vector quadratic_mean(const Matrix& x, const GpHyperparameters& h) {
  Vector m(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector d = (x.row(i).transpose() - h.mean_location).cwiseQuotient(h.mean_widths);
    m[i] = h.mean_peak - 0.5 * d.squaredNorm();
  }
  return m;
}

// Cholesky of gram, then gram + jitter * sf2 * I up the jitter ladder.
bool factor_with_jitter(const Matrix& gram, double sf2, Matrix* chol, double* jitter_used) {
  for (double j = 0.0; j <= kJitterCeiling * 1.0000001; j = (j == 0.0 ? kJitterStart : 10.0 * j)) {
    Matrix g = gram;
    g.diagonal().array() += j * sf2;
    Eigen::LLT<Matrix> llt(g);
    if (llt.info() == Eigen::Success) {
      Matrix l = llt.matrixL();
      if ((l.diagonal().array() > 0.0).all() && l.allFinite()) {
        *chol = std::move(l);
        *jitter_used = j * sf2;
        return true;
      }
    }
  }
  return false;
}

bool packed_in_range(const Vector& packed, int d) {
  if (!packed.allFinite()) return false;
  for (int i = 0; i < d + 1; ++i) {
    if (std::abs(packed[i]) > kLogParamLimit) return false;
  }
  for (int i = 2 * d + 2; i < 3 * d + 2; ++i) {
    if (std::abs(packed[i]) > kLogParamLimit) return false;
  }
  return true;
}

class NegativeLogPosterior final : public ceres::FirstOrderFunction {
 public:
  NegativeLogPosterior(const Matrix& x, const Vector& y, const Vector& s, const std::optional<HyperPrior>& prior)
      : x_(x), y_(y), s_(s), prior_(prior) {}

  bool Evaluate(const double* params, double* cost, double* gradient) const override {
    const int n = NumParameters();
    const Vector packed = Eigen::Map<const Vector>(params, n);
    double lml = 0.0;
    Vector grad;
    if (!gp_log_marginal_likelihood(x_, y_, s_, packed, &lml, gradient ? &grad : nullptr)) return false;
    if (prior_) {
      Vector pg;
      lml += prior_->log_density(packed, gradient ? &pg : nullptr);
      if (gradient) grad += pg;
    }
    if (!std::isfinite(lml)) return false;
    *cost = -lml;
    if (gradient) {
      if (!grad.allFinite()) return false;
      Eigen::Map<Vector>(gradient, n) = -grad;
    }
    return true;
  }

  int NumParameters() const override { return 3 * static_cast<int>(x_.cols()) + 2; }

 private:
  const Matrix& x_;
  const Vector& y_;
  const Vector& s_;
  const std::optional<HyperPrior>& prior_;
};

}  // namespace

Vector GpHyperparameters::pack() const {
  const int d = dimension();
  Vector p(3 * d + 2);
  p.head(d) = lengthscales.array().log().matrix();
  p[d] = std::log(output_scale);
  p[d + 1] = mean_peak;
  p.segment(d + 2, d) = mean_location;
  p.tail(d) = mean_widths.array().log().matrix();
  return p;
}

GpHyperparameters GpHyperparameters::unpack(const Vector& packed, int d) {
  if (packed.size() != 3 * d + 2) throw ArgumentError("GpHyperparameters::unpack: wrong length");
  GpHyperparameters h;
  h.lengthscales = packed.head(d).array().exp().matrix();
  h.output_scale = std::exp(packed[d]);
  h.mean_peak = packed[d + 1];
  h.mean_location = packed.segment(d + 2, d);
  h.mean_widths = packed.tail(d).array().exp().matrix();
  return h;
}

double HyperPrior::log_density(const Vector& packed, Vector* grad) const {
  double acc = 0.0;
  if (grad) *grad = Vector::Zero(packed.size());
  for (Eigen::Index i = 0; i < packed.size(); ++i) {
    if (i >= sd.size() || sd[i] <= 0.0) continue;
    const double z = (packed[i] - mean[i]) / sd[i];
    acc -= 0.5 * z * z;
    if (grad) (*grad)[i] = -z / sd[i];
  }
  return acc;
}

GpModel::GpModel(Matrix inputs, Vector values, Vector noise_variance, GpHyperparameters hypers)
    : inputs_(std::move(inputs)), values_(std::move(values)), noise_(std::move(noise_variance)),
      hypers_(std::move(hypers)) {
  const int d = hypers_.dimension();
  if (d < 1 || hypers_.mean_location.size() != d || hypers_.mean_widths.size() != d) {
    throw ArgumentError("GpModel: hyperparameter dimensions disagree");
  }
  if ((hypers_.lengthscales.array() <= 0).any() || (hypers_.mean_widths.array() <= 0).any() ||
      !(hypers_.output_scale > 0)) {
    throw ArgumentError("GpModel: lengthscales, widths and output scale must be positive");
  }
  if (inputs_.rows() > 0 && inputs_.cols() != d) throw ArgumentError("GpModel: input dimension mismatch");
  if (values_.size() != inputs_.rows() || noise_.size() != inputs_.rows()) {
    throw ArgumentError("GpModel: inputs, values and noise differ in length");
  }
  if (!values_.allFinite()) throw ArgumentError("GpModel: non-finite training values");
  const double sf2 = hypers_.output_scale * hypers_.output_scale;
  const Eigen::Index n = inputs_.rows();
  if (n == 0) {
    alpha_ = Vector(0);
    chol_ = Matrix(0, 0);
    lml_ = 0.0;
    return;
  }
  Matrix gram = se_kernel(inputs_, inputs_, hypers_.lengthscales, sf2);
  gram.diagonal() += noise_;
  if (!factor_with_jitter(gram, sf2, &chol_, &jitter_)) {
    std::ostringstream msg;
    msg << "GpModel: Gram matrix (n=" << n << ") is not positive definite after jitter " << kJitterCeiling
        << "; the training inputs are too ill-conditioned for lengthscales " << hypers_.lengthscales.transpose();
    throw FitError(msg.str());
  }
  const Vector r = values_ - quadratic_mean(inputs_, hypers_);
  const auto l = chol_.triangularView<Eigen::Lower>();
  const Vector v = l.solve(r);
  alpha_ = chol_.transpose().triangularView<Eigen::Upper>().solve(v);
  lml_ = -0.5 * v.squaredNorm() - chol_.diagonal().array().log().sum() -
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

double GpModel::kernel(const Vector& a, const Vector& b) const {
  const double sf2 = hypers_.output_scale * hypers_.output_scale;
  return sf2 * std::exp(-0.5 * (a - b).cwiseQuotient(hypers_.lengthscales).squaredNorm());
}

double GpModel::prior_mean(const Vector& x) const {
  return hypers_.mean_peak - 0.5 * (x - hypers_.mean_location).cwiseQuotient(hypers_.mean_widths).squaredNorm();
}

GpPrediction GpModel::posterior(const Vector& x) const {
  if (x.size() != dimension()) throw ArgumentError("posterior: dimension mismatch");
  const double sf2 = hypers_.output_scale * hypers_.output_scale;
  if (size() == 0) return {prior_mean(x), sf2};
  const Matrix ks = se_kernel(inputs_, x.transpose(), hypers_.lengthscales, sf2);
  const double mean = prior_mean(x) + ks.col(0).dot(alpha_);
  const Vector v = chol_.triangularView<Eigen::Lower>().solve(ks.col(0));
  return {mean, std::max(0.0, sf2 - v.squaredNorm())};
}

Matrix GpModel::posterior_covariance(const Matrix& points) const {
  const double sf2 = hypers_.output_scale * hypers_.output_scale;
  Matrix kss = se_kernel(points, points, hypers_.lengthscales, sf2);
  if (size() == 0) return kss;
  const Matrix ks = se_kernel(inputs_, points, hypers_.lengthscales, sf2);
  const Matrix v = chol_.triangularView<Eigen::Lower>().solve(ks);
  return symmetrize(kss - v.transpose() * v);
}

bool gp_log_marginal_likelihood(const Matrix& x, const Vector& y, const Vector& s, const Vector& packed,
                                double* lml, Vector* grad) {
  const int d = static_cast<int>(x.cols());
  if (!packed_in_range(packed, d)) return false;
  const GpHyperparameters h = GpHyperparameters::unpack(packed, d);
  const Eigen::Index n = x.rows();
  const double sf2 = h.output_scale * h.output_scale;
  const Matrix k = se_kernel(x, x, h.lengthscales, sf2);
  Matrix gram = k;
  gram.diagonal() += s;
  Matrix chol;
  double jitter = 0.0;
  if (!factor_with_jitter(gram, sf2, &chol, &jitter)) return false;
  const Vector r = y - quadratic_mean(x, h);
  const auto l = chol.triangularView<Eigen::Lower>();
  const Vector v = l.solve(r);
  const Vector alpha = chol.transpose().triangularView<Eigen::Upper>().solve(v);
  *lml = -0.5 * v.squaredNorm() - chol.diagonal().array().log().sum() -
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  if (!grad) return true;

  grad->setZero(packed.size());
  Matrix inv = Matrix::Identity(n, n);
  l.solveInPlace(inv);
  chol.transpose().triangularView<Eigen::Upper>().solveInPlace(inv);
  const Matrix q = alpha * alpha.transpose() - inv;
  const Matrix qk = q.cwiseProduct(k);
  for (int dd = 0; dd < d; ++dd) {
    const double inv_l2 = 1.0 / (h.lengthscales[dd] * h.lengthscales[dd]);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double diff = x(i, dd) - x(j, dd);
        acc += qk(i, j) * diff * diff;
      }
    }
    (*grad)[dd] = 0.5 * acc * inv_l2;
  }
  (*grad)[d] = qk.sum();
  (*grad)[d + 1] = alpha.sum();
  for (int dd = 0; dd < d; ++dd) {
    const double w2 = h.mean_widths[dd] * h.mean_widths[dd];
    double g_loc = 0.0;
    double g_width = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double diff = x(i, dd) - h.mean_location[dd];
      g_loc += alpha[i] * diff / w2;
      g_width += alpha[i] * diff * diff / w2;
    }
    (*grad)[d + 2 + dd] = g_loc;
    (*grad)[2 * d + 2 + dd] = g_width;
  }
  return true;
}

GpModel gp_fit(const Matrix& inputs, const Vector& values, const Vector& noise_variance,
               const GpHyperparameters& init, const GpFitOptions& options) {
  const int d = init.dimension();
  if (inputs.cols() != d) throw ArgumentError("gp_fit: input dimension mismatch");
  if (inputs.rows() < d + 2) throw ArgumentError("gp_fit: need at least D + 2 training points");
  if (!values.allFinite()) throw ArgumentError("gp_fit: non-finite training values");

  NegativeLogPosterior objective(inputs, values, noise_variance, options.prior);
  auto cost_at = [&](const Vector& p) {
    double c = 0.0;
    return objective.Evaluate(p.data(), &c, nullptr) ? c : std::numeric_limits<double>::infinity();
  };

  const Vector start = init.pack();
  Vector best = start;
  double best_cost = cost_at(start);

  Rng rng(options.seed, 0x67706669ULL);
  double y_sd = 1.0;
  if (values.size() > 1) {
    y_sd = std::sqrt((values.array() - values.mean()).square().sum() / static_cast<double>(values.size() - 1));
    if (!(y_sd > 0)) y_sd = 1.0;
  }
  const Vector x_sd = ((inputs.rowwise() - inputs.colwise().mean()).array().square().colwise().mean()).sqrt();

  for (int restart = 0; restart < std::max(1, options.restarts); ++restart) {
    Vector p = start;
    if (restart > 0) {
      for (int i = 0; i <= d; ++i) p[i] += rng.normal();
      p[d + 1] += y_sd * rng.normal();
      for (int i = 0; i < d; ++i) p[d + 2 + i] += x_sd[i] * rng.normal();
      for (int i = 0; i < d; ++i) p[2 * d + 2 + i] += rng.normal();
    }
    if (!std::isfinite(cost_at(p))) continue;
    ceres::GradientProblem problem(new NegativeLogPosterior(inputs, values, noise_variance, options.prior));
    ceres::GradientProblemSolver::Options opts;
    opts.logging_type = ceres::SILENT;
    opts.minimizer_progress_to_stdout = false;
    opts.max_num_iterations = options.max_iterations;
    opts.line_search_direction_type = ceres::LBFGS;
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(opts, problem, p.data(), &summary);
    const double c = cost_at(p);
    if (c < best_cost) {
      best_cost = c;
      best = p;
    }
  }
  if (!std::isfinite(best_cost)) {
    throw FitError("gp_fit: Gram matrix is not positive definite at any hyperparameter restart");
  }
  return GpModel(inputs, values, noise_variance, GpHyperparameters::unpack(best, d));
}

namespace {

// Integral of the kernel column k(., x_i) against N(mu, cov) for every training row.
Vector kernel_mean_embedding(const GpModel& gp, const Vector& mu, const Matrix& cov) {
  const auto& h = gp.hypers();
  const double sf2 = h.output_scale * h.output_scale;
  const Matrix lambda = h.lengthscales.array().square().matrix().asDiagonal();
  const Eigen::LLT<Matrix> llt(lambda + cov);
  const Matrix lc = llt.matrixL();
  const double log_ratio = h.lengthscales.array().log().sum() - lc.diagonal().array().log().sum();
  const double scale = sf2 * std::exp(log_ratio);
  Vector z(gp.size());
  for (int i = 0; i < gp.size(); ++i) {
    const Vector r = lc.triangularView<Eigen::Lower>().solve(gp.inputs().row(i).transpose() - mu);
    z[i] = scale * std::exp(-0.5 * r.squaredNorm());
  }
  return z;
}

double mean_function_expectation(const GpHyperparameters& h, const Vector& mu, const Vector& cov_diag) {
  double acc = h.mean_peak;
  for (int dd = 0; dd < h.dimension(); ++dd) {
    const double diff = mu[dd] - h.mean_location[dd];
    acc -= 0.5 * (diff * diff + cov_diag[dd]) / (h.mean_widths[dd] * h.mean_widths[dd]);
  }
  return acc;
}

}  // namespace

BqEstimate bq_expected_log_joint(const GpModel& gp, const GaussianMixture& q) {
  if (q.dimension() != gp.dimension()) throw ArgumentError("bq_expected_log_joint: dimension mismatch");
  const int k_count = q.size();
  const auto& h = gp.hypers();
  const double sf2 = h.output_scale * h.output_scale;
  const int n = gp.size();
  Matrix z(n, k_count);
  BqEstimate out;
  out.I_hat.resize(k_count);
  for (int k = 0; k < k_count; ++k) {
    const auto& c = q.component(k);
    z.col(k) = kernel_mean_embedding(gp, c.mean(), c.covariance());
    out.I_hat[k] = mean_function_expectation(h, c.mean(), c.covariance().diagonal()) +
                   (n > 0 ? z.col(k).dot(gp.alpha()) : 0.0);
  }
  const Matrix lambda = h.lengthscales.array().square().matrix().asDiagonal();
  const double log_det_lambda = 2.0 * h.lengthscales.array().log().sum();
  Matrix prior(k_count, k_count);
  for (int a = 0; a < k_count; ++a) {
    for (int b = a; b < k_count; ++b) {
      const Matrix c = lambda + q.component(a).covariance() + q.component(b).covariance();
      const Eigen::LLT<Matrix> llt(c);
      const Matrix lc = llt.matrixL();
      const Vector r =
          lc.triangularView<Eigen::Lower>().solve(q.component(a).mean() - q.component(b).mean());
      const double log_det_c = 2.0 * lc.diagonal().array().log().sum();
      prior(a, b) = sf2 * std::exp(0.5 * (log_det_lambda - log_det_c) - 0.5 * r.squaredNorm());
      prior(b, a) = prior(a, b);
    }
  }
  if (n > 0) {
    const Matrix v = gp.gram_cholesky().triangularView<Eigen::Lower>().solve(z);
    out.J = symmetrize(prior - v.transpose() * v);
  } else {
    out.J = prior;
  }
  return out;
}

double bq_diagonal_mean(const GpModel& gp, const Vector& mu, const Vector& sd, Vector* grad_mu,
                        Vector* grad_log_sd) {
  const auto& h = gp.hypers();
  const int d = gp.dimension();
  const double sf2 = h.output_scale * h.output_scale;
  const Vector var = sd.array().square().matrix();
  const Vector v = (h.lengthscales.array().square() + var.array()).matrix();
  double log_ratio = 0.0;
  for (int dd = 0; dd < d; ++dd) log_ratio += std::log(h.lengthscales[dd]) - 0.5 * std::log(v[dd]);
  const double scale = sf2 * std::exp(log_ratio);

  double value = mean_function_expectation(h, mu, var);
  if (grad_mu) *grad_mu = Vector::Zero(d);
  if (grad_log_sd) *grad_log_sd = Vector::Zero(d);
  for (int dd = 0; dd < d; ++dd) {
    const double w2 = h.mean_widths[dd] * h.mean_widths[dd];
    if (grad_mu) (*grad_mu)[dd] = -(mu[dd] - h.mean_location[dd]) / w2;
    if (grad_log_sd) (*grad_log_sd)[dd] = -var[dd] / w2;
  }
  const Matrix& x = gp.inputs();
  const Vector& alpha = gp.alpha();
  for (int i = 0; i < gp.size(); ++i) {
    double e = 0.0;
    for (int dd = 0; dd < d; ++dd) {
      const double diff = x(i, dd) - mu[dd];
      e += diff * diff / v[dd];
    }
    const double zi = scale * std::exp(-0.5 * e);
    const double c = alpha[i] * zi;
    value += c;
    for (int dd = 0; dd < d; ++dd) {
      const double diff = x(i, dd) - mu[dd];
      if (grad_mu) (*grad_mu)[dd] += c * diff / v[dd];
      if (grad_log_sd) (*grad_log_sd)[dd] += c * 2.0 * var[dd] * (-0.5 / v[dd] + 0.5 * diff * diff / (v[dd] * v[dd]));
    }
  }
  return value;
}

}  // namespace stackpost
