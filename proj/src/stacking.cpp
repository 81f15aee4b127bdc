#include "stackpost/stacking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "stackpost/errors.hpp"

namespace stackpost {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// exp() of log-ratios below this is dropped from sums of order one.
constexpr double kNegligibleLog = -40.0;

struct EntropyEval {
  double entropy;
  Vector grad;  // over active entries
};

Vector softmax(const Vector& a) {
  const double top = a.maxCoeff();
  Vector w(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) w[i] = std::isfinite(a[i]) ? std::exp(a[i] - top) : 0.0;
  return w / w.sum();
}

// Batched corrected log-densities of pooled entries at common-space points.
class DensityKernel {
 public:
  DensityKernel(const StackedPosterior& sp, std::vector<int> active) : sp_(sp), active_(std::move(active)) {
    const int d = sp.dimension();
    for (int r = 0; r < sp.run_count(); ++r) {
      const ParamTransform& t = sp.transform(r);
      inverse_linear_.push_back(t.linear().inverse());
      runs_used_.push_back(false);
      (void)d;
    }
    for (int i : active_) {
      const GaussianComponent& c = sp.component(i);
      const int d2 = c.dimension();
      const Matrix linv = c.cholesky().triangularView<Eigen::Lower>().solve(Matrix::Identity(d2, d2));
      const int run = sp.entries()[static_cast<std::size_t>(i)].run;
      const ParamTransform& t = sp.transform(run);
      affine_.push_back(t.is_affine());
      run_.push_back(run);
      if (t.is_affine()) {
        // Whitening map of the component composed with the run transform.
        folded_.push_back(linv * t.linear());
        folded_offset_.push_back(linv * (c.mean() - t.offset()));
        folded_const_.push_back(c.log_normalizer() + t.log_abs_det_linear());
      } else {
        folded_.push_back(linv);
        folded_offset_.push_back(linv * c.mean());
        folded_const_.push_back(c.log_normalizer());
        runs_used_[static_cast<std::size_t>(run)] = true;
      }
    }
  }

  int size() const { return static_cast<int>(active_.size()); }

  // S draws per active entry, entry-major, as columns of a D x (n S) matrix.
  Matrix draw(const Matrix& eps, int S) const {
    const int d = sp_.dimension();
    Matrix theta(d, static_cast<Eigen::Index>(size()) * S);
    for (int a = 0; a < size(); ++a) {
      const int i = active_[static_cast<std::size_t>(a)];
      const GaussianComponent& c = sp_.component(i);
      const int run = sp_.entries()[static_cast<std::size_t>(i)].run;
      const ParamTransform& t = sp_.transform(run);
      const auto block = eps.middleCols(static_cast<Eigen::Index>(a) * S, S);
      Matrix z = (c.cholesky() * block).colwise() + c.mean();
      if (t.is_affine()) {
        z.colwise() -= t.offset();
        theta.middleCols(static_cast<Eigen::Index>(a) * S, S) = inverse_linear_[static_cast<std::size_t>(run)] * z;
      } else {
        for (int s = 0; s < S; ++s) theta.col(static_cast<Eigen::Index>(a) * S + s) = t.invert(z.col(s));
      }
    }
    return theta;
  }

  // Rows follow the active entries, columns the points.
  Matrix log_density(const Matrix& theta) const {
    const Eigen::Index n = theta.cols();
    const Coordinates c = coordinates(theta);
    Matrix out(size(), n);
    Matrix u(sp_.dimension(), n);
    for (int a = 0; a < size(); ++a) {
      const auto fa = static_cast<std::size_t>(a);
      const Matrix& src = source(c, theta, fa);
      u.noalias() = folded_[fa] * src;
      u.colwise() -= folded_offset_[fa];
      out.row(a) = (folded_const_[fa] - 0.5 * u.colwise().squaredNorm().array()).matrix();
      if (!affine_[fa]) out.row(a) -= c.log_jac[static_cast<std::size_t>(run_[fa])].transpose();
    }
    return out;
  }

  // Entropy estimate from S draws per active entry (entry-major columns of
  // theta) under active weights w, and optionally its gradient wrt the logits.
  EntropyEval entropy(const Matrix& theta, const Vector& w, int S, bool with_grad) const {
    const int n = size();
    const int d = sp_.dimension();
    const Coordinates c = coordinates(theta);
    // Per-entry constants including the log weight.
    std::vector<double> base(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) base[static_cast<std::size_t>(a)] = folded_const_[static_cast<std::size_t>(a)] + std::log(w[a]);
    std::vector<double> terms(static_cast<std::size_t>(n));
    Vector mean_log_q = Vector::Zero(n);
    Matrix resp_mean = with_grad ? Matrix::Zero(n, n) : Matrix();
    std::vector<double> u(static_cast<std::size_t>(d));
    for (int k = 0; k < n; ++k) {
      for (int s = 0; s < S; ++s) {
        const Eigen::Index col = static_cast<Eigen::Index>(k) * S + s;
        double top = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < n; ++a) {
          const auto fa = static_cast<std::size_t>(a);
          const Matrix& src = source(c, theta, fa);
          const double* x = src.col(col).data();
          const Matrix& f = folded_[fa];
          const double* off = folded_offset_[fa].data();
          double q = 0.0;
          for (int i = 0; i < d; ++i) {
            double v = -off[i];
            for (int jj = 0; jj < d; ++jj) v += f(i, jj) * x[jj];
            q += v * v;
          }
          double t = base[fa] - 0.5 * q;
          if (!affine_[fa]) t -= c.log_jac[static_cast<std::size_t>(run_[fa])][col];
          terms[fa] = t;
          top = std::max(top, t);
        }
        double total = 0.0;
        for (int a = 0; a < n; ++a) {
          const double t = terms[static_cast<std::size_t>(a)] - top;
          total += t > kNegligibleLog ? std::exp(t) : 0.0;
        }
        const double lse = top + std::log(total);
        mean_log_q[k] += lse / S;
        if (!with_grad) continue;
        for (int a = 0; a < n; ++a) {
          const double t = terms[static_cast<std::size_t>(a)] - lse;
          if (t > kNegligibleLog) resp_mean(a, k) += std::exp(t) / S;
        }
      }
    }
    EntropyEval out{-w.dot(mean_log_q), Vector()};
    if (with_grad) {
      const double avg = w.dot(mean_log_q);
      out.grad = -(w.array() * (mean_log_q.array() - avg)).matrix() - (resp_mean * w - w);
    }
    return out;
  }

 private:
  struct Coordinates {
    std::vector<Matrix> working;
    std::vector<Vector> log_jac;
  };

  // Working coordinates and log Jacobians of the non-affine runs.
  Coordinates coordinates(const Matrix& theta) const {
    const Eigen::Index n = theta.cols();
    const int d = sp_.dimension();
    Coordinates c;
    c.working.resize(static_cast<std::size_t>(sp_.run_count()));
    c.log_jac.resize(static_cast<std::size_t>(sp_.run_count()));
    for (int r = 0; r < sp_.run_count(); ++r) {
      if (!runs_used_[static_cast<std::size_t>(r)]) continue;
      const ParamTransform& t = sp_.transform(r);
      auto& z = c.working[static_cast<std::size_t>(r)];
      auto& lj = c.log_jac[static_cast<std::size_t>(r)];
      z.resize(d, n);
      lj.resize(n);
      const Vector& lo = *t.lower();
      const Vector& hi = *t.upper();
      for (Eigen::Index s = 0; s < n; ++s) {
        const auto col = theta.col(s);
        if ((col.array() <= lo.array()).any() || (col.array() >= hi.array()).any()) {
          z.col(s).setZero();
          lj[s] = std::numeric_limits<double>::infinity();
          continue;
        }
        z.col(s) = t.apply(col);
        lj[s] = t.log_abs_det_jacobian_inverse(z.col(s));
      }
    }
    return c;
  }

  const Matrix& source(const Coordinates& c, const Matrix& theta, std::size_t a) const {
    return affine_[a] ? theta : c.working[static_cast<std::size_t>(run_[a])];
  }

  const StackedPosterior& sp_;
  std::vector<int> active_;
  std::vector<Matrix> inverse_linear_;
  std::vector<Matrix> folded_;
  std::vector<Vector> folded_offset_;
  std::vector<double> folded_const_;
  std::vector<bool> affine_;
  std::vector<int> run_;
  std::vector<bool> runs_used_;
};

std::vector<int> active_entries(const StackedPosterior& sp) {
  std::vector<int> out;
  for (int i = 0; i < sp.size(); ++i) {
    if (std::isfinite(sp.logits()[i])) out.push_back(i);
  }
  return out;
}

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = rng.normal();
  return out;
}

}  // namespace

StackedPosterior::StackedPosterior(const std::vector<RunOutput>& runs) {
  if (runs.empty()) throw ArgumentError("stacking needs at least one run");
  dimension_ = runs.front().posterior.dimension();
  for (std::size_t m = 0; m < runs.size(); ++m) {
    const RunOutput& r = runs[m];
    if (r.posterior.dimension() != dimension_) throw ArgumentError("stacking: runs differ in dimension");
    if (r.I_hat.size() != r.size() || !r.I_hat.allFinite()) {
      throw ContractError("stacking: run " + std::to_string(m) + " lacks corrected I_hat values");
    }
    transforms_.push_back(r.transform);
    for (int k = 0; k < r.size(); ++k) {
      entries_.push_back({static_cast<int>(m), k, r.I_hat[k]});
      components_.push_back(r.posterior.component(k));
    }
  }
  logits_ = init_logits(runs);
}

Vector StackedPosterior::I_hat() const {
  Vector out(size());
  for (int i = 0; i < size(); ++i) out[i] = entries_[static_cast<std::size_t>(i)].I_hat;
  return out;
}

void StackedPosterior::set_logits(Vector logits) {
  if (logits.size() != size()) throw ArgumentError("set_logits: wrong length");
  for (int i = 0; i < size(); ++i) {
    if (!std::isfinite(logits_[i])) logits[i] = kNegInf;
  }
  if (!(logits.array() > kNegInf).any()) throw ArgumentError("set_logits: every logit is -inf");
  logits_ = std::move(logits);
}

Vector StackedPosterior::weights() const { return softmax(logits_); }

double StackedPosterior::log_pdf(const Vector& theta) const {
  const DensityKernel kernel(*this, active_entries(*this));
  const Matrix ld = kernel.log_density(theta);
  const Vector w = weights();
  const std::vector<int> act = active_entries(*this);
  Vector terms(static_cast<Eigen::Index>(act.size()));
  for (std::size_t a = 0; a < act.size(); ++a) {
    const auto i = static_cast<Eigen::Index>(a);
    terms[i] = std::log(w[act[a]]) + ld(i, 0);
  }
  return log_sum_exp(terms);
}

Matrix StackedPosterior::sample(int n, Rng& rng) const {
  if (n < 1) throw ArgumentError("sample: n must be positive");
  const Vector w = weights();
  Matrix out(n, dimension_);
  for (int s = 0; s < n; ++s) {
    const double u = rng.uniform();
    double acc = 0.0;
    int i = 0;
    for (; i + 1 < size(); ++i) {
      acc += w[i];
      if (u < acc) break;
    }
    while (w[i] == 0.0) --i;
    const StackEntry& e = entries_[static_cast<std::size_t>(i)];
    const Vector z = components_[static_cast<std::size_t>(i)].sample(rng);
    out.row(s) = transforms_[static_cast<std::size_t>(e.run)].invert(z).transpose();
  }
  return out;
}

bool StackedPosterior::all_affine() const {
  return std::all_of(transforms_.begin(), transforms_.end(), [](const ParamTransform& t) { return t.is_affine(); });
}

GaussianMixture StackedPosterior::common_mixture() const {
  if (!all_affine()) throw ArgumentError("common_mixture: a run transform is not affine");
  std::vector<GaussianComponent> comps;
  for (int i = 0; i < size(); ++i) {
    comps.push_back(pull_back(transforms_[static_cast<std::size_t>(entries_[static_cast<std::size_t>(i)].run)],
                              components_[static_cast<std::size_t>(i)]));
  }
  return GaussianMixture(std::move(comps), weights());
}

Vector init_logits(const std::vector<RunOutput>& runs) {
  if (runs.empty()) throw ArgumentError("init_logits: no runs");
  std::vector<double> a;
  for (const RunOutput& r : runs) {
    if (!std::isfinite(r.elbo)) throw ArgumentError("init_logits: run ELBO is not finite");
    for (int k = 0; k < r.size(); ++k) {
      const double w = r.posterior.weights()[k];
      a.push_back(w > kZeroWeight ? std::log(w) + r.elbo : kNegInf);
    }
  }
  Vector out = Eigen::Map<Vector>(a.data(), static_cast<Eigen::Index>(a.size()));
  const double top = out.maxCoeff();
  if (!std::isfinite(top)) throw ArgumentError("init_logits: every weight is zero");
  for (double& x : out) x = std::isfinite(x) ? x - top : kNegInf;
  return out;
}

double entropy_mc(const StackedPosterior& sp, int S, Rng& rng) {
  if (S < 1) throw ArgumentError("entropy_mc: S must be positive");
  const std::vector<int> act = active_entries(sp);
  const DensityKernel kernel(sp, act);
  const Matrix eps = standard_normal(sp.dimension(), static_cast<Eigen::Index>(act.size()) * S, rng);
  const Vector w_all = sp.weights();
  Vector w(static_cast<Eigen::Index>(act.size()));
  for (std::size_t a = 0; a < act.size(); ++a) w[static_cast<Eigen::Index>(a)] = w_all[act[a]];
  return kernel.entropy(kernel.draw(eps, S), w, S, false).entropy;
}

double stacked_elbo(const StackedPosterior& sp, int S, Rng& rng) {
  return sp.weights().dot(sp.I_hat()) + entropy_mc(sp, S, rng);
}

StackResult optimize(const std::vector<RunOutput>& runs, const StackConfig& cfg) {
  if (cfg.S_optim < 2) throw ArgumentError("StackConfig: S_optim must be at least 2");
  if (cfg.S_final < 1) throw ArgumentError("StackConfig: S_final must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ArgumentError("StackConfig: learning rate must be positive");
  if (cfg.window < 1) throw ArgumentError("StackConfig: window must be positive");

  StackedPosterior sp(runs);
  const std::vector<int> act = active_entries(sp);
  const auto n = static_cast<Eigen::Index>(act.size());
  const DensityKernel kernel(sp, act);

  Vector i_hat(n);
  for (Eigen::Index a = 0; a < n; ++a) i_hat[a] = sp.I_hat()[act[static_cast<std::size_t>(a)]];

  // Free parameters: one logit per active entry, or one offset per run.
  const bool tied = cfg.mode == StackMode::posterior_only;
  Vector base(n);  // fixed part of each logit
  std::vector<int> owner(static_cast<std::size_t>(n));
  for (Eigen::Index a = 0; a < n; ++a) {
    const StackEntry& e = sp.entries()[static_cast<std::size_t>(act[static_cast<std::size_t>(a)])];
    owner[static_cast<std::size_t>(a)] = e.run;
    base[a] = tied ? std::log(runs[static_cast<std::size_t>(e.run)].posterior.weights()[e.component]) : 0.0;
  }
  Vector params;
  if (tied) {
    params = Vector::Constant(sp.run_count(), kNegInf);
    for (std::size_t m = 0; m < runs.size(); ++m) params[static_cast<Eigen::Index>(m)] = runs[m].elbo;
    params.array() -= params.maxCoeff();
  } else {
    params.resize(n);
    for (Eigen::Index a = 0; a < n; ++a) params[a] = sp.logits()[act[static_cast<std::size_t>(a)]];
  }
  auto logits_of = [&](const Vector& p) {
    Vector a(n);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = base[i] + (tied ? p[owner[static_cast<std::size_t>(i)]] : p[i]);
    return a;
  };

  Rng rng(cfg.seed, 0x737461636bULL);
  Matrix theta;
  if (!cfg.refresh_samples) {
    theta = kernel.draw(standard_normal(sp.dimension(), n * cfg.S_optim, rng), cfg.S_optim);
  }

  Vector m1 = Vector::Zero(params.size());
  Vector m2 = Vector::Zero(params.size());
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  StackResult result{sp, 0.0, 0.0, 0.0, 0, false, {}};
  std::vector<double> history;
  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    if (cfg.refresh_samples) {
      theta = kernel.draw(standard_normal(sp.dimension(), n * cfg.S_optim, rng), cfg.S_optim);
    }
    const Vector w = softmax(logits_of(params));
    const EntropyEval ev = kernel.entropy(theta, w, cfg.S_optim, true);
    const double g = w.dot(i_hat);
    const Vector grad_a = ev.grad + (w.array() * (i_hat.array() - g)).matrix();
    history.push_back(g + ev.entropy);
    result.trace.push_back({it, g + ev.entropy, ev.entropy, g});

    Vector grad;
    if (tied) {
      grad = Vector::Zero(params.size());
      for (Eigen::Index i = 0; i < n; ++i) grad[owner[static_cast<std::size_t>(i)]] += grad_a[i];
    } else {
      grad = grad_a;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!std::isfinite(grad_a[i])) {
        const StackEntry& e = sp.entries()[static_cast<std::size_t>(act[static_cast<std::size_t>(i)])];
        throw FitError("stacking: non-finite gradient at run " + std::to_string(e.run) + ", component " +
                       std::to_string(e.component));
      }
    }
    const int t = it + 1;
    for (Eigen::Index i = 0; i < params.size(); ++i) {
      if (!std::isfinite(params[i])) continue;
      m1[i] = b1 * m1[i] + (1 - b1) * grad[i];
      m2[i] = b2 * m2[i] + (1 - b2) * grad[i] * grad[i];
      const double mh = m1[i] / (1 - std::pow(b1, t));
      const double vh = m2[i] / (1 - std::pow(b2, t));
      params[i] += cfg.learning_rate * mh / (std::sqrt(vh) + adam_eps);
    }

    const auto h = static_cast<int>(history.size());
    if (h >= 2 * cfg.window) {
      double recent = 0.0, previous = 0.0;
      for (int i = 0; i < cfg.window; ++i) {
        recent += history[static_cast<std::size_t>(h - 1 - i)];
        previous += history[static_cast<std::size_t>(h - 1 - cfg.window - i)];
      }
      if (std::abs(recent - previous) / cfg.window < cfg.tolerance) {
        result.converged = true;
        ++it;
        break;
      }
    }
  }
  result.iterations = it;

  Vector logits = Vector::Constant(sp.size(), kNegInf);
  const Vector a_final = logits_of(params);
  for (Eigen::Index i = 0; i < n; ++i) logits[act[static_cast<std::size_t>(i)]] = a_final[i];
  logits.array() -= a_final.maxCoeff();
  result.posterior.set_logits(logits);

  Rng final_rng(cfg.seed, 0x66696e616cULL);
  result.entropy = entropy_mc(result.posterior, cfg.S_final, final_rng);
  result.expected_log_joint = result.posterior.weights().dot(result.posterior.I_hat());
  result.elbo = result.expected_log_joint + result.entropy;
  return result;
}

StackedPosterior naive_stack(const std::vector<RunOutput>& runs) {
  StackedPosterior sp(runs);
  Vector logits(sp.size());
  const double log_m = std::log(static_cast<double>(runs.size()));
  for (int i = 0; i < sp.size(); ++i) {
    const StackEntry& e = sp.entries()[static_cast<std::size_t>(i)];
    const double w = runs[static_cast<std::size_t>(e.run)].posterior.weights()[e.component];
    logits[i] = w > kZeroWeight ? std::log(w) - log_m : kNegInf;
  }
  sp.set_logits(logits);
  return sp;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write trace file " + path.string());
  out.precision(17);
  out << "iteration,elbo_estimate,entropy_estimate,expected_log_joint_term\n";
  for (const TraceRow& r : trace) {
    out << r.iteration << ',' << r.elbo << ',' << r.entropy << ',' << r.expected_log_joint << '\n';
  }
}

}  // namespace stackpost
