#include "stackpost/localfit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "stackpost/errors.hpp"
#include "stackpost/surrogate.hpp"

namespace stackpost {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Diagonal-covariance mixture under optimization, in working coordinates.
struct DiagMixture {
  Matrix mu;       // K x D
  Matrix log_sd;   // K x D
  Vector logits;   // K

  int size() const { return static_cast<int>(mu.rows()); }
  int dim() const { return static_cast<int>(mu.cols()); }
  Vector weights() const {
    Vector w = (logits.array() - logits.maxCoeff()).exp().matrix();
    return w / w.sum();
  }
  GaussianMixture to_mixture() const {
    std::vector<GaussianComponent> comps;
    for (int k = 0; k < size(); ++k) {
      const Vector var = (2.0 * log_sd.row(k).array()).exp().matrix().transpose();
      comps.emplace_back(mu.row(k).transpose(), Matrix(var.asDiagonal()));
    }
    Vector w = weights();
    w /= w.sum();
    return GaussianMixture(std::move(comps), std::move(w));
  }
};

struct AdamState {
  Vector m, v;
  int t = 0;
  explicit AdamState(Eigen::Index n) : m(Vector::Zero(n)), v(Vector::Zero(n)) {}
  // Ascent step with per-coordinate learning rates.
  void step(Vector& x, const Vector& g, const Vector& lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseAbs2();
    const double c1 = 1 - std::pow(b1, t);
    const double c2 = 1 - std::pow(b2, t);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x[i] += lr[i] * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// Entropy of a diagonal mixture with the sticking-the-landing reparameterized
// gradient. eps holds K * S rows of standard-normal noise.
double entropy_with_gradient(const DiagMixture& q, const Matrix& eps, int samples, Matrix* g_mu, Matrix* g_log_sd,
                             Vector* g_logits) {
  const int k_count = q.size();
  const int d = q.dim();
  const Vector w = q.weights();
  const Vector log_w = w.array().log().matrix();
  const Matrix sd = q.log_sd.array().exp().matrix();
  Vector norm(k_count);
  for (int j = 0; j < k_count; ++j) norm[j] = -0.5 * d * kLog2Pi - q.log_sd.row(j).sum();

  Vector mean_log_q = Vector::Zero(k_count);
  if (g_mu) g_mu->setZero(k_count, d);
  if (g_log_sd) g_log_sd->setZero(k_count, d);
  Vector terms(k_count);
  Vector x(d), grad_x(d);
  for (int k = 0; k < k_count; ++k) {
    for (int s = 0; s < samples; ++s) {
      const auto e = eps.row(k * samples + s);
      for (int dd = 0; dd < d; ++dd) x[dd] = q.mu(k, dd) + sd(k, dd) * e[dd];
      for (int j = 0; j < k_count; ++j) {
        double acc = 0.0;
        for (int dd = 0; dd < d; ++dd) {
          const double u = (x[dd] - q.mu(j, dd)) / sd(j, dd);
          acc += u * u;
        }
        terms[j] = log_w[j] + norm[j] - 0.5 * acc;
      }
      const double lq = log_sum_exp(terms);
      mean_log_q[k] += lq / samples;
      if (!g_mu) continue;
      grad_x.setZero();
      for (int j = 0; j < k_count; ++j) {
        const double r = std::exp(terms[j] - lq);
        if (r < 1e-300) continue;
        for (int dd = 0; dd < d; ++dd) grad_x[dd] -= r * (x[dd] - q.mu(j, dd)) / (sd(j, dd) * sd(j, dd));
      }
      for (int dd = 0; dd < d; ++dd) {
        (*g_mu)(k, dd) -= w[k] * grad_x[dd] / samples;
        (*g_log_sd)(k, dd) -= w[k] * grad_x[dd] * sd(k, dd) * e[dd] / samples;
      }
    }
  }
  const double avg = w.dot(mean_log_q);
  if (g_logits) *g_logits = -(w.array() * (mean_log_q.array() - avg)).matrix();
  return -avg;
}

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = rng.normal();
  return out;
}

struct FitState {
  Matrix x;  // working-space inputs
  Vector y;  // working-space log-joint values
  std::vector<Vector> theta;  // common-space inputs
  std::vector<double> raw_y;  // common-space log-joint values
  ParamTransform transform = ParamTransform::identity(1);
  double log_jac = 0.0;  // log |det d theta / d z| of the current transform
};

void append_point(FitState& st, const Vector& theta, double value) {
  st.theta.push_back(theta);
  st.raw_y.push_back(value);
  const Vector z = st.transform.apply(theta);
  st.x.conservativeResize(st.x.rows() + 1, z.size());
  st.x.row(st.x.rows() - 1) = z.transpose();
  st.y.conservativeResize(st.y.size() + 1);
  st.y[st.y.size() - 1] = value + st.log_jac;
}

void rebuild_working_data(FitState& st) {
  const auto n = static_cast<Eigen::Index>(st.theta.size());
  const int d = st.transform.dimension();
  st.x.resize(n, d);
  st.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    st.x.row(i) = st.transform.apply(st.theta[static_cast<std::size_t>(i)]).transpose();
    st.y[i] = st.raw_y[static_cast<std::size_t>(i)] + st.log_jac;
  }
}

GpHyperparameters initial_hypers(const FitState& st) {
  const int d = static_cast<int>(st.x.cols());
  const Vector lo = st.x.colwise().minCoeff();
  const Vector hi = st.x.colwise().maxCoeff();
  const Vector span = (hi - lo).cwiseMax(1e-3);
  Eigen::Index best = 0;
  st.y.maxCoeff(&best);
  const double y_sd = std::sqrt((st.y.array() - st.y.mean()).square().mean());
  GpHyperparameters h;
  h.lengthscales = 0.3 * span;
  h.output_scale = std::max(1.0, y_sd);
  h.mean_peak = st.y.maxCoeff();
  h.mean_location = st.x.row(best).transpose();
  h.mean_widths = span;
  (void)d;
  return h;
}

HyperPrior hyper_prior(const FitState& st) {
  const int d = static_cast<int>(st.x.cols());
  const Vector lo = st.x.colwise().minCoeff();
  const Vector hi = st.x.colwise().maxCoeff();
  const Vector span = (hi - lo).cwiseMax(1e-3);
  const double y_sd = std::max(1.0, std::sqrt((st.y.array() - st.y.mean()).square().mean()));
  HyperPrior p;
  p.mean = Vector::Zero(3 * d + 2);
  p.sd = Vector::Zero(3 * d + 2);
  for (int i = 0; i < d; ++i) {
    p.mean[i] = std::log(0.3 * span[i]);
    p.sd[i] = 1.0;
    p.mean[2 * d + 2 + i] = std::log(span[i]);
    p.sd[2 * d + 2 + i] = 1.0;
  }
  p.mean[d] = std::log(y_sd);
  p.sd[d] = 1.5;
  return p;
}

// Optimizes the surrogate ELBO in place with the entropy noise held fixed
// (rows k S .. k S + S - 1 of `noise` belong to component k). Means stay
// inside the training-data box expanded by `margin` of its span.
void optimize_mixture(DiagMixture& q, const GpModel& gp, const FitConfig& cfg, const Matrix& noise) {
  const int k_count = q.size();
  const int d = q.dim();
  const Vector lo = gp.inputs().colwise().minCoeff();
  const Vector hi = gp.inputs().colwise().maxCoeff();
  const Vector span = (hi - lo).cwiseMax(1e-6);
  const double margin = 0.15;
  const int n_params = k_count * (2 * d + 1);
  AdamState adam(n_params);
  Vector lr(n_params);
  for (int k = 0; k < k_count; ++k) {
    for (int dd = 0; dd < d; ++dd) {
      lr[k * d + dd] = 0.02 * span[dd];
      lr[k_count * d + k * d + dd] = 0.05;
    }
    lr[2 * k_count * d + k] = 0.1;
  }
  Vector params(n_params), grad(n_params);
  Matrix g_mu, g_lsd;
  Vector g_a, gi_mu, gi_lsd;
  for (int step = 0; step < cfg.adam_steps; ++step) {
    entropy_with_gradient(q, noise, cfg.entropy_samples, &g_mu, &g_lsd, &g_a);
    const Vector w = q.weights();
    Vector i_hat(k_count);
    for (int k = 0; k < k_count; ++k) {
      const Vector sd = q.log_sd.row(k).array().exp().matrix().transpose();
      i_hat[k] = bq_diagonal_mean(gp, q.mu.row(k).transpose(), sd, &gi_mu, &gi_lsd);
      g_mu.row(k) += w[k] * gi_mu.transpose();
      g_lsd.row(k) += w[k] * gi_lsd.transpose();
    }
    const double g_total = w.dot(i_hat);
    g_a += (w.array() * (i_hat.array() - g_total)).matrix();

    for (int k = 0; k < k_count; ++k) {
      for (int dd = 0; dd < d; ++dd) {
        params[k * d + dd] = q.mu(k, dd);
        grad[k * d + dd] = g_mu(k, dd);
        params[k_count * d + k * d + dd] = q.log_sd(k, dd);
        grad[k_count * d + k * d + dd] = g_lsd(k, dd);
      }
      params[2 * k_count * d + k] = q.logits[k];
      grad[2 * k_count * d + k] = g_a[k];
    }
    if (!grad.allFinite()) break;
    const double decay = 1.0 - 0.98 * step / std::max(1.0, cfg.adam_steps - 1.0);
    adam.step(params, grad, decay * lr);
    for (int k = 0; k < k_count; ++k) {
      for (int dd = 0; dd < d; ++dd) {
        q.mu(k, dd) = std::clamp(params[k * d + dd], lo[dd] - margin * span[dd], hi[dd] + margin * span[dd]);
        q.log_sd(k, dd) = std::clamp(params[k_count * d + k * d + dd], std::log(1e-4 * span[dd]),
                                     std::log(0.5 * span[dd]));
      }
      q.logits[k] = params[2 * k_count * d + k];
    }
    q.logits.array() -= q.logits.maxCoeff();
    q.logits = q.logits.cwiseMax(-50.0);
  }
}

double surrogate_elbo(const DiagMixture& q, const GpModel& gp, int samples, std::uint64_t seed) {
  Rng rng(seed, 0x656c626fULL);
  const Matrix eps = standard_normal(static_cast<Eigen::Index>(q.size()) * samples, q.dim(), rng);
  const double h = entropy_with_gradient(q, eps, samples, nullptr, nullptr, nullptr);
  const Vector w = q.weights();
  double g = 0.0;
  for (int k = 0; k < q.size(); ++k) {
    const Vector sd = q.log_sd.row(k).array().exp().matrix().transpose();
    g += w[k] * bq_diagonal_mean(gp, q.mu.row(k).transpose(), sd, nullptr, nullptr);
  }
  return g + h;
}

// Greedy batch maximizing posterior variance times variational density.
std::vector<Vector> acquire_batch(const DiagMixture& q, const GpModel& gp, int batch, double noise_var, Rng& rng) {
  const GaussianMixture qm = q.to_mixture();
  const int n_cand = 40 * batch;
  Matrix cand(n_cand, q.dim());
  const Vector w = q.weights();
  for (int i = 0; i < n_cand; ++i) {
    // Candidates from a broadened copy of q.
    double u = rng.uniform();
    int k = 0;
    while (k + 1 < q.size() && u > w[k]) {
      u -= w[k];
      ++k;
    }
    for (int dd = 0; dd < q.dim(); ++dd) {
      cand(i, dd) = q.mu(k, dd) + 1.5 * std::exp(q.log_sd(k, dd)) * rng.normal();
    }
  }
  Matrix cov = gp.posterior_covariance(cand);
  Vector dens(n_cand);
  for (int i = 0; i < n_cand; ++i) dens[i] = std::exp(qm.log_pdf(cand.row(i).transpose()));
  std::vector<Vector> out;
  for (int b = 0; b < batch; ++b) {
    Eigen::Index best = 0;
    double best_score = -1.0;
    for (int i = 0; i < n_cand; ++i) {
      const double score = std::max(0.0, cov(i, i)) * dens[i];
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    out.push_back(cand.row(best).transpose());
    const double denom = cov(best, best) + noise_var + 1e-12;
    const Vector col = cov.col(best);
    cov -= col * col.transpose() / denom;
  }
  return out;
}

void grow_mixture(DiagMixture& q, int target, Rng& rng) {
  for (int added = 0; added < 2 && q.size() < target; ++added) {
    const Vector w = q.weights();
    Eigen::Index src = 0;
    w.maxCoeff(&src);
    const int k = q.size();
    const int d = q.dim();
    q.mu.conservativeResize(k + 1, d);
    q.log_sd.conservativeResize(k + 1, d);
    q.logits.conservativeResize(k + 1);
    const int axis = static_cast<int>(rng.below(static_cast<std::uint64_t>(d)));
    const double shift = 0.5 * std::exp(q.log_sd(src, axis));
    q.mu.row(k) = q.mu.row(src);
    q.mu(k, axis) += shift;
    q.mu(src, axis) -= shift;
    q.log_sd.row(k) = q.log_sd.row(src);
    q.logits[src] -= std::log(2.0);
    q.logits[k] = q.logits[src];
  }
}

Vector uniform_in_box(const Vector& lo, const Vector& hi, Rng& rng) {
  Vector x(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i) x[i] = rng.uniform(lo[i], hi[i]);
  return x;
}

}  // namespace

int default_budget(int dimension, double noise_sigma) {
  return (noise_sigma > 0.0 ? 75 : 50) * (dimension + 2);
}

double run_entropy(const GaussianMixture& q, const ParamTransform& t, int samples_per_component, Rng& rng) {
  double acc = 0.0;
  for (int k = 0; k < q.size(); ++k) {
    if (q.weights()[k] <= kZeroWeight) continue;
    double mean = 0.0;
    for (int s = 0; s < samples_per_component; ++s) {
      const Vector z = q.component(k).sample(rng);
      const Vector theta = t.invert(z);
      Vector terms(q.size());
      for (int j = 0; j < q.size(); ++j) {
        terms[j] = q.weights()[j] <= kZeroWeight
                       ? -std::numeric_limits<double>::infinity()
                       : std::log(q.weights()[j]) + corrected_log_density(t, q.component(j), theta);
      }
      mean += log_sum_exp(terms) / samples_per_component;
    }
    acc -= q.weights()[k] * mean;
  }
  return acc;
}

RunOutput run_local_fit(const TargetProblem& target, const FitConfig& cfg) {
  const int d = target.dimension();
  if (cfg.K_target < 1) throw ArgumentError("FitConfig: K_target must be at least 1");
  const double sigma = cfg.noise_sigma.value_or(target.noise_sigma());
  const int budget = cfg.budget > 0 ? cfg.budget : default_budget(d, sigma);
  if (budget < 10 * d) throw ArgumentError("FitConfig: budget must be at least 10 D");
  const Vector box_lo = cfg.init_lower.value_or(target.lower_bounds());
  const Vector box_hi = cfg.init_upper.value_or(target.upper_bounds());

  Rng rng(cfg.seed, 0x666974ULL);
  Evaluator eval = target.evaluator(cfg.seed);
  const double noise_var = sigma * sigma;

  FitState st;
  st.transform = ParamTransform::identity(d);
  st.x.resize(0, d);

  // Uniform start inside the plausible box, then a local Latin-hypercube batch.
  const Vector x0 = uniform_in_box(box_lo, box_hi, rng);
  const Vector half = 0.1 * (box_hi - box_lo);
  const int n0 = std::min(budget, std::max(cfg.initial_design, d + 2));
  append_point(st, x0, eval(x0));
  {
    std::vector<std::vector<int>> perms(static_cast<std::size_t>(d));
    for (auto& p : perms) {
      for (int i = 0; i < n0 - 1; ++i) p.push_back(i);
      for (int i = n0 - 2; i > 0; --i) std::swap(p[static_cast<std::size_t>(i)], p[rng.below(static_cast<std::uint64_t>(i + 1))]);
    }
    for (int i = 0; i < n0 - 1; ++i) {
      Vector x(d);
      for (int dd = 0; dd < d; ++dd) {
        const double u = (perms[static_cast<std::size_t>(dd)][static_cast<std::size_t>(i)] + rng.uniform()) / (n0 - 1);
        x[dd] = std::clamp(x0[dd] + (2.0 * u - 1.0) * half[dd], box_lo[dd], box_hi[dd]);
      }
      append_point(st, x, eval(x));
    }
  }

  DiagMixture q;
  const int k_start = std::min(2, cfg.K_target);
  q.mu = st.x.row(0).replicate(k_start, 1);
  {
    Eigen::Index best = 0;
    st.y.maxCoeff(&best);
    q.mu = st.x.row(best).replicate(k_start, 1);
  }
  q.log_sd = (0.25 * half.array()).log().matrix().transpose().replicate(k_start, 1);
  for (int k = 0; k < k_start; ++k)
    for (int dd = 0; dd < d; ++dd) q.mu(k, dd) += 0.1 * half[dd] * rng.normal();
  q.logits = Vector::Zero(k_start);

  const Matrix entropy_noise =
      standard_normal(static_cast<Eigen::Index>(cfg.K_target) * cfg.entropy_samples, d, rng);
  std::optional<GpHyperparameters> hypers;
  std::vector<double> elbo_trace;
  std::vector<double> elbo_sd;
  bool converged = false;
  int iteration = 0;
  GpModel gp = [&] {
    GpFitOptions o;
    o.restarts = 3;
    o.seed = cfg.seed;
    o.prior = hyper_prior(st);
    return gp_fit(st.x, st.y, Vector::Constant(st.y.size(), noise_var), initial_hypers(st), o);
  }();

  for (;;) {
    ++iteration;
    if (iteration > 1) {
      GpFitOptions o;
      o.restarts = hypers ? 1 : 3;
      o.max_iterations = 60;
      o.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(iteration));
      o.prior = hyper_prior(st);
      const GpHyperparameters init = hypers ? *hypers : initial_hypers(st);
      gp = gp_fit(st.x, st.y, Vector::Constant(st.y.size(), noise_var), init, o);
    }
    hypers = gp.hypers();
    optimize_mixture(q, gp, cfg, entropy_noise);
    elbo_trace.push_back(surrogate_elbo(q, gp, 50, derive_seed(cfg.seed, 17)));
    {
      const GaussianMixture qm = q.to_mixture();
      const Matrix j = bq_expected_log_joint(gp, qm).J;
      elbo_sd.push_back(std::sqrt(std::max(0.0, qm.weights().dot(j * qm.weights()))));
    }

    if (q.size() >= cfg.K_target && static_cast<int>(elbo_trace.size()) > cfg.convergence_window &&
        eval.count() >= budget / 2) {
      bool stable = true;
      for (int i = 0; i < cfg.convergence_window; ++i) {
        const std::size_t t = elbo_trace.size() - 1 - static_cast<std::size_t>(i);
        // Changes within the surrogate's own ELBO uncertainty count as stable.
        const double change = std::abs(elbo_trace[t] - elbo_trace[t - 1]);
        stable = stable && change < cfg.convergence_tol * std::max(1.0, std::abs(elbo_trace[t])) + elbo_sd[t];
      }
      if (stable) {
        converged = true;
        break;
      }
    }
    if (eval.count() + cfg.batch_size > budget) break;

    for (const Vector& z : acquire_batch(q, gp, cfg.batch_size, noise_var, rng)) {
      const Vector theta = st.transform.invert(z);
      append_point(st, theta, eval(theta));
    }
    grow_mixture(q, cfg.K_target, rng);

    if (iteration == cfg.whiten_iteration) {
      // Whitening from the current variational covariance in common coordinates.
      const GaussianMixture qm = q.to_mixture();
      const ParamTransform old = st.transform;
      Moments mom;
      {
        const Moments wm = qm.moments();
        const Matrix inv = old.linear().inverse();
        mom.mean = old.invert(wm.mean);
        mom.covariance = symmetrize(inv * wm.covariance * inv.transpose());
      }
      const Eigen::LLT<Matrix> llt(mom.covariance + 1e-9 * Matrix::Identity(d, d));
      if (llt.info() == Eigen::Success) {
        const Matrix a = Matrix(llt.matrixL()).inverse();
        const ParamTransform next = ParamTransform::affine(a, -a * mom.mean);
        // Re-express q in the new coordinates, keeping the diagonal.
        const Matrix map = next.linear() * old.linear().inverse();
        for (int k = 0; k < q.size(); ++k) {
          const Vector theta = old.invert(q.mu.row(k).transpose());
          const Vector var = (2.0 * q.log_sd.row(k).array()).exp().matrix().transpose();
          const Matrix c = map * var.asDiagonal() * map.transpose();
          q.mu.row(k) = next.apply(theta).transpose();
          q.log_sd.row(k) = (0.5 * c.diagonal().array().log()).matrix().transpose();
        }
        st.transform = next;
        st.log_jac = next.log_abs_det_jacobian_inverse(Vector::Zero(d));
        rebuild_working_data(st);
        hypers.reset();
      }
    }
  }

  const GaussianMixture posterior = q.to_mixture();
  const BqEstimate bq = bq_expected_log_joint(gp, posterior);
  const int s_final = std::max(100, 10000 / posterior.size());
  Rng final_rng(cfg.seed, 0x66696e616cULL);
  Vector i_hat(posterior.size());
  for (int k = 0; k < posterior.size(); ++k) {
    Matrix draws(s_final, d);
    for (int s = 0; s < s_final; ++s) draws.row(s) = posterior.component(k).sample(final_rng).transpose();
    i_hat[k] = correct_expected_log_joint(st.transform, posterior.component(k), bq.I_hat[k], draws);
  }
  const double entropy = run_entropy(posterior, st.transform, s_final, final_rng);

  RunOutput out{posterior, st.transform, bq.I_hat, i_hat, bq.J, posterior.weights().dot(i_hat) + entropy,
                converged && posterior.size() >= cfg.K_target, {iteration, eval.count()}};
  out.validate();
  return out;
}

std::vector<RunOutput> filter_runs(const std::vector<RunOutput>& runs, double var_cap) {
  std::vector<RunOutput> kept;
  for (const auto& r : runs) {
    if (passes_filter(r, var_cap)) kept.push_back(r);
  }
  return kept;
}

bool passes_filter(const RunOutput& run, double var_cap) {
  return run.converged && run.J.diagonal().maxCoeff() < var_cap;
}

}  // namespace stackpost
