#include "stackpost/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "stackpost/errors.hpp"

namespace stackpost {

namespace {

std::vector<std::vector<double>> mixture_on_grids(const GaussianMixture& q, const std::vector<MarginalGrid>& grids) {
  std::vector<std::vector<double>> out;
  for (int d = 0; d < q.dimension(); ++d) {
    const GaussianMixture m = q.marginal_1d(d);
    std::vector<double> dens;
    Vector x(1);
    for (double v : grids[static_cast<std::size_t>(d)].x) {
      x[0] = v;
      dens.push_back(std::exp(m.log_pdf(x)));
    }
    out.push_back(std::move(dens));
  }
  return out;
}

void check_grids(const GroundTruth& truth, int d) {
  if (static_cast<int>(truth.marginals.size()) < d) {
    throw ArgumentError("mmtv: no marginal grid for dimension " + std::to_string(truth.marginals.size()));
  }
}

constexpr int kMomentSamples = 100000;
constexpr std::uint64_t kMetricStream = 0x6d6574726963ULL;

// Index of the coordinate carrying the most weight in the null direction.
int degenerate_dimension(const Matrix& cov) {
  for (Eigen::Index i = 0; i < cov.rows(); ++i) {
    if (!(cov(i, i) > 0.0)) return static_cast<int>(i);
  }
  const Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  Eigen::Index idx = 0;
  es.eigenvectors().col(0).cwiseAbs().maxCoeff(&idx);
  return static_cast<int>(idx);
}

Eigen::LLT<Matrix> checked_llt(const Matrix& cov, const char* which) {
  Eigen::LLT<Matrix> llt(cov);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const Vector diag = llt.matrixLLT().diagonal();
    ok = diag.minCoeff() > 1e-12 * std::sqrt(cov.diagonal().maxCoeff());
  }
  if (!ok) {
    throw DomainError(std::string("gskl: ") + which + " covariance is singular along dimension " +
                      std::to_string(degenerate_dimension(cov)));
  }
  return llt;
}

double gaussian_kl(const Vector& m0, const Matrix& c0, const Eigen::LLT<Matrix>& l0, const Vector& m1,
                   const Eigen::LLT<Matrix>& l1) {
  const auto d = static_cast<double>(m0.size());
  const Matrix l1inv_c0 = l1.matrixL().solve(c0);
  const double trace = l1.matrixL().solve(l1inv_c0.transpose()).trace();
  const Vector u = l1.matrixL().solve(m1 - m0);
  const double logdet0 = 2.0 * l0.matrixLLT().diagonal().array().log().sum();
  const double logdet1 = 2.0 * l1.matrixLLT().diagonal().array().log().sum();
  return 0.5 * (trace + u.squaredNorm() - d + logdet1 - logdet0);
}

}  // namespace

double delta_lml(double elbo, const GroundTruth& truth) { return std::abs(elbo - truth.log_marginal_likelihood); }

bool is_negligible(double delta_lml_value) { return delta_lml_value < kNegligibleDeltaLml; }

double mmtv_on_grids(const std::vector<MarginalGrid>& truth, const std::vector<std::vector<double>>& approx) {
  if (truth.empty()) throw ArgumentError("mmtv: no marginal grids");
  if (approx.size() != truth.size()) throw ArgumentError("mmtv: approximation and truth differ in dimension");
  double acc = 0.0;
  for (std::size_t d = 0; d < truth.size(); ++d) {
    const auto& g = truth[d];
    if (g.x.size() < 2 || g.density.size() != g.x.size() || approx[d].size() != g.x.size()) {
      throw ArgumentError("mmtv: malformed grid for dimension " + std::to_string(d));
    }
    std::vector<double> diff(g.x.size());
    for (std::size_t i = 0; i < g.x.size(); ++i) diff[i] = std::abs(g.density[i] - approx[d][i]);
    // Mass off the grid counts in full toward |p - q|.
    const double outside_p = std::max(0.0, 1.0 - trapezoid(g.x, g.density));
    const double outside_q = std::max(0.0, 1.0 - trapezoid(g.x, approx[d]));
    acc += trapezoid(g.x, diff) + outside_p + outside_q;
  }
  return acc / (2.0 * static_cast<double>(truth.size()));
}

double mmtv(const GaussianMixture& q, const GroundTruth& truth) {
  check_grids(truth, q.dimension());
  return mmtv_on_grids(truth.marginals, mixture_on_grids(q, truth.marginals));
}

double mmtv(const StackedPosterior& sp, const GroundTruth& truth) {
  check_grids(truth, sp.dimension());
  if (sp.all_affine()) return mmtv(sp.common_mixture(), truth);
  Rng rng(0, kMetricStream);
  return mmtv_on_grids(truth.marginals, histogram_marginals(sp.sample(kMomentSamples, rng), truth.marginals));
}

double gskl(const Moments& p, const Moments& q) {
  const auto d = p.mean.size();
  if (d < 1 || q.mean.size() != d) throw ArgumentError("gskl: dimension mismatch");
  const auto lp = checked_llt(p.covariance, "reference");
  const auto lq = checked_llt(q.covariance, "approximation");
  const double kl_pq = gaussian_kl(p.mean, p.covariance, lp, q.mean, lq);
  const double kl_qp = gaussian_kl(q.mean, q.covariance, lq, p.mean, lp);
  return std::max(0.0, (kl_pq + kl_qp) / (2.0 * static_cast<double>(d)));
}

double gskl(const GaussianMixture& q, const GroundTruth& truth) {
  return gskl(Moments{truth.mean, truth.covariance}, q.moments());
}

Moments stacked_moments(const StackedPosterior& sp) {
  if (sp.all_affine()) return sp.common_mixture().moments();
  Rng rng(0, kMetricStream);
  const Matrix s = sp.sample(kMomentSamples, rng);
  Moments m;
  m.mean = s.colwise().mean().transpose();
  const Matrix c = s.rowwise() - m.mean.transpose();
  m.covariance = symmetrize(c.transpose() * c / static_cast<double>(s.rows() - 1));
  return m;
}

double gskl(const StackedPosterior& sp, const GroundTruth& truth) {
  return gskl(Moments{truth.mean, truth.covariance}, stacked_moments(sp));
}

std::vector<std::vector<double>> histogram_marginals(const Matrix& samples, const std::vector<MarginalGrid>& grids) {
  if (static_cast<std::size_t>(samples.cols()) != grids.size()) {
    throw ArgumentError("histogram_marginals: dimension mismatch");
  }
  std::vector<std::vector<double>> out;
  for (std::size_t d = 0; d < grids.size(); ++d) {
    const auto& x = grids[d].x;
    const auto n = x.size();
    const double dx = (x.back() - x.front()) / static_cast<double>(n - 1);
    std::vector<double> dens(n, 0.0);
    for (Eigen::Index s = 0; s < samples.rows(); ++s) {
      const double pos = (samples(s, static_cast<Eigen::Index>(d)) - x.front()) / dx + 0.5;
      if (pos < 0.0 || pos >= static_cast<double>(n)) continue;
      dens[static_cast<std::size_t>(pos)] += 1.0;
    }
    for (double& v : dens) v /= static_cast<double>(samples.rows()) * dx;
    out.push_back(std::move(dens));
  }
  return out;
}

GroundTruth ground_truth_from_samples(const Matrix& samples, double log_marginal_likelihood, int n) {
  if (samples.rows() < 2) throw ArgumentError("ground_truth_from_samples: need at least two samples");
  GroundTruth gt;
  gt.log_marginal_likelihood = log_marginal_likelihood;
  gt.reference_samples = samples;
  gt.mean = samples.colwise().mean().transpose();
  const Matrix c = samples.rowwise() - gt.mean.transpose();
  gt.covariance = symmetrize(c.transpose() * c / static_cast<double>(samples.rows() - 1));
  for (Eigen::Index d = 0; d < samples.cols(); ++d) {
    const double sd = std::sqrt(gt.covariance(d, d));
    MarginalGrid g;
    g.x = linspace(gt.mean[d] - 6.0 * sd, gt.mean[d] + 6.0 * sd, n);
    gt.marginals.push_back(std::move(g));
  }
  const auto dens = histogram_marginals(samples, gt.marginals);
  for (std::size_t d = 0; d < dens.size(); ++d) gt.marginals[d].density = dens[d];
  return gt;
}

MedianCi bootstrap_median(const std::vector<double>& values, int resamples, std::uint64_t seed) {
  if (values.empty()) throw ArgumentError("bootstrap_median: no values");
  if (resamples < 1) throw ArgumentError("bootstrap_median: resamples must be positive");
  Rng rng(seed, 0x626f6f74ULL);
  std::vector<double> medians(static_cast<std::size_t>(resamples));
  std::vector<double> draw(values.size());
  for (auto& m : medians) {
    for (auto& v : draw) v = values[rng.below(values.size())];
    m = median(draw);
  }
  std::sort(medians.begin(), medians.end());
  auto pct = [&](double p) {
    // Linear interpolation between order statistics.
    const double pos = p * static_cast<double>(medians.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, medians.size() - 1);
    return medians[lo] + (pos - static_cast<double>(lo)) * (medians[hi] - medians[lo]);
  };
  MedianCi ci{median(values), pct(0.025), pct(0.975)};
  ci.lower = std::min(ci.lower, ci.median);
  ci.upper = std::max(ci.upper, ci.median);
  return ci;
}

std::vector<SummaryRow> bootstrap(const std::vector<ResultRow>& rows, int resamples, std::uint64_t seed) {
  std::map<std::pair<std::string, int>, std::vector<const ResultRow*>> groups;
  std::vector<std::pair<std::string, int>> order;
  for (const ResultRow& r : rows) {
    const auto key = std::make_pair(r.method, r.M);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  std::vector<SummaryRow> out;
  std::uint64_t task = 0;
  for (const auto& key : order) {
    const auto& g = groups[key];
    const std::pair<const char*, double ResultRow::*> metrics[] = {
        {"elbo", &ResultRow::elbo}, {"delta_lml", &ResultRow::delta_lml}, {"mmtv", &ResultRow::mmtv},
        {"gskl", &ResultRow::gskl}};
    for (const auto& [name, member] : metrics) {
      std::vector<double> v;
      for (const ResultRow* r : g) {
        if (std::isfinite(r->*member)) v.push_back(r->*member);
      }
      ++task;
      if (v.empty()) continue;
      out.push_back({g.front()->benchmark, key.first, key.second, name, bootstrap_median(v, resamples, derive_seed(seed, task)),
                     static_cast<int>(v.size()), resamples});
    }
  }
  return out;
}

void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write results file " + path.string());
  out.precision(17);
  out << "benchmark,method,M,replicate,elbo,delta_lml,mmtv,gskl\n";
  for (const ResultRow& r : rows) {
    out << r.benchmark << ',' << r.method << ',' << r.M << ',' << r.replicate << ',' << r.elbo << ','
        << r.delta_lml << ',' << r.mmtv << ',' << r.gskl << '\n';
  }
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write summary file " + path.string());
  out.precision(17);
  out << "benchmark,method,M,metric,median,ci_lower,ci_upper,replicates,resamples\n";
  for (const SummaryRow& r : rows) {
    out << r.benchmark << ',' << r.method << ',' << r.M << ',' << r.metric << ',' << r.ci.median << ','
        << r.ci.lower << ',' << r.ci.upper << ',' << r.replicates << ',' << r.resamples << '\n';
  }
}

}  // namespace stackpost
