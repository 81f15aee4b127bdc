#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stackpost/stacking.hpp"
#include "stackpost/targets.hpp"

namespace stackpost {

inline constexpr double kNegligibleDeltaLml = 1.0;
inline constexpr double kMmtvThreshold = 0.2;
inline constexpr double kGsklThreshold = 0.125;

struct MetricsReport {
  double delta_lml = 0.0;
  double mmtv = 0.0;
  double gskl = 0.0;
  double elbo = 0.0;
  int M = 0;
  std::uint64_t seed = 0;
};

double delta_lml(double elbo, const GroundTruth& truth);
bool is_negligible(double delta_lml_value);

/// Mean marginal total variation from densities tabulated on the truth grids.
double mmtv_on_grids(const std::vector<MarginalGrid>& truth, const std::vector<std::vector<double>>& approx);
double mmtv(const GaussianMixture& q, const GroundTruth& truth);
/// Analytic for affine runs; otherwise histograms of 1e5 draws from a fixed stream.
double mmtv(const StackedPosterior& sp, const GroundTruth& truth);

/// Symmetrized Gaussian KL of moment-matched Gaussians over 2D.
double gskl(const Moments& p, const Moments& q);
double gskl(const GaussianMixture& q, const GroundTruth& truth);
double gskl(const StackedPosterior& sp, const GroundTruth& truth);

Moments stacked_moments(const StackedPosterior& sp);
/// Marginal densities on the given grids from samples, as histograms with one bin per grid point.
std::vector<std::vector<double>> histogram_marginals(const Matrix& samples, const std::vector<MarginalGrid>& grids);
/// Ground truth built from reference samples: moments plus histogram marginals on n-point grids.
GroundTruth ground_truth_from_samples(const Matrix& samples, double log_marginal_likelihood, int n = 2000);

struct MedianCi {
  double median = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Percentile-bootstrap 95% interval of the median.
MedianCi bootstrap_median(const std::vector<double>& values, int resamples, std::uint64_t seed);

struct ResultRow {
  std::string benchmark;
  std::string method;
  int M = 0;
  int replicate = 0;
  double elbo = 0.0;
  double delta_lml = 0.0;
  double mmtv = 0.0;
  double gskl = 0.0;
};

struct SummaryRow {
  std::string benchmark;
  std::string method;
  int M = 0;
  std::string metric;
  MedianCi ci;
  int replicates = 0;
  int resamples = 0;
};

/// Bootstrap summary per (method, M) of elbo, delta_lml, mmtv and gskl; failed (NaN) rows are skipped.
std::vector<SummaryRow> bootstrap(const std::vector<ResultRow>& rows, int resamples, std::uint64_t seed);

void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path);
void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);

}  // namespace stackpost
