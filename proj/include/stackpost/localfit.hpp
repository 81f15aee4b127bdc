#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "stackpost/mixture.hpp"
#include "stackpost/targets.hpp"
#include "stackpost/transforms.hpp"

namespace stackpost {

struct FitDiagnostics {
  int iterations = 0;
  long evaluations = 0;
};

/// One local variational fit: a mixture in the run's working space, the
/// map into that space, and Bayesian-quadrature estimates of the
/// per-component expected log-joint.
struct RunOutput {
  GaussianMixture posterior;  // working-space components
  ParamTransform transform;
  std::optional<Vector> L_hat;  // working-space estimates
  Vector I_hat;                 // common-space estimates
  Matrix J;
  double elbo = 0.0;
  bool converged = false;
  FitDiagnostics diagnostics;

  int size() const { return posterior.size(); }
  /// Throws ValidationError when shapes or values disagree.
  void validate() const;
  /// Sum_k w_k I_hat_k.
  double expected_log_joint() const { return posterior.weights().dot(I_hat); }
};

struct FitConfig {
  int K_target = 50;
  /// Total log-joint evaluations; 0 picks 50 (D + 2), or 75 (D + 2) on noisy targets.
  int budget = 0;
  std::optional<Vector> init_lower;
  std::optional<Vector> init_upper;
  std::uint64_t seed = 0;
  /// Overrides the target's noise level for the surrogate when set.
  std::optional<double> noise_sigma;

  int batch_size = 5;
  int initial_design = 10;
  int adam_steps = 150;
  int entropy_samples = 20;
  int whiten_iteration = 4;
  double convergence_tol = 1e-3;
  int convergence_window = 3;
};

int default_budget(int dimension, double noise_sigma);

RunOutput run_local_fit(const TargetProblem& target, const FitConfig& cfg);

/// Keeps converged runs whose largest J_kk is below var_cap, in order.
std::vector<RunOutput> filter_runs(const std::vector<RunOutput>& runs, double var_cap = 5.0);
bool passes_filter(const RunOutput& run, double var_cap = 5.0);

nlohmann::json run_to_json(const RunOutput& run);
RunOutput run_from_json(const nlohmann::json& j);
void export_run(const RunOutput& run, const std::filesystem::path& path);
RunOutput import_run(const std::filesystem::path& path);

/// Common-space entropy of a run posterior by Monte Carlo with S draws per component.
double run_entropy(const GaussianMixture& q, const ParamTransform& t, int samples_per_component, Rng& rng);

}  // namespace stackpost
