#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "stackpost/localfit.hpp"

namespace stackpost {

struct StackEntry {
  int run = 0;
  int component = 0;
  double I_hat = 0.0;
};

/// Components of M runs pooled into one mixture with free logits.
///
/// Components stay in their runs' working spaces; densities in the common
/// space are Jacobian-corrected on evaluation.
class StackedPosterior {
 public:
  /// Pools the runs with logits from init_logits.
  explicit StackedPosterior(const std::vector<RunOutput>& runs);

  int size() const { return static_cast<int>(entries_.size()); }
  int dimension() const { return dimension_; }
  int run_count() const { return static_cast<int>(transforms_.size()); }
  const std::vector<StackEntry>& entries() const { return entries_; }
  const GaussianComponent& component(int i) const { return components_[static_cast<std::size_t>(i)]; }
  const ParamTransform& transform(int run) const { return transforms_[static_cast<std::size_t>(run)]; }
  Vector I_hat() const;

  const Vector& logits() const { return logits_; }
  /// -inf entries are held at zero weight.
  void set_logits(Vector logits);
  /// softmax of the logits.
  Vector weights() const;

  /// Common-space log-density.
  double log_pdf(const Vector& theta) const;
  /// Common-space draws, one per row.
  Matrix sample(int n, Rng& rng) const;
  /// True when every run transform is affine.
  bool all_affine() const;
  /// The pooled mixture pulled back to the common space; affine runs only.
  GaussianMixture common_mixture() const;

 private:
  int dimension_ = 0;
  std::vector<StackEntry> entries_;
  std::vector<GaussianComponent> components_;
  std::vector<ParamTransform> transforms_;
  Vector logits_;
};

/// a = log w + ELBO_m minus the overall maximum; zero weights give -inf.
Vector init_logits(const std::vector<RunOutput>& runs);

enum class StackMode { all_weights, posterior_only };

struct StackConfig {
  int S_optim = 20;
  int S_final = 100;
  double learning_rate = 0.1;
  int max_iterations = 5000;
  int window = 200;
  double tolerance = 1e-3;
  std::uint64_t seed = 0;
  /// Redraw entropy samples every iteration; false keeps one fixed set.
  bool refresh_samples = true;
  StackMode mode = StackMode::all_weights;
};

struct TraceRow {
  int iteration;
  double elbo;
  double entropy;
  double expected_log_joint;
};

struct StackResult {
  StackedPosterior posterior;
  double elbo = 0.0;
  double entropy = 0.0;
  double expected_log_joint = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<TraceRow> trace;
};

/// -sum_k w_k mean_s log q(x_ks), with S common-space draws per entry.
double entropy_mc(const StackedPosterior& sp, int S, Rng& rng);
/// sum w I_hat + entropy_mc.
double stacked_elbo(const StackedPosterior& sp, int S, Rng& rng);

/// Adam on the logits of the pooled runs.
StackResult optimize(const std::vector<RunOutput>& runs, const StackConfig& cfg);

/// Uniform 1/M average of the run posteriors.
StackedPosterior naive_stack(const std::vector<RunOutput>& runs);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path);

}  // namespace stackpost
