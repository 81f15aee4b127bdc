#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stackpost/debias.hpp"
#include "stackpost/metrics.hpp"

namespace stackpost {

enum class Method { all_weights, posterior_only, naive };

std::string to_string(Method m);
Method method_from_string(const std::string& name);
std::string to_string(DebiasMode m);
DebiasMode debias_from_string(const std::string& name);

struct ExperimentConfig {
  std::string benchmark = "gmm";
  double noise_sigma = 0.0;
  /// Seed of the target itself (GMM component means).
  std::uint64_t target_seed = 1;
  int pool_size = 100;
  std::vector<int> m_list{2, 3, 5, 8, 10, 14, 20, 28, 40};
  int replicates = 20;
  std::vector<Method> methods{Method::all_weights, Method::naive};
  DebiasMode debias = DebiasMode::none;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::optional<std::filesystem::path> runs_dir;
  int K_target = 50;
  int budget = 0;
  StackConfig stack;
  int bootstrap_resamples = 10000;
  int sample_rows = 2000;
  /// 0 reads STACKPOST_WORKERS, falling back to the hardware thread count.
  int workers = 0;

  void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

struct PoolReport {
  std::vector<RunOutput> runs;
  /// Fit seed of each kept run, or its file name index when imported.
  std::vector<std::uint64_t> seeds;
  int attempts = 0;
  int not_converged = 0;
  int high_variance = 0;
  int errors = 0;
  std::vector<std::string> warnings;
};

int worker_count(int requested);

/// Fits until pool_size runs pass the filter, or imports and filters runs_dir.
/// Throws FitError with the attrition counts after 5 pool_size attempts.
PoolReport build_run_pool(const ExperimentConfig& cfg, const TargetProblem& target);

/// Extra per-replicate quantities beyond the results CSV.
struct ReplicateDetail {
  std::string method;
  int M = 0;
  int replicate = 0;
  std::vector<int> run_indices;
  double elbo_uncapped = 0.0;
  DebiasReport debias;
  double max_run_elbo = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string error;
};

struct ExperimentResult {
  PoolReport pool;
  std::vector<ResultRow> rows;
  std::vector<ReplicateDetail> details;
  std::vector<SummaryRow> summary;
};

/// Run indices for one replicate: M distinct draws from the pool.
std::vector<int> sample_replicate(int pool_size, int M, std::uint64_t seed);

/// Scores every pool run on its own as method "single" with M = 1.
std::vector<ResultRow> score_single_runs(const std::vector<RunOutput>& runs, const TargetProblem& target);

/// The full protocol on an existing pool; writes files when cfg.out is set.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const TargetProblem& target, PoolReport pool);
/// Builds the target and pool, then runs the protocol.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace stackpost
