#pragma once

#include <vector>

#include "stackpost/stacking.hpp"

namespace stackpost {

struct DebiasReport {
  double E_stacked = 0.0;
  double E_median = 0.0;
  double I_median = 0.0;
  double elbo_capped_E = 0.0;
  double elbo_capped_I = 0.0;
  double entropy_used = 0.0;
};

enum class DebiasMode { none, run_median, component_median };

/// sum w I_hat over the pooled entries.
double e_stacked(const StackedPosterior& sp);
/// Median over runs of sum_k w_k I_hat_k.
double cap_run_median(const std::vector<RunOutput>& runs);
/// Median over every component I_hat of every run.
double cap_component_median(const std::vector<RunOutput>& runs);

/// min(E_stacked, cap) + entropy for both caps, with the given entropy estimate.
DebiasReport capped_elbo(const StackedPosterior& sp, const std::vector<RunOutput>& runs, double entropy);
/// As above, estimating the entropy with S draws per entry.
DebiasReport capped_elbo(const StackedPosterior& sp, const std::vector<RunOutput>& runs, int S, Rng& rng);

/// The ELBO to report under a debias mode.
double reported_elbo(const DebiasReport& report, DebiasMode mode);

}  // namespace stackpost
