#include "stackpost/debias.hpp"

#include <algorithm>

#include "stackpost/errors.hpp"

namespace stackpost {

double e_stacked(const StackedPosterior& sp) { return sp.weights().dot(sp.I_hat()); }

double cap_run_median(const std::vector<RunOutput>& runs) {
  if (runs.empty()) throw ArgumentError("cap_run_median: no runs");
  std::vector<double> e;
  for (const RunOutput& r : runs) e.push_back(r.expected_log_joint());
  return median(std::move(e));
}

double cap_component_median(const std::vector<RunOutput>& runs) {
  if (runs.empty()) throw ArgumentError("cap_component_median: no runs");
  std::vector<double> all;
  for (const RunOutput& r : runs) all.insert(all.end(), r.I_hat.begin(), r.I_hat.end());
  return median(std::move(all));
}

DebiasReport capped_elbo(const StackedPosterior& sp, const std::vector<RunOutput>& runs, double entropy) {
  DebiasReport rep;
  rep.E_stacked = e_stacked(sp);
  rep.E_median = cap_run_median(runs);
  rep.I_median = cap_component_median(runs);
  rep.entropy_used = entropy;
  rep.elbo_capped_E = std::min(rep.E_stacked, rep.E_median) + entropy;
  rep.elbo_capped_I = std::min(rep.E_stacked, rep.I_median) + entropy;
  return rep;
}

DebiasReport capped_elbo(const StackedPosterior& sp, const std::vector<RunOutput>& runs, int S, Rng& rng) {
  return capped_elbo(sp, runs, entropy_mc(sp, S, rng));
}

double reported_elbo(const DebiasReport& report, DebiasMode mode) {
  switch (mode) {
    case DebiasMode::run_median:
      return report.elbo_capped_E;
    case DebiasMode::component_median:
      return report.elbo_capped_I;
    case DebiasMode::none:
      break;
  }
  return report.E_stacked + report.entropy_used;
}

}  // namespace stackpost
