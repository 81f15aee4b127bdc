#include "stackpost/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "stackpost/errors.hpp"

namespace stackpost {

namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  std::atomic<int> next{0};
  auto body = [&] {
    for (int i = next++; i < n; i = next++) fn(i);
  };
  const int w = std::max(1, std::min(workers, n));
  std::vector<std::thread> pool;
  for (int t = 1; t < w; ++t) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
}

FitConfig fit_config(const ExperimentConfig& cfg, const TargetProblem& target, std::uint64_t seed) {
  FitConfig fc;
  fc.K_target = cfg.K_target;
  fc.budget = cfg.budget;
  fc.seed = seed;
  fc.noise_sigma = target.noise_sigma();
  return fc;
}

std::uint64_t attempt_seed(std::uint64_t master, int attempt) {
  return derive_seed(master, 0x706f6f6c00000000ULL + static_cast<std::uint64_t>(attempt));
}

void write_samples_csv(const Matrix& samples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write samples file " + path.string());
  out.precision(17);
  for (Eigen::Index d = 0; d < samples.cols(); ++d) out << (d ? "," : "") << "theta" << d;
  out << '\n';
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    for (Eigen::Index d = 0; d < samples.cols(); ++d) out << (d ? "," : "") << samples(i, d);
    out << '\n';
  }
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::all_weights:
      return "all-weights";
    case Method::posterior_only:
      return "posterior-only";
    case Method::naive:
      return "naive";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  if (name == "all-weights" || name == "svbmc") return Method::all_weights;
  if (name == "posterior-only") return Method::posterior_only;
  if (name == "naive" || name == "ns") return Method::naive;
  throw ParseError("unknown stacking mode '" + name + "'");
}

std::string to_string(DebiasMode m) {
  switch (m) {
    case DebiasMode::none:
      return "none";
    case DebiasMode::run_median:
      return "run-median";
    case DebiasMode::component_median:
      return "component-median";
  }
  return "unknown";
}

DebiasMode debias_from_string(const std::string& name) {
  if (name == "none") return DebiasMode::none;
  if (name == "run-median") return DebiasMode::run_median;
  if (name == "component-median") return DebiasMode::component_median;
  throw ParseError("unknown debias mode '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (pool_size < 1) throw ArgumentError("pool size must be positive");
  if (replicates < 1) throw ArgumentError("replicates must be at least 1");
  if (m_list.empty()) throw ArgumentError("M list is empty");
  for (int m : m_list) {
    if (m < 1 || m > pool_size) {
      throw ArgumentError("M = " + std::to_string(m) + " is outside [1, pool size " + std::to_string(pool_size) + "]");
    }
  }
  if (methods.empty()) throw ArgumentError("no stacking mode selected");
  if (noise_sigma < 0.0) throw ArgumentError("noise sigma must be nonnegative");
}

json config_to_json(const ExperimentConfig& cfg) {
  json methods = json::array();
  for (Method m : cfg.methods) methods.push_back(to_string(m));
  json j{{"benchmark", cfg.benchmark},
         {"noise_sigma", cfg.noise_sigma},
         {"target_seed", cfg.target_seed},
         {"pool_size", cfg.pool_size},
         {"m_list", cfg.m_list},
         {"replicates", cfg.replicates},
         {"methods", methods},
         {"debias", to_string(cfg.debias)},
         {"seed", cfg.seed},
         {"K_target", cfg.K_target},
         {"budget", cfg.budget},
         {"bootstrap_resamples", cfg.bootstrap_resamples},
         {"sample_rows", cfg.sample_rows},
         {"stack",
          {{"S_optim", cfg.stack.S_optim},
           {"S_final", cfg.stack.S_final},
           {"learning_rate", cfg.stack.learning_rate},
           {"max_iterations", cfg.stack.max_iterations},
           {"window", cfg.stack.window},
           {"tolerance", cfg.stack.tolerance},
           {"refresh_samples", cfg.stack.refresh_samples}}}};
  if (cfg.runs_dir) j["runs_dir"] = cfg.runs_dir->string();
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  try {
    cfg.benchmark = j.at("benchmark").get<std::string>();
    cfg.noise_sigma = j.at("noise_sigma").get<double>();
    cfg.target_seed = j.at("target_seed").get<std::uint64_t>();
    cfg.pool_size = j.at("pool_size").get<int>();
    cfg.m_list = j.at("m_list").get<std::vector<int>>();
    cfg.replicates = j.at("replicates").get<int>();
    cfg.methods.clear();
    for (const auto& m : j.at("methods")) cfg.methods.push_back(method_from_string(m.get<std::string>()));
    cfg.debias = debias_from_string(j.at("debias").get<std::string>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.K_target = j.at("K_target").get<int>();
    cfg.budget = j.at("budget").get<int>();
    cfg.bootstrap_resamples = j.at("bootstrap_resamples").get<int>();
    cfg.sample_rows = j.at("sample_rows").get<int>();
    const json& s = j.at("stack");
    cfg.stack.S_optim = s.at("S_optim").get<int>();
    cfg.stack.S_final = s.at("S_final").get<int>();
    cfg.stack.learning_rate = s.at("learning_rate").get<double>();
    cfg.stack.max_iterations = s.at("max_iterations").get<int>();
    cfg.stack.window = s.at("window").get<int>();
    cfg.stack.tolerance = s.at("tolerance").get<double>();
    cfg.stack.refresh_samples = s.at("refresh_samples").get<bool>();
    if (j.contains("runs_dir")) cfg.runs_dir = j.at("runs_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  return cfg;
}

int worker_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("STACKPOST_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1U, std::thread::hardware_concurrency());
}

PoolReport build_run_pool(const ExperimentConfig& cfg, const TargetProblem& target) {
  PoolReport rep;
  if (cfg.runs_dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(*cfg.runs_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (std::size_t i = 0; i < files.size() && static_cast<int>(rep.runs.size()) < cfg.pool_size; ++i) {
      ++rep.attempts;
      try {
        RunOutput r = import_run(files[i]);
        if (r.posterior.dimension() != target.dimension()) {
          throw ValidationError("dimension " + std::to_string(r.posterior.dimension()) + " does not match target");
        }
        if (!r.converged) {
          ++rep.not_converged;
        } else if (!passes_filter(r)) {
          ++rep.high_variance;
        } else {
          rep.runs.push_back(std::move(r));
          rep.seeds.push_back(i);
        }
      } catch (const std::exception& e) {
        ++rep.errors;
        rep.warnings.push_back("skipped " + files[i].filename().string() + ": " + e.what());
      }
    }
    return rep;
  }

  const int cap = 5 * cfg.pool_size;
  const int workers = worker_count(cfg.workers);
  while (static_cast<int>(rep.runs.size()) < cfg.pool_size && rep.attempts < cap) {
    const int batch = std::min(std::max(workers, cfg.pool_size - static_cast<int>(rep.runs.size())),
                               cap - rep.attempts);
    std::vector<std::optional<RunOutput>> out(static_cast<std::size_t>(batch));
    std::vector<std::string> err(static_cast<std::size_t>(batch));
    const int first = rep.attempts;
    parallel_for(batch, workers, [&](int i) {
      try {
        out[static_cast<std::size_t>(i)] =
            run_local_fit(target, fit_config(cfg, target, attempt_seed(cfg.seed, first + i)));
      } catch (const std::exception& e) {
        err[static_cast<std::size_t>(i)] = e.what();
      }
    });
    for (int i = 0; i < batch && static_cast<int>(rep.runs.size()) < cfg.pool_size; ++i) {
      ++rep.attempts;
      auto& r = out[static_cast<std::size_t>(i)];
      if (!r) {
        ++rep.errors;
        rep.warnings.push_back("fit " + std::to_string(first + i) + " failed: " + err[static_cast<std::size_t>(i)]);
      } else if (!r->converged) {
        ++rep.not_converged;
      } else if (!passes_filter(*r)) {
        ++rep.high_variance;
      } else {
        rep.runs.push_back(std::move(*r));
        rep.seeds.push_back(attempt_seed(cfg.seed, first + i));
      }
    }
  }
  if (static_cast<int>(rep.runs.size()) < cfg.pool_size) {
    throw FitError("run pool unreachable: " + std::to_string(rep.runs.size()) + " of " +
                   std::to_string(cfg.pool_size) + " after " + std::to_string(rep.attempts) + " attempts (" +
                   std::to_string(rep.not_converged) + " not converged, " + std::to_string(rep.high_variance) +
                   " with J_kk >= 5, " + std::to_string(rep.errors) + " errors)");
  }
  return rep;
}

std::vector<int> sample_replicate(int pool_size, int M, std::uint64_t seed) {
  if (M < 1 || M > pool_size) throw ArgumentError("sample_replicate: M outside [1, pool size]");
  std::vector<int> idx(static_cast<std::size_t>(pool_size));
  for (int i = 0; i < pool_size; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed, 0x7265706cULL);
  for (int i = 0; i < M; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(pool_size - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(M));
  return idx;
}

std::vector<ResultRow> score_single_runs(const std::vector<RunOutput>& runs, const TargetProblem& target) {
  std::vector<ResultRow> rows;
  const GroundTruth& gt = target.ground_truth();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const StackedPosterior sp = naive_stack({runs[i]});
    rows.push_back({target.name(), "single", 1, static_cast<int>(i), runs[i].elbo, delta_lml(runs[i].elbo, gt),
                    mmtv(sp, gt), gskl(sp, gt)});
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const TargetProblem& target, PoolReport pool) {
  cfg.validate();
  const int pool_n = static_cast<int>(pool.runs.size());
  for (int m : cfg.m_list) {
    if (m > pool_n) throw ArgumentError("M = " + std::to_string(m) + " exceeds the run pool");
  }
  const GroundTruth& gt = target.ground_truth();
  struct Task {
    int M, replicate;
    Method method;
  };
  std::vector<Task> tasks;
  for (int m : cfg.m_list)
    for (int r = 0; r < cfg.replicates; ++r)
      for (Method meth : cfg.methods) tasks.push_back({m, r, meth});

  std::vector<ResultRow> rows(tasks.size());
  std::vector<ReplicateDetail> details(tasks.size());
  std::vector<std::optional<Matrix>> samples(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), worker_count(cfg.workers), [&](int ti) {
    const Task& t = tasks[static_cast<std::size_t>(ti)];
    const std::uint64_t rep_seed =
        derive_seed(cfg.seed, (static_cast<std::uint64_t>(t.M) << 32) + static_cast<std::uint64_t>(t.replicate));
    ResultRow& row = rows[static_cast<std::size_t>(ti)];
    ReplicateDetail& det = details[static_cast<std::size_t>(ti)];
    row = {target.name(), to_string(t.method), t.M, t.replicate, kNaN, kNaN, kNaN, kNaN};
    det.method = row.method;
    det.M = t.M;
    det.replicate = t.replicate;
    try {
      det.run_indices = sample_replicate(pool_n, t.M, rep_seed);
      std::vector<RunOutput> chosen;
      det.max_run_elbo = -std::numeric_limits<double>::infinity();
      for (int i : det.run_indices) {
        chosen.push_back(pool.runs[static_cast<std::size_t>(i)]);
        det.max_run_elbo = std::max(det.max_run_elbo, chosen.back().elbo);
      }
      StackConfig sc = cfg.stack;
      sc.seed = derive_seed(rep_seed, 1);
      std::optional<StackedPosterior> sp;
      double entropy = 0.0;
      if (t.method == Method::naive) {
        sp = naive_stack(chosen);
        Rng rng(sc.seed, 0x66696e616cULL);
        entropy = entropy_mc(*sp, sc.S_final, rng);
        det.converged = true;
      } else {
        sc.mode = t.method == Method::posterior_only ? StackMode::posterior_only : StackMode::all_weights;
        StackResult res = optimize(chosen, sc);
        entropy = res.entropy;
        det.iterations = res.iterations;
        det.converged = res.converged;
        sp = std::move(res.posterior);
      }
      det.debias = capped_elbo(*sp, chosen, entropy);
      det.elbo_uncapped = det.debias.E_stacked + entropy;
      row.elbo = reported_elbo(det.debias, cfg.debias);
      row.delta_lml = delta_lml(row.elbo, gt);
      row.mmtv = mmtv(*sp, gt);
      row.gskl = gskl(*sp, gt);
      if (t.replicate == 0 && cfg.sample_rows > 0) {
        Rng rng(rep_seed, 0x73616d70ULL);
        samples[static_cast<std::size_t>(ti)] = sp->sample(cfg.sample_rows, rng);
      }
    } catch (const std::exception& e) {
      det.error = e.what();
    }
  });

  ExperimentResult result;
  std::vector<ResultRow> all = score_single_runs(pool.runs, target);
  all.insert(all.end(), rows.begin(), rows.end());
  result.rows = std::move(all);
  result.details = std::move(details);
  result.summary = bootstrap(result.rows, cfg.bootstrap_resamples, derive_seed(cfg.seed, 0x73756d6dULL));

  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    write_results_csv(result.rows, cfg.out / "results.csv");
    write_summary_csv(result.summary, cfg.out / "summary.csv");
    {
      std::ofstream out(cfg.out / "details.csv");
      out.precision(17);
      out << "method,M,replicate,elbo_uncapped,E_stacked,E_median,I_median,elbo_capped_E,elbo_capped_I,"
             "max_run_elbo,iterations,converged,error\n";
      for (const auto& d : result.details) {
        out << d.method << ',' << d.M << ',' << d.replicate << ',' << d.elbo_uncapped << ',' << d.debias.E_stacked
            << ',' << d.debias.E_median << ',' << d.debias.I_median << ',' << d.debias.elbo_capped_E << ','
            << d.debias.elbo_capped_I << ',' << d.max_run_elbo << ',' << d.iterations << ',' << d.converged << ",\""
            << d.error << "\"\n";
      }
    }
    const auto sample_dir = cfg.out / "samples";
    std::filesystem::create_directories(sample_dir);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (!samples[i]) continue;
      write_samples_csv(*samples[i], sample_dir / (to_string(tasks[i].method) + "_M" + std::to_string(tasks[i].M) + ".csv"));
    }
    json manifest = config_to_json(cfg);
    manifest["tool"] = "stackpost";
    manifest["version"] = "1.0.0";
    manifest["pool"] = {{"attempts", pool.attempts},
                        {"kept", pool.runs.size()},
                        {"not_converged", pool.not_converged},
                        {"high_variance", pool.high_variance},
                        {"errors", pool.errors},
                        {"fit_seeds", pool.seeds},
                        {"warnings", pool.warnings}};
    json rep_seeds = json::array();
    for (int m : cfg.m_list) {
      for (int r = 0; r < cfg.replicates; ++r) {
        const std::uint64_t s =
            derive_seed(cfg.seed, (static_cast<std::uint64_t>(m) << 32) + static_cast<std::uint64_t>(r));
        rep_seeds.push_back({{"M", m}, {"replicate", r}, {"seed", s}, {"stack_seed", derive_seed(s, 1)}});
      }
    }
    manifest["replicate_seeds"] = rep_seeds;
    std::ofstream(cfg.out / "manifest.json") << manifest.dump(2) << '\n';
  }
  result.pool = std::move(pool);
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const TargetProblem target = build_target(cfg.benchmark, cfg.target_seed, cfg.noise_sigma);
  PoolReport pool = build_run_pool(cfg, target);
  return run_experiment(cfg, target, std::move(pool));
}

}  // namespace stackpost
