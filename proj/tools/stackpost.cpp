#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stackpost/errors.hpp"
#include "stackpost/harness.hpp"

using namespace stackpost;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

std::vector<Method> parse_methods(const std::string& s) {
  std::vector<Method> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(method_from_string(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stacking of local variational posteriors"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  std::string m_list, modes = "all-weights,naive", debias = "none", out, runs_dir, manifest;
  int k_target = 50;
  int budget = 0;

  auto add_target = [&](CLI::App* c) {
    c->add_option("--benchmark", cfg.benchmark, "gmm or ring");
    c->add_option("--noise-sigma", cfg.noise_sigma, "std of log-joint noise");
    c->add_option("--target-seed", cfg.target_seed, "seed of the GMM component means");
    c->add_option("--seed", cfg.seed, "master seed");
  };

  auto* fit = app.add_subcommand("fit", "run one local fit and write a run file");
  add_target(fit);
  fit->add_option("--out", out, "output run file")->required();
  fit->add_option("--k-target", k_target, "mixture components");
  fit->add_option("--budget", budget, "log-joint evaluations (0 = default)");

  auto* imp = app.add_subcommand("import", "validate and filter a directory of run files");
  imp->add_option("--runs-dir", runs_dir, "directory of run files")->required();

  auto* stack = app.add_subcommand("stack", "stack the runs of a directory");
  stack->add_option("--runs-dir", runs_dir, "directory of run files")->required();
  stack->add_option("--mode", modes, "all-weights, posterior-only or naive");
  stack->add_option("--debias", debias, "none, run-median or component-median");
  stack->add_option("--seed", cfg.seed, "stacking seed");
  stack->add_option("--out", out, "output directory for the trace and samples");

  auto* score = app.add_subcommand("score", "score run files against a benchmark");
  add_target(score);
  score->add_option("--runs-dir", runs_dir, "directory of run files")->required();

  auto* exp = app.add_subcommand("experiment", "full protocol: pool, stack, debias, score, bootstrap");
  add_target(exp);
  exp->add_option("--pool-size", cfg.pool_size, "runs in the pool");
  exp->add_option("--m-list", m_list, "comma-separated M values");
  exp->add_option("--replicates", cfg.replicates, "replicates per M");
  exp->add_option("--mode", modes, "comma-separated stacking modes");
  exp->add_option("--debias", debias, "none, run-median or component-median");
  exp->add_option("--out", out, "output directory")->required();
  exp->add_option("--runs-dir", runs_dir, "import runs instead of fitting");
  exp->add_option("--k-target", k_target, "mixture components per fit");
  exp->add_option("--budget", budget, "log-joint evaluations per fit (0 = default)");
  exp->add_option("--manifest", manifest, "replay the configuration of a manifest");

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.K_target = k_target;
    cfg.budget = budget;
    if (!runs_dir.empty()) cfg.runs_dir = runs_dir;
    cfg.debias = debias_from_string(debias);
    cfg.methods = parse_methods(modes);

    if (*fit) {
      const TargetProblem target = build_target(cfg.benchmark, cfg.target_seed, cfg.noise_sigma);
      FitConfig fc;
      fc.K_target = k_target;
      fc.budget = budget;
      fc.seed = cfg.seed;
      const RunOutput run = run_local_fit(target, fc);
      export_run(run, out);
      std::cout << "elbo " << run.elbo << " converged " << run.converged << " evaluations "
                << run.diagnostics.evaluations << " max_J " << run.J.diagonal().maxCoeff() << '\n';
    } else if (*imp) {
      int kept = 0, bad = 0;
      for (const auto& e : std::filesystem::directory_iterator(runs_dir)) {
        if (e.path().extension() != ".json") continue;
        try {
          const RunOutput r = import_run(e.path());
          const bool pass = passes_filter(r);
          kept += pass;
          std::cout << e.path().filename().string() << " K=" << r.size() << " elbo=" << r.elbo
                    << (pass ? " kept" : " filtered") << '\n';
        } catch (const std::exception& ex) {
          ++bad;
          std::cerr << "warning: skipped " << e.path().filename().string() << ": " << ex.what() << '\n';
        }
      }
      std::cout << kept << " runs pass the filter, " << bad << " unreadable\n";
    } else if (*stack) {
      std::vector<RunOutput> runs;
      for (const auto& e : std::filesystem::directory_iterator(runs_dir)) {
        if (e.path().extension() == ".json") runs.push_back(import_run(e.path()));
      }
      if (runs.empty()) throw ArgumentError("no run files in " + runs_dir);
      runs = filter_runs(runs);
      if (runs.empty()) throw ArgumentError("no run passes the filter");
      const Method method = cfg.methods.front();
      StackConfig sc;
      sc.seed = cfg.seed;
      sc.mode = method == Method::posterior_only ? StackMode::posterior_only : StackMode::all_weights;
      std::optional<StackedPosterior> sp;
      double entropy = 0.0;
      if (method == Method::naive) {
        sp = naive_stack(runs);
        Rng rng(sc.seed, 0x66696e616cULL);
        entropy = entropy_mc(*sp, sc.S_final, rng);
      } else {
        StackResult res = optimize(runs, sc);
        entropy = res.entropy;
        if (!out.empty()) {
          std::filesystem::create_directories(out);
          write_trace_csv(res.trace, std::filesystem::path(out) / "trace.csv");
        }
        sp = std::move(res.posterior);
      }
      const DebiasReport rep = capped_elbo(*sp, runs, entropy);
      std::cout << "runs " << runs.size() << " entries " << sp->size() << '\n'
                << "elbo " << reported_elbo(rep, cfg.debias) << " (uncapped " << rep.E_stacked + entropy
                << ", E_median cap " << rep.elbo_capped_E << ", I_median cap " << rep.elbo_capped_I << ")\n";
    } else if (*score) {
      const TargetProblem target = build_target(cfg.benchmark, cfg.target_seed, cfg.noise_sigma);
      std::vector<RunOutput> runs;
      for (const auto& e : std::filesystem::directory_iterator(runs_dir)) {
        if (e.path().extension() == ".json") runs.push_back(import_run(e.path()));
      }
      std::cout << "run,elbo,delta_lml,mmtv,gskl\n";
      for (const auto& row : score_single_runs(runs, target)) {
        std::cout << row.replicate << ',' << row.elbo << ',' << row.delta_lml << ',' << row.mmtv << ',' << row.gskl
                  << '\n';
      }
    } else if (*exp) {
      if (!manifest.empty()) {
        std::ifstream in(manifest);
        if (!in) throw ArgumentError("cannot read manifest " + manifest);
        const std::filesystem::path keep_out = out;
        cfg = config_from_json(nlohmann::json::parse(in));
        cfg.out = keep_out;
      } else {
        if (!m_list.empty()) cfg.m_list = parse_int_list(m_list);
        cfg.out = out;
      }
      const TargetProblem target = build_target(cfg.benchmark, cfg.target_seed, cfg.noise_sigma);
      PoolReport pool = build_run_pool(cfg, target);
      for (const auto& w : pool.warnings) std::cerr << "warning: " << w << '\n';
      std::cerr << "pool: " << pool.runs.size() << " runs from " << pool.attempts << " attempts\n";
      const ExperimentResult res = run_experiment(cfg, target, std::move(pool));
      for (const auto& s : res.summary) {
        if (s.metric == "mmtv" || s.metric == "gskl") {
          std::cout << s.method << " M=" << s.M << ' ' << s.metric << " median " << s.ci.median << " ["
                    << s.ci.lower << ", " << s.ci.upper << "]\n";
        }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
