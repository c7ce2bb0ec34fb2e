// Command-line front end: data generation, two-stage training, evaluation,
// dynamics, merging, benchmarking, scaling fits, and router statistics.
// Exit codes: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>
#include <iostream>

#include "molepot/scaling.hpp"
#include "molepot/sim.hpp"

using namespace molepot;

namespace {

std::string data_dir() {
#ifdef MOLEPOT_DATA_DIR
  return MOLEPOT_DATA_DIR;
#else
  return "data";
#endif
}

ElementTable load_table(const std::string& path) {
  return read_element_table(path.empty() ? data_dir() + "/element_table.json" : path);
}

void echo_config(const std::string& cmd, const nlohmann::json& resolved) {
  std::cout << "config " << cmd << " " << resolved.dump() << "\n";
}

std::vector<std::vector<AtomicSystem>> partition_by_task(const std::vector<AtomicSystem>& all,
                                                         const TaskRegistry& registry) {
  std::vector<std::vector<AtomicSystem>> per_task(registry.size());
  for (const auto& s : all) per_task[registry.index_of(s.task)].push_back(s);
  return per_task;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated integer list");
  return out;
}

SamplingPlan parse_plan(const std::string& text) {
  SamplingPlan plan;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("plan entries look like task=ratio");
    plan.ratio[item.substr(0, eq)] = std::stoi(item.substr(eq + 1));
  }
  plan.validate();
  return plan;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j{{"stage", c.stage},
                   {"c_energy", c.c_energy},
                   {"c_force", c.c_force},
                   {"max_lr", c.max_lr},
                   {"warmup_frac", c.warmup_frac},
                   {"warmup_factor", c.warmup_factor},
                   {"clip_norm", c.clip_norm},
                   {"ema_decay", c.ema_decay},
                   {"weight_decay", c.weight_decay},
                   {"max_atoms", c.max_atoms},
                   {"steps", c.steps},
                   {"val_fraction", c.val_fraction}};
  j["max_neighbors"] = c.max_neighbors ? nlohmann::json(*c.max_neighbors) : nlohmann::json();
  if (!c.c_energy_task.empty()) j["c_energy_task"] = c.c_energy_task;
  if (!c.plan.ratio.empty()) j["plan"] = c.plan.ratio;
  return j;
}

// one <stem, calculator, storage> bundle per loaded checkpoint
struct LoadedModel {
  PotentialModel model;
  ReferenceScheme scheme;
  std::string name;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel out;
  nlohmann::json ref;
  out.model = load_checkpoint(path, &ref);
  if (ref.is_null())
    throw std::runtime_error("checkpoint has no reference scheme: " + path);
  out.scheme = reference_from_json(ref);
  auto stem = path;
  if (const auto slash = stem.find_last_of('/'); slash != std::string::npos)
    stem = stem.substr(slash + 1);
  if (const auto dot = stem.find_last_of('.'); dot != std::string::npos) stem = stem.substr(0, dot);
  out.name = stem;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture-of-linear-experts interatomic potential toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global --seed/--threads may follow the subcommand

  std::uint64_t seed = 0;
  int threads = 1;
  app.add_option("--seed", seed, "global random seed")->capture_default_str();
  app.add_option("--threads", threads, "worker-thread cap for parallel sections")
      ->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a labeled synthetic dataset");
  std::string gen_task = "lj-a", gen_out = "dataset.jsonl";
  int gen_n = 100, gen_min = 2, gen_max = 16;
  gen->add_option("--task", gen_task, "oracle task tag")->capture_default_str();
  gen->add_option("--n", gen_n, "number of systems")->capture_default_str();
  gen->add_option("--min-atoms", gen_min)->capture_default_str();
  gen->add_option("--max-atoms", gen_max)->capture_default_str();
  gen->add_option("--out", gen_out, "output systems file")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "train one stage of the potential");
  std::string train_stage_name = "direct", train_config_path, train_init, train_out = "model.ckpt";
  std::string train_trace, train_table_path;
  std::vector<std::string> train_data;
  int train_steps_override = -1;
  train->add_option("--stage", train_stage_name, "direct or conservative")->capture_default_str();
  train->add_option("--config", train_config_path, "json config file");
  train->add_option("--data", train_data, "dataset files (any mix of tasks)")->required();
  train->add_option("--init", train_init, "initial checkpoint (required for conservative)");
  train->add_option("--out", train_out, "output checkpoint")->capture_default_str();
  train->add_option("--steps", train_steps_override, "override configured step count");
  train->add_option("--trace", train_trace, "write the loss trace here");
  train->add_option("--element-table", train_table_path, "element table json");
  std::string train_plan;
  train->add_option("--plan", train_plan, "sampling ratios as task=ratio,task=ratio");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on labeled data");
  std::string eval_ckpt;
  std::vector<std::string> eval_data, eval_metrics{"energy_mae", "force_mae"};
  eval_cmd->add_option("--ckpt", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--metrics", eval_metrics, "energy_mae and/or force_mae")
      ->capture_default_str();

  // md
  auto* md = app.add_subcommand("md", "NVE molecular dynamics with a conservation report");
  std::string md_ckpt, md_system, md_out;
  double md_dt = 1e-3, md_temp = 0.05, md_kref = 1.0, md_threshold = 1e-4;
  int md_steps = 1000, md_index = 0, md_rebuild = 1;
  bool md_direct = false;
  md->add_option("--ckpt", md_ckpt)->required();
  md->add_option("--system", md_system, "systems file")->required();
  md->add_option("--index", md_index, "which system in the file")->capture_default_str();
  md->add_option("--dt", md_dt)->capture_default_str();
  md->add_option("--steps", md_steps)->capture_default_str();
  md->add_option("--temperature", md_temp)->capture_default_str();
  md->add_option("--drift-threshold", md_threshold)->capture_default_str();
  md->add_option("--k-ref", md_kref, "per-atom energy scale of the drift metric")
      ->capture_default_str();
  md->add_option("--rebuild-every", md_rebuild)->capture_default_str();
  md->add_flag("--direct-forces", md_direct, "integrate the direct-force head output");
  md->add_option("--out-traj", md_out, "write the trajectory as a systems file");

  // relax
  auto* relax_cmd = app.add_subcommand("relax", "force minimization");
  std::string relax_ckpt, relax_system, relax_out;
  double relax_fmax = 1e-3;
  int relax_max_steps = 2000, relax_index = 0;
  relax_cmd->add_option("--ckpt", relax_ckpt)->required();
  relax_cmd->add_option("--system", relax_system)->required();
  relax_cmd->add_option("--index", relax_index)->capture_default_str();
  relax_cmd->add_option("--fmax", relax_fmax)->capture_default_str();
  relax_cmd->add_option("--max-steps", relax_max_steps)->capture_default_str();
  relax_cmd->add_option("--out", relax_out, "write the relaxed system here");

  // merge
  auto* merge_cmd = app.add_subcommand("merge", "pre-merge expert weights for a fixed header");
  std::string merge_ckpt, merge_species, merge_task = "lj-a", merge_out = "merged.ckpt";
  int merge_charge = 0, merge_spin = 0;
  merge_cmd->add_option("--ckpt", merge_ckpt)->required();
  merge_cmd->add_option("--species", merge_species, "comma list, e.g. 1,1,2")->required();
  merge_cmd->add_option("--charge", merge_charge)->capture_default_str();
  merge_cmd->add_option("--spin", merge_spin)->capture_default_str();
  merge_cmd->add_option("--task", merge_task)->capture_default_str();
  merge_cmd->add_option("--out", merge_out)->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "inference throughput table");
  std::vector<std::string> bench_ckpts;
  std::string bench_sizes = "32,64,128", bench_task = "lj-a";
  int bench_repeats = 5;
  bench->add_option("--ckpt", bench_ckpts)->required();
  bench->add_option("--sizes", bench_sizes)->capture_default_str();
  bench->add_option("--repeats", bench_repeats)->capture_default_str();
  bench->add_option("--task", bench_task)->capture_default_str();

  // fit-scaling
  auto* fit = app.add_subcommand("fit-scaling", "scaling-law fits over run records");
  std::string fit_records, fit_mode = "powerlaw", fit_out;
  int fit_bootstrap = 1000;
  double fit_kappa = 6.0;
  fit->add_option("--records", fit_records, "run records file (columns N D C loss tag)")->required();
  fit->add_option("--mode", fit_mode, "powerlaw or ansatz")->capture_default_str();
  fit->add_option("--bootstrap", fit_bootstrap, "bootstrap resamples (0 disables)")
      ->capture_default_str();
  fit->add_option("--kappa", fit_kappa, "flops per parameter per atom, for D* = C/(kappa N)")
      ->capture_default_str();
  fit->add_option("--out", fit_out, "also write the report here");

  // experts
  auto* experts_cmd = app.add_subcommand("experts", "mean router coefficient per element-expert pair");
  std::string experts_ckpt, experts_data, experts_out;
  experts_cmd->add_option("--ckpt", experts_ckpt)->required();
  experts_cmd->add_option("--data", experts_data)->required();
  experts_cmd->add_option("--out", experts_out, "write the usage table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      echo_config("gen-data", {{"task", gen_task},
                               {"n", gen_n},
                               {"min_atoms", gen_min},
                               {"max_atoms", gen_max},
                               {"seed", seed},
                               {"out", gen_out}});
      const auto oracles = bundled_oracles();
      const auto systems = generate_dataset(bundled_oracle(oracles, gen_task), gen_n, gen_min,
                                            gen_max, seed);
      write_systems(systems, gen_out);
      std::cout << "wrote " << systems.size() << " systems to " << gen_out << "\n";
    }

    if (train->parsed()) {
      auto file_cfg = load_stage_config(train_config_path, train_stage_name);
      file_cfg.train.stage = train_stage_name;
      if (train_steps_override > 0) file_cfg.train.steps = train_steps_override;
      if (!train_plan.empty()) file_cfg.train.plan = parse_plan(train_plan);
      file_cfg.model.direct_force_head = train_stage_name == "direct";

      echo_config("train", {{"stage", train_stage_name},
                            {"config", train_config_path},
                            {"data", train_data},
                            {"init", train_init},
                            {"out", train_out},
                            {"seed", seed},
                            {"model", model_config_to_json(file_cfg.model)},
                            {"train", train_config_to_json(file_cfg.train)}});

      const auto table = load_table(train_table_path);
      std::vector<AtomicSystem> all;
      for (const auto& path : train_data) {
        auto part = read_systems(path);
        all.insert(all.end(), part.begin(), part.end());
      }
      const auto per_task = partition_by_task(all, table.registry);
      std::vector<std::vector<AtomicSystem>> train_split(per_task.size()), val_split(per_task.size());
      for (size_t t = 0; t < per_task.size(); ++t)
        split_dataset(per_task[t], file_cfg.train.val_fraction, train_split[t], val_split[t]);

      const auto scheme = ReferenceScheme::fit(table, train_split);

      PotentialModel initial;
      if (train_stage_name == "conservative") {
        if (train_init.empty())
          throw std::runtime_error("conservative stage needs --init with a direct-stage checkpoint");
        const auto prev = load_checkpoint(train_init);
        initial = prev.cfg.direct_force_head ? to_conservative(prev) : prev;
        initial.stage = "conservative";
      } else if (!train_init.empty()) {
        initial = load_checkpoint(train_init);
      } else {
        initial = PotentialModel::random_init(file_cfg.model, seed);
      }

      const auto result = train_stage(initial, train_split, file_cfg.train, scheme, seed);
      if (!train_trace.empty()) write_trace(result.trace, train_trace);
      if (result.aborted) throw std::runtime_error("training aborted: " + result.abort_reason);

      save_checkpoint(result.ema_model, train_out, reference_to_json(scheme));
      std::cout << "final loss " << format_double(result.trace.back().total) << " over "
                << result.trace.size() << " steps\n";
      for (size_t t = 0; t < val_split.size(); ++t) {
        if (val_split[t].empty()) continue;
        const auto metrics = evaluate(result.ema_model, val_split[t], scheme, file_cfg.train);
        std::cout << "val " << table.registry.tasks[t] << " energy_mae_per_atom "
                  << format_double(metrics.energy_mae_per_atom) << " force_mae "
                  << format_double(metrics.force_mae) << " force_rms "
                  << format_double(metrics.force_rms) << "\n";
      }
      std::cout << "wrote checkpoint " << train_out << "\n";
    }

    if (eval_cmd->parsed()) {
      echo_config("eval", {{"ckpt", eval_ckpt}, {"data", eval_data}, {"metrics", eval_metrics}});
      const auto loaded = load_model(eval_ckpt);
      std::vector<AtomicSystem> all;
      for (const auto& path : eval_data) {
        auto part = read_systems(path);
        all.insert(all.end(), part.begin(), part.end());
      }
      const auto per_task = partition_by_task(all, loaded.scheme.registry());
      TrainConfig cfg = stage_defaults(loaded.model.cfg.direct_force_head ? "direct" : "conservative");
      cfg.max_neighbors = std::nullopt;
      const bool want_e = std::count(eval_metrics.begin(), eval_metrics.end(), "energy_mae") > 0;
      const bool want_f = std::count(eval_metrics.begin(), eval_metrics.end(), "force_mae") > 0;
      for (size_t t = 0; t < per_task.size(); ++t) {
        if (per_task[t].empty()) continue;
        const auto m = evaluate(loaded.model, per_task[t], loaded.scheme, cfg);
        std::cout << loaded.scheme.registry().tasks[t];
        if (want_e) std::cout << " energy_mae " << format_double(m.energy_mae_per_atom);
        if (want_f)
          std::cout << " force_mae " << format_double(m.force_mae) << " force_rms "
                    << format_double(m.force_rms);
        std::cout << "\n";
      }
    }

    if (md->parsed()) {
      echo_config("md", {{"ckpt", md_ckpt},
                         {"system", md_system},
                         {"index", md_index},
                         {"dt", md_dt},
                         {"steps", md_steps},
                         {"temperature", md_temp},
                         {"seed", seed},
                         {"direct_forces", md_direct}});
      const auto loaded = load_model(md_ckpt);
      const auto systems = read_systems(md_system);
      if (md_index < 0 || md_index >= static_cast<int>(systems.size()))
        throw std::runtime_error("system index out of range");
      MDConfig cfg;
      cfg.dt = md_dt;
      cfg.n_steps = md_steps;
      cfg.temperature = md_temp;
      cfg.seed = seed;
      cfg.rebuild_graph_every = md_rebuild;
      cfg.drift_threshold = md_threshold;
      cfg.k_ref = md_kref;
      const auto calc = Calculator::for_model(loaded.model, loaded.scheme, md_direct);
      const auto result = run_nve(calc, systems[md_index], cfg);
      if (!md_out.empty()) write_systems(result.trajectory, md_out);
      std::cout << "drift " << format_double(result.report.drift) << " threshold "
                << format_double(cfg.drift_threshold) << " conserve "
                << (result.report.pass ? "pass" : "fail") << "\n";
    }

    if (relax_cmd->parsed()) {
      echo_config("relax", {{"ckpt", relax_ckpt},
                            {"system", relax_system},
                            {"index", relax_index},
                            {"fmax", relax_fmax},
                            {"max_steps", relax_max_steps}});
      const auto loaded = load_model(relax_ckpt);
      const auto systems = read_systems(relax_system);
      if (relax_index < 0 || relax_index >= static_cast<int>(systems.size()))
        throw std::runtime_error("system index out of range");
      const auto calc = Calculator::for_model(loaded.model, loaded.scheme);
      const auto result = relax(calc, systems[relax_index], relax_max_steps, relax_fmax);
      if (!relax_out.empty()) write_systems({result.system}, relax_out);
      std::cout << "steps " << result.steps << " final_fmax " << format_double(result.final_fmax)
                << " converged " << (result.converged ? "yes" : "no") << " energy "
                << format_double(result.energy_trace.back()) << "\n";
    }

    if (merge_cmd->parsed()) {
      echo_config("merge", {{"ckpt", merge_ckpt},
                            {"species", merge_species},
                            {"charge", merge_charge},
                            {"spin", merge_spin},
                            {"task", merge_task},
                            {"out", merge_out}});
      nlohmann::json ref;
      const auto model = load_checkpoint(merge_ckpt, &ref);
      SystemHeader header{parse_int_list(merge_species), merge_charge, merge_spin, merge_task};
      const auto merged = merge_model(model, header);
      save_checkpoint(merged, merge_out, ref);
      const auto census = model.census();
      std::cout << "merged " << census.total << " total parameters down to " << census.active
                << " active\n";
    }

    if (bench->parsed()) {
      echo_config("bench", {{"ckpt", bench_ckpts},
                            {"sizes", bench_sizes},
                            {"repeats", bench_repeats},
                            {"task", bench_task}});
      std::vector<LoadedModel> models;
      for (const auto& path : bench_ckpts) models.push_back(load_model(path));
      std::vector<std::pair<std::string, Calculator>> calcs;
      for (const auto& m : models)
        calcs.push_back({m.name, Calculator::for_model(m.model, m.scheme)});
      const auto report = bench_inference(calcs, parse_int_list(bench_sizes), bench_repeats,
                                          bench_task);
      std::cout << report.to_text();
    }

    if (fit->parsed()) {
      echo_config("fit-scaling", {{"records", fit_records},
                                  {"mode", fit_mode},
                                  {"bootstrap", fit_bootstrap},
                                  {"kappa", fit_kappa},
                                  {"seed", seed},
                                  {"threads", threads}});
      const auto records = read_run_records(fit_records);
      std::ostringstream report;
      if (fit_mode == "powerlaw") {
        const auto minima = isoflop_minima(records);
        report << "C N_star loss_star status\n";
        for (const auto& m : minima) {
          report << format_double(m.flops) << ' ';
          if (m.valid)
            report << format_double(m.n_star) << ' ' << format_double(m.loss_star) << " ok\n";
          else
            report << "- - excluded(" << m.flag << ")\n";
        }
        const auto f = fit_power_laws(minima, fit_kappa);
        std::map<std::string, BootstrapBand> bands;
        if (fit_bootstrap > 0)
          bands = bootstrap(
              minima,
              [&](const std::vector<IsoflopMinimum>& s) {
                return fit_power_laws(s, fit_kappa).coefficients();
              },
              fit_bootstrap, seed, threads);
        report << "parameter value p10 p90\n";
        for (const auto& [name, value] : f.coefficients()) {
          report << name << ' ' << format_double(value);
          if (bands.count(name))
            report << " " << format_double(bands[name].p10) << " " << format_double(bands[name].p90);
          report << "\n";
        }
        report << "alpha_plus_beta " << format_double(f.alpha + f.beta) << "\n";
        report << "loss_exponent_signed " << format_double(-f.alpha_hat) << "\n";
      } else if (fit_mode == "ansatz") {
        const auto f = fit_ansatz(records, 16, seed);
        std::map<std::string, BootstrapBand> bands;
        if (fit_bootstrap > 0)
          bands = bootstrap(
              records,
              [&](const std::vector<RunRecord>& s) { return fit_ansatz(s, 1, 0, &f).coefficients(); },
              fit_bootstrap, seed, threads);
        report << "parameter value p10 p90\n";
        for (const auto& [name, value] : f.coefficients()) {
          report << name << ' ' << format_double(value);
          if (bands.count(name))
            report << " " << format_double(bands[name].p10) << " " << format_double(bands[name].p90);
          report << "\n";
        }
        report << "alpha_hat_signed " << format_double(f.alpha_hat_signed()) << "\n";
        report << "gamma " << format_double(f.gamma()) << "\n";
        report << "objective " << format_double(f.objective) << "\n";
      } else {
        throw std::runtime_error("unknown fit mode: " + fit_mode);
      }
      std::cout << report.str();
      if (!fit_out.empty()) {
        std::ofstream out(fit_out, std::ios::binary);
        out << report.str();
      }
    }

    if (experts_cmd->parsed()) {
      echo_config("experts", {{"ckpt", experts_ckpt}, {"data", experts_data}});
      const auto loaded = load_model(experts_ckpt);
      const auto systems = read_systems(experts_data);
      const auto usage = expert_usage(loaded.model, systems);
      std::cout << usage.to_text();
      if (!experts_out.empty()) {
        std::ofstream out(experts_out, std::ios::binary);
        out << usage.to_text();
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
