#pragma once

// Two-stage training. Stage "direct" fits energies plus the direct-force
// head; stage "conservative" drops that head and fits energies plus
// autograd forces, which requires the recorded-gradient path of the tape.
// Optimizer is decoupled-weight-decay Adam with warmup->cosine schedule,
// global-norm clipping, and an EMA shadow used for evaluation.

#include "molepot/data.hpp"
#include "molepot/potential.hpp"

namespace molepot {

struct TrainConfig {
  std::string stage = "direct";  // direct | conservative
  double c_energy = 10.0;
  double c_force = 30.0;
  std::map<std::string, double> c_energy_task;  // per-task override
  double max_lr = 8e-4;
  double warmup_frac = 0.01;
  double warmup_factor = 0.2;
  double clip_norm = 100.0;
  double ema_decay = 0.999;
  double weight_decay = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_atoms = 48;
  std::optional<int> max_neighbors = 30;
  int steps = 1000;
  double val_fraction = 0.1;
  SamplingPlan plan;  // defaults to ratio 1 for every present task

  void validate() const {
    if (stage != "direct" && stage != "conservative")
      throw std::invalid_argument("stage must be direct or conservative");
    if (c_energy < 0 || c_force < 0) throw std::invalid_argument("loss coefficients must be >= 0");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
      throw std::invalid_argument("warmup fraction must lie in [0,1)");
    if (ema_decay <= 0.0 || ema_decay >= 1.0)
      throw std::invalid_argument("EMA decay must lie in (0,1)");
    if (steps < 1 || max_atoms < 1) throw std::invalid_argument("steps/max_atoms must be positive");
  }

  double energy_coeff(const std::string& task) const {
    const auto it = c_energy_task.find(task);
    return it == c_energy_task.end() ? c_energy : it->second;
  }
};

inline TrainConfig stage_defaults(const std::string& stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  if (stage == "conservative") {
    cfg.max_lr = 4e-4;
    cfg.c_energy = 20.0;
    cfg.c_force = 2.0;
    cfg.max_neighbors = std::nullopt;  // effectively infinite in stage 2
  }
  return cfg;
}

// Linear warmup from warmup_factor*max_lr to max_lr, then cosine to zero.
inline double lr_at(const TrainConfig& cfg, std::int64_t step) {
  const std::int64_t warm = std::llround(cfg.warmup_frac * cfg.steps);
  if (step < warm) {
    const double t = static_cast<double>(step) / static_cast<double>(warm);
    return cfg.max_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * t);
  }
  const double denom = std::max<std::int64_t>(1, cfg.steps - warm);
  const double t = static_cast<double>(step - warm) / static_cast<double>(denom);
  return cfg.max_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
}

struct TrainState {
  std::vector<double> params, adam_m, adam_v, ema;
  std::int64_t step = 0;

  static TrainState init(const PotentialModel& model) {
    TrainState s;
    s.params = model.params;
    s.adam_m.assign(model.params.size(), 0.0);
    s.adam_v.assign(model.params.size(), 0.0);
    s.ema = model.params;
    return s;
  }
};

inline nlohmann::json train_state_to_json(const TrainState& s) {
  return nlohmann::json{{"params", s.params}, {"adam_m", s.adam_m}, {"adam_v", s.adam_v},
                        {"ema", s.ema},       {"step", s.step}};
}

inline TrainState train_state_from_json(const nlohmann::json& j) {
  TrainState s;
  s.params = j.at("params").get<std::vector<double>>();
  s.adam_m = j.at("adam_m").get<std::vector<double>>();
  s.adam_v = j.at("adam_v").get<std::vector<double>>();
  s.ema = j.at("ema").get<std::vector<double>>();
  s.step = j.at("step").get<std::int64_t>();
  return s;
}

struct LossBreakdown {
  double total = 0.0;
  double energy_term = 0.0;
  double force_term = 0.0;
  int n_systems = 0;
  int n_atoms = 0;
};

namespace detail {

inline void check_finite(double x, const char* term) {
  if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite ") + term + " in loss");
}

}  // namespace detail

// Batch loss with per-atom averaging: the energy term averages squared
// per-atom energy errors over systems, the force term averages squared
// component errors over all atoms in the batch. Targets are referenced and
// normalized through `scheme`. When `grad_out` is given, parameter
// gradients are accumulated into it (flat layout of the model).
inline LossBreakdown loss(const PotentialModel& model, const std::vector<AtomicSystem>& batch,
                          const TrainConfig& cfg, const ReferenceScheme& scheme,
                          std::vector<double>* grad_out = nullptr) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  LossBreakdown out;
  out.n_systems = static_cast<int>(batch.size());
  for (const auto& s : batch) out.n_atoms += static_cast<int>(s.size());
  const double e_scale = 1.0 / out.n_systems;
  const double f_scale = cfg.c_force / (3.0 * out.n_atoms);

  for (const auto& sys : batch) {
    if (!sys.labels) throw std::invalid_argument("loss: batch system lacks labels");
    const int n = static_cast<int>(sys.size());
    const auto graph = build_graph(sys, model.cfg.cutoff, cfg.max_neighbors);

    Tape tape;
    ForwardOptions opt;
    opt.train_mode = grad_out != nullptr;
    opt.direct_forces = cfg.stage == "direct";
    const auto fw = model.forward(tape, sys, graph, opt);

    const double e_target = scheme.target_energy(sys, sys.labels->energy);
    const auto e_diff =
        tape.scale(tape.sub(fw.energy, tape.scalar_constant(e_target)), 1.0 / n);
    const auto e_sq = tape.mul(e_diff, e_diff);

    Matrix f_target(n, 3);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d)
        f_target(i, d) = scheme.target_force_component(sys.labels->forces[i][d]);
    Tape::NodeId f_pred;
    if (cfg.stage == "direct") {
      f_pred = fw.direct_forces;
    } else {
      const auto grads = tape.grad_nodes(fw.energy, {fw.positions});
      f_pred = tape.scale(grads[0], -1.0);
    }
    const auto f_diff = tape.sub(f_pred, tape.constant(std::move(f_target)));
    const auto f_sse = tape.sum_all(tape.mul(f_diff, f_diff));

    const double ce = cfg.energy_coeff(sys.task);
    const auto sys_loss =
        tape.add(tape.scale(e_sq, ce * e_scale), tape.scale(f_sse, f_scale));

    const double e_term = ce * e_scale * tape.value(e_sq).v[0];
    const double f_term = f_scale * tape.value(f_sse).v[0];
    detail::check_finite(e_term, "energy term");
    detail::check_finite(f_term, "force term");
    out.energy_term += e_term;
    out.force_term += f_term;

    if (grad_out) {
      tape.backward(sys_loss);
      const auto& segs = model.segments();
      for (size_t i = 0; i < segs.size(); ++i) {
        const Matrix a = tape.adjoint(fw.seg_nodes[i]);
        double* dst = grad_out->data() + segs[i].offset;
        for (size_t k = 0; k < a.size(); ++k) dst[k] += a.v[k];
      }
    }
  }
  out.total = out.energy_term + out.force_term;
  return out;
}

// Model + schedule bundle as stored in a json config file. Absent fields
// keep the stage defaults.
struct StageConfig {
  ModelConfig model;
  TrainConfig train;
};

inline StageConfig stage_config_from_json(const nlohmann::json& j, const std::string& stage) {
  StageConfig out;
  out.model.tasks = default_task_registry().tasks;
  out.train = stage_defaults(stage);
  if (j.contains("model")) {
    const auto& m = j["model"];
    auto& c = out.model;
    c.n_species = m.value("n_species", c.n_species);
    c.channels = m.value("channels", c.channels);
    c.blocks = m.value("blocks", c.blocks);
    c.experts = m.value("experts", c.experts);
    c.cutoff = m.value("cutoff", c.cutoff);
    c.n_rbf = m.value("n_rbf", c.n_rbf);
    c.router_hidden = m.value("router_hidden", c.router_hidden);
    c.max_charge = m.value("max_charge", c.max_charge);
    c.max_spin = m.value("max_spin", c.max_spin);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    auto& c = out.train;
    c.c_energy = t.value("c_energy", c.c_energy);
    c.c_force = t.value("c_force", c.c_force);
    if (t.contains("c_energy_task"))
      c.c_energy_task = t["c_energy_task"].get<std::map<std::string, double>>();
    c.max_lr = t.value("max_lr", c.max_lr);
    c.warmup_frac = t.value("warmup_frac", c.warmup_frac);
    c.warmup_factor = t.value("warmup_factor", c.warmup_factor);
    c.clip_norm = t.value("clip_norm", c.clip_norm);
    c.ema_decay = t.value("ema_decay", c.ema_decay);
    c.weight_decay = t.value("weight_decay", c.weight_decay);
    c.max_atoms = t.value("max_atoms", c.max_atoms);
    if (t.contains("max_neighbors")) {
      if (t["max_neighbors"].is_null())
        c.max_neighbors = std::nullopt;
      else
        c.max_neighbors = t["max_neighbors"].get<int>();
    }
    c.steps = t.value("steps", c.steps);
    c.val_fraction = t.value("val_fraction", c.val_fraction);
    if (t.contains("plan"))
      for (const auto& [task, ratio] : t["plan"].items()) c.plan.ratio[task] = ratio.get<int>();
  }
  return out;
}

inline StageConfig load_stage_config(const std::string& path, const std::string& stage) {
  if (path.empty()) return stage_config_from_json(nlohmann::json::object(), stage);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  in >> j;
  return stage_config_from_json(j, stage);
}

// Scales the gradient so its global L2 norm does not exceed `threshold`;
// returns the post-clip norm.
inline double clip_gradient(std::vector<double>& grad, double threshold) {
  double norm_sq = 0.0;
  for (double g : grad) norm_sq += g * g;
  const double gnorm = std::sqrt(norm_sq);
  if (gnorm > threshold) {
    const double f = threshold / gnorm;
    for (double& g : grad) g *= f;
    return threshold;
  }
  return gnorm;
}

struct TraceRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double energy_term = 0.0;
  double force_term = 0.0;
};

struct TrainResult {
  PotentialModel model;      // final raw parameters
  PotentialModel ema_model;  // EMA shadow, used for evaluation
  std::vector<TraceRow> trace;
  bool aborted = false;
  std::string abort_reason;
};

inline void write_trace(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open trace file: " + path);
  out << "step lr total energy_term force_term\n";
  for (const auto& r : trace)
    out << r.step << ' ' << format_double(r.lr) << ' ' << format_double(r.total) << ' '
        << format_double(r.energy_term) << ' ' << format_double(r.force_term) << '\n';
}

// Deterministic split: the trailing fraction of each dataset is validation.
inline void split_dataset(const std::vector<AtomicSystem>& all, double val_fraction,
                          std::vector<AtomicSystem>& train, std::vector<AtomicSystem>& val) {
  const size_t n_val = static_cast<size_t>(std::ceil(val_fraction * all.size()));
  const size_t n_train = all.size() > n_val ? all.size() - n_val : 0;
  train.assign(all.begin(), all.begin() + n_train);
  val.assign(all.begin() + n_train, all.end());
}

// One optimization stage over interleaved per-task datasets. Deterministic
// given the seed. Aborts (with the trace so far) if the loss sits above
// 1000x its initial value for 100 consecutive steps.
inline TrainResult train_stage(const PotentialModel& initial,
                               const std::vector<std::vector<AtomicSystem>>& train_per_task,
                               const TrainConfig& cfg, const ReferenceScheme& scheme,
                               std::uint64_t seed) {
  cfg.validate();
  if ((cfg.stage == "direct") != initial.cfg.direct_force_head)
    throw std::invalid_argument("stage " + cfg.stage + " does not match model head layout");

  std::vector<std::string> tasks;
  std::vector<size_t> sizes;
  for (const auto& d : train_per_task) {
    if (d.empty()) continue;
    tasks.push_back(d.front().task);
    sizes.push_back(d.size());
  }
  std::vector<const std::vector<AtomicSystem>*> datasets;
  for (const auto& d : train_per_task)
    if (!d.empty()) datasets.push_back(&d);

  SamplingPlan plan = cfg.plan;
  if (plan.ratio.empty())
    for (const auto& t : tasks) plan.ratio[t] = 1;
  TaskInterleaver stream(tasks, sizes, plan, seed);

  TrainState state = TrainState::init(initial);
  PotentialModel model = initial;
  std::vector<double> grad(state.params.size());
  TrainResult result;
  result.trace.reserve(cfg.steps);

  double initial_loss = 0.0;
  int divergent_streak = 0;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    // fill the batch up to the atom bound, at least one system
    std::vector<AtomicSystem> batch;
    int atoms = 0;
    while (true) {
      const auto item = stream.next();
      const auto& sys = (*datasets[item.task])[item.index];
      if (!batch.empty() && atoms + static_cast<int>(sys.size()) > cfg.max_atoms) break;
      batch.push_back(sys);
      atoms += static_cast<int>(sys.size());
      if (atoms >= cfg.max_atoms) break;
    }

    std::fill(grad.begin(), grad.end(), 0.0);
    model.params = state.params;
    const auto breakdown = loss(model, batch, cfg, scheme, &grad);

    clip_gradient(grad, cfg.clip_norm);

    const double lr = lr_at(cfg, step);
    state.step = step + 1;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < state.params.size(); ++i) {
      state.adam_m[i] = cfg.adam_beta1 * state.adam_m[i] + (1.0 - cfg.adam_beta1) * grad[i];
      state.adam_v[i] = cfg.adam_beta2 * state.adam_v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
      const double mhat = state.adam_m[i] / bc1;
      const double vhat = state.adam_v[i] / bc2;
      state.params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                               cfg.weight_decay * state.params[i]);
    }
    for (size_t i = 0; i < state.params.size(); ++i)
      state.ema[i] = cfg.ema_decay * state.ema[i] + (1.0 - cfg.ema_decay) * state.params[i];

    result.trace.push_back({step, lr, breakdown.total, breakdown.energy_term, breakdown.force_term});
    if (step == 0) initial_loss = breakdown.total;
    divergent_streak = breakdown.total > 1e3 * initial_loss ? divergent_streak + 1 : 0;
    if (divergent_streak >= 100) {
      result.aborted = true;
      result.abort_reason = "loss exceeded 1000x initial for 100 consecutive steps";
      break;
    }
  }

  result.model = initial;
  result.model.params = state.params;
  result.model.stage = cfg.stage;
  result.ema_model = initial;
  result.ema_model.params = state.ema;
  result.ema_model.stage = cfg.stage;
  return result;
}

// Stage transition: drop the direct-force head, keep everything else.
// Optimizer moments start fresh in the next train_stage call.
inline PotentialModel to_conservative(const PotentialModel& direct_model) {
  if (!direct_model.cfg.direct_force_head)
    throw std::invalid_argument("model has no direct-force head to drop");
  ModelConfig cfg2 = direct_model.cfg;
  cfg2.direct_force_head = false;
  PotentialModel out(cfg2);
  out.seed = direct_model.seed;
  out.stage = "conservative";
  for (const auto& seg : out.segments()) out.set(seg.name, direct_model.get(seg.name));
  return out;
}

// ---- evaluation ----

struct EvalMetrics {
  double energy_mae_per_atom = 0.0;  // raw units
  double force_mae = 0.0;            // raw units, per component
  double force_rms = 0.0;            // of the labels, raw units
  double loss_value = 0.0;           // same formula as training
};

inline EvalMetrics evaluate(const PotentialModel& model, const std::vector<AtomicSystem>& systems,
                            const ReferenceScheme& scheme, const TrainConfig& cfg) {
  if (systems.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalMetrics m;
  double label_sq = 0.0;
  std::int64_t n_comp = 0;
  double loss_e = 0.0, loss_f_sse = 0.0;
  std::int64_t atoms = 0;
  for (const auto& sys : systems) {
    if (!sys.labels) throw std::invalid_argument("evaluate: system lacks labels");
    const int n = static_cast<int>(sys.size());
    const auto graph = build_graph(sys, model.cfg.cutoff, cfg.max_neighbors);
    double e_model;
    std::vector<Vec3> f_model;
    if (cfg.stage == "direct") {
      Tape tape;
      ForwardOptions opt;
      opt.direct_forces = true;
      const auto fw = model.forward(tape, sys, graph, opt);
      e_model = tape.value(fw.energy).v[0];
      const auto& fm = tape.value(fw.direct_forces);
      f_model.resize(n);
      for (int i = 0; i < n; ++i)
        for (int d = 0; d < 3; ++d) f_model[i][d] = fm(i, d);
    } else {
      std::tie(e_model, f_model) = model.energy_forces(sys, graph);
    }
    const double e_raw = scheme.raw_energy(sys, e_model);
    m.energy_mae_per_atom += std::abs(e_raw - sys.labels->energy) / n;
    const double e_t = scheme.target_energy(sys, sys.labels->energy);
    loss_e += cfg.energy_coeff(sys.task) * std::pow((e_model - e_t) / n, 2);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) {
        const double f_raw = scheme.raw_force_component(f_model[i][d]);
        const double lbl = sys.labels->forces[i][d];
        m.force_mae += std::abs(f_raw - lbl);
        label_sq += lbl * lbl;
        loss_f_sse += std::pow(f_model[i][d] - scheme.target_force_component(lbl), 2);
        ++n_comp;
      }
    atoms += n;
  }
  m.energy_mae_per_atom /= static_cast<double>(systems.size());
  m.force_mae /= static_cast<double>(n_comp);
  m.force_rms = std::sqrt(label_sq / static_cast<double>(n_comp));
  m.loss_value = loss_e / static_cast<double>(systems.size()) +
                 cfg.c_force * loss_f_sse / (3.0 * static_cast<double>(atoms));
  return m;
}

// ---- multi-task comparison ----

struct MultitaskReport {
  std::vector<std::string> tasks;
  std::vector<double> single_loss;      // per task, its own baseline
  std::vector<double> multi_dense;      // normalized by single_loss
  std::vector<double> multi_mole;       // normalized by single_loss
  std::string to_text() const;
};

// Per-task validation losses of single-task baselines vs multi-task dense
// vs multi-task MoLE, all normalized by the single-task value. Losses are
// computed in a shared per-task normalization so the ratios are comparable
// across models trained with different schemes.
inline MultitaskReport compare_multitask(
    const std::vector<PotentialModel>& single_models, const std::vector<ReferenceScheme>& single_schemes,
    const PotentialModel& multi_dense, const ReferenceScheme& dense_scheme,
    const PotentialModel& multi_mole, const ReferenceScheme& mole_scheme,
    const std::vector<std::vector<AtomicSystem>>& val_per_task, const TrainConfig& cfg) {
  const auto active = multi_mole.census().active;
  if (multi_dense.census().active != active)
    throw std::invalid_argument("compare_multitask: active sizes differ between variants");
  for (const auto& m : single_models)
    if (m.census().active != active)
      throw std::invalid_argument("compare_multitask: active sizes differ between variants");

  MultitaskReport rep;
  for (size_t t = 0; t < val_per_task.size(); ++t) {
    const auto& val = val_per_task[t];
    rep.tasks.push_back(val.front().task);
    // common per-task scale: force RMS of the validation labels
    double sq = 0.0;
    std::int64_t c = 0;
    for (const auto& s : val)
      for (const auto& f : s.labels->forces) {
        sq += f[0] * f[0] + f[1] * f[1] + f[2] * f[2];
        c += 3;
      }
    const double sigma_t = std::sqrt(sq / static_cast<double>(c));
    auto task_loss = [&](const PotentialModel& model, const ReferenceScheme& scheme) {
      double le = 0.0, lf = 0.0;
      std::int64_t atoms = 0;
      for (const auto& sys : val) {
        const int n = static_cast<int>(sys.size());
        const auto graph = build_graph(sys, model.cfg.cutoff, cfg.max_neighbors);
        const auto [e_model, f_model] = model.energy_forces(sys, graph);
        const double e_raw = scheme.raw_energy(sys, e_model);
        le += cfg.energy_coeff(sys.task) * std::pow((e_raw - sys.labels->energy) / (n * sigma_t), 2);
        for (int i = 0; i < n; ++i)
          for (int d = 0; d < 3; ++d)
            lf += std::pow((scheme.raw_force_component(f_model[i][d]) - sys.labels->forces[i][d]) / sigma_t, 2);
        atoms += n;
      }
      return le / static_cast<double>(val.size()) +
             cfg.c_force * lf / (3.0 * static_cast<double>(atoms));
    };
    const double base = task_loss(single_models[t], single_schemes[t]);
    rep.single_loss.push_back(base);
    rep.multi_dense.push_back(task_loss(multi_dense, dense_scheme) / base);
    rep.multi_mole.push_back(task_loss(multi_mole, mole_scheme) / base);
  }
  return rep;
}

inline std::string MultitaskReport::to_text() const {
  std::ostringstream os;
  os << "variant";
  for (const auto& t : tasks) os << ' ' << t;
  os << '\n';
  os << "single";
  for (size_t i = 0; i < tasks.size(); ++i) os << ' ' << "1";
  os << '\n';
  os << "multi-dense";
  for (double v : multi_dense) os << ' ' << format_double(v);
  os << '\n';
  os << "multi-mole";
  for (double v : multi_mole) os << ' ' << format_double(v);
  os << '\n';
  return os.str();
}

}  // namespace molepot
