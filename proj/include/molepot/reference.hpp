#pragma once

// Energy referencing and target normalization. Raw energies differ wildly
// across tasks; training targets are heat-of-formation referenced, linearly
// referenced per species, and scaled by the force RMS of the ensemble.
// Every step is exactly invertible so predictions can be reported raw.

#include "molepot/systems.hpp"

namespace molepot {

// E_ref = E - sum_i (E_iso(z_i, task) - hof(z_i))
inline double hof_reference(double energy, const AtomicSystem& sys, const ElementTable& table) {
  const int tid = table.registry.index_of(sys.task);
  double shift = 0.0;
  for (int z : sys.species)
    shift += table.isolated_energy(z, tid, sys.task) - table.at(z, sys.task).hof;
  return energy - shift;
}

inline double hof_unreference(double referenced, const AtomicSystem& sys, const ElementTable& table) {
  const int tid = table.registry.index_of(sys.task);
  double shift = 0.0;
  for (int z : sys.species)
    shift += table.isolated_energy(z, tid, sys.task) - table.at(z, sys.task).hof;
  return referenced + shift;
}

// Least-squares fit of referenced energies against per-species atom counts,
// solved by damped normal equations. `energies` must align with `systems`,
// all of one task. Returns coefficients indexed by species (0 = absent).
inline std::vector<double> fit_linear_reference(const std::vector<AtomicSystem>& systems,
                                                const std::vector<double>& energies,
                                                double damping = 1e-10) {
  if (systems.size() != energies.size())
    throw std::invalid_argument("fit_linear_reference: energies/systems mismatch");
  if (systems.empty()) throw std::invalid_argument("fit_linear_reference: empty dataset");

  std::vector<int> present;
  std::vector<int> col_of(kMaxSpecies + 1, -1);
  std::vector<std::vector<int>> comps;
  comps.reserve(systems.size());
  for (const auto& s : systems) {
    std::vector<int> counts(kMaxSpecies + 1, 0);
    for (int z : s.species) {
      counts[z] += 1;
      if (col_of[z] < 0) {
        col_of[z] = static_cast<int>(present.size());
        present.push_back(z);
      }
    }
    comps.push_back(std::move(counts));
  }
  std::vector<std::vector<int>> distinct = comps;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < present.size())
    throw std::runtime_error(
        "rank-deficient composition matrix: " + std::to_string(distinct.size()) +
        " distinct compositions for " + std::to_string(present.size()) +
        " species; add more varied systems");

  const int p = static_cast<int>(present.size());
  Matrix ata(p, p);
  std::vector<double> atb(p, 0.0);
  for (size_t i = 0; i < systems.size(); ++i) {
    for (int a = 0; a < p; ++a) {
      const double na = comps[i][present[a]];
      if (na == 0.0) continue;
      atb[a] += na * energies[i];
      for (int b = 0; b < p; ++b) ata(a, b) += na * comps[i][present[b]];
    }
  }
  for (int a = 0; a < p; ++a) ata(a, a) += damping;
  const auto sol = detail::solve_dense(std::move(ata), std::move(atb));
  std::vector<double> coeff(kMaxSpecies + 1, 0.0);
  for (int a = 0; a < p; ++a) coeff[present[a]] = sol[a];
  return coeff;
}

struct NormalizationStats {
  std::vector<double> sigma_task;
  std::vector<std::int64_t> weight_task;  // system counts
  double sigma_combined = 0.0;
};

inline double weighted_sigma(const std::vector<double>& sigma,
                             const std::vector<std::int64_t>& weights) {
  if (sigma.size() != weights.size() || sigma.empty())
    throw std::invalid_argument("weighted_sigma: size mismatch");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < sigma.size(); ++i) {
    num += static_cast<double>(weights[i]) * sigma[i];
    den += static_cast<double>(weights[i]);
  }
  if (den == 0.0) throw std::invalid_argument("weighted_sigma: zero total weight");
  return num / den;
}

// Force-component RMS per dataset plus the system-count weighted combination.
// The shift term of the normalization is fixed at zero.
inline NormalizationStats normalize_targets(const std::vector<std::vector<AtomicSystem>>& per_task) {
  NormalizationStats out;
  for (const auto& systems : per_task) {
    double sq = 0.0;
    std::int64_t count = 0;
    for (const auto& s : systems) {
      if (!s.labels) throw std::invalid_argument("normalize_targets: missing force labels");
      for (const auto& f : s.labels->forces) {
        sq += f[0] * f[0] + f[1] * f[1] + f[2] * f[2];
        count += 3;
      }
    }
    if (count == 0) throw std::invalid_argument("normalize_targets: empty dataset");
    const double sigma = std::sqrt(sq / static_cast<double>(count));
    if (sigma == 0.0) throw std::runtime_error("normalize_targets: all forces zero, scale undefined");
    out.sigma_task.push_back(sigma);
    out.weight_task.push_back(static_cast<std::int64_t>(systems.size()));
  }
  out.sigma_combined = weighted_sigma(out.sigma_task, out.weight_task);
  return out;
}

// The full referencing pipeline for one training run: HOF tables, per-task
// linear coefficients, and the normalization scale. Serialized alongside
// checkpoints so predictions can be un-referenced at inference time.
struct ReferenceScheme {
  ElementTable table;
  std::vector<std::vector<double>> coeff;  // [task id][species]
  std::vector<double> sigma_task;
  std::vector<std::int64_t> weight_task;
  double sigma = 1.0;  // scale applied to every target

  ReferenceScheme() : table(default_task_registry()) {}
  explicit ReferenceScheme(ElementTable t) : table(std::move(t)) {}

  const TaskRegistry& registry() const { return table.registry; }

  static ReferenceScheme fit(const ElementTable& table,
                             const std::vector<std::vector<AtomicSystem>>& per_task) {
    if (per_task.size() != table.registry.size())
      throw std::invalid_argument("ReferenceScheme::fit: one dataset per registered task required");
    ReferenceScheme scheme(table);
    scheme.coeff.resize(per_task.size());
    std::vector<std::vector<AtomicSystem>> with_labels;
    for (size_t t = 0; t < per_task.size(); ++t) {
      if (per_task[t].empty()) {
        scheme.coeff[t].assign(kMaxSpecies + 1, 0.0);
        continue;
      }
      std::vector<double> referenced;
      referenced.reserve(per_task[t].size());
      for (const auto& s : per_task[t]) {
        if (!s.labels) throw std::invalid_argument("ReferenceScheme::fit: missing energy labels");
        referenced.push_back(hof_reference(s.labels->energy, s, table));
      }
      scheme.coeff[t] = fit_linear_reference(per_task[t], referenced);
      with_labels.push_back(per_task[t]);
    }
    const auto stats = normalize_targets(with_labels);
    scheme.sigma_task = stats.sigma_task;
    scheme.weight_task = stats.weight_task;
    scheme.sigma = stats.sigma_combined;
    return scheme;
  }

  double linear_shift(const AtomicSystem& sys) const {
    const int tid = registry().index_of(sys.task);
    double shift = 0.0;
    for (int z : sys.species) shift += coeff.at(tid).at(z);
    return shift;
  }

  // raw energy -> normalized training target (total, not per atom)
  double target_energy(const AtomicSystem& sys, double raw_energy) const {
    return (hof_reference(raw_energy, sys, table) - linear_shift(sys)) / sigma;
  }

  // model output -> raw energy
  double raw_energy(const AtomicSystem& sys, double model_energy) const {
    return hof_unreference(model_energy * sigma + linear_shift(sys), sys, table);
  }

  double target_force_component(double raw) const { return raw / sigma; }
  double raw_force_component(double model) const { return model * sigma; }
};

inline nlohmann::json reference_to_json(const ReferenceScheme& s) {
  return nlohmann::json{{"tasks", s.registry().tasks},
                        {"element_table", element_table_to_json(s.table)},
                        {"coeff", s.coeff},
                        {"sigma_task", s.sigma_task},
                        {"weight_task", s.weight_task},
                        {"sigma", s.sigma}};
}

inline ReferenceScheme reference_from_json(const nlohmann::json& j) {
  TaskRegistry reg{j.at("tasks").get<std::vector<std::string>>()};
  ReferenceScheme s(element_table_from_json(j.at("element_table"), reg));
  s.coeff = j.at("coeff").get<std::vector<std::vector<double>>>();
  s.sigma_task = j.at("sigma_task").get<std::vector<double>>();
  s.weight_task = j.at("weight_task").get<std::vector<std::int64_t>>();
  s.sigma = j.at("sigma").get<double>();
  return s;
}

}  // namespace molepot
