#pragma once

// Atomic system representation and its line-delimited serialization.
// One system per line, JSON object with fixed key order so identical inputs
// produce byte-identical files.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "molepot/core.hpp"

namespace molepot {

constexpr int kMaxSpecies = 20;

struct SystemLabels {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

struct AtomicSystem {
  std::vector<Vec3> positions;
  std::vector<int> species;  // atomic numbers, 1..kMaxSpecies
  std::optional<Mat3> cell;  // rows are lattice vectors
  std::array<bool, 3> pbc{false, false, false};
  int charge = 0;
  int spin = 0;
  std::string task;
  std::optional<SystemLabels> labels;

  size_t size() const { return positions.size(); }
  bool any_pbc() const { return pbc[0] || pbc[1] || pbc[2]; }
};

// The task tags a toolkit build knows about. Systems referencing anything
// else are rejected at parse time.
struct TaskRegistry {
  std::vector<std::string> tasks;

  bool contains(const std::string& t) const {
    for (const auto& x : tasks)
      if (x == t) return true;
    return false;
  }
  int index_of(const std::string& t) const {
    for (size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i] == t) return static_cast<int>(i);
    throw std::invalid_argument("unknown task tag: " + t);
  }
  size_t size() const { return tasks.size(); }
};

inline TaskRegistry default_task_registry() { return TaskRegistry{{"lj-a", "lj-b", "morse"}}; }

inline void validate_system(const AtomicSystem& s, const TaskRegistry& registry) {
  if (s.positions.empty()) throw std::invalid_argument("system has no atoms");
  if (s.species.size() != s.positions.size())
    throw std::invalid_argument("species/positions length mismatch");
  for (int z : s.species)
    if (z < 1 || z > kMaxSpecies)
      throw std::invalid_argument("species out of range 1.." + std::to_string(kMaxSpecies) + ": " +
                                  std::to_string(z));
  if (s.labels && s.labels->forces.size() != s.positions.size())
    throw std::invalid_argument("forces/positions length mismatch");
  if (s.any_pbc()) {
    if (!s.cell) throw std::invalid_argument("pbc set but cell missing");
    if (det3(*s.cell) <= 0.0) throw std::invalid_argument("cell determinant must be positive");
  }
  if (s.spin < 0) throw std::invalid_argument("spin must be non-negative");
  if (!registry.contains(s.task)) throw std::invalid_argument("unknown task tag: " + s.task);
}

namespace detail {

inline void append_vec3_array(std::string& out, const std::vector<Vec3>& xs) {
  out += '[';
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += '[';
    out += format_double(xs[i][0]);
    out += ',';
    out += format_double(xs[i][1]);
    out += ',';
    out += format_double(xs[i][2]);
    out += ']';
  }
  out += ']';
}

inline std::vector<Vec3> parse_vec3_array(const nlohmann::json& j, const char* key) {
  std::vector<Vec3> out;
  out.reserve(j.size());
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != 3)
      throw std::invalid_argument(std::string(key) + " entries must be 3-vectors");
    out.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
  }
  return out;
}

}  // namespace detail

inline std::string system_to_line(const AtomicSystem& s) {
  std::string out;
  out.reserve(64 * s.size());
  out += "{\"positions\":";
  detail::append_vec3_array(out, s.positions);
  out += ",\"species\":[";
  for (size_t i = 0; i < s.species.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s.species[i]);
  }
  out += ']';
  if (s.cell) {
    out += ",\"cell\":[";
    for (int r = 0; r < 3; ++r) {
      if (r) out += ',';
      out += '[';
      for (int c = 0; c < 3; ++c) {
        if (c) out += ',';
        out += format_double((*s.cell)[r][c]);
      }
      out += ']';
    }
    out += ']';
  }
  out += ",\"pbc\":[";
  for (int d = 0; d < 3; ++d) {
    if (d) out += ',';
    out += s.pbc[d] ? "true" : "false";
  }
  out += "],\"charge\":" + std::to_string(s.charge);
  out += ",\"spin\":" + std::to_string(s.spin);
  out += ",\"task\":\"" + s.task + "\"";
  if (s.labels) {
    out += ",\"energy\":" + format_double(s.labels->energy);
    out += ",\"forces\":";
    detail::append_vec3_array(out, s.labels->forces);
  }
  out += '}';
  return out;
}

inline AtomicSystem system_from_line(const std::string& line, const TaskRegistry& registry) {
  nlohmann::json j = nlohmann::json::parse(line);
  AtomicSystem s;
  s.positions = detail::parse_vec3_array(j.at("positions"), "positions");
  s.species = j.at("species").get<std::vector<int>>();
  if (j.contains("cell")) {
    Mat3 cell;
    const auto& jc = j["cell"];
    if (!jc.is_array() || jc.size() != 3) throw std::invalid_argument("cell must be 3x3");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cell[r][c] = jc[r][c].get<double>();
    s.cell = cell;
  }
  if (j.contains("pbc")) {
    const auto& jp = j["pbc"];
    if (!jp.is_array() || jp.size() != 3) throw std::invalid_argument("pbc must have 3 flags");
    for (int d = 0; d < 3; ++d) s.pbc[d] = jp[d].get<bool>();
  }
  s.charge = j.value("charge", 0);
  s.spin = j.value("spin", 0);
  s.task = j.at("task").get<std::string>();
  if (j.contains("energy") || j.contains("forces")) {
    SystemLabels labels;
    labels.energy = j.at("energy").get<double>();
    labels.forces = detail::parse_vec3_array(j.at("forces"), "forces");
    s.labels = labels;
  }
  validate_system(s, registry);
  return s;
}

inline std::vector<AtomicSystem> read_systems(const std::string& path,
                                              const TaskRegistry& registry = default_task_registry()) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open systems file: " + path);
  std::vector<AtomicSystem> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(system_from_line(line, registry));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_systems(const std::vector<AtomicSystem>& systems, const std::string& path,
                          const TaskRegistry& registry = default_task_registry()) {
  for (const auto& s : systems) validate_system(s, registry);
  std::ofstream out(path, std::ios::binary);  // binary: no newline translation
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& s : systems) {
    out << system_to_line(s) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
  }
}

// Per-species constants used by the energy referencing scheme: the isolated
// atom energy under each task's settings and a heat-of-formation offset.
struct ElementEntry {
  double hof = 0.0;
  std::vector<double> isolated_energy;  // indexed by task id of the registry
};

struct ElementTable {
  TaskRegistry registry;
  std::vector<std::optional<ElementEntry>> entries;  // indexed by species

  explicit ElementTable(TaskRegistry reg = default_task_registry())
      : registry(std::move(reg)), entries(kMaxSpecies + 1) {}

  const ElementEntry& at(int species, const std::string& task_context) const {
    if (species < 1 || species > kMaxSpecies || !entries[species])
      throw std::invalid_argument("element table has no entry for species " +
                                  std::to_string(species) + " (task " + task_context + ")");
    return *entries[species];
  }

  double isolated_energy(int species, int task_id, const std::string& task) const {
    const auto& e = at(species, task);
    if (task_id < 0 || task_id >= static_cast<int>(e.isolated_energy.size()))
      throw std::invalid_argument("element table missing task " + task + " for species " +
                                  std::to_string(species));
    return e.isolated_energy[task_id];
  }
};

inline ElementTable element_table_from_json(const nlohmann::json& j, const TaskRegistry& registry) {
  ElementTable table(registry);
  for (const auto& [key, val] : j.at("species").items()) {
    const int z = std::stoi(key);
    if (z < 1 || z > kMaxSpecies) throw std::invalid_argument("element table species out of range: " + key);
    ElementEntry entry;
    entry.hof = val.at("hof").get<double>();
    entry.isolated_energy.resize(registry.size(), 0.0);
    for (const auto& [task, e] : val.at("isolated_energy").items())
      entry.isolated_energy[registry.index_of(task)] = e.get<double>();
    table.entries[z] = std::move(entry);
  }
  return table;
}

inline ElementTable read_element_table(const std::string& path,
                                       const TaskRegistry& registry = default_task_registry()) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open element table: " + path);
  nlohmann::json j;
  in >> j;
  return element_table_from_json(j, registry);
}

inline nlohmann::json element_table_to_json(const ElementTable& table) {
  nlohmann::json species = nlohmann::json::object();
  for (int z = 1; z <= kMaxSpecies; ++z) {
    if (!table.entries[z]) continue;
    nlohmann::json iso = nlohmann::json::object();
    for (size_t t = 0; t < table.registry.size(); ++t)
      iso[table.registry.tasks[t]] = table.entries[z]->isolated_energy[t];
    species[std::to_string(z)] = {{"hof", table.entries[z]->hof}, {"isolated_energy", iso}};
  }
  return nlohmann::json{{"species", species}};
}

}  // namespace molepot
