#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "molepot/data.hpp"

using namespace molepot;

namespace {

// five-point stencil; the pair potentials have violent high derivatives
// near contact, so plain central differences would not reach 1e-8
double fd_force(const TaskOracle& oracle, AtomicSystem sys, size_t atom, int dim, double h = 1e-4) {
  auto at = [&](double delta) {
    sys.positions[atom][dim] += delta;
    const double e = oracle.energy(sys);
    sys.positions[atom][dim] -= delta;
    return e;
  };
  return -(8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
}

AtomicSystem spread_cluster(Rng& rng, const TaskOracle& oracle, int n) {
  AtomicSystem s;
  s.task = oracle.task;
  const double scale = oracle.length_scale();
  const double side = scale * std::cbrt(n / 0.15);
  while (static_cast<int>(s.positions.size()) < n) {
    const Vec3 p{rng.uniform(0.0, side), rng.uniform(0.0, side), rng.uniform(0.0, side)};
    bool ok = true;
    for (const auto& q : s.positions)
      if (norm(p - q) < 0.9 * scale) {
        ok = false;
        break;
      }
    if (ok) s.positions.push_back(p);
  }
  for (int i = 0; i < n; ++i)
    s.species.push_back(oracle.species_pool[rng.uniform_index(oracle.species_pool.size())]);
  return s;
}

}  // namespace

TEST_CASE("lj pair function has its textbook minimum and root") {
  const auto oracle = bundled_oracle(bundled_oracles(), "lj-a");
  const double r_min = std::pow(2.0, 1.0 / 6.0) * 1.0;
  CHECK(oracle.pair_energy(r_min) == Catch::Approx(-1.0).epsilon(1e-12));
  CHECK_THAT(oracle.pair_energy_deriv(r_min), Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(oracle.pair_energy(1.0), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("morse pair function is -D at its minimum with zero slope") {
  const auto oracle = bundled_oracle(bundled_oracles(), "morse");
  CHECK(oracle.pair_energy(1.1) == Catch::Approx(-1.0).epsilon(1e-12));
  CHECK_THAT(oracle.pair_energy_deriv(1.1), Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(oracle.pair_energy(1e6), Catch::Matchers::WithinAbs(0.0, 1e-6));
}

TEST_CASE("oracle forces are the exact derivatives of oracle energy") {
  Rng rng(5);
  for (const auto& oracle : bundled_oracles()) {
    for (int trial = 0; trial < 3; ++trial) {
      auto sys = spread_cluster(rng, oracle, 6);
      if (oracle.charge_coeff != 0.0) {
        sys.charge = 1;
        sys.spin = 2;
      }
      const auto forces = oracle.forces(sys);
      for (size_t i = 0; i < sys.size(); ++i)
        for (int d = 0; d < 3; ++d) {
          const double fd = fd_force(oracle, sys, i, d);
          REQUIRE(std::abs(forces[i][d] - fd) <= 1e-8 * (1.0 + std::abs(forces[i][d])));
        }
    }
  }
}

TEST_CASE("charge and spin enter the lj-b energy linearly") {
  const auto oracle = bundled_oracle(bundled_oracles(), "lj-b");
  Rng rng(7);
  auto sys = spread_cluster(rng, oracle, 4);
  sys.charge = 0;
  sys.spin = 0;
  const double e00 = oracle.energy(sys);
  sys.charge = 2;
  CHECK(oracle.energy(sys) == Catch::Approx(e00 + 2 * 0.3).margin(1e-12));
  sys.spin = 3;
  CHECK(oracle.energy(sys) == Catch::Approx(e00 + 2 * 0.3 + 3 * 0.15).margin(1e-12));
}

TEST_CASE("bundled element table matches the oracle isolated energies") {
  const auto table = bundled_element_table();
  const auto oracles = bundled_oracles();
  for (int z = 1; z <= kMaxSpecies; ++z)
    for (size_t t = 0; t < oracles.size(); ++t)
      CHECK(table.isolated_energy(z, static_cast<int>(t), oracles[t].task) ==
            oracles[t].offset_of(z));
}

TEST_CASE("the shipped element table file agrees with the in-code constants") {
  const auto from_file = read_element_table(std::string(MOLEPOT_DATA_DIR) + "/element_table.json");
  const auto from_code = bundled_element_table();
  for (int z = 1; z <= kMaxSpecies; ++z) {
    REQUIRE(from_file.entries[z].has_value());
    CHECK(from_file.entries[z]->hof == from_code.entries[z]->hof);
    CHECK(from_file.entries[z]->isolated_energy == from_code.entries[z]->isolated_energy);
  }
}

TEST_CASE("generate_dataset is deterministic and respects its contract") {
  const auto oracle = bundled_oracle(bundled_oracles(), "lj-a");
  const auto a = generate_dataset(oracle, 50, 2, 16, 99);
  const auto b = generate_dataset(oracle, 50, 2, 16, 99);
  REQUIRE(a.size() == 50);
  for (size_t i = 0; i < a.size(); ++i)
    REQUIRE(system_to_line(a[i]) == system_to_line(b[i]));  // identical bytes

  const double min_sep = 0.7 * oracle.sigma;
  for (const auto& sys : a) {
    REQUIRE(sys.size() >= 2);
    REQUIRE(sys.size() <= 16);
    REQUIRE(sys.labels.has_value());
    for (size_t i = 0; i < sys.size(); ++i)
      for (size_t j = i + 1; j < sys.size(); ++j)
        REQUIRE(norm(sys.positions[i] - sys.positions[j]) >= min_sep - 1e-12);
    // labels reproduce the oracle exactly
    REQUIRE(sys.labels->energy == oracle.energy(sys));
  }
  const auto c = generate_dataset(oracle, 50, 2, 16, 100);
  CHECK(system_to_line(a[0]) != system_to_line(c[0]));
}

TEST_CASE("size range outside [2,64] is rejected") {
  const auto oracle = bundled_oracle(bundled_oracles(), "lj-a");
  CHECK_THROWS(generate_dataset(oracle, 1, 1, 8, 0));
  CHECK_THROWS(generate_dataset(oracle, 1, 2, 65, 0));
}

TEST_CASE("forced packings come out exactly") {
  const auto two = pack_batches(std::vector<int>{5, 5, 5}, 10, 0);
  REQUIRE(two.size() == 2);
  CHECK(two[0].total_atoms == 10);
  CHECK(two[1].total_atoms == 5);

  const auto one = pack_batches(std::vector<int>{10}, 10, 0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].total_atoms == 10);
}

TEST_CASE("oversized system is rejected by name") {
  CHECK_THROWS_WITH(pack_batches(std::vector<int>{4, 200}, 128, 0),
                    Catch::Matchers::ContainsSubstring("system 1"));
}

TEST_CASE("packing 1000 random instances: exact coverage, no overflow, high utilization") {
  Rng rng(11);
  double utilization_sum = 0.0;
  int utilization_count = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    const int n = 20 + static_cast<int>(rng.uniform_index(200));
    const int max_atoms = 128;
    std::vector<int> sizes;
    for (int i = 0; i < n; ++i) sizes.push_back(2 + static_cast<int>(rng.uniform_index(31)));
    const auto batches = pack_batches(sizes, max_atoms, instance);

    std::vector<int> seen(sizes.size(), 0);
    for (const auto& b : batches) {
      int total = 0;
      for (int idx : b.indices) {
        seen[idx]++;
        total += sizes[idx];
      }
      REQUIRE(total == b.total_atoms);
      REQUIRE(total <= max_atoms);
    }
    for (int s : seen) REQUIRE(s == 1);  // every system exactly once

    double util = 0.0;
    for (const auto& b : batches) util += static_cast<double>(b.total_atoms) / max_atoms;
    utilization_sum += util / static_cast<double>(batches.size());
    ++utilization_count;
  }
  CHECK(utilization_sum / utilization_count >= 0.9);
}

TEST_CASE("equal-ratio interleave is balanced within 10 percent") {
  SamplingPlan plan;
  plan.ratio = {{"a", 1}, {"b", 1}};
  TaskInterleaver stream({"a", "b"}, {100, 100}, plan, 5);
  const int window = 10 * plan.total();
  std::map<int, int> counts;
  for (int i = 0; i < window; ++i) counts[stream.next().task]++;
  CHECK(std::abs(counts[0] / static_cast<double>(window) - 0.5) <= 0.1 * 0.5);
}

TEST_CASE("4:1 interleave produces 80 percent of the majority task") {
  SamplingPlan plan;
  plan.ratio = {{"a", 4}, {"b", 1}};
  TaskInterleaver stream({"a", "b"}, {200, 50}, plan, 9);
  for (int rep = 0; rep < 5; ++rep) {
    const int window = 10 * plan.total();
    int a_count = 0;
    for (int i = 0; i < window; ++i)
      if (stream.next().task == 0) ++a_count;
    const double freq = a_count / static_cast<double>(window);
    CHECK(std::abs(freq - 0.8) <= 0.1 * 0.8);
  }
}

TEST_CASE("interleave streams are deterministic per seed and cover datasets") {
  SamplingPlan plan;
  plan.ratio = {{"a", 2}, {"b", 1}};
  TaskInterleaver s1({"a", "b"}, {30, 20}, plan, 42);
  TaskInterleaver s2({"a", "b"}, {30, 20}, plan, 42);
  std::set<int> seen_a;
  for (int i = 0; i < 90; ++i) {
    const auto x = s1.next();
    const auto y = s2.next();
    REQUIRE(x.task == y.task);
    REQUIRE(x.index == y.index);
    if (x.task == 0) seen_a.insert(x.index);
  }
  CHECK(seen_a.size() == 30);  // an epoch visits every system
}

TEST_CASE("interleave preconditions are enforced") {
  SamplingPlan plan;
  plan.ratio = {{"a", 1}};
  CHECK_THROWS_WITH(TaskInterleaver({"a", "b"}, {10, 10}, plan, 0),
                    Catch::Matchers::ContainsSubstring("does not cover"));
  SamplingPlan plan2;
  plan2.ratio = {{"a", 1}, {"b", 1}};
  CHECK_THROWS_WITH(TaskInterleaver({"a", "b"}, {10, 0}, plan2, 0),
                    Catch::Matchers::ContainsSubstring("empty dataset"));
  SamplingPlan plan3;
  plan3.ratio = {{"a", 1}, {"zz", 1}};
  CHECK_THROWS_WITH(TaskInterleaver({"a"}, {10}, plan3, 0),
                    Catch::Matchers::ContainsSubstring("unknown task"));
  SamplingPlan bad;
  bad.ratio = {{"a", 0}};
  CHECK_THROWS(bad.validate());
}
