#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "molepot/potential.hpp"

using namespace molepot;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(int experts = 3) {
  ModelConfig cfg;
  cfg.n_species = 6;
  cfg.channels = 16;
  cfg.blocks = 2;
  cfg.experts = experts;
  cfg.cutoff = 2.5;
  cfg.n_rbf = 8;
  cfg.router_hidden = 12;
  cfg.tasks = {"lj-a", "lj-b", "morse"};
  return cfg;
}

AtomicSystem random_cluster(Rng& rng, int n, double min_sep = 0.6, double side_scale = 1.4) {
  AtomicSystem s;
  s.task = "lj-a";
  const double side = side_scale * std::cbrt(static_cast<double>(n)) + 1.0;
  while (static_cast<int>(s.positions.size()) < n) {
    const Vec3 p{rng.uniform(0.0, side), rng.uniform(0.0, side), rng.uniform(0.0, side)};
    bool ok = true;
    for (const auto& q : s.positions)
      if (norm(p - q) < min_sep) {
        ok = false;
        break;
      }
    if (ok) s.positions.push_back(p);
  }
  for (int i = 0; i < n; ++i) s.species.push_back(1 + static_cast<int>(rng.uniform_index(3)));
  return s;
}

Vec3 apply_rot(const Mat3& r, const Vec3& p) {
  return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
          r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
          r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

Mat3 random_rotation(Rng& rng) {
  const double a = rng.uniform(0.0, 2 * M_PI), b = rng.uniform(0.0, M_PI), c = rng.uniform(0.0, 2 * M_PI);
  const Mat3 rz{{{std::cos(a), -std::sin(a), 0}, {std::sin(a), std::cos(a), 0}, {0, 0, 1}}};
  const Mat3 rx{{{1, 0, 0}, {0, std::cos(b), -std::sin(b)}, {0, std::sin(b), std::cos(b)}}};
  const Mat3 rz2{{{std::cos(c), -std::sin(c), 0}, {std::sin(c), std::cos(c), 0}, {0, 0, 1}}};
  auto matmul3 = [](const Mat3& x, const Mat3& y) {
    Mat3 out{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) out[i][j] += x[i][k] * y[k][j];
    return out;
  };
  return matmul3(rz2, matmul3(rx, rz));
}

}  // namespace

TEST_CASE("isolated atom energy depends only on its header, not position") {
  const auto model = PotentialModel::random_init(small_config(), 5);
  AtomicSystem a;
  a.positions = {{0, 0, 0}};
  a.species = {2};
  a.task = "morse";
  auto b = a;
  b.positions = {{17.3, -4.0, 2.5}};
  const double ea = model.energy_only(a, build_graph(a, model.cfg.cutoff));
  const double eb = model.energy_only(b, build_graph(b, model.cfg.cutoff));
  REQUIRE(std::isfinite(ea));
  CHECK(ea == eb);  // no edges, no position dependence

  const auto [e, f] = model.energy_forces(a, build_graph(a, model.cfg.cutoff));
  CHECK(e == ea);
  CHECK(norm(f[0]) == 0.0);
  // species bias contributes directly: shifting it shifts the energy
  auto shifted = model;
  Matrix bias = shifted.get("species_bias");
  bias.v[1] += 1.25;  // species 2
  shifted.set("species_bias", bias);
  CHECK(shifted.energy_only(a, build_graph(a, model.cfg.cutoff)) == Catch::Approx(ea + 1.25));
}

TEST_CASE("energy is invariant to atom permutation within 1e-12") {
  Rng rng(21);
  const auto model = PotentialModel::random_init(small_config(), 9);
  auto sys = random_cluster(rng, 10);
  const double e0 = model.energy_only(sys, build_graph(sys, model.cfg.cutoff));

  std::vector<int> perm(10);
  for (int i = 0; i < 10; ++i) perm[i] = i;
  rng.shuffle(perm);
  AtomicSystem p = sys;
  for (int i = 0; i < 10; ++i) {
    p.positions[i] = sys.positions[perm[i]];
    p.species[i] = sys.species[perm[i]];
  }
  const double e1 = model.energy_only(p, build_graph(p, model.cfg.cutoff));
  CHECK(std::abs(e1 - e0) <= 1e-12 * (1.0 + std::abs(e0)));
}

TEST_CASE("energy is invariant to rotation and translation") {
  Rng rng(23);
  const auto model = PotentialModel::random_init(small_config(), 11);
  const auto sys = random_cluster(rng, 10);
  const double e0 = model.energy_only(sys, build_graph(sys, model.cfg.cutoff));

  const auto rot = random_rotation(rng);
  const Vec3 shift{3.0, -7.0, 1.0};
  auto moved = sys;
  for (auto& p : moved.positions) p = apply_rot(rot, p) + shift;
  const double e1 = model.energy_only(moved, build_graph(moved, model.cfg.cutoff));
  CHECK(std::abs(e1 - e0) <= 1e-9 * (1.0 + std::abs(e0)));
}

TEST_CASE("conservative forces match finite differences") {
  Rng rng(31);
  const auto model = PotentialModel::random_init(small_config(), 13);
  auto sys = random_cluster(rng, 8);
  const auto graph = build_graph(sys, model.cfg.cutoff);
  const auto [e, forces] = model.energy_forces(sys, graph);

  const double h = 1e-4;
  for (size_t i = 0; i < sys.size(); ++i)
    for (int d = 0; d < 3; ++d) {
      auto sp = sys, sm = sys;
      sp.positions[i][d] += h;
      sm.positions[i][d] -= h;
      const double ep = model.energy_only(sp, build_graph(sp, model.cfg.cutoff));
      const double em = model.energy_only(sm, build_graph(sm, model.cfg.cutoff));
      const double fd = -(ep - em) / (2.0 * h);
      const double rel = std::abs(forces[i][d] - fd) /
                         (std::abs(forces[i][d]) + std::abs(fd) + 1e-10);
      REQUIRE(rel <= 1e-4);
    }

  // translation invariance: net force vanishes
  Vec3 net{0, 0, 0};
  double total = 0.0;
  for (const auto& f : forces) {
    net = net + f;
    total += norm(f);
  }
  CHECK(norm(net) <= 1e-9 * total);
}

TEST_CASE("direct forces are equivariant and distinct from conservative ones") {
  Rng rng(37);
  const auto model = PotentialModel::random_init(small_config(), 17);
  const auto sys = random_cluster(rng, 9);
  const auto f_direct = model.direct_forces(sys, build_graph(sys, model.cfg.cutoff));

  const auto rot = random_rotation(rng);
  auto moved = sys;
  for (auto& p : moved.positions) p = apply_rot(rot, p);
  const auto f_rot = model.direct_forces(moved, build_graph(moved, model.cfg.cutoff));
  for (size_t i = 0; i < sys.size(); ++i)
    CHECK(norm(apply_rot(rot, f_direct[i]) - f_rot[i]) <= 1e-9 * (1.0 + norm(f_direct[i])));

  const auto [e, f_cons] = model.energy_forces(sys, build_graph(sys, model.cfg.cutoff));
  double diff = 0.0;
  for (size_t i = 0; i < sys.size(); ++i) diff += norm(f_direct[i] - f_cons[i]);
  CHECK(diff > 1e-6);  // untrained heads do not coincide

  // isolated atom: no edges, zero direct force
  AtomicSystem iso;
  iso.positions = {{0, 0, 0}};
  iso.species = {1};
  iso.task = "lj-a";
  const auto f_iso = model.direct_forces(iso, build_graph(iso, model.cfg.cutoff));
  CHECK(norm(f_iso[0]) == 0.0);
}

TEST_CASE("asking a headless model for direct forces is an error") {
  auto cfg = small_config();
  cfg.direct_force_head = false;
  const auto model = PotentialModel::random_init(cfg, 3);
  AtomicSystem iso;
  iso.positions = {{0, 0, 0}};
  iso.species = {1};
  iso.task = "lj-a";
  CHECK_THROWS_WITH(model.direct_forces(iso, build_graph(iso, model.cfg.cutoff)),
                    Catch::Matchers::ContainsSubstring("direct-force head"));
}

TEST_CASE("energy is C1 at the cutoff: crossing by 1e-6 moves it less than 1e-8") {
  const auto model = PotentialModel::random_init(small_config(), 19);
  AtomicSystem sys;
  sys.species = {1, 2};
  sys.task = "lj-a";
  const double rc = model.cfg.cutoff;
  sys.positions = {{0, 0, 0}, {0, 0, rc - 1e-6}};
  const double e_in = model.energy_only(sys, build_graph(sys, rc));
  sys.positions[1][2] = rc + 1e-6;
  const double e_out = model.energy_only(sys, build_graph(sys, rc));
  CHECK(std::abs(e_in - e_out) <= 1e-8);
}

TEST_CASE("routing is bitwise invariant to position changes") {
  Rng rng(41);
  const auto model = PotentialModel::random_init(small_config(8), 23);
  auto sys = random_cluster(rng, 7);
  sys.charge = 1;
  sys.spin = 2;
  const auto a0 = model.route_for(SystemHeader::of(sys));
  for (int trial = 0; trial < 100; ++trial) {
    for (auto& p : sys.positions)
      for (int d = 0; d < 3; ++d) p[d] += rng.uniform(-0.05, 0.05);
    const auto a1 = model.route_for(SystemHeader::of(sys));
    REQUIRE(a1.alpha == a0.alpha);  // bitwise
  }
  // and the in-forward alpha agrees bitwise with route_for
  Tape tape;
  const auto fw = model.forward(tape, sys, build_graph(sys, model.cfg.cutoff));
  REQUIRE(tape.value(fw.alpha).v == a0.alpha);
}

TEST_CASE("census counts experts once in the active column") {
  const auto cfg = small_config(4);
  const auto model = PotentialModel::random_init(cfg, 29);
  const auto census = model.census();
  CHECK(census.total == static_cast<std::int64_t>(model.params.size()));
  CHECK(census.total > census.active);

  // dense model: total equals active
  const auto dense = PotentialModel::random_init(small_config(1), 29);
  const auto dc = dense.census();
  CHECK(dc.total == dc.active);
  CHECK(dc.total == static_cast<std::int64_t>(dense.params.size()));

  // merged model parameter count equals the active census
  AtomicSystem sys;
  sys.positions = {{0, 0, 0}, {0, 0, 1.0}};
  sys.species = {1, 2};
  sys.task = "lj-b";
  const auto merged = merge_model(model, SystemHeader::of(sys));
  CHECK(static_cast<std::int64_t>(merged.params.size()) == census.active);
  CHECK(merged.census().total == merged.census().active);
}

TEST_CASE("K=1 merge is numerically the identity") {
  const auto dense = PotentialModel::random_init(small_config(1), 31);
  AtomicSystem sys;
  sys.positions = {{0, 0, 0}, {0, 0, 1.1}};
  sys.species = {1, 1};
  sys.task = "lj-a";
  const auto merged = merge_model(dense, SystemHeader::of(sys));
  CHECK(merged.params == dense.params);
  CHECK(merged.stage == "merged");
}

TEST_CASE("merged model reproduces the mixture model on same-composition systems") {
  Rng rng(43);
  const auto model = PotentialModel::random_init(small_config(8), 37);
  auto sys = random_cluster(rng, 8);
  sys.task = "lj-b";
  sys.charge = -1;
  sys.spin = 1;
  const auto merged = merge_model(model, SystemHeader::of(sys));

  for (int trial = 0; trial < 20; ++trial) {
    for (auto& p : sys.positions)
      for (int d = 0; d < 3; ++d) p[d] += rng.uniform(-0.03, 0.03);
    const auto graph = build_graph(sys, model.cfg.cutoff);
    Tape tape;
    ForwardOptions opt;
    opt.path = MixturePath::PerExpert;  // the literal mixture
    const double e_mix = tape.value(model.forward(tape, sys, graph, opt).energy).v[0];
    const double e_merged = merged.energy_only(sys, graph);
    REQUIRE(std::abs(e_merged - e_mix) <= 1e-10 * (1.0 + std::abs(e_mix)));
  }
}

TEST_CASE("per-expert and premerged forward paths agree") {
  Rng rng(47);
  const auto model = PotentialModel::random_init(small_config(5), 41);
  auto sys = random_cluster(rng, 8);
  sys.task = "morse";
  const auto graph = build_graph(sys, model.cfg.cutoff);
  Tape t1, t2;
  ForwardOptions per, pre;
  per.path = MixturePath::PerExpert;
  pre.path = MixturePath::Premerged;
  const double e1 = t1.value(model.forward(t1, sys, graph, per).energy).v[0];
  const double e2 = t2.value(model.forward(t2, sys, graph, pre).energy).v[0];
  CHECK(std::abs(e1 - e2) <= 1e-12 * (1.0 + std::abs(e1)));
}

TEST_CASE("instrumented flops match the analytic formula and merged equals dense") {
  Rng rng(53);
  const auto model = PotentialModel::random_init(small_config(6), 43);
  auto sys = random_cluster(rng, 32);
  const auto graph = build_graph(sys, model.cfg.cutoff);
  const auto rep = count_flops(model, sys, graph);
  REQUIRE(rep.measured > 0);
  CHECK(std::abs(static_cast<double>(rep.measured) - rep.analytic) <= 0.005 * rep.analytic);

  // merged flops equal a dense model of the same shape exactly
  const auto merged = merge_model(model, SystemHeader::of(sys));
  const auto dense = PotentialModel::random_init(small_config(1), 99);
  const auto rep_merged = count_flops(merged, sys, graph);
  const auto rep_dense = count_flops(dense, sys, graph);
  CHECK(rep_merged.measured == rep_dense.measured);
}

TEST_CASE("kappa is stable across systems of equal edge density") {
  Rng rng(59);
  const auto model = PotentialModel::random_init(small_config(1), 47);
  // two different draws of the same size/density recipe
  auto a = random_cluster(rng, 40);
  auto b = random_cluster(rng, 40);
  const auto ga = build_graph(a, model.cfg.cutoff);
  const auto gb = build_graph(b, model.cfg.cutoff);
  const auto ra = count_flops(model, a, ga);
  const auto rb = count_flops(model, b, gb);
  const double density_a = static_cast<double>(ga.n_edges()) / a.size();
  const double density_b = static_cast<double>(gb.n_edges()) / b.size();
  // the recipe gives nearly equal densities; kappa tracks within the same margin
  const double density_rel = std::abs(density_a - density_b) / density_a;
  CHECK(std::abs(ra.kappa - rb.kappa) / ra.kappa <= density_rel + 0.01);
}

TEST_CASE("checkpoint round-trips and is byte-deterministic") {
  const auto dir = fs::temp_directory_path() / "molepot-ckpt-test";
  fs::create_directories(dir);
  const auto model = PotentialModel::random_init(small_config(4), 61);
  const auto p1 = (dir / "a.ckpt").string();
  const auto p2 = (dir / "b.ckpt").string();
  nlohmann::json ref{{"note", "test"}};
  save_checkpoint(model, p1, ref);
  save_checkpoint(model, p2, ref);
  std::ifstream f1(p1), f2(p2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  REQUIRE(s1.str() == s2.str());

  nlohmann::json ref_back;
  const auto loaded = load_checkpoint(p1, &ref_back);
  CHECK(loaded.params == model.params);
  CHECK(loaded.cfg == model.cfg);
  CHECK(loaded.stage == model.stage);
  CHECK(ref_back.at("note") == "test");
  fs::remove_all(dir);
}

TEST_CASE("unknown task and out-of-range header fields are errors") {
  const auto model = PotentialModel::random_init(small_config(4), 67);
  AtomicSystem sys;
  sys.positions = {{0, 0, 0}};
  sys.species = {1};
  sys.task = "nope";
  CHECK_THROWS_WITH(model.route_for(SystemHeader::of(sys)),
                    Catch::Matchers::ContainsSubstring("task"));
  sys.task = "lj-a";
  sys.charge = 99;
  CHECK_THROWS_WITH(model.route_for(SystemHeader::of(sys)),
                    Catch::Matchers::ContainsSubstring("charge"));
  sys.charge = 0;
  sys.species = {model.cfg.n_species + 1};
  CHECK_THROWS(model.energy_only(sys, build_graph(sys, model.cfg.cutoff)));
}
