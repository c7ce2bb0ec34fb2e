#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

std::string cli() { return MOLEPOT_CLI_BIN; }

struct Run {
  int exit_code = -1;
  std::string output;
};

Run run(const std::string& args, const fs::path& dir) {
  const auto log = dir / "out.log";
  const std::string cmd = cli() + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream os;
  os << in.rdbuf();
  r.output = os.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("molepot-cli-" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("help exits 0, usage errors exit 2, domain errors exit 1") {
  TempDir dir;
  CHECK(run("--help", dir.path).exit_code == 0);
  CHECK(run("no-such-command", dir.path).exit_code == 2);
  CHECK(run("gen-data --no-such-flag 1", dir.path).exit_code == 2);
  CHECK(run("", dir.path).exit_code == 2);  // a subcommand is required
  // domain error: unknown oracle task
  CHECK(run("gen-data --task unknown --n 3 --out " + (dir.path / "x.jsonl").string(), dir.path)
            .exit_code == 1);
  // domain error: missing input file
  CHECK(run("eval --ckpt /nonexistent.ckpt --data /nonexistent.jsonl", dir.path).exit_code == 1);
}

TEST_CASE("gen-data is reproducible from its seed") {
  TempDir dir;
  const auto a = (dir.path / "a.jsonl").string();
  const auto b = (dir.path / "b.jsonl").string();
  const auto c = (dir.path / "c.jsonl").string();
  REQUIRE(run("gen-data --task lj-a --n 100 --seed 7 --out " + a, dir.path).exit_code == 0);
  REQUIRE(run("gen-data --task lj-a --n 100 --seed 7 --out " + b, dir.path).exit_code == 0);
  REQUIRE(run("gen-data --task lj-a --n 100 --seed 8 --out " + c, dir.path).exit_code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a) != slurp(c));
}

TEST_CASE("every run echoes its resolved configuration first") {
  TempDir dir;
  const auto out = (dir.path / "d.jsonl").string();
  const auto r = run("gen-data --task morse --n 5 --out " + out, dir.path);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.rfind("config gen-data {", 0) == 0);
}

TEST_CASE("the full pipeline runs end to end on a tiny budget") {
  TempDir dir;
  const auto data = (dir.path / "train.jsonl").string();
  const auto cfg_path = (dir.path / "tiny.json").string();
  {
    std::ofstream cfg(cfg_path);
    cfg << R"({"model": {"channels": 8, "blocks": 1, "experts": 2, "n_rbf": 4, "router_hidden": 8},
               "train": {"steps": 25, "max_atoms": 16, "val_fraction": 0.2}})";
  }
  REQUIRE(run("gen-data --task lj-a --n 40 --min-atoms 2 --max-atoms 6 --seed 3 --out " + data,
              dir.path)
              .exit_code == 0);

  const auto ckpt1 = (dir.path / "direct.ckpt").string();
  const auto r1 = run("train --stage direct --config " + cfg_path + " --data " + data + " --out " +
                          ckpt1 + " --trace " + (dir.path / "trace.txt").string(),
                      dir.path);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.output.find("final loss") != std::string::npos);
  CHECK(slurp(dir.path / "trace.txt").rfind("step lr total", 0) == 0);

  const auto ckpt2 = (dir.path / "cons.ckpt").string();
  REQUIRE(run("train --stage conservative --config " + cfg_path + " --data " + data + " --init " +
                  ckpt1 + " --out " + ckpt2,
              dir.path)
              .exit_code == 0);

  const auto r_eval = run("eval --ckpt " + ckpt2 + " --data " + data, dir.path);
  REQUIRE(r_eval.exit_code == 0);
  CHECK(r_eval.output.find("force_mae") != std::string::npos);

  const auto traj = (dir.path / "traj.jsonl").string();
  const auto r_md = run("md --ckpt " + ckpt2 + " --system " + data + " --dt 1e-3 --steps 20 " +
                            "--temperature 0.01 --out-traj " + traj,
                        dir.path);
  REQUIRE(r_md.exit_code == 0);
  CHECK(r_md.output.find("drift") != std::string::npos);
  CHECK(fs::exists(traj));

  const auto r_relax =
      run("relax --ckpt " + ckpt2 + " --system " + data + " --fmax 1e9", dir.path);
  REQUIRE(r_relax.exit_code == 0);
  CHECK(r_relax.output.find("steps 0") != std::string::npos);  // fmax huge: done immediately

  const auto merged = (dir.path / "merged.ckpt").string();
  REQUIRE(run("merge --ckpt " + ckpt2 + " --species 1,1,2 --task lj-a --out " + merged, dir.path)
              .exit_code == 0);
  REQUIRE(run("eval --ckpt " + merged + " --data " + data, dir.path).exit_code == 0);

  const auto r_experts = run("experts --ckpt " + ckpt2 + " --data " + data, dir.path);
  REQUIRE(r_experts.exit_code == 0);
  CHECK(r_experts.output.find("species") != std::string::npos);
}

TEST_CASE("fit-scaling consumes records and prints fits with bands") {
  TempDir dir;
  const auto records = (dir.path / "records.txt").string();
  {
    std::ofstream out(records);
    out << "N D C loss tag\n";
    for (double c : {1e14, 1e15, 1e16}) {
      for (int i = -2; i <= 2; ++i) {
        const double n = std::sqrt(c) * std::pow(10.0, i * 0.3);
        const double d = c / (6.0 * n);
        const double loss = 8.0 / std::pow(n, 0.3) + 8.0 / std::pow(d, 0.3);
        out << n << ' ' << d << ' ' << c << ' ' << loss << " sweep\n";
      }
    }
  }
  const auto r1 = run("fit-scaling --records " + records + " --mode powerlaw --kappa 6 " +
                          "--bootstrap 50 --threads 2",
                      dir.path);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.output.find("alpha") != std::string::npos);
  CHECK(r1.output.find("alpha_plus_beta") != std::string::npos);

  const auto report = (dir.path / "report.txt").string();
  const auto r2 = run("fit-scaling --records " + records + " --mode ansatz --bootstrap 0 --out " +
                          report,
                      dir.path);
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(report).find("alpha_hat_signed") != std::string::npos);

  CHECK(run("fit-scaling --records " + records + " --mode nonsense", dir.path).exit_code == 1);
}
