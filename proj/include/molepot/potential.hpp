#pragma once

// The energy network. Invariant per-atom features, gaussian radial basis
// edge features under a smooth cutoff envelope, and message-passing blocks
// whose linear maps are MoLE layers. A single energy head is shared across
// tasks; charge/spin/task enter through the global embedding, which also
// drives expert routing.

#include <map>
#include <unordered_map>

#include "molepot/graph.hpp"
#include "molepot/mole.hpp"

namespace molepot {

struct ModelConfig {
  int n_species = kMaxSpecies;
  int channels = 64;
  int blocks = 3;
  int experts = 8;  // 1 = dense (no router)
  double cutoff = 3.0;
  int n_rbf = 16;
  int router_hidden = 64;
  int max_charge = 4;
  int max_spin = 4;
  std::vector<std::string> tasks;
  bool direct_force_head = true;

  int global_dim() const { return 4 * channels; }

  void validate() const {
    if (channels < 1 || blocks < 1 || experts < 1 || n_rbf < 1)
      throw std::invalid_argument("model config: dimensions must be positive");
    if (cutoff <= 0.0) throw std::invalid_argument("model config: cutoff must be positive");
    if (tasks.empty()) throw std::invalid_argument("model config: needs at least one task");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Segment {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  bool per_expert = false;  // one of K replicas of a MoLE map
  bool router = false;
  size_t size() const { return static_cast<size_t>(rows) * cols; }
};

struct LayerCensus {
  std::string name;
  std::int64_t total = 0;
  std::int64_t active = 0;
};

struct ParamCensus {
  std::int64_t total = 0;
  std::int64_t active = 0;
  std::vector<LayerCensus> layers;
};

// Fixed global fields of one system; everything the router may see.
struct SystemHeader {
  std::vector<int> species;
  int charge = 0;
  int spin = 0;
  std::string task;

  static SystemHeader of(const AtomicSystem& s) { return {s.species, s.charge, s.spin, s.task}; }
};

struct ForwardOptions {
  bool train_mode = false;  // parameters become differentiable leaves
  MixturePath path = MixturePath::Premerged;
  bool direct_forces = false;
};

struct ForwardResult {
  Tape::NodeId energy = -1;             // [1x1], model (normalized) units
  Tape::NodeId per_atom = -1;           // [n x 1]
  Tape::NodeId positions = -1;          // leaf [n x 3]
  Tape::NodeId alpha = -1;              // [1 x K] router output, -1 when dense
  Tape::NodeId direct_forces = -1;      // [n x 3] when requested
  std::vector<Tape::NodeId> seg_nodes;  // one node per segment, declared order
};

class PotentialModel {
 public:
  ModelConfig cfg;
  std::string stage = "direct";  // direct | conservative | merged
  std::uint64_t seed = 0;
  std::vector<double> params;

  PotentialModel() = default;

  explicit PotentialModel(ModelConfig config) : cfg(std::move(config)) {
    cfg.validate();
    build_segments();
    params.assign(total_size_, 0.0);
  }

  static PotentialModel random_init(ModelConfig config, std::uint64_t seed) {
    PotentialModel m(std::move(config));
    m.seed = seed;
    Rng rng(seed);
    for (const auto& seg : m.segments_) {
      double* p = m.params.data() + seg.offset;
      const bool is_embed = seg.name.ends_with("_embed");
      const bool is_bias = seg.name.ends_with("_b") || seg.name.ends_with("bias") ||
                           seg.name.starts_with("router_b");
      if (is_bias) continue;  // biases start at zero
      const double scale = is_embed ? 1.0 : 1.0 / std::sqrt(static_cast<double>(seg.cols));
      for (size_t i = 0; i < seg.size(); ++i) p[i] = scale * rng.normal();
    }
    return m;
  }

  const std::vector<Segment>& segments() const { return segments_; }

  const Segment& segment(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no such parameter segment: " + name);
    return segments_[it->second];
  }

  Matrix get(const std::string& name) const {
    const auto& seg = segment(name);
    Matrix m(seg.rows, seg.cols);
    std::memcpy(m.v.data(), params.data() + seg.offset, seg.size() * sizeof(double));
    return m;
  }

  void set(const std::string& name, const Matrix& m) {
    const auto& seg = segment(name);
    if (m.rows != seg.rows || m.cols != seg.cols)
      throw std::invalid_argument("segment shape mismatch: " + name);
    std::memcpy(params.data() + seg.offset, m.v.data(), seg.size() * sizeof(double));
  }

  ParamCensus census() const {
    ParamCensus c;
    std::map<std::string, LayerCensus> groups;
    for (const auto& seg : segments_) {
      const std::string group = seg.name.substr(0, seg.name.find('_'));
      auto& g = groups[group];
      g.name = group;
      g.total += static_cast<std::int64_t>(seg.size());
      // Expert replicas beyond the first and the router do not survive
      // merging, so they are excluded from the active count.
      const bool inactive = seg.router || (seg.per_expert && !seg.name.ends_with("_e0"));
      if (!inactive) g.active += static_cast<std::int64_t>(seg.size());
    }
    for (auto& [k, g] : groups) {
      c.total += g.total;
      c.active += g.active;
      c.layers.push_back(g);
    }
    return c;
  }

  int task_id(const std::string& task) const {
    for (size_t i = 0; i < cfg.tasks.size(); ++i)
      if (cfg.tasks[i] == task) return static_cast<int>(i);
    throw std::invalid_argument("model does not know task: " + task);
  }

  // Router coefficients for a fixed header. Runs the same emission path as
  // forward() on a scratch tape, so the coefficients agree bitwise.
  RouterOutput route_for(const SystemHeader& header) const {
    Tape tape;
    std::vector<Tape::NodeId> seg_nodes = make_segment_nodes(tape, false);
    const auto g = emit_global(tape, seg_nodes, header);
    if (g.alpha < 0) return RouterOutput{{1.0}};
    return RouterOutput{tape.value(g.alpha).v};
  }

  GlobalEmbedding global_embedding_for(const SystemHeader& header) const {
    Tape tape;
    std::vector<Tape::NodeId> seg_nodes = make_segment_nodes(tape, false);
    const auto g = emit_global(tape, seg_nodes, header);
    return GlobalEmbedding{tape.value(g.concat).v};
  }

  RouterMlp router_view() const {
    if (cfg.experts == 1) throw std::invalid_argument("dense model has no router");
    RouterMlp r;
    for (int l = 0; l < 3; ++l) {
      r.weights.push_back(get("router_w" + std::to_string(l)));
      r.biases.push_back(get("router_b" + std::to_string(l)));
    }
    r.weights.push_back(get("router_wout"));
    r.biases.push_back(get("router_bout"));
    return r;
  }

  MoleLayer mole_view(int block, const std::string& which) const {
    MoleLayer layer;
    for (int k = 0; k < cfg.experts; ++k)
      layer.experts.push_back(get("blk" + std::to_string(block) + "_" + which + "_e" + std::to_string(k)));
    return layer;
  }

  ForwardResult forward(Tape& tape, const AtomicSystem& sys, const NeighborGraph& graph,
                        const ForwardOptions& opt = {}) const {
    if (graph.n_atoms != static_cast<int>(sys.size()))
      throw std::invalid_argument("forward: graph does not match system");
    for (int z : sys.species)
      if (z < 1 || z > cfg.n_species)
        throw std::invalid_argument("species outside embedding table: " + std::to_string(z));
    if (opt.direct_forces && !cfg.direct_force_head)
      throw std::invalid_argument("model has no direct-force head");

    const int n = static_cast<int>(sys.size());

    ForwardResult res;
    res.seg_nodes = make_segment_nodes(tape, opt.train_mode);
    auto seg = [&](const std::string& name) { return res.seg_nodes[index_.at(name)]; };

    // global features and routing
    const auto g = emit_global(tape, res.seg_nodes, SystemHeader::of(sys));
    res.alpha = g.alpha;

    // positions and edge geometry
    Matrix pos(n, 3);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) pos(i, d) = sys.positions[i][d];
    res.positions = tape.leaf(std::move(pos));

    const int ne = static_cast<int>(graph.n_edges());
    auto src_idx = std::make_shared<std::vector<int>>();
    auto dst_idx = std::make_shared<std::vector<int>>();
    src_idx->reserve(ne);
    dst_idx->reserve(ne);
    Matrix shifts(ne, 3);
    for (int e = 0; e < ne; ++e) {
      src_idx->push_back(graph.edges[e].src);
      dst_idx->push_back(graph.edges[e].dst);
      if (sys.cell) {
        const Vec3 off = detail::cell_offset(*sys.cell, graph.edges[e].shift);
        for (int d = 0; d < 3; ++d) shifts(e, d) = off[d];
      }
    }
    const auto edge_vec = tape.sub(tape.add(tape.gather(res.positions, dst_idx),
                                            tape.constant(std::move(shifts))),
                                   tape.gather(res.positions, src_idx));
    const auto r = tape.row_norm(edge_vec);
    const auto radial = tape.scale_rows(tape.rbf(r, rbf_spec_), tape.envelope(r, cfg.cutoff));

    // species lookup
    auto z_idx = std::make_shared<std::vector<int>>();
    z_idx->reserve(n);
    for (int z : sys.species) z_idx->push_back(z - 1);
    Tape::NodeId h = tape.gather(seg("species_embed"), z_idx);

    const auto gb = tape.broadcast_rows(g.mixed, n);
    Tape::NodeId last_msg = -1;
    for (int l = 0; l < cfg.blocks; ++l) {
      const std::string blk = "blk" + std::to_string(l) + "_";
      const auto x = tape.add(h, gb);
      // edge block
      const auto proj = apply_mole(tape, res, blk + "rbf_proj", g.alpha, radial, -1, opt.path);
      const auto gated = tape.silu(tape.mul(proj, tape.gather(x, src_idx)));
      const auto msg = apply_mole(tape, res, blk + "msg", g.alpha, gated, -1, opt.path);
      last_msg = msg;
      h = rms_norm(tape, tape.add(h, tape.scatter_add(msg, dst_idx, n)));
      // node feed-forward
      const auto t = tape.silu(apply_mole(tape, res, blk + "ff1", g.alpha, h, seg(blk + "ff1_b"), opt.path));
      h = rms_norm(tape, tape.add(h, apply_mole(tape, res, blk + "ff2", g.alpha, t, seg(blk + "ff2_b"), opt.path)));
    }

    // energy head
    const auto ht = tape.silu(tape.add_row(tape.matmul_nt(h, seg("head_w1")), seg("head_b")));
    res.per_atom = tape.add(tape.matmul_nt(ht, seg("head_w2")), tape.gather(seg("species_bias"), z_idx));
    res.energy = tape.sum_all(res.per_atom);

    if (opt.direct_forces) {
      const auto s = tape.matmul_nt(last_msg, seg("force_w"));
      const auto unit = tape.scale_rows(edge_vec, tape.unary(UnaryKind::Recip, r));
      res.direct_forces = tape.scatter_add(tape.scale_rows(unit, s), dst_idx, n);
    }
    return res;
  }

  // Energy and conservative forces (F = -dE/dpositions) in model units.
  std::pair<double, std::vector<Vec3>> energy_forces(const AtomicSystem& sys,
                                                     const NeighborGraph& graph) const {
    Tape tape;
    const auto fw = forward(tape, sys, graph);
    const auto grads = tape.gradient(fw.energy, {fw.positions});
    std::vector<Vec3> forces(sys.size());
    for (size_t i = 0; i < sys.size(); ++i)
      for (int d = 0; d < 3; ++d) forces[i][d] = -grads[0](static_cast<int>(i), d);
    return {tape.value(fw.energy).v[0], std::move(forces)};
  }

  std::vector<Vec3> direct_forces(const AtomicSystem& sys, const NeighborGraph& graph) const {
    Tape tape;
    ForwardOptions opt;
    opt.direct_forces = true;
    const auto fw = forward(tape, sys, graph, opt);
    const auto& f = tape.value(fw.direct_forces);
    std::vector<Vec3> forces(sys.size());
    for (size_t i = 0; i < sys.size(); ++i)
      for (int d = 0; d < 3; ++d) forces[i][d] = f(static_cast<int>(i), d);
    return forces;
  }

  double energy_only(const AtomicSystem& sys, const NeighborGraph& graph) const {
    Tape tape;
    return tape.value(forward(tape, sys, graph).energy).v[0];
  }

 private:
  struct GlobalNodes {
    Tape::NodeId concat = -1;  // [1 x 4C]
    Tape::NodeId mixed = -1;   // [1 x C]
    Tape::NodeId alpha = -1;   // [1 x K] or -1
  };

  std::vector<Segment> segments_;
  std::unordered_map<std::string, size_t> index_;
  size_t total_size_ = 0;
  std::shared_ptr<const RbfSpec> rbf_spec_;

  void add_segment(const std::string& name, int rows, int cols, bool per_expert = false,
                   bool router = false) {
    Segment s{name, rows, cols, total_size_, per_expert, router};
    index_[name] = segments_.size();
    total_size_ += s.size();
    segments_.push_back(std::move(s));
  }

  void build_segments() {
    const int C = cfg.channels;
    add_segment("species_embed", cfg.n_species, C);
    add_segment("comp_embed", cfg.n_species, C);
    add_segment("charge_embed", 2 * cfg.max_charge + 1, C);
    add_segment("spin_embed", cfg.max_spin + 1, C);
    add_segment("task_embed", static_cast<int>(cfg.tasks.size()), C);
    add_segment("mixer_w", C, cfg.global_dim());
    add_segment("mixer_b", 1, C);
    if (cfg.experts > 1) {
      const int H = cfg.router_hidden;
      add_segment("router_w0", H, cfg.global_dim(), false, true);
      add_segment("router_b0", 1, H, false, true);
      add_segment("router_w1", H, H, false, true);
      add_segment("router_b1", 1, H, false, true);
      add_segment("router_w2", H, H, false, true);
      add_segment("router_b2", 1, H, false, true);
      add_segment("router_wout", cfg.experts, H, false, true);
      add_segment("router_bout", 1, cfg.experts, false, true);
    }
    for (int l = 0; l < cfg.blocks; ++l) {
      const std::string blk = "blk" + std::to_string(l) + "_";
      for (int k = 0; k < cfg.experts; ++k)
        add_segment(blk + "rbf_proj_e" + std::to_string(k), C, cfg.n_rbf, true);
      for (int k = 0; k < cfg.experts; ++k)
        add_segment(blk + "msg_e" + std::to_string(k), C, C, true);
      for (int k = 0; k < cfg.experts; ++k)
        add_segment(blk + "ff1_e" + std::to_string(k), C, C, true);
      add_segment(blk + "ff1_b", 1, C);
      for (int k = 0; k < cfg.experts; ++k)
        add_segment(blk + "ff2_e" + std::to_string(k), C, C, true);
      add_segment(blk + "ff2_b", 1, C);
    }
    add_segment("head_w1", C, C);
    add_segment("head_b", 1, C);
    add_segment("head_w2", 1, C);
    add_segment("species_bias", cfg.n_species, 1);
    if (cfg.direct_force_head) add_segment("force_w", 1, C);

    std::vector<double> centers(cfg.n_rbf);
    for (int i = 0; i < cfg.n_rbf; ++i) centers[i] = cfg.cutoff * (i + 1) / cfg.n_rbf;
    const double spacing = cfg.cutoff / cfg.n_rbf;
    rbf_spec_ = std::make_shared<RbfSpec>(RbfSpec{std::move(centers), 1.0 / (2.0 * spacing * spacing)});
  }

  std::vector<Tape::NodeId> make_segment_nodes(Tape& tape, bool train_mode) const {
    std::vector<Tape::NodeId> nodes;
    nodes.reserve(segments_.size());
    for (const auto& seg : segments_) {
      Matrix m(seg.rows, seg.cols);
      std::memcpy(m.v.data(), params.data() + seg.offset, seg.size() * sizeof(double));
      nodes.push_back(train_mode ? tape.leaf(std::move(m)) : tape.constant(std::move(m)));
    }
    return nodes;
  }

  GlobalNodes emit_global(Tape& tape, const std::vector<Tape::NodeId>& seg_nodes,
                          const SystemHeader& header) const {
    auto seg = [&](const std::string& name) { return seg_nodes[index_.at(name)]; };
    const int tid = task_id(header.task);
    if (header.charge < -cfg.max_charge || header.charge > cfg.max_charge)
      throw std::invalid_argument("charge outside embedding table: " + std::to_string(header.charge));
    if (header.spin < 0 || header.spin > cfg.max_spin)
      throw std::invalid_argument("spin outside embedding table: " + std::to_string(header.spin));

    // species counts in ascending species order: permutation invariant
    std::map<int, int> counts;
    for (int z : header.species) {
      if (z < 1 || z > cfg.n_species)
        throw std::invalid_argument("species outside embedding table: " + std::to_string(z));
      counts[z] += 1;
    }
    auto uniq = std::make_shared<std::vector<int>>();
    Matrix weights(static_cast<int>(counts.size()), 1);
    int row = 0;
    for (const auto& [z, c] : counts) {
      uniq->push_back(z - 1);
      weights.v[row++] = static_cast<double>(c) / static_cast<double>(header.species.size());
    }
    const auto comp = tape.col_sum(tape.scale_rows(tape.gather(seg("comp_embed"), uniq),
                                                   tape.constant(std::move(weights))));
    auto single_row = [&](const std::string& name, int idx) {
      return tape.gather(seg(name), std::make_shared<std::vector<int>>(std::vector<int>{idx}));
    };
    const auto charge_row = single_row("charge_embed", header.charge + cfg.max_charge);
    const auto spin_row = single_row("spin_embed", header.spin);
    const auto task_row = single_row("task_embed", tid);

    GlobalNodes out;
    out.concat = tape.concat_cols(tape.concat_cols(comp, charge_row),
                                  tape.concat_cols(spin_row, task_row));
    out.mixed = tape.silu(tape.add_row(tape.matmul_nt(out.concat, seg("mixer_w")), seg("mixer_b")));
    if (cfg.experts > 1) {
      const std::array<Tape::NodeId, 4> w{seg("router_w0"), seg("router_w1"), seg("router_w2"),
                                          seg("router_wout")};
      const std::array<Tape::NodeId, 4> b{seg("router_b0"), seg("router_b1"), seg("router_b2"),
                                          seg("router_bout")};
      out.alpha = route_taped(tape, out.concat, w, b);
    }
    return out;
  }

  Tape::NodeId apply_mole(Tape& tape, const ForwardResult& res, const std::string& base,
                          Tape::NodeId alpha, Tape::NodeId x, Tape::NodeId bias,
                          MixturePath path) const {
    std::vector<Tape::NodeId> experts;
    experts.reserve(cfg.experts);
    for (int k = 0; k < cfg.experts; ++k)
      experts.push_back(res.seg_nodes[index_.at(base + "_e" + std::to_string(k))]);
    return mole_apply_taped(tape, experts, alpha, x, bias, path);
  }

  Tape::NodeId rms_norm(Tape& tape, Tape::NodeId x) const {
    const auto& xv = tape.value(x);
    const auto ms = tape.add(tape.scale(tape.row_sum(tape.mul(x, x)), 1.0 / xv.cols),
                             tape.constant(Matrix(xv.rows, 1, std::vector<double>(xv.rows, 1e-12))));
    return tape.scale_rows(x, tape.unary(UnaryKind::Rsqrt, ms));
  }
};

// Exact FLOP count of one merged-path energy forward, mirroring the kernels
// term by term. n/e/m are atom, edge and distinct-species counts.
inline double analytic_forward_flops(const ModelConfig& cfg, std::int64_t n, std::int64_t e,
                                     std::int64_t m) {
  const std::int64_t C = cfg.channels, R = cfg.n_rbf, L = cfg.blocks;
  double f = 0.0;
  f += 2.0 * m * C;                  // composition mean
  f += 8.0 * C * C + 7.0 * C;        // global mixer + silu
  f += 24.0 * e + 8.0 * e * R;       // edge geometry, rbf, envelope
  f += L * (2.0 * e * C * R + 8.0 * e * C + 2.0 * e * C * C);  // edge blocks
  f += L * (4.0 * n * C * C + 17.0 * n * C + 16.0 * n);        // node blocks
  f += 2.0 * n * C * C + 9.0 * n * C + 2.0 * n;                // energy head
  return f;
}

struct FlopReport {
  std::uint64_t measured = 0;   // instrumented merged-path forward
  double analytic = 0.0;        // closed-form count for the same path
  double kappa = 0.0;           // measured / (active params * atoms)
};

PotentialModel merge_model(const PotentialModel& model, const SystemHeader& header);

inline FlopReport count_flops(const PotentialModel& model, const AtomicSystem& sys,
                              const NeighborGraph& graph) {
  const PotentialModel* active_model = &model;
  PotentialModel merged;
  if (model.cfg.experts > 1) {
    merged = merge_model(model, SystemHeader::of(sys));
    active_model = &merged;
  }
  FlopReport rep;
  {
    Tape tape;
    FlopScope scope;
    const auto fw = active_model->forward(tape, sys, graph);
    (void)fw;
    rep.measured = scope.flops();
  }
  std::map<int, int> uniq;
  for (int z : sys.species) uniq[z] += 1;
  rep.analytic = analytic_forward_flops(active_model->cfg, static_cast<std::int64_t>(sys.size()),
                                        static_cast<std::int64_t>(graph.n_edges()),
                                        static_cast<std::int64_t>(uniq.size()));
  const auto census = model.census();
  rep.kappa = static_cast<double>(rep.measured) /
              (static_cast<double>(census.active) * static_cast<double>(sys.size()));
  return rep;
}

// Collapse every MoLE layer to its merged matrix for the given header. The
// result is a dense model whose parameter count equals the active census.
inline PotentialModel merge_model(const PotentialModel& model, const SystemHeader& header) {
  const RouterOutput alpha = model.route_for(header);  // validates the header
  if (model.cfg.experts == 1) {
    PotentialModel copy = model;
    copy.stage = "merged";
    return copy;
  }
  ModelConfig cfg2 = model.cfg;
  cfg2.experts = 1;
  PotentialModel out(cfg2);
  out.stage = "merged";
  out.seed = model.seed;
  for (const auto& seg : out.segments()) {
    if (seg.per_expert) {
      // out segment is <base>_e0; source experts are <base>_e0..e{K-1}
      const std::string base = seg.name.substr(0, seg.name.size() - 3);
      Matrix w(seg.rows, seg.cols);
      for (int k = 0; k < model.cfg.experts; ++k) {
        const Matrix wk = model.get(base + "_e" + std::to_string(k));
        for (size_t i = 0; i < w.size(); ++i) w.v[i] += alpha.alpha[k] * wk.v[i];
      }
      out.set(seg.name, w);
    } else {
      out.set(seg.name, model.get(seg.name));
    }
  }
  return out;
}

// ---- checkpoint I/O ----

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_species", c.n_species},
                        {"channels", c.channels},
                        {"blocks", c.blocks},
                        {"experts", c.experts},
                        {"cutoff", c.cutoff},
                        {"n_rbf", c.n_rbf},
                        {"router_hidden", c.router_hidden},
                        {"max_charge", c.max_charge},
                        {"max_spin", c.max_spin},
                        {"tasks", c.tasks},
                        {"direct_force_head", c.direct_force_head}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_species = j.at("n_species").get<int>();
  c.channels = j.at("channels").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.experts = j.at("experts").get<int>();
  c.cutoff = j.at("cutoff").get<double>();
  c.n_rbf = j.at("n_rbf").get<int>();
  c.router_hidden = j.at("router_hidden").get<int>();
  c.max_charge = j.at("max_charge").get<int>();
  c.max_spin = j.at("max_spin").get<int>();
  c.tasks = j.at("tasks").get<std::vector<std::string>>();
  c.direct_force_head = j.at("direct_force_head").get<bool>();
  return c;
}

inline void save_checkpoint(const PotentialModel& model, const std::string& path,
                            const nlohmann::json& reference = nlohmann::json()) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : model.segments())
    segs.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  nlohmann::json j{{"format", "molepot-checkpoint"},
                   {"version", 1},
                   {"stage", model.stage},
                   {"seed", model.seed},
                   {"config", model_config_to_json(model.cfg)},
                   {"segments", segs},
                   {"params", model.params}};
  if (!reference.is_null()) j["reference"] = reference;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline PotentialModel load_checkpoint(const std::string& path,
                                      nlohmann::json* reference_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "molepot-checkpoint")
    throw std::runtime_error("not a checkpoint file: " + path);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version in " + path);
  PotentialModel m(model_config_from_json(j.at("config")));
  m.stage = j.at("stage").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != m.params.size())
    throw std::runtime_error("checkpoint parameter count mismatch in " + path);
  m.params = p;
  // spot-check the declared layout against this build
  const auto segs = j.at("segments");
  if (segs.size() != m.segments().size())
    throw std::runtime_error("checkpoint segment layout mismatch in " + path);
  for (size_t i = 0; i < segs.size(); ++i)
    if (segs[i].at("name").get<std::string>() != m.segments()[i].name)
      throw std::runtime_error("checkpoint segment order mismatch in " + path);
  if (reference_out) *reference_out = j.value("reference", nlohmann::json());
  return m;
}

}  // namespace molepot
