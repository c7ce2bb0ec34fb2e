#pragma once

// Scaling-law pipeline: run records, Iso-FLOP parabola minima, power-law
// fits of the compute-optimal frontier, the 5-parameter loss ansatz
// L(N,D) = E + A/N^a + B/D^b, and bootstrap confidence bands.
// All log-log fits use base-10 logarithms.

#include <fstream>
#include <functional>
#include <optional>
#include <thread>
#include <map>
#include <sstream>

#include "molepot/core.hpp"

namespace molepot {

// For reference: a full-scale equivariant message-passing stack at
// production settings (degree-4 harmonics, ~30 neighbors) reuses each
// parameter about 270 times per atom and per step. The invariant toy model
// here lands much lower; the constant is kept only as a comparison point.
constexpr double kReferenceEquivariantKappa = 270.0;

struct RunRecord {
  double n_params = 0.0;  // N: active parameters
  double atoms = 0.0;     // D: atoms seen
  double flops = 0.0;     // C
  double loss = 0.0;      // validation loss
  std::string tag;

  void validate() const {
    if (n_params <= 0 || atoms <= 0 || flops <= 0 || loss <= 0)
      throw std::invalid_argument("run record fields must be positive");
  }
};

inline std::vector<RunRecord> read_run_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open records file: " + path);
  std::vector<RunRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    RunRecord r;
    std::string first;
    is >> first;
    if (first == "N") continue;  // header row
    try {
      r.n_params = std::stod(first);
      if (!(is >> r.atoms >> r.flops >> r.loss)) throw std::invalid_argument("short row");
      is >> r.tag;
      r.validate();
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_run_records(const std::vector<RunRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open records file for writing: " + path);
  out << "N D C loss tag\n";
  for (const auto& r : records)
    out << format_double(r.n_params) << ' ' << format_double(r.atoms) << ' '
        << format_double(r.flops) << ' ' << format_double(r.loss) << ' '
        << (r.tag.empty() ? "-" : r.tag) << '\n';
}

// ---- parabola minima per FLOP group ----

struct IsoflopMinimum {
  double flops = 0.0;
  double n_star = 0.0;
  double loss_star = 0.0;
  bool valid = true;
  std::string flag;  // set when excluded (concave fit, vertex out of range)
};

// Least-squares parabola in (log10 N, loss); returns (a, b, c) of
// a x^2 + b x + c.
inline std::array<double, 3> fit_parabola(const std::vector<double>& x,
                                          const std::vector<double>& y) {
  Matrix ata(3, 3);
  std::vector<double> atb(3, 0.0);
  for (size_t i = 0; i < x.size(); ++i) {
    const double row[3] = {x[i] * x[i], x[i], 1.0};
    for (int a = 0; a < 3; ++a) {
      atb[a] += row[a] * y[i];
      for (int b = 0; b < 3; ++b) ata(a, b) += row[a] * row[b];
    }
  }
  const auto sol = detail::solve_dense(std::move(ata), std::move(atb));
  return {sol[0], sol[1], sol[2]};
}

// Groups records whose C agrees within `bin_tol` relative, fits a parabola
// per group, and returns the vertex. Groups with fewer than 3 distinct N
// throw; concave fits and vertices outside the sampled N range are flagged
// and marked invalid.
inline std::vector<IsoflopMinimum> isoflop_minima(std::vector<RunRecord> records,
                                                  double bin_tol = 0.02) {
  if (records.empty()) throw std::invalid_argument("isoflop_minima: no records");
  for (const auto& r : records) r.validate();
  std::sort(records.begin(), records.end(),
            [](const RunRecord& a, const RunRecord& b) { return a.flops < b.flops; });
  std::vector<IsoflopMinimum> out;
  size_t i = 0;
  while (i < records.size()) {
    size_t j = i;
    while (j < records.size() && records[j].flops <= records[i].flops * (1.0 + bin_tol)) ++j;
    std::vector<double> logn, loss;
    double cmean = 0.0;
    for (size_t k = i; k < j; ++k) {
      logn.push_back(std::log10(records[k].n_params));
      loss.push_back(records[k].loss);
      cmean += records[k].flops;
    }
    cmean /= static_cast<double>(j - i);
    std::vector<double> distinct = logn;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 3)
      throw std::runtime_error("isoflop group at C=" + format_double(cmean) + " has only " +
                               std::to_string(distinct.size()) + " distinct model sizes (need 3)");
    const auto [a, b, c] = fit_parabola(logn, loss);
    IsoflopMinimum m;
    m.flops = cmean;
    if (a <= 0.0) {
      m.valid = false;
      m.flag = "concave fit";
    } else {
      const double vx = -b / (2.0 * a);
      m.n_star = std::pow(10.0, vx);
      m.loss_star = c - b * b / (4.0 * a);
      if (vx < distinct.front() || vx > distinct.back()) {
        m.valid = false;
        m.flag = "vertex outside sampled range";
      }
    }
    out.push_back(m);
    i = j;
  }
  return out;
}

// ---- power-law fits over the minima ----

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 2) throw std::invalid_argument("line fit needs at least 2 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double denom = n * sxx - sx * sx;
  if (std::abs(denom) < 1e-12 * (1.0 + sxx * n))
    throw std::runtime_error("degenerate span for line fit");
  LineFit f;
  f.slope = (n * sxy - sx * sy) / denom;
  f.intercept = (sy - f.slope * sx) / n;
  return f;
}

struct PowerLawFit {
  double alpha = 0.0;      // log10 N* = alpha log10 C + A
  double a_offset = 0.0;
  double beta = 0.0;       // log10 D* = beta log10 C + B, with D* = C/(kappa N*)
  double b_offset = 0.0;
  double alpha_hat = 0.0;  // positive exponent of loss* ~ N*^-alpha_hat
  double gamma = 0.0;      // intercept of log10 loss* vs log10 N*

  std::map<std::string, double> coefficients() const {
    return {{"alpha", alpha},         {"A", a_offset}, {"beta", beta}, {"B", b_offset},
            {"alpha_hat", alpha_hat}, {"gamma", gamma}};
  }
};

// Requires at least 3 valid minima spanning at least one decade of C.
// The identity alpha + beta = 1 (a consequence of D = C/(kappa N)) is a
// fit-quality check for callers, not a constraint applied here.
inline PowerLawFit fit_power_laws(const std::vector<IsoflopMinimum>& minima, double kappa) {
  std::vector<double> logc, logn, logd, logl;
  for (const auto& m : minima) {
    if (!m.valid) continue;
    logc.push_back(std::log10(m.flops));
    logn.push_back(std::log10(m.n_star));
    logd.push_back(std::log10(m.flops / (kappa * m.n_star)));
    logl.push_back(std::log10(m.loss_star));
  }
  if (logc.size() < 2) throw std::invalid_argument("fit_power_laws: need at least 2 valid minima");
  if (logc.size() >= 3 &&
      *std::max_element(logc.begin(), logc.end()) - *std::min_element(logc.begin(), logc.end()) < 1.0)
    throw std::runtime_error("fit_power_laws: minima span less than one decade of compute");
  const auto n_fit = fit_line(logc, logn);
  const auto d_fit = fit_line(logc, logd);
  const auto l_fit = fit_line(logn, logl);
  PowerLawFit out;
  out.alpha = n_fit.slope;
  out.a_offset = n_fit.intercept;
  out.beta = d_fit.slope;
  out.b_offset = d_fit.intercept;
  out.alpha_hat = -l_fit.slope;
  out.gamma = l_fit.intercept;
  return out;
}

// ---- 5-parameter ansatz fit ----

namespace detail {

struct NelderMeadResult {
  std::vector<double> x;
  double f = 0.0;
  bool converged = false;
};

inline NelderMeadResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                    std::vector<double> x0, double step, int max_iter,
                                    double tol) {
  const size_t n = x0.size();
  std::vector<std::vector<double>> simplex(n + 1, x0);
  std::vector<double> fv(n + 1);
  for (size_t i = 0; i < n; ++i) simplex[i + 1][i] += step;
  for (size_t i = 0; i <= n; ++i) fv[i] = f(simplex[i]);

  NelderMeadResult res;
  for (int it = 0; it < max_iter; ++it) {
    // order
    std::vector<size_t> idx(n + 1);
    for (size_t i = 0; i <= n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return fv[a] < fv[b]; });
    std::vector<std::vector<double>> s2(n + 1);
    std::vector<double> f2(n + 1);
    for (size_t i = 0; i <= n; ++i) {
      s2[i] = simplex[idx[i]];
      f2[i] = fv[idx[i]];
    }
    simplex = std::move(s2);
    fv = std::move(f2);
    if (std::abs(fv[n] - fv[0]) < tol * (1.0 + std::abs(fv[0]))) {
      res.converged = true;
      break;
    }
    std::vector<double> centroid(n, 0.0);
    for (size_t i = 0; i < n; ++i)
      for (size_t d = 0; d < n; ++d) centroid[d] += simplex[i][d] / static_cast<double>(n);
    auto blend = [&](double t) {
      std::vector<double> p(n);
      for (size_t d = 0; d < n; ++d) p[d] = centroid[d] + t * (simplex[n][d] - centroid[d]);
      return p;
    };
    const auto refl = blend(-1.0);
    const double fr = f(refl);
    if (fr < fv[0]) {
      const auto exp_pt = blend(-2.0);
      const double fe = f(exp_pt);
      if (fe < fr) {
        simplex[n] = exp_pt;
        fv[n] = fe;
      } else {
        simplex[n] = refl;
        fv[n] = fr;
      }
    } else if (fr < fv[n - 1]) {
      simplex[n] = refl;
      fv[n] = fr;
    } else {
      const auto con = blend(fr < fv[n] ? -0.5 : 0.5);
      const double fc = f(con);
      if (fc < std::min(fr, fv[n])) {
        simplex[n] = con;
        fv[n] = fc;
      } else {
        // shrink toward the best vertex
        for (size_t i = 1; i <= n; ++i) {
          for (size_t d = 0; d < n; ++d) simplex[i][d] = simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]);
          fv[i] = f(simplex[i]);
        }
      }
    }
  }
  size_t best = 0;
  for (size_t i = 1; i <= n; ++i)
    if (fv[i] < fv[best]) best = i;
  res.x = simplex[best];
  res.f = fv[best];
  return res;
}

}  // namespace detail

struct AnsatzFit {
  // positive-exponent convention: L = E + A/N^alpha_hat + B/D^beta_hat
  double e_hat = 0.0;
  double a_hat = 0.0;
  double b_hat = 0.0;
  double alpha_hat = 0.0;
  double beta_hat = 0.0;
  double objective = 0.0;
  bool converged = false;

  // exponent as it appears when loss is written ~ N^alpha_hat_signed
  double alpha_hat_signed() const { return -alpha_hat; }
  double mapped_alpha() const { return beta_hat / (alpha_hat + beta_hat); }
  double mapped_beta() const { return alpha_hat / (alpha_hat + beta_hat); }
  double gamma() const { return std::log10((1.0 + alpha_hat / beta_hat) * a_hat); }

  std::map<std::string, double> coefficients() const {
    return {{"E_hat", e_hat},         {"A_hat", a_hat},       {"B_hat", b_hat},
            {"alpha_hat", alpha_hat}, {"beta_hat", beta_hat}, {"mapped_alpha", mapped_alpha()},
            {"mapped_beta", mapped_beta()}};
  }
};

namespace detail {

inline double ansatz_objective(const std::vector<RunRecord>& records,
                               const std::vector<double>& u) {
  const double e = u[0] * u[0];
  const double a = std::exp(u[1]);
  const double b = std::exp(u[2]);
  const double ah = std::exp(u[3]);
  const double bh = std::exp(u[4]);
  double acc = 0.0;
  for (const auto& r : records) {
    const double pred = e + a / std::pow(r.n_params, ah) + b / std::pow(r.atoms, bh);
    const double d = std::log(pred) - std::log(r.loss);
    acc += d * d;
  }
  return acc;
}

inline AnsatzFit ansatz_from_u(const std::vector<double>& u, double obj, bool converged) {
  AnsatzFit f;
  f.e_hat = u[0] * u[0];
  f.a_hat = std::exp(u[1]);
  f.b_hat = std::exp(u[2]);
  f.alpha_hat = std::exp(u[3]);
  f.beta_hat = std::exp(u[4]);
  f.objective = obj;
  f.converged = converged;
  return f;
}

}  // namespace detail

// Fits the 5-parameter ansatz by multi-start simplex descent on squared
// log-loss residuals, then polishes the best start with restarts. The
// direct minimization is sensitive to its starting point, hence the
// multi-start. `warm` (when given) replaces the random starts, which keeps
// bootstrap refits cheap.
inline AnsatzFit fit_ansatz(const std::vector<RunRecord>& records, int n_starts = 16,
                            std::uint64_t seed = 0, const AnsatzFit* warm = nullptr) {
  if (records.size() < 10 && !warm)
    throw std::invalid_argument("fit_ansatz: need at least 10 records");
  for (const auto& r : records) r.validate();
  auto obj = [&](const std::vector<double>& u) { return detail::ansatz_objective(records, u); };

  double min_loss = records[0].loss;
  for (const auto& r : records) min_loss = std::min(min_loss, r.loss);

  std::vector<std::vector<double>> starts;
  if (warm) {
    starts.push_back({std::sqrt(std::max(0.0, warm->e_hat)), std::log(warm->a_hat),
                      std::log(warm->b_hat), std::log(warm->alpha_hat), std::log(warm->beta_hat)});
  } else {
    Rng rng(seed);
    // heuristic start: exponents near 0.3, amplitudes scaled to the data
    starts.push_back({0.0, std::log(min_loss) + 0.3 * std::log(records[0].n_params),
                      std::log(min_loss) + 0.3 * std::log(records[0].atoms), std::log(0.3),
                      std::log(0.3)});
    for (int s = 1; s < n_starts; ++s)
      starts.push_back({rng.uniform(-0.5, 0.5), rng.uniform(-2.0, 6.0), rng.uniform(-2.0, 6.0),
                        rng.uniform(-2.5, 0.5), rng.uniform(-2.5, 0.5)});
  }

  detail::NelderMeadResult best;
  best.f = std::numeric_limits<double>::infinity();
  const int iters = warm ? 600 : 2500;
  for (const auto& s : starts) {
    const auto r = detail::nelder_mead(obj, s, 0.5, iters, 1e-15);
    if (r.f < best.f) best = r;
  }
  // polish: restart the simplex at the best point until it stops improving
  for (int k = 0; k < (warm ? 1 : 6); ++k) {
    const auto r = detail::nelder_mead(obj, best.x, 0.05 / (k + 1), 1500, 1e-16);
    if (r.f >= best.f * (1.0 - 1e-12)) {
      if (r.f < best.f) best = r;
      break;
    }
    best = r;
  }
  if (!std::isfinite(best.f))
    throw std::runtime_error("fit_ansatz: no start converged; best residual is non-finite");
  return detail::ansatz_from_u(best.x, best.f, true);
}

// ---- bootstrap ----

struct BootstrapBand {
  double p10 = 0.0;
  double p90 = 0.0;
};

// Nearest-rank percentile on a sorted copy.
inline double percentile_nearest_rank(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("percentile of empty set");
  std::sort(v.begin(), v.end());
  const size_t rank = static_cast<size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::max<size_t>(1, std::min(rank, v.size())) - 1];
}

// Resamples `items` with replacement n times, refits, and reports 10th/90th
// nearest-rank percentiles per coefficient. Each resample draws from its own
// index-derived stream, so the result is identical for any thread count.
// Failed refits are skipped; more than 20% failures is an error.
template <typename T, typename Fit>
std::map<std::string, BootstrapBand> bootstrap(const std::vector<T>& items, Fit fit, int n,
                                               std::uint64_t seed, int n_threads = 1) {
  if (items.size() < 3) throw std::invalid_argument("bootstrap: need at least 3 items");
  std::vector<std::optional<std::map<std::string, double>>> results(n);
  auto run_range = [&](int lo, int hi) {
    for (int rep = lo; rep < hi; ++rep) {
      Rng rng(seed ^ (static_cast<std::uint64_t>(rep) + 1) * 0x9e3779b97f4a7c15ULL);
      std::vector<T> resample;
      resample.reserve(items.size());
      for (size_t i = 0; i < items.size(); ++i)
        resample.push_back(items[rng.uniform_index(items.size())]);
      try {
        results[rep] = fit(resample);
      } catch (const std::exception&) {
        results[rep] = std::nullopt;
      }
    }
  };
  if (n_threads <= 1) {
    run_range(0, n);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t)
      pool.emplace_back(run_range, t * chunk, std::min(n, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  std::map<std::string, std::vector<double>> samples;
  int failures = 0;
  for (const auto& r : results) {
    if (!r) {
      ++failures;
      continue;
    }
    for (const auto& [k, v] : *r) samples[k].push_back(v);
  }
  if (failures * 5 > n)
    throw std::runtime_error("bootstrap: " + std::to_string(failures) + " of " + std::to_string(n) +
                             " resamples failed to fit");
  std::map<std::string, BootstrapBand> bands;
  for (const auto& [k, v] : samples)
    bands[k] = {percentile_nearest_rank(v, 0.10), percentile_nearest_rank(v, 0.90)};
  return bands;
}

}  // namespace molepot
