#include <catch2/catch_amalgamated.hpp>

#include "molepot/mole.hpp"

using namespace molepot;

namespace {

Matrix random_matrix(Rng& rng, int r, int c) {
  Matrix m(r, c);
  for (auto& v : m.v) v = rng.normal();
  return m;
}

RouterOutput random_alpha(Rng& rng, int k) {
  RouterOutput a;
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    a.alpha.push_back(rng.uniform(0.01, 1.0));
    sum += a.alpha.back();
  }
  for (auto& x : a.alpha) x /= sum;
  return a;
}

MoleLayer random_layer(Rng& rng, int k, int out, int in, bool bias = false) {
  MoleLayer l;
  for (int i = 0; i < k; ++i) l.experts.push_back(random_matrix(rng, out, in));
  if (bias) l.bias = random_matrix(rng, 1, out);
  return l;
}

// independent of the tape path: plain triple loop
std::vector<double> naive_mixture(const MoleLayer& layer, const RouterOutput& alpha,
                                  const std::vector<double>& x) {
  std::vector<double> y(layer.out_dim(), 0.0);
  for (int k = 0; k < layer.n_experts(); ++k)
    for (int i = 0; i < layer.out_dim(); ++i)
      for (int j = 0; j < layer.in_dim(); ++j)
        y[i] += alpha.alpha[k] * layer.experts[k](i, j) * x[j];
  if (layer.bias)
    for (int i = 0; i < layer.out_dim(); ++i) y[i] += layer.bias->v[i];
  return y;
}

RouterMlp zero_router(int input_dim, int hidden, int k) {
  RouterMlp r;
  r.weights = {Matrix(hidden, input_dim), Matrix(hidden, hidden), Matrix(hidden, hidden),
               Matrix(k, hidden)};
  r.biases = {Matrix(1, hidden), Matrix(1, hidden), Matrix(1, hidden), Matrix(1, k)};
  return r;
}

}  // namespace

TEST_CASE("zero-initialized router yields uniform coefficients") {
  Rng rng(3);
  const auto router = zero_router(12, 8, 5);
  GlobalEmbedding emb;
  for (int i = 0; i < 12; ++i) emb.values.push_back(rng.normal());
  const auto out = route(emb, router);
  for (double a : out.alpha) CHECK(a == Catch::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("routing is a pure function of embedding and parameters") {
  Rng rng(5);
  auto router = zero_router(8, 6, 4);
  for (auto& w : router.weights)
    for (auto& v : w.v) v = 0.3 * rng.normal();
  GlobalEmbedding emb;
  for (int i = 0; i < 8; ++i) emb.values.push_back(rng.normal());
  const auto a = route(emb, router);
  const auto b = route(emb, router);
  CHECK(a.alpha == b.alpha);  // bitwise
}

TEST_CASE("router output is a valid distribution over 1000 random samples") {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng.uniform_index(7));
    auto router = zero_router(10, 8, k);
    for (auto& w : router.weights)
      for (auto& v : w.v) v = rng.normal();
    GlobalEmbedding emb;
    for (int i = 0; i < 10; ++i) emb.values.push_back(2.0 * rng.normal());
    const auto out = route(emb, router);
    REQUIRE(static_cast<int>(out.alpha.size()) == k);
    double sum = 0.0;
    for (double a : out.alpha) {
      REQUIRE(a >= 0.0);
      REQUIRE(a <= 1.0);
      sum += a;
    }
    REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_NOTHROW(out.validate());
  }
}

TEST_CASE("router embedding width mismatch is an error") {
  const auto router = zero_router(8, 6, 4);
  GlobalEmbedding emb;
  emb.values.assign(9, 0.0);
  CHECK_THROWS(route(emb, router));
}

TEST_CASE("alpha is differentiable in router parameters") {
  Rng rng(11);
  const int in = 6, hidden = 5, k = 3;
  std::vector<Matrix> ws = {random_matrix(rng, hidden, in), random_matrix(rng, hidden, hidden),
                            random_matrix(rng, hidden, hidden), random_matrix(rng, k, hidden)};
  std::vector<Matrix> bs = {Matrix(1, hidden), Matrix(1, hidden), Matrix(1, hidden), Matrix(1, k)};
  const Matrix emb = random_matrix(rng, 1, in);
  const Matrix wdot = random_matrix(rng, 1, k);

  auto eval = [&](const std::vector<Matrix>& weights, Tape* grad_tape, Tape::NodeId* w0_leaf) {
    Tape local;
    Tape& t = grad_tape ? *grad_tape : local;
    std::vector<Tape::NodeId> wn, bn;
    for (size_t i = 0; i < weights.size(); ++i)
      wn.push_back(i == 0 ? t.leaf(weights[i]) : t.constant(weights[i]));
    for (const auto& b : bs) bn.push_back(t.constant(b));
    if (w0_leaf) *w0_leaf = wn[0];
    const auto alpha = route_taped(t, t.constant(emb), wn, bn);
    return t.sum_all(t.mul(alpha, t.constant(wdot)));
  };

  Tape tape;
  Tape::NodeId w0 = -1;
  const auto out = eval(ws, &tape, &w0);
  const auto g = tape.gradient(out, {w0})[0];
  const double h = 1e-6;
  for (size_t i = 0; i < ws[0].size(); i += 7) {  // sample of entries
    auto wp = ws, wm = ws;
    wp[0].v[i] += h;
    wm[0].v[i] -= h;
    Tape tp, tm;
    const double fp = tp.value(eval(wp, &tp, nullptr)).v[0];
    const double fm = tm.value(eval(wm, &tm, nullptr)).v[0];
    const double fd = (fp - fm) / (2.0 * h);
    CHECK_THAT(g.v[i], Catch::Matchers::WithinAbs(fd, 1e-6 * (1.0 + std::abs(fd))));
  }
}

TEST_CASE("single-expert mixture is the plain linear map") {
  Rng rng(13);
  const auto layer = random_layer(rng, 1, 4, 3);
  std::vector<double> x = {0.5, -1.0, 2.0};
  const auto y = apply_mixture(layer, RouterOutput{{1.0}}, x);
  for (int i = 0; i < 4; ++i) {
    double want = 0.0;
    for (int j = 0; j < 3; ++j) want += layer.experts[0](i, j) * x[j];
    CHECK(y[i] == Catch::Approx(want).margin(1e-15));
  }
}

TEST_CASE("identical experts collapse to one map for any alpha") {
  Rng rng(17);
  MoleLayer layer;
  const Matrix w = random_matrix(rng, 5, 5);
  layer.experts = {w, w};
  std::vector<double> x(5);
  for (auto& v : x) v = rng.normal();
  for (int trial = 0; trial < 5; ++trial) {
    const auto alpha = random_alpha(rng, 2);
    const auto y = apply_mixture(layer, alpha, x);
    const auto y1 = apply_mixture(MoleLayer{{w}, {}}, RouterOutput{{1.0}}, x);
    for (int i = 0; i < 5; ++i) CHECK(y[i] == Catch::Approx(y1[i]).epsilon(1e-13));
  }
}

TEST_CASE("mixture equals the independent naive sum") {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 3;
    const auto layer = random_layer(rng, k, 4, 6, trial % 2 == 0);
    const auto alpha = random_alpha(rng, k);
    std::vector<double> x(6);
    for (auto& v : x) v = rng.normal();
    const auto got = apply_mixture(layer, alpha, x);
    const auto want = naive_mixture(layer, alpha, x);
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == Catch::Approx(want[i]).epsilon(1e-12).margin(1e-13));
  }
}

TEST_CASE("one-hot alpha merges to the selected expert") {
  Rng rng(23);
  const auto layer = random_layer(rng, 4, 3, 3);
  RouterOutput alpha{{0.0, 0.0, 1.0, 0.0}};
  const auto w = merge(layer, alpha);
  CHECK(w.v == layer.experts[2].v);
}

TEST_CASE("half-half merge of I and 2I is 1.5I") {
  MoleLayer layer;
  Matrix i3(3, 3), i6(3, 3);
  for (int d = 0; d < 3; ++d) {
    i3(d, d) = 1.0;
    i6(d, d) = 2.0;
  }
  layer.experts = {i3, i6};
  const auto w = merge(layer, RouterOutput{{0.5, 0.5}});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) CHECK(w(r, c) == (r == c ? 1.5 : 0.0));
}

TEST_CASE("merged path matches the mixture path to 1e-12 relative") {
  Rng rng(29);
  const auto layer = random_layer(rng, 8, 16, 16);
  for (int trial = 0; trial < 100; ++trial) {
    const auto alpha = random_alpha(rng, 8);
    const auto w = merge(layer, alpha);
    std::vector<double> x(16);
    for (auto& v : x) v = rng.normal();
    const auto mix = apply_mixture(layer, alpha, x);
    for (int i = 0; i < 16; ++i) {
      double merged = 0.0;
      for (int j = 0; j < 16; ++j) merged += w(i, j) * x[j];
      REQUIRE(std::abs(merged - mix[i]) <= 1e-12 * (1.0 + std::abs(mix[i])));
    }
  }
}

TEST_CASE("merge equivalence holds over 1000 random triples") {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(rng.uniform_index(8));
    const int dim = 2 + static_cast<int>(rng.uniform_index(6));
    const auto layer = random_layer(rng, k, dim, dim);
    const auto alpha = random_alpha(rng, k);
    std::vector<double> x(dim);
    for (auto& v : x) v = rng.normal();
    const auto mix = apply_mixture(layer, alpha, x);
    const auto w = merge(layer, alpha);
    for (int i = 0; i < dim; ++i) {
      double merged = 0.0;
      for (int j = 0; j < dim; ++j) merged += w(i, j) * x[j];
      REQUIRE(std::abs(merged - mix[i]) <= 1e-12 * (1.0 + std::abs(mix[i])));
    }
  }
}

TEST_CASE("layer validation rejects mismatched experts and bad alpha") {
  Rng rng(37);
  MoleLayer bad;
  bad.experts = {random_matrix(rng, 3, 3), random_matrix(rng, 3, 4)};
  CHECK_THROWS(bad.validate());
  MoleLayer empty;
  CHECK_THROWS(empty.validate());
  RouterOutput nonsum{{0.3, 0.3}};
  CHECK_THROWS(nonsum.validate());
  RouterOutput neg{{-0.1, 1.1}};
  CHECK_THROWS(neg.validate());
}

TEST_CASE("taped per-expert and premerged paths agree") {
  Rng rng(41);
  const int k = 5, dim = 8, rows = 7;
  const auto layer = random_layer(rng, k, dim, dim);
  const auto alpha = random_alpha(rng, k);
  const Matrix x = random_matrix(rng, rows, dim);

  auto run = [&](MixturePath path) {
    Tape t;
    std::vector<Tape::NodeId> experts;
    for (const auto& w : layer.experts) experts.push_back(t.constant(w));
    const auto a = t.constant(Matrix(1, k, alpha.alpha));
    const auto y = mole_apply_taped(t, experts, a, t.constant(x), -1, path);
    return t.value(y);
  };
  const auto y1 = run(MixturePath::PerExpert);
  const auto y2 = run(MixturePath::Premerged);
  for (size_t i = 0; i < y1.size(); ++i)
    CHECK(y1.v[i] == Catch::Approx(y2.v[i]).epsilon(1e-12).margin(1e-13));
}
