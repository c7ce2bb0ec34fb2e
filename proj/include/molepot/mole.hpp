#pragma once

// Mixture of Linear Experts: a convex combination of linear maps whose
// coefficients come from global (position-independent) system features.
// Because the experts are linear, the mixture collapses to a single matrix
// once the coefficients are fixed, which is what merge() computes.

#include <optional>
#include <span>

#include "molepot/grad.hpp"

namespace molepot {

struct MoleLayer {
  std::vector<Matrix> experts;  // K matrices, identical [out x in] shape
  std::optional<Matrix> bias;   // shared across experts, [1 x out]

  int n_experts() const { return static_cast<int>(experts.size()); }
  int out_dim() const { return experts.at(0).rows; }
  int in_dim() const { return experts.at(0).cols; }

  void validate() const {
    if (experts.empty()) throw std::invalid_argument("MoleLayer: needs at least one expert");
    for (const auto& w : experts)
      if (!w.same_shape(experts[0]))
        throw std::invalid_argument("MoleLayer: experts must share one shape");
    if (bias && (bias->rows != 1 || bias->cols != out_dim()))
      throw std::invalid_argument("MoleLayer: bias shape mismatch");
  }
};

struct RouterOutput {
  std::vector<double> alpha;

  void validate() const {
    double sum = 0.0;
    for (double a : alpha) {
      if (a < 0.0 || a > 1.0) throw std::invalid_argument("alpha entries must lie in [0,1]");
      sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("alpha must sum to 1");
  }
};

// Concatenated composition/charge/spin/task embedding row. By construction
// this never sees positions or cell, so routing is constant along any
// trajectory of a fixed composition.
struct GlobalEmbedding {
  std::vector<double> values;
};

struct RouterMlp {
  std::vector<Matrix> weights;  // 3 hidden layers + output projection
  std::vector<Matrix> biases;

  int input_dim() const { return weights.at(0).cols; }
  int n_experts() const { return weights.back().rows; }
};

// Router MLP on the tape: 3 SiLU hidden layers, linear projection, softmax.
inline Tape::NodeId route_taped(Tape& tape, Tape::NodeId embedding_row,
                                std::span<const Tape::NodeId> weights,
                                std::span<const Tape::NodeId> biases) {
  Tape::NodeId h = embedding_row;
  for (size_t l = 0; l + 1 < weights.size(); ++l)
    h = tape.silu(tape.add_row(tape.matmul_nt(h, weights[l]), biases[l]));
  h = tape.add_row(tape.matmul_nt(h, weights.back()), biases.back());
  return tape.softmax(h);
}

inline RouterOutput route(const GlobalEmbedding& embedding, const RouterMlp& router) {
  if (static_cast<int>(embedding.values.size()) != router.input_dim())
    throw std::invalid_argument("route: embedding width does not match router input");
  Tape tape;
  std::vector<Tape::NodeId> w, b;
  for (const auto& m : router.weights) w.push_back(tape.constant(m));
  for (const auto& m : router.biases) b.push_back(tape.constant(m));
  const auto x = tape.constant(Matrix(1, static_cast<int>(embedding.values.size()), embedding.values));
  const auto out = route_taped(tape, x, w, b);
  return RouterOutput{tape.value(out).v};
}

enum class MixturePath {
  PerExpert,  // literal sum over experts: y = sum_k alpha_k (W_k x)
  Premerged,  // fold alpha into one matrix first, then one matmul
};

// Mixture application on the tape. `x` has samples as rows, so each expert
// application is matmul_nt. Both paths are differentiable w.r.t. x, the
// experts, and alpha.
inline Tape::NodeId mole_apply_taped(Tape& tape, std::span<const Tape::NodeId> experts,
                                     Tape::NodeId alpha_row, Tape::NodeId x,
                                     Tape::NodeId shared_bias = -1,
                                     MixturePath path = MixturePath::PerExpert) {
  const int k = static_cast<int>(experts.size());
  Tape::NodeId y = -1;
  if (k == 1) {
    y = tape.matmul_nt(x, experts[0]);
  } else if (path == MixturePath::PerExpert) {
    for (int i = 0; i < k; ++i) {
      const auto ai = tape.slice_cols(alpha_row, i, 1);
      const auto yi = tape.scale_by_scalar(tape.matmul_nt(x, experts[i]), ai);
      y = (y < 0) ? yi : tape.add(y, yi);
    }
  } else {
    Tape::NodeId merged = -1;
    for (int i = 0; i < k; ++i) {
      const auto ai = tape.slice_cols(alpha_row, i, 1);
      const auto wi = tape.scale_by_scalar(experts[i], ai);
      merged = (merged < 0) ? wi : tape.add(merged, wi);
    }
    y = tape.matmul_nt(x, merged);
  }
  if (shared_bias >= 0) y = tape.add_row(y, shared_bias);
  return y;
}

// y = sum_k alpha_k (W_k x) for a single input vector.
inline std::vector<double> apply_mixture(const MoleLayer& layer, const RouterOutput& alpha,
                                         std::span<const double> x) {
  layer.validate();
  if (static_cast<int>(alpha.alpha.size()) != layer.n_experts())
    throw std::invalid_argument("apply_mixture: alpha size mismatch");
  if (static_cast<int>(x.size()) != layer.in_dim())
    throw std::invalid_argument("apply_mixture: input size mismatch");
  Tape tape;
  std::vector<Tape::NodeId> experts;
  for (const auto& w : layer.experts) experts.push_back(tape.constant(w));
  const auto a = tape.constant(Matrix(1, layer.n_experts(), alpha.alpha));
  const auto xv = tape.constant(Matrix(1, layer.in_dim(), {x.begin(), x.end()}));
  Tape::NodeId bias = -1;
  if (layer.bias) bias = tape.constant(*layer.bias);
  const auto y = mole_apply_taped(tape, experts, a, xv, bias, MixturePath::PerExpert);
  return tape.value(y).v;
}

// W* = sum_k alpha_k W_k
inline Matrix merge(const MoleLayer& layer, const RouterOutput& alpha) {
  layer.validate();
  alpha.validate();
  if (static_cast<int>(alpha.alpha.size()) != layer.n_experts())
    throw std::invalid_argument("merge: alpha size mismatch");
  Matrix out(layer.out_dim(), layer.in_dim());
  for (int k = 0; k < layer.n_experts(); ++k) {
    const double a = alpha.alpha[k];
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += a * layer.experts[k].v[i];
  }
  return out;
}

}  // namespace molepot
