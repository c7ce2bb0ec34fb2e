#pragma once

// Reverse-mode tape over the primitives the potential needs. Values are
// dense row-major matrices; node ids are creation-ordered, so reverse id
// order is reverse topological order.
//
// Two backward modes:
//   backward()/gradient(): numeric adjoint sweep, visits each node once.
//   grad_nodes(): emits every VJP as tape primitives, so the returned
//     gradients are themselves differentiable by a later numeric sweep.
//     This is what makes force labels usable in a training loss: the force
//     is recorded on the tape, the loss closes over it, and one numeric
//     backward yields parameter gradients through the force computation.

#include <memory>

#include "molepot/core.hpp"

namespace molepot {

enum class Op {
  Leaf, Const,
  Add, Sub, Mul, Scale, ScaleByScalar, AddRow,
  MatMulNT, MatMulNN, MatMulTN,
  ScaleRows, BroadcastCols, BroadcastRows, BroadcastAll,
  RowSum, ColSum, SumAll,
  Gather, ScatterAdd, ConcatCols, SliceCols,
  Softmax, Unary, RowNorm,
  Rbf, RbfGrad, Envelope, EnvelopeGrad,
};

enum class UnaryKind { SiLU, SiLUGrad, Recip, RecipGrad, Rsqrt, RsqrtGrad };

struct RbfSpec {
  std::vector<double> centers;
  double gamma = 1.0;  // 1/(2 s^2)
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double unary_eval(UnaryKind k, double x) {
  switch (k) {
    case UnaryKind::SiLU: return x * sigmoid(x);
    case UnaryKind::SiLUGrad: {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case UnaryKind::Recip: return 1.0 / x;
    case UnaryKind::RecipGrad: return -1.0 / (x * x);
    case UnaryKind::Rsqrt: return 1.0 / std::sqrt(x);
    case UnaryKind::RsqrtGrad: return -0.5 / (x * std::sqrt(x));
  }
  return 0.0;
}

// d/dx of unary_eval(k, x); needed by the numeric sweep when recorded
// gradient nodes (SiLUGrad etc.) are themselves differentiated.
inline double unary_deriv(UnaryKind k, double x) {
  switch (k) {
    case UnaryKind::SiLU: return unary_eval(UnaryKind::SiLUGrad, x);
    case UnaryKind::SiLUGrad: {
      const double s = sigmoid(x);
      return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
    }
    case UnaryKind::Recip: return unary_eval(UnaryKind::RecipGrad, x);
    case UnaryKind::RecipGrad: return 2.0 / (x * x * x);
    case UnaryKind::Rsqrt: return unary_eval(UnaryKind::RsqrtGrad, x);
    case UnaryKind::RsqrtGrad: return 0.75 / (x * x * std::sqrt(x));
  }
  return 0.0;
}

inline UnaryKind unary_grad_kind(UnaryKind k) {
  switch (k) {
    case UnaryKind::SiLU: return UnaryKind::SiLUGrad;
    case UnaryKind::Recip: return UnaryKind::RecipGrad;
    case UnaryKind::Rsqrt: return UnaryKind::RsqrtGrad;
    default:
      throw std::logic_error("recorded gradient of a derivative kernel is not supported");
  }
}

inline double envelope_value(double r, double rc) {
  if (r >= rc) return 0.0;
  const double u = r / rc;
  const double t = 1.0 - u * u;
  return t * t * t;
}

inline double envelope_grad(double r, double rc) {
  if (r >= rc) return 0.0;
  const double u = r / rc;
  const double t = 1.0 - u * u;
  return -6.0 * u * t * t / rc;
}

inline double envelope_grad2(double r, double rc) {
  if (r >= rc) return 0.0;
  const double u = r / rc;
  const double t = 1.0 - u * u;
  return -6.0 * t * (1.0 - 5.0 * u * u) / (rc * rc);
}

}  // namespace detail

class Tape {
 public:
  using NodeId = int;

  struct Node {
    Op op;
    UnaryKind ufn = UnaryKind::SiLU;
    int a = -1, b = -1;
    Matrix val;
    std::shared_ptr<const std::vector<int>> idx;  // Gather/ScatterAdd
    std::shared_ptr<const RbfSpec> rbf;
    double c0 = 0.0;       // Scale factor / Envelope cutoff
    int i0 = 0, i1 = 0;    // SliceCols start/len
    bool needs_grad = false;

    Node(Op o, UnaryKind u, int in_a, int in_b, Matrix value)
        : op(o), ufn(u), a(in_a), b(in_b), val(std::move(value)) {}
  };

  size_t size() const { return nodes_.size(); }
  const Matrix& value(NodeId id) const { return at(id).val; }
  const Node& node(NodeId id) const { return at(id); }

  NodeId leaf(Matrix m) { return push({Op::Leaf, UnaryKind::SiLU, -1, -1, std::move(m)}, true); }
  NodeId constant(Matrix m) { return push({Op::Const, UnaryKind::SiLU, -1, -1, std::move(m)}, false); }
  NodeId scalar_constant(double x) { return constant(Matrix(1, 1, {x})); }

  NodeId add(NodeId a, NodeId b) { return binary_same_shape(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary_same_shape(Op::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary_same_shape(Op::Mul, a, b); }

  NodeId scale(NodeId a, double c) {
    Node n{Op::Scale, UnaryKind::SiLU, a, -1, Matrix(at(a).val.rows, at(a).val.cols)};
    n.c0 = c;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.v[i] = c * at(a).val.v[i];
    FlopCounter::add(n.val.size());
    return push(std::move(n), at(a).needs_grad);
  }

  // y = s * a where s is a 1x1 node
  NodeId scale_by_scalar(NodeId a, NodeId s) {
    check_shape(s, 1, 1, "scale_by_scalar scalar");
    Node n{Op::ScaleByScalar, UnaryKind::SiLU, a, s, Matrix(at(a).val.rows, at(a).val.cols)};
    const double c = at(s).val.v[0];
    for (size_t i = 0; i < n.val.size(); ++i) n.val.v[i] = c * at(a).val.v[i];
    FlopCounter::add(n.val.size());
    return push(std::move(n), at(a).needs_grad || at(s).needs_grad);
  }

  // a[r x c] + row[1 x c] broadcast over rows
  NodeId add_row(NodeId a, NodeId row) {
    const auto& av = at(a).val;
    check_shape(row, 1, av.cols, "add_row bias");
    Node n{Op::AddRow, UnaryKind::SiLU, a, row, Matrix(av.rows, av.cols)};
    for (int r = 0; r < av.rows; ++r)
      for (int c = 0; c < av.cols; ++c) n.val(r, c) = av(r, c) + at(row).val(0, c);
    FlopCounter::add(n.val.size());
    return push(std::move(n), at(a).needs_grad || at(row).needs_grad);
  }

  // y = x * w^T : x[r x k], w[m x k] -> [r x m]. The standard linear map.
  NodeId matmul_nt(NodeId x, NodeId w) {
    const auto& xv = at(x).val;
    const auto& wv = at(w).val;
    if (xv.cols != wv.cols) throw std::invalid_argument("matmul_nt: inner dim mismatch");
    Node n{Op::MatMulNT, UnaryKind::SiLU, x, w, Matrix(xv.rows, wv.rows)};
    for (int r = 0; r < xv.rows; ++r) {
      const double* xr = &xv.v[static_cast<size_t>(r) * xv.cols];
      for (int m = 0; m < wv.rows; ++m) {
        const double* wm = &wv.v[static_cast<size_t>(m) * wv.cols];
        double acc = 0.0;
        for (int k = 0; k < xv.cols; ++k) acc += xr[k] * wm[k];
        n.val(r, m) = acc;
      }
    }
    FlopCounter::add(2ull * xv.rows * wv.rows * xv.cols);
    return push(std::move(n), at(x).needs_grad || at(w).needs_grad);
  }

  // y = x * w : x[r x k], w[k x m] -> [r x m]
  NodeId matmul_nn(NodeId x, NodeId w) {
    const auto& xv = at(x).val;
    const auto& wv = at(w).val;
    if (xv.cols != wv.rows) throw std::invalid_argument("matmul_nn: inner dim mismatch");
    Node n{Op::MatMulNN, UnaryKind::SiLU, x, w, Matrix(xv.rows, wv.cols)};
    for (int r = 0; r < xv.rows; ++r)
      for (int k = 0; k < xv.cols; ++k) {
        const double xv_rk = xv(r, k);
        if (xv_rk == 0.0) continue;
        const double* wk = &wv.v[static_cast<size_t>(k) * wv.cols];
        double* yr = &n.val.v[static_cast<size_t>(r) * wv.cols];
        for (int m = 0; m < wv.cols; ++m) yr[m] += xv_rk * wk[m];
      }
    FlopCounter::add(2ull * xv.rows * xv.cols * wv.cols);
    return push(std::move(n), at(x).needs_grad || at(w).needs_grad);
  }

  // y = a^T * b : a[k x r], b[k x m] -> [r x m]
  NodeId matmul_tn(NodeId a, NodeId b) {
    const auto& av = at(a).val;
    const auto& bv = at(b).val;
    if (av.rows != bv.rows) throw std::invalid_argument("matmul_tn: inner dim mismatch");
    Node n{Op::MatMulTN, UnaryKind::SiLU, a, b, Matrix(av.cols, bv.cols)};
    for (int k = 0; k < av.rows; ++k) {
      const double* ak = &av.v[static_cast<size_t>(k) * av.cols];
      const double* bk = &bv.v[static_cast<size_t>(k) * bv.cols];
      for (int r = 0; r < av.cols; ++r) {
        const double ar = ak[r];
        if (ar == 0.0) continue;
        double* yr = &n.val.v[static_cast<size_t>(r) * bv.cols];
        for (int m = 0; m < bv.cols; ++m) yr[m] += ar * bk[m];
      }
    }
    FlopCounter::add(2ull * av.rows * av.cols * bv.cols);
    return push(std::move(n), at(a).needs_grad || at(b).needs_grad);
  }

  // rows of a scaled by column vector s[r x 1]
  NodeId scale_rows(NodeId a, NodeId s) {
    const auto& av = at(a).val;
    check_shape(s, av.rows, 1, "scale_rows scale");
    Node n{Op::ScaleRows, UnaryKind::SiLU, a, s, Matrix(av.rows, av.cols)};
    for (int r = 0; r < av.rows; ++r) {
      const double sr = at(s).val.v[r];
      for (int c = 0; c < av.cols; ++c) n.val(r, c) = sr * av(r, c);
    }
    FlopCounter::add(n.val.size());
    return push(std::move(n), at(a).needs_grad || at(s).needs_grad);
  }

  NodeId broadcast_cols(NodeId s, int cols) {
    const auto& sv = at(s).val;
    if (sv.cols != 1) throw std::invalid_argument("broadcast_cols: input must be a column");
    Node n{Op::BroadcastCols, UnaryKind::SiLU, s, -1, Matrix(sv.rows, cols)};
    for (int r = 0; r < sv.rows; ++r)
      for (int c = 0; c < cols; ++c) n.val(r, c) = sv.v[r];
    return push(std::move(n), at(s).needs_grad);
  }

  NodeId broadcast_rows(NodeId row, int rows) {
    const auto& rv = at(row).val;
    if (rv.rows != 1) throw std::invalid_argument("broadcast_rows: input must be a row");
    Node n{Op::BroadcastRows, UnaryKind::SiLU, row, -1, Matrix(rows, rv.cols)};
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < rv.cols; ++c) n.val(r, c) = rv.v[c];
    return push(std::move(n), at(row).needs_grad);
  }

  NodeId broadcast_all(NodeId s, int rows, int cols) {
    check_shape(s, 1, 1, "broadcast_all scalar");
    Node n{Op::BroadcastAll, UnaryKind::SiLU, s, -1, Matrix(rows, cols)};
    const double x = at(s).val.v[0];
    for (auto& y : n.val.v) y = x;
    return push(std::move(n), at(s).needs_grad);
  }

  NodeId row_sum(NodeId a) {
    const auto& av = at(a).val;
    Node n{Op::RowSum, UnaryKind::SiLU, a, -1, Matrix(av.rows, 1)};
    for (int r = 0; r < av.rows; ++r) {
      double acc = 0.0;
      for (int c = 0; c < av.cols; ++c) acc += av(r, c);
      n.val.v[r] = acc;
    }
    FlopCounter::add(av.size());
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId col_sum(NodeId a) {
    const auto& av = at(a).val;
    Node n{Op::ColSum, UnaryKind::SiLU, a, -1, Matrix(1, av.cols)};
    for (int r = 0; r < av.rows; ++r)
      for (int c = 0; c < av.cols; ++c) n.val.v[c] += av(r, c);
    FlopCounter::add(av.size());
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId sum_all(NodeId a) {
    const auto& av = at(a).val;
    Node n{Op::SumAll, UnaryKind::SiLU, a, -1, Matrix(1, 1)};
    double acc = 0.0;
    for (double x : av.v) acc += x;
    n.val.v[0] = acc;
    FlopCounter::add(av.size());
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId gather(NodeId a, std::shared_ptr<const std::vector<int>> idx) {
    const auto& av = at(a).val;
    Node n{Op::Gather, UnaryKind::SiLU, a, -1, Matrix(static_cast<int>(idx->size()), av.cols)};
    n.idx = idx;
    for (size_t r = 0; r < idx->size(); ++r)
      std::memcpy(&n.val.v[r * av.cols], &av.v[static_cast<size_t>((*idx)[r]) * av.cols],
                  sizeof(double) * av.cols);
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId scatter_add(NodeId a, std::shared_ptr<const std::vector<int>> idx, int n_out) {
    const auto& av = at(a).val;
    if (static_cast<size_t>(av.rows) != idx->size())
      throw std::invalid_argument("scatter_add: index length mismatch");
    Node n{Op::ScatterAdd, UnaryKind::SiLU, a, -1, Matrix(n_out, av.cols)};
    n.idx = idx;
    for (int r = 0; r < av.rows; ++r) {
      double* out = &n.val.v[static_cast<size_t>((*idx)[r]) * av.cols];
      const double* in = &av.v[static_cast<size_t>(r) * av.cols];
      for (int c = 0; c < av.cols; ++c) out[c] += in[c];
    }
    FlopCounter::add(av.size());
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    const auto& av = at(a).val;
    const auto& bv = at(b).val;
    if (av.rows != bv.rows) throw std::invalid_argument("concat_cols: row mismatch");
    Node n{Op::ConcatCols, UnaryKind::SiLU, a, b, Matrix(av.rows, av.cols + bv.cols)};
    for (int r = 0; r < av.rows; ++r) {
      std::memcpy(&n.val(r, 0), &av(r, 0), sizeof(double) * av.cols);
      std::memcpy(&n.val(r, av.cols), &bv(r, 0), sizeof(double) * bv.cols);
    }
    return push(std::move(n), at(a).needs_grad || at(b).needs_grad);
  }

  NodeId slice_cols(NodeId a, int start, int len) {
    const auto& av = at(a).val;
    if (start < 0 || start + len > av.cols) throw std::invalid_argument("slice_cols: out of range");
    Node n{Op::SliceCols, UnaryKind::SiLU, a, -1, Matrix(av.rows, len)};
    n.i0 = start;
    n.i1 = len;
    for (int r = 0; r < av.rows; ++r)
      std::memcpy(&n.val(r, 0), &av(r, start), sizeof(double) * len);
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId softmax(NodeId a) {
    const auto& av = at(a).val;
    Node n{Op::Softmax, UnaryKind::SiLU, a, -1, Matrix(av.rows, av.cols)};
    for (int r = 0; r < av.rows; ++r) {
      double mx = av(r, 0);
      for (int c = 1; c < av.cols; ++c) mx = std::max(mx, av(r, c));
      double z = 0.0;
      for (int c = 0; c < av.cols; ++c) z += (n.val(r, c) = std::exp(av(r, c) - mx));
      for (int c = 0; c < av.cols; ++c) n.val(r, c) /= z;
    }
    FlopCounter::add(7ull * av.size());
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId unary(UnaryKind k, NodeId a) {
    const auto& av = at(a).val;
    Node n{Op::Unary, k, a, -1, Matrix(av.rows, av.cols)};
    for (size_t i = 0; i < av.size(); ++i) n.val.v[i] = detail::unary_eval(k, av.v[i]);
    FlopCounter::add(6ull * av.size());
    return push(std::move(n), at(a).needs_grad);
  }

  NodeId silu(NodeId a) { return unary(UnaryKind::SiLU, a); }

  // per-row euclidean norm: [r x c] -> [r x 1]
  NodeId row_norm(NodeId a) {
    const auto& av = at(a).val;
    Node n{Op::RowNorm, UnaryKind::SiLU, a, -1, Matrix(av.rows, 1)};
    for (int r = 0; r < av.rows; ++r) {
      double acc = 0.0;
      for (int c = 0; c < av.cols; ++c) acc += av(r, c) * av(r, c);
      n.val.v[r] = std::sqrt(acc);
    }
    FlopCounter::add(2ull * av.size() + 4ull * av.rows);
    return push(std::move(n), at(a).needs_grad);
  }

  // gaussian radial basis: r[n x 1] -> [n x K]
  NodeId rbf(NodeId r, std::shared_ptr<const RbfSpec> spec) {
    const auto& rv = at(r).val;
    if (rv.cols != 1) throw std::invalid_argument("rbf: input must be a column of distances");
    const int K = static_cast<int>(spec->centers.size());
    Node n{Op::Rbf, UnaryKind::SiLU, r, -1, Matrix(rv.rows, K)};
    n.rbf = spec;
    for (int e = 0; e < rv.rows; ++e)
      for (int k = 0; k < K; ++k) {
        const double d = rv.v[e] - spec->centers[k];
        n.val(e, k) = std::exp(-spec->gamma * d * d);
      }
    FlopCounter::add(7ull * n.val.size());
    return push(std::move(n), at(r).needs_grad);
  }

  // dG/dr of the rbf node, same shape
  NodeId rbf_grad(NodeId r, std::shared_ptr<const RbfSpec> spec) {
    const auto& rv = at(r).val;
    const int K = static_cast<int>(spec->centers.size());
    Node n{Op::RbfGrad, UnaryKind::SiLU, r, -1, Matrix(rv.rows, K)};
    n.rbf = spec;
    for (int e = 0; e < rv.rows; ++e)
      for (int k = 0; k < K; ++k) {
        const double d = rv.v[e] - spec->centers[k];
        n.val(e, k) = -2.0 * spec->gamma * d * std::exp(-spec->gamma * d * d);
      }
    FlopCounter::add(9ull * n.val.size());
    return push(std::move(n), at(r).needs_grad);
  }

  // (1 - (r/rc)^2)^3 inside the cutoff, 0 outside; C^2 at the boundary
  NodeId envelope(NodeId r, double rc) {
    const auto& rv = at(r).val;
    Node n{Op::Envelope, UnaryKind::SiLU, r, -1, Matrix(rv.rows, rv.cols)};
    n.c0 = rc;
    for (size_t i = 0; i < rv.size(); ++i) n.val.v[i] = detail::envelope_value(rv.v[i], rc);
    FlopCounter::add(8ull * rv.size());
    return push(std::move(n), at(r).needs_grad);
  }

  NodeId envelope_grad(NodeId r, double rc) {
    const auto& rv = at(r).val;
    Node n{Op::EnvelopeGrad, UnaryKind::SiLU, r, -1, Matrix(rv.rows, rv.cols)};
    n.c0 = rc;
    for (size_t i = 0; i < rv.size(); ++i) n.val.v[i] = detail::envelope_grad(rv.v[i], rc);
    FlopCounter::add(8ull * rv.size());
    return push(std::move(n), at(r).needs_grad);
  }

  // ---- numeric backward ----

  // Adjoint sweep from a scalar output. Reverse id order is reverse
  // topological order; each node is visited at most once.
  void backward(NodeId out) {
    const auto& ov = at(out).val;
    if (ov.rows != 1 || ov.cols != 1) throw std::invalid_argument("backward: output must be scalar");
    adj_.assign(nodes_.size(), Matrix());
    adj_[out] = Matrix(1, 1, {1.0});
    for (int i = out; i >= 0; --i) {
      if (adj_[i].rows == 0 || !nodes_[i].needs_grad) continue;
      apply_vjp(i);
    }
  }

  // Gradient of a scalar node w.r.t. previously created nodes. Zero
  // matrices are returned for nodes the output does not depend on.
  std::vector<Matrix> gradient(NodeId out, const std::vector<NodeId>& wrt) {
    for (NodeId w : wrt)
      if (w < 0 || w >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument("gradient: node not on tape");
    backward(out);
    std::vector<Matrix> out_grads;
    out_grads.reserve(wrt.size());
    for (NodeId w : wrt) out_grads.push_back(adjoint(w));
    return out_grads;
  }

  // Adjoint of `id` after backward(); zero-filled if untouched.
  Matrix adjoint(NodeId id) const {
    if (id < 0 || id >= static_cast<int>(adj_.size()) || adj_[id].rows == 0)
      return Matrix(at(id).val.rows, at(id).val.cols);
    return adj_[id];
  }

  // ---- recorded backward ----

  // Emits the VJP chain for d(out)/d(wrt) as new tape nodes and returns
  // their ids. Only nodes on a wrt->out path are expanded.
  std::vector<NodeId> grad_nodes(NodeId out, const std::vector<NodeId>& wrt) {
    const auto& ov = at(out).val;
    if (ov.rows != 1 || ov.cols != 1) throw std::invalid_argument("grad_nodes: output must be scalar");
    const int n = out + 1;
    std::vector<char> dep(nodes_.size(), 0);
    for (NodeId w : wrt) {
      if (w < 0 || w >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument("grad_nodes: node not on tape");
      dep[w] = 1;
    }
    for (int i = 0; i < n; ++i) {
      const auto& nd = nodes_[i];
      if ((nd.a >= 0 && dep[nd.a]) || (nd.b >= 0 && dep[nd.b])) dep[i] = 1;
    }
    std::vector<char> anc(nodes_.size(), 0);
    anc[out] = 1;
    for (int i = out; i >= 0; --i) {
      if (!anc[i]) continue;
      const auto& nd = nodes_[i];
      if (nd.a >= 0) anc[nd.a] = 1;
      if (nd.b >= 0) anc[nd.b] = 1;
    }
    std::vector<NodeId> adj_id(nodes_.size(), -1);
    adj_id[out] = scalar_constant(1.0);
    auto active = [&](int i) { return dep[i] && anc[i]; };
    for (int i = out; i >= 0; --i) {
      if (!active(i) || adj_id[i] < 0) continue;
      emit_vjp(i, adj_id[i], dep, adj_id);
    }
    std::vector<NodeId> grads;
    grads.reserve(wrt.size());
    for (NodeId w : wrt) {
      if (adj_id[w] >= 0)
        grads.push_back(adj_id[w]);
      else
        grads.push_back(constant(Matrix(at(w).val.rows, at(w).val.cols)));
    }
    return grads;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Matrix> adj_;

  const Node& at(NodeId id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("tape: invalid node id");
    return nodes_[id];
  }

  void check_shape(NodeId id, int rows, int cols, const char* what) const {
    const auto& v = at(id).val;
    if (v.rows != rows || v.cols != cols)
      throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + ", got " + std::to_string(v.rows) + "x" +
                                  std::to_string(v.cols));
  }

  NodeId binary_same_shape(Op op, NodeId a, NodeId b) {
    const auto& av = at(a).val;
    const auto& bv = at(b).val;
    if (!av.same_shape(bv)) throw std::invalid_argument("shape mismatch in elementwise op");
    Node n{op, UnaryKind::SiLU, a, b, Matrix(av.rows, av.cols)};
    switch (op) {
      case Op::Add:
        for (size_t i = 0; i < av.size(); ++i) n.val.v[i] = av.v[i] + bv.v[i];
        break;
      case Op::Sub:
        for (size_t i = 0; i < av.size(); ++i) n.val.v[i] = av.v[i] - bv.v[i];
        break;
      case Op::Mul:
        for (size_t i = 0; i < av.size(); ++i) n.val.v[i] = av.v[i] * bv.v[i];
        break;
      default:
        throw std::logic_error("binary_same_shape: bad op");
    }
    FlopCounter::add(av.size());
    return push(std::move(n), at(a).needs_grad || at(b).needs_grad);
  }

  NodeId push(Node n, bool needs_grad) {
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void accum(int id, const Matrix& contribution) {
    if (!nodes_[id].needs_grad) return;
    if (adj_[id].rows == 0) {
      adj_[id] = contribution;
    } else {
      for (size_t i = 0; i < contribution.size(); ++i) adj_[id].v[i] += contribution.v[i];
    }
    FlopCounter::add(contribution.size());
  }

  void apply_vjp(int i);

  NodeId emit_accum(NodeId existing, NodeId contribution) {
    return existing < 0 ? contribution : add(existing, contribution);
  }

  void emit_vjp(int i, NodeId g, const std::vector<char>& dep, std::vector<NodeId>& adj_id);
};

// ---- numeric VJP rules ----

inline void Tape::apply_vjp(int i) {
  const Node& n = nodes_[i];
  const Matrix& g = adj_[i];
  auto in = [&](int id) -> const Matrix& { return nodes_[id].val; };
  switch (n.op) {
    case Op::Leaf:
    case Op::Const:
      break;
    case Op::Add:
      accum(n.a, g);
      accum(n.b, g);
      break;
    case Op::Sub: {
      accum(n.a, g);
      if (nodes_[n.b].needs_grad) {
        Matrix neg(g.rows, g.cols);
        for (size_t k = 0; k < g.size(); ++k) neg.v[k] = -g.v[k];
        accum(n.b, neg);
      }
      break;
    }
    case Op::Mul: {
      if (nodes_[n.a].needs_grad) {
        Matrix da(g.rows, g.cols);
        for (size_t k = 0; k < g.size(); ++k) da.v[k] = g.v[k] * in(n.b).v[k];
        FlopCounter::add(g.size());
        accum(n.a, da);
      }
      if (nodes_[n.b].needs_grad) {
        Matrix db(g.rows, g.cols);
        for (size_t k = 0; k < g.size(); ++k) db.v[k] = g.v[k] * in(n.a).v[k];
        FlopCounter::add(g.size());
        accum(n.b, db);
      }
      break;
    }
    case Op::Scale: {
      Matrix da(g.rows, g.cols);
      for (size_t k = 0; k < g.size(); ++k) da.v[k] = n.c0 * g.v[k];
      FlopCounter::add(g.size());
      accum(n.a, da);
      break;
    }
    case Op::ScaleByScalar: {
      if (nodes_[n.a].needs_grad) {
        Matrix da(g.rows, g.cols);
        const double s = in(n.b).v[0];
        for (size_t k = 0; k < g.size(); ++k) da.v[k] = s * g.v[k];
        FlopCounter::add(g.size());
        accum(n.a, da);
      }
      if (nodes_[n.b].needs_grad) {
        double acc = 0.0;
        for (size_t k = 0; k < g.size(); ++k) acc += g.v[k] * in(n.a).v[k];
        FlopCounter::add(2 * g.size());
        accum(n.b, Matrix(1, 1, {acc}));
      }
      break;
    }
    case Op::AddRow: {
      accum(n.a, g);
      if (nodes_[n.b].needs_grad) {
        Matrix db(1, g.cols);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < g.cols; ++c) db.v[c] += g(r, c);
        FlopCounter::add(g.size());
        accum(n.b, db);
      }
      break;
    }
    case Op::MatMulNT: {
      // y = x w^T: dx = g w ; dw = g^T x
      const Matrix& xv = in(n.a);
      const Matrix& wv = in(n.b);
      if (nodes_[n.a].needs_grad) {
        Matrix dx(xv.rows, xv.cols);
        for (int r = 0; r < g.rows; ++r)
          for (int m = 0; m < g.cols; ++m) {
            const double grm = g(r, m);
            if (grm == 0.0) continue;
            const double* wm = &wv.v[static_cast<size_t>(m) * wv.cols];
            double* dxr = &dx.v[static_cast<size_t>(r) * xv.cols];
            for (int k = 0; k < wv.cols; ++k) dxr[k] += grm * wm[k];
          }
        FlopCounter::add(2ull * g.size() * wv.cols);
        accum(n.a, dx);
      }
      if (nodes_[n.b].needs_grad) {
        Matrix dw(wv.rows, wv.cols);
        for (int r = 0; r < g.rows; ++r) {
          const double* xr = &xv.v[static_cast<size_t>(r) * xv.cols];
          for (int m = 0; m < g.cols; ++m) {
            const double grm = g(r, m);
            if (grm == 0.0) continue;
            double* dwm = &dw.v[static_cast<size_t>(m) * wv.cols];
            for (int k = 0; k < wv.cols; ++k) dwm[k] += grm * xr[k];
          }
        }
        FlopCounter::add(2ull * g.size() * xv.cols);
        accum(n.b, dw);
      }
      break;
    }
    case Op::MatMulNN: {
      // y = x w: dx = g w^T ; dw = x^T g
      const Matrix& xv = in(n.a);
      const Matrix& wv = in(n.b);
      if (nodes_[n.a].needs_grad) {
        Matrix dx(xv.rows, xv.cols);
        for (int r = 0; r < g.rows; ++r)
          for (int k = 0; k < wv.rows; ++k) {
            const double* wk = &wv.v[static_cast<size_t>(k) * wv.cols];
            const double* gr = &g.v[static_cast<size_t>(r) * g.cols];
            double acc = 0.0;
            for (int m = 0; m < g.cols; ++m) acc += gr[m] * wk[m];
            dx(r, k) = acc;
          }
        FlopCounter::add(2ull * g.size() * wv.rows);
        accum(n.a, dx);
      }
      if (nodes_[n.b].needs_grad) {
        Matrix dw(wv.rows, wv.cols);
        for (int r = 0; r < xv.rows; ++r) {
          const double* xr = &xv.v[static_cast<size_t>(r) * xv.cols];
          const double* gr = &g.v[static_cast<size_t>(r) * g.cols];
          for (int k = 0; k < xv.cols; ++k) {
            if (xr[k] == 0.0) continue;
            double* dwk = &dw.v[static_cast<size_t>(k) * wv.cols];
            for (int m = 0; m < g.cols; ++m) dwk[m] += xr[k] * gr[m];
          }
        }
        FlopCounter::add(2ull * g.size() * xv.cols);
        accum(n.b, dw);
      }
      break;
    }
    case Op::MatMulTN: {
      // y = a^T b: da = b g^T ; db = a g
      const Matrix& av = in(n.a);
      const Matrix& bv = in(n.b);
      if (nodes_[n.a].needs_grad) {
        Matrix da(av.rows, av.cols);
        for (int k = 0; k < bv.rows; ++k)
          for (int r = 0; r < g.rows; ++r) {
            const double* bk = &bv.v[static_cast<size_t>(k) * bv.cols];
            const double* gr = &g.v[static_cast<size_t>(r) * g.cols];
            double acc = 0.0;
            for (int m = 0; m < g.cols; ++m) acc += bk[m] * gr[m];
            da(k, r) = acc;
          }
        FlopCounter::add(2ull * g.size() * av.rows);
        accum(n.a, da);
      }
      if (nodes_[n.b].needs_grad) {
        Matrix db(bv.rows, bv.cols);
        for (int k = 0; k < av.rows; ++k) {
          const double* ak = &av.v[static_cast<size_t>(k) * av.cols];
          double* dbk = &db.v[static_cast<size_t>(k) * bv.cols];
          for (int r = 0; r < av.cols; ++r) {
            if (ak[r] == 0.0) continue;
            const double* gr = &g.v[static_cast<size_t>(r) * g.cols];
            for (int m = 0; m < g.cols; ++m) dbk[m] += ak[r] * gr[m];
          }
        }
        FlopCounter::add(2ull * g.size() * av.rows);
        accum(n.b, db);
      }
      break;
    }
    case Op::ScaleRows: {
      const Matrix& av = in(n.a);
      const Matrix& sv = in(n.b);
      if (nodes_[n.a].needs_grad) {
        Matrix da(av.rows, av.cols);
        for (int r = 0; r < av.rows; ++r)
          for (int c = 0; c < av.cols; ++c) da(r, c) = g(r, c) * sv.v[r];
        FlopCounter::add(g.size());
        accum(n.a, da);
      }
      if (nodes_[n.b].needs_grad) {
        Matrix ds(av.rows, 1);
        for (int r = 0; r < av.rows; ++r) {
          double acc = 0.0;
          for (int c = 0; c < av.cols; ++c) acc += g(r, c) * av(r, c);
          ds.v[r] = acc;
        }
        FlopCounter::add(2 * g.size());
        accum(n.b, ds);
      }
      break;
    }
    case Op::BroadcastCols: {
      Matrix da(in(n.a).rows, 1);
      for (int r = 0; r < g.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < g.cols; ++c) acc += g(r, c);
        da.v[r] = acc;
      }
      FlopCounter::add(g.size());
      accum(n.a, da);
      break;
    }
    case Op::BroadcastRows: {
      Matrix da(1, g.cols);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) da.v[c] += g(r, c);
      FlopCounter::add(g.size());
      accum(n.a, da);
      break;
    }
    case Op::BroadcastAll: {
      double acc = 0.0;
      for (double x : g.v) acc += x;
      FlopCounter::add(g.size());
      accum(n.a, Matrix(1, 1, {acc}));
      break;
    }
    case Op::RowSum: {
      Matrix da(in(n.a).rows, in(n.a).cols);
      for (int r = 0; r < da.rows; ++r)
        for (int c = 0; c < da.cols; ++c) da(r, c) = g.v[r];
      accum(n.a, da);
      break;
    }
    case Op::ColSum: {
      Matrix da(in(n.a).rows, in(n.a).cols);
      for (int r = 0; r < da.rows; ++r)
        for (int c = 0; c < da.cols; ++c) da(r, c) = g.v[c];
      accum(n.a, da);
      break;
    }
    case Op::SumAll: {
      Matrix da(in(n.a).rows, in(n.a).cols);
      const double s = g.v[0];
      for (auto& x : da.v) x = s;
      accum(n.a, da);
      break;
    }
    case Op::Gather: {
      Matrix da(in(n.a).rows, in(n.a).cols);
      for (int r = 0; r < g.rows; ++r) {
        double* out = &da.v[static_cast<size_t>((*n.idx)[r]) * da.cols];
        const double* src = &g.v[static_cast<size_t>(r) * g.cols];
        for (int c = 0; c < g.cols; ++c) out[c] += src[c];
      }
      FlopCounter::add(g.size());
      accum(n.a, da);
      break;
    }
    case Op::ScatterAdd: {
      Matrix da(in(n.a).rows, in(n.a).cols);
      for (int r = 0; r < da.rows; ++r) {
        const double* src = &g.v[static_cast<size_t>((*n.idx)[r]) * g.cols];
        double* out = &da.v[static_cast<size_t>(r) * da.cols];
        std::memcpy(out, src, sizeof(double) * da.cols);
      }
      accum(n.a, da);
      break;
    }
    case Op::ConcatCols: {
      const Matrix& av = in(n.a);
      const Matrix& bv = in(n.b);
      if (nodes_[n.a].needs_grad) {
        Matrix da(av.rows, av.cols);
        for (int r = 0; r < av.rows; ++r)
          std::memcpy(&da(r, 0), &g(r, 0), sizeof(double) * av.cols);
        accum(n.a, da);
      }
      if (nodes_[n.b].needs_grad) {
        Matrix db(bv.rows, bv.cols);
        for (int r = 0; r < bv.rows; ++r)
          std::memcpy(&db(r, 0), &g(r, av.cols), sizeof(double) * bv.cols);
        accum(n.b, db);
      }
      break;
    }
    case Op::SliceCols: {
      Matrix da(in(n.a).rows, in(n.a).cols);
      for (int r = 0; r < g.rows; ++r)
        std::memcpy(&da(r, n.i0), &g(r, 0), sizeof(double) * n.i1);
      accum(n.a, da);
      break;
    }
    case Op::Softmax: {
      Matrix da(g.rows, g.cols);
      for (int r = 0; r < g.rows; ++r) {
        double dot = 0.0;
        for (int c = 0; c < g.cols; ++c) dot += g(r, c) * n.val(r, c);
        for (int c = 0; c < g.cols; ++c) da(r, c) = n.val(r, c) * (g(r, c) - dot);
      }
      FlopCounter::add(4ull * g.size());
      accum(n.a, da);
      break;
    }
    case Op::Unary: {
      const Matrix& av = in(n.a);
      Matrix da(g.rows, g.cols);
      for (size_t k = 0; k < g.size(); ++k) da.v[k] = g.v[k] * detail::unary_deriv(n.ufn, av.v[k]);
      FlopCounter::add(7ull * g.size());
      accum(n.a, da);
      break;
    }
    case Op::RowNorm: {
      const Matrix& av = in(n.a);
      Matrix da(av.rows, av.cols);
      for (int r = 0; r < av.rows; ++r) {
        const double s = g.v[r] / n.val.v[r];
        for (int c = 0; c < av.cols; ++c) da(r, c) = s * av(r, c);
      }
      FlopCounter::add(2ull * av.size());
      accum(n.a, da);
      break;
    }
    case Op::Rbf: {
      const Matrix& rv = in(n.a);
      Matrix da(rv.rows, 1);
      const int K = static_cast<int>(n.rbf->centers.size());
      for (int e = 0; e < rv.rows; ++e) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) {
          const double d = rv.v[e] - n.rbf->centers[k];
          acc += g(e, k) * (-2.0 * n.rbf->gamma * d) * n.val(e, k);
        }
        da.v[e] = acc;
      }
      FlopCounter::add(5ull * g.size());
      accum(n.a, da);
      break;
    }
    case Op::RbfGrad: {
      const Matrix& rv = in(n.a);
      Matrix da(rv.rows, 1);
      const int K = static_cast<int>(n.rbf->centers.size());
      const double gamma = n.rbf->gamma;
      for (int e = 0; e < rv.rows; ++e) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) {
          const double d = rv.v[e] - n.rbf->centers[k];
          const double G = std::exp(-gamma * d * d);
          acc += g(e, k) * G * (4.0 * gamma * gamma * d * d - 2.0 * gamma);
        }
        da.v[e] = acc;
      }
      FlopCounter::add(12ull * g.size());
      accum(n.a, da);
      break;
    }
    case Op::Envelope: {
      const Matrix& rv = in(n.a);
      Matrix da(rv.rows, rv.cols);
      for (size_t k = 0; k < rv.size(); ++k) da.v[k] = g.v[k] * detail::envelope_grad(rv.v[k], n.c0);
      FlopCounter::add(9ull * g.size());
      accum(n.a, da);
      break;
    }
    case Op::EnvelopeGrad: {
      const Matrix& rv = in(n.a);
      Matrix da(rv.rows, rv.cols);
      for (size_t k = 0; k < rv.size(); ++k) da.v[k] = g.v[k] * detail::envelope_grad2(rv.v[k], n.c0);
      FlopCounter::add(9ull * g.size());
      accum(n.a, da);
      break;
    }
  }
}

// ---- recorded VJP rules ----

inline void Tape::emit_vjp(int i, NodeId g, const std::vector<char>& dep,
                           std::vector<NodeId>& adj_id) {
  const Op op = nodes_[i].op;
  const int a = nodes_[i].a, b = nodes_[i].b;
  const UnaryKind ufn = nodes_[i].ufn;
  const double c0 = nodes_[i].c0;
  auto idx = nodes_[i].idx;
  auto rbf_spec = nodes_[i].rbf;
  auto want = [&](int in_id) { return in_id >= 0 && dep[in_id]; };
  switch (op) {
    case Op::Leaf:
    case Op::Const:
      break;
    case Op::Add:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], g);
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], g);
      break;
    case Op::Sub:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], g);
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], scale(g, -1.0));
      break;
    case Op::Mul:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], mul(g, b));
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], mul(g, a));
      break;
    case Op::Scale:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], scale(g, c0));
      break;
    case Op::ScaleByScalar:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], scale_by_scalar(g, b));
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], sum_all(mul(g, a)));
      break;
    case Op::AddRow:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], g);
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], col_sum(g));
      break;
    case Op::MatMulNT:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], matmul_nn(g, b));
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], matmul_tn(g, a));
      break;
    case Op::MatMulNN:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], matmul_nt(g, b));
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], matmul_tn(a, g));
      break;
    case Op::MatMulTN:
      // y = a^T b: da = b g^T -> matmul_nt(b, g) gives [k x r]; db = a g
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], matmul_nt(b, g));
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], matmul_nn(a, g));
      break;
    case Op::ScaleRows:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], scale_rows(g, b));
      if (want(b)) adj_id[b] = emit_accum(adj_id[b], row_sum(mul(g, a)));
      break;
    case Op::BroadcastCols:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], row_sum(g));
      break;
    case Op::BroadcastRows:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], col_sum(g));
      break;
    case Op::BroadcastAll:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], sum_all(g));
      break;
    case Op::RowSum:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], broadcast_cols(g, nodes_[a].val.cols));
      break;
    case Op::ColSum:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], broadcast_rows(g, nodes_[a].val.rows));
      break;
    case Op::SumAll:
      if (want(a))
        adj_id[a] = emit_accum(adj_id[a], broadcast_all(g, nodes_[a].val.rows, nodes_[a].val.cols));
      break;
    case Op::Gather:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], scatter_add(g, idx, nodes_[a].val.rows));
      break;
    case Op::ScatterAdd:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], gather(g, idx));
      break;
    case Op::Unary:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], mul(g, unary(detail::unary_grad_kind(ufn), a)));
      break;
    case Op::RowNorm:
      if (want(a))
        adj_id[a] = emit_accum(adj_id[a], scale_rows(a, mul(g, unary(UnaryKind::Recip, i))));
      break;
    case Op::Rbf:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], row_sum(mul(g, rbf_grad(a, rbf_spec))));
      break;
    case Op::Envelope:
      if (want(a)) adj_id[a] = emit_accum(adj_id[a], mul(g, envelope_grad(a, c0)));
      break;
    case Op::SliceCols:
    case Op::ConcatCols:
    case Op::Softmax:
    case Op::RbfGrad:
    case Op::EnvelopeGrad:
      throw std::logic_error("recorded gradient not supported for this op");
  }
}

}  // namespace molepot
