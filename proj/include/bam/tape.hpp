#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bam/errors.hpp"

namespace bam {

// Define-by-run reverse-mode tape over dense row-major matrices (double).
// The backward pass emits ordinary tape nodes, so gradients are themselves
// differentiable: a second backward over the extended tape yields exact
// mixed derivatives (the force terms of the losses need d/dtheta of dE/dr).
// A tape lives for one evaluation and is discarded afterwards.

struct TShape {
  int rows = 0, cols = 0;
  int size() const { return rows * cols; }
  bool operator==(const TShape& o) const { return rows == o.rows && cols == o.cols; }
};

// out[r, io] += c * x0[r, i0] * x1[r, i1] for every entry, plus the two
// index permutations that implement its adjoints.
struct BiPlan {
  struct Entry {
    int i0, i1, io;
    double c;
  };
  int c0 = 0, c1 = 0, co = 0;
  std::vector<Entry> entries;
  std::shared_ptr<BiPlan> adj0, adj1;  // built on demand
};

struct TriPlan {
  struct Entry {
    int i0, i1, i2, io;
    double c;
  };
  int c0 = 0, c1 = 0, c2 = 0, co = 0;
  std::vector<Entry> entries;
  std::shared_ptr<TriPlan> adj0, adj1, adj2;
};

enum class Op : std::uint8_t {
  leaf, constant,
  add, sub, mul, div_, scale, add_scalar,
  matmul, matmul_tn, matmul_nt,
  sum_all, broadcast_full,
  col_sum, broadcast_rows,
  row_sum, broadcast_cols,
  gather_rows, scatter_rows,
  expand_cols, fold_cols,
  slice_cols, pad_cols,
  sigmoid_, softplus_, exp_, log_, sqrt_, sin_, cos_, square_,
  mix_channels, mix_channels_t, mix_outer,
  sparse_bi, sparse_tri,
};

class Tape;

struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const TShape& shape() const;
  const std::vector<double>& data() const;
  double item() const;
};

class Tape {
 public:
  struct Node {
    Op op;
    TShape shape;
    int a = -1, b = -1, c = -1;
    double aux = 0.0;
    int i0 = 0, i1 = 0;
    std::shared_ptr<const std::vector<int>> index;
    std::shared_ptr<BiPlan> bi;
    std::shared_ptr<TriPlan> tri;
    bool needs_grad = false;
    std::vector<double> val;
  };

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  Value leaf(TShape s, const std::vector<double>& v) {
    check_size(s, v, "leaf");
    Node n;
    n.op = Op::leaf;
    n.shape = s;
    n.val = v;
    n.needs_grad = true;
    return push(std::move(n));
  }

  Value constant(TShape s, std::vector<double> v) {
    check_size(s, v, "constant");
    Node n;
    n.op = Op::constant;
    n.shape = s;
    n.val = std::move(v);
    return push(std::move(n));
  }

  Value scalar(double x) { return constant({1, 1}, {x}); }

  Value zeros(TShape s) { return constant(s, std::vector<double>(static_cast<std::size_t>(s.size()), 0.0)); }

  // ---- elementwise binary ----
  Value add(Value x, Value y) { return ew2(Op::add, x, y); }
  Value sub(Value x, Value y) { return ew2(Op::sub, x, y); }
  Value mul(Value x, Value y) { return ew2(Op::mul, x, y); }
  Value div(Value x, Value y) { return ew2(Op::div_, x, y); }

  Value scale(Value x, double c) {
    Node n = unary(Op::scale, x);
    n.aux = c;
    const auto& xv = val(x);
    for (std::size_t i = 0; i < xv.size(); ++i) n.val[i] = c * xv[i];
    return push(std::move(n));
  }

  Value add_scalar(Value x, double c) {
    Node n = unary(Op::add_scalar, x);
    n.aux = c;
    const auto& xv = val(x);
    for (std::size_t i = 0; i < xv.size(); ++i) n.val[i] = xv[i] + c;
    return push(std::move(n));
  }

  Value neg(Value x) { return scale(x, -1.0); }

  // ---- matrix products ----
  Value matmul(Value x, Value y) {
    const TShape& A = shape(x);
    const TShape& B = shape(y);
    if (A.cols != B.rows) throw ShapeError("matmul: inner dimensions differ");
    Node n = binary(Op::matmul, x, y, {A.rows, B.cols});
    const auto& a = val(x);
    const auto& b = val(y);
    for (int i = 0; i < A.rows; ++i)
      for (int k = 0; k < A.cols; ++k) {
        const double aik = a[static_cast<std::size_t>(i * A.cols + k)];
        if (aik == 0.0) continue;
        const double* brow = b.data() + static_cast<std::size_t>(k * B.cols);
        double* orow = n.val.data() + static_cast<std::size_t>(i * B.cols);
        for (int j = 0; j < B.cols; ++j) orow[j] += aik * brow[j];
      }
    return push(std::move(n));
  }

  // x^T y with x (k x n), y (k x m) -> (n x m)
  Value matmul_tn(Value x, Value y) {
    const TShape& A = shape(x);
    const TShape& B = shape(y);
    if (A.rows != B.rows) throw ShapeError("matmul_tn: leading dimensions differ");
    Node n = binary(Op::matmul_tn, x, y, {A.cols, B.cols});
    const auto& a = val(x);
    const auto& b = val(y);
    for (int k = 0; k < A.rows; ++k)
      for (int i = 0; i < A.cols; ++i) {
        const double aki = a[static_cast<std::size_t>(k * A.cols + i)];
        if (aki == 0.0) continue;
        const double* brow = b.data() + static_cast<std::size_t>(k * B.cols);
        double* orow = n.val.data() + static_cast<std::size_t>(i * B.cols);
        for (int j = 0; j < B.cols; ++j) orow[j] += aki * brow[j];
      }
    return push(std::move(n));
  }

  // x y^T with x (n x k), y (m x k) -> (n x m)
  Value matmul_nt(Value x, Value y) {
    const TShape& A = shape(x);
    const TShape& B = shape(y);
    if (A.cols != B.cols) throw ShapeError("matmul_nt: trailing dimensions differ");
    Node n = binary(Op::matmul_nt, x, y, {A.rows, B.rows});
    const auto& a = val(x);
    const auto& b = val(y);
    for (int i = 0; i < A.rows; ++i)
      for (int j = 0; j < B.rows; ++j) {
        double s = 0.0;
        const double* arow = a.data() + static_cast<std::size_t>(i * A.cols);
        const double* brow = b.data() + static_cast<std::size_t>(j * B.cols);
        for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
        n.val[static_cast<std::size_t>(i * B.rows + j)] = s;
      }
    return push(std::move(n));
  }

  // ---- reductions and broadcasts ----
  Value sum_all(Value x) {
    Node n = binary(Op::sum_all, x, Value{}, {1, 1});
    double s = 0.0;
    for (double v : val(x)) s += v;
    n.val[0] = s;
    return push(std::move(n));
  }

  Value broadcast_full(Value x, TShape s) {
    if (shape(x).size() != 1) throw ShapeError("broadcast_full expects a 1x1 input");
    Node n = binary(Op::broadcast_full, x, Value{}, s);
    const double v = val(x)[0];
    for (auto& o : n.val) o = v;
    return push(std::move(n));
  }

  Value col_sum(Value x) {
    const TShape& A = shape(x);
    Node n = binary(Op::col_sum, x, Value{}, {1, A.cols});
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < A.cols; ++c) n.val[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(r * A.cols + c)];
    return push(std::move(n));
  }

  Value broadcast_rows(Value x, int rows) {
    const TShape& A = shape(x);
    if (A.rows != 1) throw ShapeError("broadcast_rows expects a row vector");
    Node n = binary(Op::broadcast_rows, x, Value{}, {rows, A.cols});
    const auto& a = val(x);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < A.cols; ++c) n.val[static_cast<std::size_t>(r * A.cols + c)] = a[static_cast<std::size_t>(c)];
    return push(std::move(n));
  }

  Value row_sum(Value x) {
    const TShape& A = shape(x);
    Node n = binary(Op::row_sum, x, Value{}, {A.rows, 1});
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < A.cols; ++c) s += a[static_cast<std::size_t>(r * A.cols + c)];
      n.val[static_cast<std::size_t>(r)] = s;
    }
    return push(std::move(n));
  }

  Value broadcast_cols(Value x, int cols) {
    const TShape& A = shape(x);
    if (A.cols != 1) throw ShapeError("broadcast_cols expects a column vector");
    Node n = binary(Op::broadcast_cols, x, Value{}, {A.rows, cols});
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < cols; ++c) n.val[static_cast<std::size_t>(r * cols + c)] = a[static_cast<std::size_t>(r)];
    return push(std::move(n));
  }

  // ---- row indexing ----
  Value gather_rows(Value x, std::shared_ptr<const std::vector<int>> idx) {
    const TShape& A = shape(x);
    for (int i : *idx)
      if (i < 0 || i >= A.rows) throw ShapeError("gather_rows index out of range");
    Node n = binary(Op::gather_rows, x, Value{}, {static_cast<int>(idx->size()), A.cols});
    n.index = idx;
    const auto& a = val(x);
    for (std::size_t r = 0; r < idx->size(); ++r)
      for (int c = 0; c < A.cols; ++c)
        n.val[r * static_cast<std::size_t>(A.cols) + static_cast<std::size_t>(c)] =
            a[static_cast<std::size_t>((*idx)[r] * A.cols + c)];
    return push(std::move(n));
  }

  // Adds row r of x into row idx[r] of a (rows x cols) zero matrix.
  Value scatter_rows(Value x, std::shared_ptr<const std::vector<int>> idx, int rows) {
    const TShape& A = shape(x);
    if (static_cast<int>(idx->size()) != A.rows) throw ShapeError("scatter_rows: one index per input row");
    for (int i : *idx)
      if (i < 0 || i >= rows) throw ShapeError("scatter_rows index out of range");
    Node n = binary(Op::scatter_rows, x, Value{}, {rows, A.cols});
    n.index = idx;
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < A.cols; ++c)
        n.val[static_cast<std::size_t>((*idx)[static_cast<std::size_t>(r)] * A.cols + c)] +=
            a[static_cast<std::size_t>(r * A.cols + c)];
    return push(std::move(n));
  }

  // ---- grouped column expansion (per-channel gates) ----
  // (r x u) -> (r x u*d), every channel value repeated d times.
  Value expand_cols(Value x, int d) {
    const TShape& A = shape(x);
    Node n = binary(Op::expand_cols, x, Value{}, {A.rows, A.cols * d});
    n.i0 = d;
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int u = 0; u < A.cols; ++u)
        for (int j = 0; j < d; ++j)
          n.val[static_cast<std::size_t>(r * A.cols * d + u * d + j)] = a[static_cast<std::size_t>(r * A.cols + u)];
    return push(std::move(n));
  }

  // (r x u*d) -> (r x u), summing each group of d columns.
  Value fold_cols(Value x, int d) {
    const TShape& A = shape(x);
    if (A.cols % d != 0) throw ShapeError("fold_cols: column count not divisible by group size");
    const int u = A.cols / d;
    Node n = binary(Op::fold_cols, x, Value{}, {A.rows, u});
    n.i0 = d;
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < u; ++c) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += a[static_cast<std::size_t>(r * A.cols + c * d + j)];
        n.val[static_cast<std::size_t>(r * u + c)] = s;
      }
    return push(std::move(n));
  }

  Value slice_cols(Value x, int c0, int len) {
    const TShape& A = shape(x);
    if (c0 < 0 || len <= 0 || c0 + len > A.cols) throw ShapeError("slice_cols out of range");
    Node n = binary(Op::slice_cols, x, Value{}, {A.rows, len});
    n.i0 = c0;
    n.i1 = A.cols;
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < len; ++c)
        n.val[static_cast<std::size_t>(r * len + c)] = a[static_cast<std::size_t>(r * A.cols + c0 + c)];
    return push(std::move(n));
  }

  // Embeds x as columns [c0, c0+len) of a (rows x total) zero matrix.
  Value pad_cols(Value x, int c0, int total) {
    const TShape& A = shape(x);
    if (c0 < 0 || c0 + A.cols > total) throw ShapeError("pad_cols out of range");
    Node n = binary(Op::pad_cols, x, Value{}, {A.rows, total});
    n.i0 = c0;
    n.i1 = A.cols;
    const auto& a = val(x);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < A.cols; ++c)
        n.val[static_cast<std::size_t>(r * total + c0 + c)] = a[static_cast<std::size_t>(r * A.cols + c)];
    return push(std::move(n));
  }

  // ---- elementwise nonlinear ----
  Value sigmoid(Value x) {
    Node n = unary(Op::sigmoid_, x);
    const auto& a = val(x);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double v = a[i];
      if (v >= 0.0) {
        n.val[i] = 1.0 / (1.0 + std::exp(-v));
      } else {
        const double e = std::exp(v);
        n.val[i] = e / (1.0 + e);
      }
    }
    return push(std::move(n));
  }

  Value softplus(Value x) {
    Node n = unary(Op::softplus_, x);
    const auto& a = val(x);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double v = a[i];
      n.val[i] = (v > 0.0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    return push(std::move(n));
  }

  Value exp(Value x) { return ew1(Op::exp_, x, [](double v) { return std::exp(v); }); }

  Value log(Value x) {
    for (double v : val(x))
      if (!(v > 0.0)) throw DomainError("log of a non-positive value");
    return ew1(Op::log_, x, [](double v) { return std::log(v); });
  }

  Value sqrt(Value x) {
    for (double v : val(x))
      if (!(v >= 0.0)) throw DomainError("sqrt of a negative value");
    return ew1(Op::sqrt_, x, [](double v) { return std::sqrt(v); });
  }

  Value sin(Value x) { return ew1(Op::sin_, x, [](double v) { return std::sin(v); }); }
  Value cos(Value x) { return ew1(Op::cos_, x, [](double v) { return std::cos(v); }); }
  Value square(Value x) { return ew1(Op::square_, x, [](double v) { return v * v; }); }

  // x * sigmoid(x), as a composite of primitives
  Value silu(Value x) { return mul(x, sigmoid(x)); }

  // ---- block channel mixing ----
  // x (n x u*d), W (v x u) -> (n x v*d): out[n, v*d+m] = sum_u W[v,u] x[n, u*d+m]
  Value mix_channels(Value x, Value W, int d) {
    const TShape& A = shape(x);
    const TShape& B = shape(W);
    if (A.cols != B.cols * d) throw ShapeError("mix_channels: input columns != u*d");
    Node n = binary(Op::mix_channels, x, W, {A.rows, B.rows * d});
    n.i0 = d;
    mix_forward(val(x), val(W), n.val, A.rows, B.rows, B.cols, d, false);
    return push(std::move(n));
  }

  // Same with W transposed: x (n x v*d), W (v x u) -> (n x u*d)
  Value mix_channels_t(Value x, Value W, int d) {
    const TShape& A = shape(x);
    const TShape& B = shape(W);
    if (A.cols != B.rows * d) throw ShapeError("mix_channels_t: input columns != v*d");
    Node n = binary(Op::mix_channels_t, x, W, {A.rows, B.cols * d});
    n.i0 = d;
    mix_forward(val(x), val(W), n.val, A.rows, B.rows, B.cols, d, true);
    return push(std::move(n));
  }

  // a (n x v*d), b (n x u*d) -> (v x u): out[v,u] = sum_{n,m} a[n,v*d+m] b[n,u*d+m]
  Value mix_outer(Value a, Value b, int d) {
    const TShape& A = shape(a);
    const TShape& B = shape(b);
    if (A.rows != B.rows || A.cols % d != 0 || B.cols % d != 0)
      throw ShapeError("mix_outer: incompatible shapes");
    const int v = A.cols / d, u = B.cols / d;
    Node n = binary(Op::mix_outer, a, b, {v, u});
    n.i0 = d;
    const auto& av = val(a);
    const auto& bv = val(b);
    for (int r = 0; r < A.rows; ++r)
      for (int i = 0; i < v; ++i)
        for (int j = 0; j < u; ++j) {
          double s = 0.0;
          for (int m = 0; m < d; ++m)
            s += av[static_cast<std::size_t>(r * A.cols + i * d + m)] *
                 bv[static_cast<std::size_t>(r * B.cols + j * d + m)];
          n.val[static_cast<std::size_t>(i * u + j)] += s;
        }
    return push(std::move(n));
  }

  // ---- sparse bilinear / trilinear row-wise contractions ----
  Value sparse_bi(std::shared_ptr<BiPlan> plan, Value a, Value b) {
    const TShape& A = shape(a);
    const TShape& B = shape(b);
    if (A.rows != B.rows) throw ShapeError("sparse_bi: row counts differ");
    if (A.cols != plan->c0 || B.cols != plan->c1) throw ShapeError("sparse_bi: column counts do not match plan");
    Node n = binary(Op::sparse_bi, a, b, {A.rows, plan->co});
    n.bi = plan;
    const auto& av = val(a);
    const auto& bv = val(b);
    for (int r = 0; r < A.rows; ++r) {
      const double* ar = av.data() + static_cast<std::size_t>(r * A.cols);
      const double* br = bv.data() + static_cast<std::size_t>(r * B.cols);
      double* orow = n.val.data() + static_cast<std::size_t>(r * plan->co);
      for (const auto& e : plan->entries) orow[e.io] += e.c * ar[e.i0] * br[e.i1];
    }
    return push(std::move(n));
  }

  Value sparse_tri(std::shared_ptr<TriPlan> plan, Value a, Value b, Value c) {
    const TShape& A = shape(a);
    const TShape& B = shape(b);
    const TShape& C = shape(c);
    if (A.rows != B.rows || A.rows != C.rows) throw ShapeError("sparse_tri: row counts differ");
    if (A.cols != plan->c0 || B.cols != plan->c1 || C.cols != plan->c2)
      throw ShapeError("sparse_tri: column counts do not match plan");
    Node n = binary(Op::sparse_tri, a, b, {A.rows, plan->co});
    n.c = c.id;
    n.tri = plan;
    if (nodes_[static_cast<std::size_t>(c.id)].needs_grad) n.needs_grad = true;
    const auto& av = val(a);
    const auto& bv = val(b);
    const auto& cv = val(c);
    for (int r = 0; r < A.rows; ++r) {
      const double* ar = av.data() + static_cast<std::size_t>(r * A.cols);
      const double* br = bv.data() + static_cast<std::size_t>(r * B.cols);
      const double* cr = cv.data() + static_cast<std::size_t>(r * C.cols);
      double* orow = n.val.data() + static_cast<std::size_t>(r * plan->co);
      for (const auto& e : plan->entries) orow[e.io] += e.c * ar[e.i0] * br[e.i1] * cr[e.i2];
    }
    return push(std::move(n));
  }

  // ---- reverse pass ----
  // Gradients of a scalar output with respect to leaves.  Adjoints are tape
  // values themselves, so the result can feed further taped computation.
  std::vector<Value> grad(Value out, const std::vector<Value>& wrt) {
    if (out.tape != this) throw UnknownLeaf("output belongs to a different tape");
    if (!(shape(out) == TShape{1, 1})) throw NotScalar("grad expects a scalar output");
    for (const Value& w : wrt) {
      if (w.tape != this) throw UnknownLeaf("gradient target belongs to a different tape");
      if (nodes_[static_cast<std::size_t>(w.id)].op != Op::leaf)
        throw UnknownLeaf("gradient requested for a non-leaf value");
    }
    std::vector<int> adj(static_cast<std::size_t>(out.id) + 1, -1);
    adj[static_cast<std::size_t>(out.id)] = scalar(1.0).id;
    for (int id = out.id; id >= 0; --id) {
      const int g_id = adj[static_cast<std::size_t>(id)];
      if (g_id < 0) continue;
      // copy fields we need; push() may reallocate nodes_
      const Op op = nodes_[static_cast<std::size_t>(id)].op;
      if (op == Op::leaf || op == Op::constant) continue;
      const int ia = nodes_[static_cast<std::size_t>(id)].a;
      const int ib = nodes_[static_cast<std::size_t>(id)].b;
      const int ic = nodes_[static_cast<std::size_t>(id)].c;
      Value g{this, g_id};
      Value self{this, id};
      Value va{this, ia}, vb{this, ib}, vc{this, ic};
      auto acc = [&](int target, Value contrib) {
        if (target < 0) return;
        if (!nodes_[static_cast<std::size_t>(target)].needs_grad) return;
        int& slot = adj[static_cast<std::size_t>(target)];
        slot = (slot < 0) ? contrib.id : add(Value{this, slot}, contrib).id;
      };
      switch (op) {
        case Op::add:
          acc(ia, g);
          acc(ib, g);
          break;
        case Op::sub:
          acc(ia, g);
          acc(ib, neg(g));
          break;
        case Op::mul:
          acc(ia, mul(g, vb));
          acc(ib, mul(g, va));
          break;
        case Op::div_:
          acc(ia, div(g, vb));
          acc(ib, neg(mul(g, div(self, vb))));
          break;
        case Op::scale:
          acc(ia, scale(g, nodes_[static_cast<std::size_t>(id)].aux));
          break;
        case Op::add_scalar:
          acc(ia, g);
          break;
        case Op::matmul:
          acc(ia, matmul_nt(g, vb));
          acc(ib, matmul_tn(va, g));
          break;
        case Op::matmul_tn:
          acc(ia, matmul_nt(vb, g));
          acc(ib, matmul(va, g));
          break;
        case Op::matmul_nt:
          acc(ia, matmul(g, vb));
          acc(ib, matmul_tn(g, va));
          break;
        case Op::sum_all:
          acc(ia, broadcast_full(g, nodes_[static_cast<std::size_t>(ia)].shape));
          break;
        case Op::broadcast_full:
          acc(ia, sum_all(g));
          break;
        case Op::col_sum:
          acc(ia, broadcast_rows(g, nodes_[static_cast<std::size_t>(ia)].shape.rows));
          break;
        case Op::broadcast_rows:
          acc(ia, col_sum(g));
          break;
        case Op::row_sum:
          acc(ia, broadcast_cols(g, nodes_[static_cast<std::size_t>(ia)].shape.cols));
          break;
        case Op::broadcast_cols:
          acc(ia, row_sum(g));
          break;
        case Op::gather_rows:
          acc(ia, scatter_rows(g, nodes_[static_cast<std::size_t>(id)].index,
                               nodes_[static_cast<std::size_t>(ia)].shape.rows));
          break;
        case Op::scatter_rows:
          acc(ia, gather_rows(g, nodes_[static_cast<std::size_t>(id)].index));
          break;
        case Op::expand_cols:
          acc(ia, fold_cols(g, nodes_[static_cast<std::size_t>(id)].i0));
          break;
        case Op::fold_cols:
          acc(ia, expand_cols(g, nodes_[static_cast<std::size_t>(id)].i0));
          break;
        case Op::slice_cols:
          acc(ia, pad_cols(g, nodes_[static_cast<std::size_t>(id)].i0,
                           nodes_[static_cast<std::size_t>(id)].i1));
          break;
        case Op::pad_cols:
          acc(ia, slice_cols(g, nodes_[static_cast<std::size_t>(id)].i0,
                             nodes_[static_cast<std::size_t>(id)].i1));
          break;
        case Op::sigmoid_: {
          Value one_minus = add_scalar(neg(self), 1.0);
          acc(ia, mul(g, mul(self, one_minus)));
          break;
        }
        case Op::softplus_:
          acc(ia, mul(g, sigmoid(va)));
          break;
        case Op::exp_:
          acc(ia, mul(g, self));
          break;
        case Op::log_:
          acc(ia, div(g, va));
          break;
        case Op::sqrt_:
          acc(ia, scale(div(g, self), 0.5));
          break;
        case Op::sin_:
          acc(ia, mul(g, cos(va)));
          break;
        case Op::cos_:
          acc(ia, neg(mul(g, sin(va))));
          break;
        case Op::square_:
          acc(ia, mul(g, scale(va, 2.0)));
          break;
        case Op::mix_channels: {
          const int d = nodes_[static_cast<std::size_t>(id)].i0;
          acc(ia, mix_channels_t(g, vb, d));
          acc(ib, mix_outer(g, va, d));
          break;
        }
        case Op::mix_channels_t: {
          const int d = nodes_[static_cast<std::size_t>(id)].i0;
          acc(ia, mix_channels(g, vb, d));
          acc(ib, mix_outer(va, g, d));
          break;
        }
        case Op::mix_outer: {
          const int d = nodes_[static_cast<std::size_t>(id)].i0;
          acc(ia, mix_channels(vb, g, d));
          acc(ib, mix_channels_t(va, g, d));
          break;
        }
        case Op::sparse_bi: {
          auto plan = nodes_[static_cast<std::size_t>(id)].bi;
          acc(ia, sparse_bi(bi_adj0(plan), g, vb));
          acc(ib, sparse_bi(bi_adj1(plan), va, g));
          break;
        }
        case Op::sparse_tri: {
          auto plan = nodes_[static_cast<std::size_t>(id)].tri;
          acc(ia, sparse_tri(tri_adj0(plan), g, vb, vc));
          acc(ib, sparse_tri(tri_adj1(plan), va, g, vc));
          acc(ic, sparse_tri(tri_adj2(plan), va, vb, g));
          break;
        }
        case Op::leaf:
        case Op::constant:
          break;
      }
    }
    std::vector<Value> out_grads;
    out_grads.reserve(wrt.size());
    for (const Value& w : wrt) {
      int gid = (w.id <= out.id) ? adj[static_cast<std::size_t>(w.id)] : -1;
      Value gv = (gid >= 0) ? Value{this, gid} : zeros(shape(w));
      for (double v : val(gv))
        if (std::isnan(v) || std::isinf(v)) throw DivergedGradient("non-finite gradient");
      out_grads.push_back(gv);
    }
    return out_grads;
  }

  const TShape& shape(Value v) const { return nodes_[static_cast<std::size_t>(v.id)].shape; }
  const std::vector<double>& val(Value v) const { return nodes_[static_cast<std::size_t>(v.id)].val; }

 private:
  static void check_size(const TShape& s, const std::vector<double>& v, const char* what) {
    if (static_cast<int>(v.size()) != s.size())
      throw ShapeError(std::string(what) + ": data size does not match shape");
  }

  Value push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node unary(Op op, Value x) {
    if (x.tape != this) throw UnknownLeaf("operand belongs to a different tape");
    Node n;
    n.op = op;
    n.shape = shape(x);
    n.a = x.id;
    n.needs_grad = nodes_[static_cast<std::size_t>(x.id)].needs_grad;
    n.val.assign(static_cast<std::size_t>(n.shape.size()), 0.0);
    return n;
  }

  Node binary(Op op, Value x, Value y, TShape out) {
    if (x.tape != this || (y.valid() && y.tape != this))
      throw UnknownLeaf("operand belongs to a different tape");
    Node n;
    n.op = op;
    n.shape = out;
    n.a = x.id;
    n.b = y.valid() ? y.id : -1;
    n.needs_grad = nodes_[static_cast<std::size_t>(x.id)].needs_grad ||
                   (y.valid() && nodes_[static_cast<std::size_t>(y.id)].needs_grad);
    n.val.assign(static_cast<std::size_t>(out.size()), 0.0);
    return n;
  }

  template <typename F>
  Value ew1(Op op, Value x, F f) {
    Node n = unary(op, x);
    const auto& a = val(x);
    for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = f(a[i]);
    return push(std::move(n));
  }

  Value ew2(Op op, Value x, Value y) {
    if (!(shape(x) == shape(y))) throw ShapeError("elementwise op on mismatched shapes");
    Node n = binary(op, x, y, shape(x));
    const auto& a = val(x);
    const auto& b = val(y);
    switch (op) {
      case Op::add:
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] + b[i];
        break;
      case Op::sub:
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] - b[i];
        break;
      case Op::mul:
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] * b[i];
        break;
      case Op::div_:
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] / b[i];
        break;
      default:
        throw Error("ew2: not an elementwise op");
    }
    return push(std::move(n));
  }

  static void mix_forward(const std::vector<double>& x, const std::vector<double>& w,
                          std::vector<double>& out, int rows, int v, int u, int d, bool transposed) {
    // plain: out[n, i*d+m] = sum_j W[i,j] x[n, j*d+m]   (i < v, j < u)
    // transposed: out[n, j*d+m] = sum_i W[i,j] x[n, i*d+m]
    const int in_cols = transposed ? v * d : u * d;
    const int out_cols = transposed ? u * d : v * d;
    for (int n = 0; n < rows; ++n) {
      const double* xr = x.data() + static_cast<std::size_t>(n * in_cols);
      double* outr = out.data() + static_cast<std::size_t>(n * out_cols);
      for (int i = 0; i < v; ++i)
        for (int j = 0; j < u; ++j) {
          const double wij = w[static_cast<std::size_t>(i * u + j)];
          if (wij == 0.0) continue;
          const double* src = xr + static_cast<std::size_t>((transposed ? i : j) * d);
          double* dst = outr + static_cast<std::size_t>((transposed ? j : i) * d);
          for (int m = 0; m < d; ++m) dst[m] += wij * src[m];
        }
    }
  }

  static std::shared_ptr<BiPlan> bi_adj0(const std::shared_ptr<BiPlan>& p) {
    if (!p->adj0) {
      auto q = std::make_shared<BiPlan>();
      q->c0 = p->co;
      q->c1 = p->c1;
      q->co = p->c0;
      q->entries.reserve(p->entries.size());
      for (const auto& e : p->entries) q->entries.push_back({e.io, e.i1, e.i0, e.c});
      p->adj0 = q;
    }
    return p->adj0;
  }

  static std::shared_ptr<BiPlan> bi_adj1(const std::shared_ptr<BiPlan>& p) {
    if (!p->adj1) {
      auto q = std::make_shared<BiPlan>();
      q->c0 = p->c0;
      q->c1 = p->co;
      q->co = p->c1;
      q->entries.reserve(p->entries.size());
      for (const auto& e : p->entries) q->entries.push_back({e.i0, e.io, e.i1, e.c});
      p->adj1 = q;
    }
    return p->adj1;
  }

  static std::shared_ptr<TriPlan> tri_adj0(const std::shared_ptr<TriPlan>& p) {
    if (!p->adj0) {
      auto q = std::make_shared<TriPlan>();
      q->c0 = p->co;
      q->c1 = p->c1;
      q->c2 = p->c2;
      q->co = p->c0;
      q->entries.reserve(p->entries.size());
      for (const auto& e : p->entries) q->entries.push_back({e.io, e.i1, e.i2, e.i0, e.c});
      p->adj0 = q;
    }
    return p->adj0;
  }

  static std::shared_ptr<TriPlan> tri_adj1(const std::shared_ptr<TriPlan>& p) {
    if (!p->adj1) {
      auto q = std::make_shared<TriPlan>();
      q->c0 = p->c0;
      q->c1 = p->co;
      q->c2 = p->c2;
      q->co = p->c1;
      q->entries.reserve(p->entries.size());
      for (const auto& e : p->entries) q->entries.push_back({e.i0, e.io, e.i2, e.i1, e.c});
      p->adj1 = q;
    }
    return p->adj1;
  }

  static std::shared_ptr<TriPlan> tri_adj2(const std::shared_ptr<TriPlan>& p) {
    if (!p->adj2) {
      auto q = std::make_shared<TriPlan>();
      q->c0 = p->c0;
      q->c1 = p->c1;
      q->c2 = p->co;
      q->co = p->c2;
      q->entries.reserve(p->entries.size());
      for (const auto& e : p->entries) q->entries.push_back({e.i0, e.i1, e.io, e.i2, e.c});
      p->adj2 = q;
    }
    return p->adj2;
  }

  std::vector<Node> nodes_;
};

inline const TShape& Value::shape() const { return tape->shape(*this); }
inline const std::vector<double>& Value::data() const { return tape->val(*this); }
inline double Value::item() const {
  const auto& v = tape->val(*this);
  if (v.size() != 1) throw NotScalar("item() on a non-scalar value");
  return v[0];
}

}  // namespace bam
