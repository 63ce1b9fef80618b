#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "uniperc/core/tensor.hpp"

namespace uniperc {
namespace ad {

// Reverse-mode autodiff over Tensor. Each op builds one graph node holding
// the forward value and a closure that scatters the node's gradient into its
// parents. Graphs are rebuilt every step; nodes are shared_ptr-owned.
struct Node {
  Tensor val;
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> back;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Var leaf(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor v) { return leaf(std::move(v), false); }

  bool defined() const { return n_ != nullptr; }
  const Tensor& val() const { return n_->val; }
  bool requires_grad() const { return n_->requires_grad; }

  // Gradient accumulated by the last backward(); zeros if the node was never
  // reached (e.g. a masked task's head parameters).
  Tensor grad() const {
    if (n_->grad_ready) return n_->grad;
    return Tensor::zeros(n_->val.shape());
  }

  std::shared_ptr<Node> node() const { return n_; }

  const std::vector<int>& shape() const { return n_->val.shape(); }
  int dim(int i) const { return n_->val.dim(i); }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

inline void ensure_grad(Node& n) {
  if (!n.grad_ready) {
    n.grad = Tensor::zeros(n.val.shape());
    n.grad_ready = true;
  }
}

inline void accumulate(const std::shared_ptr<Node>& parent, const Tensor& delta) {
  if (!parent->requires_grad) return;
  ensure_grad(*parent);
  double* g = parent->grad.data();
  const double* d = delta.data();
  const std::int64_t n = delta.numel();
  for (std::int64_t i = 0; i < n; ++i) g[i] += d[i];
}

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  for (const auto& p : parents) {
    n->parents.push_back(p.node());
    n->requires_grad = n->requires_grad || p.node()->requires_grad;
  }
  if (n->requires_grad) n->back = std::move(back);
  return Var(std::move(n));
}

inline void topo_collect(Node* root, std::vector<Node*>& order) {
  // iterative post-order
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (!seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Runs reverse accumulation from a scalar root. Gradients from a previous
// backward over the same nodes are cleared first.
inline void backward(const Var& root) {
  if (root.val().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  std::vector<Node*> order;
  detail::topo_collect(root.node().get(), order);
  for (Node* n : order) {
    n->grad_ready = false;
    n->grad = Tensor();
  }
  Node* r = root.node().get();
  r->grad = Tensor::full(r->val.shape(), 1.0);
  r->grad_ready = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->back && n->grad_ready) n->back(*n);
  }
}

// ---- elementwise ----

namespace detail {
inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!(a.val().shape() == b.val().shape()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_str(a.shape()) + " vs " +
                                Tensor::shape_str(b.shape()));
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bp[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& n) {
    detail::accumulate(n.parents[0], n.grad);
    detail::accumulate(n.parents[1], n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bp[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& n) {
    detail::accumulate(n.parents[0], n.grad);
    Tensor neg = n.grad;
    for (std::int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
    detail::accumulate(n.parents[1], neg);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bp[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& n) {
    Tensor da = n.grad, db = n.grad;
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    for (std::int64_t i = 0; i < da.numel(); ++i) {
      da[i] *= bv[i];
      db[i] *= av[i];
    }
    detail::accumulate(n.parents[0], da);
    detail::accumulate(n.parents[1], db);
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "div");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= bp[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& n) {
    Tensor da = n.grad, db = n.grad;
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    for (std::int64_t i = 0; i < da.numel(); ++i) {
      da[i] /= bv[i];
      db[i] *= -av[i] / (bv[i] * bv[i]);
    }
    detail::accumulate(n.parents[0], da);
    detail::accumulate(n.parents[1], db);
  });
}

inline Var minimum(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "minimum");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(out[i], bp[i]);
  return detail::make_node(std::move(out), {a, b}, [](Node& n) {
    Tensor da = Tensor::zeros(n.grad.shape()), db = Tensor::zeros(n.grad.shape());
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      if (av[i] <= bv[i]) da[i] = n.grad[i];
      else db[i] = n.grad[i];
    }
    detail::accumulate(n.parents[0], da);
    detail::accumulate(n.parents[1], db);
  });
}

inline Var maximum(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "maximum");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], bp[i]);
  return detail::make_node(std::move(out), {a, b}, [](Node& n) {
    Tensor da = Tensor::zeros(n.grad.shape()), db = Tensor::zeros(n.grad.shape());
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      if (av[i] >= bv[i]) da[i] = n.grad[i];
      else db[i] = n.grad[i];
    }
    detail::accumulate(n.parents[0], da);
    detail::accumulate(n.parents[1], db);
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return detail::make_node(std::move(out), {a}, [c](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= c;
    detail::accumulate(n.parents[0], g);
  });
}

inline Var add_const(const Var& a, double c) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  return detail::make_node(std::move(out), {a},
                           [](Node& n) { detail::accumulate(n.parents[0], n.grad); });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var relu(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
  return detail::make_node(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    const Tensor& av = n.parents[0]->val;
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (av[i] <= 0.0) g[i] = 0.0;
    detail::accumulate(n.parents[0], g);
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return detail::make_node(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= n.val[i] * (1.0 - n.val[i]);
    detail::accumulate(n.parents[0], g);
  });
}

inline Var exp_op(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return detail::make_node(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= n.val[i];
    detail::accumulate(n.parents[0], g);
  });
}

inline Var log_op(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return detail::make_node(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    const Tensor& av = n.parents[0]->val;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= av[i];
    detail::accumulate(n.parents[0], g);
  });
}

inline Var abs_op(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(out[i]);
  return detail::make_node(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    const Tensor& av = n.parents[0]->val;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= (av[i] >= 0.0 ? 1.0 : -1.0);
    detail::accumulate(n.parents[0], g);
  });
}

// ---- matrix ----

namespace detail {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
}  // namespace detail

// (m,k) x (k,n) -> (m,n); transA/transB transpose the corresponding input.
inline Var matmul(const Var& a, const Var& b, bool transA = false, bool transB = false) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2) throw std::invalid_argument("matmul: rank-2 required");
  const int am = av.dim(0), an = av.dim(1);
  const int bm = bv.dim(0), bn = bv.dim(1);
  const int m = transA ? an : am;
  const int ka = transA ? am : an;
  const int kb = transB ? bn : bm;
  const int n = transB ? bm : bn;
  if (ka != kb) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor out({m, n});
  {
    detail::ECMap A(av.data(), am, an);
    detail::ECMap B(bv.data(), bm, bn);
    detail::EMap C(out.data(), m, n);
    if (!transA && !transB) C.noalias() = A * B;
    else if (transA && !transB) C.noalias() = A.transpose() * B;
    else if (!transA && transB) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return detail::make_node(std::move(out), {a, b}, [transA, transB, am, an, bm, bn, m, n](Node& nd) {
    detail::ECMap G(nd.grad.data(), m, n);
    detail::ECMap A(nd.parents[0]->val.data(), am, an);
    detail::ECMap B(nd.parents[1]->val.data(), bm, bn);
    if (nd.parents[0]->requires_grad) {
      Tensor da({am, an});
      detail::EMap DA(da.data(), am, an);
      if (!transA && !transB) DA.noalias() = G * B.transpose();
      else if (!transA && transB) DA.noalias() = G * B;
      else if (transA && !transB) DA.noalias() = B * G.transpose();
      else DA.noalias() = B.transpose() * G.transpose();
      detail::accumulate(nd.parents[0], da);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor db({bm, bn});
      detail::EMap DB(db.data(), bm, bn);
      if (!transA && !transB) DB.noalias() = A.transpose() * G;
      else if (!transA && transB) DB.noalias() = G.transpose() * A;
      else if (transA && !transB) DB.noalias() = A * G;
      else DB.noalias() = G.transpose() * A.transpose();
      detail::accumulate(nd.parents[1], db);
    }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("transpose: rank-2 required");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  return detail::make_node(std::move(out), {a}, [m, n](Node& nd) {
    Tensor g({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g.at(i, j) = nd.grad.at(j, i);
    detail::accumulate(nd.parents[0], g);
  });
}

// ---- shape ----

inline Var reshape(const Var& a, std::vector<int> new_shape) {
  Tensor out = a.val().reshaped(new_shape);
  auto old_shape = a.val().shape();
  return detail::make_node(std::move(out), {a}, [old_shape](Node& nd) {
    detail::accumulate(nd.parents[0], nd.grad.reshaped(old_shape));
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int cols = parts[0].val().dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.val().rank() != 2 || p.val().dim(1) != cols)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.val().dim(0);
  }
  Tensor out({rows, cols});
  std::vector<int> row_of(parts.size());
  int r = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    row_of[i] = r;
    const Tensor& v = parts[i].val();
    std::copy(v.data(), v.data() + v.numel(), out.data() + static_cast<std::size_t>(r) * cols);
    r += v.dim(0);
  }
  return detail::make_node(std::move(out), parts, [row_of, cols](Node& nd) {
    for (std::size_t i = 0; i < nd.parents.size(); ++i) {
      auto& p = nd.parents[i];
      const int pr = p->val.dim(0);
      Tensor g({pr, cols});
      std::copy(nd.grad.data() + static_cast<std::size_t>(row_of[i]) * cols,
                nd.grad.data() + static_cast<std::size_t>(row_of[i] + pr) * cols, g.data());
      detail::accumulate(p, g);
    }
  });
}

inline Var slice_rows(const Var& a, int r0, int r1) {
  const Tensor& av = a.val();
  if (av.rank() != 2 || r0 < 0 || r1 > av.dim(0) || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  const int cols = av.dim(1);
  Tensor out({r1 - r0, cols});
  std::copy(av.data() + static_cast<std::size_t>(r0) * cols,
            av.data() + static_cast<std::size_t>(r1) * cols, out.data());
  return detail::make_node(std::move(out), {a}, [r0, r1, cols](Node& nd) {
    auto& p = nd.parents[0];
    Tensor g = Tensor::zeros(p->val.shape());
    std::copy(nd.grad.data(), nd.grad.data() + nd.grad.numel(),
              g.data() + static_cast<std::size_t>(r0) * cols);
    detail::accumulate(p, g);
  });
}

inline Var gather_rows(const Var& a, std::vector<int> idx) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 required");
  const int cols = av.dim(1);
  Tensor out({static_cast<int>(idx.size()), cols});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(av.data() + static_cast<std::size_t>(idx[i]) * cols,
              av.data() + static_cast<std::size_t>(idx[i] + 1) * cols,
              out.data() + i * cols);
  return detail::make_node(std::move(out), {a}, [idx, cols](Node& nd) {
    auto& p = nd.parents[0];
    Tensor g = Tensor::zeros(p->val.shape());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < cols; ++c)
        g.data()[static_cast<std::size_t>(idx[i]) * cols + c] += nd.grad.data()[i * cols + c];
    detail::accumulate(p, g);
  });
}

inline Var cols(const Var& a, int c0, int c1) {
  const Tensor& av = a.val();
  if (av.rank() != 2 || c0 < 0 || c1 > av.dim(1) || c0 >= c1)
    throw std::invalid_argument("cols: bad range");
  const int rows = av.dim(0), width = av.dim(1);
  Tensor out({rows, c1 - c0});
  for (int r = 0; r < rows; ++r)
    for (int c = c0; c < c1; ++c) out.at(r, c - c0) = av.at(r, c);
  return detail::make_node(std::move(out), {a}, [c0, c1, rows, width](Node& nd) {
    Tensor g({rows, width});
    for (int r = 0; r < rows; ++r)
      for (int c = c0; c < c1; ++c) g.at(r, c) = nd.grad.at(r, c - c0);
    detail::accumulate(nd.parents[0], g);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int rows = parts[0].val().dim(0);
  int width = 0;
  for (const auto& p : parts) {
    if (p.val().rank() != 2 || p.val().dim(0) != rows)
      throw std::invalid_argument("concat_cols: row mismatch");
    width += p.val().dim(1);
  }
  Tensor out({rows, width});
  std::vector<int> col_of(parts.size());
  int c = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    col_of[i] = c;
    const Tensor& v = parts[i].val();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < v.dim(1); ++j) out.at(r, c + j) = v.at(r, j);
    c += v.dim(1);
  }
  return detail::make_node(std::move(out), parts, [col_of, rows](Node& nd) {
    for (std::size_t i = 0; i < nd.parents.size(); ++i) {
      auto& p = nd.parents[i];
      const int pc = p->val.dim(1);
      Tensor g({rows, pc});
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < pc; ++j) g.at(r, j) = nd.grad.at(r, col_of[i] + j);
      detail::accumulate(p, g);
    }
  });
}

// (L,D) + (1,D) broadcast over rows
inline Var add_rowvec(const Var& a, const Var& v) {
  const Tensor& av = a.val();
  const Tensor& vv = v.val();
  if (av.rank() != 2 || vv.numel() != av.dim(1))
    throw std::invalid_argument("add_rowvec: width mismatch");
  const int rows = av.dim(0), cols_ = av.dim(1);
  Tensor out = av;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols_; ++c) out.at(r, c) += vv[static_cast<std::size_t>(c)];
  return detail::make_node(std::move(out), {a, v}, [rows, cols_](Node& nd) {
    detail::accumulate(nd.parents[0], nd.grad);
    if (nd.parents[1]->requires_grad) {
      Tensor gv = Tensor::zeros(nd.parents[1]->val.shape());
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols_; ++c) gv[static_cast<std::size_t>(c)] += nd.grad.at(r, c);
      detail::accumulate(nd.parents[1], gv);
    }
  });
}

// ---- rows: softmax / layer norm / reductions ----

inline Var softmax_rows(const Var& a) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 required");
  const int rows = av.dim(0), cols_ = av.dim(1);
  Tensor out = av;
  for (int r = 0; r < rows; ++r) {
    double mx = -1e300;
    for (int c = 0; c < cols_; ++c) mx = std::max(mx, out.at(r, c));
    double s = 0.0;
    for (int c = 0; c < cols_; ++c) {
      out.at(r, c) = std::exp(out.at(r, c) - mx);
      s += out.at(r, c);
    }
    for (int c = 0; c < cols_; ++c) out.at(r, c) /= s;
  }
  return detail::make_node(std::move(out), {a}, [rows, cols_](Node& nd) {
    Tensor g({rows, cols_});
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < cols_; ++c) dot += nd.grad.at(r, c) * nd.val.at(r, c);
      for (int c = 0; c < cols_; ++c)
        g.at(r, c) = nd.val.at(r, c) * (nd.grad.at(r, c) - dot);
    }
    detail::accumulate(nd.parents[0], g);
  });
}

inline Var log_softmax_rows(const Var& a) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("log_softmax_rows: rank-2 required");
  const int rows = av.dim(0), cols_ = av.dim(1);
  Tensor out = av;
  for (int r = 0; r < rows; ++r) {
    double mx = -1e300;
    for (int c = 0; c < cols_; ++c) mx = std::max(mx, out.at(r, c));
    double s = 0.0;
    for (int c = 0; c < cols_; ++c) s += std::exp(out.at(r, c) - mx);
    const double lse = mx + std::log(s);
    for (int c = 0; c < cols_; ++c) out.at(r, c) -= lse;
  }
  return detail::make_node(std::move(out), {a}, [rows, cols_](Node& nd) {
    Tensor g({rows, cols_});
    for (int r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (int c = 0; c < cols_; ++c) gsum += nd.grad.at(r, c);
      for (int c = 0; c < cols_; ++c)
        g.at(r, c) = nd.grad.at(r, c) - std::exp(nd.val.at(r, c)) * gsum;
    }
    detail::accumulate(nd.parents[0], g);
  });
}

// Row-wise layer norm with affine gain/bias (shape (1,D) or (D)).
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw std::invalid_argument("layer_norm_rows: rank-2 required");
  const int rows = xv.dim(0), cols_ = xv.dim(1);
  if (gain.val().numel() != cols_ || bias.val().numel() != cols_)
    throw std::invalid_argument("layer_norm_rows: gain/bias width mismatch");
  Tensor out({rows, cols_});
  Tensor mu({rows}), inv({rows});
  for (int r = 0; r < rows; ++r) {
    double m = 0.0;
    for (int c = 0; c < cols_; ++c) m += xv.at(r, c);
    m /= cols_;
    double v = 0.0;
    for (int c = 0; c < cols_; ++c) {
      const double d = xv.at(r, c) - m;
      v += d * d;
    }
    v /= cols_;
    const double is = 1.0 / std::sqrt(v + eps);
    mu[static_cast<std::size_t>(r)] = m;
    inv[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < cols_; ++c)
      out.at(r, c) = (xv.at(r, c) - m) * is * gain.val()[static_cast<std::size_t>(c)] +
                     bias.val()[static_cast<std::size_t>(c)];
  }
  return detail::make_node(std::move(out), {x, gain, bias}, [rows, cols_, mu, inv](Node& nd) {
    const Tensor& xv = nd.parents[0]->val;
    const Tensor& gv = nd.parents[1]->val;
    Tensor dx({rows, cols_});
    Tensor dg = Tensor::zeros(nd.parents[1]->val.shape());
    Tensor db = Tensor::zeros(nd.parents[2]->val.shape());
    for (int r = 0; r < rows; ++r) {
      const double m = mu[static_cast<std::size_t>(r)];
      const double is = inv[static_cast<std::size_t>(r)];
      double sum_gy = 0.0, sum_gyxh = 0.0;
      for (int c = 0; c < cols_; ++c) {
        const double xh = (xv.at(r, c) - m) * is;
        const double gy = nd.grad.at(r, c) * gv[static_cast<std::size_t>(c)];
        sum_gy += gy;
        sum_gyxh += gy * xh;
        dg[static_cast<std::size_t>(c)] += nd.grad.at(r, c) * xh;
        db[static_cast<std::size_t>(c)] += nd.grad.at(r, c);
      }
      for (int c = 0; c < cols_; ++c) {
        const double xh = (xv.at(r, c) - m) * is;
        const double gy = nd.grad.at(r, c) * gv[static_cast<std::size_t>(c)];
        dx.at(r, c) = is * (gy - sum_gy / cols_ - xh * sum_gyxh / cols_);
      }
    }
    detail::accumulate(nd.parents[0], dx);
    detail::accumulate(nd.parents[1], dg);
    detail::accumulate(nd.parents[2], db);
  });
}

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
  return detail::make_node(Tensor::scalar(s), {a}, [](Node& nd) {
    Tensor g = Tensor::full(nd.parents[0]->val.shape(), nd.grad[0]);
    detail::accumulate(nd.parents[0], g);
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel())); }

// one element per row: out[i] = a[i, idx[i]], shape (L,1)
inline Var pick_cols(const Var& a, std::vector<int> idx) {
  const Tensor& av = a.val();
  if (av.rank() != 2 || static_cast<int>(idx.size()) != av.dim(0))
    throw std::invalid_argument("pick_cols: index count mismatch");
  Tensor out({av.dim(0), 1});
  for (int r = 0; r < av.dim(0); ++r) out.at(r, 0) = av.at(r, idx[static_cast<std::size_t>(r)]);
  return detail::make_node(std::move(out), {a}, [idx](Node& nd) {
    Tensor g = Tensor::zeros(nd.parents[0]->val.shape());
    for (int r = 0; r < g.dim(0); ++r) g.at(r, idx[static_cast<std::size_t>(r)]) = nd.grad.at(r, 0);
    detail::accumulate(nd.parents[0], g);
  });
}

// ---- spatial ----

// x: (Cin,H,W), w: (Cout,Cin,kh,kw), bias optional (Cout). SAME-style padding
// given explicitly; output (Cout, (H+2p-kh)/s+1, (W+2p-kw)/s+1).
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 3 || wv.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
  const int Cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int K = Cin * kh * kw;
  const int N = Ho * Wo;

  // im2col
  Tensor colbuf({K, N});
  {
    double* cb = colbuf.data();
    for (int ci = 0; ci < Cin; ++ci)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const int krow = (ci * kh + ky) * kw + kx;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              double v = 0.0;
              if (iy >= 0 && iy < H && ix >= 0 && ix < W) v = xv.at(ci, iy, ix);
              cb[static_cast<std::size_t>(krow) * N + oy * Wo + ox] = v;
            }
          }
        }
  }
  Tensor out({Cout, Ho, Wo});
  {
    detail::ECMap Wm(wv.data(), Cout, K);
    detail::ECMap Cm(colbuf.data(), K, N);
    detail::EMap Om(out.data(), Cout, N);
    Om.noalias() = Wm * Cm;
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    for (int co = 0; co < Cout; ++co)
      for (int i = 0; i < N; ++i) out.data()[static_cast<std::size_t>(co) * N + i] += bias.val()[static_cast<std::size_t>(co)];
  }
  std::vector<Var> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return detail::make_node(
      std::move(out), parents,
      [colbuf, Cin, H, W, Cout, kh, kw, Ho, Wo, K, N, stride, pad, has_bias](Node& nd) {
        detail::ECMap G(nd.grad.data(), Cout, N);
        if (nd.parents[1]->requires_grad) {
          Tensor dw({Cout, Cin, kh, kw});
          detail::EMap DW(dw.data(), Cout, K);
          detail::ECMap Cm(colbuf.data(), K, N);
          DW.noalias() = G * Cm.transpose();
          detail::accumulate(nd.parents[1], dw);
        }
        if (has_bias && nd.parents[2]->requires_grad) {
          Tensor db = Tensor::zeros(nd.parents[2]->val.shape());
          for (int co = 0; co < Cout; ++co) {
            double s = 0.0;
            for (int i = 0; i < N; ++i) s += nd.grad.data()[static_cast<std::size_t>(co) * N + i];
            db[static_cast<std::size_t>(co)] = s;
          }
          detail::accumulate(nd.parents[2], db);
        }
        if (nd.parents[0]->requires_grad) {
          Tensor dcol({K, N});
          {
            detail::ECMap Wm(nd.parents[1]->val.data(), Cout, K);
            detail::EMap DC(dcol.data(), K, N);
            DC.noalias() = Wm.transpose() * G;
          }
          Tensor dx = Tensor::zeros({Cin, H, W});
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int krow = (ci * kh + ky) * kw + kx;
                for (int oy = 0; oy < Ho; ++oy) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= H) continue;
                  for (int ox = 0; ox < Wo; ++ox) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= W) continue;
                    dx.at(ci, iy, ix) += dcol.data()[static_cast<std::size_t>(krow) * N + oy * Wo + ox];
                  }
                }
              }
          detail::accumulate(nd.parents[0], dx);
        }
      });
}

inline Var avg_pool2(const Var& x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 3 || xv.dim(1) % 2 != 0 || xv.dim(2) % 2 != 0)
    throw std::invalid_argument("avg_pool2: needs even spatial dims");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out({C, H / 2, W / 2});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H / 2; ++y)
      for (int x2 = 0; x2 < W / 2; ++x2)
        out.at(c, y, x2) = 0.25 * (xv.at(c, 2 * y, 2 * x2) + xv.at(c, 2 * y, 2 * x2 + 1) +
                                   xv.at(c, 2 * y + 1, 2 * x2) + xv.at(c, 2 * y + 1, 2 * x2 + 1));
  return detail::make_node(std::move(out), {x}, [C, H, W](Node& nd) {
    Tensor g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int x2 = 0; x2 < W / 2; ++x2) {
          const double v = 0.25 * nd.grad.at(c, y, x2);
          g.at(c, 2 * y, 2 * x2) = v;
          g.at(c, 2 * y, 2 * x2 + 1) = v;
          g.at(c, 2 * y + 1, 2 * x2) = v;
          g.at(c, 2 * y + 1, 2 * x2 + 1) = v;
        }
    detail::accumulate(nd.parents[0], g);
  });
}

// Bilinear resize of (C,H,W) to (C,Ho,Wo), half-pixel centers.
inline Var upsample_bilinear(const Var& x, int Ho, int Wo) {
  const Tensor& xv = x.val();
  if (xv.rank() != 3) throw std::invalid_argument("upsample_bilinear: rank-3 required");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  struct Tap {
    int y0, y1, x0, x1;
    double wy, wx;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(Ho) * Wo);
  for (int oy = 0; oy < Ho; ++oy) {
    double sy = (oy + 0.5) * static_cast<double>(H) / Ho - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, H - 1);
    for (int ox = 0; ox < Wo; ++ox) {
      double sx = (ox + 0.5) * static_cast<double>(W) / Wo - 0.5;
      sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, W - 1);
      taps[static_cast<std::size_t>(oy) * Wo + ox] = {y0, y1, x0, x1, sy - y0, sx - x0};
    }
  }
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const Tap& t = taps[static_cast<std::size_t>(oy) * Wo + ox];
        const double a = xv.at(c, t.y0, t.x0), b = xv.at(c, t.y0, t.x1);
        const double d = xv.at(c, t.y1, t.x0), e = xv.at(c, t.y1, t.x1);
        out.at(c, oy, ox) = (1 - t.wy) * ((1 - t.wx) * a + t.wx * b) + t.wy * ((1 - t.wx) * d + t.wx * e);
      }
  return detail::make_node(std::move(out), {x}, [taps, C, H, W, Ho, Wo](Node& nd) {
    Tensor g = Tensor::zeros({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const Tap& t = taps[static_cast<std::size_t>(oy) * Wo + ox];
          const double go = nd.grad.at(c, oy, ox);
          g.at(c, t.y0, t.x0) += go * (1 - t.wy) * (1 - t.wx);
          g.at(c, t.y0, t.x1) += go * (1 - t.wy) * t.wx;
          g.at(c, t.y1, t.x0) += go * t.wy * (1 - t.wx);
          g.at(c, t.y1, t.x1) += go * t.wy * t.wx;
        }
    detail::accumulate(nd.parents[0], g);
  });
}

// Nearest-neighbour 2x upsampling (FPN top-down path).
inline Var upsample_nearest2(const Var& x) {
  const Tensor& xv = x.val();
  if (xv.rank() != 3) throw std::invalid_argument("upsample_nearest2: rank-3 required");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int x2 = 0; x2 < 2 * W; ++x2) out.at(c, y, x2) = xv.at(c, y / 2, x2 / 2);
  return detail::make_node(std::move(out), {x}, [C, H, W](Node& nd) {
    Tensor g = Tensor::zeros({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int x2 = 0; x2 < 2 * W; ++x2) g.at(c, y / 2, x2 / 2) += nd.grad.at(c, y, x2);
    detail::accumulate(nd.parents[0], g);
  });
}

}  // namespace ad
}  // namespace uniperc
