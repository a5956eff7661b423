#pragma once

// Reverse-mode automatic differentiation over a tape of Tensor nodes.
// Primitives cover exactly what the objectives here need: dense products,
// elementwise maps, stable softmax losses, and the SPD inverse whose
// adjoint is dA = -A^{-1} G A^{-1}. Graphs are append-only DAGs, so node
// order is already topological and backward is a single reverse walk.

#include <cmath>
#include <functional>
#include <vector>

#include "linalg.hpp"
#include "tensor.hpp"

namespace s2o {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> back;  // accumulates this node's grad into its parents'
  };

  Var leaf(const Tensor& t) { return push(t, t.requires_grad, {}); }

  Var constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), false, {});
  }

  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const { return node(v).value; }

  // Gradient of the last backward() root with respect to node v, as a tensor
  // shaped like v's value.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (!n.requires_grad)
      throw NumericsError("Tape::grad: node does not require gradients");
    if (n.grad.size() != n.value.numel())
      throw NumericsError("Tape::grad: backward has not been run over this node");
    Tensor g;
    g.shape = n.value.shape;
    g.data = n.grad;
    return g;
  }

  std::size_t size() const { return nodes_.size(); }

  // --- arithmetic ---

  Var add(Var a, Var b) {
    Tensor out = s2o::add(value(a), value(b));
    return push(std::move(out), needs(a) || needs(b), [ia = a.id, ib = b.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      });
      t.accumulate(ib, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      });
    });
  }

  Var sub(Var a, Var b) {
    Tensor out = s2o::sub(value(a), value(b));
    return push(std::move(out), needs(a) || needs(b), [ia = a.id, ib = b.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      });
      t.accumulate(ib, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
      });
    });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  Var scale(Var a, double c) {
    Tensor out = s2o::scale(value(a), c);
    return push(std::move(out), needs(a), [ia = a.id, c](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += c * g[i];
      });
    });
  }

  Var add_const(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v += c;
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      });
    });
  }

  Var mul(Var a, Var b) {
    Tensor out = hadamard(value(a), value(b));
    return push(std::move(out), needs(a) || needs(b), [ia = a.id, ib = b.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const auto& av = t.nodes_[ia].value.data;
      const auto& bv = t.nodes_[ib].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * bv[i];
      });
      t.accumulate(ib, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * av[i];
      });
    });
  }

  // --- matrix ops ---

  Var matmul(Var a, Var b) {
    Tensor out = s2o::matmul(value(a), value(b));
    return push(std::move(out), needs(a) || needs(b), [ia = a.id, ib = b.id](Tape& t, int self) {
      const Tensor& av = t.nodes_[ia].value;
      const Tensor& bv = t.nodes_[ib].value;
      Tensor g;
      g.shape = t.nodes_[self].value.shape;
      g.data = t.nodes_[self].grad;
      if (t.needs_id(ia)) {
        const Tensor da = matmul_nt(g, bv);  // G B^T
        t.accumulate(ia, [&](std::vector<double>& pg) {
          for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += da.data[i];
        });
      }
      if (t.needs_id(ib)) {
        const Tensor db = matmul_tn(av, g);  // A^T G
        t.accumulate(ib, [&](std::vector<double>& pg) {
          for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += db.data[i];
        });
      }
    });
  }

  Var transpose(Var a) {
    Tensor out = s2o::transpose(value(a));
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const Tensor& ov = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad;
      const std::size_t r = ov.rows(), c = ov.cols();
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) pg[j * r + i] += g[i * c + j];
      });
    });
  }

  Var diag_part(Var a) {
    Tensor out = s2o::diag_part(value(a));
    const std::size_t n = out.numel();
    return push(std::move(out), needs(a), [ia = a.id, n](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < n; ++i) pg[i * n + i] += g[i];
      });
    });
  }

  // Y = M + factor * tscalar * I. Keeps trace-relative damping inside the
  // graph so finite differences and backward see the same objective.
  Var add_scaled_identity(Var m, Var tscalar, double factor) {
    const Tensor& mv = value(m);
    require_square("add_scaled_identity", mv);
    if (value(tscalar).numel() != 1)
      throw ShapeError("add_scaled_identity: scale argument must be a scalar, got " +
                       shape_str(value(tscalar).shape));
    Tensor out = mv;
    const std::size_t n = mv.rows();
    const double tv = value(tscalar).data[0];
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) += factor * tv;
    return push(std::move(out), needs(m) || needs(tscalar),
                [im = m.id, it = tscalar.id, factor, n](Tape& t, int self) {
                  const auto& g = t.nodes_[self].grad;
                  t.accumulate(im, [&](std::vector<double>& pg) {
                    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
                  });
                  t.accumulate(it, [&](std::vector<double>& pg) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < n; ++i) s += g[i * n + i];
                    pg[0] += factor * s;
                  });
                });
  }

  // Y_ij = M_ij * s_i * s_j (two-sided diagonal scaling by a vector).
  Var row_col_scale(Var m, Var s) {
    const Tensor& mv = value(m);
    const Tensor& sv = value(s);
    require_square("row_col_scale", mv);
    if (!sv.is_vector() || sv.numel() != mv.rows())
      throw ShapeError("row_col_scale: scale vector shape " + shape_str(sv.shape) +
                       " does not match matrix " + shape_str(mv.shape));
    const std::size_t n = mv.rows();
    Tensor out = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = mv.at(i, j) * sv[i] * sv[j];
    return push(std::move(out), needs(m) || needs(s), [im = m.id, is = s.id, n](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const Tensor& mv2 = t.nodes_[im].value;
      const Tensor& sv2 = t.nodes_[is].value;
      t.accumulate(im, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) pg[i * n + j] += g[i * n + j] * sv2[i] * sv2[j];
      });
      t.accumulate(is, [&](std::vector<double>& pg) {
        for (std::size_t k = 0; k < n; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[k * n + j] * mv2.at(k, j) * sv2[j];
          for (std::size_t i = 0; i < n; ++i) acc += g[i * n + k] * mv2.at(i, k) * sv2[i];
          pg[k] += acc;
        }
      });
    });
  }

  // Inverse of an SPD matrix; adjoint is dA = -A^{-1} G A^{-1}.
  Var spd_inverse(Var a) {
    Tensor out = s2o::spd_inverse(value(a));
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const Tensor& y = t.nodes_[self].value;
      Tensor g;
      g.shape = y.shape;
      g.data = t.nodes_[self].grad;
      const Tensor yg = s2o::matmul(y, g);
      const Tensor ygy = s2o::matmul(yg, y);
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= ygy.data[i];
      });
    });
  }

  // --- elementwise maps ---

  Var relu(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const auto& x = t.nodes_[ia].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) pg[i] += g[i];  // subgradient at 0 is 0
      });
    });
  }

  Var tanh(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const auto& y = t.nodes_[self].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * (1.0 - y[i] * y[i]);
      });
    });
  }

  Var exp(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::exp(v);
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const auto& y = t.nodes_[self].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * y[i];
      });
    });
  }

  Var log(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) {
      if (!(v > 0.0))
        throw NumericsError("log: non-positive input " + std::to_string(v));
      v = std::log(v);
    }
    return push(std::move(out), needs(a), [ia = a.id](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const auto& x = t.nodes_[ia].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] / x[i];
      });
    });
  }

  Var pow_const(Var a, double p) {
    Tensor out = value(a);
    for (double& v : out.data) {
      if (p != std::floor(p) && !(v > 0.0))
        throw NumericsError("pow_const: non-positive base " + std::to_string(v) +
                            " with non-integer exponent " + std::to_string(p));
      v = std::pow(v, p);
    }
    return push(std::move(out), needs(a), [ia = a.id, p](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      const auto& x = t.nodes_[ia].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * p * std::pow(x[i], p - 1.0);
      });
    });
  }

  // --- reductions ---

  Var sum(Var a) {
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return push(Tensor::scalar(s), needs(a), [ia = a.id](Tape& t, int self) {
      const double g = t.nodes_[self].grad[0];
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (double& v : pg) v += g;
      });
    });
  }

  Var mean(Var a) {
    const std::size_t n = value(a).numel();
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  Var frobenius_sq(Var a) {
    double s = 0.0;
    for (double v : value(a).data) s += v * v;
    return push(Tensor::scalar(s), needs(a), [ia = a.id](Tape& t, int self) {
      const double g = t.nodes_[self].grad[0];
      const auto& x = t.nodes_[ia].value.data;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += 2.0 * g * x[i];
      });
    });
  }

  // --- softmax family (rowwise over a B x C matrix) ---

  Var log_softmax(Var a) {
    const Tensor& x = value(a);
    require_matrix("log_softmax", x);
    Tensor out = x;
    const std::size_t b = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < b; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x.at(i, j));
      double lse = 0.0;
      for (std::size_t j = 0; j < c; ++j) lse += std::exp(x.at(i, j) - mx);
      lse = mx + std::log(lse);
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) - lse;
    }
    return push(std::move(out), needs(a), [ia = a.id, b, c](Tape& t, int self) {
      const Tensor& y = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < b; ++i) {
          double rowsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) rowsum += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            pg[i * c + j] += g[i * c + j] - std::exp(y.at(i, j)) * rowsum;
        }
      });
    });
  }

  Var softmax(Var a) {
    const Tensor& x = value(a);
    require_matrix("softmax", x);
    Tensor out = x;
    const std::size_t b = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < b; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        out.at(i, j) = std::exp(x.at(i, j) - mx);
        z += out.at(i, j);
      }
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
    }
    return push(std::move(out), needs(a), [ia = a.id, b, c](Tape& t, int self) {
      const Tensor& p = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < b; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p.at(i, j);
          for (std::size_t j = 0; j < c; ++j)
            pg[i * c + j] += p.at(i, j) * (g[i * c + j] - dot);
        }
      });
    });
  }

  // out[b] = a[b, idx[b]].
  Var pick(Var a, const std::vector<int>& idx) {
    const Tensor& x = value(a);
    require_matrix("pick", x);
    if (idx.size() != x.rows())
      throw ShapeError("pick: index count " + std::to_string(idx.size()) +
                       " does not match rows of " + shape_str(x.shape));
    const std::size_t c = x.cols();
    Tensor out = Tensor::zeros({x.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= c)
        throw ShapeError("pick: index " + std::to_string(idx[i]) + " out of range for " +
                         std::to_string(c) + " columns at row " + std::to_string(i));
      out[i] = x.at(i, static_cast<std::size_t>(idx[i]));
    }
    return push(std::move(out), needs(a), [ia = a.id, idx, c](Tape& t, int self) {
      const auto& g = t.nodes_[self].grad;
      t.accumulate(ia, [&](std::vector<double>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i)
          pg[i * c + static_cast<std::size_t>(idx[i])] += g[i];
      });
    });
  }

  // --- backward ---

  void backward(Var root) {
    const Tensor& rv = value(root);
    if (rv.numel() != 1)
      throw NumericsError("backward: root has shape " + shape_str(rv.shape) +
                          "; non-scalar roots need an explicit seed");
    backward(root, Tensor::scalar(1.0));
  }

  void backward(Var root, const Tensor& seed) {
    Node& r = node(root);
    if (seed.numel() != r.value.numel())
      throw ShapeError("backward: seed shape " + shape_str(seed.shape) +
                       " does not match root shape " + shape_str(r.value.shape));
    for (int i = 0; i <= root.id; ++i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad) n.grad.assign(n.value.numel(), 0.0);
    }
    if (!r.requires_grad)
      throw NumericsError("backward: root does not depend on any differentiable leaf");
    r.grad = seed.data;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.back) n.back(*this, i);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  friend struct Node;

  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw NumericsError("Tape: invalid node handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw NumericsError("Tape: invalid node handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  bool needs(Var v) const { return node(v).requires_grad; }
  bool needs_id(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  template <typename F>
  void accumulate(int parent, F&& f) {
    Node& p = nodes_[static_cast<std::size_t>(parent)];
    if (!p.requires_grad) return;
    f(p.grad);
  }

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace s2o
