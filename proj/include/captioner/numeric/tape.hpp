#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "captioner/errors.hpp"
#include "captioner/numeric/functions.hpp"
#include "captioner/numeric/matrix.hpp"

namespace captioner {

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode differentiation over a recorded sequence of matrix
/// operations. Nodes are appended in evaluation order, so the recording is
/// already topologically sorted and backward() is a single reverse sweep.
///
/// Parameters are referenced, not copied: the referenced matrices must
/// outlive the tape and must not change while it is alive. After backward(),
/// each parameter's gradient is added into its sink matrix.
template <typename Real = double>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Matrix<Real> value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  Var parameter(const Matrix<Real>& value, Matrix<Real>* grad_sink = nullptr) {
    if (grad_sink != nullptr) require_same_shape(value, *grad_sink, "parameter gradient sink");
    Node n;
    n.ref = &value;
    n.sink = grad_sink;
    n.requires_grad = true;
    return push(std::move(n));
  }

  const Matrix<Real>& value(Var v) const { return node(v).value(); }

  const Matrix<Real>& grad(Var v) const {
    if (!has_gradients_) throw InvalidState("gradients requested before backward()");
    const auto& n = node(v);
    if (v.id > last_backward_root_ || !n.requires_grad) {
      throw InvalidState("node " + std::to_string(v.id) + " has no gradient");
    }
    return n.grad;
  }

  /// Back-propagates d(loss)/d(node) for every node recorded before `loss`.
  void backward(Var loss) {
    if (nodes_.empty()) throw InvalidState("backward() on an empty tape");
    const auto& root = node(loss);
    if (root.value().rows() != 1 || root.value().cols() != 1) {
      throw ShapeError("backward() needs a 1x1 loss, got " + root.value().shape_string());
    }
    for (std::size_t i = 0; i <= loss.id; ++i) {
      auto& n = nodes_[i];
      if (n.requires_grad) n.grad = Matrix<Real>(n.value().rows(), n.value().cols());
    }
    nodes_[loss.id].grad(0, 0) = Real(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
    for (std::size_t i = 0; i <= loss.id; ++i) {
      auto& n = nodes_[i];
      if (n.sink != nullptr) add_in_place(*n.sink, n.grad);
    }
    has_gradients_ = true;
    last_backward_root_ = loss.id;
  }

  // ---------------------------------------------------------------- ops

  Var matmul(Var a, Var b) {
    auto out = captioner::matmul(value(a), value(b));
    return record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      if (t.needs(a)) matmul_nt_accumulate(g, t.value(b), t.nodes_[a.id].grad);
      if (t.needs(b)) matmul_tn_accumulate(t.value(a), g, t.nodes_[b.id].grad);
    });
  }

  Var add(Var a, Var b) {
    require_same_shape(value(a), value(b), "add");
    auto out = value(a);
    add_in_place(out, value(b));
    return record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      if (t.needs(a)) add_in_place(t.nodes_[a.id].grad, g);
      if (t.needs(b)) add_in_place(t.nodes_[b.id].grad, g);
    });
  }

  // a (m×n) + row (1×n) broadcast over every row of a.
  Var add_row(Var a, Var row) {
    const auto& av = value(a);
    const auto& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
      throw ShapeError("add_row: " + av.shape_string() + " + " + rv.shape_string());
    }
    auto out = av;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += rv[j];
    }
    return record(std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      if (t.needs(a)) add_in_place(t.nodes_[a.id].grad, g);
      if (t.needs(row)) {
        auto& gr = t.nodes_[row.id].grad;
        for (std::size_t i = 0; i < g.rows(); ++i) {
          auto r = g.row(i);
          for (std::size_t j = 0; j < r.size(); ++j) gr[j] += r[j];
        }
      }
    });
  }

  // Elementwise product.
  Var mul(Var a, Var b) {
    require_same_shape(value(a), value(b), "mul");
    auto out = value(a);
    const auto bv = value(b).data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const auto g = t.nodes_[self].grad.data();
      if (t.needs(a)) {
        auto ga = t.nodes_[a.id].grad.data();
        const auto bv = t.value(b).data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (t.needs(b)) {
        auto gb = t.nodes_[b.id].grad.data();
        const auto av = t.value(a).data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }

  // scale·a + shift
  Var affine(Var a, Real scale, Real shift) {
    auto out = value(a);
    for (auto& v : out.data()) v = scale * v + shift;
    return record(std::move(out), {a}, [a, scale](Tape& t, std::size_t self) {
      const auto g = t.nodes_[self].grad.data();
      auto ga = t.nodes_[a.id].grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
    });
  }

  Var tanh(Var a) {
    auto out = value(a);
    for (auto& v : out.data()) v = std::tanh(v);
    return record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const auto& n = t.nodes_[self];
      const auto g = n.grad.data();
      const auto y = n.value().data();
      auto ga = t.nodes_[a.id].grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (Real(1) - y[i] * y[i]);
    });
  }

  Var sigmoid(Var a) {
    auto out = value(a);
    for (auto& v : out.data()) v = captioner::sigmoid(v);
    return record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const auto& n = t.nodes_[self];
      const auto g = n.grad.data();
      const auto y = n.value().data();
      auto ga = t.nodes_[a.id].grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (Real(1) - y[i]);
    });
  }

  Var relu(Var a) {
    auto out = value(a);
    for (auto& v : out.data()) v = v > Real(0) ? v : Real(0);
    return record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const auto& n = t.nodes_[self];
      const auto g = n.grad.data();
      const auto y = n.value().data();
      auto ga = t.nodes_[a.id].grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (y[i] > Real(0)) ga[i] += g[i];
      }
    });
  }

  // Softmax applied independently to each row.
  Var softmax_rows(Var a) {
    const auto& av = value(a);
    Matrix<Real> out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
      const auto p = softmax(av.row(i));
      std::copy(p.begin(), p.end(), out.row(i).begin());
    }
    return record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
      const auto& n = t.nodes_[self];
      auto& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < n.grad.rows(); ++i) {
        const auto g = n.grad.row(i);
        const auto y = n.value().row(i);
        Real dot = 0;
        for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * y[j];
        auto out = ga.row(i);
        for (std::size_t j = 0; j < g.size(); ++j) out[j] += y[j] * (g[j] - dot);
      }
    });
  }

  Var transpose(Var a) {
    return record(captioner::transpose(value(a)), {a}, [a](Tape& t, std::size_t self) {
      add_in_place(t.nodes_[a.id].grad, captioner::transpose(t.nodes_[self].grad));
    });
  }

  // [a | b], same row count.
  Var concat_cols(Var a, Var b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.rows() != bv.rows()) throw ShapeError("concat_cols: " + av.shape_string() + " | " + bv.shape_string());
    Matrix<Real> out(av.rows(), av.cols() + bv.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
      auto o = out.row(i);
      std::copy(av.row(i).begin(), av.row(i).end(), o.begin());
      std::copy(bv.row(i).begin(), bv.row(i).end(), o.begin() + static_cast<std::ptrdiff_t>(av.cols()));
    }
    return record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad;
      const std::size_t split = t.value(a).cols();
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const auto gr = g.row(i);
        if (t.needs(a)) {
          auto ga = t.nodes_[a.id].grad.row(i);
          for (std::size_t j = 0; j < split; ++j) ga[j] += gr[j];
        }
        if (t.needs(b)) {
          auto gb = t.nodes_[b.id].grad.row(i);
          for (std::size_t j = split; j < gr.size(); ++j) gb[j - split] += gr[j];
        }
      }
    });
  }

  // Stacks the given nodes vertically; all must share a column count.
  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw ShapeError("concat_rows: column count mismatch");
      rows += value(p).rows();
    }
    Matrix<Real> out(rows, cols);
    std::size_t at = 0;
    for (Var p : parts) {
      const auto src = value(p).data();
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(at * cols));
      at += value(p).rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return record(std::move(out), inputs, [inputs](Tape& t, std::size_t self) {
      const auto g = t.nodes_[self].grad.data();
      std::size_t offset = 0;
      for (Var p : inputs) {
        const std::size_t n = t.value(p).size();
        if (t.needs(p)) {
          auto gp = t.nodes_[p.id].grad.data();
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
        }
        offset += n;
      }
    });
  }

  // Row `index` of `table` as a 1×cols matrix.
  Var embedding(Var table, std::size_t index) {
    const auto& tv = value(table);
    if (index >= tv.rows()) {
      throw InvalidArgument("embedding: index " + std::to_string(index) + " >= " + std::to_string(tv.rows()));
    }
    Matrix<Real> out(1, tv.cols());
    std::copy(tv.row(index).begin(), tv.row(index).end(), out.data().begin());
    return record(std::move(out), {table}, [table, index](Tape& t, std::size_t self) {
      const auto g = t.nodes_[self].grad.data();
      auto gt = t.nodes_[table.id].grad.row(index);
      for (std::size_t j = 0; j < g.size(); ++j) gt[j] += g[j];
    });
  }

  Var sum(Var a) {
    Real total = 0;
    for (Real v : value(a).data()) total += v;
    return record(Matrix<Real>(1, 1, total), {a}, [a](Tape& t, std::size_t self) {
      const Real g = t.nodes_[self].grad[0];
      for (auto& v : t.nodes_[a.id].grad.data()) v += g;
    });
  }

  /// Fused log-softmax + masked mean negative log-likelihood; 1×1 result.
  Var cross_entropy(Var logits, std::vector<std::size_t> targets, std::vector<bool> mask) {
    const Real loss = masked_cross_entropy(value(logits), std::span<const std::size_t>(targets), mask);
    return record(Matrix<Real>(1, 1, loss), {logits},
                  [logits, targets = std::move(targets), mask = std::move(mask)](Tape& t, std::size_t self) {
                    const Real g = t.nodes_[self].grad[0];
                    const auto& lv = t.value(logits);
                    std::size_t count = 0;
                    for (bool m : mask) count += m ? 1 : 0;
                    if (count == 0) return;
                    const Real scale = g / static_cast<Real>(count);
                    auto& gl = t.nodes_[logits.id].grad;
                    for (std::size_t r = 0; r < lv.rows(); ++r) {
                      if (!mask[r]) continue;
                      const auto p = softmax(lv.row(r));
                      auto out = gl.row(r);
                      for (std::size_t j = 0; j < p.size(); ++j) out[j] += scale * p[j];
                      out[targets[r]] -= scale;
                    }
                  });
  }

 private:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Matrix<Real> owned;
    const Matrix<Real>* ref = nullptr;
    Matrix<Real> grad;
    Matrix<Real>* sink = nullptr;
    Backward backward;
    bool requires_grad = false;

    const Matrix<Real>& value() const { return ref != nullptr ? *ref : owned; }
  };

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw InvalidArgument("unknown tape node " + std::to_string(v.id));
    return nodes_[v.id];
  }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  Var push(Node n) {
    has_gradients_ = false;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var record(Matrix<Real> value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Matrix<Real> value, const std::vector<Var>& inputs, Backward backward) {
    Node n;
    n.owned = std::move(value);
    for (Var in : inputs) n.requires_grad = n.requires_grad || needs(in);
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  bool has_gradients_ = false;
  std::size_t last_backward_root_ = 0;
};

}  // namespace captioner
