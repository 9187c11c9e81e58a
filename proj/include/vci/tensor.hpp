#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace vci::core {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reverse-mode tape over dense row-major matrices.
//
// Nodes are appended in evaluation order, so the reverse of the append order
// is a topological order and the backward sweep visits every node exactly
// once. Cycles cannot be constructed: an op may only reference nodes that
// already exist. Every forward op checks its result for NaN/Inf and throws
// TapeError on the first non-finite value.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    Mat<Scalar> value;
    Mat<Scalar> grad;  // sized during backward(); empty until then
    bool requires_grad = false;
    std::function<void(Tape&, int)> backprop;  // pushes grad(id) into parents
    const char* op = "leaf";
  };

  int size() const { return static_cast<int>(nodes_.size()); }

  const Mat<Scalar>& value(int id) const { return at(id).value; }

  // Gradient of the last backward() loss with respect to node id. Zero for
  // nodes the loss does not depend on (including never-used leaves).
  const Mat<Scalar>& grad(int id) {
    Node& n = at(id);
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) {
      n.grad = Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  bool requires_grad(int id) const { return at(id).requires_grad; }

  int leaf(Mat<Scalar> v, bool requires_grad_flag, const char* op = "leaf") {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad_flag;
    n.op = op;
    check_finite(n.value, op);
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  int constant(Mat<Scalar> v, const char* op = "constant") {
    return leaf(std::move(v), false, op);
  }

  int make_op(Mat<Scalar> v, bool requires_grad_flag,
              std::function<void(Tape&, int)> backprop, const char* op) {
    check_finite(v, op);
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad_flag;
    n.backprop = std::move(backprop);
    n.op = op;
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  // Accumulates g into the gradient buffer of node id if it wants gradients.
  void accumulate(int id, const Mat<Scalar>& g) {
    Node& n = at(id);
    if (!n.requires_grad) return;
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) {
      n.grad = Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    }
    n.grad += g;
  }

  // Reverse sweep from a 1x1 loss node. Gradient buffers are reset first, so
  // repeated backward calls do not accumulate across sweeps.
  void backward(int loss_id) {
    const Node& loss = at(loss_id);
    if (loss.value.rows() != 1 || loss.value.cols() != 1) {
      throw TapeError("backward: loss node must be a 1x1 scalar, got " +
                      shape_str(loss.value));
    }
    for (Node& n : nodes_) {
      n.grad = Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    }
    at(loss_id).grad(0, 0) = Scalar(1);
    for (int i = loss_id; i >= 0; --i) {
      Node& n = at(i);
      if (n.requires_grad && n.backprop) n.backprop(*this, i);
    }
  }

  static void check_finite(const Mat<Scalar>& m, const char* op) {
    if (!m.allFinite()) {
      throw TapeError(std::string("non-finite values produced by op '") + op +
                      "'");
    }
  }

  static std::string shape_str(const Mat<Scalar>& m) {
    return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
           ")";
  }

 private:
  Node& at(int id) {
    if (id < 0 || id >= size()) throw TapeError("node id out of range");
    return nodes_[static_cast<size_t>(id)];
  }
  const Node& at(int id) const {
    if (id < 0 || id >= size()) throw TapeError("node id out of range");
    return nodes_[static_cast<size_t>(id)];
  }

  std::vector<Node> nodes_;
};

// Lightweight handle for expression-style op composition.
template <typename Scalar>
struct TRef {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Mat<Scalar>& value() const { return tape->value(id); }
  const Mat<Scalar>& grad() const { return tape->grad(id); }
};

template <typename Scalar>
TRef<Scalar> make_leaf(Tape<Scalar>& tp, Mat<Scalar> v, bool requires_grad) {
  return {&tp, tp.leaf(std::move(v), requires_grad)};
}

template <typename Scalar>
TRef<Scalar> make_constant(Tape<Scalar>& tp, Mat<Scalar> v) {
  return {&tp, tp.constant(std::move(v))};
}

namespace detail {

inline void require_same_tape(const void* a, const void* b, const char* op) {
  if (a != b) throw TapeError(std::string(op) + ": operands on different tapes");
}

}  // namespace detail

// ---- elementwise and structural ops ----------------------------------------

template <typename Scalar>
TRef<Scalar> add(TRef<Scalar> a, TRef<Scalar> b) {
  detail::require_same_tape(a.tape, b.tape, "add");
  Tape<Scalar>& tp = *a.tape;
  if (a.value().rows() != b.value().rows() ||
      a.value().cols() != b.value().cols()) {
    throw TapeError("add: shape mismatch " + Tape<Scalar>::shape_str(a.value()) +
                    " vs " + Tape<Scalar>::shape_str(b.value()));
  }
  bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
  int ia = a.id, ib = b.id;
  int out = tp.make_op(
      a.value() + b.value(), rg,
      [ia, ib](Tape<Scalar>& t, int self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(ib, t.grad(self));
      },
      "add");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> sub(TRef<Scalar> a, TRef<Scalar> b) {
  detail::require_same_tape(a.tape, b.tape, "sub");
  Tape<Scalar>& tp = *a.tape;
  if (a.value().rows() != b.value().rows() ||
      a.value().cols() != b.value().cols()) {
    throw TapeError("sub: shape mismatch " + Tape<Scalar>::shape_str(a.value()) +
                    " vs " + Tape<Scalar>::shape_str(b.value()));
  }
  bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
  int ia = a.id, ib = b.id;
  int out = tp.make_op(
      a.value() - b.value(), rg,
      [ia, ib](Tape<Scalar>& t, int self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(ib, (-t.grad(self)).eval());
      },
      "sub");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> hadamard(TRef<Scalar> a, TRef<Scalar> b) {
  detail::require_same_tape(a.tape, b.tape, "hadamard");
  Tape<Scalar>& tp = *a.tape;
  if (a.value().rows() != b.value().rows() ||
      a.value().cols() != b.value().cols()) {
    throw TapeError("hadamard: shape mismatch");
  }
  bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
  int ia = a.id, ib = b.id;
  int out = tp.make_op(
      a.value().cwiseProduct(b.value()), rg,
      [ia, ib](Tape<Scalar>& t, int self) {
        t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ib)).eval());
        t.accumulate(ib, t.grad(self).cwiseProduct(t.value(ia)).eval());
      },
      "hadamard");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> scale(TRef<Scalar> a, Scalar c) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      (a.value() * c).eval(), tp.requires_grad(a.id),
      [ia, c](Tape<Scalar>& t, int self) {
        t.accumulate(ia, (t.grad(self) * c).eval());
      },
      "scale");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> add_scalar(TRef<Scalar> a, Scalar c) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      (a.value().array() + c).matrix(), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) { t.accumulate(ia, t.grad(self)); },
      "add_scalar");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> neg(TRef<Scalar> a) {
  return scale(a, Scalar(-1));
}

// Matrix product (n x k) * (k x m).
template <typename Scalar>
TRef<Scalar> matmul(TRef<Scalar> a, TRef<Scalar> b) {
  detail::require_same_tape(a.tape, b.tape, "matmul");
  Tape<Scalar>& tp = *a.tape;
  if (a.value().cols() != b.value().rows()) {
    throw TapeError("matmul: inner dimension mismatch " +
                    Tape<Scalar>::shape_str(a.value()) + " vs " +
                    Tape<Scalar>::shape_str(b.value()));
  }
  bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
  int ia = a.id, ib = b.id;
  int out = tp.make_op(
      a.value() * b.value(), rg,
      [ia, ib](Tape<Scalar>& t, int self) {
        t.accumulate(ia, (t.grad(self) * t.value(ib).transpose()).eval());
        t.accumulate(ib, (t.value(ia).transpose() * t.grad(self)).eval());
      },
      "matmul");
  return {&tp, out};
}

// Adds a 1 x d row vector to every row of an n x d matrix (bias broadcast).
template <typename Scalar>
TRef<Scalar> add_rowvec(TRef<Scalar> a, TRef<Scalar> v) {
  detail::require_same_tape(a.tape, v.tape, "add_rowvec");
  Tape<Scalar>& tp = *a.tape;
  if (v.value().rows() != 1 || v.value().cols() != a.value().cols()) {
    throw TapeError("add_rowvec: vector must be 1 x cols(a)");
  }
  bool rg = tp.requires_grad(a.id) || tp.requires_grad(v.id);
  int ia = a.id, iv = v.id;
  int out = tp.make_op(
      (a.value().rowwise() + v.value().row(0)).eval(), rg,
      [ia, iv](Tape<Scalar>& t, int self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(iv, t.grad(self).colwise().sum().eval());
      },
      "add_rowvec");
  return {&tp, out};
}

// Multiplies every row of an n x d matrix elementwise by a 1 x d row vector.
template <typename Scalar>
TRef<Scalar> mul_rowvec(TRef<Scalar> a, TRef<Scalar> v) {
  detail::require_same_tape(a.tape, v.tape, "mul_rowvec");
  Tape<Scalar>& tp = *a.tape;
  if (v.value().rows() != 1 || v.value().cols() != a.value().cols()) {
    throw TapeError("mul_rowvec: vector must be 1 x cols(a)");
  }
  bool rg = tp.requires_grad(a.id) || tp.requires_grad(v.id);
  int ia = a.id, iv = v.id;
  int out = tp.make_op(
      (a.value().array().rowwise() * v.value().row(0).array()).matrix(), rg,
      [ia, iv](Tape<Scalar>& t, int self) {
        t.accumulate(
            ia, (t.grad(self).array().rowwise() * t.value(iv).row(0).array())
                    .matrix()
                    .eval());
        t.accumulate(
            iv,
            (t.grad(self).cwiseProduct(t.value(ia))).colwise().sum().eval());
      },
      "mul_rowvec");
  return {&tp, out};
}

// ---- nonlinearities ---------------------------------------------------------

template <typename Scalar>
TRef<Scalar> relu(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      a.value().cwiseMax(Scalar(0)), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        Mat<Scalar> mask =
            (t.value(ia).array() > Scalar(0)).template cast<Scalar>();
        t.accumulate(ia, t.grad(self).cwiseProduct(mask).eval());
      },
      "relu");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> leaky_relu(TRef<Scalar> a, Scalar slope) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  Mat<Scalar> v = a.value().cwiseMax(a.value() * slope);
  int out = tp.make_op(
      std::move(v), tp.requires_grad(a.id),
      [ia, slope](Tape<Scalar>& t, int self) {
        Mat<Scalar> pos =
            (t.value(ia).array() > Scalar(0)).template cast<Scalar>();
        Mat<Scalar> mask =
            (pos.array() + slope * (Scalar(1) - pos.array())).matrix();
        t.accumulate(ia, t.grad(self).cwiseProduct(mask).eval());
      },
      "leaky_relu");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> tanh_op(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      a.value().array().tanh().matrix(), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        Mat<Scalar> one_minus_sq =
            (Scalar(1) - t.value(self).array().square()).matrix();
        t.accumulate(ia, t.grad(self).cwiseProduct(one_minus_sq).eval());
      },
      "tanh");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> sigmoid(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  Mat<Scalar> s =
      (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  int out = tp.make_op(
      std::move(s), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        Mat<Scalar> ds =
            (t.value(self).array() * (Scalar(1) - t.value(self).array()))
                .matrix();
        t.accumulate(ia, t.grad(self).cwiseProduct(ds).eval());
      },
      "sigmoid");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> exp_op(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      a.value().array().exp().matrix(), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)).eval());
      },
      "exp");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> log_op(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  if ((a.value().array() <= Scalar(0)).any()) {
    throw TapeError("log: non-positive input");
  }
  int ia = a.id;
  int out = tp.make_op(
      a.value().array().log().matrix(), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        t.accumulate(ia,
                     t.grad(self).cwiseQuotient(t.value(ia)).eval());
      },
      "log");
  return {&tp, out};
}

// Clamp to [lo, hi]; entries that were clipped get zero gradient.
template <typename Scalar>
TRef<Scalar> clamp(TRef<Scalar> a, Scalar lo, Scalar hi) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      a.value().cwiseMax(lo).cwiseMin(hi), tp.requires_grad(a.id),
      [ia, lo, hi](Tape<Scalar>& t, int self) {
        Mat<Scalar> mask = ((t.value(ia).array() > lo) &&
                            (t.value(ia).array() < hi))
                               .template cast<Scalar>();
        t.accumulate(ia, t.grad(self).cwiseProduct(mask).eval());
      },
      "clamp");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> square(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      a.value().array().square().matrix(), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        t.accumulate(
            ia, (t.grad(self).cwiseProduct(t.value(ia)) * Scalar(2)).eval());
      },
      "square");
  return {&tp, out};
}

// ---- reductions and reshaping ----------------------------------------------

// Sum of all entries, result is 1x1.
template <typename Scalar>
TRef<Scalar> sum_all(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  Mat<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  int out = tp.make_op(
      std::move(v), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        Scalar g = t.grad(self)(0, 0);
        t.accumulate(ia, Mat<Scalar>::Constant(t.value(ia).rows(),
                                               t.value(ia).cols(), g));
      },
      "sum_all");
  return {&tp, out};
}

template <typename Scalar>
TRef<Scalar> mean_all(TRef<Scalar> a) {
  Scalar n = static_cast<Scalar>(a.value().rows() * a.value().cols());
  return scale(sum_all(a), Scalar(1) / n);
}

// Per-row sum: (n x d) -> (n x 1).
template <typename Scalar>
TRef<Scalar> row_sum(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int ia = a.id;
  int out = tp.make_op(
      a.value().rowwise().sum(), tp.requires_grad(a.id),
      [ia](Tape<Scalar>& t, int self) {
        Mat<Scalar> g = t.grad(self) *
                        Mat<Scalar>::Ones(1, t.value(ia).cols());
        t.accumulate(ia, g);
      },
      "row_sum");
  return {&tp, out};
}

// Column-wise concatenation of same-row-count blocks.
template <typename Scalar>
TRef<Scalar> concat_cols(const std::vector<TRef<Scalar>>& parts) {
  if (parts.empty()) throw TapeError("concat_cols: no inputs");
  Tape<Scalar>& tp = *parts[0].tape;
  Eigen::Index rows = parts[0].value().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0].tape, p.tape, "concat_cols");
    if (p.value().rows() != rows) {
      throw TapeError("concat_cols: row count mismatch");
    }
    cols += p.value().cols();
    rg = rg || tp.requires_grad(p.id);
  }
  Mat<Scalar> v(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.value().cols()) = p.value();
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.value().cols();
  }
  int out = tp.make_op(
      std::move(v), rg,
      [ids, offsets](Tape<Scalar>& t, int self) {
        for (size_t k = 0; k < ids.size(); ++k) {
          Eigen::Index w = t.value(ids[k]).cols();
          t.accumulate(ids[k],
                       t.grad(self).middleCols(offsets[k], w).eval());
        }
      },
      "concat_cols");
  return {&tp, out};
}

// Row gather: out(i, :) = table(idx[i], :). Backward scatters into the table.
template <typename Scalar>
TRef<Scalar> gather_rows(TRef<Scalar> table, const std::vector<int>& idx) {
  Tape<Scalar>& tp = *table.tape;
  const Mat<Scalar>& tab = table.value();
  Mat<Scalar> v(static_cast<Eigen::Index>(idx.size()), tab.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= tab.rows()) {
      throw TapeError("gather_rows: index " + std::to_string(idx[i]) +
                      " out of range for table with " +
                      std::to_string(tab.rows()) + " rows");
    }
    v.row(static_cast<Eigen::Index>(i)) = tab.row(idx[i]);
  }
  int it = table.id;
  int out = tp.make_op(
      std::move(v), tp.requires_grad(table.id),
      [it, idx](Tape<Scalar>& t, int self) {
        Mat<Scalar> g =
            Mat<Scalar>::Zero(t.value(it).rows(), t.value(it).cols());
        for (size_t i = 0; i < idx.size(); ++i) {
          g.row(idx[i]) += t.grad(self).row(static_cast<Eigen::Index>(i));
        }
        t.accumulate(it, g);
      },
      "gather_rows");
  return {&tp, out};
}

// Identity on values; blocks gradient flow to the input.
template <typename Scalar>
TRef<Scalar> stop_gradient(TRef<Scalar> a) {
  Tape<Scalar>& tp = *a.tape;
  int out = tp.make_op(
      a.value(), false, nullptr, "stop_gradient");
  return {&tp, out};
}

}  // namespace vci::core
