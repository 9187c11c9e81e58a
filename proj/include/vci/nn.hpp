#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vci/rng.hpp"
#include "vci/tensor.hpp"

namespace vci::core {

enum class Act { identity, relu, leaky_relu, tanh_fn };

inline std::string act_name(Act a) {
  switch (a) {
    case Act::identity: return "identity";
    case Act::relu: return "relu";
    case Act::leaky_relu: return "leaky_relu";
    case Act::tanh_fn: return "tanh";
  }
  throw std::runtime_error("unknown activation");
}

inline Act act_from_name(const std::string& s) {
  if (s == "identity") return Act::identity;
  if (s == "relu") return Act::relu;
  if (s == "leaky_relu") return Act::leaky_relu;
  if (s == "tanh") return Act::tanh_fn;
  throw std::runtime_error("unknown activation name '" + s + "'");
}

template <typename Scalar>
struct DenseLayer {
  Mat<Scalar> W;  // (in x out)
  Mat<Scalar> b;  // (1 x out)
  Act act = Act::identity;
  Scalar leaky_slope = Scalar(0.2);
};

template <typename Scalar>
struct Mlp {
  std::vector<DenseLayer<Scalar>> layers;

  int in_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.front().W.rows());
  }
  int out_dim() const {
    return layers.empty() ? 0 : static_cast<int>(layers.back().W.cols());
  }
};

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
template <typename Scalar>
Mat<Scalar> glorot_uniform(int rows, int cols, Engine& eng) {
  double a = std::sqrt(6.0 / (static_cast<double>(rows) + cols));
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      m(i, j) = static_cast<Scalar>(draw_uniform(eng, -a, a));
    }
  }
  return m;
}

template <typename Scalar>
Mlp<Scalar> make_mlp(int in, const std::vector<int>& hidden, int out,
                     Act hidden_act, Engine& eng,
                     Act out_act = Act::identity,
                     Scalar leaky_slope = Scalar(0.2)) {
  Mlp<Scalar> m;
  int prev = in;
  for (int h : hidden) {
    DenseLayer<Scalar> l;
    l.W = glorot_uniform<Scalar>(prev, h, eng);
    l.b = Mat<Scalar>::Zero(1, h);
    l.act = hidden_act;
    l.leaky_slope = leaky_slope;
    m.layers.push_back(std::move(l));
    prev = h;
  }
  DenseLayer<Scalar> l;
  l.W = glorot_uniform<Scalar>(prev, out, eng);
  l.b = Mat<Scalar>::Zero(1, out);
  l.act = out_act;
  l.leaky_slope = leaky_slope;
  m.layers.push_back(std::move(l));
  return m;
}

template <typename Scalar>
TRef<Scalar> apply_act(TRef<Scalar> x, Act act, Scalar slope) {
  switch (act) {
    case Act::identity: return x;
    case Act::relu: return relu(x);
    case Act::leaky_relu: return leaky_relu(x, slope);
    case Act::tanh_fn: return tanh_op(x);
  }
  throw std::runtime_error("unknown activation");
}

// Node ids of the parameter leaves created by one taped forward pass, in
// (W0, b0, W1, b1, ...) order. Gradients are read back through these.
template <typename Scalar>
struct MlpNodes {
  std::vector<int> w;
  std::vector<int> b;
};

template <typename Scalar>
TRef<Scalar> mlp_forward(Tape<Scalar>& tp, const Mlp<Scalar>& m,
                         TRef<Scalar> x, MlpNodes<Scalar>* nodes = nullptr,
                         bool trainable = true) {
  TRef<Scalar> h = x;
  for (const auto& layer : m.layers) {
    TRef<Scalar> w = make_leaf<Scalar>(tp, layer.W, trainable);
    TRef<Scalar> b = make_leaf<Scalar>(tp, layer.b, trainable);
    if (nodes) {
      nodes->w.push_back(w.id);
      nodes->b.push_back(b.id);
    }
    h = apply_act(add_rowvec(matmul(h, w), b), layer.act, layer.leaky_slope);
  }
  return h;
}

// Tape-free forward pass for evaluation; matches mlp_forward values exactly.
// The product is materialized row-major before the bias add, mirroring the
// taped ops, so the two paths round identically.
template <typename Scalar>
Mat<Scalar> mlp_eval(const Mlp<Scalar>& m, const Mat<Scalar>& x) {
  Mat<Scalar> h = x;
  for (const auto& layer : m.layers) {
    Mat<Scalar> prod = h * layer.W;
    h = prod.rowwise() + layer.b.row(0);
    switch (layer.act) {
      case Act::identity: break;
      case Act::relu: h = h.cwiseMax(Scalar(0)); break;
      case Act::leaky_relu:
        h = h.cwiseMax((h * layer.leaky_slope).eval());
        break;
      case Act::tanh_fn: h = h.array().tanh().matrix(); break;
    }
  }
  return h;
}

// ---- parameter registry -----------------------------------------------------

template <typename Scalar>
struct ParamRef {
  Mat<Scalar>* value = nullptr;
  std::string name;
};

template <typename Scalar>
void append_mlp_params(Mlp<Scalar>& m, const std::string& prefix,
                       std::vector<ParamRef<Scalar>>& out) {
  for (size_t i = 0; i < m.layers.size(); ++i) {
    out.push_back({&m.layers[i].W, prefix + ".w" + std::to_string(i)});
    out.push_back({&m.layers[i].b, prefix + ".b" + std::to_string(i)});
  }
}

// ---- optimizer ----------------------------------------------------------------

class OptimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Adam with decoupled weight decay. Moment buffers are lazily sized on the
// first step and afterwards must match the parameter list.
template <typename Scalar>
struct Adam {
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  Scalar weight_decay = Scalar(0);
  long long t = 0;
  std::vector<Mat<Scalar>> m;
  std::vector<Mat<Scalar>> v;

  void step(const std::vector<ParamRef<Scalar>>& params,
            const std::vector<Mat<Scalar>>& grads, Scalar lr) {
    if (params.size() != grads.size()) {
      throw OptimError("adam: parameter/gradient count mismatch");
    }
    if (m.empty()) {
      for (const auto& p : params) {
        m.push_back(Mat<Scalar>::Zero(p.value->rows(), p.value->cols()));
        v.push_back(Mat<Scalar>::Zero(p.value->rows(), p.value->cols()));
      }
    }
    if (m.size() != params.size()) {
      throw OptimError("adam: state size mismatch");
    }
    ++t;
    Scalar c1 = Scalar(1) - std::pow(beta1, static_cast<Scalar>(t));
    Scalar c2 = Scalar(1) - std::pow(beta2, static_cast<Scalar>(t));
    for (size_t i = 0; i < params.size(); ++i) {
      const Mat<Scalar>& g = grads[i];
      if (!g.allFinite()) {
        throw OptimError("adam: non-finite gradient for parameter '" +
                         params[i].name + "'");
      }
      if (g.rows() != params[i].value->rows() ||
          g.cols() != params[i].value->cols()) {
        throw OptimError("adam: gradient shape mismatch for parameter '" +
                         params[i].name + "'");
      }
      m[i] = beta1 * m[i] + (Scalar(1) - beta1) * g;
      v[i] = (beta2 * v[i].array() +
              (Scalar(1) - beta2) * g.array().square())
                 .matrix();
      Mat<Scalar> update =
          ((m[i].array() / c1) /
           ((v[i].array() / c2).sqrt() + eps))
              .matrix();
      *params[i].value -= lr * update;
      if (weight_decay != Scalar(0)) {
        *params[i].value -= (lr * weight_decay) * (*params[i].value);
      }
    }
  }
};

// Scales the gradient group so its global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename Scalar>
Scalar clip_global_norm(std::vector<Mat<Scalar>>& grads, Scalar max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
  double norm = std::sqrt(sq);
  if (norm > static_cast<double>(max_norm) && norm > 0.0) {
    Scalar s = static_cast<Scalar>(static_cast<double>(max_norm) / norm);
    for (auto& g : grads) g *= s;
  }
  return static_cast<Scalar>(norm);
}

// ---- finite-difference gradient check ----------------------------------------

template <typename Scalar>
struct GradcheckResult {
  Scalar max_rel_err = Scalar(0);
  std::string worst_param;
  int worst_row = -1;
  int worst_col = -1;
};

// loss_fn(nullptr) evaluates the loss; loss_fn(&grads) also fills analytic
// gradients aligned with params. Central differences with the given step;
// relative error uses max(|analytic|, |numeric|, floor) as denominator.
template <typename Scalar>
GradcheckResult<Scalar> gradcheck(
    const std::function<Scalar(std::vector<Mat<Scalar>>*)>& loss_fn,
    const std::vector<ParamRef<Scalar>>& params, Scalar step,
    Scalar denom_floor = Scalar(1e-6)) {
  std::vector<Mat<Scalar>> analytic;
  loss_fn(&analytic);
  if (analytic.size() != params.size()) {
    throw std::runtime_error("gradcheck: loss_fn returned " +
                             std::to_string(analytic.size()) +
                             " gradients for " +
                             std::to_string(params.size()) + " parameters");
  }
  GradcheckResult<Scalar> res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Mat<Scalar>& p = *params[pi].value;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        Scalar orig = p(r, c);
        p(r, c) = orig + step;
        Scalar up = loss_fn(nullptr);
        p(r, c) = orig - step;
        Scalar down = loss_fn(nullptr);
        p(r, c) = orig;
        Scalar fd = (up - down) / (Scalar(2) * step);
        Scalar an = analytic[pi](r, c);
        Scalar denom = std::max({std::abs(an), std::abs(fd), denom_floor});
        Scalar rel = std::abs(an - fd) / denom;
        if (rel > res.max_rel_err) {
          res.max_rel_err = rel;
          res.worst_param = params[pi].name;
          res.worst_row = static_cast<int>(r);
          res.worst_col = static_cast<int>(c);
        }
      }
    }
  }
  return res;
}

}  // namespace vci::core
