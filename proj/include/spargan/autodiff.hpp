// Reverse-mode differentiation over a recorded list of primitive operations.
//
// A Tape evaluates eagerly as operations are appended, so every node value is
// available immediately. The recorded operations can be replayed with new leaf
// values (forward) and differentiated from any scalar node (backward). Leaves
// come in three kinds: constants, named inputs, and named parameters; only
// parameters (and nodes depending on them) carry gradients.
#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "spargan/tensor.hpp"

namespace spargan {

using NodeId = std::size_t;
using NamedTensors = std::map<std::string, Tensor>;

enum class OpKind {
  Constant,
  Input,
  Param,
  MatMul,
  Add,
  AddBias,
  Concat,
  Tanh,
  LeakyRelu,
  Sigmoid,
  Softmax,
  LogSoftmax,
  Log,
  Mul,
  MeanBatch,
  Sum,
  Affine,
  Clamp,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Concat: return "concat";
    case OpKind::Tanh: return "tanh";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Log: return "log";
    case OpKind::Mul: return "mul";
    case OpKind::MeanBatch: return "mean_batch";
    case OpKind::Sum: return "sum";
    case OpKind::Affine: return "affine";
    case OpKind::Clamp: return "clamp";
  }
  return "?";
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

inline MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

// Each output row is accumulated over k in a fixed order, so a row's value
// does not depend on the other rows of the batch.
inline void matmul_rows(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t rows = a.rows(), inner = a.cols(), cols = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = po + r * cols;
    for (std::size_t k = 0; k < inner; ++k) {
      const double x = pa[r * inner + k];
      const double* brow = pb + k * cols;
      for (std::size_t j = 0; j < cols; ++j) o[j] += x * brow[j];
    }
  }
}

}  // namespace detail

class Tape {
 public:
  struct Node {
    OpKind kind;
    std::array<NodeId, 2> inputs{};
    std::size_t arity = 0;
    double p0 = 0.0;  // slope / scale / lower bound
    double p1 = 0.0;  // shift / upper bound
    bool requires_grad = false;
    std::string name;
    Tensor value;
  };

  // Leaves

  NodeId constant(Tensor value) { return push_leaf(OpKind::Constant, {}, std::move(value)); }
  NodeId input(std::string name, Tensor value) {
    return push_leaf(OpKind::Input, std::move(name), std::move(value));
  }
  NodeId param(std::string name, Tensor value) {
    return push_leaf(OpKind::Param, std::move(name), std::move(value));
  }

  // Primitives

  NodeId matmul(NodeId a, NodeId b) { return push(OpKind::MatMul, {a, b}, 2); }
  NodeId add(NodeId a, NodeId b) { return push(OpKind::Add, {a, b}, 2); }
  NodeId add_bias(NodeId x, NodeId bias) { return push(OpKind::AddBias, {x, bias}, 2); }
  NodeId concat(NodeId a, NodeId b) { return push(OpKind::Concat, {a, b}, 2); }
  NodeId tanh(NodeId x) { return push(OpKind::Tanh, {x}, 1); }
  NodeId leaky_relu(NodeId x, double slope) { return push(OpKind::LeakyRelu, {x}, 1, slope); }
  NodeId sigmoid(NodeId x) { return push(OpKind::Sigmoid, {x}, 1); }
  NodeId softmax(NodeId x) { return push(OpKind::Softmax, {x}, 1); }
  NodeId log_softmax(NodeId x) { return push(OpKind::LogSoftmax, {x}, 1); }
  NodeId log(NodeId x) { return push(OpKind::Log, {x}, 1); }
  NodeId mul(NodeId a, NodeId b) { return push(OpKind::Mul, {a, b}, 2); }
  NodeId mean_batch(NodeId x) { return push(OpKind::MeanBatch, {x}, 1); }
  NodeId sum(NodeId x) { return push(OpKind::Sum, {x}, 1); }
  // scale * x + shift
  NodeId affine(NodeId x, double scale, double shift = 0.0) {
    return push(OpKind::Affine, {x}, 1, scale, shift);
  }
  NodeId clamp(NodeId x, double lo, double hi) { return push(OpKind::Clamp, {x}, 1, lo, hi); }

  // Access

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Re-evaluates every node with named leaves replaced by `inputs`.
  // Names not present keep their recorded values.
  void forward(const NamedTensors& inputs) {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.kind == OpKind::Input || n.kind == OpKind::Param) {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) continue;
        if (it->second.shape() != n.value.shape()) {
          throw ShapeError("node " + std::to_string(id) + " (" + n.name + "): recorded shape " +
                           shape_string(n.value.shape()) + " vs provided " +
                           shape_string(it->second.shape()));
        }
        n.value = it->second;
      } else if (n.kind != OpKind::Constant) {
        n.value = evaluate(id, n);
      }
    }
  }

  // Gradients of a scalar node with respect to every parameter leaf.
  // Parameters the loss does not depend on receive zero tensors.
  NamedTensors backward(NodeId loss) const {
    const Node& root = nodes_.at(loss);
    if (!root.value.is_scalar()) {
      throw ShapeError("backward: node " + std::to_string(loss) + " (" +
                       std::string(op_name(root.kind)) + ") is not scalar, shape " +
                       shape_string(root.value.shape()));
    }
    std::vector<Tensor> grads(loss + 1);
    std::vector<bool> live(loss + 1, false);
    if (root.requires_grad) {
      grads[loss] = Tensor(root.value.shape(), 1.0);
      live[loss] = true;
    }
    for (NodeId id = loss + 1; id-- > 0;) {
      if (!live[id]) continue;
      const Node& n = nodes_[id];
      if (n.arity == 0) continue;
      propagate(id, n, grads, live);
    }
    NamedTensors out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.kind != OpKind::Param) continue;
      if (id <= loss && live[id]) {
        out.insert_or_assign(n.name, grads[id]);
      } else {
        out.emplace(n.name, Tensor(n.value.shape(), 0.0));
      }
    }
    return out;
  }

 private:
  NodeId push_leaf(OpKind kind, std::string name, Tensor value) {
    Node n;
    n.kind = kind;
    n.name = std::move(name);
    n.requires_grad = kind == OpKind::Param;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push(OpKind kind, std::array<NodeId, 2> inputs, std::size_t arity, double p0 = 0.0,
              double p1 = 0.0) {
    const NodeId id = nodes_.size();
    Node n;
    n.kind = kind;
    n.inputs = inputs;
    n.arity = arity;
    n.p0 = p0;
    n.p1 = p1;
    for (std::size_t i = 0; i < arity; ++i) {
      if (inputs[i] >= id) {
        throw Error("tape: node " + std::to_string(id) + " references unknown node " +
                    std::to_string(inputs[i]));
      }
      n.requires_grad = n.requires_grad || nodes_[inputs[i]].requires_grad;
    }
    n.value = evaluate(id, n);
    nodes_.push_back(std::move(n));
    return id;
  }

  [[noreturn]] void mismatch(NodeId id, const Node& n, const Shape& a, const Shape& b) const {
    throw ShapeError("node " + std::to_string(id) + " (" + std::string(op_name(n.kind)) +
                     "): incompatible shapes " + shape_string(a) + " and " + shape_string(b));
  }

  void require_matrix(NodeId id, const Node& n, const Tensor& t) const {
    if (t.rank() != 2) {
      throw ShapeError("node " + std::to_string(id) + " (" + std::string(op_name(n.kind)) +
                       "): expected a matrix, got shape " + shape_string(t.shape()));
    }
  }

  Tensor evaluate(NodeId id, const Node& n) const {
    const Tensor& a = nodes_[n.inputs[0]].value;
    switch (n.kind) {
      case OpKind::MatMul: {
        const Tensor& b = nodes_[n.inputs[1]].value;
        require_matrix(id, n, a);
        require_matrix(id, n, b);
        if (a.cols() != b.rows()) mismatch(id, n, a.shape(), b.shape());
        Tensor out(Shape{a.rows(), b.cols()});
        detail::matmul_rows(a, b, out);
        return out;
      }
      case OpKind::Add:
      case OpKind::Mul: {
        const Tensor& b = nodes_[n.inputs[1]].value;
        if (a.shape() != b.shape()) mismatch(id, n, a.shape(), b.shape());
        Tensor out = a;
        auto o = out.values();
        auto bv = b.values();
        if (n.kind == OpKind::Add) {
          for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
        } else {
          for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
        }
        return out;
      }
      case OpKind::AddBias: {
        const Tensor& b = nodes_[n.inputs[1]].value;
        require_matrix(id, n, a);
        if (b.rank() != 1 || b.size() != a.cols()) mismatch(id, n, a.shape(), b.shape());
        Tensor out = a;
        const std::size_t cols = a.cols();
        auto o = out.values();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] += b[c];
        }
        return out;
      }
      case OpKind::Concat: {
        const Tensor& b = nodes_[n.inputs[1]].value;
        require_matrix(id, n, a);
        require_matrix(id, n, b);
        if (a.rows() != b.rows()) mismatch(id, n, a.shape(), b.shape());
        const std::size_t ca = a.cols(), cb = b.cols();
        Tensor out(Shape{a.rows(), ca + cb});
        for (std::size_t r = 0; r < a.rows(); ++r) {
          std::copy_n(a.data() + r * ca, ca, out.data() + r * (ca + cb));
          std::copy_n(b.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
        }
        return out;
      }
      case OpKind::Tanh:
        return map(a, [](double x) { return std::tanh(x); });
      case OpKind::LeakyRelu: {
        const double slope = n.p0;
        return map(a, [slope](double x) { return x > 0.0 ? x : slope * x; });
      }
      case OpKind::Sigmoid:
        return map(a, [](double x) {
          if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
          const double e = std::exp(x);
          return e / (1.0 + e);
        });
      case OpKind::Softmax:
      case OpKind::LogSoftmax: {
        Tensor out = a;
        const std::size_t cols = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double* row = out.data() + r * cols;
          const double mx = *std::max_element(row, row + cols);
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) total += std::exp(row[c] - mx);
          if (n.kind == OpKind::Softmax) {
            for (std::size_t c = 0; c < cols; ++c) row[c] = std::exp(row[c] - mx) / total;
          } else {
            const double lse = mx + std::log(total);
            for (std::size_t c = 0; c < cols; ++c) row[c] -= lse;
          }
        }
        return out;
      }
      case OpKind::Log:
        return map(a, [](double x) { return std::log(x); });
      case OpKind::MeanBatch: {
        require_matrix(id, n, a);
        Tensor out(Shape{1, a.cols()});
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a.at(r, c);
        }
        const double inv = 1.0 / static_cast<double>(a.rows());
        for (double& v : out.values()) v *= inv;
        return out;
      }
      case OpKind::Sum: {
        double total = 0.0;
        for (double v : a.values()) total += v;
        return Tensor::scalar(total);
      }
      case OpKind::Affine: {
        const double scale = n.p0, shift = n.p1;
        return map(a, [scale, shift](double x) { return scale * x + shift; });
      }
      case OpKind::Clamp: {
        const double lo = n.p0, hi = n.p1;
        return map(a, [lo, hi](double x) { return std::clamp(x, lo, hi); });
      }
      case OpKind::Constant:
      case OpKind::Input:
      case OpKind::Param:
        break;
    }
    throw Error("tape: cannot evaluate leaf node " + std::to_string(id));
  }

  template <typename F>
  static Tensor map(const Tensor& in, F f) {
    Tensor out = in;
    for (double& v : out.values()) v = f(v);
    return out;
  }

  static void accumulate(std::vector<Tensor>& grads, std::vector<bool>& live, NodeId target,
                         const Tensor& like) {
    if (!live[target]) {
      grads[target] = Tensor(like.shape(), 0.0);
      live[target] = true;
    }
  }

  void propagate(NodeId id, const Node& n, std::vector<Tensor>& grads,
                 std::vector<bool>& live) const {
    const Tensor& g = grads[id];
    const NodeId ia = n.inputs[0];
    const NodeId ib = n.inputs[1];
    const Tensor& a = nodes_[ia].value;
    const bool need_a = nodes_[ia].requires_grad;
    const bool need_b = n.arity == 2 && nodes_[ib].requires_grad;

    auto grad_a = [&]() -> Tensor& {
      accumulate(grads, live, ia, a);
      return grads[ia];
    };
    auto grad_b = [&]() -> Tensor& {
      accumulate(grads, live, ib, nodes_[ib].value);
      return grads[ib];
    };

    switch (n.kind) {
      case OpKind::MatMul: {
        const Tensor& b = nodes_[ib].value;
        if (need_a) {
          detail::as_matrix(grad_a()).noalias() +=
              detail::as_matrix(g) * detail::as_matrix(b).transpose();
        }
        if (need_b) {
          detail::as_matrix(grad_b()).noalias() +=
              detail::as_matrix(a).transpose() * detail::as_matrix(g);
        }
        return;
      }
      case OpKind::Add: {
        if (need_a) axpy(grad_a(), g, 1.0);
        if (need_b) axpy(grad_b(), g, 1.0);
        return;
      }
      case OpKind::Mul: {
        const Tensor& b = nodes_[ib].value;
        if (need_a) {
          auto ga = grad_a().values();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (need_b) {
          auto gb = grad_b().values();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
        }
        return;
      }
      case OpKind::AddBias: {
        if (need_a) axpy(grad_a(), g, 1.0);
        if (need_b) {
          Tensor& gb = grad_b();
          const std::size_t cols = g.cols();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
          }
        }
        return;
      }
      case OpKind::Concat: {
        const std::size_t ca = a.cols();
        const std::size_t cb = nodes_[ib].value.cols();
        if (need_a) {
          Tensor& ga = grad_a();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
          }
        }
        if (need_b) {
          Tensor& gb = grad_b();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
          }
        }
        return;
      }
      case OpKind::Tanh: {
        auto ga = grad_a().values();
        const Tensor& y = n.value;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        return;
      }
      case OpKind::LeakyRelu: {
        auto ga = grad_a().values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += a[i] > 0.0 ? g[i] : n.p0 * g[i];
        return;
      }
      case OpKind::Sigmoid: {
        auto ga = grad_a().values();
        const Tensor& y = n.value;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        return;
      }
      case OpKind::Softmax:
      case OpKind::LogSoftmax: {
        Tensor& ga = grad_a();
        const Tensor& y = n.value;
        const std::size_t cols = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          const std::size_t base = r * cols;
          if (n.kind == OpKind::Softmax) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
            for (std::size_t c = 0; c < cols; ++c) {
              ga[base + c] += y[base + c] * (g[base + c] - dot);
            }
          } else {
            double total = 0.0;
            for (std::size_t c = 0; c < cols; ++c) total += g[base + c];
            for (std::size_t c = 0; c < cols; ++c) {
              ga[base + c] += g[base + c] - std::exp(y[base + c]) * total;
            }
          }
        }
        return;
      }
      case OpKind::Log: {
        auto ga = grad_a().values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / a[i];
        return;
      }
      case OpKind::MeanBatch: {
        Tensor& ga = grad_a();
        const double inv = 1.0 / static_cast<double>(a.rows());
        const std::size_t cols = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c] * inv;
        }
        return;
      }
      case OpKind::Sum: {
        const double s = g[0];
        for (double& v : grad_a().values()) v += s;
        return;
      }
      case OpKind::Affine:
        axpy(grad_a(), g, n.p0);
        return;
      case OpKind::Clamp: {
        auto ga = grad_a().values();
        for (std::size_t i = 0; i < ga.size(); ++i) {
          if (a[i] >= n.p0 && a[i] <= n.p1) ga[i] += g[i];
        }
        return;
      }
      case OpKind::Constant:
      case OpKind::Input:
      case OpKind::Param:
        return;
    }
  }

  static void axpy(Tensor& y, const Tensor& x, double alpha) {
    auto yv = y.values();
    auto xv = x.values();
    for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += alpha * xv[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace spargan
