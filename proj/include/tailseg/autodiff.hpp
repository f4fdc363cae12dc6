#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailseg/tensor.hpp"

namespace tailseg {

// Reverse-mode autodiff over a flat tape of dense-matrix operations.
// Nodes are appended in topological order (operands must already exist), so
// a forward pass is a single sweep and backward a single reverse sweep.
// Shapes are fixed at build time; shape errors surface when the node is
// added, not at execution.

using NodeId = std::size_t;
inline constexpr NodeId kNoNode = static_cast<NodeId>(-1);

enum class OpKind {
  Input,            // leaf bound at forward() time
  Constant,         // leaf baked into the tape
  MatMul,           // (n,k) x (k,m) -> (n,m)
  Add,              // same shape
  RowBroadcastAdd,  // (n,d) + (1,d)
  Relu,
  Log,              // elementwise natural log, positive domain
  PowConst,         // elementwise x^e, constant exponent
  RowSoftmax,       // per-row softmax, max-subtracted
  RowMean,          // (n,d) -> (n,1)
  Sum,              // (n,d) -> (1,1)
  ScalarMul,        // constant * tensor
  SoftmaxCrossEnt,  // picked rows of logits -> scalar, fused for stability
  PickedFocal,      // focal terms over picked prob entries -> scalar
};

/// A (row, class) pick into a matrix, used by the fused loss nodes.
struct PickEntry {
  std::size_t row = 0;
  std::size_t cls = 0;
};

struct TapeNode {
  OpKind kind = OpKind::Input;
  Shape shape;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  double scalar = 0.0;  // PowConst exponent / ScalarMul factor / focal alpha
  double divisor = 1.0; // SoftmaxCrossEnt normalizer
  std::vector<PickEntry> picks;
  std::vector<double> pick_exponents;  // per-pick focusing exponent (focal)
  bool trainable = false;
  Tensor value;
  bool evaluated = false;
};

/// Gradients produced by a backward sweep: adjoints for every node, with the
/// trainable leaves exposed as the parameter gradient set.
class GradientSet {
 public:
  GradientSet(std::vector<Tensor> adjoints, std::vector<NodeId> params)
      : adjoints_(std::move(adjoints)), params_(std::move(params)) {}

  const Tensor& at(NodeId id) const {
    if (id >= adjoints_.size())
      throw std::out_of_range("GradientSet: no node " + std::to_string(id));
    return adjoints_[id];
  }

  std::span<const NodeId> parameter_ids() const { return params_; }

 private:
  std::vector<Tensor> adjoints_;
  std::vector<NodeId> params_;
};

namespace detail {

// p is clamped to [kProbFloor, 1] before logs so focal terms stay finite.
inline constexpr double kProbFloor = 1e-12;

inline double focal_term(double p, double alpha, double gamma) {
  const double q = 1.0 - p;
  const double mod = (gamma == 0.0) ? 1.0 : std::pow(q, gamma);
  return -alpha * mod * std::log(p);
}

// d/dp of focal_term; the q==0 branch keeps the p->1 limit finite.
inline double focal_term_dp(double p, double alpha, double gamma) {
  const double q = 1.0 - p;
  const double mod = (gamma == 0.0) ? 1.0 : std::pow(q, gamma);
  double t = mod / p;
  if (gamma > 0.0 && q > 0.0) t -= gamma * std::pow(q, gamma - 1.0) * std::log(p);
  return -alpha * t;
}

}  // namespace detail

class Tape {
 public:
  NodeId add_input(Shape s, bool trainable = false) {
    TapeNode n;
    n.kind = OpKind::Input;
    n.shape = s;
    n.trainable = trainable;
    input_order_.push_back(nodes_.size());
    return push(std::move(n));
  }

  NodeId add_parameter(Shape s) { return add_input(s, true); }

  NodeId add_constant(Tensor t) {
    if (!t.all_finite())
      throw std::invalid_argument("tape: non-finite constant rejected");
    TapeNode n;
    n.kind = OpKind::Constant;
    n.shape = t.shape();
    n.value = std::move(t);
    n.evaluated = true;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Shape sa = shape_of(a), sb = shape_of(b);
    if (sa.cols != sb.rows)
      throw std::invalid_argument("tape node " + std::to_string(nodes_.size()) +
                                  ": matmul inner dims " + sa.str() + " x " +
                                  sb.str());
    return binary(OpKind::MatMul, a, b, Shape{sa.rows, sb.cols});
  }

  NodeId add(NodeId a, NodeId b) {
    const Shape sa = shape_of(a), sb = shape_of(b);
    if (!(sa == sb))
      throw std::invalid_argument("tape node " + std::to_string(nodes_.size()) +
                                  ": add shapes " + sa.str() + " vs " + sb.str());
    return binary(OpKind::Add, a, b, sa);
  }

  NodeId row_broadcast_add(NodeId x, NodeId bias) {
    const Shape sx = shape_of(x), sbias = shape_of(bias);
    if (sbias.rows != 1 || sbias.cols != sx.cols)
      throw std::invalid_argument("tape node " + std::to_string(nodes_.size()) +
                                  ": bias " + sbias.str() + " against " +
                                  sx.str());
    return binary(OpKind::RowBroadcastAdd, x, bias, sx);
  }

  NodeId relu(NodeId a) { return unary(OpKind::Relu, a, shape_of(a)); }
  NodeId log(NodeId a) { return unary(OpKind::Log, a, shape_of(a)); }

  NodeId pow_const(NodeId a, double exponent) {
    NodeId id = unary(OpKind::PowConst, a, shape_of(a));
    nodes_[id].scalar = exponent;
    return id;
  }

  NodeId row_softmax(NodeId a) {
    if (shape_of(a).cols == 0)
      throw std::invalid_argument("tape: row_softmax over zero columns");
    return unary(OpKind::RowSoftmax, a, shape_of(a));
  }

  NodeId row_mean(NodeId a) {
    if (shape_of(a).cols == 0)
      throw std::invalid_argument("tape: row_mean over zero columns");
    return unary(OpKind::RowMean, a, Shape{shape_of(a).rows, 1});
  }

  NodeId sum(NodeId a) { return unary(OpKind::Sum, a, Shape{1, 1}); }

  NodeId scalar_mul(double k, NodeId a) {
    NodeId id = unary(OpKind::ScalarMul, a, shape_of(a));
    nodes_[id].scalar = k;
    return id;
  }

  /// Mean softmax cross-entropy over the picked (row, class) targets:
  ///   (1/divisor) * sum_k [logsumexp(z[r_k,:]) - z[r_k, c_k]]
  NodeId softmax_cross_entropy(NodeId logits, std::vector<PickEntry> targets,
                               double divisor) {
    check_picks(logits, targets, "softmax_cross_entropy");
    if (divisor <= 0.0)
      throw std::invalid_argument("tape: cross-entropy divisor must be positive");
    NodeId id = unary(OpKind::SoftmaxCrossEnt, logits, Shape{1, 1});
    nodes_[id].picks = std::move(targets);
    nodes_[id].divisor = divisor;
    return id;
  }

  /// Sum of focal terms -alpha*(1-p)^g_k*log(p) over picked prob entries,
  /// with a per-pick exponent treated as a constant.
  NodeId picked_focal(NodeId probs, std::vector<PickEntry> targets,
                      std::vector<double> exponents, double alpha) {
    check_picks(probs, targets, "picked_focal");
    if (exponents.size() != targets.size())
      throw std::invalid_argument("tape: focal exponent count mismatch");
    for (double g : exponents)
      if (!(g >= 0.0))
        throw std::invalid_argument("tape: focal exponent must be >= 0");
    NodeId id = unary(OpKind::PickedFocal, probs, Shape{1, 1});
    nodes_[id].picks = std::move(targets);
    nodes_[id].pick_exponents = std::move(exponents);
    nodes_[id].scalar = alpha;
    return id;
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t input_count() const { return input_order_.size(); }
  Shape shape_of(NodeId id) const { return node(id).shape; }
  bool is_trainable(NodeId id) const { return node(id).trainable; }

  /// Node id of the i-th declared Input leaf.
  NodeId input_slot_node(std::size_t i) const {
    if (i >= input_order_.size())
      throw std::out_of_range("tape: no input slot " + std::to_string(i));
    return input_order_[i];
  }

  const Tensor& value(NodeId id) const {
    const TapeNode& n = node(id);
    if (!n.evaluated)
      throw std::logic_error("tape node " + std::to_string(id) +
                             ": no value, run forward first");
    return n.value;
  }

  /// Binds `inputs` to the Input leaves in declaration order and evaluates
  /// every node. Returns the terminal (last) node's value.
  Tensor forward(std::span<const Tensor> inputs) {
    if (nodes_.empty()) throw std::logic_error("tape: empty");
    if (inputs.size() != input_order_.size())
      throw std::invalid_argument("tape: expected " +
                                  std::to_string(input_order_.size()) +
                                  " inputs, got " + std::to_string(inputs.size()));
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      TapeNode& n = nodes_[input_order_[i]];
      if (!(inputs[i].shape() == n.shape))
        throw std::invalid_argument(
            "tape input " + std::to_string(i) + ": shape " +
            inputs[i].shape().str() + ", declared " + n.shape.str());
      if (!inputs[i].all_finite())
        throw std::invalid_argument("tape input " + std::to_string(i) +
                                    ": non-finite values rejected");
      n.value = inputs[i];
      n.evaluated = true;
    }
    for (NodeId id = 0; id < nodes_.size(); ++id) eval(id);
    return nodes_.back().value;
  }

  /// Reverse sweep from the terminal scalar. Requires a prior forward().
  GradientSet backward() const {
    if (nodes_.empty()) throw std::logic_error("tape: empty");
    const TapeNode& last = nodes_.back();
    if (!last.evaluated)
      throw std::logic_error("tape: backward before forward");
    if (!last.shape.is_scalar())
      throw std::invalid_argument("tape: terminal node is " + last.shape.str() +
                                  ", backward needs a scalar");
    std::vector<Tensor> adj(nodes_.size());
    for (NodeId id = 0; id < nodes_.size(); ++id)
      adj[id] = Tensor(nodes_[id].shape);
    adj.back()(0, 0) = 1.0;
    for (NodeId id = nodes_.size(); id-- > 0;) propagate(id, adj);
    std::vector<NodeId> params;
    for (NodeId id = 0; id < nodes_.size(); ++id)
      if (nodes_[id].trainable) params.push_back(id);
    return GradientSet(std::move(adj), std::move(params));
  }

 private:
  NodeId push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId unary(OpKind k, NodeId a, Shape out) {
    require(a);
    TapeNode n;
    n.kind = k;
    n.a = a;
    n.shape = out;
    return push(std::move(n));
  }

  NodeId binary(OpKind k, NodeId a, NodeId b, Shape out) {
    require(a);
    require(b);
    TapeNode n;
    n.kind = k;
    n.a = a;
    n.b = b;
    n.shape = out;
    return push(std::move(n));
  }

  void require(NodeId id) const {
    if (id >= nodes_.size())
      throw std::invalid_argument("tape: operand node " + std::to_string(id) +
                                  " does not exist");
  }

  const TapeNode& node(NodeId id) const {
    require(id);
    return nodes_[id];
  }

  void check_picks(NodeId src, const std::vector<PickEntry>& picks,
                   const char* what) const {
    const Shape s = shape_of(src);
    for (const PickEntry& p : picks)
      if (p.row >= s.rows || p.cls >= s.cols)
        throw std::invalid_argument(std::string("tape: ") + what + " pick (" +
                                    std::to_string(p.row) + "," +
                                    std::to_string(p.cls) + ") outside " +
                                    s.str());
  }

  void eval(NodeId id) {
    TapeNode& n = nodes_[id];
    switch (n.kind) {
      case OpKind::Input:
        if (!n.evaluated)
          throw std::logic_error("tape input node " + std::to_string(id) +
                                 " was never bound");
        return;
      case OpKind::Constant:
        return;
      case OpKind::MatMul: {
        const Tensor& A = nodes_[n.a].value;
        const Tensor& B = nodes_[n.b].value;
        n.value = Tensor(n.shape);
        matmul_accumulate(A, B, n.value, false, false);
        break;
      }
      case OpKind::Add: {
        const Tensor& A = nodes_[n.a].value;
        const Tensor& B = nodes_[n.b].value;
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < n.value.size(); ++i)
          n.value.values()[i] = A.values()[i] + B.values()[i];
        break;
      }
      case OpKind::RowBroadcastAdd: {
        const Tensor& X = nodes_[n.a].value;
        const Tensor& bias = nodes_[n.b].value;
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < X.rows(); ++r)
          for (std::size_t c = 0; c < X.cols(); ++c)
            n.value(r, c) = X(r, c) + bias(0, c);
        break;
      }
      case OpKind::Relu: {
        const Tensor& X = nodes_[n.a].value;
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < X.size(); ++i)
          n.value.values()[i] = X.values()[i] > 0.0 ? X.values()[i] : 0.0;
        break;
      }
      case OpKind::Log: {
        const Tensor& X = nodes_[n.a].value;
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < X.size(); ++i) {
          const double x = X.values()[i];
          if (!(x > 0.0))
            throw std::domain_error("tape node " + std::to_string(id) +
                                    ": log of non-positive value");
          n.value.values()[i] = std::log(x);
        }
        break;
      }
      case OpKind::PowConst: {
        const Tensor& X = nodes_[n.a].value;
        n.value = Tensor(n.shape);
        const double e = n.scalar;
        const bool integral = e == std::floor(e);
        for (std::size_t i = 0; i < X.size(); ++i) {
          const double x = X.values()[i];
          if (x < 0.0 && !integral)
            throw std::domain_error("tape node " + std::to_string(id) +
                                    ": fractional power of negative value");
          n.value.values()[i] = std::pow(x, e);
        }
        break;
      }
      case OpKind::RowSoftmax: {
        const Tensor& X = nodes_[n.a].value;
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < X.rows(); ++r) {
          double m = X(r, 0);
          for (std::size_t c = 1; c < X.cols(); ++c) m = std::max(m, X(r, c));
          double s = 0.0;
          for (std::size_t c = 0; c < X.cols(); ++c) {
            const double e = std::exp(X(r, c) - m);
            n.value(r, c) = e;
            s += e;
          }
          for (std::size_t c = 0; c < X.cols(); ++c) n.value(r, c) /= s;
        }
        break;
      }
      case OpKind::RowMean: {
        const Tensor& X = nodes_[n.a].value;
        n.value = Tensor(n.shape);
        for (std::size_t r = 0; r < X.rows(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < X.cols(); ++c) s += X(r, c);
          n.value(r, 0) = s / static_cast<double>(X.cols());
        }
        break;
      }
      case OpKind::Sum: {
        const Tensor& X = nodes_[n.a].value;
        double s = 0.0;
        for (double x : X.values()) s += x;
        n.value = Tensor::scalar(s);
        break;
      }
      case OpKind::ScalarMul: {
        const Tensor& X = nodes_[n.a].value;
        n.value = Tensor(n.shape);
        for (std::size_t i = 0; i < X.size(); ++i)
          n.value.values()[i] = n.scalar * X.values()[i];
        break;
      }
      case OpKind::SoftmaxCrossEnt: {
        const Tensor& Z = nodes_[n.a].value;
        double total = 0.0;
        for (const PickEntry& p : n.picks) {
          double m = Z(p.row, 0);
          for (std::size_t c = 1; c < Z.cols(); ++c) m = std::max(m, Z(p.row, c));
          double s = 0.0;
          for (std::size_t c = 0; c < Z.cols(); ++c) s += std::exp(Z(p.row, c) - m);
          total += (m + std::log(s)) - Z(p.row, p.cls);
        }
        n.value = Tensor::scalar(total / n.divisor);
        break;
      }
      case OpKind::PickedFocal: {
        const Tensor& P = nodes_[n.a].value;
        double total = 0.0;
        for (std::size_t k = 0; k < n.picks.size(); ++k) {
          const PickEntry& p = n.picks[k];
          const double pv =
              std::min(std::max(P(p.row, p.cls), detail::kProbFloor), 1.0);
          total += detail::focal_term(pv, n.scalar, n.pick_exponents[k]);
        }
        n.value = Tensor::scalar(total);
        break;
      }
    }
    if (!n.value.all_finite())
      throw std::runtime_error("tape node " + std::to_string(id) +
                               ": non-finite forward value");
    n.evaluated = true;
  }

  void propagate(NodeId id, std::vector<Tensor>& adj) const {
    const TapeNode& n = nodes_[id];
    const Tensor& g = adj[id];
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Constant:
        return;
      case OpKind::MatMul: {
        // dA = g * B^T, dB = A^T * g
        matmul_accumulate(g, nodes_[n.b].value, adj[n.a], false, true);
        matmul_accumulate(nodes_[n.a].value, g, adj[n.b], true, false);
        return;
      }
      case OpKind::Add: {
        for (std::size_t i = 0; i < g.size(); ++i) {
          adj[n.a].values()[i] += g.values()[i];
          adj[n.b].values()[i] += g.values()[i];
        }
        return;
      }
      case OpKind::RowBroadcastAdd: {
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) {
            adj[n.a](r, c) += g(r, c);
            adj[n.b](0, c) += g(r, c);
          }
        return;
      }
      case OpKind::Relu: {
        const Tensor& X = nodes_[n.a].value;
        // subgradient at the kink is taken as 0
        for (std::size_t i = 0; i < g.size(); ++i)
          if (X.values()[i] > 0.0) adj[n.a].values()[i] += g.values()[i];
        return;
      }
      case OpKind::Log: {
        const Tensor& X = nodes_[n.a].value;
        for (std::size_t i = 0; i < g.size(); ++i)
          adj[n.a].values()[i] += g.values()[i] / X.values()[i];
        return;
      }
      case OpKind::PowConst: {
        const Tensor& X = nodes_[n.a].value;
        const double e = n.scalar;
        if (e == 0.0) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          adj[n.a].values()[i] +=
              g.values()[i] * e * std::pow(X.values()[i], e - 1.0);
        return;
      }
      case OpKind::RowSoftmax: {
        const Tensor& Y = n.value;
        for (std::size_t r = 0; r < Y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < Y.cols(); ++c) dot += g(r, c) * Y(r, c);
          for (std::size_t c = 0; c < Y.cols(); ++c)
            adj[n.a](r, c) += Y(r, c) * (g(r, c) - dot);
        }
        return;
      }
      case OpKind::RowMean: {
        const Shape sa = nodes_[n.a].shape;
        const double inv = 1.0 / static_cast<double>(sa.cols);
        for (std::size_t r = 0; r < sa.rows; ++r)
          for (std::size_t c = 0; c < sa.cols; ++c)
            adj[n.a](r, c) += g(r, 0) * inv;
        return;
      }
      case OpKind::Sum: {
        const double gs = g(0, 0);
        for (double& x : adj[n.a].values()) x += gs;
        return;
      }
      case OpKind::ScalarMul: {
        for (std::size_t i = 0; i < g.size(); ++i)
          adj[n.a].values()[i] += n.scalar * g.values()[i];
        return;
      }
      case OpKind::SoftmaxCrossEnt: {
        const Tensor& Z = nodes_[n.a].value;
        const double gs = g(0, 0) / n.divisor;
        std::vector<double> soft(Z.cols());
        for (const PickEntry& p : n.picks) {
          double m = Z(p.row, 0);
          for (std::size_t c = 1; c < Z.cols(); ++c) m = std::max(m, Z(p.row, c));
          double s = 0.0;
          for (std::size_t c = 0; c < Z.cols(); ++c) {
            soft[c] = std::exp(Z(p.row, c) - m);
            s += soft[c];
          }
          for (std::size_t c = 0; c < Z.cols(); ++c)
            adj[n.a](p.row, c) += gs * (soft[c] / s - (c == p.cls ? 1.0 : 0.0));
        }
        return;
      }
      case OpKind::PickedFocal: {
        const Tensor& P = nodes_[n.a].value;
        const double gs = g(0, 0);
        for (std::size_t k = 0; k < n.picks.size(); ++k) {
          const PickEntry& p = n.picks[k];
          const double raw = P(p.row, p.cls);
          if (raw < detail::kProbFloor) continue;  // clamped, no gradient
          const double pv = std::min(raw, 1.0);
          adj[n.a](p.row, p.cls) +=
              gs * detail::focal_term_dp(pv, n.scalar, n.pick_exponents[k]);
        }
        return;
      }
    }
  }

  // C (+)= op(A) * op(B); transposition handled by index swaps.
  static void matmul_accumulate(const Tensor& A, const Tensor& B, Tensor& C,
                                bool transA, bool transB) {
    const std::size_t n = transA ? A.cols() : A.rows();
    const std::size_t kk = transA ? A.rows() : A.cols();
    const std::size_t m = transB ? B.rows() : B.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < kk; ++k) {
        const double a = transA ? A(k, i) : A(i, k);
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j)
          C(i, j) += a * (transB ? B(j, k) : B(k, j));
      }
  }

  std::vector<TapeNode> nodes_;
  std::vector<NodeId> input_order_;
};

inline Tensor forward(Tape& tape, std::span<const Tensor> inputs) {
  return tape.forward(inputs);
}

inline GradientSet backward(const Tape& tape) { return tape.backward(); }

/// Max relative error between analytic gradients and central differences,
/// taken over every entry of every trainable leaf.
inline double grad_check(Tape& tape, std::vector<Tensor> inputs, double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  tape.forward(inputs);
  const GradientSet grads = tape.backward();

  double worst = 0.0;
  for (std::size_t slot = 0; slot < inputs.size(); ++slot) {
    const NodeId id = tape.input_slot_node(slot);
    if (!tape.is_trainable(id)) continue;
    const Tensor& analytic = grads.at(id);
    for (std::size_t e = 0; e < inputs[slot].size(); ++e) {
      const double saved = inputs[slot].values()[e];
      inputs[slot].values()[e] = saved + step;
      const double fp = tape.forward(inputs).item();
      inputs[slot].values()[e] = saved - step;
      const double fm = tape.forward(inputs).item();
      inputs[slot].values()[e] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic.values()[e];
      const double err =
          std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  tape.forward(inputs);  // restore cached values to the unperturbed point
  return worst;
}

}  // namespace tailseg
