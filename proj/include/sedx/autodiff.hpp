#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sedx/ndarray.hpp"

namespace sedx {

class Tape;

enum class Role { kParameter, kIntermediate, kConstant };

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const DenseArray& value() const;
  /// Accumulated gradient; all zeros before any backward pass.
  const DenseArray& grad() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Per-pass adjoint storage, allocated lazily.
class Adjoints {
 public:
  explicit Adjoints(const Tape& tape);
  /// True if the node takes part in gradient propagation.
  bool wants(std::size_t id) const;
  /// Zero-initialised on first access.
  DenseArray& at(std::size_t id);
  bool live(std::size_t id) const { return live_[id] != 0; }
  DenseArray take(std::size_t id) { return std::move(arrays_[id]); }

 private:
  const Tape& tape_;
  std::vector<DenseArray> arrays_;
  std::vector<char> live_;
};

/// Reverse-mode computation graph. Nodes are appended in evaluation order,
/// so reverse index order is a valid topological order for backward.
///
/// One tape belongs to one thread. Independent tapes can run concurrently.
class Tape {
 public:
  using BackwardFn =
      std::function<void(const Tape&, std::size_t self, const DenseArray& out_adjoint, Adjoints&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(DenseArray value);
  Var constant(DenseArray value);
  /// Records a derived node. The backward function is skipped when no
  /// parent requires a gradient.
  Var record(DenseArray value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(DenseArray value, std::span<const Var> parents, BackwardFn backward);

  /// Accumulates d(loss)/d(node) into every gradient-carrying node reachable
  /// from loss. Calling twice without zero_grad adds the second pass on top.
  void backward(Var loss);
  void zero_grad();

  const DenseArray& value(std::size_t id) const { return nodes_[id].value; }
  const DenseArray& grad(std::size_t id) const;
  Role role(std::size_t id) const { return nodes_[id].role; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    DenseArray value;
    mutable DenseArray grad;
    mutable bool grad_ready = false;
    Role role = Role::kIntermediate;
    bool requires_grad = false;
    BackwardFn backward;
  };
  // deque: references returned by value()/grad() survive later records.
  std::deque<Node> nodes_;
};

// Matrix product of [M x K] and [K x N].
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise unary ops.
Var tanh(Var x);
Var exp(Var x);
/// Throws DomainError on any non-positive element.
Var log(Var x);
Var negate(Var x);
Var sigmoid(Var x);
Var scale(Var x, double s);

// Elementwise binary ops; shapes must match exactly.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

// Reductions. With an axis, that axis is removed from the shape.
Var sum(Var x);
Var mean(Var x);
Var sum(Var x, std::size_t axis);
Var mean(Var x, std::size_t axis);
/// Maximum along one axis; the gradient goes to the first maximal element.
Var max_over_axis(Var x, std::size_t axis);

// Structural ops used by the backbone and heads.

/// [M x N] + bias[N] broadcast over rows.
Var add_bias(Var x, Var bias);
/// Horizontal concatenation of matrices with equal row counts.
Var concat_cols(std::span<const Var> parts);
/// Vertical concatenation of matrices (or vectors treated as rows) with equal
/// column counts.
Var concat_rows(std::span<const Var> parts);
/// Divides each row by its Euclidean norm (plus eps).
Var normalize_rows(Var x, double eps = 1e-12);
/// Same-padded 2-D convolution. x: [Cin, H, W], w: [Cout, Cin, K, K], b: [Cout].
Var conv2d(Var x, Var w, Var b);
/// Non-overlapping average pooling of [C, H, W] by (ph, pw).
Var avg_pool2d(Var x, std::size_t ph, std::size_t pw);
/// [C, H, W] -> [H, C*W], column index c*W + w.
Var to_sequence(Var x);
/// Gated recurrent layer over the rows of x [T x In]. Gate column blocks are
/// ordered reset, update, candidate. reverse=true runs from the last row.
Var gru(Var x, Var w_input, Var w_hidden, Var b_input, Var b_hidden, bool reverse);
/// Mean binary cross-entropy of probabilities against a constant target of the
/// same shape. Probabilities are clamped to [eps, 1 - eps].
Var binary_cross_entropy(Var probs, const DenseArray& target, double eps = 1e-7);

/// One weighted contrastive term: anchor row i, positive column j.
struct ContrastivePair {
  std::size_t anchor;
  std::size_t positive;
  double weight;
};

/// Sum over pairs of weight * (-S[i][j] + log sum_{k in den} exp(S[i][k])),
/// where den is `negatives`, plus j itself when include_positive is set.
/// S is a square similarity matrix. The log-sum-exp subtracts the row max.
Var contrastive_sum(Var similarity, std::span<const ContrastivePair> pairs,
                    std::span<const std::size_t> negatives, bool include_positive);

}  // namespace sedx
