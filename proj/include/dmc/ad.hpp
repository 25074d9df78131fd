#pragma once

// Tape-based reverse-mode automatic differentiation over dense matrices.
//
// Every operation appends a node holding its forward value and, when any
// input requires a gradient, a backward closure. Calling Tape::backward on a
// 1x1 node accumulates adjoints into every reachable node in reverse order.
// Broadcasting follows numpy rules restricted to 2-D: a dimension of size 1
// is stretched to match the other operand.
//
// Ties in minimum/maximum send the whole adjoint to the first argument, so a
// clamp written as minimum(maximum(x, lo), hi) passes the gradient through to
// x exactly on its boundaries.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmc::ad {

using Matrix = Eigen::MatrixXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

class Tape;

/// Raised when an operation produces NaN or infinity.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& op)
      : std::runtime_error("non-finite value produced by '" + op + "'"), op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

/// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  /// Accumulated adjoint; a zero matrix of the value's shape if none reached it.
  Matrix grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& adjoint)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose adjoint is tracked (a trainable array or an attribution input).
  Var variable(Matrix value);
  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  Var constant(double value);

  /// Internal: record an op result. `backward` may be empty.
  Var record(const char* op, Matrix value, bool requires_grad, Backward backward);

  /// Adds `adjoint` into node `id` if that node tracks gradients.
  void accumulate(std::size_t id, const Matrix& adjoint);

  /// Reverse sweep from a 1x1 root with seed 1.
  void backward(const Var& root);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  Matrix grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// When false, forward values are still computed but no closures are kept.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
  bool recording_ = true;
};

// Elementwise arithmetic with broadcasting.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);

Var operator+(const Var& a, double b);
Var operator+(double a, const Var& b);
Var operator-(const Var& a, double b);
Var operator-(double a, const Var& b);
Var operator*(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator/(const Var& a, double b);

/// Stretches a to rows x cols; dimensions of a must be equal or 1.
Var expand(const Var& a, Eigen::Index rows, Eigen::Index cols);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var softplus(const Var& a);

Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
Var minimum(const Var& a, double b);
Var maximum(const Var& a, double b);
Var clamp(const Var& a, double lo, double hi);
Var clamp(const Var& a, const Var& lo, const Var& hi);

/// Elementwise select; mask is broadcast to the result shape.
Var where(const Mask& mask, const Var& a, const Var& b);

/// Multiplies by a constant matrix without recording it as a node.
Var scale(const Var& a, const Matrix& factor);

Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);  // rows x 1

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// out.row(i) = a.row(index[i]); gradients scatter-add back.
Var gather_rows(const Var& a, const std::vector<int>& index);

/// Row-wise log-softmax.
Var log_softmax(const Var& a);

}  // namespace dmc::ad
