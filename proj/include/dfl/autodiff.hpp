#pragma once

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dfl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace ad {

class Tape;

/// Handle to an immutable tensor recorded on a tape.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Maps the upstream adjoint of a node's output to one adjoint per operand.
/// Operands that do not require gradients may receive an empty matrix.
using BackwardRule = std::function<std::vector<Matrix>(const Matrix& upstream)>;

class Gradients {
 public:
  const Matrix& operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<int, Matrix> grads_;
};

/// Reverse-mode record of tensor operations. Single-threaded; independent
/// tapes share nothing.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Matrix value);
  Var constant(Matrix value);
  Var scalar_constant(double value);

  /// Appends an operation node. Every built-in op and every custom node
  /// goes through here, so they take part in backward identically.
  Var record(std::vector<Var> operands, Matrix value, BackwardRule rule, const char* kind);

  Gradients backward(const Var& output) const;

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> operands;
    Matrix value;
    BackwardRule rule;
    const char* kind = "leaf";
    bool requires_grad = false;
    bool is_parameter = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

// Built-in operations. Shapes must agree exactly; the only broadcast allowed
// is a 1x1 operand against a tensor in add/sub/mul.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var shift(const Var& a, double offset);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var sum(const Var& a);
Var mean(const Var& a);
Var transpose(const Var& a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice(const Var& a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

/// Node factory for a user-supplied differentiable function.
class CustomOp {
 public:
  using Forward = std::function<Matrix(std::span<const Matrix>)>;
  using Backward =
      std::function<std::vector<Matrix>(std::span<const Matrix> inputs, const Matrix& output, const Matrix& upstream)>;

  CustomOp(std::string name, Forward forward, Backward backward);

  Var operator()(std::span<const Var> operands) const;
  Var operator()(std::initializer_list<Var> operands) const {
    return (*this)(std::span<const Var>(operands.begin(), operands.size()));
  }

 private:
  std::string name_;
  Forward forward_;
  Backward backward_;
};

CustomOp register_custom(std::string name, CustomOp::Forward forward, CustomOp::Backward backward);

}  // namespace ad
}  // namespace dfl
