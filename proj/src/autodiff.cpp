#include "dfl/autodiff.hpp"

#include <cmath>
#include <memory>
#include <sstream>

namespace dfl::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractError("operands belong to different tapes");
}

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

// Reduce an adjoint to the shape of an operand that was broadcast from 1x1.
Matrix unbroadcast(const Matrix& g, const Matrix& operand) {
  if (is_scalar(operand) && !is_scalar(g)) return Matrix::Constant(1, 1, g.sum());
  return g;
}

void check_binary_shapes(const Var& a, const Var& b, const char* op) {
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  if (x.rows() == y.rows() && x.cols() == y.cols()) return;
  if (is_scalar(x) || is_scalar(y)) return;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(x) + " vs " + shape_str(y));
}

Matrix broadcast_to(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return Matrix::Constant(rows, cols, m(0, 0));
}

double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Matrix& Var::value() const {
  if (!tape_) throw ContractError("use of an empty Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (!is_scalar(v)) throw ContractError("scalar() on a " + shape_str(v) + " tensor");
  return v(0, 0);
}

const Matrix& Gradients::operator[](const Var& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw ContractError("no gradient recorded for this leaf");
  return it->second;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(Matrix value) {
  if (!value.allFinite()) throw NumericError("non-finite parameter value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_parameter = true;
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  if (!value.allFinite()) throw NumericError("non-finite constant value");
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::scalar_constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::record(std::vector<Var> operands, Matrix value, BackwardRule rule, const char* kind) {
  Node n;
  n.kind = kind;
  n.operands.reserve(operands.size());
  for (const Var& v : operands) {
    if (v.tape() != this) throw ContractError(std::string(kind) + ": operand from another tape");
    n.operands.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
  }
  if (!value.allFinite()) throw NumericError(std::string(kind) + ": non-finite output");
  n.value = std::move(value);
  if (n.requires_grad) n.rule = std::move(rule);
  return push(std::move(n));
}

Gradients Tape::backward(const Var& output) const {
  if (output.tape() != this) throw ContractError("backward: output is not on this tape");
  const auto out = static_cast<std::size_t>(output.id());
  if (!is_scalar(nodes_[out].value)) {
    throw ContractError("backward: output must be a 1-element tensor, got " + shape_str(nodes_[out].value));
  }

  std::vector<Matrix> adjoint(out + 1);
  std::vector<bool> touched(out + 1, false);
  adjoint[out] = Matrix::Ones(1, 1);
  touched[out] = true;

  for (std::size_t i = out + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!touched[i] || !node.requires_grad || !node.rule) continue;
    std::vector<Matrix> grads = node.rule(adjoint[i]);
    if (grads.size() != node.operands.size()) {
      throw ContractError(std::string(node.kind) + ": backward returned " + std::to_string(grads.size()) +
                          " gradients for " + std::to_string(node.operands.size()) + " operands");
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const auto j = static_cast<std::size_t>(node.operands[k]);
      if (!nodes_[j].requires_grad) continue;
      Matrix& g = grads[k];
      if (g.rows() != nodes_[j].value.rows() || g.cols() != nodes_[j].value.cols()) {
        throw ContractError(std::string(node.kind) + ": gradient shape " + shape_str(g) + " for operand of shape " +
                            shape_str(nodes_[j].value));
      }
      if (touched[j]) {
        adjoint[j] += g;
      } else {
        adjoint[j] = std::move(g);
        touched[j] = true;
      }
    }
  }

  Gradients result;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].is_parameter) continue;
    if (i <= out && touched[i]) {
      result.grads_.emplace(static_cast<int>(i), std::move(adjoint[i]));
    } else {
      result.grads_.emplace(static_cast<int>(i), Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols()));
    }
  }
  return result;
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  if (x.cols() != y.rows()) throw DimensionError("matmul: " + shape_str(x) + " times " + shape_str(y));
  Tape* t = a.tape();
  const bool ga = t->requires_grad(a), gb = t->requires_grad(b);
  return t->record(
      {a, b}, x * y,
      [t, ia = a.id(), ib = b.id(), ga, gb](const Matrix& g) {
        Matrix da, db;
        if (ga) da = g * t->value(ib).transpose();
        if (gb) db = t->value(ia).transpose() * g;
        return std::vector<Matrix>{std::move(da), std::move(db)};
      },
      "matmul");
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  check_binary_shapes(a, b, "add");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  const Eigen::Index r = std::max(x.rows(), y.rows()), c = std::max(x.cols(), y.cols());
  Tape* t = a.tape();
  return t->record(
      {a, b}, broadcast_to(x, r, c) + broadcast_to(y, r, c),
      [t, ia = a.id(), ib = b.id()](const Matrix& g) {
        return std::vector<Matrix>{unbroadcast(g, t->value(ia)), unbroadcast(g, t->value(ib))};
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  check_binary_shapes(a, b, "sub");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  const Eigen::Index r = std::max(x.rows(), y.rows()), c = std::max(x.cols(), y.cols());
  Tape* t = a.tape();
  return t->record(
      {a, b}, broadcast_to(x, r, c) - broadcast_to(y, r, c),
      [t, ia = a.id(), ib = b.id()](const Matrix& g) {
        return std::vector<Matrix>{unbroadcast(g, t->value(ia)), unbroadcast(Matrix(-g), t->value(ib))};
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  check_binary_shapes(a, b, "mul");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  const Eigen::Index r = std::max(x.rows(), y.rows()), c = std::max(x.cols(), y.cols());
  Tape* t = a.tape();
  return t->record(
      {a, b}, broadcast_to(x, r, c).cwiseProduct(broadcast_to(y, r, c)),
      [t, ia = a.id(), ib = b.id(), r, c](const Matrix& g) {
        const Matrix& x = t->value(ia);
        const Matrix& y = t->value(ib);
        Matrix da = g.cwiseProduct(broadcast_to(y, r, c));
        Matrix db = g.cwiseProduct(broadcast_to(x, r, c));
        return std::vector<Matrix>{unbroadcast(da, x), unbroadcast(db, y)};
      },
      "mul");
}

Var scale(const Var& a, double factor) {
  Tape* t = a.tape();
  return t->record(
      {a}, a.value() * factor, [factor](const Matrix& g) { return std::vector<Matrix>{g * factor}; }, "scale");
}

Var shift(const Var& a, double offset) {
  Tape* t = a.tape();
  return t->record(
      {a}, (a.value().array() + offset).matrix(), [](const Matrix& g) { return std::vector<Matrix>{g}; }, "shift");
}

Var exp(const Var& a) {
  Tape* t = a.tape();
  Matrix out = a.value().array().exp().matrix();
  const int self = static_cast<int>(t->size());
  return t->record(
      {a}, std::move(out),
      [t, self](const Matrix& g) { return std::vector<Matrix>{g.cwiseProduct(t->value(self))}; }, "exp");
}

Var log(const Var& a) {
  Tape* t = a.tape();
  if ((a.value().array() <= 0.0).any()) throw NumericError("log: non-positive argument");
  return t->record(
      {a}, a.value().array().log().matrix(),
      [t, ia = a.id()](const Matrix& g) { return std::vector<Matrix>{g.cwiseQuotient(t->value(ia))}; }, "log");
}

Var softplus(const Var& a) {
  Tape* t = a.tape();
  return t->record(
      {a}, a.value().unaryExpr(&softplus_scalar),
      [t, ia = a.id()](const Matrix& g) {
        return std::vector<Matrix>{g.cwiseProduct(t->value(ia).unaryExpr(&sigmoid_scalar))};
      },
      "softplus");
}

Var tanh(const Var& a) {
  Tape* t = a.tape();
  const int self = static_cast<int>(t->size());
  return t->record(
      {a}, a.value().array().tanh().matrix(),
      [t, self](const Matrix& g) {
        const Matrix& y = t->value(self);
        return std::vector<Matrix>{(g.array() * (1.0 - y.array().square())).matrix()};
      },
      "tanh");
}

Var relu(const Var& a) {
  Tape* t = a.tape();
  return t->record(
      {a}, a.value().cwiseMax(0.0),
      [t, ia = a.id()](const Matrix& g) {
        // Subgradient 0 at the kink.
        return std::vector<Matrix>{(t->value(ia).array() > 0.0).select(g, 0.0).matrix()};
      },
      "relu");
}

Var square(const Var& a) {
  Tape* t = a.tape();
  return t->record(
      {a}, a.value().array().square().matrix(),
      [t, ia = a.id()](const Matrix& g) { return std::vector<Matrix>{2.0 * g.cwiseProduct(t->value(ia))}; },
      "square");
}

Var sqrt(const Var& a) {
  Tape* t = a.tape();
  if ((a.value().array() < 0.0).any()) throw NumericError("sqrt: negative argument");
  const int self = static_cast<int>(t->size());
  return t->record(
      {a}, a.value().array().sqrt().matrix(),
      [t, self](const Matrix& g) {
        return std::vector<Matrix>{(0.5 * g.array() / t->value(self).array()).matrix()};
      },
      "sqrt");
}

Var clamp(const Var& a, double lo, double hi) {
  Tape* t = a.tape();
  return t->record(
      {a}, a.value().cwiseMax(lo).cwiseMin(hi),
      [t, ia = a.id(), lo, hi](const Matrix& g) {
        const auto& x = t->value(ia).array();
        return std::vector<Matrix>{((x >= lo) && (x <= hi)).select(g, 0.0).matrix()};
      },
      "clamp");
}

Var sum(const Var& a) {
  Tape* t = a.tape();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t->record(
      {a}, Matrix::Constant(1, 1, a.value().sum()),
      [r, c](const Matrix& g) { return std::vector<Matrix>{Matrix::Constant(r, c, g(0, 0))}; }, "sum");
}

Var mean(const Var& a) {
  Tape* t = a.tape();
  const Eigen::Index r = a.rows(), c = a.cols();
  if (r * c == 0) throw DimensionError("mean: empty tensor");
  const double n = static_cast<double>(r * c);
  return t->record(
      {a}, Matrix::Constant(1, 1, a.value().sum() / n),
      [r, c, n](const Matrix& g) { return std::vector<Matrix>{Matrix::Constant(r, c, g(0, 0) / n)}; }, "mean");
}

Var transpose(const Var& a) {
  Tape* t = a.tape();
  return t->record(
      {a}, a.value().transpose(), [](const Matrix& g) { return std::vector<Matrix>{g.transpose()}; }, "transpose");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  Tape* t = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    offsets.push_back(rows);
    rows += p.rows();
  }
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) out.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
  std::vector<Eigen::Index> heights;
  for (const Var& p : parts) heights.push_back(p.rows());
  return t->record(
      std::vector<Var>(parts.begin(), parts.end()), std::move(out),
      [offsets, heights](const Matrix& g) {
        std::vector<Matrix> gs;
        for (std::size_t k = 0; k < offsets.size(); ++k) gs.emplace_back(g.middleRows(offsets[k], heights[k]));
        return gs;
      },
      "concat_rows");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  Tape* t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<Eigen::Index> offsets, widths;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    offsets.push_back(cols);
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) out.middleCols(offsets[k], widths[k]) = parts[k].value();
  return t->record(
      std::vector<Var>(parts.begin(), parts.end()), std::move(out),
      [offsets, widths](const Matrix& g) {
        std::vector<Matrix> gs;
        for (std::size_t k = 0; k < offsets.size(); ++k) gs.emplace_back(g.middleCols(offsets[k], widths[k]));
        return gs;
      },
      "concat_cols");
}

Var slice(const Var& a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > a.rows() || col + cols > a.cols()) {
    throw DimensionError("slice: block out of range for " + shape_str(a.value()));
  }
  Tape* t = a.tape();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t->record(
      {a}, a.value().block(row, col, rows, cols),
      [=](const Matrix& g) {
        Matrix full = Matrix::Zero(r, c);
        full.block(row, col, rows, cols) = g;
        return std::vector<Matrix>{std::move(full)};
      },
      "slice");
}

CustomOp::CustomOp(std::string name, Forward forward, Backward backward)
    : name_(std::move(name)), forward_(std::move(forward)), backward_(std::move(backward)) {
  if (!forward_ || !backward_) throw ContractError("custom op '" + name_ + "' needs both forward and backward");
}

Var CustomOp::operator()(std::span<const Var> operands) const {
  if (operands.empty()) throw ContractError("custom op '" + name_ + "' called without operands");
  Tape* t = operands.front().tape();
  std::vector<Matrix> inputs;
  inputs.reserve(operands.size());
  for (const Var& v : operands) {
    require_same_tape(operands.front(), v);
    inputs.push_back(v.value());
  }
  Matrix out = forward_(inputs);
  auto saved = std::make_shared<std::pair<std::vector<Matrix>, Matrix>>(std::move(inputs), out);
  return t->record(
      std::vector<Var>(operands.begin(), operands.end()), std::move(out),
      [saved, backward = backward_](const Matrix& g) { return backward(saved->first, saved->second, g); }, "custom");
}

CustomOp register_custom(std::string name, CustomOp::Forward forward, CustomOp::Backward backward) {
  return CustomOp(std::move(name), std::move(forward), std::move(backward));
}

}  // namespace dfl::ad
