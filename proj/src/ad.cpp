#include "dmc/ad.hpp"

#include <cmath>

namespace dmc::ad {

namespace {

Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw std::invalid_argument(std::string("shape mismatch in '") + op + "'");
}

std::pair<Var, Var> broadcast(const Var& a, const Var& b, const char* op) {
  const auto r = broadcast_dim(a.rows(), b.rows(), op);
  const auto c = broadcast_dim(a.cols(), b.cols(), op);
  return {expand(a, r, c), expand(b, r, c)};
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *a.tape();
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
Matrix Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), recording_, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::record(const char* op, Matrix value, bool requires_grad, Backward backward) {
  if (!value.allFinite()) throw NonFiniteError(op);
  const bool track = requires_grad && recording_;
  nodes_.push_back(Node{std::move(value), Matrix(), track, track ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& adjoint) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = adjoint;
  } else {
    n.grad += adjoint;
  }
}

Matrix Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be 1x1");
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    // The closure may accumulate into earlier nodes only, so n.grad is stable.
    n.backward(*this, n.grad);
  }
}

Var expand(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if ((a.rows() != rows && a.rows() != 1) || (a.cols() != cols && a.cols() != 1)) {
    throw std::invalid_argument("expand: incompatible shape");
  }
  Tape& t = tape_of(a);
  Matrix out = a.value().replicate(a.rows() == rows ? 1 : rows, a.cols() == cols ? 1 : cols);
  const auto id = a.id();
  const bool rr = a.rows() != rows;
  const bool rc = a.cols() != cols;
  return t.record("expand", std::move(out), a.requires_grad(), [id, rr, rc](Tape& tp, const Matrix& g) {
    if (rr && rc) {
      tp.accumulate(id, Matrix::Constant(1, 1, g.sum()));
    } else if (rr) {
      tp.accumulate(id, g.colwise().sum());
    } else {
      tp.accumulate(id, g.rowwise().sum());
    }
  });
}

Var operator+(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast(a0, b0, "add");
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).record("add", a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             t.accumulate(ia, g);
                             t.accumulate(ib, g);
                           });
}

Var operator-(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast(a0, b0, "sub");
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).record("sub", a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             t.accumulate(ia, g);
                             t.accumulate(ib, -g);
                           });
}

Var operator*(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast(a0, b0, "mul");
  const auto ia = a.id(), ib = b.id();
  Matrix v = a.value().cwiseProduct(b.value());
  return tape_of(a).record("mul", std::move(v), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                             if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                           });
}

Var operator/(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast(a0, b0, "div");
  const auto ia = a.id(), ib = b.id();
  Matrix v = a.value().cwiseQuotient(b.value());
  return tape_of(a).record("div", std::move(v), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             const Matrix& bv = t.value(ib);
                             if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
                             if (t.requires_grad(ib)) {
                               const Matrix& av = t.value(ia);
                               t.accumulate(ib, -(g.array() * av.array() / bv.array().square()).matrix());
                             }
                           });
}

Var operator-(const Var& a) {
  const auto ia = a.id();
  return tape_of(a).record("neg", -a.value(), a.requires_grad(),
                           [ia](Tape& t, const Matrix& g) { t.accumulate(ia, -g); });
}

Var operator+(const Var& a, double b) {
  const auto ia = a.id();
  Matrix v = (a.value().array() + b).matrix();
  return tape_of(a).record("add_scalar", std::move(v), a.requires_grad(),
                           [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}
Var operator+(double a, const Var& b) { return b + a; }
Var operator-(const Var& a, double b) { return a + (-b); }
Var operator-(double a, const Var& b) { return (-b) + a; }

Var operator*(const Var& a, double b) {
  const auto ia = a.id();
  return tape_of(a).record("mul_scalar", a.value() * b, a.requires_grad(),
                           [ia, b](Tape& t, const Matrix& g) { t.accumulate(ia, g * b); });
}
Var operator*(double a, const Var& b) { return b * a; }
Var operator/(const Var& a, double b) { return a * (1.0 / b); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const auto ia = a.id(), ib = b.id();
  Matrix v = a.value() * b.value();
  return tape_of(a).record("matmul", std::move(v), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                             if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                           });
}

Var transpose(const Var& a) {
  const auto ia = a.id();
  return tape_of(a).record("transpose", a.value().transpose(), a.requires_grad(),
                           [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); });
}

Var relu(const Var& a) {
  const auto ia = a.id();
  Matrix v = a.value().cwiseMax(0.0);
  return tape_of(a).record("relu", std::move(v), a.requires_grad(), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0));
  });
}

Var tanh(const Var& a) {
  Tape& tp = tape_of(a);
  const auto ia = a.id();
  Matrix v = a.value().array().tanh().matrix();
  const auto out_id = tp.size();
  return tp.record("tanh", std::move(v), a.requires_grad(), [ia, out_id](Tape& t, const Matrix& g) {
    const auto y = t.value(out_id).array();
    t.accumulate(ia, (g.array() * (1.0 - y.square())).matrix());
  });
}

Var sigmoid(const Var& a) {
  Tape& tp = tape_of(a);
  const auto ia = a.id();
  Matrix v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const auto out_id = tp.size();
  return tp.record("sigmoid", std::move(v), a.requires_grad(), [ia, out_id](Tape& t, const Matrix& g) {
    const auto y = t.value(out_id).array();
    t.accumulate(ia, (g.array() * y * (1.0 - y)).matrix());
  });
}

Var exp(const Var& a) {
  Tape& tp = tape_of(a);
  const auto ia = a.id();
  const auto out_id = tp.size();
  return tp.record("exp", a.value().array().exp().matrix(), a.requires_grad(),
                   [ia, out_id](Tape& t, const Matrix& g) { t.accumulate(ia, g.cwiseProduct(t.value(out_id))); });
}

Var log(const Var& a) {
  const auto ia = a.id();
  return tape_of(a).record("log", a.value().array().log().matrix(), a.requires_grad(),
                           [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.cwiseQuotient(t.value(ia))); });
}

Var square(const Var& a) {
  const auto ia = a.id();
  return tape_of(a).record("square", a.value().array().square().matrix(), a.requires_grad(),
                           [ia](Tape& t, const Matrix& g) { t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia))); });
}

Var softplus(const Var& a) {
  const auto ia = a.id();
  // log(1 + e^x) evaluated without overflow.
  Matrix v = a.value().unaryExpr([](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
  return tape_of(a).record("softplus", std::move(v), a.requires_grad(), [ia](Tape& t, const Matrix& g) {
    const auto x = t.value(ia).array();
    t.accumulate(ia, (g.array() / (1.0 + (-x).exp())).matrix());
  });
}

Var minimum(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast(a0, b0, "minimum");
  const auto ia = a.id(), ib = b.id();
  Matrix v = a.value().cwiseMin(b.value());
  return tape_of(a).record("minimum", std::move(v), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             const auto first = (t.value(ia).array() <= t.value(ib).array());
                             t.accumulate(ia, first.select(g, 0.0));
                             t.accumulate(ib, first.select(0.0, g));
                           });
}

Var maximum(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast(a0, b0, "maximum");
  const auto ia = a.id(), ib = b.id();
  Matrix v = a.value().cwiseMax(b.value());
  return tape_of(a).record("maximum", std::move(v), a.requires_grad() || b.requires_grad(),
                           [ia, ib](Tape& t, const Matrix& g) {
                             const auto first = (t.value(ia).array() >= t.value(ib).array());
                             t.accumulate(ia, first.select(g, 0.0));
                             t.accumulate(ib, first.select(0.0, g));
                           });
}

Var minimum(const Var& a, double b) {
  const auto ia = a.id();
  return tape_of(a).record("minimum", a.value().cwiseMin(b), a.requires_grad(), [ia, b](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() <= b).select(g, 0.0));
  });
}

Var maximum(const Var& a, double b) {
  const auto ia = a.id();
  return tape_of(a).record("maximum", a.value().cwiseMax(b), a.requires_grad(), [ia, b](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() >= b).select(g, 0.0));
  });
}

Var clamp(const Var& a, double lo, double hi) { return minimum(maximum(a, lo), hi); }
Var clamp(const Var& a, const Var& lo, const Var& hi) { return minimum(maximum(a, lo), hi); }

Var where(const Mask& mask0, const Var& a0, const Var& b0) {
  const auto r = broadcast_dim(broadcast_dim(a0.rows(), b0.rows(), "where"), mask0.rows(), "where");
  const auto c = broadcast_dim(broadcast_dim(a0.cols(), b0.cols(), "where"), mask0.cols(), "where");
  Var a = expand(a0, r, c);
  Var b = expand(b0, r, c);
  Mask mask = mask0.replicate(mask0.rows() == r ? 1 : r, mask0.cols() == c ? 1 : c);
  const auto ia = a.id(), ib = b.id();
  Matrix v = mask.select(a.value(), b.value());
  return tape_of(a).record("where", std::move(v), a.requires_grad() || b.requires_grad(),
                           [ia, ib, mask](Tape& t, const Matrix& g) {
                             t.accumulate(ia, mask.select(g, 0.0));
                             t.accumulate(ib, mask.select(0.0, g));
                           });
}

Var scale(const Var& a, const Matrix& factor) {
  if (factor.rows() != a.rows() || factor.cols() != a.cols()) throw std::invalid_argument("scale: shape mismatch");
  const auto ia = a.id();
  return tape_of(a).record("scale", a.value().cwiseProduct(factor), a.requires_grad(),
                           [ia, factor](Tape& t, const Matrix& g) { t.accumulate(ia, g.cwiseProduct(factor)); });
}

Var sum(const Var& a) {
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return tape_of(a).record("sum", Matrix::Constant(1, 1, a.value().sum()), a.requires_grad(),
                           [ia, r, c](Tape& t, const Matrix& g) { t.accumulate(ia, Matrix::Constant(r, c, g(0, 0))); });
}

Var mean(const Var& a) { return sum(a) * (1.0 / static_cast<double>(a.value().size())); }

Var row_sum(const Var& a) {
  const auto ia = a.id();
  const auto c = a.cols();
  return tape_of(a).record("row_sum", a.value().rowwise().sum(), a.requires_grad(),
                           [ia, c](Tape& t, const Matrix& g) { t.accumulate(ia, g.replicate(1, c)); });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return tape_of(a).record("slice_rows", a.value().middleRows(start, count), a.requires_grad(),
                           [ia, r, c, start, count](Tape& t, const Matrix& g) {
                             Matrix full = Matrix::Zero(r, c);
                             full.middleRows(start, count) = g;
                             t.accumulate(ia, full);
                           });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return tape_of(a).record("slice_cols", a.value().middleCols(start, count), a.requires_grad(),
                           [ia, r, c, start, count](Tape& t, const Matrix& g) {
                             Matrix full = Matrix::Zero(r, c);
                             full.middleCols(start, count) = g;
                             t.accumulate(ia, full);
                           });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const auto c = parts.front().cols();
  Eigen::Index r = 0;
  bool req = false;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    r += p.rows();
    req = req || p.requires_grad();
  }
  Matrix v(r, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  layout.reserve(parts.size());
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    layout.emplace_back(p.id(), p.rows());
    off += p.rows();
  }
  return tape_of(parts.front()).record("concat_rows", std::move(v), req, [layout](Tape& t, const Matrix& g) {
    Eigen::Index o = 0;
    for (const auto& [id, n] : layout) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(o, n));
      o += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const auto r = parts.front().rows();
  Eigen::Index c = 0;
  bool req = false;
  for (const auto& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    c += p.cols();
    req = req || p.requires_grad();
  }
  Matrix v(r, c);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  layout.reserve(parts.size());
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    layout.emplace_back(p.id(), p.cols());
    off += p.cols();
  }
  return tape_of(parts.front()).record("concat_cols", std::move(v), req, [layout](Tape& t, const Matrix& g) {
    Eigen::Index o = 0;
    for (const auto& [id, n] : layout) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(o, n));
      o += n;
    }
  });
}

Var gather_rows(const Var& a, const std::vector<int>& index) {
  const auto ia = a.id();
  const auto r = a.rows(), c = a.cols();
  Matrix v(static_cast<Eigen::Index>(index.size()), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= r) throw std::out_of_range("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return tape_of(a).record("gather_rows", std::move(v), a.requires_grad(), [ia, r, c, index](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    for (std::size_t i = 0; i < index.size(); ++i) full.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, full);
  });
}

Var log_softmax(const Var& a) {
  Tape& tp = tape_of(a);
  const auto ia = a.id();
  const Matrix& x = a.value();
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix v = shifted.colwise() - lse;
  const auto out_id = tp.size();
  return tp.record("log_softmax", std::move(v), a.requires_grad(), [ia, out_id](Tape& t, const Matrix& g) {
    const Matrix p = t.value(out_id).array().exp().matrix();
    Eigen::VectorXd gs = g.rowwise().sum();
    t.accumulate(ia, g - (p.array().colwise() * gs.array()).matrix());
  });
}

}  // namespace dmc::ad
