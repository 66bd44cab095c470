#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// Every op records its output value and a backward closure on the tape.
// Nodes that depend on no trainable leaf skip the closure entirely, so a
// tape used purely for evaluation costs little beyond the forward pass.

#include "epio/types.hpp"

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace epio::ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
using ParamSet = std::map<std::string, Matrix<Scalar>>;

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat&)>;

  /// When false, parameters are recorded as constants (pure evaluation).
  explicit Tape(bool track_params = true) : track_params_(track_params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var<Scalar> variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a named parameter; repeated requests return the same node.
  Var<Scalar> param(const std::string& name, const Mat& value) {
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return Var<Scalar>(this, it->second);
    Var<Scalar> v = push(value, track_params_, nullptr);
    param_ids_.emplace(name, v.id());
    return v;
  }
  Var<Scalar> param(const ParamSet<Scalar>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("unknown parameter: " + name);
    return param(name, it->second);
  }

  /// Makes later param(name) requests resolve to an existing node.
  void bind_param(const std::string& name, const Var<Scalar>& v) { param_ids_[name] = v.id(); }

  /// Records an op. `backward` is dropped when no input needs a gradient.
  Var<Scalar> push(Mat value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated at `id`; empty matrix when none has arrived.
  const Mat& grad(int id) const { return nodes_[id].grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// Seeds d root / d root = 1 (root must be 1x1) and runs the tape backwards.
  void backward(const Var<Scalar>& root) {
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward needs a scalar root");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id()].grad = Mat::Ones(1, 1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      const Mat g = n.grad;
      n.backward(*this, g);
    }
  }

  /// Gradients of every tracked parameter after backward(); missing ones are zero.
  void add_param_grads(ParamSet<Scalar>& grads) const {
    for (const auto& [name, id] : param_ids_) {
      const Node& n = nodes_[id];
      if (n.grad.size() == 0) continue;
      auto it = grads.find(name);
      if (it == grads.end() || it->second.size() == 0) {
        grads[name] = n.grad;
      } else {
        it->second += n.grad;
      }
    }
  }

  const std::map<std::string, int>& param_ids() const { return param_ids_; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
  std::map<std::string, int> param_ids_;
  bool track_params_ = true;
};

// ---------------------------------------------------------------------------
// Ops. All are free functions taking and returning Var handles.

namespace detail {

template <typename Scalar>
Tape<Scalar>& tape_of(const Var<Scalar>& a) {
  if (!a.valid()) throw std::invalid_argument("op on an unbound Var");
  return *a.tape();
}

template <typename Scalar>
void check_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                  if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                });
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value().transpose(), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
                });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  return t.push(a.value().transpose(), a.requires_grad(),
                [ia](Tape<Scalar>& tp, const Matrix<Scalar>& g) { tp.accumulate(ia, g.transpose()); });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  detail::check_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, g);
                });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  detail::check_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, -g);
                });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  detail::check_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                });
}

/// Elementwise quotient.
template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  detail::check_same_shape(a, b, "div");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseQuotient(b.value()), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  const auto& bv = tp.value(ib);
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseQuotient(bv));
                  if (tp.requires_grad(ib)) {
                    tp.accumulate(ib, -(g.cwiseProduct(tp.value(ia)).cwiseQuotient(bv.cwiseProduct(bv))));
                  }
                });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  return t.push(a.value() * s, a.requires_grad(),
                [ia, s](Tape<Scalar>& tp, const Matrix<Scalar>& g) { tp.accumulate(ia, g * s); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  return t.push((a.value().array() + s).matrix(), a.requires_grad(),
                [ia](Tape<Scalar>& tp, const Matrix<Scalar>& g) { tp.accumulate(ia, g); });
}

/// a (N x C) scaled by the 1x1 variable s.
template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& a, const Var<Scalar>& s) {
  auto& t = detail::tape_of(a);
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("mul_scalar needs a 1x1 factor");
  const int ia = a.id(), is = s.id();
  return t.push(a.value() * s.value()(0, 0), a.requires_grad() || s.requires_grad(),
                [ia, is](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(is)(0, 0));
                  if (tp.requires_grad(is)) {
                    Matrix<Scalar> d(1, 1);
                    d(0, 0) = g.cwiseProduct(tp.value(ia)).sum();
                    tp.accumulate(is, d);
                  }
                });
}

/// a (N x C) + b (1 x C) broadcast over rows.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  if (b.rows() != 1 || b.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value();
  out.rowwise() += b.value().row(0);
  return t.push(std::move(out), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  tp.accumulate(ia, g);
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
                });
}

/// 1 x C -> n x C.
template <typename Scalar>
Var<Scalar> repeat_rows(const Var<Scalar>& a, Eigen::Index n) {
  auto& t = detail::tape_of(a);
  if (a.rows() != 1) throw ShapeError("repeat_rows expects a single row");
  const int ia = a.id();
  return t.push(a.value().replicate(n, 1), a.requires_grad(),
                [ia](Tape<Scalar>& tp, const Matrix<Scalar>& g) { tp.accumulate(ia, g.colwise().sum()); });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  Matrix<Scalar> out = a.value().unaryExpr([slope](Scalar v) { return v > Scalar(0) ? v : slope * v; });
  return t.push(std::move(out), a.requires_grad(), [ia, slope](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    const auto& x = tp.value(ia);
    Matrix<Scalar> d = g;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (!(x.data()[i] > Scalar(0))) d.data()[i] *= slope;
    }
    tp.accumulate(ia, d);
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  Matrix<Scalar> out = a.value().array().exp().matrix();
  Matrix<Scalar> saved = a.requires_grad() ? out : Matrix<Scalar>();
  return t.push(std::move(out), a.requires_grad(),
                [ia, saved = std::move(saved)](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  tp.accumulate(ia, g.cwiseProduct(saved));
                });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  return t.push(a.value().array().log().matrix(), a.requires_grad(),
                [ia](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  tp.accumulate(ia, g.cwiseQuotient(tp.value(ia)));
                });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  Matrix<Scalar> out = a.value().array().sqrt().matrix();
  Matrix<Scalar> half_inv = (Scalar(0.5) / out.array()).matrix();
  return t.push(std::move(out), a.requires_grad(),
                [ia, half_inv = std::move(half_inv)](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  tp.accumulate(ia, g.cwiseProduct(half_inv));
                });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  return t.push(a.value().cwiseAbs(), a.requires_grad(), [ia](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    const auto& x = tp.value(ia);
    Matrix<Scalar> d = g;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const Scalar v = x.data()[i];
      d.data()[i] *= v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
    }
    tp.accumulate(ia, d);
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return mul(a, a);
}

/// Sum of all entries, 1x1.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), a.requires_grad(), [ia, r, c](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    tp.accumulate(ia, Matrix<Scalar>::Constant(r, c, g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / Scalar(a.value().size()));
}

/// Mean over rows, N x C -> 1 x C.
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  const Eigen::Index n = a.rows();
  return t.push(a.value().colwise().mean(), a.requires_grad(), [ia, n](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    tp.accumulate(ia, (g / Scalar(n)).replicate(n, 1));
  });
}

/// Row-wise sum, N x C -> N x 1.
template <typename Scalar>
Var<Scalar> sum_cols(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  const Eigen::Index c = a.cols();
  return t.push(a.value().rowwise().sum(), a.requires_grad(), [ia, c](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    tp.accumulate(ia, g.replicate(1, c));
  });
}

/// Numerically stable softmax over each row.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  auto& t = detail::tape_of(a);
  const int ia = a.id();
  Matrix<Scalar> p = a.value();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Scalar mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  Matrix<Scalar> saved = p;
  return t.push(std::move(p), a.requires_grad(),
                [ia, saved = std::move(saved)](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  const Matrix<Scalar> gp = g.cwiseProduct(saved);
                  Matrix<Scalar> d = gp - saved.cwiseProduct(gp.rowwise().sum().replicate(1, saved.cols()));
                  tp.accumulate(ia, d);
                });
}

/// Row-wise layer normalization with affine gamma/beta (each 1 x C).
template <typename Scalar>
Var<Scalar> layer_norm_rows(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  auto& t = detail::tape_of(x);
  const Eigen::Index n = x.rows(), c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw ShapeError("layer_norm_rows: affine shape mismatch");
  const auto& xv = x.value();
  Matrix<Scalar> xhat(n, c);
  Vector<Scalar> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mu = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix<Scalar> out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return t.push(std::move(out), rg,
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Scalar>& tp,
                                                                                    const Matrix<Scalar>& g) {
                  if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                  if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
                  if (tp.requires_grad(ix)) {
                    Matrix<Scalar> dxhat = g;
                    dxhat.array().rowwise() *= tp.value(ig).row(0).array();
                    Matrix<Scalar> dx(dxhat.rows(), dxhat.cols());
                    for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                      const Scalar m1 = dxhat.row(i).mean();
                      const Scalar m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                      dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                    }
                    tp.accumulate(ix, dx);
                  }
                });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  auto& t = detail::tape_of(parts.front());
  const Eigen::Index n = parts.front().rows();
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix<Scalar> out(n, total);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.push(std::move(out), rg, [spans](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    for (const auto& [id, o] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(o, tp.value(id).cols()));
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  auto& t = detail::tape_of(parts.front());
  const Eigen::Index c = parts.front().cols();
  Eigen::Index total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column counts differ");
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix<Scalar> out(total, c);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  return t.push(std::move(out), rg, [spans](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    for (const auto& [id, o] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(o, tp.value(id).rows()));
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  auto& t = detail::tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(a.value().middleCols(start, count), a.requires_grad(),
                [ia, r, c, start, count](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  Matrix<Scalar> d = Matrix<Scalar>::Zero(r, c);
                  d.middleCols(start, count) = g;
                  tp.accumulate(ia, d);
                });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  auto& t = detail::tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(a.value().middleRows(start, count), a.requires_grad(),
                [ia, r, c, start, count](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  Matrix<Scalar> d = Matrix<Scalar>::Zero(r, c);
                  d.middleRows(start, count) = g;
                  tp.accumulate(ia, d);
                });
}

/// Sums each run of `group` adjacent columns: N x (group*C) -> N x C.
template <typename Scalar>
Var<Scalar> group_sum_cols(const Var<Scalar>& a, int group) {
  auto& t = detail::tape_of(a);
  if (group <= 0 || a.cols() % group != 0) throw ShapeError("group_sum_cols: width not divisible");
  const Eigen::Index c = a.cols() / group;
  Matrix<Scalar> out(a.rows(), c);
  for (Eigen::Index k = 0; k < c; ++k) out.col(k) = a.value().middleCols(k * group, group).rowwise().sum();
  const int ia = a.id();
  return t.push(std::move(out), a.requires_grad(), [ia, group](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    Matrix<Scalar> d(g.rows(), g.cols() * group);
    for (Eigen::Index k = 0; k < g.cols(); ++k) d.middleCols(k * group, group) = g.col(k).replicate(1, group);
    tp.accumulate(ia, d);
  });
}

/// Repeats each column `group` times: N x C -> N x (group*C).
template <typename Scalar>
Var<Scalar> group_repeat_cols(const Var<Scalar>& a, int group) {
  auto& t = detail::tape_of(a);
  const Eigen::Index c = a.cols();
  Matrix<Scalar> out(a.rows(), c * group);
  for (Eigen::Index k = 0; k < c; ++k) out.middleCols(k * group, group) = a.value().col(k).replicate(1, group);
  const int ia = a.id();
  return t.push(std::move(out), a.requires_grad(), [ia, group, c](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
    Matrix<Scalar> d(g.rows(), c);
    for (Eigen::Index k = 0; k < c; ++k) d.col(k) = g.middleCols(k * group, group).rowwise().sum();
    tp.accumulate(ia, d);
  });
}

/// Treats x (N x group*C, column index c*group+m) as a (group*N) x C matrix
/// and right-multiplies by w (C x C'). This is the per-type equivariant
/// linear map applied to every token block at once.
template <typename Scalar>
Var<Scalar> block_matmul(const Var<Scalar>& x, const Var<Scalar>& w, int group) {
  auto& t = detail::tape_of(x);
  const Eigen::Index n = x.rows();
  if (group <= 0 || x.cols() % group != 0) throw ShapeError("block_matmul: width not divisible by group");
  const Eigen::Index c_in = x.cols() / group;
  if (w.rows() != c_in) throw ShapeError("block_matmul: weight rows != channel count");
  const Eigen::Index c_out = w.cols();
  using Map = Eigen::Map<Matrix<Scalar>>;
  using CMap = Eigen::Map<const Matrix<Scalar>>;
  Matrix<Scalar> out(n, group * c_out);
  Map(out.data(), n * group, c_out).noalias() = CMap(x.value().data(), n * group, c_in) * w.value();
  const int ix = x.id(), iw = w.id();
  return t.push(std::move(out), x.requires_grad() || w.requires_grad(),
                [ix, iw, n, group, c_in, c_out](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  CMap gm(g.data(), n * group, c_out);
                  if (tp.requires_grad(ix)) {
                    Matrix<Scalar> d(n, group * c_in);
                    Map(d.data(), n * group, c_in).noalias() = gm * tp.value(iw).transpose();
                    tp.accumulate(ix, d);
                  }
                  if (tp.requires_grad(iw)) {
                    CMap xm(tp.value(ix).data(), n * group, c_in);
                    tp.accumulate(iw, xm.transpose() * gm);
                  }
                });
}

/// Left-multiplies every (group x C) token block of x by m (group x group).
template <typename Scalar>
Var<Scalar> rotate_blocks(const Var<Scalar>& x, const Var<Scalar>& m, int group) {
  auto& t = detail::tape_of(x);
  if (m.rows() != group || m.cols() != group) throw ShapeError("rotate_blocks: matrix size != group");
  if (x.cols() % group != 0) throw ShapeError("rotate_blocks: width not divisible by group");
  const Eigen::Index channels = x.cols() / group;
  Matrix<Scalar> out(x.rows(), x.cols());
  const Matrix<Scalar> mt = m.value().transpose();
  for (Eigen::Index c = 0; c < channels; ++c) {
    out.middleCols(c * group, group).noalias() = x.value().middleCols(c * group, group) * mt;
  }
  const int ix = x.id(), im = m.id();
  return t.push(std::move(out), x.requires_grad() || m.requires_grad(),
                [ix, im, group, channels](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  const auto& xv = tp.value(ix);
                  const auto& mv = tp.value(im);
                  if (tp.requires_grad(ix)) {
                    Matrix<Scalar> d(g.rows(), g.cols());
                    for (Eigen::Index c = 0; c < channels; ++c) {
                      d.middleCols(c * group, group).noalias() = g.middleCols(c * group, group) * mv;
                    }
                    tp.accumulate(ix, d);
                  }
                  if (tp.requires_grad(im)) {
                    Matrix<Scalar> d = Matrix<Scalar>::Zero(group, group);
                    for (Eigen::Index c = 0; c < channels; ++c) {
                      d.noalias() += g.middleCols(c * group, group).transpose() * xv.middleCols(c * group, group);
                    }
                    tp.accumulate(im, d);
                  }
                });
}

/// Fourier features of every entry: x -> (x, sin(2^k pi x)_k, cos(2^k pi x)_k), k < F.
/// N x D -> N x D(2F+1), each input column expanded into a contiguous run.
template <typename Scalar>
Var<Scalar> fourier_features(const Var<Scalar>& x, int frequencies) {
  auto& t = detail::tape_of(x);
  const Eigen::Index n = x.rows(), dims = x.cols();
  const int width = 2 * frequencies + 1;
  Matrix<Scalar> out(n, dims * width);
  for (Eigen::Index j = 0; j < dims; ++j) {
    out.col(j * width) = x.value().col(j);
    for (int k = 0; k < frequencies; ++k) {
      const Scalar w = Scalar(kPi * std::ldexp(1.0, k));
      out.col(j * width + 1 + k) = (x.value().col(j) * w).array().sin().matrix();
      out.col(j * width + 1 + frequencies + k) = (x.value().col(j) * w).array().cos().matrix();
    }
  }
  const int ix = x.id();
  return t.push(out, x.requires_grad(),
                [ix, dims, width, frequencies, out](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  Matrix<Scalar> d(g.rows(), dims);
                  for (Eigen::Index j = 0; j < dims; ++j) {
                    Vector<Scalar> acc = g.col(j * width);
                    for (int k = 0; k < frequencies; ++k) {
                      const Scalar w = Scalar(kPi * std::ldexp(1.0, k));
                      // d sin = w cos, d cos = -w sin
                      acc += w * g.col(j * width + 1 + k).cwiseProduct(out.col(j * width + 1 + frequencies + k));
                      acc -= w * g.col(j * width + 1 + frequencies + k).cwiseProduct(out.col(j * width + 1 + k));
                    }
                    d.col(j) = acc;
                  }
                  tp.accumulate(ix, d);
                });
}

/// Cross product of two 1x3 rows.
template <typename Scalar>
Var<Scalar> cross3(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& t = detail::tape_of(a);
  if (a.rows() != 1 || a.cols() != 3 || b.rows() != 1 || b.cols() != 3) throw ShapeError("cross3 needs 1x3 rows");
  const Vec3<Scalar> av = a.value().row(0).transpose(), bv = b.value().row(0).transpose();
  Matrix<Scalar> out = av.cross(bv).transpose();
  const int ia = a.id(), ib = b.id();
  return t.push(std::move(out), a.requires_grad() || b.requires_grad(),
                [ia, ib](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  const Vec3<Scalar> av = tp.value(ia).row(0).transpose();
                  const Vec3<Scalar> bv = tp.value(ib).row(0).transpose();
                  const Vec3<Scalar> gv = g.row(0).transpose();
                  // d(a x b) . g : grad_a = b x g, grad_b = g x a
                  if (tp.requires_grad(ia)) tp.accumulate(ia, Matrix<Scalar>(bv.cross(gv).transpose()));
                  if (tp.requires_grad(ib)) tp.accumulate(ib, Matrix<Scalar>(gv.cross(av).transpose()));
                });
}

/// Gathers entries: out(k) = a(index[k]) over column-major storage.
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& a, Eigen::Index rows, Eigen::Index cols, std::vector<Eigen::Index> index) {
  auto& t = detail::tape_of(a);
  if (static_cast<Eigen::Index>(index.size()) != rows * cols) throw ShapeError("gather: index size mismatch");
  Matrix<Scalar> out(rows, cols);
  for (Eigen::Index k = 0; k < rows * cols; ++k) out.data()[k] = a.value().data()[index[k]];
  const int ia = a.id();
  const Eigen::Index ar = a.rows(), ac = a.cols();
  return t.push(std::move(out), a.requires_grad(),
                [ia, ar, ac, index = std::move(index)](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                  Matrix<Scalar> d = Matrix<Scalar>::Zero(ar, ac);
                  for (std::size_t k = 0; k < index.size(); ++k) d.data()[index[k]] += g.data()[k];
                  tp.accumulate(ia, d);
                });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}

}  // namespace epio::ad
