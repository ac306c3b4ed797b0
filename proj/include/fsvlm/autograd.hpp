#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records nodes in creation order; backward() walks them in reverse,
// so no topological sort is needed. Nodes that do not depend on a trainable
// parameter are marked constant and never receive gradients, which keeps
// frozen sub-graphs (e.g. a frozen backbone under head tuning) cheap.

#include "fsvlm/parameters.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace fsvlm::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, std::size_t)> backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return Var{this, nodes_.size() - 1};
  }

  /// Leaf for a model parameter. One node per parameter per tape, so every
  /// use accumulates into the same gradient.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    nodes_.push_back(Node{p.value, {}, grad_enabled_ && p.trainable, &p, {}});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
  }

  /// Push an op result. `backward` is kept only when some input needs grad.
  Var record(Matrix value, bool requires_grad, std::function<void(Tape&, std::size_t)> backward) {
    const bool rg = grad_enabled_ && requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg, nullptr, rg ? std::move(backward) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Back-propagate from a 1x1 root and add leaf gradients into the
  /// trainable parameters' grad buffers.
  void backward(Var root) {
    if (root.tape != this) throw std::invalid_argument("backward: variable from another tape");
    Node& r = nodes_[root.id];
    if (r.value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!r.requires_grad) return;
    r.grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr && n.param->trainable) {
        if (n.param->grad.rows() != n.param->value.rows() ||
            n.param->grad.cols() != n.param->value.cols()) {
          n.param->zero_grad();
        }
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

namespace detail {
inline void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::invalid_argument("variables live on different tapes");
}
inline void check_shape(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch in ") + what);
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  detail::check_shape(a.cols() == b.rows(), "matmul");
  Matrix out = a.value() * b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          if (t.node(ia).requires_grad) t.accumulate(ia, g * t.value(ib).transpose());
                          if (t.node(ib).requires_grad) t.accumulate(ib, t.value(ia).transpose() * g);
                        });
}

/// a * b^T without materialising the transpose as a node.
inline Var matmul_nt(Var a, Var b) {
  detail::same_tape(a, b);
  detail::check_shape(a.cols() == b.cols(), "matmul_nt");
  Matrix out = a.value() * b.value().transpose();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          if (t.node(ia).requires_grad) t.accumulate(ia, g * t.value(ib));
                          if (t.node(ib).requires_grad) t.accumulate(ib, g.transpose() * t.value(ia));
                        });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Matrix out = a.value() + b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape& t, std::size_t self) {
                          t.accumulate(ia, t.grad(self));
                          t.accumulate(ib, t.grad(self));
                        });
}

/// x + bias with a 1xN bias broadcast over rows.
inline Var add_row(Var x, Var bias) {
  detail::same_tape(x, bias);
  detail::check_shape(bias.rows() == 1 && bias.cols() == x.cols(), "add_row");
  Matrix out = x.value().rowwise() + bias.value().row(0);
  const std::size_t ix = x.id, ib = bias.id;
  return x.tape->record(std::move(out), x.requires_grad() || bias.requires_grad(),
                        [ix, ib](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          t.accumulate(ix, g);
                          if (t.node(ib).requires_grad) t.accumulate(ib, g.colwise().sum());
                        });
}

/// x + tile(p): p (T x D) repeated over the B consecutive row groups of x.
inline Var add_tiled(Var x, Var p) {
  detail::same_tape(x, p);
  detail::check_shape(p.cols() == x.cols() && p.rows() > 0 && x.rows() % p.rows() == 0,
                      "add_tiled");
  const Eigen::Index group = p.rows();
  const Eigen::Index b = x.rows() / group;
  Matrix out = x.value();
  for (Eigen::Index i = 0; i < b; ++i) out.middleRows(i * group, group) += p.value();
  const std::size_t ix = x.id, ip = p.id;
  return x.tape->record(std::move(out), x.requires_grad() || p.requires_grad(),
                        [ix, ip, group, b](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          t.accumulate(ix, g);
                          if (t.node(ip).requires_grad) {
                            Matrix acc = Matrix::Zero(group, g.cols());
                            for (Eigen::Index i = 0; i < b; ++i) acc += g.middleRows(i * group, group);
                            t.accumulate(ip, acc);
                          }
                        });
}

inline Var scale(Var x, double s) {
  Matrix out = x.value() * s;
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix, s](Tape& t, std::size_t self) {
    t.accumulate(ix, t.grad(self) * s);
  });
}

/// Elementwise product with a constant mask (dropout).
inline Var mul_constant(Var x, const Matrix& mask) {
  detail::check_shape(x.rows() == mask.rows() && x.cols() == mask.cols(), "mul_constant");
  Matrix out = x.value().cwiseProduct(mask);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix, mask](Tape& t, std::size_t self) {
    t.accumulate(ix, t.grad(self).cwiseProduct(mask));
  });
}

inline Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  detail::check_shape(start >= 0 && start + count <= x.rows(), "slice_rows");
  Matrix out = x.value().middleRows(start, count);
  const std::size_t ix = x.id;
  const Eigen::Index r = x.rows(), c = x.cols();
  return x.tape->record(std::move(out), x.requires_grad(),
                        [ix, start, count, r, c](Tape& t, std::size_t self) {
                          Matrix g = Matrix::Zero(r, c);
                          g.middleRows(start, count) = t.grad(self);
                          t.accumulate(ix, g);
                        });
}

inline Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  detail::check_shape(start >= 0 && start + count <= x.cols(), "slice_cols");
  Matrix out = x.value().middleCols(start, count);
  const std::size_t ix = x.id;
  const Eigen::Index r = x.rows(), c = x.cols();
  return x.tape->record(std::move(out), x.requires_grad(),
                        [ix, start, count, r, c](Tape& t, std::size_t self) {
                          Matrix g = Matrix::Zero(r, c);
                          g.middleCols(start, count) = t.grad(self);
                          t.accumulate(ix, g);
                        });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape* tape = parts.front().tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool rg = false;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    detail::check_shape(p.cols() == cols, "concat_rows");
    offsets.push_back(rows);
    rows += p.rows();
    rg = rg || p.requires_grad();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k)
    out.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
  return tape->record(std::move(out), rg, [ids, offsets](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.node(ids[k]).requires_grad) continue;
      t.accumulate(ids[k], g.middleRows(offsets[k], t.value(ids[k]).rows()));
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape* tape = parts.front().tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  bool rg = false;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    detail::check_shape(p.rows() == rows, "concat_cols");
    offsets.push_back(cols);
    cols += p.cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k)
    out.middleCols(offsets[k], parts[k].cols()) = parts[k].value();
  return tape->record(std::move(out), rg, [ids, offsets](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.node(ids[k]).requires_grad) continue;
      t.accumulate(ids[k], g.middleCols(offsets[k], t.value(ids[k]).cols()));
    }
  });
}

/// Gather rows of `table` by index (token embedding lookup).
inline Var gather_rows(Var table, std::vector<int> indices) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    detail::check_shape(indices[i] >= 0 && indices[i] < tv.rows(), "gather_rows");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(indices[i]);
  }
  const std::size_t it = table.id;
  const Eigen::Index r = tv.rows(), c = tv.cols();
  return table.tape->record(std::move(out), table.requires_grad(),
                            [it, indices = std::move(indices), r, c](Tape& t, std::size_t self) {
                              const Matrix& g = t.grad(self);
                              Matrix acc = Matrix::Zero(r, c);
                              for (std::size_t i = 0; i < indices.size(); ++i)
                                acc.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
                              t.accumulate(it, acc);
                            });
}

/// Mean over consecutive groups of `group` rows: (B*group x D) -> (B x D).
inline Var group_mean_rows(Var x, Eigen::Index group) {
  detail::check_shape(group > 0 && x.rows() % group == 0, "group_mean_rows");
  const Eigen::Index b = x.rows() / group;
  Matrix out(b, x.cols());
  for (Eigen::Index i = 0; i < b; ++i)
    out.row(i) = x.value().middleRows(i * group, group).colwise().mean();
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix, group, b](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix acc(b * group, g.cols());
    const double inv = 1.0 / static_cast<double>(group);
    for (Eigen::Index i = 0; i < b; ++i)
      acc.middleRows(i * group, group) = (g.row(i) * inv).replicate(group, 1);
    t.accumulate(ix, acc);
  });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::same_tape(x, gamma);
  detail::check_shape(gamma.cols() == x.cols() && beta.cols() == x.cols(), "layer_norm");
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape->record(std::move(out), rg,
                        [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          if (t.node(ig).requires_grad)
                            t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                          if (t.node(ib).requires_grad) t.accumulate(ib, g.colwise().sum());
                          if (t.node(ix).requires_grad) {
                            const auto& gam = t.value(ig);
                            Matrix dxhat = g.array().rowwise() * gam.row(0).array();
                            Matrix dx(g.rows(), g.cols());
                            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                              const double m1 = dxhat.row(i).mean();
                              const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                              dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) *
                                          inv_std(i);
                            }
                            t.accumulate(ix, dx);
                          }
                        });
}

namespace detail {
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

/// tanh approximation of GELU.
inline Var gelu(Var x) {
  constexpr double k = detail::kGeluScale;
  constexpr double c = detail::kGeluCubic;
  const Matrix& xv = x.value();
  Matrix th = (k * (xv.array() + c * xv.array().cube())).tanh().matrix();
  Matrix out = (0.5 * xv.array() * (1.0 + th.array())).matrix();
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [ix, th = std::move(th)](Tape& t, std::size_t self) {
                          constexpr double k = detail::kGeluScale;
                          constexpr double c = detail::kGeluCubic;
                          const auto xa = t.value(ix).array();
                          const auto ta = th.array();
                          Matrix dydx = (0.5 * (1.0 + ta) +
                                         0.5 * xa * (1.0 - ta.square()) * k * (1.0 + 3.0 * c * xa.square()))
                                            .matrix();
                          t.accumulate(ix, t.grad(self).cwiseProduct(dydx));
                        });
}

inline Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix](Tape& t, std::size_t self) {
    Matrix mask = (t.value(ix).array() > 0.0).cast<double>().matrix();
    t.accumulate(ix, t.grad(self).cwiseProduct(mask));
  });
}

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Var softmax_rows(Var x) {
  Matrix out = softmax_rows_value(x.value());
  const std::size_t ix = x.id;
  return x.tape->record(out, x.requires_grad(), [ix, y = out](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(g.colwise() - dots);
    t.accumulate(ix, dx);
  });
}

inline Var l2_normalize_rows(Var x, double eps = 1e-12) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm().cwiseMax(eps);
  Matrix out = xv.array().colwise() / norms.array();
  const std::size_t ix = x.id;
  return x.tape->record(out, x.requires_grad(),
                        [ix, y = out, norms = std::move(norms)](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
                          Matrix dx = g - (y.array().colwise() * dots.array()).matrix();
                          dx.array().colwise() /= norms.array();
                          t.accumulate(ix, dx);
                        });
}

/// Mean softmax cross-entropy of row logits against integer labels; 1x1.
inline Var cross_entropy(Var logits, std::vector<int> labels) {
  const Matrix& z = logits.value();
  detail::check_shape(static_cast<Eigen::Index>(labels.size()) == z.rows() && z.rows() > 0,
                      "cross_entropy");
  Matrix probs = softmax_rows_value(z);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw std::out_of_range("cross_entropy: label out of range");
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    loss += lse - z(i, y);
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  const std::size_t il = logits.id;
  return logits.tape->record(std::move(out), logits.requires_grad(),
                             [il, probs = std::move(probs), labels = std::move(labels), n](
                                 Tape& t, std::size_t self) {
                               Matrix g = probs;
                               for (std::size_t i = 0; i < labels.size(); ++i)
                                 g(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
                               t.accumulate(il, g * (t.grad(self)(0, 0) / n));
                             });
}

/// Training-mode batch normalisation over rows. Returns the normalised
/// output; batch statistics are written to `mean_out` / `var_out`.
inline Var batch_norm_train(Var x, Var gamma, Var beta, double eps, RowVector& mean_out,
                            RowVector& var_out) {
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows();
  detail::check_shape(n > 0 && gamma.cols() == xv.cols(), "batch_norm");
  mean_out = xv.colwise().mean();
  Matrix centered = xv.rowwise() - mean_out;
  var_out = centered.array().square().colwise().mean();
  RowVector inv_std = (var_out.array() + eps).rsqrt().matrix();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape->record(std::move(out), rg,
                        [ix, ig, ib, xhat = std::move(xhat), inv_std](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad(self);
                          const double nn = static_cast<double>(g.rows());
                          if (t.node(ig).requires_grad)
                            t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                          if (t.node(ib).requires_grad) t.accumulate(ib, g.colwise().sum());
                          if (t.node(ix).requires_grad) {
                            Matrix dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                            RowVector s1 = dxhat.colwise().sum();
                            RowVector s2 = dxhat.cwiseProduct(xhat).colwise().sum();
                            Matrix dx = ((dxhat * nn).rowwise() - s1 -
                                         (xhat.array().rowwise() * s2.array()).matrix())
                                            .array()
                                            .rowwise() *
                                        (inv_std.array() / nn);
                            t.accumulate(ix, dx);
                          }
                        });
}

/// Scaled dot-product attention over B consecutive sequences of `seq_len`
/// rows each, with the D columns split into `heads` equal slices.
inline Var multi_head_attention(Var q, Var k, Var v, Eigen::Index seq_len, int heads) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  const Eigen::Index n = q.rows(), d = q.cols();
  detail::check_shape(k.rows() == n && v.rows() == n && k.cols() == d && v.cols() == d &&
                          seq_len > 0 && n % seq_len == 0 && heads > 0 && d % heads == 0,
                      "multi_head_attention");
  const Eigen::Index b = n / seq_len;
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  Matrix out(n, d);
  std::vector<Matrix> probs(static_cast<std::size_t>(b * heads));
  for (Eigen::Index s = 0; s < b; ++s) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = qv.block(s * seq_len, h * dh, seq_len, dh);
      const auto kb = kv.block(s * seq_len, h * dh, seq_len, dh);
      const auto vb = vv.block(s * seq_len, h * dh, seq_len, dh);
      Matrix scores = (qb * kb.transpose()) * inv_sqrt;
      Matrix p = softmax_rows_value(scores);
      out.block(s * seq_len, h * dh, seq_len, dh).noalias() = p * vb;
      probs[static_cast<std::size_t>(s * heads + h)] = std::move(p);
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return q.tape->record(
      std::move(out), rg,
      [iq, ik, iv, b, heads, seq_len, dh, inv_sqrt, probs = std::move(probs)](Tape& t,
                                                                              std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& qv = t.value(iq);
        const Matrix& kv = t.value(ik);
        const Matrix& vv = t.value(iv);
        const Eigen::Index n = g.rows(), d = g.cols();
        Matrix dq = Matrix::Zero(n, d), dk = Matrix::Zero(n, d), dv = Matrix::Zero(n, d);
        for (Eigen::Index s = 0; s < b; ++s) {
          for (int h = 0; h < heads; ++h) {
            const Matrix& p = probs[static_cast<std::size_t>(s * heads + h)];
            const auto go = g.block(s * seq_len, h * dh, seq_len, dh);
            const auto qb = qv.block(s * seq_len, h * dh, seq_len, dh);
            const auto kb = kv.block(s * seq_len, h * dh, seq_len, dh);
            const auto vb = vv.block(s * seq_len, h * dh, seq_len, dh);
            dv.block(s * seq_len, h * dh, seq_len, dh).noalias() = p.transpose() * go;
            Matrix dp = go * vb.transpose();
            Eigen::VectorXd dots = dp.cwiseProduct(p).rowwise().sum();
            Matrix ds = p.cwiseProduct(dp.colwise() - dots) * inv_sqrt;
            dq.block(s * seq_len, h * dh, seq_len, dh).noalias() = ds * kb;
            dk.block(s * seq_len, h * dh, seq_len, dh).noalias() = ds.transpose() * qb;
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

inline double scalar(Var v) { return v.value()(0, 0); }

}  // namespace fsvlm::ag
