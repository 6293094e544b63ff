#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix: feature maps are stored as
// channels x (H*W), token sequences as tokens x channels.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "protoformer/error.hpp"

namespace protoformer {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ag {

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Mat&)> backward_fn;

  void accumulate(const Mat& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const { return node_->value(0, 0); }

  void zero_grad() { node_->grad.resize(0, 0); }
  Mat& mutable_grad() { return node_->grad; }
  /// Gradient, or zeros when nothing flowed into this leaf.
  Mat grad_or_zero() const {
    if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
    return node_->grad;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var param(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

inline Var scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

namespace detail {

inline Var make(Mat value, std::vector<Var> inputs, std::function<void(const Mat&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const auto& v : inputs) n->parents.push_back(v.node());
      n->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(n));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace detail

/// Runs reverse accumulation from a 1x1 root.
inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be scalar");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  auto an = a.node(), bn = b.node();
  Mat out = a.value() * b.value();
  return detail::make(std::move(out), {a, b}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->accumulate(g * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * g);
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  auto an = a.node(), bn = b.node();
  Mat out = a.value() * b.value().transpose();
  return detail::make(std::move(out), {a, b}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->accumulate(g * bn->value);
    if (bn->requires_grad) bn->accumulate(g.transpose() * an->value);
  });
}

inline Var transpose(const Var& a) {
  auto an = a.node();
  Mat out = a.value().transpose();
  return detail::make(std::move(out), {a}, [an](const Mat& g) { an->accumulate(g.transpose()); });
}

// ---------------------------------------------------------------------------
// Element-wise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  Mat out = a.value() + b.value();
  return detail::make(std::move(out), {a, b}, [an, bn](const Mat& g) {
    an->accumulate(g);
    bn->accumulate(g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  Mat out = a.value() - b.value();
  return detail::make(std::move(out), {a, b}, [an, bn](const Mat& g) {
    an->accumulate(g);
    bn->accumulate(-g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  Mat out = a.value().cwiseProduct(b.value());
  return detail::make(std::move(out), {a, b}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->accumulate(g.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(g.cwiseProduct(an->value));
  });
}

inline Var scale(const Var& a, double s) {
  auto an = a.node();
  Mat out = a.value() * s;
  return detail::make(std::move(out), {a}, [an, s](const Mat& g) { an->accumulate(g * s); });
}

/// Multiplies every entry of `a` by the 1x1 variable `s`.
inline Var scale_by(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scale_by: scale must be 1x1");
  auto an = a.node(), sn = s.node();
  Mat out = a.value() * s.item();
  return detail::make(std::move(out), {a, s}, [an, sn](const Mat& g) {
    if (an->requires_grad) an->accumulate(g * sn->value(0, 0));
    if (sn->requires_grad) sn->accumulate(Mat::Constant(1, 1, g.cwiseProduct(an->value).sum()));
  });
}

inline Var mul_const(const Var& a, const Mat& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols()) throw ShapeError("mul_const: shape mismatch");
  auto an = a.node();
  Mat out = a.value().cwiseProduct(m);
  return detail::make(std::move(out), {a}, [an, m](const Mat& g) { an->accumulate(g.cwiseProduct(m)); });
}

inline Var add_const(const Var& a, const Mat& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols()) throw ShapeError("add_const: shape mismatch");
  auto an = a.node();
  Mat out = a.value() + m;
  return detail::make(std::move(out), {a}, [an](const Mat& g) { an->accumulate(g); });
}

/// a (r x c) + row (1 x c), broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  auto an = a.node(), rn = row.node();
  Mat out = a.value().rowwise() + row.value().row(0);
  return detail::make(std::move(out), {a, row}, [an, rn](const Mat& g) {
    an->accumulate(g);
    if (rn->requires_grad) rn->accumulate(g.colwise().sum());
  });
}

/// a (r x c) + col (r x 1), broadcast over columns.
inline Var add_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("add_col: bias shape mismatch");
  auto an = a.node(), cn = col.node();
  Mat out = a.value().colwise() + col.value().col(0);
  return detail::make(std::move(out), {a, col}, [an, cn](const Mat& g) {
    an->accumulate(g);
    if (cn->requires_grad) cn->accumulate(g.rowwise().sum());
  });
}

/// a (r x c) * row (1 x c), broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: shape mismatch");
  auto an = a.node(), rn = row.node();
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return detail::make(std::move(out), {a, row}, [an, rn](const Mat& g) {
    if (an->requires_grad) {
      Mat ga = g.array().rowwise() * rn->value.row(0).array();
      an->accumulate(ga);
    }
    if (rn->requires_grad) rn->accumulate(g.cwiseProduct(an->value).colwise().sum());
  });
}

inline Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  Mat out = terms[0].value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    detail::check_same_shape(terms[0], terms[i], "add_n");
    out += terms[i].value();
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& t : terms) nodes.push_back(t.node());
  return detail::make(std::move(out), std::vector<Var>(terms.begin(), terms.end()), [nodes](const Mat& g) {
    for (const auto& n : nodes) n->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Non-linearities

inline Var relu(const Var& a) {
  auto an = a.node();
  Mat out = a.value().cwiseMax(0.0);
  return detail::make(std::move(out), {a}, [an](const Mat& g) {
    Mat ga = (an->value.array() > 0.0).select(g, 0.0);
    an->accumulate(ga);
  });
}

inline Var sigmoid(const Var& a) {
  Mat out = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  auto an = a.node();
  Mat y = out;
  return detail::make(std::move(out), {a}, [an, y](const Mat& g) {
    Mat ga = g.array() * y.array() * (1.0 - y.array());
    an->accumulate(ga);
  });
}

inline Var abs(const Var& a) {
  auto an = a.node();
  Mat out = a.value().cwiseAbs();
  return detail::make(std::move(out), {a}, [an](const Mat& g) {
    Mat ga = g.array() * an->value.array().sign();
    an->accumulate(ga);
  });
}

inline Mat softmax_rows_value(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

inline Var softmax_rows(const Var& a) {
  Mat y = softmax_rows_value(a.value());
  auto an = a.node();
  Mat yc = y;
  return detail::make(std::move(y), {a}, [an, yc](const Mat& g) {
    Eigen::VectorXd dot = g.cwiseProduct(yc).rowwise().sum();
    Mat ga = yc.array() * (g.colwise() - dot).array();
    an->accumulate(ga);
  });
}

/// Row-wise layer normalization with affine gamma/beta (both 1 x c).
inline Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Eigen::Index c = a.cols();
  if (gamma.cols() != c || beta.cols() != c) throw ShapeError("layer_norm: affine shape mismatch");
  Mat xhat(a.rows(), c);
  Eigen::VectorXd inv_std(a.rows());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mu = a.value().row(r).mean();
    const double var = (a.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (a.value().row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  auto an = a.node(), gn = gamma.node(), bn = beta.node();
  return detail::make(std::move(out), {a, gamma, beta}, [an, gn, bn, xhat, inv_std](const Mat& g) {
    if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
    if (bn->requires_grad) bn->accumulate(g.colwise().sum());
    if (an->requires_grad) {
      Mat dxhat = g.array().rowwise() * gn->value.row(0).array();
      Mat ga(dxhat.rows(), dxhat.cols());
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        const double m1 = dxhat.row(r).mean();
        const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        ga.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      an->accumulate(ga);
    }
  });
}

/// Divides each row by (its L2 norm + eps).
inline Var row_l2_normalize(const Var& a, double eps) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= (norms(r) + eps);
  auto an = a.node();
  return detail::make(std::move(out), {a}, [an, norms, eps](const Mat& g) {
    const Mat& x = an->value;
    Mat ga(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double n = norms(r);
      const double d = n + eps;
      ga.row(r) = g.row(r) / d;
      if (n > 0.0) ga.row(r) -= x.row(r) * (x.row(r).dot(g.row(r)) / (n * d * d));
    }
    an->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum_all(const Var& a) {
  auto an = a.node();
  const auto r = a.rows(), c = a.cols();
  return detail::make(Mat::Constant(1, 1, a.value().sum()), {a},
                      [an, r, c](const Mat& g) { an->accumulate(Mat::Constant(r, c, g(0, 0))); });
}

inline Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean_all: empty input");
  return scale(sum_all(a), 1.0 / n);
}

/// Column means: r x c -> 1 x c.
inline Var mean_rows(const Var& a) {
  auto an = a.node();
  const auto r = a.rows();
  Mat out = a.value().colwise().mean();
  return detail::make(std::move(out), {a}, [an, r](const Mat& g) {
    Mat ga = g.replicate(r, 1) / static_cast<double>(r);
    an->accumulate(ga);
  });
}

/// Weighted mean cross-entropy over rows of `logits`; labels index columns.
inline Var cross_entropy(const Var& logits, std::span<const int> labels, std::span<const double> row_weights) {
  const Eigen::Index n = logits.rows(), c = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n || static_cast<Eigen::Index>(row_weights.size()) != n) {
    throw ShapeError("cross_entropy: label count mismatch");
  }
  Mat p = softmax_rows_value(logits.value());
  double total = 0.0, wsum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= c) throw ShapeError("cross_entropy: label out of range");
    const double m = logits.value().row(i).maxCoeff();
    const double lse = m + std::log((logits.value().row(i).array() - m).exp().sum());
    total += row_weights[i] * (lse - logits.value()(i, y));
    wsum += row_weights[i];
  }
  if (wsum <= 0.0) throw DegenerateError("cross_entropy: zero total weight");
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<double> ws(row_weights.begin(), row_weights.end());
  auto ln = logits.node();
  return detail::make(Mat::Constant(1, 1, total / wsum), {logits}, [ln, p, ys, ws, wsum](const Mat& g) {
    Mat ga = p;
    for (Eigen::Index i = 0; i < ga.rows(); ++i) {
      ga(i, ys[i]) -= 1.0;
      ga.row(i) *= ws[i] * g(0, 0) / wsum;
    }
    ln->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const Eigen::Index r = parts[0].rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
  }
  Mat out(r, c);
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  return detail::make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [nodes, offsets](const Mat& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) nodes[i]->accumulate(g.middleCols(offsets[i], nodes[i]->value.cols()));
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const Eigen::Index c = parts[0].cols();
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  Mat out(r, c);
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.rows();
  }
  return detail::make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [nodes, offsets](const Mat& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) nodes[i]->accumulate(g.middleRows(offsets[i], nodes[i]->value.rows()));
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  auto an = a.node();
  Mat out = a.value().middleCols(start, count);
  return detail::make(std::move(out), {a}, [an, start, count](const Mat& g) {
    Mat ga = Mat::Zero(an->value.rows(), an->value.cols());
    ga.middleCols(start, count) = g;
    an->accumulate(ga);
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  auto an = a.node();
  Mat out = a.value().middleRows(start, count);
  return detail::make(std::move(out), {a}, [an, start, count](const Mat& g) {
    Mat ga = Mat::Zero(an->value.rows(), an->value.cols());
    ga.middleRows(start, count) = g;
    an->accumulate(ga);
  });
}

/// Picks entry (r, c) as a 1x1 variable.
inline Var element(const Var& a, Eigen::Index r, Eigen::Index c) {
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw ShapeError("element: out of range");
  auto an = a.node();
  return detail::make(Mat::Constant(1, 1, a.value()(r, c)), {a}, [an, r, c](const Mat& g) {
    Mat ga = Mat::Zero(an->value.rows(), an->value.cols());
    ga(r, c) = g(0, 0);
    an->accumulate(ga);
  });
}

/// out.row(i) = a.row(indices[i]); repeated indices accumulate gradient.
inline Var gather_rows(const Var& a, std::span<const int> indices) {
  Mat out(static_cast<Eigen::Index>(indices.size()), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  auto an = a.node();
  return detail::make(std::move(out), {a}, [an, idx](const Mat& g) {
    Mat ga = Mat::Zero(an->value.rows(), an->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    an->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// Convolution on channel-major feature maps (C x H*W).

struct ConvGeometry {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  int out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

inline Mat im2col(const Mat& x, const ConvGeometry& g) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(g.in_channels) * k * k, static_cast<Eigen::Index>(ho) * wo);
  for (int c = 0; c < g.in_channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ki) * k + kj;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kj;
            if (ix < 0 || ix >= g.width) continue;
            cols(row, static_cast<Eigen::Index>(oy) * wo + ox) = x(c, static_cast<Eigen::Index>(iy) * g.width + ix);
          }
        }
      }
    }
  }
  return cols;
}

inline Mat col2im(const Mat& cols, const ConvGeometry& g) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  Mat x = Mat::Zero(g.in_channels, static_cast<Eigen::Index>(g.height) * g.width);
  for (int c = 0; c < g.in_channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ki) * k + kj;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kj;
            if (ix < 0 || ix >= g.width) continue;
            x(c, static_cast<Eigen::Index>(iy) * g.width + ix) += cols(row, static_cast<Eigen::Index>(oy) * wo + ox);
          }
        }
      }
    }
  }
  return x;
}

/// weight: out_channels x (in_channels * kernel * kernel). No bias.
inline Var conv2d(const Var& x, const Var& weight, const ConvGeometry& geom) {
  if (x.rows() != geom.in_channels || x.cols() != static_cast<Eigen::Index>(geom.height) * geom.width) {
    throw ShapeError("conv2d: input is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     ", expected " + std::to_string(geom.in_channels) + "x" +
                     std::to_string(geom.height * geom.width));
  }
  if (weight.cols() != static_cast<Eigen::Index>(geom.in_channels) * geom.kernel * geom.kernel) {
    throw ShapeError("conv2d: kernel does not match input channels");
  }
  if (geom.kernel == 1 && geom.stride == 1 && geom.padding == 0) return matmul(weight, x);
  Mat cols = im2col(x.value(), geom);
  Mat out = weight.value() * cols;
  auto xn = x.node(), wn = weight.node();
  return detail::make(std::move(out), {x, weight}, [xn, wn, cols, geom](const Mat& g) {
    if (wn->requires_grad) wn->accumulate(g * cols.transpose());
    if (xn->requires_grad) xn->accumulate(col2im(wn->value.transpose() * g, geom));
  });
}

}  // namespace ag
}  // namespace protoformer
