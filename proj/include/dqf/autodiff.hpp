#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <functional>
#include <vector>

#include "dqf/core.hpp"
#include "dqf/grid.hpp"

// Reverse-mode autodiff over Eigen double matrices. The tape is rebuilt per
// forward pass; parameters enter as leaves and collect gradients on backward().
namespace dqf::ad {

using dqf::Matrix;
using dqf::SparseMat;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&)> backward;  // null for leaves
  };

  Var leaf(Matrix v) {
    nodes_.push_back({std::move(v), {}, nullptr});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }
  Var push(Matrix v, std::function<void(Tape&)> bw) {
    nodes_.push_back({std::move(v), {}, std::move(bw)});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& val(Var v) const { return nodes_[v.id].value; }
  Matrix& grad(Var v) { return grad(v.id); }
  Matrix& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var root) {
    if (val(root).size() != 1) throw ContractError("backward root must be scalar");
    if (!val(root).allFinite()) throw NumericError("backward on non-finite scalar");
    grad(root)(0, 0) += 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline Var constant(Tape& t, Matrix v) { return t.leaf(std::move(v)); }

namespace detail {
inline void accum(Tape& t, int id, const Matrix& g) { t.grad(id) += g; }
}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(t.val(a) + t.val(b), [ia = a.id, ib = b.id, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia) += g;
    t.grad(ib) += g;
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(t.val(a) - t.val(b), [ia = a.id, ib = b.id, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia) += g;
    t.grad(ib) -= g;
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.push(t.val(a) * s, [ia = a.id, s, io = int(t.size())](Tape& t) {
    t.grad(ia) += t.grad(io) * s;
  });
}

inline Var add_const(Var a, const Matrix& c) {
  Tape& t = *a.tape;
  return t.push(t.val(a) + c, [ia = a.id, io = int(t.size())](Tape& t) {
    t.grad(ia) += t.grad(io);
  });
}

inline Var hadamard(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(t.val(a).cwiseProduct(t.val(b)),
                [ia = a.id, ib = b.id, io = int(t.size())](Tape& t) {
                  const Matrix& g = t.grad(io);
                  t.grad(ia) += g.cwiseProduct(t.val({&t, ib}));
                  t.grad(ib) += g.cwiseProduct(t.val({&t, ia}));
                });
}

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(t.val(a) * t.val(b), [ia = a.id, ib = b.id, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia).noalias() += g * t.val({&t, ib}).transpose();
    t.grad(ib).noalias() += t.val({&t, ia}).transpose() * g;
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.push(t.val(a).transpose(), [ia = a.id, io = int(t.size())](Tape& t) {
    t.grad(ia) += t.grad(io).transpose();
  });
}

inline Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Matrix y = t.val(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return t.push(std::move(y), [ia = a.id, io = int(t.size())](Tape& t) {
    const Matrix& y = t.val({&t, io});
    t.grad(ia) += t.grad(io).cwiseProduct(y.cwiseProduct(Matrix::Ones(y.rows(), y.cols()) - y));
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  return t.push(t.val(a).cwiseMax(0.0), [ia = a.id, io = int(t.size())](Tape& t) {
    const Matrix& x = t.val({&t, ia});
    t.grad(ia) += t.grad(io).cwiseProduct(
        x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  Matrix s(1, 1);
  s(0, 0) = t.val(a).sum();
  return t.push(std::move(s), [ia = a.id, io = int(t.size())](Tape& t) {
    t.grad(ia).array() += t.grad(io)(0, 0);
  });
}

inline Var mean(Var a) {
  Tape& t = *a.tape;
  double n = static_cast<double>(t.val(a).size());
  Matrix s(1, 1);
  s(0, 0) = t.val(a).sum() / n;
  return t.push(std::move(s), [ia = a.id, n, io = int(t.size())](Tape& t) {
    t.grad(ia).array() += t.grad(io)(0, 0) / n;
  });
}

// softmax over each row, with an optional constant additive mask on the logits
inline Var softmax_rows(Var a, const Matrix* add_mask = nullptr) {
  Tape& t = *a.tape;
  Matrix z = t.val(a);
  if (add_mask) z += *add_mask;
  for (int r = 0; r < z.rows(); ++r) {
    double m = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - m).exp();
    z.row(r) /= z.row(r).sum();
  }
  return t.push(std::move(z), [ia = a.id, io = int(t.size())](Tape& t) {
    const Matrix& y = t.val({&t, io});
    const Matrix& g = t.grad(io);
    Matrix& ga = t.grad(ia);
    for (int r = 0; r < y.rows(); ++r) {
      double dot = g.row(r).dot(y.row(r));
      ga.row(r) += (g.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
    }
  });
}

inline Var gather_rows(Var a, std::vector<int> rows) {
  Tape& t = *a.tape;
  Matrix out(rows.size(), t.val(a).cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = t.val(a).row(rows[i]);
  return t.push(std::move(out),
                [ia = a.id, rows = std::move(rows), io = int(t.size())](Tape& t) {
                  const Matrix& g = t.grad(io);
                  Matrix& ga = t.grad(ia);
                  for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(i);
                });
}

inline Var gather_cols(Var a, std::vector<int> cols) {
  Tape& t = *a.tape;
  Matrix out(t.val(a).rows(), cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(i) = t.val(a).col(cols[i]);
  return t.push(std::move(out),
                [ia = a.id, cols = std::move(cols), io = int(t.size())](Tape& t) {
                  const Matrix& g = t.grad(io);
                  Matrix& ga = t.grad(ia);
                  for (std::size_t i = 0; i < cols.size(); ++i) ga.col(cols[i]) += g.col(i);
                });
}

// single entries (row, col) gathered into a 1 x n row vector
inline Var gather_entries(Var a, std::vector<std::pair<int, int>> pos) {
  Tape& t = *a.tape;
  Matrix out(1, pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) out(0, i) = t.val(a)(pos[i].first, pos[i].second);
  return t.push(std::move(out),
                [ia = a.id, pos = std::move(pos), io = int(t.size())](Tape& t) {
                  const Matrix& g = t.grad(io);
                  Matrix& ga = t.grad(ia);
                  for (std::size_t i = 0; i < pos.size(); ++i)
                    ga(pos[i].first, pos[i].second) += g(0, i);
                });
}

inline Var slice_rows(Var a, int start, int len) {
  Tape& t = *a.tape;
  return t.push(t.val(a).middleRows(start, len),
                [ia = a.id, start, len, io = int(t.size())](Tape& t) {
                  t.grad(ia).middleRows(start, len) += t.grad(io);
                });
}

inline Var concat_rows(Var a, Var b) {
  Tape& t = *a.tape;
  if (t.val(a).rows() == 0) return b;
  if (t.val(b).rows() == 0) return a;
  Matrix out(t.val(a).rows() + t.val(b).rows(), t.val(a).cols());
  out << t.val(a), t.val(b);
  int na = static_cast<int>(t.val(a).rows());
  return t.push(std::move(out), [ia = a.id, ib = b.id, na, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia) += g.topRows(na);
    t.grad(ib) += g.bottomRows(g.rows() - na);
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out(t.val(a).rows(), t.val(a).cols() + t.val(b).cols());
  out << t.val(a), t.val(b);
  int na = static_cast<int>(t.val(a).cols());
  return t.push(std::move(out), [ia = a.id, ib = b.id, na, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia) += g.leftCols(na);
    t.grad(ib) += g.rightCols(g.cols() - na);
  });
}

// out = M * a with a fixed (non-learned) sparse operator
inline Var fixed_linear(const SparseMat& M, Var a) {
  Tape& t = *a.tape;
  return t.push(M * t.val(a), [ia = a.id, M, io = int(t.size())](Tape& t) {
    t.grad(ia) += M.transpose() * t.grad(io);
  });
}

// per-row max over index groups; offsets has n_groups+1 entries into indices
inline Var group_max(Var a, std::vector<int> offsets, std::vector<int> indices) {
  Tape& t = *a.tape;
  const Matrix& x = t.val(a);
  const int n_groups = static_cast<int>(offsets.size()) - 1;
  const int cols = static_cast<int>(x.cols());
  Matrix out(n_groups, cols);
  std::vector<int> argmax(static_cast<std::size_t>(n_groups) * cols);
  for (int g = 0; g < n_groups; ++g) {
    if (offsets[g] == offsets[g + 1]) throw ContractError("group_max: empty group");
    out.row(g) = x.row(indices[offsets[g]]);
    for (int c = 0; c < cols; ++c) argmax[static_cast<std::size_t>(g) * cols + c] =
        indices[offsets[g]];
    for (int j = offsets[g] + 1; j < offsets[g + 1]; ++j) {
      int r = indices[j];
      for (int c = 0; c < cols; ++c) {
        if (x(r, c) > out(g, c)) {
          out(g, c) = x(r, c);
          argmax[static_cast<std::size_t>(g) * cols + c] = r;
        }
      }
    }
  }
  return t.push(std::move(out),
                [ia = a.id, argmax = std::move(argmax), cols, io = int(t.size())](Tape& t) {
                  const Matrix& g = t.grad(io);
                  Matrix& ga = t.grad(ia);
                  for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < cols; ++c)
                      ga(argmax[static_cast<std::size_t>(r) * cols + c], c) += g(r, c);
                });
}

// scatter voxel features (N_v x C) into a dense BEV matrix (C*D x H*W)
inline Var scatter_bev(Var a, const dqf::BevLayout& lay) {
  Tape& t = *a.tape;
  const Matrix& x = t.val(a);
  const int C = static_cast<int>(x.cols());
  Matrix out = Matrix::Zero(lay.channels, lay.height * lay.width);
  for (std::size_t r = 0; r < lay.slots.size(); ++r)
    out.block(lay.slots[r].first, lay.slots[r].second, C, 1) =
        x.row(static_cast<int>(r)).transpose();
  return t.push(std::move(out), [ia = a.id, slots = lay.slots, C, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < slots.size(); ++r)
      ga.row(static_cast<int>(r)) += g.block(slots[r].first, slots[r].second, C, 1).transpose();
  });
}

// im2col for 3x3 conv on a (C x H*W) map: src maps (tap, pixel) -> source pixel
// or -1 for zero padding; output is (9C x H*W), tap-major rows.
inline Var im2col3x3(Var a, const std::vector<int>& src) {
  Tape& t = *a.tape;
  const Matrix& x = t.val(a);
  const int C = static_cast<int>(x.rows());
  const int P = static_cast<int>(x.cols());
  Matrix out = Matrix::Zero(9 * C, P);
  for (int tap = 0; tap < 9; ++tap)
    for (int p = 0; p < P; ++p) {
      int s = src[static_cast<std::size_t>(tap) * P + p];
      if (s >= 0) out.block(tap * C, p, C, 1) = x.col(s);
    }
  return t.push(std::move(out), [ia = a.id, src, C, P, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    Matrix& ga = t.grad(ia);
    for (int tap = 0; tap < 9; ++tap)
      for (int p = 0; p < P; ++p) {
        int s = src[static_cast<std::size_t>(tap) * P + p];
        if (s >= 0) ga.col(s) += g.block(tap * C, p, C, 1);
      }
  });
}

// rowwise mean -> column vector (used by the channel gate)
inline Var rowwise_mean(Var a) {
  Tape& t = *a.tape;
  double n = static_cast<double>(t.val(a).cols());
  return t.push(t.val(a).rowwise().mean(), [ia = a.id, n, io = int(t.size())](Tape& t) {
    t.grad(ia) += t.grad(io) * Matrix::Ones(1, static_cast<int>(n)) / n;
  });
}

// out(i,j) = a(i,j) * g(i,0)
inline Var mul_col_broadcast(Var a, Var g) {
  Tape& t = *a.tape;
  Matrix out = t.val(a).array().colwise() * t.val(g).col(0).array();
  return t.push(std::move(out), [ia = a.id, ig = g.id, io = int(t.size())](Tape& t) {
    const Matrix& go = t.grad(io);
    const Matrix& av = t.val({&t, ia});
    const Matrix& gv = t.val({&t, ig});
    t.grad(ia) += (go.array().colwise() * gv.col(0).array()).matrix();
    t.grad(ig).col(0) += go.cwiseProduct(av).rowwise().sum();
  });
}

// out(i,j) = a(i,j) * g(0,j)
inline Var mul_row_broadcast(Var a, Var g) {
  Tape& t = *a.tape;
  Matrix out = t.val(a).array().rowwise() * t.val(g).row(0).array();
  return t.push(std::move(out), [ia = a.id, ig = g.id, io = int(t.size())](Tape& t) {
    const Matrix& go = t.grad(io);
    const Matrix& av = t.val({&t, ia});
    const Matrix& gv = t.val({&t, ig});
    t.grad(ia) += (go.array().rowwise() * gv.row(0).array()).matrix();
    t.grad(ig).row(0) += go.cwiseProduct(av).colwise().sum();
  });
}

// out(i,j) = a(i,j) + b(0,j)  (bias over columns, rows are samples)
inline Var add_row_broadcast(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = t.val(a).array().rowwise() + t.val(b).row(0).array();
  return t.push(std::move(out), [ia = a.id, ib = b.id, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia) += g;
    t.grad(ib).row(0) += g.colwise().sum();
  });
}

// out(i,j) = a(i,j) + b(i,0)  (per-channel bias on C x HW maps)
inline Var add_col_broadcast(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = t.val(a).array().colwise() + t.val(b).col(0).array();
  return t.push(std::move(out), [ia = a.id, ib = b.id, io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    t.grad(ia) += g;
    t.grad(ib).col(0) += g.rowwise().sum();
  });
}

// rowwise layer normalization with learned gain/bias (1 x C each)
inline Var layernorm_rows(Var a, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = *a.tape;
  const Matrix& x = t.val(a);
  const int C = static_cast<int>(x.cols());
  Matrix xhat(x.rows(), C);
  Eigen::VectorXd inv_std(x.rows());
  for (int r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * t.val(gamma).row(0).array()).rowwise() +
               t.val(beta).row(0).array();
  return t.push(std::move(out), [ia = a.id, ig = gamma.id, ibt = beta.id,
                                 xhat = std::move(xhat), inv_std = std::move(inv_std), C,
                                 io = int(t.size())](Tape& t) {
    const Matrix& g = t.grad(io);
    const Matrix& gam = t.val({&t, ig});
    Matrix& ga = t.grad(ia);
    t.grad(ig).row(0) += g.cwiseProduct(xhat).colwise().sum();
    t.grad(ibt).row(0) += g.colwise().sum();
    for (int r = 0; r < g.rows(); ++r) {
      Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gam.row(0));
      double m1 = dxhat.mean();
      double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
      ga.row(r) += inv_std(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
    }
  });
}

// mean softmax cross-entropy against integer labels
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Matrix& z = t.val(logits);
  if (static_cast<std::size_t>(z.rows()) != labels.size())
    throw ContractError("softmax_cross_entropy: label count mismatch");
  Matrix probs(z.rows(), z.cols());
  double loss = 0;
  for (int r = 0; r < z.rows(); ++r) {
    double m = z.row(r).maxCoeff();
    Eigen::RowVectorXd e = (z.row(r).array() - m).exp();
    double s = e.sum();
    probs.row(r) = e / s;
    loss -= z(r, labels[r]) - m - std::log(s);
  }
  loss /= static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss;
  return t.push(std::move(out), [il = logits.id, probs = std::move(probs), labels,
                                 io = int(t.size())](Tape& t) {
    double g = t.grad(io)(0, 0) / static_cast<double>(probs.rows());
    Matrix& gl = t.grad(il);
    gl += g * probs;
    for (int r = 0; r < probs.rows(); ++r) gl(r, labels[r]) -= g;
  });
}

// mean binary cross-entropy from logits against soft targets in [0,1]
inline Var bce_logits_mean(Var logits, const Matrix& y) {
  Tape& t = *logits.tape;
  const Matrix& z = t.val(logits);
  if (z.rows() != y.rows() || z.cols() != y.cols())
    throw ContractError("bce_logits_mean: shape mismatch");
  double n = static_cast<double>(z.size()), loss = 0;
  for (int r = 0; r < z.rows(); ++r)
    for (int c = 0; c < z.cols(); ++c) {
      double zz = z(r, c);
      loss += std::max(zz, 0.0) - zz * y(r, c) + std::log1p(std::exp(-std::abs(zz)));
    }
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  return t.push(std::move(out), [il = logits.id, y, n, io = int(t.size())](Tape& t) {
    double g = t.grad(io)(0, 0) / n;
    const Matrix& z = t.val({&t, il});
    t.grad(il) += g * (z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }) - y);
  });
}

// dice loss 1 - 2*sum(p*y)/(sum(p)+sum(y)) with p = sigmoid(logits)
inline Var dice_loss_logits(Var logits, const Matrix& y) {
  Tape& t = *logits.tape;
  const Matrix& z = t.val(logits);
  Matrix p = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  double inter = p.cwiseProduct(y).sum();
  double denom = p.sum() + y.sum();
  double dice = (denom > 0) ? 1.0 - 2.0 * inter / denom : 0.0;
  Matrix out(1, 1);
  out(0, 0) = dice;
  return t.push(std::move(out), [il = logits.id, p = std::move(p), y, inter, denom,
                                 io = int(t.size())](Tape& t) {
    if (denom <= 0) return;
    double g = t.grad(io)(0, 0);
    // d/dp_i [1 - 2 I / S] = -2 (y_i S - I) / S^2, then chain through sigmoid
    Matrix dp = (-2.0 * (y.array() * denom - inter) / (denom * denom)).matrix();
    t.grad(il) += g * dp.cwiseProduct(p.cwiseProduct(
        (Matrix::Ones(p.rows(), p.cols()) - p)));
  });
}

// penalty-reduced focal loss on probabilities against Gaussian-valued targets;
// cells with y == 1 are positives. Returns the elementwise sum.
inline Var focal_loss_sum(Var probs, const Matrix& y, double alpha = 2.0, double beta = 4.0,
                          double clamp = 1e-6) {
  Tape& t = *probs.tape;
  const Matrix& praw = t.val(probs);
  if (praw.rows() != y.rows() || praw.cols() != y.cols())
    throw ContractError("focal_loss_sum: shape mismatch");
  double loss = 0;
  Matrix dp = Matrix::Zero(praw.rows(), praw.cols());
  for (int r = 0; r < praw.rows(); ++r)
    for (int c = 0; c < praw.cols(); ++c) {
      double p = std::clamp(praw(r, c), clamp, 1.0 - clamp);
      bool clamped = praw(r, c) < clamp || praw(r, c) > 1.0 - clamp;
      if (y(r, c) == 1.0) {
        loss += std::pow(1 - p, alpha) * (-std::log(p));
        if (!clamped)
          dp(r, c) = alpha * std::pow(1 - p, alpha - 1) * std::log(p) -
                     std::pow(1 - p, alpha) / p;
      } else {
        double w = std::pow(1 - y(r, c), beta);
        loss += w * std::pow(p, alpha) * (-std::log(1 - p));
        if (!clamped)
          dp(r, c) = w * (alpha * std::pow(p, alpha - 1) * (-std::log(1 - p)) +
                          std::pow(p, alpha) / (1 - p));
      }
    }
  Matrix out(1, 1);
  out(0, 0) = loss;
  return t.push(std::move(out), [ip = probs.id, dp = std::move(dp), io = int(t.size())](Tape& t) {
    t.grad(ip) += t.grad(io)(0, 0) * dp;
  });
}

}  // namespace dqf::ad
