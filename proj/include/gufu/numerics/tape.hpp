#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gufu/error.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/params.hpp"
#include "gufu/numerics/rng.hpp"

namespace gufu {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode gradient tape over a fixed set of matrix primitives.
///
/// Build the loss by calling the primitive methods, then call backward() on a
/// 1x1 result. Gradients of parameter leaves are added into the owning
/// ParamSet's accumulators. A tape is single-use and not copyable.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.size() != 1) throw DimensionError("Tape::scalar on " + m.shape_string());
    return m.values()[0];
  }

  /// Gradient accumulated at v by the last backward() (zero if none reached it).
  Matrix gradient(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

  Var constant(Matrix m) { return push(std::move(m), false, nullptr); }

  /// Trainable leaf bound to params.at(name).
  Var param(ParamSet& params, const std::string& name) {
    ParamEntry* entry = &params.at(name);
    Var v = push(entry->value, true, nullptr);
    leaves_.emplace_back(v.id, entry);
    return v;
  }

  /// Leaf whose gradient is tracked but not written anywhere (for checks).
  Var variable(Matrix m) { return push(std::move(m), true, nullptr); }

  Var matmul(Var a, Var b) {
    Matrix out = gufu::matmul(value(a), value(b));
    return push(std::move(out), needs(a, b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a, gufu::matmul(g, transpose(value(b))));
      if (needs(b)) accumulate(b, gufu::matmul(transpose(value(a)), g));
    });
  }

  Var add(Var a, Var b) {
    value(a).require_same(value(b), "Tape::add");
    Matrix out = value(a) + value(b);
    return push(std::move(out), needs(a, b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    value(a).require_same(value(b), "Tape::sub");
    Matrix out = value(a) - value(b);
    return push(std::move(out), needs(a, b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g * -1.0);
    });
  }

  Var scale(Var a, double s) {
    Matrix out = value(a) * s;
    return push(std::move(out), needs(a), [this, a, s](const Matrix& g) {
      accumulate(a, g * s);
    });
  }

  /// x + bias broadcast over rows; bias is 1 x cols.
  Var add_row(Var x, Var bias) {
    const Matrix& xv = value(x);
    const Matrix& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
      throw DimensionError("Tape::add_row: " + xv.shape_string() + " + " + bv.shape_string());
    }
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
    return push(std::move(out), needs(x, bias), [this, x, bias](const Matrix& g) {
      if (needs(x)) accumulate(x, g);
      if (needs(bias)) {
        Matrix gb(1, g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
        accumulate(bias, gb);
      }
    });
  }

  /// x·w + b.
  Var affine(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

  Var relu(Var a) {
    Matrix out = value(a);
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), needs(a), [this, a](const Matrix& g) {
      Matrix ga = g;
      auto in = value(a).values();
      auto gv = ga.values();
      for (std::size_t i = 0; i < gv.size(); ++i)
        if (!(in[i] > 0.0)) gv[i] = 0.0;
      accumulate(a, ga);
    });
  }

  Var sigmoid(Var a) {
    Matrix out = value(a);
    for (double& v : out.values()) v = stable_sigmoid(v);
    const std::size_t self = nodes_.size();
    return push(std::move(out), needs(a), [this, a, self](const Matrix& g) {
      Matrix ga = g;
      auto y = nodes_[self].value.values();
      auto gv = ga.values();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= y[i] * (1.0 - y[i]);
      accumulate(a, ga);
    });
  }

  Var log(Var a) {
    Matrix out = value(a);
    for (double& v : out.values()) v = std::log(v);
    return push(std::move(out), needs(a), [this, a](const Matrix& g) {
      Matrix ga = g;
      auto in = value(a).values();
      auto gv = ga.values();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] /= in[i];
      accumulate(a, ga);
    });
  }

  /// Elementwise log(sigmoid(x)), evaluated without overflow.
  Var log_sigmoid(Var a) {
    Matrix out = value(a);
    for (double& v : out.values()) v = v >= 0.0 ? -std::log1p(std::exp(-v))
                                                : v - std::log1p(std::exp(v));
    return push(std::move(out), needs(a), [this, a](const Matrix& g) {
      Matrix ga = g;
      auto in = value(a).values();
      auto gv = ga.values();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= stable_sigmoid(-in[i]);
      accumulate(a, ga);
    });
  }

  /// Inverted dropout. Identity when `training` is false or rate is zero.
  Var dropout(Var a, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return a;
    const double keep = 1.0 - rate;
    Matrix mask(value(a).rows(), value(a).cols());
    for (double& m : mask.values()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    Matrix out = value(a);
    auto ov = out.values();
    auto mv = mask.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= mv[i];
    return push(std::move(out), needs(a), [this, a, mask = std::move(mask)](const Matrix& g) {
      Matrix ga = g;
      auto gv = ga.values();
      auto mv2 = mask.values();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= mv2[i];
      accumulate(a, ga);
    });
  }

  /// Each row divided by its l2 norm; zero rows pass through as zero.
  Var row_normalize(Var a) {
    const Matrix& in = value(a);
    Matrix out = row_l2_normalize(in);
    std::vector<double> norms(in.rows());
    for (std::size_t i = 0; i < in.rows(); ++i) {
      double s = 0.0;
      for (double v : in.row(i)) s += v * v;
      norms[i] = std::sqrt(s);
    }
    const std::size_t self = nodes_.size();
    return push(std::move(out), needs(a),
                [this, a, self, norms = std::move(norms)](const Matrix& g) {
                  const Matrix& y = nodes_[self].value;
                  Matrix ga(g.rows(), g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i) {
                    if (norms[i] == 0.0) continue;
                    double yg = 0.0;
                    for (std::size_t j = 0; j < g.cols(); ++j) yg += y(i, j) * g(i, j);
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      ga(i, j) = (g(i, j) - y(i, j) * yg) / norms[i];
                  }
                  accumulate(a, ga);
                });
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("Tape::concat_cols: no parts");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    bool req = false;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw DimensionError("Tape::concat_cols: row mismatch");
      cols += value(p).cols();
      req = req || needs(p);
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
      const Matrix& pv = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        std::copy(pv.row(i).begin(), pv.row(i).end(), out.row(i).begin() + offset);
      offset += pv.cols();
    }
    std::vector<Var> copy(parts.begin(), parts.end());
    return push(std::move(out), req, [this, copy = std::move(copy)](const Matrix& g) {
      std::size_t off = 0;
      for (Var p : copy) {
        const std::size_t c = value(p).cols();
        if (needs(p)) accumulate(p, gufu::slice_cols(g, off, off + c));
        off += c;
      }
    });
  }
  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("Tape::concat_rows: no parts");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    bool req = false;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw DimensionError("Tape::concat_rows: col mismatch");
      rows += value(p).rows();
      req = req || needs(p);
    }
    std::vector<double> values;
    values.reserve(rows * cols);
    for (Var p : parts) {
      auto pv = value(p).values();
      values.insert(values.end(), pv.begin(), pv.end());
    }
    std::vector<Var> copy(parts.begin(), parts.end());
    return push(Matrix(rows, cols, std::move(values)), req,
                [this, copy = std::move(copy)](const Matrix& g) {
                  std::size_t off = 0;
                  for (Var p : copy) {
                    const std::size_t r = value(p).rows();
                    if (needs(p)) {
                      Matrix gp(r, g.cols());
                      for (std::size_t i = 0; i < r; ++i)
                        std::copy(g.row(off + i).begin(), g.row(off + i).end(),
                                  gp.row(i).begin());
                      accumulate(p, gp);
                    }
                    off += r;
                  }
                });
  }
  Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Matrix out = gufu::slice_cols(value(a), begin, end);
    return push(std::move(out), needs(a), [this, a, begin, end](const Matrix& g) {
      Matrix ga(value(a).rows(), value(a).cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = begin; j < end; ++j) ga(i, j) = g(i, j - begin);
      accumulate(a, ga);
    });
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    return gather_rows(a, std::move(idx));
  }

  Var gather_rows(Var a, std::vector<std::size_t> index) {
    Matrix out = gufu::gather_rows(value(a), index);
    return push(std::move(out), needs(a), [this, a, index = std::move(index)](const Matrix& g) {
      Matrix ga(value(a).rows(), value(a).cols());
      for (std::size_t i = 0; i < index.size(); ++i) {
        auto dst = ga.row(index[i]);
        auto src = g.row(i);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      accumulate(a, ga);
    });
  }

  /// out[t] = mean of rows i of `messages` with target[i] == t; empty groups are 0.
  Var mean_aggregate(Var messages, std::vector<std::size_t> target, std::size_t n_out) {
    const Matrix& m = value(messages);
    if (target.size() != m.rows()) throw DimensionError("Tape::mean_aggregate: target size");
    std::vector<double> count(n_out, 0.0);
    for (std::size_t t : target) {
      if (t >= n_out) throw DimensionError("Tape::mean_aggregate: target out of range");
      count[t] += 1.0;
    }
    Matrix out(n_out, m.cols());
    for (std::size_t i = 0; i < target.size(); ++i) {
      auto dst = out.row(target[i]);
      auto src = m.row(i);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
    for (std::size_t t = 0; t < n_out; ++t) {
      if (count[t] == 0.0) continue;
      for (double& v : out.row(t)) v /= count[t];
    }
    return push(std::move(out), needs(messages),
                [this, messages, target = std::move(target),
                 count = std::move(count)](const Matrix& g) {
                  Matrix gm(target.size(), g.cols());
                  for (std::size_t i = 0; i < target.size(); ++i) {
                    const double inv = 1.0 / count[target[i]];
                    auto src = g.row(target[i]);
                    auto dst = gm.row(i);
                    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] * inv;
                  }
                  accumulate(messages, gm);
                });
  }

  /// Row-wise dot products, N x 1.
  Var row_dot(Var a, Var b) {
    value(a).require_same(value(b), "Tape::row_dot");
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    Matrix out(av.rows(), 1);
    for (std::size_t i = 0; i < av.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < av.cols(); ++j) s += av(i, j) * bv(i, j);
      out(i, 0) = s;
    }
    return push(std::move(out), needs(a, b), [this, a, b](const Matrix& g) {
      const Matrix& av2 = value(a);
      const Matrix& bv2 = value(b);
      if (needs(a)) {
        Matrix ga(av2.rows(), av2.cols());
        for (std::size_t i = 0; i < av2.rows(); ++i)
          for (std::size_t j = 0; j < av2.cols(); ++j) ga(i, j) = g(i, 0) * bv2(i, j);
        accumulate(a, ga);
      }
      if (needs(b)) {
        Matrix gb(bv2.rows(), bv2.cols());
        for (std::size_t i = 0; i < bv2.rows(); ++i)
          for (std::size_t j = 0; j < bv2.cols(); ++j) gb(i, j) = g(i, 0) * av2(i, j);
        accumulate(b, gb);
      }
    });
  }

  /// Sum of all entries, 1 x 1.
  Var sum(Var a) {
    double s = 0.0;
    for (double v : value(a).values()) s += v;
    return push(Matrix(1, 1, s), needs(a), [this, a](const Matrix& g) {
      accumulate(a, Matrix(value(a).rows(), value(a).cols(), g(0, 0)));
    });
  }

  /// Frobenius norm, 1 x 1. The subgradient at zero is taken as zero.
  Var frobenius(Var a) {
    const double n = frobenius_norm(value(a));
    return push(Matrix(1, 1, n), needs(a), [this, a, n](const Matrix& g) {
      if (n == 0.0) return;
      accumulate(a, value(a) * (g(0, 0) / n));
    });
  }

  /// ||a - b||_F.
  Var frobenius_diff(Var a, Var b) { return frobenius(sub(a, b)); }

  /// Throws TrainingError naming `term` if v holds a non-finite value.
  void require_finite(Var v, const std::string& term) const {
    if (!value(v).all_finite()) throw TrainingError("non-finite value in loss term '" + term + "'");
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every parameter leaf.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw DimensionError("Tape::backward: loss must be 1x1");
    require_finite(loss, "loss");
    for (auto& n : nodes_) n.grad = Matrix();
    accumulate(loss, Matrix(1, 1, 1.0));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      Matrix g = n.grad;
      n.backward(g);
    }
    for (auto& [id, entry] : leaves_) {
      if (!nodes_[id].grad.empty()) entry->grad += nodes_[id].grad;
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(const Matrix&)> backward;
  };

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  bool needs(Var a) const { return nodes_[a.id].requires_grad; }
  bool needs(Var a, Var b) const { return needs(a) || needs(b); }

  Var push(Matrix value, bool requires_grad, std::function<void(const Matrix&)> backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                          requires_grad ? std::move(backward) : nullptr});
    return Var{nodes_.size() - 1};
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::size_t, ParamEntry*>> leaves_;
};

}  // namespace gufu
