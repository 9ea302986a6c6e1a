#pragma once

// Small reverse-mode automatic differentiation over whole matrices. Nodes are
// recorded in creation order, which is already a topological order, so
// backward() is a single reverse sweep.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <vector>

#include "flashmesh/nn/kernels.hpp"

namespace flashmesh::autodiff {

using nn::Matrix;

class Tape {
public:
  struct Var {
    std::size_t id = 0;
  };

  Var constant(Matrix m) { return push(std::move(m), {}); }

  /// Leaf bound to a parameter matrix; repeated calls with the same matrix
  /// return the same variable.
  Var param(const Matrix& m) {
    if (auto it = params_.find(&m); it != params_.end()) return it->second;
    Var v = push(m, {});
    params_.emplace(&m, v);
    return v;
  }

  const Matrix& value(Var v) const { return nodes_[v.id]->value; }
  const Matrix& grad(Var v) const { return nodes_[v.id]->grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() w.r.t. a parameter matrix; zeros when
  /// the parameter never entered the graph.
  Matrix grad_of(const Matrix& m) const {
    auto it = params_.find(&m);
    if (it == params_.end()) return Matrix(m.rows(), m.cols());
    return grad(it->second);
  }

  void backward(Var loss) {
    if (value(loss).rows() != 1 || value(loss).cols() != 1) throw ContractError("backward needs a scalar");
    for (auto& n : nodes_) n->grad = Matrix(n->value.rows(), n->value.cols());
    nodes_[loss.id]->grad(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i]->back) nodes_[i]->back();
  }

  // -- operations ----------------------------------------------------------

  Var matmul(Var a, Var b) {
    Var out = push(nn::matmul(value(a), value(b)), {});
    set_back(out, [this, a, b, out] {
      const Matrix& g = grad(out);
      acc(a, nn::matmul(g, nn::transpose(value(b))));
      acc(b, nn::matmul(nn::transpose(value(a)), g));
    });
    return out;
  }

  Var add(Var a, Var b) {
    nn::require_shape(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add");
    Matrix v = value(a);
    nn::add_into(v.values(), value(b).values());
    Var out = push(std::move(v), {});
    set_back(out, [this, a, b, out] {
      acc(a, grad(out));
      acc(b, grad(out));
    });
    return out;
  }

  /// a + b with b a single row broadcast over a's rows.
  Var add_bias(Var a, Var b) {
    nn::require_shape(value(b).rows() == 1 && value(b).cols() == value(a).cols(), "add_bias");
    Matrix v = value(a);
    for (std::size_t r = 0; r < v.rows(); ++r) nn::add_into(v.row(r), value(b).row(0));
    Var out = push(std::move(v), {});
    set_back(out, [this, a, b, out] {
      const Matrix& g = grad(out);
      acc(a, g);
      Matrix gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) nn::add_into(gb.row(0), g.row(r));
      acc(b, gb);
    });
    return out;
  }

  Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

  Var scale(Var a, double c) {
    Matrix v = value(a);
    for (double& x : v.values()) x *= c;
    Var out = push(std::move(v), {});
    set_back(out, [this, a, out, c] {
      Matrix g = grad(out);
      for (double& x : g.values()) x *= c;
      acc(a, g);
    });
    return out;
  }

  Var layer_norm(Var x, Var gain, Var bias) {
    const Matrix& xv = value(x);
    const std::size_t n = xv.rows(), d = xv.cols();
    Matrix y(n, d), xhat(n, d);
    std::vector<double> inv(n);
    for (std::size_t r = 0; r < n; ++r) {
      auto xr = xv.row(r);
      double mean = 0.0;
      for (double v : xr) mean += v;
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (double v : xr) var += (v - mean) * (v - mean);
      var /= static_cast<double>(d);
      inv[r] = 1.0 / std::sqrt(var + nn::kLayerNormEps);
      for (std::size_t c = 0; c < d; ++c) {
        xhat(r, c) = (xr[c] - mean) * inv[r];
        y(r, c) = xhat(r, c) * value(gain)(0, c) + value(bias)(0, c);
      }
    }
    Var out = push(std::move(y), {});
    set_back(out, [this, x, gain, bias, out, xhat = std::move(xhat), inv = std::move(inv)] {
      const Matrix& g = grad(out);
      const std::size_t n = g.rows(), d = g.cols();
      Matrix gx(n, d), gg(1, d), gbias(1, d);
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < n; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          gg(0, c) += g(r, c) * xhat(r, c);
          gbias(0, c) += g(r, c);
          dxh[c] = g(r, c) * value(gain)(0, c);
          m1 += dxh[c];
          m2 += dxh[c] * xhat(r, c);
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) gx(r, c) = inv[r] * (dxh[c] - m1 - xhat(r, c) * m2);
      }
      acc(x, gx);
      acc(gain, gg);
      acc(bias, gbias);
    });
    return out;
  }

  Var gelu(Var x) {
    Matrix v = value(x);
    for (double& e : v.values()) e = nn::gelu(e);
    Var out = push(std::move(v), {});
    set_back(out, [this, x, out] {
      Matrix g = grad(out);
      auto xv = value(x).values();
      auto gv = g.values();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= nn::gelu_grad(xv[i]);
      acc(x, g);
    });
    return out;
  }

  /// Rotary mixing of every row, row r at position positions[r].
  Var rope(Var x, std::size_t heads, std::vector<std::size_t> positions) {
    Matrix v = value(x);
    for (std::size_t r = 0; r < v.rows(); ++r) nn::rope_inplace(v.row(r), heads, positions[r]);
    Var out = push(std::move(v), {});
    set_back(out, [this, x, out, heads, positions = std::move(positions)] {
      Matrix g = grad(out);
      for (std::size_t r = 0; r < g.rows(); ++r) rotate_back(g.row(r), heads, positions[r]);
      acc(x, g);
    });
    return out;
  }

  /// Multi-head attention; query r attends keys [0, visible[r]). A query that
  /// sees no key yields zeros.
  Var attention(Var q, Var k, Var v, std::size_t heads, std::vector<std::size_t> visible) {
    const Matrix &Q = value(q), &K = value(k), &V = value(v);
    nn::require_shape(Q.cols() == K.cols() && K.rows() == V.rows() && V.cols() == Q.cols(), "attention");
    nn::require_shape(visible.size() == Q.rows(), "attention visible");
    const std::size_t d = Q.cols(), hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix O(Q.rows(), d);
    std::vector<std::vector<double>> probs(Q.rows() * heads);
    for (std::size_t r = 0; r < Q.rows(); ++r) {
      const std::size_t n = std::min(visible[r], K.rows());
      for (std::size_t h = 0; h < heads; ++h) {
        auto& p = probs[r * heads + h];
        p.assign(n, 0.0);
        if (n == 0) continue;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += Q(r, h * hd + c) * K(j, h * hd + c);
          p[j] = s * scale;
        }
        nn::softmax_inplace(p);
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < hd; ++c) O(r, h * hd + c) += p[j] * V(j, h * hd + c);
      }
    }
    Var out = push(std::move(O), {});
    set_back(out, [this, q, k, v, out, heads, hd, scale, probs = std::move(probs)] {
      const Matrix &Q = value(q), &K = value(k), &V = value(v), &G = grad(out);
      Matrix gq(Q.rows(), Q.cols()), gk(K.rows(), K.cols()), gv(V.rows(), V.cols());
      for (std::size_t r = 0; r < Q.rows(); ++r)
        for (std::size_t h = 0; h < heads; ++h) {
          const auto& p = probs[r * heads + h];
          const std::size_t n = p.size();
          if (n == 0) continue;
          std::vector<double> dp(n);
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < hd; ++c) {
              s += G(r, h * hd + c) * V(j, h * hd + c);
              gv(j, h * hd + c) += p[j] * G(r, h * hd + c);
            }
            dp[j] = s;
            dot += p[j] * s;
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double ds = p[j] * (dp[j] - dot) * scale;
            for (std::size_t c = 0; c < hd; ++c) {
              gq(r, h * hd + c) += ds * K(j, h * hd + c);
              gk(j, h * hd + c) += ds * Q(r, h * hd + c);
            }
          }
        }
      acc(q, gq);
      acc(k, gk);
      acc(v, gv);
    });
    return out;
  }

  /// out[r] = x[rows[r]]; doubles as embedding lookup and row slicing.
  Var gather_rows(Var x, std::vector<std::size_t> rows) {
    const Matrix& xv = value(x);
    Matrix v(rows.size(), xv.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] >= xv.rows()) throw ContractError("gather_rows: index out of range");
      auto src = xv.row(rows[r]);
      std::copy(src.begin(), src.end(), v.row(r).begin());
    }
    Var out = push(std::move(v), {});
    set_back(out, [this, x, out, rows = std::move(rows)] {
      const Matrix& g = grad(out);
      Matrix gx(value(x).rows(), value(x).cols());
      for (std::size_t r = 0; r < rows.size(); ++r) nn::add_into(gx.row(rows[r]), g.row(r));
      acc(x, gx);
    });
    return out;
  }

  /// Zero matrix with `rows` rows where out[offset + r] = x[r]; rows of x
  /// falling outside are dropped.
  Var place_rows(Var x, std::size_t offset, std::size_t rows) {
    const Matrix& xv = value(x);
    Matrix v(rows, xv.cols());
    for (std::size_t r = 0; r < xv.rows() && offset + r < rows; ++r) {
      auto src = xv.row(r);
      std::copy(src.begin(), src.end(), v.row(offset + r).begin());
    }
    Var out = push(std::move(v), {});
    set_back(out, [this, x, out, offset] {
      const Matrix& g = grad(out);
      Matrix gx(value(x).rows(), value(x).cols());
      for (std::size_t r = 0; r < gx.rows() && offset + r < g.rows(); ++r)
        std::copy(g.row(offset + r).begin(), g.row(offset + r).end(), gx.row(r).begin());
      acc(x, gx);
    });
    return out;
  }

  /// Row-major reshape (same data, new shape).
  Var reshape(Var x, std::size_t rows, std::size_t cols) {
    const Matrix& xv = value(x);
    if (rows * cols != xv.size()) throw ContractError("reshape: size mismatch");
    Matrix v(rows, cols);
    std::copy(xv.values().begin(), xv.values().end(), v.values().begin());
    Var out = push(std::move(v), {});
    set_back(out, [this, x, out] {
      Matrix gx(value(x).rows(), value(x).cols());
      std::copy(grad(out).values().begin(), grad(out).values().end(), gx.values().begin());
      acc(x, gx);
    });
    return out;
  }

  Var slice_cols(Var x, std::size_t c0, std::size_t n) {
    const Matrix& xv = value(x);
    if (c0 + n > xv.cols()) throw ContractError("slice_cols: out of range");
    Matrix v(xv.rows(), n);
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) v(r, c) = xv(r, c0 + c);
    Var out = push(std::move(v), {});
    set_back(out, [this, x, out, c0, n] {
      const Matrix& g = grad(out);
      Matrix gx(value(x).rows(), value(x).cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gx(r, c0 + c) = g(r, c);
      acc(x, gx);
    });
    return out;
  }

  /// Stacks matrices of equal width vertically.
  Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("concat_rows: nothing to stack");
    Matrix v;
    v.reset_width(value(xs[0]).cols());
    for (Var x : xs)
      for (std::size_t r = 0; r < value(x).rows(); ++r) v.append_row(value(x).row(r));
    Var out = push(std::move(v), {});
    set_back(out, [this, xs, out] {
      const Matrix& g = grad(out);
      std::size_t r0 = 0;
      for (Var x : xs) {
        Matrix gx(value(x).rows(), value(x).cols());
        for (std::size_t r = 0; r < gx.rows(); ++r)
          std::copy(g.row(r0 + r).begin(), g.row(r0 + r).end(), gx.row(r).begin());
        r0 += gx.rows();
        acc(x, gx);
      }
    });
    return out;
  }

  /// Mean over rows of -log softmax(logits[r])[targets[r]], as a 1x1 value.
  Var cross_entropy(Var logits, std::vector<std::size_t> targets) {
    const Matrix& L = value(logits);
    nn::require_shape(targets.size() == L.rows() && !targets.empty(), "cross_entropy");
    Matrix P = nn::softmax_rows(L);
    double loss = 0.0;
    for (std::size_t r = 0; r < L.rows(); ++r) {
      double mx = L(r, 0);
      for (double v : L.row(r)) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : L.row(r)) z += std::exp(v - mx);
      loss -= L(r, targets[r]) - mx - std::log(z);
    }
    const double n = static_cast<double>(L.rows());
    Var out = push(Matrix{{loss / n}}, {});
    set_back(out, [this, logits, out, n, P = std::move(P), targets = std::move(targets)] {
      Matrix g = P;
      for (std::size_t r = 0; r < g.rows(); ++r) g(r, targets[r]) -= 1.0;
      const double s = grad(out)(0, 0) / n;
      for (double& x : g.values()) x *= s;
      acc(logits, g);
    });
    return out;
  }

private:
  struct Node {
    Matrix value, grad;
    std::function<void()> back;
  };

  Var push(Matrix v, std::function<void()> back) {
    auto n = std::make_unique<Node>();
    n->value = std::move(v);
    n->back = std::move(back);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  void set_back(Var v, std::function<void()> f) { nodes_[v.id]->back = std::move(f); }

  void acc(Var v, const Matrix& g) {
    Matrix& dst = nodes_[v.id]->grad;
    nn::require_shape(dst.rows() == g.rows() && dst.cols() == g.cols(), "gradient shape");
    nn::add_into(dst.values(), g.values());
  }

  static void rotate_back(std::span<double> x, std::size_t heads, std::size_t position) {
    const std::size_t hd = x.size() / heads;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i + 1 < hd; i += 2) {
        const double freq = std::pow(nn::kRopeBase, -static_cast<double>(i) / static_cast<double>(hd));
        const double ang = static_cast<double>(position) * freq;
        const double c = std::cos(ang), s = std::sin(ang);
        double& a = x[h * hd + i];
        double& b = x[h * hd + i + 1];
        const double a0 = a, b0 = b;
        a = a0 * c + b0 * s;
        b = -a0 * s + b0 * c;
      }
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<const Matrix*, Var> params_;
};

}  // namespace flashmesh::autodiff
