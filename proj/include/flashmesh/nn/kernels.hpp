#pragma once

// Dense numeric kernels shared by the backbone, the draft heads and the
// training-style reference forward. Every reduction runs sequentially over
// its axis so repeated calls on the same inputs are bit-identical.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "flashmesh/nn/matrix.hpp"

namespace flashmesh::nn {

enum class AttentionMask { causal, full, query_over_cache };

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul a.cols != b.rows");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// out = x * w (row vector times matrix).
inline void vecmat(std::span<const double> x, const Matrix& w, std::span<double> out) {
  require_shape(x.size() == w.rows() && out.size() == w.cols(), "vecmat");
  const std::size_t n = out.size();
  double* __restrict op = out.data();
  const double* __restrict xp = x.data();
  const double* wp = w.values().data();
  std::fill(op, op + n, 0.0);
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double xk = xp[k];
    const double* __restrict wr = wp + k * n;
    for (std::size_t j = 0; j < n; ++j) op[j] += xk * wr[j];
  }
}

inline void add_into(std::span<double> acc, std::span<const double> v) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

/// In-place softmax with max subtraction.
inline void softmax_inplace(std::span<double> r) {
  if (r.empty()) return;
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : r) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : r) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : r) v /= sum;
}

inline Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

inline void layer_norm(std::span<const double> x, std::span<const double> gamma,
                       std::span<const double> beta, std::span<double> out) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
}

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline constexpr double kRopeBase = 10000.0;

/// Rotary position mixing applied independently to every head of `x`.
inline void rope_inplace(std::span<double> x, std::size_t heads, std::size_t position) {
  const std::size_t hd = x.size() / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i + 1 < hd; i += 2) {
      const double freq = std::pow(kRopeBase, -static_cast<double>(i) / static_cast<double>(hd));
      const double ang = static_cast<double>(position) * freq;
      const double c = std::cos(ang), s = std::sin(ang);
      double& a = x[h * hd + i];
      double& b = x[h * hd + i + 1];
      const double a0 = a, b0 = b;
      a = a0 * c - b0 * s;
      b = a0 * s + b0 * c;
    }
  }
}

/// Multi-head attention of one query row over the first `nkeys` rows of
/// `keys`/`values`. With nkeys == 0 the result is the zero vector.
inline void attend_row(std::span<const double> q, const Matrix& keys, const Matrix& values,
                       std::size_t nkeys, std::size_t heads, std::span<double> out,
                       std::vector<double>& scratch) {
  const std::size_t d = q.size();
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  double* __restrict op = out.data();
  std::fill(op, op + d, 0.0);
  if (nkeys == 0) return;
  scratch.resize(heads * nkeys);
  double* __restrict sc = scratch.data();
  const double* __restrict qp = q.data();
  const double* kp = keys.values().data();
  const double* vp = values.values().data();
  // Each dot product is summed sequentially over its head dimension; the
  // chains of all heads and of two keys are interleaved.
  constexpr std::size_t kMaxHeads = 16;
  double acc0[kMaxHeads], acc1[kMaxHeads];
  std::size_t j = 0;
  if (heads <= kMaxHeads) {
    for (; j + 1 < nkeys; j += 2) {
      const double* __restrict k0 = kp + j * d;
      const double* __restrict k1 = k0 + d;
      for (std::size_t h = 0; h < heads; ++h) acc0[h] = acc1[h] = 0.0;
      for (std::size_t c = 0; c < hd; ++c)
        for (std::size_t h = 0; h < heads; ++h) {
          const double qv = qp[h * hd + c];
          acc0[h] += qv * k0[h * hd + c];
          acc1[h] += qv * k1[h * hd + c];
        }
      for (std::size_t h = 0; h < heads; ++h) {
        sc[h * nkeys + j] = acc0[h] * scale;
        sc[h * nkeys + j + 1] = acc1[h] * scale;
      }
    }
  }
  for (; j < nkeys; ++j) {
    const double* __restrict kr = kp + j * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      double s = 0.0;
      for (std::size_t c = 0; c < hd; ++c) s += qp[off + c] * kr[off + c];
      sc[h * nkeys + j] = s * scale;
    }
  }
  for (std::size_t h = 0; h < heads; ++h) softmax_inplace(std::span<double>(sc + h * nkeys, nkeys));
  for (std::size_t j = 0; j < nkeys; ++j) {
    const double* __restrict vr = vp + j * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const double p = sc[h * nkeys + j];
      const std::size_t off = h * hd;
      for (std::size_t c = 0; c < hd; ++c) op[off + c] += p * vr[off + c];
    }
  }
}

/// Single-head scaled dot-product attention, softmax(q k^T / sqrt(d) + mask) v.
/// Query row r sits at absolute position `query_offset + r` for the causal mask.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, AttentionMask mask,
                        std::size_t query_offset = 0) {
  require_shape(q.cols() == k.cols(), "attention q.cols != k.cols");
  require_shape(k.rows() == v.rows(), "attention k.rows != v.rows");
  Matrix out(q.rows(), v.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  std::vector<double> scores(k.rows());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    std::size_t n = k.rows();
    if (mask == AttentionMask::causal) n = std::min(n, query_offset + r + 1);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += q(r, c) * k(j, c);
      scores[j] = s * scale;
    }
    softmax_inplace(std::span<double>(scores.data(), n));
    auto o = out.row(r);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < v.cols(); ++c) o[c] += scores[j] * v(j, c);
  }
  return out;
}

}  // namespace flashmesh::nn
