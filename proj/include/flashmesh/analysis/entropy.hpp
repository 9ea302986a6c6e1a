#pragma once

// Entropy bookkeeping for a pair of discrete variables given as a joint
// table. Every quantity is summed from its own definition so the identities
//   H(X) = H(X|Y) + I(X;Y)
//   H(X) + H(Y) = H(X|Y) + 2 I(X;Y) + H(Y|X)
// are a check, not a tautology. Natural logarithms, 0 log 0 = 0.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "flashmesh/mesh/codec.hpp"
#include "flashmesh/nn/matrix.hpp"

namespace flashmesh::analysis {

struct EntropyReport {
  double h_x = 0.0, h_y = 0.0, h_xy = 0.0;
  double h_x_given_y = 0.0, h_y_given_x = 0.0;
  double mutual_information = 0.0;

  /// |H(X) - H(X|Y) - I|
  double residual_marginal() const { return std::abs(h_x - h_x_given_y - mutual_information); }
  /// |H(X) + H(Y) - H(X|Y) - 2I - H(Y|X)|
  double residual_sum() const {
    return std::abs(h_x + h_y - h_x_given_y - 2.0 * mutual_information - h_y_given_x);
  }
};

/// `joint(x, y)` holds non-negative counts or probabilities; it is
/// normalised internally.
inline EntropyReport entropy_decomposition(const nn::Matrix& joint) {
  double total = 0.0;
  for (double v : joint.values()) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("joint table entries must be finite and >= 0");
    total += v;
  }
  if (!(total > 0.0)) throw std::invalid_argument("joint table is empty");
  const std::size_t nx = joint.rows(), ny = joint.cols();
  std::vector<double> px(nx, 0.0), py(ny, 0.0);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) {
      const double p = joint(x, y) / total;
      px[x] += p;
      py[y] += p;
    }
  EntropyReport r;
  for (double p : px)
    if (p > 0.0) r.h_x -= p * std::log(p);
  for (double p : py)
    if (p > 0.0) r.h_y -= p * std::log(p);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) {
      const double p = joint(x, y) / total;
      if (p <= 0.0) continue;
      r.h_xy -= p * std::log(p);
      r.h_x_given_y -= p * std::log(p / py[y]);
      r.h_y_given_x -= p * std::log(p / px[x]);
      r.mutual_information += p * std::log(p / (px[x] * py[y]));
    }
  return r;
}

/// Counts of adjacent token pairs (t_i, t_{i+1}) over the payload of each
/// sequence (BOS/EOS/PAD excluded).
inline nn::Matrix adjacent_pair_counts(const std::vector<mesh::TokenSequence>& seqs, std::uint32_t bins) {
  nn::Matrix j(bins, bins);
  for (const auto& s : seqs)
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
      if (s[i] < bins && s[i + 1] < bins) j(s[i], s[i + 1]) += 1.0;
  return j;
}

}  // namespace flashmesh::analysis
