#pragma once

// Training objectives: coordinate cross-entropy over main and draft
// predictions, label cross-entropy over drafted points and their weighted
// sum, plus a finite-difference gradient check.

#include <cmath>
#include <functional>
#include <set>
#include <stdexcept>
#include <vector>

#include "flashmesh/speculate/correction.hpp"
#include "flashmesh/train/reference.hpp"

namespace flashmesh::train {

using mesh::Token;
using mesh::TokenSequence;
using speculate::LabelLogits;
using speculate::PointLabel;

/// -(1/N) sum log p_r(target_r) over rows of a probability matrix.
inline double coord_loss(const Matrix& probs, const std::vector<Token>& targets) {
  nn::require_shape(probs.rows() == targets.size() && !targets.empty(), "coord_loss");
  double s = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) s -= std::log(probs(r, targets[r]));
  return s / static_cast<double>(targets.size());
}

/// Mean negative log-softmax probability of the true label.
inline double label_loss(const std::vector<LabelLogits>& logits, const std::vector<PointLabel>& labels) {
  nn::require_shape(logits.size() == labels.size() && !labels.empty(), "label_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& l = logits[i];
    const double mx = std::max({l[0], l[1], l[2]});
    const double z = std::exp(l[0] - mx) + std::exp(l[1] - mx) + std::exp(l[2] - mx);
    s -= l[static_cast<std::size_t>(labels[i])] - mx - std::log(z);
  }
  return s / static_cast<double>(logits.size());
}

inline double total_loss(double coord, double label, double gamma) { return coord + gamma * label; }

/// Vertices of the complete points inside payload [0, end).
inline std::set<mesh::QVertex> history_before(const TokenSequence& seq, std::size_t end, std::uint32_t bins) {
  std::set<mesh::QVertex> h;
  for (std::size_t p = 0; p + 3 <= end && p + 3 < seq.size(); p += 3) {
    const Token a = seq[p + 1], b = seq[p + 2], c = seq[p + 3];
    if (a < bins && b < bins && c < bins)
      h.insert({static_cast<std::int32_t>(a), static_cast<std::int32_t>(b), static_cast<std::int32_t>(c)});
  }
  return h;
}

struct LossTerms {
  Var total, coord, label;
  bool has_label = false;
  std::size_t coord_rows = 0, label_rows = 0;
};

/// Teacher-forced objective on one sequence: coordinate cross-entropy over
/// every main prediction and every draft prediction whose target exists,
/// label cross-entropy over every drafted point with a complete target
/// point, combined with the configured gamma.
inline LossTerms sequence_loss(Tape& t, const HourglassModel& m, const model::Condition& c, const TokenSequence& seq) {
  const auto out = reference_forward(t, m, c, seq, true);
  const std::size_t n = seq.size(), payload = n - 1;
  const std::uint32_t bins = m.config.bins;
  std::vector<Var> rows;
  std::vector<std::size_t> targets;
  if (n > 1) {
    rows.push_back(t.gather_rows(out.logits, detail::iota(0, n - 1)));
    for (std::size_t i = 1; i < n; ++i) targets.push_back(seq[i]);
  }
  std::vector<Var> label_rows;
  std::vector<std::size_t> label_targets;
  for (const auto& dr : out.drafts) {
    for (std::size_t k = 0; k < dr.positions.size(); ++k)
      if (dr.positions[k] < payload) {
        rows.push_back(dr.rows[k]);
        targets.push_back(seq[dr.positions[k] + 1]);
      }
    const auto history = history_before(seq, dr.base, bins);
    std::vector<mesh::QVertex> pts;
    std::vector<Var> lv;
    for (const auto& [first, l] : dr.labels) {
      if (first + 3 > payload || first < dr.base) continue;
      const Token a = seq[first + 1], b = seq[first + 2], cc = seq[first + 3];
      if (a >= bins || b >= bins || cc >= bins) continue;
      pts.push_back({static_cast<std::int32_t>(a), static_cast<std::int32_t>(b), static_cast<std::int32_t>(cc)});
      lv.push_back(l);
    }
    const auto labels = speculate::derive_labels(history, pts);
    for (std::size_t i = 0; i < lv.size(); ++i) {
      label_rows.push_back(lv[i]);
      label_targets.push_back(static_cast<std::size_t>(labels[i]));
    }
  }
  if (rows.empty()) throw ContractError("sequence_loss: no prediction targets");
  LossTerms lt;
  lt.coord_rows = targets.size();
  lt.coord = t.cross_entropy(t.concat_rows(rows), targets);
  lt.total = lt.coord;
  if (!label_rows.empty()) {
    lt.has_label = true;
    lt.label_rows = label_targets.size();
    lt.label = t.cross_entropy(t.concat_rows(label_rows), label_targets);
    lt.total = t.add(lt.coord, t.scale(lt.label, m.config.gamma));
  }
  return lt;
}

struct Example {
  model::Condition condition;
  TokenSequence tokens;
};

/// Mean total loss over a micro-batch, recorded on `t`.
inline Var batch_loss(Tape& t, const HourglassModel& m, const std::vector<Example>& batch) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  Var acc{};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var l = sequence_loss(t, m, batch[i].condition, batch[i].tokens).total;
    acc = i == 0 ? l : t.add(acc, l);
  }
  return t.scale(acc, 1.0 / static_cast<double>(batch.size()));
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  double loss = 0.0;
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  std::size_t samples = 64;  // sampled scalar weights
  std::uint64_t seed = 1;
  double floor = 1e-7;       // denominator floor for the relative error
};

/// Compares the taped gradient of `loss` with central differences on a
/// sample of entries of `params`. `loss` must rebuild the graph from the
/// current parameter values on each call.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Matrix*>& params,
                                  const GradCheckOptions& opt = {}) {
  Tape t;
  Var l = loss(t);
  const double l0 = t.value(l)(0, 0);
  if (!std::isfinite(l0)) throw std::domain_error("grad_check: non-finite loss");
  t.backward(l);
  std::vector<std::pair<Matrix*, std::size_t>> entries;
  std::size_t total = 0;
  for (Matrix* p : params) total += p->size();
  if (total == 0) throw ContractError("grad_check: no parameters");
  util::Rng rng(opt.seed);
  std::vector<Matrix> grads;
  for (Matrix* p : params) grads.push_back(t.grad_of(*p));
  GradCheckReport rep;
  rep.loss = l0;
  auto eval = [&] {
    Tape tt;
    const double v = tt.value(loss(tt))(0, 0);
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite loss");
    return v;
  };
  for (std::size_t s = 0; s < opt.samples; ++s) {
    std::size_t k = rng.below(total), pi = 0;
    while (k >= params[pi]->size()) k -= params[pi++]->size();
    double& w = params[pi]->values()[k];
    const double orig = w;
    w = orig + opt.epsilon;
    const double lp = eval();
    w = orig - opt.epsilon;
    const double lm = eval();
    w = orig;
    const double fd = (lp - lm) / (2.0 * opt.epsilon);
    const double an = grads[pi].values()[k];
    const double abs_err = std::abs(fd - an);
    const double rel = abs_err / std::max({std::abs(fd), std::abs(an), opt.floor});
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++rep.checked;
  }
  return rep;
}

/// Every tensor of a model, for grad_check.
inline std::vector<Matrix*> all_parameters(HourglassModel& m) {
  std::vector<Matrix*> ps;
  model::for_each_tensor(m, [&](const std::string&, Matrix& t, model::TensorRole) { ps.push_back(&t); });
  return ps;
}

/// Gradient check of the full objective of a model on a micro-batch.
inline GradCheckReport grad_check(HourglassModel& m, const std::vector<Example>& batch,
                                  const GradCheckOptions& opt = {}) {
  return grad_check([&](Tape& t) { return batch_loss(t, m, batch); }, all_parameters(m), opt);
}

}  // namespace flashmesh::train
