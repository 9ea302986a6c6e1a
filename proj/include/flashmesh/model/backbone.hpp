#pragma once

// Incremental forward pass of the three-level hourglass.
//
// Sequence index i = 0 holds BOS; payload token p sits at i = p + 1. Payload
// tokens 3g..3g+2 form point g and points 3f..3f+2 form face f. A group is
// shortened only once its last member has been fed, so the point level sees
// point g when i = 3g + 3 and the face level sees face f together with point
// 3f + 2. Upsampled point g feeds the coordinate inputs i = 3g+3 .. 3g+5 (the
// ones predicting the payload of point g + 1); upsampled face f feeds points
// 3f+3 .. 3f+5. Every position is processed on its own, in order, so feeding
// a slice in one call and token by token produce bit-identical results.

#include <array>
#include <span>
#include <vector>

#include "flashmesh/mesh/codec.hpp"
#include "flashmesh/model/condition.hpp"
#include "flashmesh/model/weights.hpp"
#include "flashmesh/nn/kernels.hpp"

namespace flashmesh::model {

using mesh::Token;
using mesh::TokenSequence;

enum class SplitKind { face, point, coord };

inline const char* to_string(SplitKind k) {
  switch (k) {
    case SplitKind::face: return "face";
    case SplitKind::point: return "point";
    case SplitKind::coord: return "coord";
  }
  return "?";
}

struct SplitSet {
  bool face = false, point = false, coord = false;
  friend bool operator==(const SplitSet&, const SplitSet&) = default;
};

/// Split nodes active when predicting payload position `position`.
inline SplitSet split_schedule(std::size_t position) {
  return {position % 9 == 0, position % 3 == 0, true};
}

/// Greedy choice over a next-token distribution: highest probability, lowest
/// id on ties. BOS and PAD are never generated.
inline Token greedy_token(std::span<const double> probs, std::uint32_t bins) {
  const mesh::Vocabulary voc{bins};
  Token best = 0;
  double bp = -1.0;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (t == voc.bos() || t == voc.pad()) continue;
    if (probs[t] > bp) {
      bp = probs[t];
      best = static_cast<Token>(t);
    }
  }
  return best;
}

/// Rotated keys and values of one self-attention layer, one row per position
/// at that layer's level.
struct LayerCache {
  Matrix keys, values;

  void reset(std::size_t d) {
    keys.reset_width(d);
    values.reset_width(d);
  }
  std::size_t size() const { return keys.rows(); }
  void truncate(std::size_t n) {
    keys.truncate_rows(n);
    values.truncate_rows(n);
  }
};

/// HF-block view of a backbone cache: the cached keys/values after the
/// block's shared W_k / W_v projections, one row per cached position.
struct FusionCache {
  Matrix keys, values;

  void reset(std::size_t d) {
    keys.reset_width(d);
    values.reset_width(d);
  }
  std::size_t size() const { return keys.rows(); }
  void truncate(std::size_t n) {
    keys.truncate_rows(n);
    values.truncate_rows(n);
  }
  void project_append(const LayerCache& src, std::size_t row, const HfBlockW& w, std::vector<double>& tmp) {
    tmp.resize(w.wk.cols());
    nn::vecmat(src.keys.row(row), w.wk, tmp);
    keys.append_row(tmp);
    nn::vecmat(src.values.row(row), w.wv, tmp);
    values.append_row(tmp);
  }
};

struct Scratch {
  std::vector<double> a, q, k, v, att, tmp, hidden, wide;
  std::vector<double> scores;

  explicit Scratch(const ModelConfig& c)
      : a(c.model_dim), q(c.model_dim), k(c.model_dim), v(c.model_dim), att(c.model_dim),
        tmp(c.model_dim), hidden(c.ffn_dim), wide(3 * c.model_dim) {}
};

inline void add_bias(std::span<double> x, const Matrix& b) { nn::add_into(x, b.row(0)); }

/// out = x * W + b
inline void linear(std::span<const double> x, const LinearW& l, std::span<double> out) {
  nn::vecmat(x, l.w, out);
  add_bias(out, l.b);
}

inline void ln_apply(std::span<const double> x, const LayerNormW& ln, std::span<double> out) {
  nn::layer_norm(x, ln.gain.row(0), ln.bias.row(0), out);
}

/// x += W2 * gelu(W1 x + b1) + b2, with `in` as the FFN input.
inline void ffn_apply(std::span<const double> in, const FfnW& f, std::span<double> out,
                      std::vector<double>& hidden) {
  std::span<double> h(hidden.data(), f.w1.cols());
  nn::vecmat(in, f.w1, h);
  add_bias(h, f.b1);
  for (double& v : h) v = nn::gelu(v);
  nn::vecmat(h, f.w2, out);
  add_bias(out, f.b2);
}

/// Cross-attention of one row over the condition.
inline void cross_attend(std::span<const double> in, const Matrix& wq, const Matrix& wo, const CrossKV& kv,
                         std::size_t heads, std::span<double> out, Scratch& s) {
  nn::vecmat(in, wq, s.q);
  nn::attend_row(s.q, kv.keys, kv.values, kv.keys.rows(), heads, s.att, s.scores);
  nn::vecmat(s.att, wo, out);
}

/// One pre-norm transformer block applied to a single position. The
/// position's key/value are appended to `cache` before attending, so the
/// query sees itself and every earlier position.
inline void block_step(const BlockW& w, LayerCache& cache, const CrossKV& cross, std::span<double> x,
                       std::size_t pos, std::size_t heads, Scratch& s) {
  ln_apply(x, w.ln_self, s.a);
  nn::vecmat(s.a, w.wq, s.q);
  nn::vecmat(s.a, w.wk, s.k);
  nn::vecmat(s.a, w.wv, s.v);
  nn::rope_inplace(s.q, heads, pos);
  nn::rope_inplace(s.k, heads, pos);
  cache.keys.append_row(s.k);
  cache.values.append_row(s.v);
  nn::attend_row(s.q, cache.keys, cache.values, cache.size(), heads, s.att, s.scores);
  nn::vecmat(s.att, w.wo, s.tmp);
  nn::add_into(x, s.tmp);

  ln_apply(x, w.ln_cross, s.a);
  cross_attend(s.a, w.cq, w.co, cross, heads, s.tmp, s);
  nn::add_into(x, s.tmp);

  ln_apply(x, w.ln_ffn, s.a);
  ffn_apply(s.a, w.ffn, s.tmp, s.hidden);
  nn::add_into(x, s.tmp);
}

/// Per-position outputs of one forward call.
struct PassOutput {
  Matrix probs;      // next-token distribution after each fed token
  Matrix coord_tap;  // coordinate hidden entering the last block
  /// (point index, label logits) for every point completed during the call.
  std::vector<std::pair<std::size_t, std::array<double, 3>>> point_labels;
};

/// Backbone decode state: per-layer KV caches plus the per-level hidden
/// histories needed to shorten, upsample and draft. Single owner; the model
/// it references must outlive it.
class Backbone {
public:
  Backbone(const HourglassModel& m, const Condition& c)
      : model_(&m), cond_(m, c), scratch_(m.config) {
    const std::size_t d = m.config.model_dim;
    auto init = [&](std::vector<LayerCache>& v, std::size_t n) {
      v.resize(n);
      for (auto& lc : v) lc.reset(d);
    };
    init(coord_pre_, m.coord_pre.size());
    init(coord_post_, m.coord_post.size());
    init(point_pre_, m.point_pre.size());
    init(point_post_, m.point_post.size());
    init(face_, m.face.size());
    for (Matrix* h : {&coord_hidden_, &point_hidden_, &point_tap_, &point_out_, &face_tap_, &face_out_})
      h->reset_width(d);
    point_up_.reset_width(3 * d);
    face_up_.reset_width(3 * d);
    for (FusionCache* fc : {&fusion_pc_, &fusion_fc_, &fusion_fp_}) fc->reset(d);
  }

  const HourglassModel& model() const { return *model_; }
  const ConditionCache& condition() const { return cond_; }
  const TokenSequence& tokens() const { return tokens_; }
  std::size_t fed() const { return tokens_.size(); }
  std::size_t points() const { return point_out_.rows(); }
  std::size_t faces() const { return face_out_.rows(); }

  const LayerCache& coord_fusion_cache() const { return coord_post_.front(); }
  const LayerCache& point_fusion_cache() const { return point_post_.front(); }
  /// Projected caches read by the point->coord, face->coord and face->point
  /// fusion blocks.
  const FusionCache& fusion_point_coord() const { return fusion_pc_; }
  const FusionCache& fusion_face_coord() const { return fusion_fc_; }
  const FusionCache& fusion_face_point() const { return fusion_fp_; }
  const Matrix& point_taps() const { return point_tap_; }
  const Matrix& face_taps() const { return face_tap_; }
  const Matrix& point_outputs() const { return point_out_; }

  /// Cache lengths per level: coordinate (incl. BOS), point, face.
  std::array<std::size_t, 3> cache_lengths() const {
    return {coord_pre_.empty() ? coord_post_.front().size() : coord_pre_.front().size(),
            point_post_.front().size(), face_.front().size()};
  }

  PassOutput feed(std::span<const Token> tokens) {
    const auto& cfg = model_->config;
    PassOutput out;
    out.probs = Matrix(tokens.size(), cfg.vocab());
    out.coord_tap = Matrix(tokens.size(), cfg.model_dim);
    for (std::size_t r = 0; r < tokens.size(); ++r) step(tokens[r], out, r);
    return out;
  }

  /// Rolls every cache and history back to the first `fed` tokens.
  void truncate(std::size_t fed) {
    if (fed > tokens_.size()) throw ContractError("truncate beyond fed length");
    tokens_.resize(fed);
    const std::size_t groups = fed == 0 ? 0 : (fed - 1) / 3;
    const std::size_t faces = groups / 3;
    for (auto& c : coord_pre_) c.truncate(fed);
    for (auto& c : coord_post_) c.truncate(fed);
    coord_hidden_.truncate_rows(fed);
    fusion_pc_.truncate(fed);
    fusion_fc_.truncate(fed);
    fusion_fp_.truncate(groups);
    for (auto& c : point_pre_) c.truncate(groups);
    for (auto& c : point_post_) c.truncate(groups);
    for (Matrix* h : {&point_hidden_, &point_tap_, &point_out_, &point_up_}) h->truncate_rows(groups);
    for (auto& c : face_) c.truncate(faces);
    for (Matrix* h : {&face_tap_, &face_out_, &face_up_}) h->truncate_rows(faces);
  }

private:
  void step(Token tok, PassOutput& out, std::size_t r) {
    const auto& m = *model_;
    const auto& cfg = m.config;
    const std::size_t d = cfg.model_dim, heads = cfg.heads;
    const std::size_t i = tokens_.size();
    if (tok >= cfg.vocab()) throw ContractError("token id outside vocabulary");
    tokens_.push_back(tok);
    Scratch& s = scratch_;

    std::vector<double> x(m.embed.row(tok).begin(), m.embed.row(tok).end());
    for (std::size_t b = 0; b < m.coord_pre.size(); ++b)
      block_step(m.coord_pre[b], coord_pre_[b], cond_.coord_pre[b], x, i, heads, s);
    coord_hidden_.append_row(x);

    if (i >= 3 && i % 3 == 0) point_step(i / 3 - 1, out);

    if (i >= 3) {
      const std::size_t g = i / 3 - 1;
      nn::add_into(x, point_up_.row(g).subspan((i % 3) * d, d));
    }
    for (std::size_t b = 0; b < m.coord_post.size(); ++b) {
      if (b + 1 == m.coord_post.size()) std::copy(x.begin(), x.end(), out.coord_tap.row(r).begin());
      block_step(m.coord_post[b], coord_post_[b], cond_.coord_post[b], x, i, heads, s);
      if (b == 0) {
        fusion_pc_.project_append(coord_post_[0], i, m.hf_point_coord, s.tmp);
        fusion_fc_.project_append(coord_post_[0], i, m.hf_face_coord, s.tmp);
      }
    }
    ln_apply(x, m.final_ln, s.a);
    auto pr = out.probs.row(r);
    nn::vecmat(s.a, m.out_head, pr);
    nn::softmax_inplace(pr);
  }

  void point_step(std::size_t g, PassOutput& out) {
    const auto& m = *model_;
    const std::size_t d = m.config.model_dim, heads = m.config.heads;
    Scratch& s = scratch_;
    for (std::size_t k = 0; k < 3; ++k) {
      auto src = coord_hidden_.row(3 * g + 1 + k);
      std::copy(src.begin(), src.end(), s.wide.begin() + static_cast<std::ptrdiff_t>(k * d));
    }
    std::vector<double> p(d);
    linear(s.wide, m.shorten_cp, p);
    for (std::size_t b = 0; b < m.point_pre.size(); ++b)
      block_step(m.point_pre[b], point_pre_[b], cond_.point_pre[b], p, g, heads, s);
    point_hidden_.append_row(p);

    if (g % 3 == 2) face_step(g / 3);

    if (g >= 3) nn::add_into(p, face_up_.row(g / 3 - 1).subspan((g % 3) * d, d));
    for (std::size_t b = 0; b < m.point_post.size(); ++b) {
      if (b + 1 == m.point_post.size()) point_tap_.append_row(p);
      block_step(m.point_post[b], point_post_[b], cond_.point_post[b], p, g, heads, s);
      if (b == 0) fusion_fp_.project_append(point_post_[0], g, m.hf_face_point, s.tmp);
    }
    point_out_.append_row(p);
    std::vector<double> up(3 * d);
    linear(p, m.upsample_pc, up);
    point_up_.append_row(up);

    std::array<double, 3> lab{};
    linear(p, m.label_head, lab);
    out.point_labels.emplace_back(g, lab);
  }

  void face_step(std::size_t f) {
    const auto& m = *model_;
    const std::size_t d = m.config.model_dim, heads = m.config.heads;
    Scratch& s = scratch_;
    for (std::size_t k = 0; k < 3; ++k) {
      auto src = point_hidden_.row(3 * f + k);
      std::copy(src.begin(), src.end(), s.wide.begin() + static_cast<std::ptrdiff_t>(k * d));
    }
    std::vector<double> y(d);
    linear(s.wide, m.shorten_pf, y);
    for (std::size_t b = 0; b < m.face.size(); ++b) {
      if (b + 1 == m.face.size()) face_tap_.append_row(y);
      block_step(m.face[b], face_[b], cond_.face[b], y, f, heads, s);
    }
    face_out_.append_row(y);
    std::vector<double> up(3 * d);
    linear(y, m.upsample_fp, up);
    face_up_.append_row(up);
  }

  const HourglassModel* model_;
  ConditionCache cond_;
  Scratch scratch_;
  TokenSequence tokens_;
  std::vector<LayerCache> coord_pre_, coord_post_, point_pre_, point_post_, face_;
  Matrix coord_hidden_;                        // per sequence index
  Matrix point_hidden_, point_tap_, point_out_, point_up_;  // per point
  Matrix face_tap_, face_out_, face_up_;       // per face
  FusionCache fusion_pc_, fusion_fc_, fusion_fp_;
};

}  // namespace flashmesh::model
