#pragma once

// Draft heads and draft merging.
//
// Drafting is launched from the state that predicts the main token at payload
// position `base`. Head d of the coordinate level predicts base + d. Head d of
// the point level predicts the point starting at base + 3(d - 1), head d of
// the face level the face starting at base + 9(d - 1); the optimisation rules
// then strip what the main token and the coordinate level already cover.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "flashmesh/model/backbone.hpp"

namespace flashmesh::speculate {

using model::Backbone;
using model::FusionCache;
using model::HourglassModel;
using model::SplitKind;
using nn::Matrix;
using mesh::Token;

using LabelLogits = std::array<double, 3>;

/// One speculative head: single-token self-attention (softmax over a single
/// key is 1, so it reduces to the value/output path), cross-attention to the
/// condition, output linear and the outer residual to `h`.
inline std::vector<double> sp_block(const model::SpHeadW& w, const model::CrossKV& cross,
                                    std::span<const double> h, std::size_t heads) {
  const std::size_t d = h.size();
  std::vector<double> a(d), v(d), u(h.begin(), h.end()), q(d), att(d), tmp(d), out(d), scores;
  model::ln_apply(h, w.ln_self, a);
  nn::vecmat(a, w.sa_v, v);
  nn::vecmat(v, w.sa_o, tmp);
  nn::add_into(u, tmp);
  model::ln_apply(u, w.ln_cross, a);
  nn::vecmat(a, w.ca_q, q);
  nn::attend_row(q, cross.keys, cross.values, cross.keys.rows(), heads, att, scores);
  nn::vecmat(att, w.ca_o, tmp);
  nn::add_into(u, tmp);
  model::linear(u, w.out, out);
  nn::add_into(out, h);
  return out;
}

/// Fusion of one upsampled feature (slot t of its group) with a projected
/// cache: h + FFN_t(Attn(h Wq_t, K, V)). An empty cache attends to zero.
inline std::vector<double> hf_block(const model::HfBlockW& w, std::size_t slot, std::span<const double> h,
                                    const FusionCache& cache, std::size_t heads) {
  const std::size_t d = h.size();
  std::vector<double> q(d), att(d), out(h.begin(), h.end()), tmp(d), hidden(w.ffn[slot].w1.cols()), scores;
  nn::vecmat(h, w.wq[slot], q);
  nn::attend_row(q, cache.keys, cache.values, cache.size(), heads, att, scores);
  model::ffn_apply(att, w.ffn[slot], tmp, hidden);
  nn::add_into(out, tmp);
  return out;
}

/// Same as above against a raw layer cache, projecting its keys and values
/// on the fly.
inline std::vector<double> hf_block(const model::HfBlockW& w, std::size_t slot, std::span<const double> h,
                                    const model::LayerCache& cache, std::size_t heads) {
  FusionCache fc;
  fc.reset(h.size());
  std::vector<double> tmp;
  for (std::size_t r = 0; r < cache.size(); ++r) fc.project_append(cache, r, w, tmp);
  return hf_block(w, slot, h, fc, heads);
}

/// Draft of one hierarchy level launched at `base`.
struct LevelDraft {
  SplitKind level = SplitKind::coord;
  std::size_t base = 0;
  Matrix hidden;                        // SP-head outputs, one row per head
  std::vector<std::size_t> positions;   // payload positions, ascending
  Matrix probs;                         // one distribution per position
  /// (payload position of the point's first coordinate, label logits)
  std::vector<std::pair<std::size_t, LabelLogits>> labels;

  bool covers(std::size_t p) const { return std::binary_search(positions.begin(), positions.end(), p); }
  std::span<const double> probs_at(std::size_t p) const {
    auto it = std::lower_bound(positions.begin(), positions.end(), p);
    return probs.row(static_cast<std::size_t>(it - positions.begin()));
  }
};

namespace detail {

inline void emit_coord(const HourglassModel& m, std::span<const double> h, std::size_t pos, LevelDraft& out) {
  std::vector<double> a(h.size());
  model::ln_apply(h, m.final_ln, a);
  std::vector<double> pr(m.config.vocab());
  nn::vecmat(a, m.out_head, pr);
  nn::softmax_inplace(pr);
  out.positions.push_back(pos);
  out.probs.append_row(pr);
}

inline LabelLogits label_of(const HourglassModel& m, std::span<const double> h) {
  LabelLogits l{};
  model::linear(h, m.label_head, l);
  return l;
}

/// Upsample a point feature and fuse each coordinate slot with the
/// coordinate cache through `hf`.
inline void expand_point(const HourglassModel& m, const model::HfBlockW& hf, const FusionCache& cache,
                         std::span<const double> p, std::size_t first, LevelDraft& out) {
  const std::size_t d = m.config.model_dim;
  std::vector<double> up(3 * d);
  model::linear(p, m.upsample_pc, up);
  for (std::size_t j = 0; j < 3; ++j) {
    auto r = hf_block(hf, j, std::span<const double>(up).subspan(j * d, d), cache, m.config.heads);
    emit_coord(m, r, first + j, out);
  }
}

inline LevelDraft start(const HourglassModel& m, SplitKind k, std::size_t base) {
  LevelDraft ld;
  ld.level = k;
  ld.base = base;
  ld.hidden.reset_width(m.config.model_dim);
  ld.probs.reset_width(m.config.vocab());
  return ld;
}

}  // namespace detail

/// Coordinate level: SP heads only. `tap` is the coordinate hidden that
/// predicts the main token.
inline LevelDraft draft_coord_level(const Backbone& bb, std::span<const double> tap, std::size_t base) {
  const auto& m = bb.model();
  LevelDraft ld = detail::start(m, SplitKind::coord, base);
  for (std::size_t d = 0; d < m.sp_coord.size(); ++d) {
    auto h = sp_block(m.sp_coord[d], bb.condition().sp_coord[d], tap, m.config.heads);
    ld.hidden.append_row(h);
    detail::emit_coord(m, h, base + d + 1, ld);
  }
  return ld;
}

/// Point level: SP heads, then upsample and one fusion against the
/// coordinate cache. `tap` is the point hidden entering the last point block
/// for the group completed just before `base`.
inline LevelDraft draft_point_level(const Backbone& bb, std::span<const double> tap, std::size_t base) {
  const auto& m = bb.model();
  LevelDraft ld = detail::start(m, SplitKind::point, base);
  for (std::size_t d = 0; d < m.sp_point.size(); ++d) {
    auto h = sp_block(m.sp_point[d], bb.condition().sp_point[d], tap, m.config.heads);
    ld.hidden.append_row(h);
    const std::size_t first = base + 3 * d;
    ld.labels.emplace_back(first, detail::label_of(m, h));
    detail::expand_point(m, m.hf_point_coord, bb.fusion_point_coord(), h, first, ld);
  }
  return ld;
}

/// Face level: SP heads, upsample to points fused with the point cache, then
/// upsample to coordinates fused with the coordinate cache.
inline LevelDraft draft_face_level(const Backbone& bb, std::span<const double> tap, std::size_t base) {
  const auto& m = bb.model();
  const std::size_t dim = m.config.model_dim;
  LevelDraft ld = detail::start(m, SplitKind::face, base);
  for (std::size_t d = 0; d < m.sp_face.size(); ++d) {
    auto h = sp_block(m.sp_face[d], bb.condition().sp_face[d], tap, m.config.heads);
    ld.hidden.append_row(h);
    std::vector<double> up(3 * dim);
    model::linear(h, m.upsample_fp, up);
    for (std::size_t k = 0; k < 3; ++k) {
      auto p = hf_block(m.hf_face_point, k, std::span<const double>(up).subspan(k * dim, dim),
                        bb.fusion_face_point(), m.config.heads);
      const std::size_t first = base + 9 * d + 3 * k;
      ld.labels.emplace_back(first, detail::label_of(m, p));
      detail::expand_point(m, m.hf_face_coord, bb.fusion_face_coord(), p, first, ld);
    }
  }
  return ld;
}

struct RuleSet {
  bool rule_a = true;  // drop the point draft when a face draft is present
  bool rule_b = true;  // face/point drafts skip the first three positions
};

/// Applies the optimisation rules to the fresh drafts of one step. Positions
/// at or before the main token are always dropped; labels survive only for
/// points whose three positions all survive.
inline std::vector<LevelDraft> apply_optimization_rules(std::vector<LevelDraft> fresh, RuleSet rules = {}) {
  const bool has_face = std::any_of(fresh.begin(), fresh.end(),
                                    [](const LevelDraft& d) { return d.level == SplitKind::face; });
  std::vector<LevelDraft> out;
  for (auto& ld : fresh) {
    if (rules.rule_a && has_face && ld.level == SplitKind::point) continue;
    std::size_t first = ld.base + 1;
    if (rules.rule_b && ld.level != SplitKind::coord) first = ld.base + 3;
    LevelDraft kept = ld;
    kept.positions.clear();
    kept.probs.reset_width(ld.probs.cols());
    kept.labels.clear();
    for (std::size_t i = 0; i < ld.positions.size(); ++i)
      if (ld.positions[i] >= first) {
        kept.positions.push_back(ld.positions[i]);
        kept.probs.append_row(ld.probs.row(i));
      }
    for (const auto& [p, l] : ld.labels)
      if (p >= first && kept.covers(p + 2)) kept.labels.emplace_back(p, l);
    if (!kept.positions.empty()) out.push_back(std::move(kept));
  }
  return out;
}

struct Contributor {
  SplitKind level;
  bool reused = false;
  friend bool operator==(const Contributor&, const Contributor&) = default;
};

struct DraftEntry {
  std::size_t position = 0;  // payload position; offset = position - base + 1
  std::vector<double> probs;
  std::vector<Contributor> contributors;
  Token token = 0;
};

/// Merged draft of one step: entries cover base+1 .. base+n contiguously.
struct DraftSet {
  std::size_t base = 0;
  std::vector<DraftEntry> entries;
  std::map<std::size_t, LabelLogits> labels;  // averaged, keyed by point start

  std::vector<Token> tokens() const {
    std::vector<Token> t;
    t.reserve(entries.size());
    for (const auto& e : entries) t.push_back(e.token);
    return t;
  }
  std::size_t offset(std::size_t k) const { return k + 2; }
};

/// Averages the distributions of every contributor per position (fresh
/// drafts plus reused ones still ahead of the main token), renormalises and
/// takes the greedy token. A lone contributor is taken as is. Coverage stops
/// at the first position nobody predicts or after `max_draft` positions.
inline DraftSet merge_drafts(const std::vector<LevelDraft>& fresh, const std::vector<const LevelDraft*>& reused,
                             std::size_t base, std::size_t max_draft, std::uint32_t bins) {
  std::vector<std::pair<const LevelDraft*, bool>> all;
  for (const auto& f : fresh) all.emplace_back(&f, false);
  for (const auto* r : reused)
    if (r) all.emplace_back(r, true);
  DraftSet ds;
  ds.base = base;
  for (std::size_t k = 1; k <= max_draft; ++k) {
    const std::size_t p = base + k;
    DraftEntry e;
    e.position = p;
    for (const auto& [ld, reused_flag] : all) {
      if (!ld->covers(p)) continue;
      auto row = ld->probs_at(p);
      if (e.probs.empty()) e.probs.assign(row.size(), 0.0);
      nn::add_into(e.probs, row);
      e.contributors.push_back({ld->level, reused_flag});
    }
    if (e.contributors.empty()) break;
    if (e.contributors.size() > 1) {
      double sum = 0.0;
      for (double& v : e.probs) sum += v /= static_cast<double>(e.contributors.size());
      for (double& v : e.probs) v /= sum;
    }
    e.token = model::greedy_token(e.probs, bins);
    ds.entries.push_back(std::move(e));
  }
  const std::size_t end = base + ds.entries.size();
  std::map<std::size_t, std::pair<LabelLogits, std::size_t>> acc;
  for (const auto& [ld, reused_flag] : all)
    for (const auto& [p, l] : ld->labels) {
      if (p <= base || p + 2 > end) continue;
      auto& [sum, n] = acc[p];
      for (int c = 0; c < 3; ++c) sum[c] += l[c];
      ++n;
    }
  for (auto& [p, sn] : acc) {
    LabelLogits l = sn.first;
    for (double& v : l) v /= static_cast<double>(sn.second);
    ds.labels[p] = l;
  }
  return ds;
}

/// Debug dump: one line per offset with contributors and the top three
/// tokens.
inline void dump(std::ostream& os, const DraftSet& ds) {
  os << "draft base=" << ds.base << " size=" << ds.entries.size() << "\n";
  for (std::size_t k = 0; k < ds.entries.size(); ++k) {
    const auto& e = ds.entries[k];
    os << "  offset " << ds.offset(k) << " pos " << e.position << " [";
    for (std::size_t c = 0; c < e.contributors.size(); ++c)
      os << (c ? "," : "") << model::to_string(e.contributors[c].level) << (e.contributors[c].reused ? "*" : "");
    os << "]";
    std::vector<std::size_t> idx(e.probs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t top = std::min<std::size_t>(3, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        return e.probs[a] > e.probs[b] || (e.probs[a] == e.probs[b] && a < b);
                      });
    for (std::size_t i = 0; i < top; ++i) os << " " << idx[i] << ":" << e.probs[idx[i]];
    os << "\n";
  }
}

}  // namespace flashmesh::speculate
