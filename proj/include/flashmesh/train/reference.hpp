#pragma once

// Teacher-forced full-sequence forward of the hourglass and of every draft
// head, recorded on a tape. It is the batch counterpart of the incremental
// Backbone and the drafting code, written independently of both.

#include <vector>

#include "flashmesh/autodiff/tape.hpp"
#include "flashmesh/model/backbone.hpp"

namespace flashmesh::train {

using autodiff::Tape;
using Var = Tape::Var;
using model::HourglassModel;
using model::SplitKind;
using nn::Matrix;

struct DraftOut {
  SplitKind level = SplitKind::coord;
  std::size_t base = 0;                // payload position of the main token
  std::vector<std::size_t> positions;  // payload positions of the logit rows
  std::vector<Var> rows;               // 1 x vocab logits per position
  std::vector<std::pair<std::size_t, Var>> labels;  // (point start, 1x3 logits)
};

struct ReferenceOutput {
  Var logits;            // next-token logits after each fed token
  Matrix probs;          // softmax of logits
  Matrix coord_tap, point_tap, face_tap;
  Var point_labels;      // backbone label head, one row per complete point
  bool has_points = false;
  std::vector<DraftOut> drafts;
};

namespace detail {

struct BlockOut {
  Var x, keys, values;
};

inline std::vector<std::size_t> iota(std::size_t a, std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = a + i;
  return v;
}

inline Var ln(Tape& t, Var x, const model::LayerNormW& w) { return t.layer_norm(x, t.param(w.gain), t.param(w.bias)); }
inline Var lin(Tape& t, Var x, const model::LinearW& w) { return t.linear(x, t.param(w.w), t.param(w.b)); }

inline Var ffn(Tape& t, Var x, const model::FfnW& f) {
  Var h = t.gelu(t.linear(x, t.param(f.w1), t.param(f.b1)));
  return t.linear(h, t.param(f.w2), t.param(f.b2));
}

inline Var cross(Tape& t, Var a, const Matrix& wq, const Matrix& wk, const Matrix& wv, const Matrix& wo, Var cond,
                 std::size_t heads) {
  Var q = t.matmul(a, t.param(wq));
  Var k = t.matmul(cond, t.param(wk));
  Var v = t.matmul(cond, t.param(wv));
  const std::size_t n = t.value(a).rows(), m = t.value(cond).rows();
  return t.matmul(t.attention(q, k, v, heads, std::vector<std::size_t>(n, m)), t.param(wo));
}

inline BlockOut block(Tape& t, const model::BlockW& w, Var x, Var cond, std::size_t heads) {
  const std::size_t n = t.value(x).rows();
  auto pos = iota(0, n);
  Var a = ln(t, x, w.ln_self);
  Var q = t.rope(t.matmul(a, t.param(w.wq)), heads, pos);
  Var k = t.rope(t.matmul(a, t.param(w.wk)), heads, pos);
  Var v = t.matmul(a, t.param(w.wv));
  Var att = t.attention(q, k, v, heads, iota(1, n));
  x = t.add(x, t.matmul(att, t.param(w.wo)));
  x = t.add(x, cross(t, ln(t, x, w.ln_cross), w.cq, w.ck, w.cv, w.co, cond, heads));
  x = t.add(x, ffn(t, ln(t, x, w.ln_ffn), w.ffn));
  return {x, k, v};
}

/// Runs a stack of blocks; `tap` receives the input of the last block and
/// `first` the keys/values of the first one.
inline Var stack(Tape& t, const std::vector<model::BlockW>& blocks, Var x, Var cond, std::size_t heads, Var* tap,
                 BlockOut* first) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (tap && b + 1 == blocks.size()) *tap = x;
    auto o = block(t, blocks[b], x, cond, heads);
    if (first && b == 0) *first = o;
    x = o.x;
  }
  return x;
}

inline Var sp(Tape& t, const model::SpHeadW& w, Var h, Var cond, std::size_t heads) {
  Var u = t.add(h, t.matmul(t.matmul(ln(t, h, w.ln_self), t.param(w.sa_v)), t.param(w.sa_o)));
  u = t.add(u, cross(t, ln(t, u, w.ln_cross), w.ca_q, w.ca_k, w.ca_v, w.ca_o, cond, heads));
  return t.add(lin(t, u, w.out), h);
}

/// Fusion block over precomputed projected cache keys/values.
inline Var hf(Tape& t, const model::HfBlockW& w, std::size_t slot, Var h, Var keys, Var values, std::size_t visible,
              std::size_t heads) {
  Var q = t.matmul(h, t.param(w.wq[slot]));
  Var att = t.attention(q, keys, values, heads, {visible});
  return t.add(h, ffn(t, att, w.ffn[slot]));
}

inline Var head(Tape& t, const HourglassModel& m, Var h) { return t.matmul(ln(t, h, m.final_ln), t.param(m.out_head)); }

struct Projected {
  Var keys, values;
};

inline Projected project(Tape& t, const BlockOut& src, const model::HfBlockW& w) {
  return {t.matmul(src.keys, t.param(w.wk)), t.matmul(src.values, t.param(w.wv))};
}

}  // namespace detail

/// Teacher-forced forward over `seq` (BOS first). With `drafts`, every draft
/// head is evaluated at every payload position where drafting can launch.
inline ReferenceOutput reference_forward(Tape& t, const HourglassModel& m, const model::Condition& c,
                                         const mesh::TokenSequence& seq, bool drafts = true) {
  using namespace detail;
  const auto& cfg = m.config;
  const std::size_t d = cfg.model_dim, heads = cfg.heads, n = seq.size();
  if (n == 0) throw ContractError("reference_forward: empty sequence");
  Var cond = t.constant(c.embeddings);
  ReferenceOutput out;

  Var x = t.gather_rows(t.param(m.embed), std::vector<std::size_t>(seq.begin(), seq.end()));
  x = stack(t, m.coord_pre, x, cond, heads, nullptr, nullptr);
  const Var coord_hidden = x;

  const std::size_t groups = (n - 1) / 3, faces = groups / 3;
  Var point_tap{}, face_tap{};
  BlockOut point_first{};
  bool have_face = false;
  if (groups > 0) {
    Var g = t.reshape(t.gather_rows(coord_hidden, iota(1, 3 * groups)), groups, 3 * d);
    Var p = lin(t, g, m.shorten_cp);
    p = stack(t, m.point_pre, p, cond, heads, nullptr, nullptr);
    const Var point_hidden = p;
    if (faces > 0) {
      Var fg = t.reshape(t.gather_rows(point_hidden, iota(0, 3 * faces)), faces, 3 * d);
      Var y = lin(t, fg, m.shorten_pf);
      y = stack(t, m.face, y, cond, heads, &face_tap, nullptr);
      have_face = true;
      Var up = t.reshape(lin(t, y, m.upsample_fp), 3 * faces, d);
      p = t.add(p, t.place_rows(up, 3, groups));
    }
    p = stack(t, m.point_post, p, cond, heads, &point_tap, &point_first);
    out.point_labels = lin(t, p, m.label_head);
    out.has_points = true;
    Var up = t.reshape(lin(t, p, m.upsample_pc), 3 * groups, d);
    x = t.add(x, t.place_rows(up, 3, n));
  }
  Var coord_tap{};
  BlockOut coord_first{};
  x = stack(t, m.coord_post, x, cond, heads, &coord_tap, &coord_first);
  out.logits = head(t, m, x);
  out.probs = nn::softmax_rows(t.value(out.logits));
  out.coord_tap = t.value(coord_tap);
  if (groups > 0) out.point_tap = t.value(point_tap);
  if (have_face) out.face_tap = t.value(face_tap);
  if (!drafts) return out;

  const Projected pc = project(t, coord_first, m.hf_point_coord);
  const Projected fc = project(t, coord_first, m.hf_face_coord);
  Projected fp{};
  if (groups > 0) fp = project(t, point_first, m.hf_face_point);

  // Point feature -> three coordinate rows fused against the coordinate
  // cache visible when drafting at `base`.
  auto expand = [&](Var p, const model::HfBlockW& w, const Projected& cache, std::size_t base, std::size_t first,
                    DraftOut& dr) {
    Var up = lin(t, p, m.upsample_pc);
    for (std::size_t j = 0; j < 3; ++j) {
      Var r = hf(t, w, j, t.slice_cols(up, j * d, d), cache.keys, cache.values, base + 1, heads);
      dr.positions.push_back(first + j);
      dr.rows.push_back(head(t, m, r));
    }
  };

  for (std::size_t base = 0; base < n; ++base) {
    const auto splits = model::split_schedule(base);
    if (splits.face && base >= 9 && base / 9 - 1 < faces && !m.sp_face.empty()) {
      DraftOut dr{SplitKind::face, base, {}, {}, {}};
      Var tap = t.gather_rows(face_tap, {base / 9 - 1});
      for (std::size_t k = 0; k < m.sp_face.size(); ++k) {
        Var h = sp(t, m.sp_face[k], tap, cond, heads);
        Var up = lin(t, h, m.upsample_fp);
        for (std::size_t s = 0; s < 3; ++s) {
          Var p = hf(t, m.hf_face_point, s, t.slice_cols(up, s * d, d), fp.keys, fp.values, base / 3, heads);
          const std::size_t first = base + 9 * k + 3 * s;
          dr.labels.emplace_back(first, lin(t, p, m.label_head));
          expand(p, m.hf_face_coord, fc, base, first, dr);
        }
      }
      out.drafts.push_back(std::move(dr));
    }
    if (splits.point && base >= 3 && base / 3 - 1 < groups && !m.sp_point.empty()) {
      DraftOut dr{SplitKind::point, base, {}, {}, {}};
      Var tap = t.gather_rows(point_tap, {base / 3 - 1});
      for (std::size_t k = 0; k < m.sp_point.size(); ++k) {
        Var h = sp(t, m.sp_point[k], tap, cond, heads);
        const std::size_t first = base + 3 * k;
        dr.labels.emplace_back(first, lin(t, h, m.label_head));
        expand(h, m.hf_point_coord, pc, base, first, dr);
      }
      out.drafts.push_back(std::move(dr));
    }
    if (!m.sp_coord.empty()) {
      DraftOut dr{SplitKind::coord, base, {}, {}, {}};
      Var tap = t.gather_rows(coord_tap, {base});
      for (std::size_t k = 0; k < m.sp_coord.size(); ++k) {
        dr.positions.push_back(base + k + 1);
        dr.rows.push_back(head(t, m, sp(t, m.sp_coord[k], tap, cond, heads)));
      }
      out.drafts.push_back(std::move(dr));
    }
  }
  return out;
}

}  // namespace flashmesh::train
