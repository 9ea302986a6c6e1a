#pragma once

// Geometric repair of drafted points before verification. Only complete
// points lying wholly inside the draft window are touched; the main token
// never belongs to a batch.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <vector>

#include "flashmesh/mesh/codec.hpp"
#include "flashmesh/speculate/heads.hpp"

namespace flashmesh::speculate {

using mesh::QVertex;
using mesh::TokenSequence;

enum class PointLabel { historical = 0, new_point = 1, intra_batch = 2 };

inline const char* to_string(PointLabel l) {
  switch (l) {
    case PointLabel::historical: return "historical";
    case PointLabel::new_point: return "new";
    case PointLabel::intra_batch: return "intra_batch";
  }
  return "?";
}

struct DraftPoint {
  std::size_t position = 0;  // payload position of the first coordinate
  QVertex coords{};
  PointLabel label = PointLabel::new_point;
  bool corrected = false;
  bool skipped = false;  // intra-batch point with no eligible new point

  std::size_t face_slot() const { return position / 9; }
};

struct DraftBatch {
  std::size_t first = 0;  // payload position of tokens[0]
  TokenSequence tokens;
  std::vector<DraftPoint> points;  // complete drafted points in position order
  std::set<QVertex> history;       // vertices of the accepted prefix
  std::uint32_t bins = mesh::kDefaultBins;
};

/// Collects the complete, aligned points of a draft window. Scanning stops at
/// the first control token; everything after it is left alone.
inline DraftBatch make_batch(std::size_t first, TokenSequence tokens, std::uint32_t bins,
                             std::set<QVertex> history = {}) {
  DraftBatch b{first, std::move(tokens), {}, std::move(history), bins};
  const mesh::Vocabulary voc{bins};
  std::size_t coord_end = 0;
  while (coord_end < b.tokens.size() && voc.is_coord(b.tokens[coord_end])) ++coord_end;
  for (std::size_t p = (first + 2) / 3 * 3; p + 3 <= first + coord_end; p += 3) {
    const std::size_t o = p - first;
    b.points.push_back({p,
                        {static_cast<std::int32_t>(b.tokens[o]), static_cast<std::int32_t>(b.tokens[o + 1]),
                         static_cast<std::int32_t>(b.tokens[o + 2])}});
  }
  return b;
}

/// Argmax over the three label logits, lowest index on ties.
inline PointLabel classify(const LabelLogits& l) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < 3; ++c)
    if (l[c] > l[best]) best = c;
  return static_cast<PointLabel>(best);
}

inline std::vector<PointLabel> classify_points(const std::vector<LabelLogits>& logits) {
  std::vector<PointLabel> out;
  out.reserve(logits.size());
  for (const auto& l : logits) out.push_back(classify(l));
  return out;
}

/// Labels every batch point from logits keyed by point position; points
/// without logits are treated as new.
inline void assign_labels(DraftBatch& b, const std::map<std::size_t, LabelLogits>& logits) {
  for (auto& p : b.points) {
    auto it = logits.find(p.position);
    p.label = it == logits.end() ? PointLabel::new_point : classify(it->second);
  }
}

/// Reference labelling: historical iff the vertex is in the history,
/// intra-batch iff it repeats an earlier non-historical batch point, else new.
inline std::vector<PointLabel> derive_labels(const std::set<QVertex>& history, const std::vector<QVertex>& points) {
  std::vector<PointLabel> out;
  std::set<QVertex> seen;
  for (const auto& v : points) {
    if (history.count(v)) out.push_back(PointLabel::historical);
    else if (seen.count(v)) out.push_back(PointLabel::intra_batch);
    else {
      out.push_back(PointLabel::new_point);
      seen.insert(v);
    }
  }
  return out;
}

inline std::int64_t squared_distance(const QVertex& a, const QVertex& b) {
  std::int64_t s = 0;
  for (int i = 0; i < 3; ++i) {
    const std::int64_t d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

namespace detail {

inline void write_point(DraftBatch& b, const DraftPoint& p) {
  const std::size_t o = p.position - b.first;
  for (int a = 0; a < 3; ++a) b.tokens[o + a] = static_cast<Token>(p.coords[a]);
}

}  // namespace detail

/// Repairs intra-batch points. A point that already coincides with another
/// batch point is kept; otherwise it takes the coordinates of the nearest new
/// point outside its own face, or is flagged as skipped when none exists.
/// Coincidence is judged on the batch as given, which makes the repair
/// idempotent.
inline DraftBatch correct_batch(DraftBatch b) {
  const auto snapshot = b.points;
  for (std::size_t i = 0; i < b.points.size(); ++i) {
    auto& p = b.points[i];
    if (p.label != PointLabel::intra_batch) continue;
    bool shared = false;
    for (std::size_t j = 0; j < snapshot.size() && !shared; ++j)
      shared = j != i && snapshot[j].coords == snapshot[i].coords;
    if (shared) continue;
    std::optional<std::size_t> best;
    std::int64_t best_d = 0;
    for (std::size_t j = 0; j < snapshot.size(); ++j) {
      const auto& q = snapshot[j];
      if (q.label != PointLabel::new_point || q.face_slot() == p.face_slot()) continue;
      const auto d = squared_distance(q.coords, p.coords);
      if (!best || d < best_d) {
        best = j;
        best_d = d;
      }
    }
    if (!best) {
      p.skipped = true;
      continue;
    }
    p.coords = snapshot[*best].coords;
    p.corrected = true;
    detail::write_point(b, p);
  }
  return b;
}

/// Sorts the vertices of every complete drafted face z-y-x and the faces by
/// their lowest vertex, both stable. Incomplete faces stay where they are.
inline DraftBatch resort_batch(DraftBatch b) {
  const std::size_t end = b.first + b.tokens.size();
  std::vector<std::vector<DraftPoint>> faces;
  std::vector<std::size_t> face_starts;
  for (std::size_t i = 0; i + 2 < b.points.size(); ++i) {
    const std::size_t p = b.points[i].position;
    if (p % 9 != 0 || p + 9 > end) continue;
    if (b.points[i + 1].position != p + 3 || b.points[i + 2].position != p + 6) continue;
    faces.push_back({b.points[i], b.points[i + 1], b.points[i + 2]});
    face_starts.push_back(i);
    i += 2;
  }
  if (faces.empty()) return b;
  const auto by_coords = [](const DraftPoint& x, const DraftPoint& y) { return x.coords < y.coords; };
  for (auto& f : faces) std::stable_sort(f.begin(), f.end(), by_coords);
  auto sorted = faces;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& x, const auto& y) { return x[0].coords < y[0].coords; });
  for (std::size_t k = 0; k < sorted.size(); ++k)
    for (std::size_t j = 0; j < 3; ++j) {
      DraftPoint p = sorted[k][j];
      p.position = b.points[face_starts[k]].position + 3 * j;
      b.points[face_starts[k] + j] = p;
      detail::write_point(b, p);
    }
  return b;
}

/// Correction followed by re-sorting.
inline DraftBatch correct_and_resort(DraftBatch b) { return resort_batch(correct_batch(std::move(b))); }

inline void dump(std::ostream& os, const DraftBatch& b) {
  os << "batch first=" << b.first << " points=" << b.points.size() << "\n";
  for (const auto& p : b.points) {
    os << "  pos " << p.position << " (" << p.coords[0] << "," << p.coords[1] << "," << p.coords[2] << ") "
       << to_string(p.label);
    if (p.corrected) os << " corrected";
    if (p.skipped) os << " skipped";
    os << "\n";
  }
}

}  // namespace flashmesh::speculate
