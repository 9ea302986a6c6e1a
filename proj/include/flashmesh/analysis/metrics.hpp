#pragma once

// Surface sampling and geometric comparison: Chamfer and Hausdorff distances
// (brute force and uniform-grid accelerated) and bounding-box IoU.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "flashmesh/mesh/codec.hpp"
#include "flashmesh/util/random.hpp"

namespace flashmesh::analysis {

using mesh::Mesh;
using mesh::Vec3;

struct SurfaceSamples {
  std::vector<Vec3> points;
  std::vector<std::size_t> faces;  // source triangle of each sample
};

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const Vec3 x{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
  return 0.5 * std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
}

/// Area-weighted uniform samples on the triangles of `m`.
inline SurfaceSamples sample_surface_faces(const Mesh& m, std::size_t n, std::uint64_t seed) {
  std::vector<double> cum;
  cum.reserve(m.faces.size());
  double total = 0.0;
  for (const auto& f : m.faces) {
    for (auto i : f)
      if (i >= m.vertices.size()) throw ContractError("sample_surface: face index out of range");
    total += triangle_area(m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
    cum.push_back(total);
  }
  if (!(total > 0.0)) throw std::invalid_argument("sample_surface: mesh has zero surface area");
  util::Rng rng(seed);
  SurfaceSamples out;
  out.points.reserve(n);
  out.faces.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = rng.uniform() * total;
    auto fi = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
    fi = std::min(fi, cum.size() - 1);
    while (fi > 0 && cum[fi] == cum[fi - 1]) --fi;  // never land on a zero-area face
    const auto& f = m.faces[fi];
    const double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
    const double a = 1.0 - r1, b = r1 * (1.0 - r2), c = r1 * r2;
    const auto &p = m.vertices[f[0]], &q = m.vertices[f[1]], &r = m.vertices[f[2]];
    out.points.push_back({a * p[0] + b * q[0] + c * r[0], a * p[1] + b * q[1] + c * r[1], a * p[2] + b * q[2] + c * r[2]});
    out.faces.push_back(fi);
  }
  return out;
}

inline std::vector<Vec3> sample_surface(const Mesh& m, std::size_t n, std::uint64_t seed) {
  return sample_surface_faces(m, n, seed).points;
}

/// Samples a quantized mesh in bin units.
inline std::vector<Vec3> sample_surface(const mesh::QuantizedMesh& q, std::size_t n, std::uint64_t seed) {
  Mesh m;
  for (const auto& v : q.vertices)
    m.vertices.push_back({static_cast<double>(v[2]), static_cast<double>(v[1]), static_cast<double>(v[0])});
  m.faces = q.faces;
  return sample_surface(m, n, seed);
}

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Per-query nearest squared distances, O(|a||b|).
inline std::vector<double> nearest_sq_brute(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  std::vector<double> out(a.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (const auto& p : b) out[i] = std::min(out[i], squared_distance(a[i], p));
  return out;
}

/// Uniform grid over a point set for exact nearest-neighbour queries.
class PointGrid {
public:
  explicit PointGrid(const std::vector<Vec3>& pts) : pts_(pts) {
    if (pts.empty()) return;
    lo_ = hi_ = pts[0];
    for (const auto& p : pts)
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], p[a]);
        hi_[a] = std::max(hi_[a], p[a]);
      }
    double ext = 0.0;
    for (int a = 0; a < 3; ++a) ext = std::max(ext, hi_[a] - lo_[a]);
    const double per_axis = std::max(1.0, std::cbrt(static_cast<double>(pts.size())));
    h_ = ext > 0.0 ? ext / per_axis : 1.0;
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<std::int64_t>(std::floor((hi_[a] - lo_[a]) / h_)) + 1;
    cells_.assign(static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]), {});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto c = cell_of(pts[i]);
      cells_[index(c[0], c[1], c[2])].push_back(i);
    }
  }

  /// Smallest squared distance from q to the set (infinity when empty).
  double nearest_sq(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    if (pts_.empty()) return best;
    const auto c = cell_of(q);
    for (std::int64_t r = 0;; ++r) {
      bool covered = true;
      std::int64_t lo[3], hi[3];
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max<std::int64_t>(c[a] - r, 0);
        hi[a] = std::min<std::int64_t>(c[a] + r, dims_[a] - 1);
        if (c[a] - r > 0 || c[a] + r < dims_[a] - 1) covered = false;
      }
      for (std::int64_t x = lo[0]; x <= hi[0]; ++x)
        for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
          for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
            const std::int64_t cheb = std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])});
            if (cheb != r) continue;
            for (auto i : cells_[index(x, y, z)]) best = std::min(best, squared_distance(q, pts_[i]));
          }
      // Unvisited cells are at least r cells away, i.e. at distance >= r*h.
      const double bound = static_cast<double>(r) * h_;
      if (covered || best <= bound * bound) return best;
    }
  }

private:
  std::array<std::int64_t, 3> cell_of(const Vec3& p) const {
    std::array<std::int64_t, 3> c{};
    for (int a = 0; a < 3; ++a) c[a] = static_cast<std::int64_t>(std::floor((p[a] - lo_[a]) / h_));
    return c;
  }
  std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((x * dims_[1] + y) * dims_[2] + z);
  }

  const std::vector<Vec3>& pts_;
  Vec3 lo_{}, hi_{};
  double h_ = 1.0;
  std::array<std::int64_t, 3> dims_{1, 1, 1};
  std::vector<std::vector<std::size_t>> cells_;
};

inline std::vector<double> nearest_sq_grid(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  PointGrid g(b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = g.nearest_sq(a[i]);
  return out;
}

struct DistanceReport {
  double chamfer = 0.0;
  double hausdorff = 0.0;
};

enum class Search { brute, grid };

/// Chamfer: mean of the two directed mean nearest distances. Hausdorff: max
/// of the two directed max nearest distances. Euclidean, not squared.
inline DistanceReport distances(const std::vector<Vec3>& a, const std::vector<Vec3>& b, Search s = Search::grid) {
  if (a.empty() || b.empty()) throw std::invalid_argument("distances: empty point set");
  auto dir = [&](const std::vector<Vec3>& x, const std::vector<Vec3>& y, double& mean, double& mx) {
    const auto d2 = s == Search::brute ? nearest_sq_brute(x, y) : nearest_sq_grid(x, y);
    double sum = 0.0;
    mx = 0.0;
    for (double v : d2) {
      const double d = std::sqrt(v);
      sum += d;
      mx = std::max(mx, d);
    }
    mean = sum / static_cast<double>(x.size());
  };
  double ma, xa, mb, xb;
  dir(a, b, ma, xa);
  dir(b, a, mb, xb);
  return {0.5 * (ma + mb), std::max(xa, xb)};
}

inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b, Search s = Search::grid) {
  return distances(a, b, s).chamfer;
}

inline double hausdorff(const std::vector<Vec3>& a, const std::vector<Vec3>& b, Search s = Search::grid) {
  return distances(a, b, s).hausdorff;
}

struct Box {
  Vec3 lo{}, hi{};
};

inline Box bounding_box(const Mesh& m) {
  if (m.vertices.empty()) throw std::invalid_argument("bounding_box: mesh has no vertices");
  Box b{m.vertices[0], m.vertices[0]};
  for (const auto& v : m.vertices)
    for (int a = 0; a < 3; ++a) {
      b.lo[a] = std::min(b.lo[a], v[a]);
      b.hi[a] = std::max(b.hi[a], v[a]);
    }
  return b;
}

/// Axis-aligned box intersection over union. Two zero-volume boxes score 1
/// when identical and 0 otherwise.
inline double bbox_iou(const Box& a, const Box& b) {
  double inter = 1.0, va = 1.0, vb = 1.0;
  for (int i = 0; i < 3; ++i) {
    inter *= std::max(0.0, std::min(a.hi[i], b.hi[i]) - std::max(a.lo[i], b.lo[i]));
    va *= a.hi[i] - a.lo[i];
    vb *= b.hi[i] - b.lo[i];
  }
  const double uni = va + vb - inter;
  if (uni <= 0.0) return a.lo == b.lo && a.hi == b.hi ? 1.0 : 0.0;
  return inter / uni;
}

inline double bbox_iou(const Mesh& a, const Mesh& b) { return bbox_iou(bounding_box(a), bounding_box(b)); }

}  // namespace flashmesh::analysis
