#pragma once

// The generation condition: a fixed-length sequence of embedding vectors that
// every block and draft head cross-attends to.

#include <algorithm>
#include <vector>

#include "flashmesh/mesh/codec.hpp"
#include "flashmesh/model/weights.hpp"
#include "flashmesh/nn/kernels.hpp"

namespace flashmesh::model {

struct Condition {
  Matrix embeddings;  // condition_len x model_dim
};

/// Seed-derived condition in [-1, 1], used when no point cloud is supplied.
inline Condition random_condition(const ModelConfig& cfg, std::uint64_t seed) {
  Condition c{Matrix(cfg.condition_len, cfg.model_dim)};
  util::Rng rng(util::mix_seed(seed, util::fnv1a("condition")));
  for (double& x : c.embeddings.values()) x = rng.uniform(-1.0, 1.0);
  return c;
}

/// Quantises the points, embeds each as the mean of its three coordinate
/// token embeddings, sorts z-y-x and mean-pools contiguous chunks into the
/// condition slots. Slots that receive no points stay zero.
inline Condition featurize_point_cloud(const HourglassModel& m, const std::vector<mesh::Vec3>& points) {
  const auto& cfg = m.config;
  Condition c{Matrix(cfg.condition_len, cfg.model_dim)};
  if (points.empty()) return c;
  mesh::Mesh tmp;
  tmp.vertices = points;
  const auto frame = mesh::bounding_frame(tmp);
  std::vector<mesh::QVertex> q;
  q.reserve(points.size());
  for (const auto& p : points)
    q.push_back({mesh::quantize_value(p[2], frame.min[2], frame.extent[2], cfg.bins),
                 mesh::quantize_value(p[1], frame.min[1], frame.extent[1], cfg.bins),
                 mesh::quantize_value(p[0], frame.min[0], frame.extent[0], cfg.bins)});
  std::sort(q.begin(), q.end());
  const std::size_t slots = cfg.condition_len, n = q.size(), d = cfg.model_dim;
  for (std::size_t s = 0; s < slots; ++s) {
    const std::size_t lo = s * n / slots, hi = (s + 1) * n / slots;
    if (hi <= lo) continue;
    auto row = c.embeddings.row(s);
    for (std::size_t i = lo; i < hi; ++i)
      for (int a = 0; a < 3; ++a) {
        auto e = m.embed.row(static_cast<std::size_t>(q[i][a]));
        for (std::size_t j = 0; j < d; ++j) row[j] += e[j] / 3.0;
      }
    for (std::size_t j = 0; j < d; ++j) row[j] /= static_cast<double>(hi - lo);
  }
  return c;
}

/// Keys and values a cross-attention layer reads from the condition.
struct CrossKV {
  Matrix keys, values;
};

inline CrossKV project_condition(const Condition& c, const Matrix& wk, const Matrix& wv) {
  return {nn::matmul(c.embeddings, wk), nn::matmul(c.embeddings, wv)};
}

/// Cross-attention keys/values for every block and draft head, computed once
/// per decode session.
struct ConditionCache {
  std::vector<CrossKV> coord_pre, coord_post, point_pre, point_post, face;
  std::vector<CrossKV> sp_coord, sp_point, sp_face;

  ConditionCache() = default;
  ConditionCache(const HourglassModel& m, const Condition& c) {
    if (c.embeddings.rows() != m.config.condition_len || c.embeddings.cols() != m.config.model_dim)
      throw ContractError("condition shape does not match model config");
    auto blocks = [&](const std::vector<BlockW>& v, std::vector<CrossKV>& out) {
      for (const auto& b : v) out.push_back(project_condition(c, b.ck, b.cv));
    };
    auto heads = [&](const std::vector<SpHeadW>& v, std::vector<CrossKV>& out) {
      for (const auto& h : v) out.push_back(project_condition(c, h.ca_k, h.ca_v));
    };
    blocks(m.coord_pre, coord_pre);
    blocks(m.coord_post, coord_post);
    blocks(m.point_pre, point_pre);
    blocks(m.point_post, point_post);
    blocks(m.face, face);
    heads(m.sp_coord, sp_coord);
    heads(m.sp_point, sp_point);
    heads(m.sp_face, sp_face);
  }
};

}  // namespace flashmesh::model
