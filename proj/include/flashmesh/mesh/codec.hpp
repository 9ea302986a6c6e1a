#pragma once

// Triangle meshes <-> canonical coordinate-token sequences.
//
// Layout: BOS, then for every face its three vertices as (z, y, x) bins, then
// EOS. Canonical form sorts vertices z-then-y-then-x, sorts each face's
// vertices the same way and orders faces by their lowest vertex (stable on
// ties), so the token stream is a deterministic function of the geometry.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flashmesh/nn/matrix.hpp"

namespace flashmesh {

class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

private:
  std::size_t offset_;
};

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace mesh {

using Token = std::uint32_t;
using TokenSequence = std::vector<Token>;

inline constexpr std::uint32_t kDefaultBins = 128;

/// Coordinate bins occupy [0, bins); control symbols follow.
struct Vocabulary {
  std::uint32_t bins = kDefaultBins;

  Token bos() const { return bins; }
  Token eos() const { return bins + 1; }
  Token pad() const { return bins + 2; }
  std::size_t size() const { return bins + 3; }
  bool is_coord(Token t) const { return t < bins; }
};

using Vec3 = std::array<double, 3>;               // x, y, z
using QVertex = std::array<std::int32_t, 3>;      // z, y, x bins
using Face = std::array<std::uint32_t, 3>;

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
};

struct QuantizedMesh {
  std::uint32_t bins = kDefaultBins;
  std::vector<QVertex> vertices;
  std::vector<Face> faces;

  friend bool operator==(const QuantizedMesh&, const QuantizedMesh&) = default;
};

/// Per-axis bounding box used to map between world units and bins.
struct QuantizationFrame {
  Vec3 min{};
  Vec3 extent{};
};

struct QuantizeResult {
  QuantizedMesh mesh;
  QuantizationFrame frame;
};

inline std::int32_t quantize_value(double v, double lo, double extent, std::uint32_t bins) {
  if (extent <= 0.0) return static_cast<std::int32_t>((bins - 1) / 2);
  const double t = (v - lo) / extent * static_cast<double>(bins - 1);
  const auto b = static_cast<std::int32_t>(std::floor(t + 0.5));
  return std::clamp<std::int32_t>(b, 0, static_cast<std::int32_t>(bins - 1));
}

inline QuantizationFrame bounding_frame(const Mesh& m) {
  QuantizationFrame f;
  Vec3 hi{};
  for (int a = 0; a < 3; ++a) {
    f.min[a] = m.vertices.front()[a];
    hi[a] = m.vertices.front()[a];
  }
  for (const auto& v : m.vertices)
    for (int a = 0; a < 3; ++a) {
      f.min[a] = std::min(f.min[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
  for (int a = 0; a < 3; ++a) f.extent[a] = hi[a] - f.min[a];
  return f;
}

/// Min-max normalises each axis into [0, bins-1], rounds half-up, merges
/// vertices that land in the same bin triple and drops faces that collapse.
inline QuantizeResult quantize(const Mesh& m, std::uint32_t bins = kDefaultBins) {
  if (m.vertices.empty() || m.faces.empty()) throw ContractError("quantize: empty mesh");
  if (bins < 2) throw ContractError("quantize: bins must be >= 2");
  QuantizeResult out;
  out.frame = bounding_frame(m);
  out.mesh.bins = bins;
  std::map<QVertex, std::uint32_t> index;
  std::vector<std::uint32_t> remap(m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    const auto& v = m.vertices[i];
    QVertex q{quantize_value(v[2], out.frame.min[2], out.frame.extent[2], bins),
              quantize_value(v[1], out.frame.min[1], out.frame.extent[1], bins),
              quantize_value(v[0], out.frame.min[0], out.frame.extent[0], bins)};
    auto [it, inserted] = index.try_emplace(q, static_cast<std::uint32_t>(out.mesh.vertices.size()));
    if (inserted) out.mesh.vertices.push_back(q);
    remap[i] = it->second;
  }
  for (const auto& f : m.faces) {
    Face g{remap.at(f[0]), remap.at(f[1]), remap.at(f[2])};
    if (g[0] == g[1] || g[1] == g[2] || g[0] == g[2]) continue;
    out.mesh.faces.push_back(g);
  }
  return out;
}

inline double dequantize_value(std::int32_t b, double lo, double extent, std::uint32_t bins) {
  if (extent <= 0.0) return lo;
  return lo + static_cast<double>(b) / static_cast<double>(bins - 1) * extent;
}

inline Mesh dequantize(const QuantizedMesh& q, const QuantizationFrame& f) {
  Mesh m;
  m.faces = q.faces;
  m.vertices.reserve(q.vertices.size());
  for (const auto& v : q.vertices)
    m.vertices.push_back({dequantize_value(v[2], f.min[0], f.extent[0], q.bins),
                          dequantize_value(v[1], f.min[1], f.extent[1], q.bins),
                          dequantize_value(v[0], f.min[2], f.extent[2], q.bins)});
  return m;
}

/// Bin centres mapped into the unit cube centred at the origin.
inline Mesh dequantize_unit(const QuantizedMesh& q) {
  QuantizationFrame f;
  f.min = {-0.5, -0.5, -0.5};
  f.extent = {1.0, 1.0, 1.0};
  return dequantize(q, f);
}

// ---------------------------------------------------------------------------
// Canonical ordering

/// Face-order predicate on explicit vertex triples: each face non-decreasing
/// in z-y-x order and faces non-decreasing by their lowest vertex.
inline bool is_canonical_face_order(const std::vector<std::array<QVertex, 3>>& faces) {
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto& f = faces[i];
    if (f[1] < f[0] || f[2] < f[1]) return false;
    if (i > 0 && f[0] < faces[i - 1][0]) return false;
  }
  return true;
}

inline std::vector<std::array<QVertex, 3>> face_triples(const QuantizedMesh& q) {
  std::vector<std::array<QVertex, 3>> out;
  out.reserve(q.faces.size());
  for (const auto& f : q.faces) out.push_back({q.vertices[f[0]], q.vertices[f[1]], q.vertices[f[2]]});
  return out;
}

/// True when vertices are unique, sorted and all referenced, faces are
/// non-degenerate with ascending indices, and faces are ordered by lowest vertex.
inline bool is_canonical(const QuantizedMesh& q) {
  for (std::size_t i = 1; i < q.vertices.size(); ++i)
    if (!(q.vertices[i - 1] < q.vertices[i])) return false;
  std::vector<bool> used(q.vertices.size(), false);
  for (std::size_t i = 0; i < q.faces.size(); ++i) {
    const auto& f = q.faces[i];
    if (f[2] >= q.vertices.size()) return false;
    if (!(f[0] < f[1] && f[1] < f[2])) return false;
    if (i > 0 && f[0] < q.faces[i - 1][0]) return false;
    for (auto v : f) used[v] = true;
  }
  return std::all_of(used.begin(), used.end(), [](bool b) { return b; });
}

/// Merges duplicate vertices, drops degenerate faces and unreferenced
/// vertices, then sorts into canonical order. Face ties keep input order.
inline QuantizedMesh canonicalize(const QuantizedMesh& q) {
  std::vector<std::array<QVertex, 3>> tri;
  tri.reserve(q.faces.size());
  for (const auto& f : q.faces) {
    if (f[0] >= q.vertices.size() || f[1] >= q.vertices.size() || f[2] >= q.vertices.size())
      throw ContractError("canonicalize: face index out of range");
    std::array<QVertex, 3> t{q.vertices[f[0]], q.vertices[f[1]], q.vertices[f[2]]};
    std::stable_sort(t.begin(), t.end());
    if (t[0] == t[1] || t[1] == t[2]) continue;
    tri.push_back(t);
  }
  std::stable_sort(tri.begin(), tri.end(),
                   [](const auto& a, const auto& b) { return a[0] < b[0]; });
  std::vector<QVertex> verts;
  for (const auto& t : tri) verts.insert(verts.end(), t.begin(), t.end());
  std::sort(verts.begin(), verts.end());
  verts.erase(std::unique(verts.begin(), verts.end()), verts.end());
  QuantizedMesh out;
  out.bins = q.bins;
  out.vertices = verts;
  auto idx = [&](const QVertex& v) {
    return static_cast<std::uint32_t>(std::lower_bound(verts.begin(), verts.end(), v) - verts.begin());
  };
  out.faces.reserve(tri.size());
  for (const auto& t : tri) out.faces.push_back({idx(t[0]), idx(t[1]), idx(t[2])});
  return out;
}

// ---------------------------------------------------------------------------
// Tokens

inline TokenSequence to_tokens(const QuantizedMesh& q) {
  const QuantizedMesh c = is_canonical(q) ? q : canonicalize(q);
  const Vocabulary voc{c.bins};
  TokenSequence seq;
  seq.reserve(2 + 9 * c.faces.size());
  seq.push_back(voc.bos());
  for (const auto& f : c.faces)
    for (auto vi : f)
      for (auto b : c.vertices[vi]) seq.push_back(static_cast<Token>(b));
  seq.push_back(voc.eos());
  return seq;
}

struct DecodedTokens {
  QuantizedMesh mesh;
  bool truncated = false;  // a partial trailing face was dropped
  bool terminated = false; // an EOS was present
};

/// Parses BOS, coordinate payload, optional EOS and trailing PADs. A partial
/// final face is dropped. The result is returned in canonical form.
inline DecodedTokens decode_tokens(const TokenSequence& seq, std::uint32_t bins) {
  const Vocabulary voc{bins};
  if (seq.empty() || seq[0] != voc.bos()) throw ParseError("token stream must start with BOS", 0);
  std::vector<QVertex> coords;
  std::vector<Token> payload;
  DecodedTokens out;
  std::size_t i = 1;
  for (; i < seq.size(); ++i) {
    const Token t = seq[i];
    if (voc.is_coord(t)) {
      payload.push_back(t);
      continue;
    }
    if (t == voc.eos()) {
      out.terminated = true;
      ++i;
      break;
    }
    throw ParseError("unexpected control token " + std::to_string(t), i);
  }
  for (; i < seq.size(); ++i)
    if (seq[i] != voc.pad()) throw ParseError("only PAD may follow EOS", i);

  const std::size_t full = payload.size() / 9;
  out.truncated = payload.size() % 9 != 0;
  QuantizedMesh raw;
  raw.bins = bins;
  std::map<QVertex, std::uint32_t> index;
  for (std::size_t f = 0; f < full; ++f) {
    Face face{};
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t o = 9 * f + 3 * k;
      QVertex v{static_cast<std::int32_t>(payload[o]), static_cast<std::int32_t>(payload[o + 1]),
                static_cast<std::int32_t>(payload[o + 2])};
      auto [it, inserted] = index.try_emplace(v, static_cast<std::uint32_t>(raw.vertices.size()));
      if (inserted) raw.vertices.push_back(v);
      face[k] = it->second;
    }
    raw.faces.push_back(face);
  }
  out.mesh = canonicalize(raw);
  return out;
}

inline QuantizedMesh from_tokens(const TokenSequence& seq, std::uint32_t bins) {
  return decode_tokens(seq, bins).mesh;
}

/// Newline-delimited decimal ids with a `# bins=Q` header line.
inline void write_token_file(const std::string& path, const TokenSequence& seq, std::uint32_t bins) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "# flashmesh tokens\n# bins=" << bins << "\n";
  for (Token t : seq) os << t << "\n";
  if (!os) throw IoError("write failed: " + path);
}

struct TokenFile {
  std::uint32_t bins = kDefaultBins;
  TokenSequence tokens;
};

inline TokenFile read_token_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  TokenFile tf;
  bool have_bins = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto pos = line.find("bins=");
      if (pos != std::string::npos) {
        tf.bins = static_cast<std::uint32_t>(std::stoul(line.substr(pos + 5)));
        have_bins = true;
      }
      continue;
    }
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(line, &used);
    } catch (const std::exception&) {
      throw ParseError("bad token id in " + path, lineno);
    }
    if (used != line.size() && line.find_first_not_of(" \t\r", used) != std::string::npos)
      throw ParseError("bad token id in " + path, lineno);
    tf.tokens.push_back(static_cast<Token>(v));
  }
  if (!have_bins) throw ParseError("missing '# bins=' header in " + path, 0);
  const Vocabulary voc{tf.bins};
  for (std::size_t i = 0; i < tf.tokens.size(); ++i)
    if (tf.tokens[i] >= voc.size()) throw ParseError("token id out of vocabulary", i);
  return tf;
}

}  // namespace mesh
}  // namespace flashmesh
