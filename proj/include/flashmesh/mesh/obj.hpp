#pragma once

// Minimal Wavefront OBJ reader/writer: `v` and `f` records only. Polygons are
// fan-triangulated; texture/normal references on faces are accepted and ignored.

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "flashmesh/mesh/codec.hpp"

namespace flashmesh::mesh {

namespace detail {

inline bool parse_double(std::string_view s, double& out) {
  // std::from_chars for double is available in libstdc++ 11.
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace detail

inline Mesh parse_obj(std::istream& is, const std::string& name = "<stream>") {
  Mesh m;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::int64_t> poly;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "v") {
      if (tok.size() < 4) throw ParseError(name + ": vertex needs 3 coordinates", lineno);
      Vec3 v{};
      for (int a = 0; a < 3; ++a)
        if (!detail::parse_double(tok[1 + a], v[a]))
          throw ParseError(name + ": bad vertex coordinate", lineno);
      m.vertices.push_back(v);
    } else if (tok[0] == "f") {
      if (tok.size() < 4) throw ParseError(name + ": face needs at least 3 vertices", lineno);
      poly.clear();
      for (std::size_t k = 1; k < tok.size(); ++k) {
        auto ref = tok[k].substr(0, tok[k].find('/'));
        std::int64_t idx = 0;
        auto res = std::from_chars(ref.data(), ref.data() + ref.size(), idx);
        if (res.ec != std::errc() || res.ptr != ref.data() + ref.size() || idx == 0)
          throw ParseError(name + ": bad face index", lineno);
        const auto n = static_cast<std::int64_t>(m.vertices.size());
        const std::int64_t zero_based = idx > 0 ? idx - 1 : n + idx;
        if (zero_based < 0 || zero_based >= n) throw ParseError(name + ": face index out of range", lineno);
        poly.push_back(zero_based);
      }
      for (std::size_t k = 1; k + 1 < poly.size(); ++k)
        m.faces.push_back({static_cast<std::uint32_t>(poly[0]), static_cast<std::uint32_t>(poly[k]),
                           static_cast<std::uint32_t>(poly[k + 1])});
    }
    // vt, vn, o, g, s, usemtl, mtllib, l, ... carry nothing we need.
  }
  return m;
}

inline Mesh load_obj(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return parse_obj(is, path);
}

inline void write_obj(std::ostream& os, const Mesh& m) {
  os.precision(17);
  for (const auto& v : m.vertices) os << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
  for (const auto& f : m.faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

inline void save_obj(const Mesh& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  write_obj(os, m);
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace flashmesh::mesh
