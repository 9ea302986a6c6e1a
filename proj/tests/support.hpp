#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "flashmesh/model/weights.hpp"
#include "flashmesh/util/random.hpp"

namespace flashmesh::fmtest {

/// Small model that keeps every code path alive.
inline model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.layers_face = 1;
  c.layers_point = 2;
  c.layers_coord = 2;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.bins = 16;
  c.draft_face = 9;
  c.draft_point = 9;
  c.draft_coord = 2;
  c.condition_len = 4;
  return c;
}

inline nn::Matrix random_matrix(std::size_t r, std::size_t c, util::Rng& rng, double lo = -1.0, double hi = 1.0) {
  nn::Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

/// Fresh scratch directory removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    util::Rng rng(util::fnv1a(tag) ^ static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("flashmesh_" + tag + "_" + std::to_string(rng.next_u64()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::vector<std::string> fixture_files() {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(FLASHMESH_FIXTURES))
    if (e.path().extension() == ".obj") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace flashmesh::fmtest
