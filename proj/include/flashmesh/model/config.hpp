#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "flashmesh/mesh/codec.hpp"

namespace flashmesh::model {

/// Shape of the three-level hourglass and its speculative heads.
///
/// Draft counts are measured in coordinate tokens. A face- or point-level
/// draft starts at the main token's own point, so `draft_face` / `draft_point`
/// include the three positions that rule B later hands to the coordinate level.
struct ModelConfig {
  std::uint32_t layers_face = 1;
  std::uint32_t layers_point = 2;
  std::uint32_t layers_coord = 3;
  std::uint32_t model_dim = 64;
  std::uint32_t heads = 4;
  std::uint32_t ffn_dim = 128;
  std::uint32_t bins = mesh::kDefaultBins;
  std::uint32_t draft_face = 9;
  std::uint32_t draft_point = 9;
  std::uint32_t draft_coord = 2;
  std::uint32_t condition_len = 8;
  double gamma = 0.3;

  std::size_t vocab() const { return bins + 3; }
  mesh::Vocabulary vocabulary() const { return {bins}; }
  std::size_t head_dim() const { return model_dim / heads; }

  std::uint32_t coord_pre_layers() const { return layers_coord / 2; }
  std::uint32_t coord_post_layers() const { return layers_coord - coord_pre_layers(); }
  std::uint32_t point_pre_layers() const { return layers_point / 2; }
  std::uint32_t point_post_layers() const { return layers_point - point_pre_layers(); }

  std::uint32_t face_heads() const { return draft_face / 9; }
  std::uint32_t point_heads() const { return draft_point / 3; }

  /// Largest number of draft tokens (positions after the main token) any
  /// level can cover.
  std::size_t max_draft() const {
    std::size_t d = draft_coord;
    if (draft_point > 0) d = std::max<std::size_t>(d, draft_point - 1);
    if (draft_face > 0) d = std::max<std::size_t>(d, draft_face - 1);
    return d;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ContractError("invalid model config: " + m); };
    if (layers_face < 1 || layers_point < 1 || layers_coord < 1) fail("every level needs a block");
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0) fail("model_dim must be divisible by heads");
    if (head_dim() % 2 != 0) fail("head dimension must be even for rotary positions");
    if (ffn_dim == 0) fail("ffn_dim must be positive");
    if (bins < 2) fail("bins must be >= 2");
    if (draft_face % 9 != 0) fail("draft_face must be a multiple of 9");
    if (draft_point % 3 != 0) fail("draft_point must be a multiple of 3");
    if (draft_coord < 1) fail("draft_coord must be >= 1");
    if (condition_len < 1) fail("condition_len must be >= 1");
    if (!(gamma >= 0.0)) fail("gamma must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Flat `key = value` text, `#` comments. Unset keys keep their defaults.
inline ModelConfig parse_config(std::istream& is) {
  ModelConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ParseError("config line without '='", lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      auto u = [&] { return static_cast<std::uint32_t>(std::stoul(val)); };
      if (key == "layers_face") c.layers_face = u();
      else if (key == "layers_point") c.layers_point = u();
      else if (key == "layers_coord") c.layers_coord = u();
      else if (key == "model_dim") c.model_dim = u();
      else if (key == "heads") c.heads = u();
      else if (key == "ffn_dim") c.ffn_dim = u();
      else if (key == "bins") c.bins = u();
      else if (key == "draft_face") c.draft_face = u();
      else if (key == "draft_point") c.draft_point = u();
      else if (key == "draft_coord") c.draft_coord = u();
      else if (key == "condition_len") c.condition_len = u();
      else if (key == "gamma") c.gamma = std::stod(val);
      else throw ParseError("unknown config key '" + key + "'", lineno);
    } catch (const std::invalid_argument&) {
      throw ParseError("bad value for '" + key + "'", lineno);
    } catch (const std::out_of_range&) {
      throw ParseError("value out of range for '" + key + "'", lineno);
    }
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return parse_config(is);
}

inline std::string format_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "layers_face = " << c.layers_face << "\nlayers_point = " << c.layers_point
     << "\nlayers_coord = " << c.layers_coord << "\nmodel_dim = " << c.model_dim
     << "\nheads = " << c.heads << "\nffn_dim = " << c.ffn_dim << "\nbins = " << c.bins
     << "\ndraft_face = " << c.draft_face << "\ndraft_point = " << c.draft_point
     << "\ndraft_coord = " << c.draft_coord << "\ncondition_len = " << c.condition_len
     << "\ngamma = " << c.gamma << "\n";
  return os.str();
}

}  // namespace flashmesh::model
