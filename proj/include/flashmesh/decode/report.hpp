#pragma once

// JSON views of decode statistics.

#include <optional>

#include <json.hpp>

#include "flashmesh/decode/engine.hpp"

namespace flashmesh::decode {

/// {forward_passes, tokens, m_bar, face_acc, point_acc, coord_acc, tps,
/// speedup}. Timing fields are null unless a speedup report is supplied, so
/// untimed runs serialise byte-identically.
inline nlohmann::ordered_json stats_json(const AcceptStats& st, const std::optional<SpeedupReport>& timing = {}) {
  nlohmann::ordered_json j;
  j["forward_passes"] = st.forward_passes;
  j["tokens"] = st.tokens_emitted;
  j["m_bar"] = st.m_bar();
  j["face_acc"] = st.face.accuracy();
  j["point_acc"] = st.point.accuracy();
  j["coord_acc"] = st.coord.accuracy();
  if (timing) {
    j["tps"] = timing->tps;
    j["speedup"] = timing->speedup;
  } else {
    j["tps"] = nullptr;
    j["speedup"] = nullptr;
  }
  return j;
}

/// Per-level detail: drafted/accepted positions, draft events and accepted
/// tokens per event.
inline nlohmann::ordered_json level_json(const AcceptStats& st) {
  nlohmann::ordered_json j;
  for (auto k : {SplitKind::face, SplitKind::point, SplitKind::coord}) {
    const auto& l = st.level(k);
    j[model::to_string(k)] = {{"draft_events", l.draft_events},
                              {"drafted", l.drafted},
                              {"accepted", l.accepted},
                              {"accepted_per_event", l.accepted_per_event()}};
  }
  return j;
}

}  // namespace flashmesh::decode
