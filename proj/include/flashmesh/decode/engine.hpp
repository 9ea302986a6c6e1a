#pragma once

// Greedy baseline decoding and predict-correct-verify speculative decoding.
//
// Each speculative pass feeds the pending main token followed by the draft
// tokens, accepts the longest prefix of drafts that equals the backbone's own
// greedy choices, rolls the caches back to the accepted frontier and takes
// the backbone's next prediction as the new main token.

#include <chrono>
#include <optional>
#include <ostream>
#include <set>
#include <vector>

#include "flashmesh/model/backbone.hpp"
#include "flashmesh/speculate/correction.hpp"
#include "flashmesh/speculate/heads.hpp"

namespace flashmesh::decode {

using mesh::QVertex;
using mesh::Token;
using mesh::TokenSequence;
using model::Backbone;
using model::Condition;
using model::HourglassModel;
using model::SplitKind;

/// Where draft tokens come from. `teacher` copies them from a reference
/// sequence; `adversarial` copies them shifted so they never match.
enum class DraftSource { model, teacher, adversarial };

struct DecodeOptions {
  std::size_t budget = 1000;  // payload tokens to emit at most (EOS counts)
  DraftSource source = DraftSource::model;
  const TokenSequence* reference = nullptr;  // required by teacher/adversarial
  speculate::RuleSet rules;
  bool correction = true;
  std::ostream* trace = nullptr;
};

struct LevelStats {
  std::size_t draft_events = 0;  // steps where the level contributed
  std::size_t drafted = 0;       // draft positions it contributed to
  std::size_t accepted = 0;      // of those, positions accepted

  double accuracy() const { return drafted ? static_cast<double>(accepted) / static_cast<double>(drafted) : 0.0; }
  /// Accepted positions per draft event.
  double accepted_per_event() const {
    return draft_events ? static_cast<double>(accepted) / static_cast<double>(draft_events) : 0.0;
  }
};

struct AcceptStats {
  std::size_t forward_passes = 0;
  std::size_t tokens_emitted = 0;
  std::size_t positions_fed = 0;
  std::size_t drafts_fed = 0;
  std::size_t drafts_accepted = 0;
  std::size_t corrections = 0;
  LevelStats face, point, coord;

  double m_bar() const {
    return forward_passes ? static_cast<double>(tokens_emitted) / static_cast<double>(forward_passes) : 0.0;
  }
  LevelStats& level(SplitKind k) { return k == SplitKind::face ? face : k == SplitKind::point ? point : coord; }
  const LevelStats& level(SplitKind k) const {
    return k == SplitKind::face ? face : k == SplitKind::point ? point : coord;
  }
};

struct DecodeResult {
  TokenSequence tokens;  // BOS, payload, optional EOS
  AcceptStats stats;
  bool terminated = false;  // ended at EOS
  bool truncated = false;   // budget ran out inside a face
  double seconds = 0.0;
};

namespace detail {

inline bool truncated_mid_face(const TokenSequence& seq, bool terminated) {
  if (terminated) return false;
  return (seq.size() - 1) % 9 != 0;
}

class Clock {
public:
  Clock() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

private:
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace detail

/// Plain greedy decoding, one token per forward pass.
inline DecodeResult decode_baseline(const HourglassModel& m, const Condition& c, std::size_t budget) {
  detail::Clock clock;
  const mesh::Vocabulary voc = m.config.vocabulary();
  Backbone bb(m, c);
  DecodeResult r;
  r.tokens.push_back(voc.bos());
  Token next = voc.bos();
  while (r.stats.tokens_emitted < budget) {
    auto pass = bb.feed(std::span<const Token>(&next, 1));
    ++r.stats.forward_passes;
    ++r.stats.positions_fed;
    next = model::greedy_token(pass.probs.row(0), m.config.bins);
    r.tokens.push_back(next);
    ++r.stats.tokens_emitted;
    if (next == voc.eos()) {
      r.terminated = true;
      break;
    }
  }
  r.truncated = detail::truncated_mid_face(r.tokens, r.terminated);
  r.seconds = clock.seconds();
  return r;
}

inline DecodeResult decode_baseline(const HourglassModel& m, std::uint64_t seed, std::size_t budget) {
  return decode_baseline(m, model::random_condition(m.config, seed), budget);
}

/// Drafting state carried between passes: the latest face- and point-level
/// drafts, kept for reuse on steps that do not hit those split nodes.
struct DraftMemory {
  std::optional<speculate::LevelDraft> face, point;
};

namespace detail {

inline void add_history(const TokenSequence& out, std::size_t& points_done, std::set<QVertex>& history,
                        std::uint32_t bins) {
  const std::size_t payload = out.size() - 1;
  while (3 * points_done + 3 <= payload) {
    const std::size_t o = 1 + 3 * points_done;
    if (out[o] < bins && out[o + 1] < bins && out[o + 2] < bins)
      history.insert({static_cast<std::int32_t>(out[o]), static_cast<std::int32_t>(out[o + 1]),
                      static_cast<std::int32_t>(out[o + 2])});
    ++points_done;
  }
}

/// Model drafting for the main token at payload `base`; `tap` is the
/// coordinate hidden that predicted it.
inline speculate::DraftSet draft_step(const Backbone& bb, std::span<const double> tap, std::size_t base,
                                      DraftMemory& mem, const speculate::RuleSet& rules) {
  const auto& m = bb.model();
  const auto splits = model::split_schedule(base);
  std::vector<speculate::LevelDraft> fresh;
  bool face_fresh = false, point_fresh = false;
  if (splits.face && base >= 9 && !m.sp_face.empty()) {
    fresh.push_back(speculate::draft_face_level(bb, bb.face_taps().row(base / 9 - 1), base));
    face_fresh = true;
  }
  if (splits.point && base >= 3 && !m.sp_point.empty() && !(rules.rule_a && face_fresh)) {
    fresh.push_back(speculate::draft_point_level(bb, bb.point_taps().row(base / 3 - 1), base));
    point_fresh = true;
  }
  if (!m.sp_coord.empty()) fresh.push_back(speculate::draft_coord_level(bb, tap, base));
  auto pruned = speculate::apply_optimization_rules(std::move(fresh), rules);

  std::vector<const speculate::LevelDraft*> reused;
  if (!splits.face && mem.face) reused.push_back(&*mem.face);
  if (!splits.point && mem.point) reused.push_back(&*mem.point);
  auto ds = speculate::merge_drafts(pruned, reused, base, m.config.max_draft(), m.config.bins);

  if (splits.face) mem.face.reset();
  if (splits.point) mem.point.reset();
  for (auto& ld : pruned) {
    if (ld.level == SplitKind::face && face_fresh) mem.face = ld;
    if (ld.level == SplitKind::point && point_fresh) mem.point = ld;
  }
  return ds;
}

}  // namespace detail

inline DecodeResult decode_speculative(const HourglassModel& m, const Condition& c, const DecodeOptions& opt) {
  detail::Clock clock;
  const auto& cfg = m.config;
  const mesh::Vocabulary voc = cfg.vocabulary();
  if (opt.source != DraftSource::model && !opt.reference)
    throw ContractError("teacher/adversarial drafting needs a reference sequence");
  const std::size_t max_draft = cfg.max_draft();
  Backbone bb(m, c);
  DecodeResult r;
  AcceptStats& st = r.stats;
  r.tokens.push_back(voc.bos());
  Token main = voc.bos();
  std::vector<Token> drafts;
  std::vector<std::vector<speculate::Contributor>> contributors;
  DraftMemory mem;
  std::set<QVertex> history;
  std::size_t points_done = 0;

  auto copy_reference = [&](std::size_t emitted) {
    drafts.clear();
    contributors.clear();
    const auto& ref = *opt.reference;
    for (std::size_t k = 0; k < max_draft && emitted + 1 + k < ref.size(); ++k) {
      Token t = ref[emitted + 1 + k];
      if (opt.source == DraftSource::adversarial) t = voc.is_coord(t) ? (t + 1) % cfg.bins : 0;
      drafts.push_back(t);
      contributors.push_back({});
    }
  };
  if (opt.source != DraftSource::model) copy_reference(0);

  while (st.tokens_emitted < opt.budget) {
    const std::size_t room = opt.budget - st.tokens_emitted - 1;
    if (drafts.size() > room) {
      drafts.resize(room);
      contributors.resize(room);
    }
    std::vector<Token> window{main};
    window.insert(window.end(), drafts.begin(), drafts.end());
    const std::size_t fed_before = bb.fed();
    auto pass = bb.feed(window);
    ++st.forward_passes;
    st.positions_fed += window.size();
    st.drafts_fed += drafts.size();

    std::size_t matched = 0;
    bool ended = false;
    for (std::size_t k = 0; k < drafts.size(); ++k) {
      if (drafts[k] != model::greedy_token(pass.probs.row(k), cfg.bins)) break;
      ++matched;
      if (drafts[k] == voc.eos()) {
        ended = true;
        break;
      }
    }
    for (std::size_t k = 0; k < contributors.size(); ++k)
      for (const auto& ctr : contributors[k]) {
        auto& ls = st.level(ctr.level);
        ++ls.drafted;
        if (k < matched) ++ls.accepted;
      }
    st.drafts_accepted += matched;
    if (opt.trace)
      *opt.trace << "pass " << st.forward_passes << " fed " << window.size() << " accepted " << matched << "\n";

    r.tokens.insert(r.tokens.end(), drafts.begin(), drafts.begin() + static_cast<std::ptrdiff_t>(matched));
    st.tokens_emitted += matched;
    bb.truncate(fed_before + 1 + matched);
    if (ended) {
      r.terminated = true;
      break;
    }
    if (st.tokens_emitted == opt.budget) break;

    main = model::greedy_token(pass.probs.row(matched), cfg.bins);
    r.tokens.push_back(main);
    ++st.tokens_emitted;
    if (main == voc.eos()) {
      r.terminated = true;
      break;
    }
    if (st.tokens_emitted == opt.budget) break;

    const std::size_t base = st.tokens_emitted - 1;
    if (opt.source != DraftSource::model) {
      copy_reference(st.tokens_emitted);
      continue;
    }
    auto ds = detail::draft_step(bb, pass.coord_tap.row(matched), base, mem, opt.rules);
    drafts = ds.tokens();
    contributors.clear();
    std::set<SplitKind> levels;
    for (const auto& e : ds.entries) {
      contributors.push_back(e.contributors);
      for (const auto& ctr : e.contributors) levels.insert(ctr.level);
    }
    for (auto k : levels) ++st.level(k).draft_events;
    if (opt.trace) speculate::dump(*opt.trace, ds);
    if (opt.correction && !drafts.empty()) {
      detail::add_history(r.tokens, points_done, history, cfg.bins);
      auto batch = speculate::make_batch(base + 1, drafts, cfg.bins, history);
      speculate::assign_labels(batch, ds.labels);
      batch = speculate::correct_and_resort(std::move(batch));
      for (std::size_t k = 0; k < drafts.size(); ++k)
        if (batch.tokens[k] != drafts[k]) ++st.corrections;
      drafts = batch.tokens;
      if (opt.trace) speculate::dump(*opt.trace, batch);
    }
  }
  r.truncated = detail::truncated_mid_face(r.tokens, r.terminated);
  r.seconds = clock.seconds();
  return r;
}

inline DecodeResult decode_speculative(const HourglassModel& m, std::uint64_t seed, const DecodeOptions& opt) {
  return decode_speculative(m, model::random_condition(m.config, seed), opt);
}

/// First index where two sequences differ, or nullopt when equal.
inline std::optional<std::size_t> first_divergence(const TokenSequence& a, const TokenSequence& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i)
    if (a[i] != b[i]) return i;
  if (a.size() != b.size()) return n;
  return std::nullopt;
}

struct EquivalenceCase {
  std::uint64_t seed = 0;
  std::size_t baseline_length = 0, speculative_length = 0;
  std::optional<std::size_t> divergence;
  AcceptStats stats;
};

/// Runs baseline and speculative decoding for one condition seed.
inline EquivalenceCase check_equivalence(const HourglassModel& m, std::uint64_t seed, std::size_t budget,
                                         DecodeOptions opt = {}) {
  const auto cond = model::random_condition(m.config, seed);
  const auto base = decode_baseline(m, cond, budget);
  opt.budget = budget;
  const auto spec = decode_speculative(m, cond, opt);
  return {seed, base.tokens.size(), spec.tokens.size(), first_divergence(base.tokens, spec.tokens), spec.stats};
}

struct SpeedupReport {
  double m_bar = 0.0;
  double t_ori = 0.0;   // seconds per baseline token
  double t_ours = 0.0;  // seconds per speculative pass
  double speedup = 0.0;
  double tps = 0.0;     // tokens per second of the speculative run
};

/// S = T_ori * m / T_ours, with TPS from the speculative run's totals.
inline SpeedupReport speedup_report(const AcceptStats& st, double t_ori, double t_ours) {
  SpeedupReport r;
  r.m_bar = st.m_bar();
  r.t_ori = t_ori;
  r.t_ours = t_ours;
  r.speedup = t_ours > 0.0 ? t_ori * r.m_bar / t_ours : 0.0;
  const double total = t_ours * static_cast<double>(st.forward_passes);
  r.tps = total > 0.0 ? static_cast<double>(st.tokens_emitted) / total : 0.0;
  return r;
}

}  // namespace flashmesh::decode
