#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "flashmesh/decode/report.hpp"
#include "support.hpp"

using namespace flashmesh;
using namespace flashmesh::decode;

namespace {

const model::HourglassModel& tiny_model() {
  static const auto m = model::init_random(fmtest::tiny_config(), 41);
  return m;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void expect_stats_consistent(const DecodeResult& r) {
  const auto& st = r.stats;
  EXPECT_EQ(st.tokens_emitted, r.tokens.size() - 1);
  EXPECT_EQ(st.positions_fed, st.forward_passes + st.drafts_fed);
  EXPECT_LE(st.tokens_emitted, st.drafts_accepted + st.forward_passes);
  EXPECT_GE(st.tokens_emitted + 1, st.drafts_accepted + st.forward_passes);
  EXPECT_LE(st.drafts_accepted, st.drafts_fed);
  for (const auto* l : {&st.face, &st.point, &st.coord}) EXPECT_LE(l->accepted, l->drafted);
  if (st.forward_passes) EXPECT_GE(st.m_bar(), 1.0);
}

}  // namespace

TEST(Baseline, ZeroBudgetIsJustBos) {
  const auto r = decode_baseline(tiny_model(), 1, 0);
  EXPECT_EQ(r.tokens, (mesh::TokenSequence{tiny_model().config.vocabulary().bos()}));
  EXPECT_EQ(r.stats.forward_passes, 0u);
}

TEST(Baseline, DeterministicAndWithinBudget) {
  const auto a = decode_baseline(tiny_model(), 3, 120), b = decode_baseline(tiny_model(), 3, 120);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_LE(a.tokens.size(), 121u);
  EXPECT_EQ(a.stats.forward_passes, a.tokens.size() - 1);
  if (!a.terminated) EXPECT_EQ(a.tokens.size(), 121u);
  EXPECT_NE(decode_baseline(tiny_model(), 4, 120).tokens, a.tokens);
}

TEST(Speculative, ZeroAndOneTokenBudgets) {
  DecodeOptions opt;
  opt.budget = 0;
  EXPECT_EQ(decode_speculative(tiny_model(), 2, opt).tokens.size(), 1u);
  opt.budget = 1;
  EXPECT_EQ(decode_speculative(tiny_model(), 2, opt).tokens, decode_baseline(tiny_model(), 2, 1).tokens);
}

TEST(Speculative, TeacherDraftsGiveCeilPasses) {
  for (std::size_t budget : {1u, 8u, 9u, 10u, 90u, 200u}) {
    const auto base = decode_baseline(tiny_model(), 5, budget);
    DecodeOptions opt;
    opt.budget = budget;
    opt.source = DraftSource::teacher;
    opt.reference = &base.tokens;
    const auto r = decode_speculative(tiny_model(), 5, opt);
    EXPECT_EQ(r.tokens, base.tokens);
    const std::size_t n = r.stats.tokens_emitted;
    EXPECT_EQ(r.stats.forward_passes, ceil_div(n, tiny_model().config.max_draft() + 1)) << budget;
    EXPECT_DOUBLE_EQ(r.stats.m_bar() * static_cast<double>(r.stats.forward_passes), static_cast<double>(n));
    expect_stats_consistent(r);
  }
}

TEST(Speculative, AdversarialDraftsAcceptNothing) {
  const auto base = decode_baseline(tiny_model(), 6, 150);
  DecodeOptions opt;
  opt.budget = 150;
  opt.source = DraftSource::adversarial;
  opt.reference = &base.tokens;
  const auto r = decode_speculative(tiny_model(), 6, opt);
  EXPECT_EQ(r.tokens, base.tokens);
  EXPECT_EQ(r.stats.drafts_accepted, 0u);
  EXPECT_DOUBLE_EQ(r.stats.m_bar(), 1.0);
}

TEST(Speculative, ReferenceRequiredForTeacher) {
  DecodeOptions opt;
  opt.source = DraftSource::teacher;
  EXPECT_THROW(decode_speculative(tiny_model(), 1, opt), ContractError);
}

TEST(Speculative, MatchesBaselineAcrossSeedsAndVariants) {
  std::vector<DecodeOptions> variants(4);
  variants[1].rules.rule_a = false;
  variants[2].rules.rule_b = false;
  variants[3].correction = false;
  for (std::uint64_t seed = 0; seed < 6; ++seed)
    for (const auto& v : variants) {
      const auto c = check_equivalence(tiny_model(), seed, 180, v);
      EXPECT_FALSE(c.divergence) << "seed " << seed << " diverged at " << *c.divergence;
      EXPECT_EQ(c.baseline_length, c.speculative_length);
    }
}

TEST(Speculative, MatchesBaselineWithShortPointDrafts) {
  auto cfg = fmtest::tiny_config();
  cfg.draft_point = 3;
  cfg.model_dim = 8;
  const auto m = model::init_random(cfg, 77);
  for (std::uint64_t seed = 0; seed < 4; ++seed) EXPECT_FALSE(check_equivalence(m, seed, 150).divergence);
}

TEST(Speculative, StatsAreConsistent) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    DecodeOptions opt;
    opt.budget = 160;
    const auto r = decode_speculative(tiny_model(), seed, opt);
    expect_stats_consistent(r);
    EXPECT_LE(r.stats.drafts_fed, r.stats.forward_passes * tiny_model().config.max_draft());
    EXPECT_GT(r.stats.coord.draft_events, 0u);
  }
}

TEST(Speculative, OutputIsAGreedyFixedPoint) {
  DecodeOptions opt;
  opt.budget = 100;
  const auto r = decode_speculative(tiny_model(), 9, opt);
  model::Backbone bb(tiny_model(), model::random_condition(tiny_model().config, 9));
  const auto pass = bb.feed(std::span<const mesh::Token>(r.tokens.data(), r.tokens.size() - 1));
  for (std::size_t i = 0; i + 1 < r.tokens.size(); ++i)
    EXPECT_EQ(model::greedy_token(pass.probs.row(i), tiny_model().config.bins), r.tokens[i + 1]) << i;
}

TEST(Speculative, TraceListsPasses) {
  std::ostringstream trace;
  DecodeOptions opt;
  opt.budget = 30;
  opt.trace = &trace;
  const auto r = decode_speculative(tiny_model(), 1, opt);
  EXPECT_NE(trace.str().find("pass " + std::to_string(r.stats.forward_passes) + " fed"), std::string::npos);
}

TEST(SpeedupReport, IdentityCases) {
  AcceptStats st;
  st.forward_passes = 10;
  st.tokens_emitted = 10;
  EXPECT_DOUBLE_EQ(speedup_report(st, 0.01, 0.01).speedup, 1.0);
  st.tokens_emitted = 20;
  const auto r = speedup_report(st, 0.01, 0.01);
  EXPECT_DOUBLE_EQ(r.speedup, 2.0);
  EXPECT_DOUBLE_EQ(r.tps, 200.0);
  EXPECT_EQ(speedup_report(st, 0.01, 0.0).speedup, 0.0);
}

TEST(SpeedupReport, EqualsWallClockRatio) {
  AcceptStats st;
  st.forward_passes = 37;
  st.tokens_emitted = 301;
  const double baseline_seconds = 4.2, speculative_seconds = 1.3;
  const auto r = speedup_report(st, baseline_seconds / 301.0, speculative_seconds / 37.0);
  EXPECT_NEAR(r.speedup, baseline_seconds / speculative_seconds, 1e-12);
  EXPECT_NEAR(r.tps, 301.0 / speculative_seconds, 1e-9);
}

TEST(StatsJson, TimingFieldsNullUnlessRequested) {
  AcceptStats st;
  st.forward_passes = 4;
  st.tokens_emitted = 12;
  const auto j = stats_json(st);
  EXPECT_TRUE(j["tps"].is_null());
  EXPECT_TRUE(j["speedup"].is_null());
  EXPECT_EQ(j["m_bar"].get<double>(), 3.0);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"forward_passes", "tokens", "m_bar", "face_acc", "point_acc", "coord_acc",
                                            "tps", "speedup"}));
  const auto t = stats_json(st, speedup_report(st, 0.02, 0.03));
  EXPECT_NEAR(t["speedup"].get<double>(), 2.0, 1e-12);
  EXPECT_TRUE(level_json(st).contains("face"));
}

TEST(FirstDivergence, Cases) {
  EXPECT_FALSE(first_divergence({1, 2, 3}, {1, 2, 3}));
  EXPECT_EQ(first_divergence({1, 2, 3}, {1, 5, 3}), 1u);
  EXPECT_EQ(first_divergence({1, 2}, {1, 2, 3}), 2u);
  EXPECT_EQ(first_divergence({}, {4}), 0u);
}
