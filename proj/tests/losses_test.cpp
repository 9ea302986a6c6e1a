#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "flashmesh/train/losses.hpp"
#include "support.hpp"

using namespace flashmesh;
using namespace flashmesh::train;
using nn::Matrix;

namespace {

double naive_ce(const Matrix& probs, const std::vector<Token>& targets) {
  double s = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) s += -std::log(probs(r, targets[r]));
  return s / static_cast<double>(targets.size());
}

double naive_label_ce(const std::vector<LabelLogits>& logits, const std::vector<PointLabel>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = std::exp(logits[i][0]) + std::exp(logits[i][1]) + std::exp(logits[i][2]);
    s += -std::log(std::exp(logits[i][static_cast<std::size_t>(labels[i])]) / z);
  }
  return s / static_cast<double>(logits.size());
}

model::ModelConfig micro_config() {
  model::ModelConfig c;
  c.layers_face = 1;
  c.layers_point = 1;
  c.layers_coord = 1;
  c.model_dim = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  c.bins = 8;
  c.draft_face = 9;
  c.draft_point = 3;
  c.draft_coord = 2;
  c.condition_len = 3;
  return c;
}

TokenSequence random_payload(const model::ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  util::Rng rng(seed);
  TokenSequence s{cfg.vocabulary().bos()};
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<Token>(rng.below(cfg.bins)));
  return s;
}

}  // namespace

TEST(CoordLoss, OneHotIsZeroUniformIsLogV) {
  Matrix onehot(2, 5);
  onehot(0, 1) = onehot(1, 4) = 1.0;
  EXPECT_EQ(coord_loss(onehot, {1, 4}), 0.0);
  Matrix uniform(3, 5);
  for (double& v : uniform.values()) v = 0.2;
  EXPECT_NEAR(coord_loss(uniform, {0, 2, 4}), std::log(5.0), 1e-12);
}

TEST(CoordLoss, MatchesNaiveOracle) {
  util::Rng rng(51);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(6), v = 2 + rng.below(9);
    const Matrix p = nn::softmax_rows(fmtest::random_matrix(n, v, rng, -4, 4));
    std::vector<Token> targets;
    for (std::size_t r = 0; r < n; ++r) targets.push_back(static_cast<Token>(rng.below(v)));
    EXPECT_NEAR(coord_loss(p, targets), naive_ce(p, targets), 1e-12);
  }
  EXPECT_THROW(coord_loss(Matrix(2, 3), {0}), ContractError);
}

TEST(LabelLoss, ConfidentIsNearZeroUniformIsLog3) {
  EXPECT_NEAR(label_loss({{0, 0, 0}}, {PointLabel::intra_batch}), std::log(3.0), 1e-12);
  EXPECT_LT(label_loss({{0, 50, 0}}, {PointLabel::new_point}), 1e-20);
}

TEST(LabelLoss, MatchesNaiveOracle) {
  util::Rng rng(52);
  for (int t = 0; t < 50; ++t) {
    std::vector<LabelLogits> l;
    std::vector<PointLabel> y;
    for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) {
      l.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)});
      y.push_back(static_cast<PointLabel>(rng.below(3)));
    }
    EXPECT_NEAR(label_loss(l, y), naive_label_ce(l, y), 1e-12);
  }
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_DOUBLE_EQ(total_loss(1.0, 2.0, 0.3), 1.6);
  EXPECT_EQ(total_loss(0.7, 5.0, 0.0), 0.7);
  double prev = -1.0;
  for (double g : {0.0, 0.1, 0.3, 0.5, 1.0}) {
    const double v = total_loss(1.0, 2.0, g);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(SequenceLoss, TotalCombinesTermsWithGamma) {
  auto cfg = fmtest::tiny_config();
  cfg.gamma = 0.3;
  const auto m = model::init_random(cfg, 61);
  const auto c = model::random_condition(cfg, 2);
  const auto seq = random_payload(cfg, 40, 3);
  Tape t;
  const auto lt = sequence_loss(t, m, c, seq);
  ASSERT_TRUE(lt.has_label);
  EXPECT_GE(lt.coord_rows, seq.size() - 1);
  EXPECT_GT(lt.label_rows, 0u);
  const double coord = t.value(lt.coord)(0, 0), label = t.value(lt.label)(0, 0);
  EXPECT_NEAR(t.value(lt.total)(0, 0), total_loss(coord, label, 0.3), 1e-12);
}

TEST(SequenceLoss, MainTermMatchesBackboneCrossEntropy) {
  const auto m = model::init_random(fmtest::tiny_config(), 62);
  const auto c = model::random_condition(m.config, 4);
  const auto seq = random_payload(m.config, 20, 5);
  model::Backbone bb(m, c);
  const auto pass = bb.feed(std::span<const Token>(seq.data(), seq.size() - 1));
  const std::vector<Token> targets(seq.begin() + 1, seq.end());
  Tape t;
  const auto out = reference_forward(t, m, c, seq, false);
  Var ce = t.cross_entropy(t.gather_rows(out.logits, detail::iota(0, seq.size() - 1)),
                           std::vector<std::size_t>(targets.begin(), targets.end()));
  EXPECT_NEAR(t.value(ce)(0, 0), naive_ce(pass.probs, targets), 1e-10);
}

TEST(GradCheck, LinearSoftmaxModel) {
  util::Rng rng(71);
  Matrix embed = fmtest::random_matrix(6, 4, rng), head = fmtest::random_matrix(4, 6, rng);
  const std::vector<std::size_t> inputs{0, 3, 2, 3}, targets{3, 2, 3, 5};
  auto loss = [&](Tape& t) { return t.cross_entropy(t.matmul(t.gather_rows(t.param(embed), inputs), t.param(head)), targets); };
  const auto rep = grad_check(loss, {&embed, &head}, {1e-6, 48, 3, 1e-9});
  EXPECT_LE(rep.max_rel_error, 1e-6);
  EXPECT_EQ(rep.checked, 48u);

  Tape t;
  t.backward(loss(t));
  const Matrix g = t.grad_of(embed);
  for (std::size_t r : {1u, 4u, 5u})
    for (double v : g.row(r)) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, UnusedTokensGetZeroEmbeddingGradient) {
  const auto m = model::init_random(micro_config(), 63);
  const auto c = model::random_condition(m.config, 1);
  TokenSequence seq{m.config.vocabulary().bos()};
  for (int i = 0; i < 12; ++i) seq.push_back(static_cast<Token>(i % 3));
  Tape t;
  t.backward(sequence_loss(t, m, c, seq).total);
  const Matrix g = t.grad_of(m.embed);
  for (Token unused : {Token{5}, Token{7}, m.config.vocabulary().pad()})
    for (double v : g.row(unused)) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, MicroModelFullObjective) {
  auto m = model::init_random(micro_config(), 64);
  std::vector<Example> batch;
  for (std::uint64_t s = 0; s < 2; ++s)
    batch.push_back({model::random_condition(m.config, s), random_payload(m.config, 21 + 4 * s, 10 + s)});
  const auto rep = grad_check(m, batch, {1e-5, 80, 5, 1e-7});
  EXPECT_LE(rep.max_rel_error, 1e-4);
  EXPECT_TRUE(std::isfinite(rep.loss));
}

TEST(GradCheck, NonFiniteLossThrows) {
  Matrix w(1, 1);
  auto loss = [&](Tape& t) { return t.add(t.param(w), t.constant(Matrix{{std::numeric_limits<double>::quiet_NaN()}})); };
  EXPECT_THROW(grad_check(loss, {&w}), std::domain_error);
}
