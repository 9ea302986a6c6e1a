// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "support.hpp"

using namespace flashmesh;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

class Check {
public:
  void expect(bool cond, const std::string& what) {
    if (!cond && ok_) first_ = what;
    ok_ = ok_ && cond;
  }
  bool ok() const { return ok_; }
  std::string failure() const { return first_; }

private:
  bool ok_ = true;
  std::string first_;
};

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run_cli(args, o, e);
  if (out) *out = o.str();
  return code;
}

std::string write_config(fmtest::TempDir& dir, const std::string& name, const model::ModelConfig& c) {
  std::ofstream(dir.file(name)) << model::format_config(c);
  return dir.file(name);
}

model::ModelConfig small_config(std::uint32_t dim, std::uint32_t bins) {
  auto c = fmtest::tiny_config();
  c.model_dim = dim;
  c.ffn_dim = 2 * dim;
  c.bins = bins;
  return c;
}

// 1 ------------------------------------------------------------------------
Outcome equivalence() {
  fmtest::TempDir dir("acc-eq");
  struct Group {
    model::ModelConfig cfg;
    std::vector<std::uint64_t> model_seeds;
    std::size_t seeds_per_model, budget;
    std::vector<std::string> flags;
  };
  auto default_cfg = model::ModelConfig{};
  auto short_points = small_config(32, 64);
  short_points.draft_point = 3;
  const std::vector<Group> groups{
      {default_cfg, {1, 2, 3}, 2, 500, {}},
      {default_cfg, {4}, 1, 500, {"--no-rule-a", "--no-rule-b"}},
      {small_config(32, 64), {5, 6, 7}, 2, 1000, {}},
      {short_points, {8}, 2, 1000, {"--no-correction"}},
      {small_config(16, 32), {9, 10, 11}, 2, 2000, {}},
  };
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cases = 0, diverged = 0, tokens = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto cfg_path = write_config(dir, "g" + std::to_string(g) + ".cfg", groups[g].cfg);
    for (auto ms : groups[g].model_seeds) {
      const auto model_path = dir.file("m" + std::to_string(ms) + ".mfls");
      if (cli({"init", "--config", cfg_path, "--seed", std::to_string(ms), "--out", model_path}) != 0)
        return {false, "init failed"};
      std::vector<std::string> args{"verify-equivalence", "--model", model_path, "--seeds",
                                    std::to_string(groups[g].seeds_per_model), "--first-seed", std::to_string(100 * ms),
                                    "--budget", std::to_string(groups[g].budget)};
      args.insert(args.end(), groups[g].flags.begin(), groups[g].flags.end());
      std::string out;
      const int code = cli(args, &out);
      std::istringstream lines(out);
      for (std::string line; std::getline(lines, line);) {
        if (line.rfind("seed ", 0) != 0) continue;
        ++cases;
        if (line.find(" ok") == std::string::npos) ++diverged;
        std::size_t n = 0;
        std::sscanf(line.c_str(), "%*s %*s tokens %zu", &n);
        tokens += n;
      }
      if (code != 0 && diverged == 0) return {false, "verify-equivalence exit " + std::to_string(code)};
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream d;
  d << cases << " model/seed cases, " << tokens << " tokens, " << diverged << " divergences, budgets up to 2000, "
    << std::fixed << std::setprecision(1) << secs << " s";
  return {cases >= 20 && diverged == 0 && secs < 60.0, d.str()};
}

// 2 ------------------------------------------------------------------------
Outcome forward_pass_reduction() {
  Check c;
  std::size_t teacher_runs = 0, model_runs = 0;
  double worst_gap = 0.0;
  for (std::uint64_t ms : {21u, 22u}) {
    const auto m = model::init_random(ms == 21 ? model::ModelConfig{} : small_config(32, 64), ms);
    const std::size_t d = m.config.max_draft();
    for (std::size_t budget : {1u, 9u, 100u, 451u, 1000u}) {
      const auto cond = model::random_condition(m.config, ms + budget);
      const auto base = decode::decode_baseline(m, cond, budget);
      decode::DecodeOptions opt;
      opt.budget = budget;
      opt.source = decode::DraftSource::teacher;
      opt.reference = &base.tokens;
      const auto r = decode::decode_speculative(m, cond, opt);
      const std::size_t n = r.stats.tokens_emitted;
      c.expect(r.tokens == base.tokens, "teacher output differs");
      c.expect(r.stats.forward_passes == (n + d) / (d + 1), "teacher passes != ceil(payload/(D+1))");
      ++teacher_runs;

      opt.source = decode::DraftSource::model;
      opt.reference = nullptr;
      const auto s = decode::decode_speculative(m, cond, opt);
      const auto& st = s.stats;
      c.expect(st.forward_passes == 0 || st.m_bar() >= 1.0, "m_bar < 1");
      c.expect(st.tokens_emitted == s.tokens.size() - 1, "token count");
      c.expect(std::llround(st.m_bar() * static_cast<double>(st.forward_passes)) ==
                   static_cast<long long>(st.tokens_emitted),
               "tokens != passes * m_bar");
      c.expect(st.tokens_emitted <= st.forward_passes + st.drafts_accepted &&
                   st.tokens_emitted + 1 >= st.forward_passes + st.drafts_accepted,
               "per-pass accounting");
      ++model_runs;
    }
  }
  fmtest::TempDir dir("acc-bench");
  const auto cfg_path = write_config(dir, "b.cfg", small_config(32, 64));
  cli({"init", "--config", cfg_path, "--seed", "23", "--out", dir.file("b.mfls")});
  for (const std::string drafts : {"model", "teacher"}) {
    std::string out;
    const int code = cli({"bench", "--model", dir.file("b.mfls"), "--repeats", "2", "--budget", "600", "--drafts",
                          drafts},
                         &out);
    c.expect(code == 0, "bench failed");
    if (code != 0) break;
    const auto j = json::parse(out);
    const double s = j["speedup"], measured = j["measured_speedup"];
    worst_gap = std::max(worst_gap, std::abs(s - measured) / measured);
  }
  c.expect(worst_gap <= 0.05, "speedup identity off by more than 5%");
  std::ostringstream d;
  d << teacher_runs << " teacher runs with passes = ceil(payload/(D+1)), " << model_runs
    << " model-draft runs with exact accounting, speedup identity gap " << std::setprecision(3) << 100 * worst_gap
    << "%";
  if (!c.ok()) d << " [" << c.failure() << "]";
  return {c.ok(), d.str()};
}

// 3 ------------------------------------------------------------------------
mesh::TokenSequence flatten(const std::vector<mesh::QVertex>& pts) {
  mesh::TokenSequence t;
  for (const auto& p : pts)
    for (auto v : p) t.push_back(static_cast<mesh::Token>(v));
  return t;
}

std::vector<std::array<mesh::QVertex, 3>> window_faces(const speculate::DraftBatch& b) {
  std::vector<std::array<mesh::QVertex, 3>> out;
  const std::size_t end = b.first + b.tokens.size();
  for (std::size_t i = 0; i + 2 < b.points.size(); ++i) {
    const std::size_t p = b.points[i].position;
    if (p % 9 || p + 9 > end || b.points[i + 2].position != p + 6) continue;
    out.push_back({b.points[i].coords, b.points[i + 1].coords, b.points[i + 2].coords});
    i += 2;
  }
  return out;
}

Outcome correction_suite() {
  using speculate::PointLabel;
  Check c;
  util::Rng rng(301);
  const std::uint32_t bins = 5;
  const mesh::Vocabulary voc{bins};
  std::size_t corrected = 0, skipped = 0;
  for (int t = 0; t < 200; ++t) {
    // Accepted prefix, then the main token at payload `base`, then drafts.
    const std::size_t base = rng.below(45);
    mesh::TokenSequence seq{voc.bos()};
    for (std::size_t i = 0; i <= base; ++i) seq.push_back(static_cast<mesh::Token>(rng.below(bins)));
    mesh::TokenSequence drafts;
    for (std::size_t i = 0, n = 1 + rng.below(8 + 9 * (t % 3)); i < n; ++i)
      drafts.push_back(static_cast<mesh::Token>(rng.below(bins)));
    if (t % 7 == 0) drafts[rng.below(drafts.size())] = voc.eos();
    std::set<mesh::QVertex> history;
    for (std::size_t p = 0; p + 3 <= base; p += 3)
      history.insert({static_cast<int>(seq[p + 1]), static_cast<int>(seq[p + 2]), static_cast<int>(seq[p + 3])});
    auto batch = speculate::make_batch(base + 1, drafts, bins, history);
    std::map<std::size_t, speculate::LabelLogits> logits;
    for (const auto& p : batch.points) logits[p.position] = {rng.uniform(), rng.uniform(), rng.uniform()};
    speculate::assign_labels(batch, logits);

    const auto once = speculate::correct_and_resort(batch);
    const auto twice = speculate::correct_and_resort(once);
    for (const auto& p : once.points) {
      corrected += p.corrected;
      skipped += p.skipped;
    }
    mesh::TokenSequence full = seq;
    full.insert(full.end(), once.tokens.begin(), once.tokens.end());
    c.expect(twice.tokens == once.tokens, "second application changed the batch");
    c.expect(once.tokens.size() == drafts.size(), "token count changed");
    c.expect(std::equal(seq.begin(), seq.end(), full.begin()), "prefix or main token changed");
    const std::size_t first_control =
        std::find_if(drafts.begin(), drafts.end(), [&](mesh::Token x) { return !voc.is_coord(x); }) - drafts.begin();
    c.expect(std::equal(drafts.begin() + first_control, drafts.end(), once.tokens.begin() + first_control),
             "tokens after a control token changed");
    c.expect(mesh::is_canonical_face_order(window_faces(once)), "drafted faces not canonical");
  }

  // Nine-point scenario: points 8 and 9 of a nine-point batch are intra-batch and
  // take the coordinates of points 6 and 3.
  const std::vector<mesh::QVertex> pts{{10, 10, 10}, {10, 20, 30}, {40, 40, 40}, {20, 5, 5}, {20, 6, 50},
                                       {60, 60, 60}, {5, 5, 5},    {61, 62, 59}, {41, 39, 42}};
  auto fig = speculate::make_batch(9, flatten(pts), 128);
  for (auto& p : fig.points) p.label = PointLabel::new_point;
  fig.points[7].label = fig.points[8].label = PointLabel::intra_batch;
  const auto fixed = speculate::correct_batch(fig);
  c.expect(fixed.points[7].coords == pts[5] && fixed.points[8].coords == pts[2], "nine-point duplication");
  const auto sorted = speculate::resort_batch(fixed);
  c.expect(mesh::is_canonical_face_order(window_faces(sorted)), "nine-point resort not canonical");
  c.expect(sorted.tokens == flatten({{5, 5, 5}, {40, 40, 40}, {60, 60, 60}, {10, 10, 10}, {10, 20, 30},
                                     {40, 40, 40}, {20, 5, 5}, {20, 6, 50}, {60, 60, 60}}),
           "nine-point token order");
  c.expect(speculate::correct_and_resort(sorted).tokens == sorted.tokens, "nine-point idempotence");
  std::ostringstream d;
  d << "200 synthetic batches idempotent and local (" << corrected << " repairs, " << skipped
    << " skipped), nine-point scenario points 8,9 <- 6,3 then canonical";
  if (!c.ok()) d << " [" << c.failure() << "]";
  return {c.ok(), d.str()};
}

// 4 ------------------------------------------------------------------------
Outcome loss_gradient() {
  Check c;
  util::Rng rng(401);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(6), v = 2 + rng.below(12);
    const auto p = nn::softmax_rows(fmtest::random_matrix(n, v, rng, -6, 6));
    std::vector<mesh::Token> y;
    double naive = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      y.push_back(static_cast<mesh::Token>(rng.below(v)));
      naive -= std::log(p(r, y.back()));
    }
    worst = std::max(worst, std::abs(train::coord_loss(p, y) - naive / static_cast<double>(n)));
    std::vector<speculate::LabelLogits> l;
    std::vector<speculate::PointLabel> lab;
    double naive_l = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      l.push_back({rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-4, 4)});
      lab.push_back(static_cast<speculate::PointLabel>(rng.below(3)));
      const double z = std::exp(l[r][0]) + std::exp(l[r][1]) + std::exp(l[r][2]);
      naive_l -= std::log(std::exp(l[r][static_cast<std::size_t>(lab[r])]) / z);
    }
    worst = std::max(worst, std::abs(train::label_loss(l, lab) - naive_l / static_cast<double>(n)));
  }
  c.expect(worst <= 1e-12, "loss oracle");

  model::ModelConfig micro;
  micro.layers_face = micro.layers_point = micro.layers_coord = 1;
  micro.model_dim = 8;
  micro.heads = 2;
  micro.ffn_dim = 16;
  micro.bins = 8;
  micro.draft_point = 3;
  micro.condition_len = 3;
  auto m = model::init_random(micro, 402);
  std::vector<train::Example> batch;
  for (std::uint64_t s = 0; s < 2; ++s) {
    mesh::TokenSequence seq{micro.vocabulary().bos()};
    for (int i = 0; i < 24; ++i) seq.push_back(static_cast<mesh::Token>(rng.below(micro.bins)));
    batch.push_back({model::random_condition(micro, s), seq});
  }
  const auto g = train::grad_check(m, batch, {1e-5, 120, 7, 1e-7});
  c.expect(g.max_rel_error <= 1e-4, "gradient check");
  const double total = train::total_loss(1.0, 2.0, 0.3);
  c.expect(std::abs(total - 1.6) <= 1e-15, "L_total hand arithmetic");
  std::ostringstream d;
  d << "loss oracle max error " << std::setprecision(2) << worst << ", micro-model grad max rel error "
    << g.max_rel_error << " over " << g.checked << " weights, L_total(1, 2, 0.3) = " << total;
  if (!c.ok()) d << " [" << c.failure() << "]";
  return {c.ok(), d.str()};
}

// 5 ------------------------------------------------------------------------
Outcome entropy_identities() {
  util::Rng rng(501);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t nx = 1 + rng.below(10), ny = 1 + rng.below(10);
    nn::Matrix j(nx, ny);
    if (t % 10 == 0) {  // deterministic: y = f(x)
      for (std::size_t x = 0; x < nx; ++x) j(x, rng.below(ny)) = 1.0 + rng.uniform();
    } else if (t % 10 == 1) {  // independent: outer product of marginals
      std::vector<double> px(nx), py(ny);
      for (double& v : px) v = rng.uniform() + 0.01;
      for (double& v : py) v = rng.uniform() + 0.01;
      for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t y = 0; y < ny; ++y) j(x, y) = px[x] * py[y];
    } else {
      for (double& v : j.values()) v = rng.below(4) ? rng.uniform() : 0.0;
      j(rng.below(nx), rng.below(ny)) += 1.0;
    }
    const auto r = analysis::entropy_decomposition(j);
    worst = std::max({worst, r.residual_marginal(), r.residual_sum()});
    if (t % 10 == 0) worst = std::max(worst, std::abs(r.h_y_given_x));
    if (t % 10 == 1) worst = std::max(worst, std::abs(r.mutual_information));
  }
  std::ostringstream d;
  d << "1000 tables (100 deterministic, 100 independent), max residual " << std::setprecision(2) << worst;
  return {worst <= 1e-9, d.str()};
}

// 6 ------------------------------------------------------------------------
Outcome metrics_oracles() {
  util::Rng rng(601);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const double scale = std::pow(10.0, rng.uniform(-2, 2));
    auto cloud = [&](std::size_t n) {
      std::vector<mesh::Vec3> p;
      for (std::size_t i = 0; i < n; ++i) p.push_back({rng.uniform(0, scale), rng.uniform(0, scale), rng.uniform(0, scale)});
      return p;
    };
    const auto a = cloud(1 + rng.below(400)), b = cloud(1 + rng.below(400));
    const auto g = analysis::distances(a, b, analysis::Search::grid);
    const auto br = analysis::distances(a, b, analysis::Search::brute);
    worst = std::max({worst, std::abs(g.chamfer - br.chamfer), std::abs(g.hausdorff - br.hausdorff)});
  }
  const analysis::Box unit{{0, 0, 0}, {1, 1, 1}};
  const bool iou = analysis::bbox_iou(unit, unit) == 1.0 &&
                   analysis::bbox_iou(unit, analysis::Box{{3, 3, 3}, {4, 4, 4}}) == 0.0 &&
                   analysis::bbox_iou(unit, analysis::Box{{0.5, 0, 0}, {1.5, 1, 1}}) == 1.0 / 3.0;
  std::ostringstream d;
  d << "100 instances grid vs brute max diff " << std::setprecision(2) << worst << ", IoU hand cases "
    << (iou ? "exact" : "wrong");
  return {worst <= 1e-12 && iou, d.str()};
}

// 7 ------------------------------------------------------------------------
Outcome codec_round_trip() {
  Check c;
  util::Rng rng(701);
  for (int t = 0; t < 50; ++t) {
    mesh::QuantizedMesh q;
    q.bins = 128;
    std::set<mesh::QVertex> seen;
    const std::size_t nv = 3 + rng.below(40);
    while (q.vertices.size() < nv) {
      mesh::QVertex v{static_cast<int>(rng.below(128)), static_cast<int>(rng.below(128)),
                      static_cast<int>(rng.below(128))};
      if (seen.insert(v).second) q.vertices.push_back(v);
    }
    for (std::size_t f = 0, nf = 1 + rng.below(60); f < nf; ++f) {
      mesh::Face face{};
      do {
        for (auto& i : face) i = static_cast<std::uint32_t>(rng.below(nv));
      } while (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]);
      q.faces.push_back(face);
    }
    q = mesh::canonicalize(q);
    c.expect(mesh::from_tokens(mesh::to_tokens(q), 128) == q, "token round trip");
  }
  double worst_ratio = 0.0;
  for (int t = 0; t < 50; ++t) {
    mesh::Mesh m;
    const double span = std::pow(10.0, rng.uniform(-3, 3));
    for (int i = 0; i < 40; ++i) m.vertices.push_back({rng.uniform(-span, span), rng.uniform(0, span), rng.uniform(-1, 1)});
    for (std::uint32_t i = 0; i + 2 < 40; ++i) m.faces.push_back({i, i + 1, i + 2});
    const std::uint32_t bins = 2 + static_cast<std::uint32_t>(rng.below(300));
    const auto r = mesh::quantize(m, bins);
    for (const auto& v : m.vertices)
      for (int a = 0; a < 3; ++a) {
        const double ext = r.frame.extent[a];
        if (ext <= 0) continue;
        const auto b = mesh::quantize_value(v[a], r.frame.min[a], ext, bins);
        const double err = std::abs(mesh::dequantize_value(b, r.frame.min[a], ext, bins) - v[a]);
        worst_ratio = std::max(worst_ratio, err / (ext / (2.0 * (bins - 1))));
      }
  }
  c.expect(worst_ratio <= 1.0 + 1e-9, "quantization bound");
  std::size_t files = 0, triangles = 0;
  fmtest::TempDir dir("acc-obj");
  for (const auto& f : fmtest::fixture_files()) {
    const auto m = mesh::load_obj(f);
    mesh::save_obj(m, dir.file("rt.obj"));
    const auto back = mesh::load_obj(dir.file("rt.obj"));
    c.expect(back.faces.size() == m.faces.size() && !m.faces.empty(), "OBJ triangle count " + f);
    ++files;
    triangles += m.faces.size();
  }
  c.expect(files >= 5, "fixture corpus");
  std::ostringstream d;
  d << "50 canonical meshes round-trip, quantization error <= " << std::setprecision(3) << worst_ratio
    << " of the bound, " << files << " OBJ fixtures (" << triangles << " triangles) preserved";
  if (!c.ok()) d << " [" << c.failure() << "]";
  return {c.ok(), d.str()};
}

// 8 ------------------------------------------------------------------------
Outcome determinism() {
  Check c;
  fmtest::TempDir dir("acc-det");
  const auto cfg = write_config(dir, "d.cfg", small_config(32, 64));
  for (int run = 0; run < 2; ++run) {
    const std::string k = std::to_string(run);
    c.expect(cli({"init", "--config", cfg, "--seed", "803", "--out", dir.file("m" + k + ".mfls")}) == 0, "init");
    c.expect(cli({"init", "--seed", "802", "--out", dir.file("big" + k + ".mfls")}) == 0, "init default");
    for (const std::string mode : {"baseline", "speculative"})
      c.expect(cli({"generate", "--model", dir.file("m" + k + ".mfls"), "--mode", mode, "--budget", "400", "--seed",
                    "5", "--tokens", dir.file(mode + k + ".tok"), "--stats", dir.file(mode + k + ".json"), "--out",
                    dir.file(mode + k + ".obj")}) == 0,
               "generate");
  }
  std::size_t compared = 0;
  for (const std::string f : {"m%.mfls", "big%.mfls", "baseline%.tok", "speculative%.tok", "baseline%.json",
                              "speculative%.json", "baseline%.obj", "speculative%.obj"}) {
    auto name = [&](char k) {
      std::string s = f;
      s[s.find('%')] = k;
      return dir.file(s);
    };
    const auto a = fmtest::slurp(name('0')), b = fmtest::slurp(name('1'));
    c.expect(!a.empty() && a == b, "bytes differ: " + f);
    ++compared;
  }
  c.expect(fmtest::slurp(dir.file("baseline0.tok")) == fmtest::slurp(dir.file("speculative0.tok")),
           "speculative tokens differ from baseline");
  std::ostringstream d;
  d << compared << " artifact pairs byte-identical across two runs (models, tokens, stats JSON, OBJ)";
  if (!c.ok()) d << " [" << c.failure() << "]";
  return {c.ok(), d.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 equivalence", equivalence},
      {"2 forward-pass reduction", forward_pass_reduction},
      {"3 correction suite", correction_suite},
      {"4 loss/gradient", loss_gradient},
      {"5 entropy identities", entropy_identities},
      {"6 metrics oracles", metrics_oracles},
      {"7 codec round-trip", codec_round_trip},
      {"8 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.ok ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failed += !o.ok;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - failed << "/" << criteria.size() << std::endl;
  return failed ? 1 : 0;
}
