#pragma once

// Command surface of the flashmesh tool. run_cli() is the whole program minus
// process plumbing, so tests can drive it in-process.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flashmesh/analysis/entropy.hpp"
#include "flashmesh/analysis/metrics.hpp"
#include "flashmesh/decode/report.hpp"
#include "flashmesh/mesh/obj.hpp"
#include "flashmesh/train/losses.hpp"

namespace flashmesh::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kMismatch = 2, kIo = 3 };

namespace detail {

using json = nlohmann::ordered_json;

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

inline model::Condition load_condition(const model::HourglassModel& m, const std::string& obj_path,
                                       std::uint64_t seed) {
  if (obj_path.empty()) return model::random_condition(m.config, seed);
  return model::featurize_point_cloud(m, mesh::load_obj(obj_path).vertices);
}

inline decode::DraftSource parse_source(const std::string& s) {
  if (s == "model") return decode::DraftSource::model;
  if (s == "teacher") return decode::DraftSource::teacher;
  if (s == "adversarial") return decode::DraftSource::adversarial;
  throw CLI::ValidationError("--drafts", "expected model, teacher or adversarial");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace detail

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using detail::json;
  CLI::App app{"Hierarchical speculative decoding for autoregressive mesh generation", "flashmesh"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // init
  std::string config_path, out_path;
  std::uint64_t seed = 0;
  auto* init = app.add_subcommand("init", "Create a randomly initialised model");
  init->add_option("--config", config_path, "key = value model config")->check(CLI::ExistingFile);
  init->add_option("--seed", seed, "Weight seed");
  init->add_option("--out", out_path, "Output model file")->required();

  // tokenize / detokenize
  std::string in_path;
  std::uint32_t bins = mesh::kDefaultBins;
  auto* tok = app.add_subcommand("tokenize", "Quantise an OBJ mesh into a token file");
  tok->add_option("input", in_path, "Input OBJ")->required();
  tok->add_option("--bins", bins, "Quantisation bins")->check(CLI::Range(2u, 1u << 20));
  tok->add_option("--out", out_path, "Output token file")->required();
  auto* detok = app.add_subcommand("detokenize", "Turn a token file back into an OBJ mesh");
  detok->add_option("input", in_path, "Input token file")->required();
  detok->add_option("--out", out_path, "Output OBJ")->required();

  // generate
  std::string model_path, mode = "speculative", condition_path, stats_path, tokens_path, drafts = "model";
  std::size_t budget = 1000;
  bool trace = false, timing = false, no_correction = false, no_rule_a = false, no_rule_b = false;
  auto* gen = app.add_subcommand("generate", "Generate a mesh");
  gen->add_option("--model", model_path, "Model file")->required();
  gen->add_option("--mode", mode, "baseline or speculative")->check(CLI::IsMember({"baseline", "speculative"}));
  gen->add_option("--budget", budget, "Maximum payload tokens");
  gen->add_option("--seed", seed, "Condition seed (when no --condition)");
  gen->add_option("--condition", condition_path, "Point-cloud OBJ used as condition");
  gen->add_option("--out", out_path, "Output OBJ");
  gen->add_option("--tokens", tokens_path, "Output token file");
  gen->add_option("--stats", stats_path, "Output stats JSON");
  gen->add_option("--drafts", drafts, "model, teacher or adversarial");
  gen->add_flag("--trace", trace, "Dump drafts and corrections to stderr");
  gen->add_flag("--timing", timing, "Include wall-clock fields in the stats");
  gen->add_flag("--no-correction", no_correction, "Skip draft correction");
  gen->add_flag("--no-rule-a", no_rule_a, "Keep point drafts next to face drafts");
  gen->add_flag("--no-rule-b", no_rule_b, "Keep the first point of face/point drafts");

  // verify-equivalence
  std::size_t seeds = 20;
  std::uint64_t first_seed = 0;
  auto* ver = app.add_subcommand("verify-equivalence", "Compare speculative and baseline outputs");
  ver->add_option("--model", model_path, "Model file")->required();
  ver->add_option("--seeds", seeds, "Number of condition seeds");
  ver->add_option("--first-seed", first_seed, "First condition seed");
  ver->add_option("--budget", budget, "Maximum payload tokens");
  ver->add_option("--drafts", drafts, "model, teacher or adversarial");
  ver->add_flag("--no-correction", no_correction, "Skip draft correction");
  ver->add_flag("--no-rule-a", no_rule_a, "Keep point drafts next to face drafts");
  ver->add_flag("--no-rule-b", no_rule_b, "Keep the first point of face/point drafts");

  // bench
  std::size_t repeats = 3;
  std::string json_path;
  auto* bench = app.add_subcommand("bench", "Time baseline and speculative decoding");
  bench->add_option("--model", model_path, "Model file")->required();
  bench->add_option("--repeats", repeats, "Runs per mode")->check(CLI::PositiveNumber);
  bench->add_option("--budget", budget, "Maximum payload tokens");
  bench->add_option("--seed", seed, "Condition seed of the first repeat");
  bench->add_option("--drafts", drafts, "model, teacher or adversarial");
  bench->add_option("--json", json_path, "Write the report here as well");

  // analyze
  std::string seq_dir;
  auto* analyze = app.add_subcommand("analyze", "Entropy decomposition of adjacent token pairs");
  analyze->add_option("--sequences", seq_dir, "Directory of token files")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--json", json_path, "Write the report here as well");

  // metrics
  std::string gen_path, ref_path;
  std::size_t samples = 5000;
  auto* met = app.add_subcommand("metrics", "Chamfer/Hausdorff/bbox IoU between two meshes");
  met->add_option("--gen", gen_path, "Generated OBJ")->required();
  met->add_option("--ref", ref_path, "Reference OBJ")->required();
  met->add_option("--samples", samples, "Surface samples per mesh")->check(CLI::PositiveNumber);
  met->add_option("--seed", seed, "Sampling seed");

  // loss
  std::vector<double> gammas;
  bool grad = false;
  auto* loss = app.add_subcommand("loss", "Teacher-forced objectives on a generated sequence");
  loss->add_option("--model", model_path, "Model file")->required();
  loss->add_option("--seed", seed, "Condition seed");
  loss->add_option("--budget", budget, "Payload tokens of the scored sequence");
  loss->add_option("--gamma", gammas, "Label weight(s); defaults to the model's");
  loss->add_flag("--grad-check", grad, "Also run a finite-difference gradient check");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  auto rules = [&] {
    speculate::RuleSet r;
    r.rule_a = !no_rule_a;
    r.rule_b = !no_rule_b;
    return r;
  };

  try {
    if (*init) {
      const model::ModelConfig cfg = config_path.empty() ? model::ModelConfig{} : model::load_config(config_path);
      model::save_model(model::init_random(cfg, seed), out_path);
      out << "wrote " << out_path << "\n";
      return kOk;
    }
    if (*tok) {
      const auto q = mesh::quantize(mesh::load_obj(in_path), bins);
      const auto seq = mesh::to_tokens(q.mesh);
      mesh::write_token_file(out_path, seq, bins);
      out << "faces " << q.mesh.faces.size() << " tokens " << seq.size() << "\n";
      return kOk;
    }
    if (*detok) {
      const auto tf = mesh::read_token_file(in_path);
      const auto dec = mesh::decode_tokens(tf.tokens, tf.bins);
      mesh::save_obj(mesh::dequantize_unit(dec.mesh), out_path);
      out << "faces " << dec.mesh.faces.size() << (dec.truncated ? " (partial face dropped)" : "") << "\n";
      return kOk;
    }
    if (*gen) {
      const auto m = model::load_model(model_path);
      const auto cond = detail::load_condition(m, condition_path, seed);
      decode::DecodeResult res;
      decode::TokenSequence reference;
      if (mode == "baseline") {
        res = decode::decode_baseline(m, cond, budget);
      } else {
        decode::DecodeOptions opt;
        opt.budget = budget;
        opt.source = detail::parse_source(drafts);
        opt.rules = rules();
        opt.correction = !no_correction;
        if (trace) opt.trace = &err;
        if (opt.source != decode::DraftSource::model) {
          reference = decode::decode_baseline(m, cond, budget).tokens;
          opt.reference = &reference;
        }
        res = decode::decode_speculative(m, cond, opt);
      }
      const auto dec = mesh::decode_tokens(res.tokens, m.config.bins);
      if (!out_path.empty()) mesh::save_obj(mesh::dequantize_unit(dec.mesh), out_path);
      if (!tokens_path.empty()) mesh::write_token_file(tokens_path, res.tokens, m.config.bins);
      std::optional<decode::SpeedupReport> t;
      if (timing) {
        decode::SpeedupReport r;
        r.m_bar = res.stats.m_bar();
        r.tps = res.seconds > 0.0 ? static_cast<double>(res.stats.tokens_emitted) / res.seconds : 0.0;
        if (mode == "baseline") {
          r.speedup = 1.0;
        } else {
          const auto b = decode::decode_baseline(m, cond, budget);
          const double t_ori = b.seconds / static_cast<double>(std::max<std::size_t>(1, b.stats.tokens_emitted));
          const double t_ours = res.seconds / static_cast<double>(std::max<std::size_t>(1, res.stats.forward_passes));
          r = decode::speedup_report(res.stats, t_ori, t_ours);
        }
        t = r;
      }
      auto j = decode::stats_json(res.stats, t);
      if (!stats_path.empty()) detail::write_text(stats_path, j.dump(2) + "\n");
      out << "tokens " << res.stats.tokens_emitted << " passes " << res.stats.forward_passes << " faces "
          << dec.mesh.faces.size() << (res.truncated ? " truncated" : "") << (res.terminated ? " eos" : "") << "\n";
      return kOk;
    }
    if (*ver) {
      const auto m = model::load_model(model_path);
      decode::DecodeOptions opt;
      opt.source = detail::parse_source(drafts);
      opt.rules = rules();
      opt.correction = !no_correction;
      std::size_t bad = 0;
      for (std::size_t k = 0; k < seeds; ++k) {
        const std::uint64_t s = first_seed + k;
        const auto cond = model::random_condition(m.config, s);
        const auto base = decode::decode_baseline(m, cond, budget);
        opt.budget = budget;
        opt.reference = &base.tokens;
        const auto spec = decode::decode_speculative(m, cond, opt);
        const auto div = decode::first_divergence(base.tokens, spec.tokens);
        out << "seed " << s << ": tokens " << base.stats.tokens_emitted << " passes " << spec.stats.forward_passes
            << " m_bar " << detail::fmt(spec.stats.m_bar());
        if (div) {
          ++bad;
          const std::size_t i = *div;
          auto at = [&](const decode::TokenSequence& q) {
            return i < q.size() ? std::to_string(q[i]) : std::string("<end>");
          };
          out << " DIVERGED at index " << i << " baseline " << at(base.tokens) << " speculative "
              << at(spec.tokens) << "\n";
        } else {
          out << " ok\n";
        }
      }
      out << (bad ? "MISMATCH " : "EQUIVALENT ") << seeds - bad << "/" << seeds << "\n";
      return bad ? kMismatch : kOk;
    }
    if (*bench) {
      const auto m = model::load_model(model_path);
      const auto source = detail::parse_source(drafts);
      double base_time = 0.0, spec_time = 0.0;
      std::size_t base_tokens = 0;
      decode::AcceptStats total;
      for (std::size_t r = 0; r < repeats; ++r) {
        const auto cond = model::random_condition(m.config, seed + r);
        const auto b = decode::decode_baseline(m, cond, budget);
        decode::DecodeOptions opt;
        opt.budget = budget;
        opt.source = source;
        opt.reference = &b.tokens;
        const auto s = decode::decode_speculative(m, cond, opt);
        if (s.tokens != b.tokens) {
          err << "speculative output diverged from baseline at repeat " << r << "\n";
          return kMismatch;
        }
        base_time += b.seconds;
        base_tokens += b.stats.tokens_emitted;
        spec_time += s.seconds;
        total.forward_passes += s.stats.forward_passes;
        total.tokens_emitted += s.stats.tokens_emitted;
        for (auto k : {model::SplitKind::face, model::SplitKind::point, model::SplitKind::coord}) {
          total.level(k).draft_events += s.stats.level(k).draft_events;
          total.level(k).drafted += s.stats.level(k).drafted;
          total.level(k).accepted += s.stats.level(k).accepted;
        }
      }
      const double t_ori = base_time / static_cast<double>(std::max<std::size_t>(1, base_tokens));
      const double t_ours = spec_time / static_cast<double>(std::max<std::size_t>(1, total.forward_passes));
      const auto rep = decode::speedup_report(total, t_ori, t_ours);
      json j;
      j["repeats"] = repeats;
      j["budget"] = budget;
      j["drafts"] = drafts;
      j["max_draft"] = m.config.max_draft();
      j["forward_passes"] = total.forward_passes;
      j["baseline_passes"] = base_tokens;
      j["tokens"] = total.tokens_emitted;
      j["m_bar"] = rep.m_bar;
      j["t_ori"] = rep.t_ori;
      j["t_ours"] = rep.t_ours;
      j["speedup"] = rep.speedup;
      j["measured_speedup"] = spec_time > 0.0 ? base_time / spec_time : 0.0;
      j["tps"] = spec_time > 0.0 ? static_cast<double>(total.tokens_emitted) / spec_time : 0.0;
      j["baseline_tps"] = base_time > 0.0 ? static_cast<double>(base_tokens) / base_time : 0.0;
      j["face_acc"] = total.face.accepted_per_event();
      j["point_acc"] = total.point.accepted_per_event();
      j["levels"] = decode::level_json(total);
      if (!json_path.empty()) detail::write_text(json_path, j.dump(2) + "\n");
      out << j.dump(2) << "\n";
      return kOk;
    }
    if (*analyze) {
      std::vector<mesh::TokenSequence> seqs;
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(seq_dir))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      std::uint32_t q = 0;
      for (const auto& f : files) {
        auto tf = mesh::read_token_file(f.string());
        if (q == 0) q = tf.bins;
        if (tf.bins != q) throw ParseError("token files disagree on bins: " + f.string(), 0);
        seqs.push_back(std::move(tf.tokens));
      }
      if (seqs.empty()) throw IoError("no token files in " + seq_dir);
      const auto r = analysis::entropy_decomposition(analysis::adjacent_pair_counts(seqs, q));
      json j;
      j["sequences"] = seqs.size();
      j["H_X"] = r.h_x;
      j["H_Y"] = r.h_y;
      j["H_XY"] = r.h_xy;
      j["H_X_given_Y"] = r.h_x_given_y;
      j["H_Y_given_X"] = r.h_y_given_x;
      j["I_XY"] = r.mutual_information;
      j["residual_decomp1"] = r.residual_marginal();
      j["residual_decomp2"] = r.residual_sum();
      if (!json_path.empty()) detail::write_text(json_path, j.dump(2) + "\n");
      out << j.dump(2) << "\n";
      return kOk;
    }
    if (*met) {
      const auto a = mesh::load_obj(gen_path);
      const auto b = mesh::load_obj(ref_path);
      const auto pa = analysis::sample_surface(a, samples, seed);
      const auto pb = analysis::sample_surface(b, samples, seed);
      const auto d = analysis::distances(pa, pb);
      json j;
      j["chamfer"] = d.chamfer;
      j["hausdorff"] = d.hausdorff;
      j["bbox_iou"] = analysis::bbox_iou(a, b);
      out << j.dump(2) << "\n";
      return kOk;
    }
    if (*loss) {
      auto m = model::load_model(model_path);
      const auto cond = model::random_condition(m.config, seed);
      const auto seq = decode::decode_baseline(m, cond, budget).tokens;
      if (gammas.empty()) gammas.push_back(m.config.gamma);
      autodiff::Tape t;
      const auto terms = train::sequence_loss(t, m, cond, seq);
      const double lc = t.value(terms.coord)(0, 0);
      const double ll = terms.has_label ? t.value(terms.label)(0, 0) : 0.0;
      json j;
      j["coord_loss"] = lc;
      j["label_loss"] = ll;
      j["coord_rows"] = terms.coord_rows;
      j["label_rows"] = terms.label_rows;
      json totals = json::array();
      for (double g : gammas) totals.push_back({{"gamma", g}, {"total", train::total_loss(lc, ll, g)}});
      j["total"] = totals;
      if (grad) {
        const auto rep = train::grad_check(m, {{cond, seq}});
        j["grad_check_max_rel_error"] = rep.max_rel_error;
      }
      out << j.dump(2) << "\n";
      return kOk;
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace flashmesh::cli
