#pragma once

// Weight layout of the hourglass backbone plus its speculative heads, with a
// single tensor walker that drives initialisation, serialisation and
// gradient bookkeeping.
//
// Convention: activations are row vectors, a linear map is `y = x * W + b`
// with W shaped (in, out).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "flashmesh/model/config.hpp"
#include "flashmesh/nn/matrix.hpp"
#include "flashmesh/util/random.hpp"

namespace flashmesh::model {

using nn::Matrix;

enum class TensorRole { weight, bias, norm_gain };

struct LayerNormW {
  Matrix gain, bias;
};

struct LinearW {
  Matrix w, b;
};

struct FfnW {
  Matrix w1, b1, w2, b2;
};

/// Pre-norm transformer block: causal self-attention, cross-attention to the
/// condition, feed-forward.
struct BlockW {
  LayerNormW ln_self;
  Matrix wq, wk, wv, wo;
  LayerNormW ln_cross;
  Matrix cq, ck, cv, co;
  LayerNormW ln_ffn;
  FfnW ffn;
};

/// One parameter-independent draft head: self-attention over its own input
/// token, cross-attention to the condition, output linear, outer residual.
struct SpHeadW {
  LayerNormW ln_self;
  Matrix sa_v, sa_o;
  LayerNormW ln_cross;
  Matrix ca_q, ca_k, ca_v, ca_o;
  LinearW out;
};

/// Hierarchical fusion: per-slot query projection and FFN, key/value
/// projections shared across slots.
struct HfBlockW {
  std::array<Matrix, 3> wq;
  Matrix wk, wv;
  std::array<FfnW, 3> ffn;
};

struct HourglassModel {
  ModelConfig config;
  Matrix embed;
  std::vector<BlockW> coord_pre, coord_post, point_pre, point_post, face;
  LinearW shorten_cp, shorten_pf;    // 3d -> d
  LinearW upsample_pc, upsample_fp;  // d -> 3d
  LayerNormW final_ln;
  Matrix out_head;
  LinearW label_head;  // d -> 3
  std::vector<SpHeadW> sp_coord, sp_point, sp_face;
  HfBlockW hf_point_coord, hf_face_point, hf_face_coord;
};

namespace detail {

template <class M, class F>
void walk_ln(const std::string& p, M& ln, F& f) {
  f(p + ".gain", ln.gain, TensorRole::norm_gain);
  f(p + ".bias", ln.bias, TensorRole::bias);
}

template <class M, class F>
void walk_linear(const std::string& p, M& l, F& f) {
  f(p + ".w", l.w, TensorRole::weight);
  f(p + ".b", l.b, TensorRole::bias);
}

template <class M, class F>
void walk_ffn(const std::string& p, M& l, F& f) {
  f(p + ".w1", l.w1, TensorRole::weight);
  f(p + ".b1", l.b1, TensorRole::bias);
  f(p + ".w2", l.w2, TensorRole::weight);
  f(p + ".b2", l.b2, TensorRole::bias);
}

template <class M, class F>
void walk_block(const std::string& p, M& b, F& f) {
  walk_ln(p + ".ln_self", b.ln_self, f);
  f(p + ".wq", b.wq, TensorRole::weight);
  f(p + ".wk", b.wk, TensorRole::weight);
  f(p + ".wv", b.wv, TensorRole::weight);
  f(p + ".wo", b.wo, TensorRole::weight);
  walk_ln(p + ".ln_cross", b.ln_cross, f);
  f(p + ".cq", b.cq, TensorRole::weight);
  f(p + ".ck", b.ck, TensorRole::weight);
  f(p + ".cv", b.cv, TensorRole::weight);
  f(p + ".co", b.co, TensorRole::weight);
  walk_ln(p + ".ln_ffn", b.ln_ffn, f);
  walk_ffn(p + ".ffn", b.ffn, f);
}

template <class M, class F>
void walk_sp(const std::string& p, M& h, F& f) {
  walk_ln(p + ".ln_self", h.ln_self, f);
  f(p + ".sa_v", h.sa_v, TensorRole::weight);
  f(p + ".sa_o", h.sa_o, TensorRole::weight);
  walk_ln(p + ".ln_cross", h.ln_cross, f);
  f(p + ".ca_q", h.ca_q, TensorRole::weight);
  f(p + ".ca_k", h.ca_k, TensorRole::weight);
  f(p + ".ca_v", h.ca_v, TensorRole::weight);
  f(p + ".ca_o", h.ca_o, TensorRole::weight);
  walk_linear(p + ".out", h.out, f);
}

template <class M, class F>
void walk_hf(const std::string& p, M& h, F& f) {
  for (int t = 0; t < 3; ++t) f(p + ".wq" + std::to_string(t), h.wq[t], TensorRole::weight);
  f(p + ".wk", h.wk, TensorRole::weight);
  f(p + ".wv", h.wv, TensorRole::weight);
  for (int t = 0; t < 3; ++t) walk_ffn(p + ".ffn" + std::to_string(t), h.ffn[t], f);
}

template <class V, class G>
void walk_vec(const std::string& p, V& v, G&& g) {
  for (std::size_t i = 0; i < v.size(); ++i) g(p + "." + std::to_string(i), v[i]);
}

}  // namespace detail

/// Calls f(name, matrix, role) for every tensor in a fixed order.
template <class Model, class F>
void for_each_tensor(Model& m, F&& f) {
  using namespace detail;
  f(std::string("embed"), m.embed, TensorRole::weight);
  auto blocks = [&](const char* name, auto& v) {
    walk_vec(name, v, [&](const std::string& p, auto& b) { walk_block(p, b, f); });
  };
  blocks("coord_pre", m.coord_pre);
  blocks("point_pre", m.point_pre);
  blocks("face", m.face);
  blocks("point_post", m.point_post);
  blocks("coord_post", m.coord_post);
  walk_linear("shorten_cp", m.shorten_cp, f);
  walk_linear("shorten_pf", m.shorten_pf, f);
  walk_linear("upsample_pc", m.upsample_pc, f);
  walk_linear("upsample_fp", m.upsample_fp, f);
  walk_ln("final_ln", m.final_ln, f);
  f(std::string("out_head"), m.out_head, TensorRole::weight);
  walk_linear("label_head", m.label_head, f);
  auto heads = [&](const char* name, auto& v) {
    walk_vec(name, v, [&](const std::string& p, auto& h) { walk_sp(p, h, f); });
  };
  heads("sp_coord", m.sp_coord);
  heads("sp_point", m.sp_point);
  heads("sp_face", m.sp_face);
  walk_hf("hf_point_coord", m.hf_point_coord, f);
  walk_hf("hf_face_point", m.hf_face_point, f);
  walk_hf("hf_face_coord", m.hf_face_coord, f);
}

/// Allocates every tensor with the shape implied by `cfg` (zero-filled).
inline HourglassModel allocate(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.model_dim, v = cfg.vocab(), f = cfg.ffn_dim, cl = cfg.condition_len;
  (void)cl;
  HourglassModel m;
  m.config = cfg;
  auto ln = [&] { return LayerNormW{Matrix(1, d), Matrix(1, d)}; };
  auto ffn = [&] { return FfnW{Matrix(d, f), Matrix(1, f), Matrix(f, d), Matrix(1, d)}; };
  auto block = [&] {
    return BlockW{ln(), Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d),
                  ln(), Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d),
                  ln(), ffn()};
  };
  auto sp = [&] {
    return SpHeadW{ln(), Matrix(d, d), Matrix(d, d), ln(), Matrix(d, d), Matrix(d, d),
                   Matrix(d, d), Matrix(d, d), LinearW{Matrix(d, d), Matrix(1, d)}};
  };
  auto hf = [&] {
    HfBlockW h;
    for (int t = 0; t < 3; ++t) {
      h.wq[t] = Matrix(d, d);
      h.ffn[t] = ffn();
    }
    h.wk = Matrix(d, d);
    h.wv = Matrix(d, d);
    return h;
  };
  m.embed = Matrix(v, d);
  m.coord_pre.assign(cfg.coord_pre_layers(), block());
  m.coord_post.assign(cfg.coord_post_layers(), block());
  m.point_pre.assign(cfg.point_pre_layers(), block());
  m.point_post.assign(cfg.point_post_layers(), block());
  m.face.assign(cfg.layers_face, block());
  m.shorten_cp = {Matrix(3 * d, d), Matrix(1, d)};
  m.shorten_pf = {Matrix(3 * d, d), Matrix(1, d)};
  m.upsample_pc = {Matrix(d, 3 * d), Matrix(1, 3 * d)};
  m.upsample_fp = {Matrix(d, 3 * d), Matrix(1, 3 * d)};
  m.final_ln = ln();
  m.out_head = Matrix(d, v);
  m.label_head = {Matrix(d, 3), Matrix(1, 3)};
  m.sp_coord.assign(cfg.draft_coord, sp());
  m.sp_point.assign(cfg.point_heads(), sp());
  m.sp_face.assign(cfg.face_heads(), sp());
  m.hf_point_coord = hf();
  m.hf_face_point = hf();
  m.hf_face_coord = hf();
  return m;
}

/// Weights uniform in +-1/sqrt(fan_in) (fan_in = rows), biases zero, norm
/// gains one. Every tensor draws from its own stream keyed by (seed, name).
inline HourglassModel init_random(const ModelConfig& cfg, std::uint64_t seed) {
  HourglassModel m = allocate(cfg);
  for_each_tensor(m, [&](const std::string& name, Matrix& t, TensorRole role) {
    auto vals = t.values();
    switch (role) {
      case TensorRole::bias:
        std::fill(vals.begin(), vals.end(), 0.0);
        break;
      case TensorRole::norm_gain:
        std::fill(vals.begin(), vals.end(), 1.0);
        break;
      case TensorRole::weight: {
        util::Rng rng(util::mix_seed(seed, util::fnv1a(name)));
        const double bound = 1.0 / std::sqrt(static_cast<double>(t.rows()));
        for (double& x : vals) x = rng.uniform(-bound, bound);
        break;
      }
    }
  });
  return m;
}

// ---------------------------------------------------------------------------
// Binary format: "MFLS", u32 version, config block, u32 tensor count, then per
// tensor: u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64.
// Everything little-endian.

inline constexpr std::uint32_t kFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw ParseError("truncated model file", pos_);
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const HourglassModel& m) {
  using detail::put_u32;
  std::vector<std::uint8_t> out{'M', 'F', 'L', 'S'};
  put_u32(out, kFormatVersion);
  const auto& c = m.config;
  for (std::uint32_t v : {c.layers_face, c.layers_point, c.layers_coord, c.model_dim, c.heads,
                          c.ffn_dim, c.bins, c.draft_face, c.draft_point, c.draft_coord,
                          c.condition_len})
    put_u32(out, v);
  detail::put_f64(out, c.gamma);
  std::uint32_t count = 0;
  for_each_tensor(m, [&](const std::string&, const Matrix&, TensorRole) { ++count; });
  put_u32(out, count);
  for_each_tensor(m, [&](const std::string& name, const Matrix& t, TensorRole) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (double x : t.values()) detail::put_f64(out, x);
  });
  return out;
}

inline HourglassModel deserialize(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4) != "MFLS") throw ParseError("bad magic, not a model file", 0);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw ParseError("unsupported model format version " + std::to_string(version), 4);
  ModelConfig c;
  for (std::uint32_t* f : {&c.layers_face, &c.layers_point, &c.layers_coord, &c.model_dim, &c.heads,
                           &c.ffn_dim, &c.bins, &c.draft_face, &c.draft_point, &c.draft_coord,
                           &c.condition_len})
    *f = r.u32();
  c.gamma = r.f64();
  HourglassModel m = allocate(c);
  const std::uint32_t count = r.u32();
  std::uint32_t seen = 0;
  for_each_tensor(m, [&](const std::string& name, Matrix& t, TensorRole) {
    ++seen;
    if (seen > count) throw ParseError("model file has too few tensors", 0);
    const auto len = r.u32();
    const std::string got = r.bytes(len);
    if (got != name) throw ParseError("tensor '" + got + "' where '" + name + "' expected", 0);
    const auto rows = r.u32(), cols = r.u32();
    if (rows != t.rows() || cols != t.cols())
      throw ContractError("tensor '" + name + "' shape does not match config");
    for (double& x : t.values()) x = r.f64();
  });
  if (seen != count || !r.done()) throw ParseError("model file has trailing data", 0);
  return m;
}

inline void save_model(const HourglassModel& m, const std::string& path) {
  const auto bytes = serialize(m);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path);
}

inline HourglassModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace flashmesh::model
