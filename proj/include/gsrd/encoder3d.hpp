#pragma once

// 3D relational transformer: stacked relational attention with radial
// distance filters, followed by an update layer that exchanges information
// between the scalar stream x_i and the vector stream vec_i.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "gsrd/featurize.hpp"
#include "gsrd/molgraph.hpp"
#include "gsrd/nn.hpp"
#include "gsrd/tensor.hpp"

namespace gsrd {

struct EncoderConfig {
  std::size_t d_model = 256;
  std::size_t heads = 8;
  std::size_t layers = 12;
  std::size_t k_rbf = 64;
  double d_cut = 5.0;
  bool no_3d_attention = false;  // drop the d^k / d^v distance filters
  bool no_update_layer = false;  // keep only dx = o^2, vec stays zero

  std::size_t head_width() const { return d_model / heads; }
  void check() const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
  }
};

/// Per-atom vector features stored per spatial axis: vec[k] is [N x d].
using VecFeatures = std::array<Value, 3>;

inline VecFeatures zero_vec(std::size_t n, std::size_t d) {
  return {Value::zeros(n, d), Value::zeros(n, d), Value::zeros(n, d)};
}

struct EncoderState {
  Value scalar;   // x_i, [N x d]
  VecFeatures vec;
  Value edge_table;                 // e^edge, one row per bond category
  std::vector<std::size_t> pair_cat;  // category of each pair in geometry.pairs
  Value coords;   // [N x 3]
  Geometry geometry;

  std::size_t atoms() const { return scalar.rows(); }

  /// e_ij W for every pair. The 5-row table is projected first and then
  /// gathered, which yields the same rows as projecting gathered features.
  Value project_edges(const Value& w) const { return gather_rows(matmul(edge_table, w), pair_cat); }
};

struct LayerParams {
  Value norm;                // [1 x d]
  Value wq_node, wq_edge;    // [d x d]
  Value wk_node, wk_edge;    // [d x d]
  Value wv_node, wv_edge;    // [d x 3d]
  Value w_dk;                // [k x d]
  Value w_dv;                // [k x 3d]
  Value w_f;                 // [d x 3d], bias-free
  Value w_vec;               // W^v of the update layer, [d x 3d], bias-free

  LayerParams() = default;
  LayerParams(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.d_model, k = cfg.k_rbf;
    const double half = std::sqrt(0.5);  // [n; e] concatenation has fan-in 2d
    norm = store.add_constant(prefix + ".norm", 1, d, 1.0);
    wq_node = store.add_normal(prefix + ".wq_node", d, d, rng, half);
    wq_edge = store.add_normal(prefix + ".wq_edge", d, d, rng, half);
    wk_node = store.add_normal(prefix + ".wk_node", d, d, rng, half);
    wk_edge = store.add_normal(prefix + ".wk_edge", d, d, rng, half);
    wv_node = store.add_normal(prefix + ".wv_node", d, 3 * d, rng, half);
    wv_edge = store.add_normal(prefix + ".wv_edge", d, 3 * d, rng, half);
    w_dk = store.add_normal(prefix + ".w_dk", k, d, rng);
    w_dv = store.add_normal(prefix + ".w_dv", k, 3 * d, rng);
    w_f = store.add_normal(prefix + ".w_f", d, 3 * d, rng, 0.5);
    w_vec = store.add_normal(prefix + ".w_vec", d, 3 * d, rng);
  }
};

struct AttentionOutput {
  Value o1, o2, o3;  // [N x d]
  Value s1, s2, s3;  // [P x d]
};

/// Relational attention over all ordered pairs j != i, applied to the
/// layer-normalized scalar stream. Attention weights are SiLU of the raw
/// scores, with no normalization across neighbours.
inline AttentionOutput relational_attention(const EncoderState& st, const LayerParams& p,
                                            const EncoderConfig& cfg) {
  const std::size_t n = st.atoms(), d = cfg.d_model, h = cfg.heads, dh = cfg.head_width();
  const auto& pairs = st.geometry.pairs;
  Value x = layer_norm(st.scalar, p.norm);
  Value q = add(gather_rows(matmul(x, p.wq_node), pairs.src), st.project_edges(p.wq_edge));
  Value k = add(gather_rows(matmul(x, p.wk_node), pairs.dst), st.project_edges(p.wk_edge));
  Value v = add(gather_rows(matmul(x, p.wv_node), pairs.dst), st.project_edges(p.wv_edge));

  Value s, score;
  if (cfg.no_3d_attention) {
    s = v;
    score = block_sum(mul(q, k), h);
  } else {
    Value dk = silu(matmul(st.geometry.rbf, p.w_dk));
    Value dv = silu(matmul(st.geometry.rbf, p.w_dv));
    s = mul(v, dv);
    score = block_sum(mul(q, mul(k, dk)), h);
  }
  Value alpha = silu(scale(score, 1.0 / std::sqrt(static_cast<double>(dh))));

  AttentionOutput out;
  out.s1 = slice_cols(s, 0, d);
  out.s2 = slice_cols(s, d, d);
  out.s3 = slice_cols(s, 2 * d, d);
  Value agg = segment_sum(mul(repeat_cols(alpha, dh), out.s3), pairs.src, n);
  Value o = matmul(agg, p.w_f);
  out.o1 = slice_cols(o, 0, d);
  out.o2 = slice_cols(o, d, d);
  out.o3 = slice_cols(o, 2 * d, d);
  return out;
}

struct LayerUpdate {
  Value dx;         // [N x d]
  VecFeatures dvec; // undefined entries when the update layer is disabled
};

inline LayerUpdate update_layer(const EncoderState& st, const AttentionOutput& attn, const LayerParams& p,
                                const EncoderConfig& cfg) {
  LayerUpdate up;
  if (cfg.no_update_layer) {
    up.dx = attn.o2;
    return up;
  }
  const std::size_t n = st.atoms(), d = cfg.d_model;
  const auto& pairs = st.geometry.pairs;
  if (!st.geometry.allow_coincident)
    for (double r : st.geometry.dist.data())
      if (!(r > 0.0)) throw GeometryError("update layer: coincident atoms have no direction");

  std::array<Value, 3> u1, u2, u3;
  for (int c = 0; c < 3; ++c) {
    Value u = matmul(st.vec[c], p.w_vec);
    u1[c] = slice_cols(u, 0, d);
    u2[c] = slice_cols(u, d, d);
    u3[c] = slice_cols(u, 2 * d, d);
  }
  Value dot = add(add(mul(u1[0], u2[0]), mul(u1[1], u2[1])), mul(u1[2], u2[2]));
  up.dx = add(attn.o2, mul(attn.o3, dot));
  for (int c = 0; c < 3; ++c) {
    Value dir_c = slice_cols(st.geometry.dir, static_cast<std::size_t>(c), 1);
    Value contrib = add(mul(gather_rows(st.vec[c], pairs.dst), attn.s1), mul(attn.s2, dir_c));
    Value w = segment_sum(contrib, pairs.src, n);
    up.dvec[c] = add(mul(u3[c], attn.o1), w);
  }
  return up;
}

/// One attention + update block with residual updates of both streams.
inline void apply_layer(EncoderState& st, const LayerParams& p, const EncoderConfig& cfg) {
  AttentionOutput attn = relational_attention(st, p, cfg);
  LayerUpdate up = update_layer(st, attn, p, cfg);
  st.scalar = add(st.scalar, up.dx);
  if (!cfg.no_update_layer)
    for (int c = 0; c < 3; ++c) st.vec[c] = add(st.vec[c], up.dvec[c]);
}

struct EncoderOutput {
  Value scalar;  // h, [N x d]
  VecFeatures vec;
};

class Encoder3D {
 public:
  Encoder3D() = default;
  Encoder3D(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.check();
    features_ = FeatureParams(store, prefix, cfg.d_model, RbfSpec::exp_normal(cfg.k_rbf, cfg.d_cut), rng);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      layers_.emplace_back(store, prefix + ".layers." + std::to_string(l), cfg_, rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  EncoderConfig& mutable_config() { return cfg_; }
  const FeatureParams& features() const { return features_; }
  FeatureParams& mutable_features() { return features_; }
  const std::vector<LayerParams>& layers() const { return layers_; }
  std::vector<LayerParams>& mutable_layers() { return layers_; }

  /// Initial state: e^atomic scalars, zero vectors, bond-category pair features.
  EncoderState initial_state(const MolGraph& g, const Value& coords) const {
    EncoderState st;
    st.coords = coords;
    st.geometry = make_geometry(coords, features_.rbf);
    st.scalar = embed_atoms_detailed(g, coords, st.geometry, features_).atomic;
    st.vec = zero_vec(g.size(), cfg_.d_model);
    st.edge_table = features_.edge;
    st.pair_cat = pair_categories(g, st.geometry.pairs);
    return st;
  }

  /// Encodes with explicit (possibly differentiable) coordinates [N x 3].
  EncoderOutput encode(const MolGraph& g, const Value& coords) const {
    EncoderState st = initial_state(g, coords);
    for (const auto& layer : layers_) apply_layer(st, layer, cfg_);
    return {st.scalar, st.vec};
  }

  EncoderOutput encode(const MolGraph& g) const { return encode(g, g.coords_value()); }

 private:
  EncoderConfig cfg_;
  FeatureParams features_;
  std::vector<LayerParams> layers_;
};

/// vec as N x d x 3 row-major (atom, channel, axis).
inline std::vector<double> vec_to_ndx3(const VecFeatures& vec) {
  const std::size_t n = vec[0].rows(), d = vec[0].cols();
  std::vector<double> out(n * d * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t k = 0; k < 3; ++k) out[(i * d + c) * 3 + k] = vec[k].at(i, c);
  return out;
}

}  // namespace gsrd
