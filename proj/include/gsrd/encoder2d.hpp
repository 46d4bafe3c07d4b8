#pragma once

// 2D graph position encoder: the relational transformer with every coordinate
// and distance input removed, projected up to the 3D encoder width. Also hosts
// the random-walk structural encoding used as an alternative position source.

#include <cmath>
#include <string>
#include <vector>

#include "gsrd/featurize.hpp"
#include "gsrd/molgraph.hpp"
#include "gsrd/nn.hpp"
#include "gsrd/tensor.hpp"

namespace gsrd {

enum class PositionKind { kRelational, kRandomWalk };

struct PositionEncoderConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 12;
  std::size_t d_model = 256;  // output width, must match the 3D encoder
  PositionKind kind = PositionKind::kRelational;
  std::size_t rwse_steps = 16;

  void check() const {
    if (width == 0 || heads == 0 || width % heads != 0)
      throw ConfigError("position encoder width " + std::to_string(width) + " is not divisible by heads " +
                        std::to_string(heads));
    if (kind == PositionKind::kRandomWalk && rwse_steps == 0) throw ConfigError("rwse_steps must be >= 1");
  }
};

/// Return probabilities (T^k)_ii, k = 1..steps, of the random walk T = D^-1 A
/// over the bond graph. Rows of isolated atoms are zero. Result is n x steps.
inline std::vector<std::vector<double>> rwse(const std::vector<Bond>& bonds, std::size_t n, std::size_t steps) {
  if (steps == 0) throw DomainError("rwse needs at least one step");
  std::vector<double> t(n * n, 0.0);
  std::vector<double> deg(n, 0.0);
  for (const auto& b : bonds) {
    if (b.i >= n || b.j >= n || b.i == b.j) throw ValidationError("rwse: invalid bond");
    t[b.i * n + b.j] = 1.0;
    t[b.j * n + b.i] = 1.0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) deg[i] += t[i * n + j];
    if (deg[i] > 0)
      for (std::size_t j = 0; j < n; ++j) t[i * n + j] /= deg[i];
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(steps, 0.0));
  std::vector<double> power = t, next(n * n);
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t i = 0; i < n; ++i) out[i][k] = power[i * n + i];
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t m = 0; m < n; ++m) {
        const double a = power[i * n + m];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) next[i * n + j] += a * t[m * n + j];
      }
    std::swap(power, next);
  }
  return out;
}

struct PositionBlock {
  Value norm_attn;
  Value wq_node, wq_edge, wk_node, wk_edge, wv_node, wv_edge;  // [w x w]
  Value w_f;                                                     // [w x w], bias-free
  Value norm_ff;
  FeedForward ff;

  PositionBlock() = default;
  PositionBlock(ParamStore& store, const std::string& prefix, std::size_t w, Rng& rng) {
    const double half = std::sqrt(0.5);
    norm_attn = store.add_constant(prefix + ".norm_attn", 1, w, 1.0);
    wq_node = store.add_normal(prefix + ".wq_node", w, w, rng, half);
    wq_edge = store.add_normal(prefix + ".wq_edge", w, w, rng, half);
    wk_node = store.add_normal(prefix + ".wk_node", w, w, rng, half);
    wk_edge = store.add_normal(prefix + ".wk_edge", w, w, rng, half);
    wv_node = store.add_normal(prefix + ".wv_node", w, w, rng, half);
    wv_edge = store.add_normal(prefix + ".wv_edge", w, w, rng, half);
    w_f = store.add_normal(prefix + ".w_f", w, w, rng, 0.5);
    norm_ff = store.add_constant(prefix + ".norm_ff", 1, w, 1.0);
    ff = FeedForward(store, prefix + ".ff", w, 2 * w, w, rng, true, 0.5);
  }
};

/// phi_2d(a, e): consumes atom types and bonds only.
class PositionEncoder {
 public:
  PositionEncoder() = default;
  PositionEncoder(ParamStore& store, const std::string& prefix, const PositionEncoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg_.check();
    const std::size_t w = cfg.width;
    if (cfg.kind == PositionKind::kRelational) {
      atom_table_ = store.add_normal(prefix + ".embed_atom", kNumElements, w, rng, std::sqrt(10.0));
      edge_table_ = store.add_normal(prefix + ".embed_edge", kNumBondCategories, w, rng, std::sqrt(5.0));
      for (std::size_t l = 0; l < cfg.layers; ++l)
        blocks_.emplace_back(store, prefix + ".layers." + std::to_string(l), w, rng);
      norm_out_ = store.add_constant(prefix + ".norm_out", 1, w, 1.0);
    } else {
      rwse_in_ = Linear(store, prefix + ".rwse_in", cfg.rwse_steps, w, rng);
    }
    projection_ = store.add_normal(prefix + ".projection", w, cfg.d_model, rng);
  }

  const PositionEncoderConfig& config() const { return cfg_; }

  /// Per-atom d_model-wide position encoding. Coordinates are never read.
  Value encode(const std::vector<int>& atom_types, const std::vector<Bond>& bonds) const {
    const std::size_t n = atom_types.size();
    Value x;
    if (cfg_.kind == PositionKind::kRandomWalk) {
      auto feats = rwse(bonds, n, cfg_.rwse_steps);
      std::vector<double> flat;
      for (const auto& row : feats) flat.insert(flat.end(), row.begin(), row.end());
      x = rwse_in_(Value::constant(n, cfg_.rwse_steps, std::move(flat)));
    } else {
      std::vector<std::size_t> types(atom_types.begin(), atom_types.end());
      x = gather_rows(atom_table_, types);
      const PairList pairs = dense_pairs(n);
      std::vector<int> cat(n * n, kNoBond);
      for (const auto& b : bonds) {
        cat[b.i * n + b.j] = b.order;
        cat[b.j * n + b.i] = b.order;
      }
      std::vector<std::size_t> pair_cat(pairs.size());
      for (std::size_t k = 0; k < pairs.size(); ++k)
        pair_cat[k] = static_cast<std::size_t>(cat[pairs.src[k] * n + pairs.dst[k]]);
      for (const auto& blk : blocks_) x = apply_block(x, pair_cat, pairs, blk);
      x = layer_norm(x, norm_out_);
    }
    return matmul(x, projection_);
  }

  Value encode(const MolGraph& g) const { return encode(g.atom_types, g.bonds); }

 private:
  Value apply_block(const Value& x, const std::vector<std::size_t>& cat, const PairList& pairs,
                    const PositionBlock& b) const {
    auto edge = [&](const Value& w) { return gather_rows(matmul(edge_table_, w), cat); };
    const std::size_t n = x.rows(), h = cfg_.heads, dh = cfg_.width / cfg_.heads;
    Value xn = layer_norm(x, b.norm_attn);
    Value q = add(gather_rows(matmul(xn, b.wq_node), pairs.src), edge(b.wq_edge));
    Value k = add(gather_rows(matmul(xn, b.wk_node), pairs.dst), edge(b.wk_edge));
    Value v = add(gather_rows(matmul(xn, b.wv_node), pairs.dst), edge(b.wv_edge));
    Value alpha = silu(scale(block_sum(mul(q, k), h), 1.0 / std::sqrt(static_cast<double>(dh))));
    Value agg = segment_sum(mul(repeat_cols(alpha, dh), v), pairs.src, n);
    Value out = add(x, matmul(agg, b.w_f));
    return add(out, b.ff(layer_norm(out, b.norm_ff)));
  }

  PositionEncoderConfig cfg_;
  Value atom_table_, edge_table_, norm_out_;
  std::vector<PositionBlock> blocks_;
  Linear rwse_in_;
  Value projection_;  // P: width -> d_model
};

}  // namespace gsrd
