#pragma once

// Decoder side of masked graph modeling: re-masking of encoder outputs,
// selective re-mask decoding with a stop-gradient 2D position term, the
// structure-independent transformer decoder, the structure-dependent ablation
// decoder, position / denoising heads and the pretraining losses.

#include <cmath>
#include <string>
#include <vector>

#include "gsrd/encoder2d.hpp"
#include "gsrd/encoder3d.hpp"
#include "gsrd/featurize.hpp"
#include "gsrd/molgraph.hpp"
#include "gsrd/nn.hpp"
#include "gsrd/tensor.hpp"

namespace gsrd {

/// Re-inserts the masked slots: encoder rows go back to their original
/// (unmasked) indices and every masked index receives the shared token m_h.
inline Value remask(const Value& h, const MaskPlan& mask, const Value& m_h, std::size_t n) {
  auto unmasked = mask.unmasked(n);
  if (unmasked.size() != h.rows() || unmasked.size() + mask.masked.size() != n)
    throw ContractError("remask: " + std::to_string(h.rows()) + " encoder rows + " +
                        std::to_string(mask.masked.size()) + " masked != " + std::to_string(n) + " atoms");
  if (m_h.rows() != 1 || m_h.cols() != h.cols())
    throw DimensionError("remask: mask token " + m_h.shape() + " vs encoder width " + std::to_string(h.cols()));
  Value kept = scatter_rows(h, std::move(unmasked), n);
  Value tokens = gather_rows(m_h, std::vector<std::size_t>(mask.masked.size(), 0));
  return add(kept, scatter_rows(tokens, mask.masked, n));
}

struct SRDState {
  Value tokens;        // [N x d]
  VecFeatures vec_in;  // [N x d] per axis, zero at masked slots
  MaskPlan mask;

  std::size_t atoms() const { return tokens.rows(); }
};

/// tokens = remask(h) + stop_gradient(pe). An undefined `pe` gives plain
/// re-mask decoding.
inline SRDState srd(const Value& h, const VecFeatures& vec, const MaskPlan& mask, const Value& pe, const Value& m_h,
                    std::size_t n) {
  SRDState s;
  s.mask = mask;
  s.tokens = remask(h, mask, m_h, n);
  if (pe.defined()) {
    if (pe.rows() != n || pe.cols() != h.cols())
      throw DimensionError("srd: position encoding " + pe.shape() + " does not match " + s.tokens.shape());
    s.tokens = add(s.tokens, stop_gradient(pe));
  }
  auto unmasked = mask.unmasked(n);
  for (int c = 0; c < 3; ++c) s.vec_in[c] = scatter_rows(vec[c], unmasked, n);
  return s;
}

struct DecoderConfig {
  std::size_t d_model = 256;
  std::size_t heads = 8;
  std::size_t layers = 2;

  void check() const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw ConfigError("decoder d_model " + std::to_string(d_model) + " is not divisible by heads " +
                        std::to_string(heads));
  }
};

struct DecoderOutput {
  Value rep;  // [N x d]
  VecFeatures vec;
};

struct TransformerBlock {
  Value norm_attn, wq, wk, wv, wo;
  Value norm_ff;
  FeedForward ff;

  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
    norm_attn = store.add_constant(prefix + ".norm_attn", 1, d, 1.0);
    wq = store.add_normal(prefix + ".wq", d, d, rng);
    wk = store.add_normal(prefix + ".wk", d, d, rng);
    wv = store.add_normal(prefix + ".wv", d, d, rng);
    wo = store.add_normal(prefix + ".wo", d, d, rng, 0.5);
    norm_ff = store.add_constant(prefix + ".norm_ff", 1, d, 1.0);
    ff = FeedForward(store, prefix + ".ff", d, 2 * d, d, rng, true, 0.5);
  }
};

/// Plain transformer over the token sequence. It never sees bonds,
/// coordinates or distances; vectors are gated per channel, not mixed.
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore& store, const std::string& prefix, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.check();
    for (std::size_t l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(store, prefix + ".layers." + std::to_string(l), cfg.d_model, rng);
    norm_out_ = store.add_constant(prefix + ".norm_out", 1, cfg.d_model, 1.0);
    gate_ = Linear(store, prefix + ".vec_gate", cfg.d_model, cfg.d_model, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  DecoderOutput operator()(const SRDState& s) const {
    const std::size_t n = s.atoms(), h = cfg_.heads, dh = cfg_.d_model / cfg_.heads;
    const PairList pairs = dense_pairs(n, true);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Value x = s.tokens;
    for (const auto& b : blocks_) {
      Value xn = layer_norm(x, b.norm_attn);
      Value q = gather_rows(matmul(xn, b.wq), pairs.src);
      Value k = gather_rows(matmul(xn, b.wk), pairs.dst);
      Value v = gather_rows(matmul(xn, b.wv), pairs.dst);
      Value alpha = segment_softmax(scale(block_sum(mul(q, k), h), inv), pairs.src, n);
      Value agg = segment_sum(mul(repeat_cols(alpha, dh), v), pairs.src, n);
      x = add(x, matmul(agg, b.wo));
      x = add(x, b.ff(layer_norm(x, b.norm_ff)));
    }
    DecoderOutput out;
    out.rep = layer_norm(x, norm_out_);
    Value g = gate_(out.rep);
    for (int c = 0; c < 3; ++c) out.vec[c] = mul(s.vec_in[c], g);
    return out;
  }

 private:
  DecoderConfig cfg_;
  std::vector<TransformerBlock> blocks_;
  Value norm_out_;
  Linear gate_;
};

/// Coordinates seen by the structure-dependent decoder: the given frame for
/// unmasked atoms, the unmasked centroid for masked ones.
inline Value impute_masked_coords(const Value& coords, const MaskPlan& mask) {
  const std::size_t n = coords.rows();
  auto unmasked = mask.unmasked(n);
  Vec3 centroid{0, 0, 0};
  std::vector<double> buf;
  for (int k = 0; k < 3; ++k) {
    buf.clear();
    for (std::size_t i : unmasked) buf.push_back(coords.at(i, k) / static_cast<double>(unmasked.size()));
    centroid[k] = detail::ordered_sum(buf);
  }
  std::vector<double> out(coords.data().begin(), coords.data().end());
  for (std::size_t i : mask.masked)
    for (int k = 0; k < 3; ++k) out[i * 3 + k] = centroid[k];
  return Value::constant(n, 3, std::move(out));
}

/// Ablation decoder: a short 3D relational stack that receives the true bond
/// table and (imputed) geometry, i.e. leaks structure past the encoder.
class StructureDecoder {
 public:
  StructureDecoder() = default;
  StructureDecoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.check();
    spec_ = RbfSpec::exp_normal(cfg.k_rbf, cfg.d_cut);
    edge_ = store.add_normal(prefix + ".embed_edge", kNumBondCategories, cfg.d_model, rng, std::sqrt(5.0));
    for (std::size_t l = 0; l < cfg.layers; ++l)
      layers_.emplace_back(store, prefix + ".layers." + std::to_string(l), cfg_, rng);
    norm_out_ = store.add_constant(prefix + ".norm_out", 1, cfg.d_model, 1.0);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// `coords` is the full-size frame the encoder worked in; masked rows are
  /// replaced by the unmasked centroid before use.
  DecoderOutput operator()(const SRDState& s, const MolGraph& g, const Value& coords) const {
    EncoderState st;
    st.coords = impute_masked_coords(coords, s.mask);
    st.geometry = make_geometry(st.coords, spec_, true);
    st.scalar = s.tokens;
    st.vec = s.vec_in;
    st.edge_table = edge_;
    st.pair_cat = pair_categories(g, st.geometry.pairs);
    for (const auto& layer : layers_) apply_layer(st, layer, cfg_);
    if (layers_.empty()) return {s.tokens, s.vec_in};
    return {layer_norm(st.scalar, norm_out_), st.vec};
  }

 private:
  EncoderConfig cfg_;
  RbfSpec spec_;
  Value edge_;
  std::vector<LayerParams> layers_;
  Value norm_out_;
};

/// x_hat_i = A(rep_i) + sum_c g(rep_i)_c vec_i[c]. Used for both positions and noise.
struct VectorHead {
  FeedForward a;
  Linear gate;

  VectorHead() = default;
  VectorHead(ParamStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
    a = FeedForward(store, prefix + ".mlp", d, d, 3, rng, false);
    gate = Linear(store, prefix + ".gate", d, d, rng, false);
  }

  Value operator()(const Value& rep, const VecFeatures& vec) const {
    Value base = a(rep);
    Value g = gate(rep);
    Value along = concat_cols({sum_cols(mul(g, vec[0])), sum_cols(mul(g, vec[1])), sum_cols(mul(g, vec[2]))});
    return add(base, along);
  }
};

/// Sum over masked atoms of squared coordinate error.
inline Value mgm_loss(const Value& pred, const Value& target, const MaskPlan& mask) {
  if (mask.masked.empty()) throw ContractError("mgm_loss: empty mask set");
  if (pred.rows() != target.rows() || pred.cols() != 3 || target.cols() != 3)
    throw DimensionError("mgm_loss: " + pred.shape() + " vs " + target.shape());
  Value diff = sub(gather_rows(pred, mask.masked), gather_rows(target, mask.masked));
  return sum(square(diff));
}

/// Sum over unmasked atoms of squared noise-prediction error.
inline Value denoise_loss(const Value& pred, const Value& noise, const MaskPlan& mask) {
  auto unmasked = mask.unmasked(pred.rows());
  Value diff = sub(gather_rows(pred, unmasked), gather_rows(noise, unmasked));
  return sum(square(diff));
}

/// -sum over unmasked atoms of cos(pe_i, stop_gradient(h_clean_i)).
inline Value distill_loss(const Value& pe, const Value& h_clean, const MaskPlan& mask) {
  auto unmasked = mask.unmasked(pe.rows());
  Value cos = cosine_rows(gather_rows(pe, unmasked), stop_gradient(gather_rows(h_clean, unmasked)));
  return neg(sum(cos));
}

struct PretrainTerms {
  Value total;
  Value mgm;
  Value denoise;
  Value distill;          // undefined when distillation is off
  double cosine_mean = 0; // mean unmasked cosine, for logging
};

/// L_MGM + w * denoise + L_distill for one molecule.
inline PretrainTerms pretrain_loss(const Value& pos_pred, const Value& target, const Value& noise_pred,
                                   const Value& noise, const Value& pe, const Value& h_clean, const MaskPlan& mask,
                                   double denoise_weight) {
  PretrainTerms t;
  t.mgm = mgm_loss(pos_pred, target, mask);
  t.total = t.mgm;
  if (noise_pred.defined()) {
    t.denoise = denoise_loss(noise_pred, noise, mask);
    t.total = add(t.total, scale(t.denoise, denoise_weight));
  } else {
    t.denoise = Value::scalar(0.0);
  }
  if (pe.defined() && h_clean.defined()) {
    t.distill = distill_loss(pe, h_clean, mask);
    t.total = add(t.total, t.distill);
    t.cosine_mean = -t.distill.item() / static_cast<double>(pe.rows() - mask.masked.size());
  }
  return t;
}

}  // namespace gsrd
