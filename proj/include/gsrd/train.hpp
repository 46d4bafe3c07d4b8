#pragma once

// Training machinery: masking and noise sampling, rigid augmentation, AdamW
// with warmup + cosine schedule, loss EMA, the model container, and the
// pretraining / finetuning loops. Forces are central differences of the
// predicted energy so that force matching stays first-order differentiable.

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gsrd/encoder2d.hpp"
#include "gsrd/encoder3d.hpp"
#include "gsrd/molgraph.hpp"
#include "gsrd/nn.hpp"
#include "gsrd/srd.hpp"
#include "gsrd/tensor.hpp"

namespace gsrd {

struct TrainConfig {
  // 3D encoder
  std::size_t d_model = 256;
  std::size_t heads = 8;
  std::size_t layers = 12;
  std::size_t k_rbf = 64;
  double d_cut = 5.0;
  bool no_3d_attention = false;
  bool no_update_layer = false;
  // 2D position encoder
  std::string pe_kind = "retrans";  // retrans | rwse
  std::size_t pe_width = 64;
  std::size_t pe_heads = 4;
  std::size_t pe_layers = 12;
  std::size_t rwse_steps = 16;
  // decoder
  std::string decoder = "independent";  // independent | dependent
  std::size_t decoder_layers = 2;
  bool use_srd = true;
  bool use_distill = true;
  // pretraining
  double mask_ratio = 0.25;
  double noise_scale = 0.04;
  double denoise_weight = 0.1;
  bool augmentation = true;
  bool freeze_encoder = false;
  // optimisation
  std::size_t batch_size = 128;
  std::size_t accumulate_grad_batches = 2;
  double lr_init = 5e-5;
  double lr_min = 1e-6;
  std::size_t warmup_steps = 10000;
  std::size_t max_steps = 100000;
  double weight_decay = 1e-16;
  // finetuning
  std::string task = "energy_forces";  // energy | energy_forces | property
  std::string label = "energy";
  std::string loss_type = "mae";  // mse | mae
  double force_weight = 0.8;
  double energy_weight = 0.2;
  double ema_alpha_y = 0.05;
  double ema_alpha_dy = 1.0;
  double fd_step = 1e-3;
  std::uint64_t seed = 0;

  EncoderConfig encoder_config() const {
    EncoderConfig c;
    c.d_model = d_model;
    c.heads = heads;
    c.layers = layers;
    c.k_rbf = k_rbf;
    c.d_cut = d_cut;
    c.no_3d_attention = no_3d_attention;
    c.no_update_layer = no_update_layer;
    return c;
  }
  PositionEncoderConfig pe_config() const {
    PositionEncoderConfig c;
    c.width = pe_width;
    c.heads = pe_heads;
    c.layers = pe_layers;
    c.d_model = d_model;
    c.kind = pe_kind == "rwse" ? PositionKind::kRandomWalk : PositionKind::kRelational;
    c.rwse_steps = rwse_steps;
    return c;
  }

  void check() const {
    encoder_config().check();
    pe_config().check();
    if (pe_kind != "retrans" && pe_kind != "rwse") throw ConfigError("pe_kind must be retrans or rwse");
    if (decoder != "independent" && decoder != "dependent") throw ConfigError("decoder must be independent or dependent");
    if (task != "energy" && task != "energy_forces" && task != "property")
      throw ConfigError("task must be energy, energy_forces or property");
    if (loss_type != "mse" && loss_type != "mae") throw ConfigError("loss_type must be mse or mae");
    if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("mask_ratio must lie in (0, 1)");
    if (noise_scale < 0 || denoise_weight < 0 || force_weight < 0 || energy_weight < 0 || weight_decay < 0)
      throw ConfigError("weights and scales must be non-negative");
    if (lr_min > lr_init) throw ConfigError("lr_min exceeds lr_init");
    if (batch_size == 0 || accumulate_grad_batches == 0) throw ConfigError("batch sizes must be positive");
    if (!(ema_alpha_y > 0 && ema_alpha_y <= 1) || !(ema_alpha_dy > 0 && ema_alpha_dy <= 1))
      throw ConfigError("ema alphas must lie in (0, 1]");
    if (!(fd_step > 0)) throw ConfigError("fd_step must be positive");
  }
};

// ---------------------------------------------------------------------------
// Sampling

inline std::size_t mask_count(std::size_t n, double p) {
  if (n < 2) throw ContractError("masking needs at least two atoms, got " + std::to_string(n));
  auto m = static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 0.5));
  return std::clamp<std::size_t>(m, 1, n - 1);
}

/// Uniform masked subset of size clamp(floor(p n + 1/2), 1, n - 1) plus
/// Gaussian noise of scale `noise_scale` on every unmasked coordinate.
inline MaskPlan sample_mask(std::size_t n, double p, double noise_scale, Rng& rng) {
  const std::size_t m = mask_count(n, p);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t k = 0; k < m; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, n - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  MaskPlan plan;
  plan.masked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(plan.masked.begin(), plan.masked.end());
  plan.noise.assign(n, Vec3{0, 0, 0});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (plan.is_masked(i)) continue;
    for (int c = 0; c < 3; ++c) plan.noise[i][c] = noise_scale * normal(rng);
  }
  return plan;
}

/// x -> R x + t.
struct RigidMotion {
  std::array<std::array<double, 3>, 3> r{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 t{0, 0, 0};

  Vec3 rotate(const Vec3& x) const {
    Vec3 y{};
    for (int i = 0; i < 3; ++i) y[i] = r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2];
    return y;
  }
  Vec3 apply(const Vec3& x) const {
    Vec3 y = rotate(x);
    for (int i = 0; i < 3; ++i) y[i] += t[i];
    return y;
  }
  std::vector<Vec3> apply(const std::vector<Vec3>& xs) const {
    std::vector<Vec3> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(apply(x));
    return out;
  }
  std::vector<Vec3> rotate(const std::vector<Vec3>& xs) const {
    std::vector<Vec3> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(rotate(x));
    return out;
  }
};

/// Haar-uniform rotation from a normalized Gaussian quaternion.
inline std::array<std::array<double, 3>, 3> random_rotation(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double q[4], s = 0;
  do {
    s = 0;
    for (double& v : q) {
      v = normal(rng);
      s += v * v;
    }
  } while (s < 1e-12);
  s = std::sqrt(s);
  const double w = q[0] / s, x = q[1] / s, y = q[2] / s, z = q[3] / s;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
           {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
           {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

/// Random SO(3) rotation plus a shared translation t ~ N(0, 0.01 I).
inline RigidMotion sample_augmentation(Rng& rng) {
  RigidMotion m;
  m.r = random_rotation(rng);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (double& v : m.t) v = normal(rng);
  return m;
}

inline std::vector<Vec3> augment(const std::vector<Vec3>& coords, Rng& rng) {
  return sample_augmentation(rng).apply(coords);
}

// ---------------------------------------------------------------------------
// Optimisation

/// Linear warmup to lr_init, cosine decay to lr_min at max_steps, then flat.
inline double lr_schedule(std::size_t step, const TrainConfig& c) {
  if (step < c.warmup_steps)
    return c.lr_init * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  if (c.max_steps <= c.warmup_steps) return c.lr_min;
  if (step >= c.max_steps) return c.lr_min;
  const double progress =
      static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.max_steps - c.warmup_steps);
  return c.lr_min + 0.5 * (c.lr_init - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with bias correction and decoupled weight decay over a ParamStore.
/// Parameters with requires_grad off are left untouched.
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store, double lr, double weight_decay) {
    const auto& entries = store.entries();
    if (m_.size() != entries.size()) {
      m_.resize(entries.size());
      v_.resize(entries.size());
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto& g = entries[k].value.grad();
      if (entries[k].value.has_grad())
        for (double x : g)
          if (!std::isfinite(x)) throw NonFiniteError("non-finite gradient in parameter " + entries[k].name);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < entries.size(); ++k) {
      Value p = entries[k].value;
      if (!p.requires_grad()) continue;
      auto data = p.mutable_data();
      std::vector<double> g = p.grad_or_zero();
      if (m_[k].empty()) {
        m_[k].assign(data.size(), 0.0);
        v_[k].assign(data.size(), 0.0);
      }
      for (std::size_t i = 0; i < data.size(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1 - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1 - beta2_) * g[i] * g[i];
        data[i] -= lr * weight_decay * data[i];
        data[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Exponential smoothing of a loss term: the live value is blended with the
/// previous (constant) smoothed value. alpha = 1 is the identity.
class LossEma {
 public:
  explicit LossEma(double alpha) : alpha_(alpha) {}
  Value operator()(const Value& loss) {
    Value out = loss;
    if (prev_) out = add_scalar(scale(loss, alpha_), (1.0 - alpha_) * *prev_);
    prev_ = out.item();
    return out;
  }
  double operator()(double loss) {
    double out = prev_ ? alpha_ * loss + (1.0 - alpha_) * *prev_ : loss;
    prev_ = out;
    return out;
  }

 private:
  double alpha_;
  std::optional<double> prev_;
};

// ---------------------------------------------------------------------------
// Model

/// Per-atom feedforward on [scalar; per-channel vector norms], summed over atoms.
struct LabelHead {
  FeedForward mlp;

  LabelHead() = default;
  LabelHead(ParamStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
    mlp = FeedForward(store, prefix, 2 * d, d, 1, rng);
  }

  Value operator()(const EncoderOutput& h) const {
    Value norms = sqrt(add_scalar(add(add(square(h.vec[0]), square(h.vec[1])), square(h.vec[2])), 1e-8));
    return sum_rows(mlp(concat_cols({h.scalar, norms})));
  }
};

class Model {
 public:
  explicit Model(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.check();
    Rng rng(cfg.seed);
    encoder = Encoder3D(store, "encoder", cfg.encoder_config(), rng);
    pe = PositionEncoder(store, "pe", cfg.pe_config(), rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> tok(cfg.d_model);
    for (double& v : tok) v = normal(rng);
    mask_token = store.add("decoder.mask_token", 1, cfg.d_model, std::move(tok));
    if (cfg.decoder == "dependent") {
      EncoderConfig dc = cfg.encoder_config();
      dc.layers = cfg.decoder_layers;
      structure_decoder = StructureDecoder(store, "decoder", dc, rng);
    } else {
      DecoderConfig dc;
      dc.d_model = cfg.d_model;
      dc.heads = cfg.heads;
      dc.layers = cfg.decoder_layers;
      decoder = Decoder(store, "decoder", dc, rng);
    }
    pos_head = VectorHead(store, "pos_head", cfg.d_model, rng);
    denoise_head = VectorHead(store, "denoise_head", cfg.d_model, rng);
    label_head = LabelHead(store, "label_head", cfg.d_model, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const TrainConfig& config() const { return cfg_; }
  bool structure_dependent() const { return cfg_.decoder == "dependent"; }

  DecoderOutput decode(const SRDState& s, const MolGraph& g, const Value& coords) const {
    return structure_dependent() ? structure_decoder(s, g, coords) : decoder(s);
  }

  /// Predicted label (energy) for explicit coordinates.
  Value energy(const MolGraph& g, const Value& coords) const { return label_head(encoder.encode(g, coords)); }
  Value energy(const MolGraph& g) const { return energy(g, g.coords_value()); }

  ParamStore store;
  Encoder3D encoder;
  PositionEncoder pe;
  Value mask_token;
  Decoder decoder;
  StructureDecoder structure_decoder;
  VectorHead pos_head;
  VectorHead denoise_head;
  LabelHead label_head;

 private:
  TrainConfig cfg_;
};

inline Value coords_to_value(const std::vector<Vec3>& xs) {
  std::vector<double> d;
  d.reserve(xs.size() * 3);
  for (const auto& x : xs) d.insert(d.end(), x.begin(), x.end());
  return Value::constant(xs.size(), 3, std::move(d));
}

// ---------------------------------------------------------------------------
// Pretraining

/// Everything the pretraining forward pass produces for one molecule.
struct PretrainForward {
  PretrainTerms terms;
  EncoderOutput encoded;  // masked-graph encoder output (unmasked rows only)
  Value pe;               // full-graph position encoding (undefined if unused)
  Value h_clean;          // clean full-graph encoder output (constant)
  SRDState state;
  DecoderOutput decoded;
  Value pos_pred, noise_pred;
};

/// One molecule through masking, noise, augmentation, encoding, SRD,
/// decoding and the heads. `motion` is applied to both the noised input and
/// the clean targets so every term lives in one frame.
inline PretrainForward pretrain_forward(const Model& model, const MolGraph& g, const MaskPlan& mask,
                                        const RigidMotion& motion) {
  const auto& cfg = model.config();
  const std::size_t n = g.size();
  std::vector<Vec3> noisy(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) noisy[i][c] = g.coords[i][c] + mask.noise[i][c];
  const std::vector<Vec3> clean_frame = motion.apply(g.coords);
  const std::vector<Vec3> noisy_frame = motion.apply(noisy);
  const std::vector<Vec3> noise_frame = motion.rotate(mask.noise);

  PretrainForward f;
  MolGraph corrupted = with_coords(g, noisy_frame);
  MolGraph visible = select_atoms(corrupted, mask.unmasked(n));
  f.encoded = model.encoder.encode(visible);

  const bool need_pe = cfg.use_srd || cfg.use_distill;
  if (need_pe) f.pe = model.pe.encode(g);
  f.state = srd(f.encoded.scalar, f.encoded.vec, mask, cfg.use_srd ? f.pe : Value(), model.mask_token, n);
  f.decoded = model.decode(f.state, corrupted, coords_to_value(noisy_frame));
  f.pos_pred = model.pos_head(f.decoded.rep, f.decoded.vec);
  if (cfg.denoise_weight > 0) f.noise_pred = model.denoise_head(f.decoded.rep, f.decoded.vec);

  if (cfg.use_distill) {
    NoGradGuard guard;
    f.h_clean = model.encoder.encode(with_coords(g, clean_frame)).scalar;
  }
  f.terms = pretrain_loss(f.pos_pred, coords_to_value(clean_frame), f.noise_pred, coords_to_value(noise_frame),
                          cfg.use_distill ? f.pe : Value(), f.h_clean, mask, cfg.denoise_weight);
  return f;
}

struct PretrainLog {
  std::size_t step = 0;
  double lr = 0;
  double loss_total = 0;
  double loss_mgm = 0;
  double loss_denoise = 0;
  double loss_distill = 0;
  double distill_cosine_mean = 0;
};

/// Deterministic epoch-shuffled batch order.
class BatchSampler {
 public:
  BatchSampler(std::size_t corpus, std::size_t batch, std::uint64_t seed)
      : n_(corpus), batch_(std::min(batch, corpus)), rng_(seed) {
    if (corpus == 0) throw DataError("empty corpus");
  }
  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Stream offsets so that data order, masks and augmentations are independent
// draws and identical across runs that differ only in architecture.
inline constexpr std::uint64_t kDataStream = 0x9E3779B97F4A7C15ull;
inline constexpr std::uint64_t kMaskStream = 0xBF58476D1CE4E5B9ull;
inline constexpr std::uint64_t kAugStream = 0x94D049BB133111EBull;

/// Algorithm-1 pretraining. Runs cfg.max_steps optimizer updates; each update
/// accumulates cfg.accumulate_grad_batches batches. Returns one log row per update.
inline std::vector<PretrainLog> pretrain(Model& model, const std::vector<MolGraph>& corpus,
                                         const std::function<void(const PretrainLog&)>& on_step = {}) {
  const auto& cfg = model.config();
  for (std::size_t k = 0; k < corpus.size(); ++k)
    if (corpus[k].size() < 2) throw DataError("molecule " + std::to_string(k) + " has fewer than two atoms");
  if (cfg.freeze_encoder) model.store.set_trainable("encoder.", false);
  BatchSampler sampler(corpus.size(), cfg.batch_size, cfg.seed ^ kDataStream);
  Rng mask_rng(cfg.seed ^ kMaskStream), aug_rng(cfg.seed ^ kAugStream);
  AdamW opt;
  std::vector<PretrainLog> log;
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    model.store.zero_grad();
    PretrainLog row;
    row.step = step;
    std::size_t count = 0;
    for (std::size_t a = 0; a < cfg.accumulate_grad_batches; ++a) {
      auto batch = sampler.next();
      const double w = 1.0 / static_cast<double>(batch.size() * cfg.accumulate_grad_batches);
      for (std::size_t idx : batch) {
        const MolGraph& g = corpus[idx];
        MaskPlan mask = sample_mask(g.size(), cfg.mask_ratio, cfg.noise_scale, mask_rng);
        RigidMotion motion = cfg.augmentation ? sample_augmentation(aug_rng) : RigidMotion{};
        PretrainForward f = pretrain_forward(model, g, mask, motion);
        const double total = f.terms.total.item();
        if (!std::isfinite(total))
          throw NonFiniteError("non-finite pretraining loss at step " + std::to_string(step) + ", molecule " +
                               std::to_string(idx) + " (mgm " + std::to_string(f.terms.mgm.item()) + ")");
        backward(scale(f.terms.total, w));
        row.loss_total += total;
        row.loss_mgm += f.terms.mgm.item();
        row.loss_denoise += f.terms.denoise.item();
        if (f.terms.distill.defined()) row.loss_distill += f.terms.distill.item();
        row.distill_cosine_mean += f.terms.cosine_mean;
        ++count;
      }
    }
    const double inv = 1.0 / static_cast<double>(count);
    row.loss_total *= inv;
    row.loss_mgm *= inv;
    row.loss_denoise *= inv;
    row.loss_distill *= inv;
    row.distill_cosine_mean *= inv;
    row.lr = lr_schedule(step + 1, cfg);
    opt.step(model.store, row.lr, cfg.weight_decay);
    log.push_back(row);
    if (on_step) on_step(row);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Forces and finetuning

/// F_ik = -(E(x + h e_ik) - E(x - h e_ik)) / 2h. Each energy is an ordinary
/// forward pass, so the result stays differentiable w.r.t. the parameters.
inline Value forces_fd(const std::function<Value(const Value&)>& energy, const Value& coords, double h) {
  if (!(h > 0)) throw DomainError("finite-difference step must be positive");
  const std::size_t n = coords.rows();
  std::vector<Value> entries;
  entries.reserve(n * 3);
  std::vector<double> base(coords.data().begin(), coords.data().end());
  for (std::size_t k = 0; k < n * 3; ++k) {
    std::vector<double> plus = base, minus = base;
    plus[k] += h;
    minus[k] -= h;
    Value ep = energy(Value::constant(n, 3, std::move(plus)));
    Value em = energy(Value::constant(n, 3, std::move(minus)));
    entries.push_back(scale(sub(ep, em), -1.0 / (2.0 * h)));
  }
  return reshape(concat_rows(entries), n, 3);
}

inline Value forces_fd(const Model& model, const MolGraph& g, double h) {
  return forces_fd([&](const Value& x) { return model.energy(g, x); }, g.coords_value(), h);
}

/// Reverse-mode -dE/dx, for verification only. Parameter gradients touched
/// along the way are cleared.
inline std::vector<Vec3> forces_autodiff(Model& model, const MolGraph& g) {
  Value c0 = g.coords_value();
  Value x = Value::parameter(g.size(), 3, std::vector<double>(c0.data().begin(), c0.data().end()));
  backward(model.energy(g, x));
  std::vector<double> gr = x.grad_or_zero();
  model.store.zero_grad();
  std::vector<Vec3> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (int c = 0; c < 3; ++c) out[i][c] = -gr[i * 3 + c];
  return out;
}

struct FinetuneLog {
  std::size_t step = 0;
  double lr = 0;
  double loss_energy = 0;
  double loss_force = 0;
  double mae = 0;
};

inline double label_of(const MolGraph& g, const std::string& name, std::size_t index) {
  auto it = g.labels.find(name);
  if (it == g.labels.end())
    throw DataError("molecule " + std::to_string(index) + " has no label '" + name + "'");
  return it->second;
}

struct FinetuneTerms {
  Value energy_error;  // err(E - y), 1x1
  Value force_error;   // mean err(F_fd - F) over atoms and axes (undefined without forces)
  double abs_error = 0;
};

/// Per-molecule finetuning errors with the molecule moved by `motion`;
/// reference forces are rotated into the same frame.
inline FinetuneTerms finetune_terms(const Model& model, const MolGraph& g0, double y, const RigidMotion& motion) {
  const auto& cfg = model.config();
  const bool mae = cfg.loss_type == "mae";
  auto err = [mae](const Value& v) { return mae ? abs(v) : square(v); };
  MolGraph g = with_coords(g0, motion.apply(g0.coords));
  FinetuneTerms t;
  Value e = model.energy(g);
  t.energy_error = err(add_scalar(e, -y));
  t.abs_error = std::fabs(e.item() - y);
  if (cfg.task == "energy_forces") {
    Value f = forces_fd(model, g, cfg.fd_step);
    t.force_error = mean(err(sub(f, coords_to_value(motion.rotate(g0.forces)))));
  }
  return t;
}

/// Algorithm-2 finetuning of the encoder plus label head.
inline std::vector<FinetuneLog> finetune(Model& model, const std::vector<MolGraph>& corpus,
                                         const std::function<void(const FinetuneLog&)>& on_step = {}) {
  const auto& cfg = model.config();
  const bool with_forces = cfg.task == "energy_forces";
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    label_of(corpus[k], cfg.label, k);
    if (with_forces && !corpus[k].has_forces()) throw DataError("molecule " + std::to_string(k) + " has no forces");
  }
  if (cfg.freeze_encoder) model.store.set_trainable("encoder.", false);
  BatchSampler sampler(corpus.size(), cfg.batch_size, cfg.seed ^ kDataStream);
  Rng aug_rng(cfg.seed ^ kAugStream);
  AdamW opt;
  LossEma ema_y(cfg.ema_alpha_y), ema_dy(cfg.ema_alpha_dy);
  std::vector<FinetuneLog> log;
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    model.store.zero_grad();
    FinetuneLog row;
    row.step = step;
    std::size_t count = 0;
    for (std::size_t a = 0; a < cfg.accumulate_grad_batches; ++a) {
      auto batch = sampler.next();
      std::vector<Value> le, lf;
      for (std::size_t idx : batch) {
        RigidMotion motion = cfg.augmentation ? sample_augmentation(aug_rng) : RigidMotion{};
        FinetuneTerms t = finetune_terms(model, corpus[idx], label_of(corpus[idx], cfg.label, idx), motion);
        le.push_back(t.energy_error);
        if (with_forces) lf.push_back(t.force_error);
        row.mae += t.abs_error;
        ++count;
      }
      Value loss_e = mean(concat_rows(le));
      Value total;
      Value smoothed_e = ema_y(loss_e);
      row.loss_energy += loss_e.item();
      if (with_forces) {
        Value loss_f = mean(concat_rows(lf));
        Value smoothed_f = ema_dy(loss_f);
        row.loss_force += loss_f.item();
        total = add(scale(smoothed_e, cfg.energy_weight), scale(smoothed_f, cfg.force_weight));
      } else {
        total = smoothed_e;
      }
      if (!std::isfinite(total.item()))
        throw NonFiniteError("non-finite finetuning loss at step " + std::to_string(step));
      backward(scale(total, 1.0 / static_cast<double>(cfg.accumulate_grad_batches)));
    }
    row.loss_energy /= static_cast<double>(cfg.accumulate_grad_batches);
    row.loss_force /= static_cast<double>(cfg.accumulate_grad_batches);
    row.mae /= static_cast<double>(count);
    row.lr = lr_schedule(step + 1, cfg);
    opt.step(model.store, row.lr, cfg.weight_decay);
    log.push_back(row);
    if (on_step) on_step(row);
  }
  return log;
}

/// Mean absolute label error over a corpus (no augmentation).
inline double evaluate_mae(const Model& model, const std::vector<MolGraph>& corpus, const std::string& label) {
  NoGradGuard guard;
  double total = 0;
  for (std::size_t k = 0; k < corpus.size(); ++k)
    total += std::fabs(model.energy(corpus[k]).item() - label_of(corpus[k], label, k));
  return total / static_cast<double>(corpus.size());
}

}  // namespace gsrd
