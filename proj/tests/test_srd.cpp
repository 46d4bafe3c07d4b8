#include <gtest/gtest.h>

#include <numeric>

#include "gsrd/srd.hpp"
#include "gsrd/train.hpp"

using namespace gsrd;

namespace {

MaskPlan plan(std::size_t n, std::vector<std::size_t> masked) {
  MaskPlan m;
  m.masked = std::move(masked);
  m.noise.assign(n, Vec3{0, 0, 0});
  return m;
}

VecFeatures random_vec(std::size_t n, std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  VecFeatures v;
  for (auto& a : v) {
    std::vector<double> x(n * d);
    for (double& t : x) t = normal(rng);
    a = Value::constant(n, d, std::move(x));
  }
  return v;
}

Value random_value(std::size_t r, std::size_t c, Rng& rng, bool param = false) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(r * c);
  for (double& t : x) t = normal(rng);
  return param ? Value::parameter(r, c, std::move(x)) : Value::constant(r, c, std::move(x));
}

DecoderConfig dcfg(std::size_t d = 8) {
  DecoderConfig c;
  c.d_model = d;
  c.heads = 2;
  c.layers = 2;
  return c;
}

TrainConfig tiny_model() {
  TrainConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 2;
  c.k_rbf = 4;
  c.pe_width = 8;
  c.pe_heads = 2;
  c.pe_layers = 1;
  c.decoder_layers = 1;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Remask, TwoAtomsOneMasked) {
  Value h = Value::constant(1, 2, {1, 2});
  Value m_h = Value::constant(1, 2, {9, 9});
  Value out = remask(h, plan(2, {1}), m_h, 2);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 9, 9}));
}

TEST(Remask, CountMismatchIsContractError) {
  Value h = Value::constant(2, 2, {1, 2, 3, 4});
  EXPECT_THROW(remask(h, plan(3, {0, 1}), Value::constant(1, 2, {0, 0}), 3), ContractError);
  EXPECT_THROW(remask(h, plan(3, {1}), Value::constant(1, 3, {0, 0, 0}), 3), DimensionError);
}

TEST(Remask, PreservesUnmaskedRowsAndRoutesGradients) {
  Rng rng(1);
  Value h = random_value(4, 3, rng, true);
  Value m_h = random_value(1, 3, rng, true);
  MaskPlan m = plan(6, {1, 4});
  Value out = remask(h, m, m_h, 6);
  const std::vector<std::size_t> un{0, 2, 3, 5};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(un[r], c), h.at(r, c));
  for (std::size_t r : m.masked)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(r, c), m_h.at(0, c));
  Value w = random_value(6, 3, rng);
  backward(sum(mul(out, w)));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(h.grad()[r * 3 + c], w.at(un[r], c));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(m_h.grad()[c], w.at(1, c) + w.at(4, c));
}

TEST(Srd, ZeroPositionEncodingReducesToRemask) {
  Rng rng(2);
  Value h = random_value(3, 4, rng);
  Value m_h = random_value(1, 4, rng);
  MaskPlan m = plan(4, {2});
  VecFeatures vec = random_vec(3, 4, rng);
  SRDState s = srd(h, vec, m, Value::zeros(4, 4), m_h, 4);
  Value r = remask(h, m, m_h, 4);
  for (std::size_t k = 0; k < r.size(); ++k) EXPECT_EQ(s.tokens.data()[k], r.data()[k]);
  for (int c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(s.vec_in[c].at(2, k), 0.0);
  EXPECT_THROW(srd(h, vec, m, Value::zeros(3, 4), m_h, 4), DimensionError);
}

TEST(Srd, PositionTermBlocksGradient) {
  Rng rng(3);
  Value pe = random_value(3, 2, rng, true);
  Value h = random_value(2, 2, rng, true);
  SRDState s = srd(h, random_vec(2, 2, rng), plan(3, {0}), pe, random_value(1, 2, rng), 3);
  backward(sum(square(s.tokens)));
  EXPECT_FALSE(pe.has_grad());
  EXPECT_TRUE(h.has_grad());
}

TEST(Srd, SymmetricMaskedAtomsGetIdenticalTokens) {
  // Path C-C-C: the two ends are symmetric, so plain remasking and the
  // 2D position term both give them equal tokens when both are masked.
  ParamStore store;
  Rng rng(4);
  PositionEncoderConfig pc;
  pc.width = 8;
  pc.heads = 2;
  pc.layers = 2;
  pc.d_model = 4;
  PositionEncoder pe(store, "pe", pc, rng);
  MolGraph g;
  g.atom_types = {1, 1, 1};
  g.coords = {{0, 0, 0}, {1.5, 0, 0}, {3.0, 0, 0}};
  g.bonds = {{0, 1, kSingle}, {1, 2, kSingle}};
  Value p = pe.encode(g);
  Value h = random_value(1, 4, rng);
  Value m_h = random_value(1, 4, rng);
  SRDState s = srd(h, random_vec(1, 4, rng), plan(3, {0, 2}), p, m_h, 3);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(s.tokens.at(0, c), s.tokens.at(2, c));
    EXPECT_EQ(p.at(0, c), p.at(2, c));
  }
}

TEST(Decoder, IndependentOfBondsAndCoordinates) {
  Model model(tiny_model());
  Rng rng(5);
  auto g = generate_synthetic(5, 1, {5, 5})[0];
  MaskPlan m = plan(5, {3});
  SRDState s = srd(random_value(4, 8, rng), random_vec(4, 8, rng), m, Value(), model.mask_token, 5);
  MolGraph other = g;
  other.bonds.clear();
  for (auto& x : other.coords) x = {x[1] * 2.0, -x[0], x[2] + 4.0};
  DecoderOutput a = model.decode(s, g, g.coords_value());
  DecoderOutput b = model.decode(s, other, other.coords_value());
  for (std::size_t k = 0; k < a.rep.size(); ++k) ASSERT_EQ(a.rep.data()[k], b.rep.data()[k]);
  for (int c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < a.vec[c].size(); ++k) ASSERT_EQ(a.vec[c].data()[k], b.vec[c].data()[k]);
}

TEST(Decoder, ZeroVectorsStayZero) {
  ParamStore store;
  Rng rng(6);
  Decoder dec(store, "dec", dcfg(), rng);
  SRDState s;
  s.tokens = random_value(5, 8, rng);
  s.mask = plan(5, {1});
  for (auto& v : s.vec_in) v = Value::zeros(5, 8);
  DecoderOutput out = dec(s);
  for (const auto& v : out.vec)
    for (double x : v.data()) EXPECT_EQ(x, 0.0);
}

TEST(Decoder, PermutationEquivariantBitExact) {
  ParamStore store;
  Rng rng(7);
  Decoder dec(store, "dec", dcfg(), rng);
  SRDState s;
  s.tokens = random_value(6, 8, rng);
  s.vec_in = random_vec(6, 8, rng);
  s.mask = plan(6, {2});
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  std::vector<std::size_t> inv(6);
  for (std::size_t i = 0; i < 6; ++i) inv[perm[i]] = i;
  SRDState p;
  p.tokens = gather_rows(s.tokens, inv);
  for (int c = 0; c < 3; ++c) p.vec_in[c] = gather_rows(s.vec_in[c], inv);
  p.mask = plan(6, {perm[2]});
  DecoderOutput a = dec(s), b = dec(p);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_EQ(a.rep.at(i, c), b.rep.at(perm[i], c));
      EXPECT_EQ(a.vec[1].at(i, c), b.vec[1].at(perm[i], c));
    }
}

TEST(StructureDecoder, ImputedCentroidIsOrderFree) {
  Rng rng(9);
  Value x = random_value(7, 3, rng);
  MaskPlan m = plan(7, {1, 4});
  const std::vector<std::size_t> perm{3, 6, 0, 5, 1, 2, 4};
  std::vector<std::size_t> inv(7);
  for (std::size_t i = 0; i < 7; ++i) inv[perm[i]] = i;
  MaskPlan pm = plan(7, {perm[1], perm[4]});
  std::sort(pm.masked.begin(), pm.masked.end());
  Value a = impute_masked_coords(x, m), b = impute_masked_coords(gather_rows(x, inv), pm);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(a.at(i, k), b.at(perm[i], k));
  EXPECT_EQ(a.at(1, 0), a.at(4, 0));
}

TEST(StructureDecoder, SeesBondsOfMaskedAtoms) {
  ParamStore store;
  Rng rng(8);
  EncoderConfig ec;
  ec.d_model = 8;
  ec.heads = 2;
  ec.layers = 1;
  ec.k_rbf = 4;
  StructureDecoder dec(store, "dec", ec, rng);
  auto g = generate_synthetic(9, 1, {5, 5})[0];
  MaskPlan m = plan(5, {0});
  SRDState s = srd(random_value(4, 8, rng), random_vec(4, 8, rng), m, Value(), random_value(1, 8, rng), 5);
  DecoderOutput a = dec(s, g, g.coords_value());
  MolGraph h = g;
  h.bonds.clear();
  DecoderOutput b = dec(s, h, g.coords_value());
  double diff = 0;
  for (std::size_t k = 0; k < a.rep.size(); ++k) diff += std::fabs(a.rep.data()[k] - b.rep.data()[k]);
  EXPECT_GT(diff, 1e-8);
}

TEST(Heads, GradientsMatchFiniteDifferences) {
  ParamStore store;
  Rng rng(9);
  VectorHead head(store, "head", 6, rng);
  Value rep = random_value(4, 6, rng, true);
  VecFeatures vec = random_vec(4, 6, rng);
  Value target = random_value(4, 3, rng);
  auto loss = [&] { return sum(square(sub(head(rep, vec), target))); };
  EXPECT_LT(finite_diff_check_leaf(loss, rep, 1e-6).max_rel_error, 1e-6);
  for (const auto& e : store.entries())
    EXPECT_LT(finite_diff_check_leaf(loss, e.value, 1e-6).max_rel_error, 1e-6) << e.name;
}

TEST(Losses, MgmExamples) {
  MaskPlan m = plan(2, {1});
  Value x = Value::constant(2, 3, {0, 0, 0, 1, 1, 1});
  EXPECT_EQ(mgm_loss(x, x, m).item(), 0.0);
  Value off = Value::constant(2, 3, {7, 7, 7, 2, 1, 1});
  EXPECT_DOUBLE_EQ(mgm_loss(off, x, m).item(), 1.0);
  MaskPlan both = plan(3, {0, 2});
  Value p = Value::constant(3, 3, {1, 0, 0, 0, 0, 0, 0, 2, 0});
  EXPECT_DOUBLE_EQ(mgm_loss(p, Value::zeros(3, 3), both).item(), 5.0);
  EXPECT_THROW(mgm_loss(x, x, plan(2, {})), ContractError);
}

TEST(Losses, DistillExamples) {
  MaskPlan m = plan(5, {1, 3});
  Rng rng(10);
  Value h = random_value(5, 4, rng);
  EXPECT_NEAR(distill_loss(h, h, m).item(), -3.0, 1e-12);
  Value pe = Value::constant(2, 2, {1, 0, 0, 1});
  Value hc = Value::constant(2, 2, {0, 1, 1, 0});
  EXPECT_NEAR(distill_loss(pe, hc, plan(2, {})).item(), 0.0, 1e-15);
}

TEST(Losses, DistillOnlyReachesPositionEncoder) {
  Rng rng(11);
  Value pe = random_value(4, 3, rng, true);
  Value h = random_value(4, 3, rng, true);
  backward(distill_loss(pe, h, plan(4, {2})));
  EXPECT_TRUE(pe.has_grad());
  EXPECT_FALSE(h.has_grad());
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(pe.grad()[2 * 3 + c], 0.0);
}

TEST(Pretrain, EncoderReceivesNoPositionOrDistillGradientThroughSrd) {
  // With only the distillation term active, encoder parameters must get
  // exactly zero gradient: h_clean is a constant and SRD stops pe.
  TrainConfig cfg = tiny_model();
  Model model(cfg);
  auto g = generate_synthetic(12, 1, {6, 6})[0];
  Rng rng(13);
  MaskPlan m = sample_mask(g.size(), 0.25, 0.04, rng);
  PretrainForward f = pretrain_forward(model, g, m, RigidMotion{});
  backward(f.terms.distill);
  for (const auto& e : model.store.entries()) {
    if (e.name.rfind("encoder.", 0) == 0 || e.name.rfind("decoder.", 0) == 0)
      for (double v : e.value.grad_or_zero()) ASSERT_EQ(v, 0.0) << e.name;
  }
  double pe_mag = 0;
  for (const auto& e : model.store.entries())
    if (e.name.rfind("pe.", 0) == 0)
      for (double v : e.value.grad_or_zero()) pe_mag += std::fabs(v);
  EXPECT_GT(pe_mag, 0.0);

  model.store.zero_grad();
  backward(add(f.terms.mgm, f.terms.denoise));
  for (const auto& e : model.store.entries())
    if (e.name.rfind("pe.", 0) == 0)
      for (double v : e.value.grad_or_zero()) ASSERT_EQ(v, 0.0) << e.name;
}

// Stop-gradient paths (h_clean, pe inside SRD) are invisible to reverse mode
// but not to finite differences, so each check keeps them out of the way.
TEST(Pretrain, FullLossGradientsMatchFiniteDifferences) {
  auto g = generate_synthetic(14, 1, {5, 5})[0];
  Rng rng(15);
  MaskPlan m = sample_mask(g.size(), 0.4, 0.04, rng);
  RigidMotion motion = sample_augmentation(rng);
  auto sampled = [](const Value& v) {
    std::vector<std::size_t> idx;
    const std::size_t stride = std::max<std::size_t>(1, v.size() / 4);
    for (std::size_t k = stride / 2; k < v.size(); k += stride) idx.push_back(k);
    return idx;
  };
  for (std::string decoder : {"independent", "dependent"}) {
    TrainConfig cfg = tiny_model();
    cfg.use_distill = false;
    cfg.decoder = decoder;
    Model model(cfg);
    auto loss = [&] { return pretrain_forward(model, g, m, motion).terms.total; };
    for (const auto& e : model.store.entries()) {
      if (e.name.rfind("label_head", 0) == 0 || e.name.rfind("pe.", 0) == 0) continue;
      auto r = finite_diff_check_leaf(loss, e.value, 1e-5, sampled(e.value));
      EXPECT_LT(r.max_rel_error, 1e-4) << decoder << " " << e.name << " analytic " << r.analytic << " numeric "
                                       << r.numeric;
    }
  }
  // distillation w.r.t. the position encoder, clean target held fixed
  TrainConfig cfg = tiny_model();
  Model model(cfg);
  Value h_clean = pretrain_forward(model, g, m, motion).h_clean;
  auto loss = [&] { return distill_loss(model.pe.encode(g), h_clean, m); };
  for (const auto& e : model.store.entries()) {
    if (e.name.rfind("pe.", 0) != 0) continue;
    auto r = finite_diff_check_leaf(loss, e.value, 1e-5, sampled(e.value));
    EXPECT_LT(r.max_rel_error, 1e-4) << e.name << " analytic " << r.analytic << " numeric " << r.numeric;
  }
}
