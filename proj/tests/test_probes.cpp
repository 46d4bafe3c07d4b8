#include <gtest/gtest.h>

#include "gsrd/probes.hpp"

using namespace gsrd;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 2;
  c.k_rbf = 4;
  c.pe_width = 8;
  c.pe_heads = 2;
  c.pe_layers = 1;
  c.decoder_layers = 1;
  c.batch_size = 4;
  c.accumulate_grad_batches = 1;
  c.max_steps = 6;
  c.warmup_steps = 2;
  c.lr_init = 1e-3;
  c.lr_min = 1e-4;
  c.seed = 3;
  return c;
}

ProbeConfig tiny_probe(std::size_t steps) {
  ProbeConfig p;
  p.width = 16;
  p.steps = steps;
  p.window = 5;
  p.seed = 2;
  return p;
}

}  // namespace

TEST(ProbeSeries, WindowMeans) {
  auto w = window_means({1, 2, 3, 4, 5}, 2);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_DOUBLE_EQ(w[0], 1.5);
  EXPECT_DOUBLE_EQ(w[1], 3.5);
  EXPECT_DOUBLE_EQ(w[2], 5.0);
  EXPECT_DOUBLE_EQ(tail_mean({1, 2, 3, 4, 5}, 2), 4.5);
  EXPECT_DOUBLE_EQ(tail_mean({7}, 50), 7.0);
  EXPECT_THROW(tail_mean({}, 3), ContractError);
}

TEST(MaskedCoordProbe, UntrainedLossIsTargetMeanSquare) {
  Model model(tiny_config());
  auto corpus = generate_synthetic(11, 6, {5, 8});
  auto pc = tiny_probe(0);
  auto samples = masked_coord_samples(model, corpus, pc);
  double ms = 0;
  for (const auto& t : samples.targets)
    for (double v : t) ms += v * v;
  ms /= static_cast<double>(samples.targets.size());
  auto s = masked_coord_probe_series(model, corpus, pc);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0], ms, 1e-12 * ms);
}

TEST(MaskedCoordProbe, SamplesPoolNearestUnmaskedAtoms) {
  Model model(tiny_config());
  auto corpus = generate_synthetic(12, 4, {6, 9});
  auto pc = tiny_probe(0);
  pc.masks_per_molecule = 3;
  auto samples = masked_coord_samples(model, corpus, pc);
  std::size_t expected = 0;
  for (const auto& g : corpus) expected += 3 * mask_count(g.size(), pc.mask_ratio);
  EXPECT_EQ(samples.inputs.size(), expected);
  EXPECT_EQ(samples.targets.size(), expected);
  EXPECT_EQ(samples.inputs[0].size(), 8u);
}

TEST(MaskedCoordProbe, RandomEncoderHasPositiveFloorAndStaysFrozen) {
  Model model(tiny_config());
  auto corpus = generate_synthetic(13, 12, {5, 8});
  auto rep = probe_masked_coords({{"random", &model}}, corpus, tiny_probe(60));
  EXPECT_TRUE(rep.passed("random_frozen"));
  EXPECT_GT(rep.summary.at("random_final"), 0.0);
  EXPECT_LT(rep.summary.at("random_final"), rep.summary.at("random_initial"));
  EXPECT_EQ(rep.series.at("random").size(), 61u);
}

TEST(PeReconstruction, IdentityTargetReachesCosineOne) {
  Model model(tiny_config());
  auto corpus = generate_synthetic(14, 10, {5, 8});
  auto [h, pe] = encoder_and_pe_rows(model, model, corpus);
  auto s = cosine_probe_series(pe, pe, tiny_probe(2000));
  EXPECT_GT(s.back(), 0.999);
  EXPECT_GT(s.back(), s.front());
}

TEST(PeReconstruction, BothModelsStayFrozen) {
  Model model(tiny_config());
  TrainConfig cc = tiny_config();
  cc.seed = 4;
  Model control(cc);
  auto corpus = generate_synthetic(15, 6, {5, 8});
  auto rep = probe_pe_reconstruction(model, control, corpus, tiny_probe(10));
  EXPECT_TRUE(rep.passed("frozen"));
  EXPECT_EQ(rep.series.at("distilled").size(), 11u);
  EXPECT_EQ(rep.series.at("control").size(), 11u);
  EXPECT_NEAR(rep.summary.at("distilled_final"), tail_mean(rep.series.at("distilled"), 5), 1e-15);
}

TEST(Classify, SeparableDataIsLearned) {
  Rng rng(1);
  std::normal_distribution<double> normal(0.0, 0.1);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int k = 0; k < 150; ++k) {
    const int c = k % 3;
    rows.push_back({c == 0 ? 1.0 + normal(rng) : normal(rng), c == 1 ? 1.0 + normal(rng) : normal(rng)});
    labels.push_back(c);
  }
  auto out = classify(rows, labels, 3, tiny_probe(300), 9);
  EXPECT_DOUBLE_EQ(out.accuracy, 1.0);
  EXPECT_LT(out.majority, 0.5);
  EXPECT_GE(out.shuffled_chance, 0.0);
  EXPECT_LE(out.shuffled_chance, 1.0);
  std::size_t total = 0;
  for (const auto& r : out.confusion)
    for (auto v : r) total += v;
  EXPECT_EQ(total, 30u);
}

TEST(Classify, RejectsHoldoutOfEverything) {
  auto pc = tiny_probe(1);
  pc.holdout = 1.0;
  EXPECT_THROW(classify({{0.0}, {1.0}}, {0, 1}, 2, pc, 0), DataError);
}

TEST(PeClassify, ReportsCalibrationAndStaysFrozen) {
  Model model(tiny_config());
  auto corpus = generate_synthetic(16, 10, {5, 8});
  auto rep = probe_pe_classify(model, corpus, tiny_probe(20));
  EXPECT_TRUE(rep.passed("frozen"));
  for (const char* k : {"atom_accuracy", "atom_majority", "atom_chance", "bond_accuracy", "bond_majority",
                        "bond_chance", "bond_presence_accuracy"})
    EXPECT_EQ(rep.summary.count(k), 1u) << k;
  std::size_t bonds = 0;
  for (const auto& g : corpus) bonds += g.bonds.size();
  EXPECT_LE(rep.summary.at("bond_samples"), 2.0 * static_cast<double>(bonds));
  EXPECT_GT(rep.summary.at("bond_samples"), static_cast<double>(bonds));
}

TEST(Leakage, IdenticalArmsGiveIdenticalSeries) {
  auto corpus = generate_synthetic(17, 8, {5, 8});
  auto a = leakage_experiment(corpus, tiny_config(), 2, {"frozen_dependent", "trainable_independent"});
  auto b = leakage_experiment(corpus, tiny_config(), 2, {"frozen_dependent", "trainable_independent"});
  EXPECT_EQ(a.series, b.series);
  EXPECT_TRUE(a.passed("frozen_dependent_encoder_unchanged"));
  EXPECT_EQ(a.series.at("frozen_dependent").size(), 3u);
  EXPECT_TRUE(a.passed("trainable_independent_below_frozen_dependent") ==
              (a.summary.at("trainable_independent_final") < a.summary.at("frozen_dependent_final")));
  ASSERT_EQ(a.ordering.size(), 2u);
  EXPECT_LE(a.summary.at(a.ordering[0] + "_final"), a.summary.at(a.ordering[1] + "_final"));
}

TEST(ProbeReport, CsvAndJsonShape) {
  ProbeReport rep;
  rep.experiment = "x";
  rep.add_series("a", {1, 2, 3});
  rep.add_series("b", {4, 5});
  rep.checks.emplace_back("ok", true);
  EXPECT_EQ(rep.to_csv(), "step,a,b\n0,1,4\n1,2,5\n2,3,\n");
  auto j = rep.to_json();
  EXPECT_EQ(j["experiment"], "x");
  EXPECT_EQ(j["checks"]["ok"], true);
  EXPECT_EQ(j["series_lengths"]["a"], 3);
  EXPECT_THROW(rep.passed("missing"), ContractError);
}
