#include <gtest/gtest.h>

#include <algorithm>

#include "gsrd/molgraph.hpp"

using namespace gsrd;

namespace {

bool has_violation(const MolGraph& g, const std::string& what) {
  auto v = validate(g);
  return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(what) != std::string::npos; });
}

MolGraph water() {
  MolGraph g;
  g.atom_types = {element_index("O"), element_index("H"), element_index("H")};
  g.coords = {{0, 0, 0}, {0.9572, 0, 0}, {-0.239987, 0.926627, 0}};
  g.bonds = {{0, 1, kSingle}, {0, 2, kSingle}};
  return g;
}

}  // namespace

TEST(Parse, SingleAtomRecord) {
  auto gs = parse_mol3d("atom H 0 0 0\n");
  ASSERT_EQ(gs.size(), 1u);
  EXPECT_EQ(gs[0].size(), 1u);
  EXPECT_TRUE(gs[0].bonds.empty());
}

TEST(Parse, HydrogenMolecule) {
  auto gs = parse_mol3d("#mol3d 0\nnatoms 2\natom H 0 0 0\natom H 0 0 0.74\nbond 0 1 1\nlabel energy -1.17\n\n");
  ASSERT_EQ(gs.size(), 1u);
  const auto& g = gs[0];
  ASSERT_EQ(g.bonds.size(), 1u);
  EXPECT_EQ(g.bonds[0], (Bond{0, 1, kSingle}));
  EXPECT_DOUBLE_EQ(g.distance(0, 1), 0.74);
  EXPECT_DOUBLE_EQ(g.labels.at("energy"), -1.17);
}

TEST(Parse, BondsAreCanonicalized) {
  auto gs = parse_mol3d("atom C 0 0 0\natom O 1.2 0 0\natom H -1 0 0\nbond 2 0 1\nbond 1 0 2\n");
  ASSERT_EQ(gs[0].bonds.size(), 2u);
  EXPECT_EQ(gs[0].bonds[0], (Bond{0, 1, kDouble}));
  EXPECT_EQ(gs[0].bonds[1], (Bond{0, 2, kSingle}));
}

TEST(Parse, DuplicateBondIsValidationError) {
  EXPECT_THROW(parse_mol3d("atom H 0 0 0\natom H 0 0 0.74\nbond 0 1 1\nbond 1 0 1\n"), ValidationError);
}

TEST(Parse, OutOfRangeBondIsValidationError) {
  EXPECT_THROW(parse_mol3d("atom H 0 0 0\natom H 0 0 0.74\nbond 0 5 1\n"), ValidationError);
}

TEST(Parse, UnknownElementIsVocabularyError) {
  EXPECT_THROW(parse_mol3d("atom Xx 0 0 0\n"), VocabularyError);
}

TEST(Parse, MalformedLineReportsLineNumber) {
  try {
    parse_mol3d("atom H 0 0 0\natom H 0 0 zero\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    parse_mol3d("atom H 0 0 0\n\nwhatever 1\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Parse, AcceptsAnyDecimalFloatSyntax) {
  auto gs = parse_mol3d("atom C 1e0 -.5 +2.50E-1\natom C 0x1p1 0 0\n");
  EXPECT_DOUBLE_EQ(gs[0].coords[0][0], 1.0);
  EXPECT_DOUBLE_EQ(gs[0].coords[0][1], -0.5);
  EXPECT_DOUBLE_EQ(gs[0].coords[0][2], 0.25);
}

TEST(Parse, NatomsMismatchIsParseError) {
  EXPECT_THROW(parse_mol3d("natoms 3\natom H 0 0 0\natom H 0 0 1\n"), ParseError);
}

TEST(Parse, ForcesRoundTrip) {
  MolGraph g = water();
  attach_toy_labels(g);
  auto back = parse_mol3d(write_mol3d({g}));
  ASSERT_EQ(back.size(), 1u);
  ASSERT_TRUE(back[0].has_forces());
  for (std::size_t a = 0; a < g.size(); ++a)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(back[0].forces[a][c], g.forces[a][c]);
}

TEST(Parse, WriteParseRoundTripOnSyntheticCorpus) {
  auto corpus = generate_synthetic(99, 50, {3, 16});
  auto back = parse_mol3d(write_mol3d(corpus));
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    ASSERT_EQ(back[k].size(), corpus[k].size());
    EXPECT_EQ(back[k].bonds, corpus[k].bonds);
    EXPECT_EQ(back[k].atom_types, corpus[k].atom_types);
    for (std::size_t a = 0; a < corpus[k].size(); ++a)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(back[k].coords[a][c], corpus[k].coords[a][c], 1e-9);
  }
}

TEST(Validate, WaterIsClean) { EXPECT_TRUE(validate(water()).empty()); }

TEST(Validate, SelfBond) {
  MolGraph g = water();
  g.bonds.push_back({0, 0, kSingle});
  EXPECT_TRUE(has_violation(g, "self-bond"));
}

TEST(Validate, ZeroDistance) {
  MolGraph g = water();
  g.coords[2] = g.coords[1];
  EXPECT_TRUE(has_violation(g, "zero distance"));
}

TEST(Validate, NonCanonicalOrder) {
  MolGraph g = water();
  g.bonds = {{1, 0, kSingle}};
  EXPECT_FALSE(validate(g).empty());
}

TEST(Generate, DeterministicAndEmpty) {
  EXPECT_TRUE(generate_synthetic(1, 0, {5, 12}).empty());
  auto a = generate_synthetic(42, 20, {5, 12});
  auto b = generate_synthetic(42, 20, {5, 12});
  EXPECT_EQ(write_mol3d(a), write_mol3d(b));
}

TEST(Generate, SeedSevenCorpusIsValid) {
  auto corpus = generate_synthetic(7, 100, {5, 12});
  ASSERT_EQ(corpus.size(), 100u);
  for (const auto& g : corpus) {
    EXPECT_TRUE(validate(g).empty());
    EXPECT_GE(min_distance(g), 0.8);
    EXPECT_GE(g.size(), 5u);
    EXPECT_LE(g.size(), 12u);
    for (int t : g.atom_types) EXPECT_TRUE(t == 0 || t == 1 || t == 2 || t == 3);
    for (const auto& b : g.bonds) {
      double r = g.distance(b.i, b.j);
      EXPECT_GE(r, 1.0 - 1e-12);
      EXPECT_LE(r, 1.6 + 1e-12);
    }
  }
}

TEST(Generate, TenThousandSamplesValidatorClean) {
  auto corpus = generate_synthetic(12345, 10000, {3, 32});
  for (const auto& g : corpus) ASSERT_TRUE(validate(g).empty());
}

TEST(Generate, RangeOutsideLimitsIsDomainError) {
  EXPECT_THROW(generate_synthetic(1, 1, {2, 5}), DomainError);
  EXPECT_THROW(generate_synthetic(1, 1, {5, 33}), DomainError);
}

TEST(Graph, PermuteAndSelect) {
  MolGraph g = water();
  MolGraph p = permute_atoms(g, {2, 0, 1});
  EXPECT_EQ(p.atom_types[2], g.atom_types[0]);
  EXPECT_EQ(p.coords[0], g.coords[1]);
  EXPECT_EQ(p.bond_order(2, 0), kSingle);
  EXPECT_EQ(p.bond_order(2, 1), kSingle);
  EXPECT_EQ(p.bond_order(0, 1), kNoBond);
  MolGraph s = select_atoms(g, {0, 2});
  EXPECT_EQ(s.size(), 2u);
  ASSERT_EQ(s.bonds.size(), 1u);
  EXPECT_EQ(s.bonds[0], (Bond{0, 1, kSingle}));
}

TEST(MaskPlanCheck, Invariants) {
  MaskPlan m;
  m.masked = {1};
  m.noise.assign(3, Vec3{0, 0, 0});
  EXPECT_TRUE(validate(m, 3).empty());
  EXPECT_EQ(m.unmasked(3), (std::vector<std::size_t>{0, 2}));
  m.noise[1] = {0.1, 0, 0};
  EXPECT_FALSE(validate(m, 3).empty());
  MaskPlan all;
  all.masked = {0, 1};
  all.noise.assign(2, Vec3{0, 0, 0});
  EXPECT_FALSE(validate(all, 2).empty());
}

TEST(ToyPotential, ForcesMatchFiniteDifferences) {
  auto corpus = generate_synthetic(3, 5, {4, 8});
  for (auto& g : corpus) {
    std::vector<Vec3> f;
    toy_energy(g, &f);
    const double h = 1e-6;
    for (std::size_t a = 0; a < g.size(); ++a)
      for (int c = 0; c < 3; ++c) {
        MolGraph p = g, m = g;
        p.coords[a][c] += h;
        m.coords[a][c] -= h;
        double num = -(toy_energy(p) - toy_energy(m)) / (2 * h);
        EXPECT_NEAR(f[a][c], num, 1e-6);
      }
  }
}
