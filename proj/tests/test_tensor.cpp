#include <gtest/gtest.h>

#include <random>

#include "gsrd/tensor.hpp"

using namespace gsrd;

namespace {

Value random_param(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(r * c);
  for (double& x : d) x = u(rng);
  return Value::parameter(r, c, std::move(d));
}

Value random_const(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Value v = random_param(r, c, rng);
  return stop_gradient(v);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Value m = Value::constant(2, 2, {1, 2, 3, 4});
  Value id = Value::constant(2, 2, {1, 0, 0, 1});
  Value out = matmul(m, id);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 3, 4}));

  std::mt19937_64 rng(3);
  Value m3 = random_const(3, 5, rng);
  Value id3 = Value::constant(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Value out3 = matmul(id3, m3);
  for (std::size_t i = 0; i < m3.size(); ++i) EXPECT_EQ(out3.data()[i], m3.data()[i]);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Value a = Value::zeros(2, 3), b = Value::zeros(2, 3);
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("and [2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesAgainstFiniteDifferences) {
  Value a = Value::parameter(2, 2, {0.3, -0.2, 1.5, 0.7});
  Value b = Value::constant(2, 1, {1, 1});
  backward(sum(matmul(a, b)));
  for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
  double err = finite_diff_check([&](const Value& x) { return sum(matmul(x, b)); }, a, 1e-6);
  EXPECT_LT(err, 1e-8);
}

TEST(Silu, KnownValues) {
  Value x = Value::parameter(1, 3, {0.0, 1.0, -1.0});
  Value y = silu(x);
  EXPECT_EQ(y.data()[0], 0.0);
  // 1 / (1 + e^-1), 30-digit evaluation
  EXPECT_NEAR(y.data()[1], 0.731058578630004879251159099939, 1e-15);
  EXPECT_NEAR(y.data()[2], -0.268941421369995120748840900061, 1e-15);
  backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.5);
  EXPECT_LT(finite_diff_check([](const Value& v) { return sum(silu(v)); }, Value::constant(1, 3, {-1, 0, 1}), 1e-5),
            1e-6);
}

TEST(Cosine, KnownValues) {
  Value u = Value::constant(1, 2, {1, 1}), v = Value::constant(1, 2, {1, 0});
  EXPECT_NEAR(cosine_similarity(u, v).item(), 0.70710678118654752440, 1e-15);
  EXPECT_EQ(cosine_similarity(Value::constant(1, 2, {1, 0}), Value::constant(1, 2, {0, 1})).item(), 0.0);
  Value w = Value::constant(1, 4, {0.3, -2.0, 5.5, 1e-3});
  EXPECT_NEAR(cosine_similarity(w, w).item(), 1.0, 1e-15);
}

TEST(Cosine, DegenerateVectorThrows) {
  EXPECT_THROW(cosine_similarity(Value::constant(1, 2, {0, 0}), Value::constant(1, 2, {1, 0})),
               DegenerateVectorError);
  EXPECT_THROW(cosine_similarity(Value::constant(1, 2, {1, 0}), Value::constant(1, 2, {1e-13, 0})),
               DegenerateVectorError);
}

TEST(StopGradient, ForwardExactBackwardZero) {
  Value x = Value::parameter(1, 3, {0.1, 1.0 / 3.0, -7.25});
  Value s = stop_gradient(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s.data()[i], x.data()[i]);
  EXPECT_FALSE(s.requires_grad());
  EXPECT_EQ(stop_gradient(s).data()[1], x.data()[1]);

  backward(sum(add(x, s)));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Value y = Value::parameter(1, 2, {1, 2});
  backward(add(sum(stop_gradient(y)), sum(scale(stop_gradient(y), 2.0))));
  for (double g : y.grad_or_zero()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SquareSum) {
  Value x = Value::parameter(1, 2, {1, 2});
  backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossThrows) {
  Value x = Value::parameter(1, 2, {1, 2});
  EXPECT_THROW(backward(square(x)), DimensionError);
}

TEST(Backward, UnreachableParameterGetsZero) {
  Value x = Value::parameter(1, 2, {1, 2});
  Value unused = Value::parameter(1, 2, {3, 4});
  backward(sum(x));
  for (double g : unused.grad_or_zero()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(11);
    Value w1 = random_param(4, 6, rng), w2 = random_param(6, 6, rng), x = random_const(5, 4, rng);
    Value h = silu(matmul(silu(matmul(x, w1)), w2));
    backward(sum(square(h)));
    return std::vector<double>(w1.grad().begin(), w1.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, ThreeLayerCompositionMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Value w1 = random_param(3, 5, rng), w2 = random_param(5, 4, rng), w3 = random_param(4, 1, rng);
    Value x = random_const(6, 3, rng);
    auto loss = [&] { return sum(square(matmul(silu(matmul(silu(matmul(x, w1)), w2)), w3))); };
    for (Value* w : {&w1, &w2, &w3}) EXPECT_LT(finite_diff_check_leaf(loss, *w, 1e-5).max_rel_error, 1e-4);
  }
}

TEST(NoGrad, DisablesTape) {
  Value x = Value::parameter(1, 2, {1, 2});
  {
    NoGradGuard g;
    EXPECT_FALSE(square(x).requires_grad());
  }
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Reductions, OrderIndependentSums) {
  std::vector<double> vals{1e16, 1.0, -1e16, 3.5, 2.25, -7.0};
  Value a = Value::constant(6, 1, vals);
  std::vector<double> rev(vals.rbegin(), vals.rend());
  Value b = Value::constant(6, 1, rev);
  EXPECT_EQ(sum(a).item(), sum(b).item());
  EXPECT_EQ(sum_rows(a).item(), sum_rows(b).item());
  Value sa = segment_sum(a, {0, 0, 0, 0, 0, 0}, 1), sb = segment_sum(b, {0, 0, 0, 0, 0, 0}, 1);
  EXPECT_EQ(sa.item(), sb.item());
}

TEST(SegmentSoftmax, RowsSumToOnePerSegment) {
  Value a = Value::constant(5, 2, {1, 2, 3, 4, 5, 6, -1, 0, 0.5, 0.25});
  Value s = segment_softmax(a, {0, 0, 1, 1, 1}, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(s.at(0, c) + s.at(1, c), 1.0, 1e-15);
    EXPECT_NEAR(s.at(2, c) + s.at(3, c) + s.at(4, c), 1.0, 1e-15);
  }
}

TEST(Ops, FiniteDifferenceSweep) {
  // every differentiable op at 10 random inputs
  std::mt19937_64 rng(2024);
  std::vector<std::pair<std::string, std::function<Value(const Value&)>>> ops;
  Value other = Value::constant(3, 4, {0.5, -1.2, 0.3, 2.0, 1.1, -0.4, 0.9, 0.6, -2.2, 0.8, 0.25, -0.75});
  Value gamma = Value::constant(1, 4, {1.2, 0.7, -0.3, 1.0});
  Value wmat = Value::constant(4, 2, {0.2, -0.5, 1.0, 0.3, -0.7, 0.4, 0.1, 0.9});
  Value weight = Value::constant(3, 4, {1, 2, 3, 4, -1, -2, 0.5, 0.25, 3, 1, -1, 2});
  auto wsum = [weight](const Value& v) { return sum(mul(v, weight)); };
  ops.push_back({"add", [&](const Value& x) { return wsum(add(x, other)); }});
  ops.push_back({"sub", [&](const Value& x) { return wsum(sub(other, x)); }});
  ops.push_back({"mul", [&](const Value& x) { return wsum(mul(x, x)); }});
  ops.push_back({"div", [&](const Value& x) { return wsum(div(other, add_scalar(square(x), 1.0))); }});
  ops.push_back({"bcast", [&](const Value& x) { return sum(square(add(x, slice_cols(x, 0, 1)))); }});
  ops.push_back({"silu", [&](const Value& x) { return wsum(silu(x)); }});
  ops.push_back({"sigmoid", [&](const Value& x) { return wsum(sigmoid(x)); }});
  ops.push_back({"exp", [&](const Value& x) { return wsum(exp(x)); }});
  ops.push_back({"sqrt", [&](const Value& x) { return wsum(sqrt(add_scalar(square(x), 0.5))); }});
  ops.push_back({"matmul", [&](const Value& x) { return sum(square(matmul(x, wmat))); }});
  ops.push_back({"transpose", [&](const Value& x) { return sum(square(matmul(transpose(x), other))); }});
  ops.push_back({"reshape", [&](const Value& x) { return sum(square(matmul(reshape(x, 4, 3), other))); }});
  ops.push_back({"sum_cols", [&](const Value& x) { return sum(square(sum_cols(x))); }});
  ops.push_back({"sum_rows", [&](const Value& x) { return sum(square(sum_rows(x))); }});
  ops.push_back({"mean", [&](const Value& x) { return square(mean(x)); }});
  ops.push_back({"concat", [&](const Value& x) { return wsum(slice_cols(concat_cols({x, x}), 2, 4)); }});
  ops.push_back({"concat_rows", [&](const Value& x) { return sum(square(concat_rows({x, other}))); }});
  ops.push_back({"gather", [&](const Value& x) { return sum(square(gather_rows(x, {2, 0, 2, 1}))); }});
  ops.push_back({"scatter", [&](const Value& x) { return wsum(slice_cols(scatter_rows(x, {2, 0, 1}, 3), 0, 4)); }});
  ops.push_back({"segment_sum", [&](const Value& x) { return sum(square(segment_sum(x, {1, 0, 1}, 2))); }});
  ops.push_back({"segment_softmax", [&](const Value& x) { return wsum(segment_softmax(x, {0, 1, 0}, 2)); }});
  ops.push_back({"repeat", [&](const Value& x) { return sum(square(mul(repeat_cols(slice_cols(x, 0, 2), 2), other))); }});
  ops.push_back({"block_sum", [&](const Value& x) { return sum(square(block_sum(x, 2))); }});
  ops.push_back({"layer_norm", [&](const Value& x) { return wsum(layer_norm(x, gamma)); }});
  ops.push_back({"cosine", [&](const Value& x) { return sum(cosine_rows(x, other)); }});
  ops.push_back({"cross_entropy", [&](const Value& x) { return cross_entropy(x, {1, 3, 0}); }});
  for (const auto& [name, f] : ops)
    for (int t = 0; t < 10; ++t) {
      Value x = random_const(3, 4, rng);
      EXPECT_LT(finite_diff_check(f, x, 1e-5), 1e-4) << name << " trial " << t;
    }
}

TEST(FiniteDiff, LinearFunctionIsExact) {
  std::mt19937_64 rng(1);
  EXPECT_LT(finite_diff_check([](const Value& v) { return sum(v); }, random_const(2, 3, rng), 1e-5), 1e-10);
}

TEST(Parameters, RequiresGradToggleOnlyOnLeaves) {
  Value x = Value::parameter(1, 1, {1});
  Value y = square(x);
  EXPECT_THROW(y.set_requires_grad(false), ContractError);
  x.set_requires_grad(false);
  EXPECT_FALSE(square(x).requires_grad());
}
