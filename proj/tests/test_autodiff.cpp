#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "spargan/autodiff.hpp"
#include "spargan/losses.hpp"
#include "spargan/optim.hpp"
#include "support.hpp"

using namespace spargan;
using spargan::testing::check_gradients;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::matrix(r, c, std::move(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// Forward examples

TEST(Forward, IdentityMatmul) {
  Tape t;
  const Tensor x = mat(2, 3, {1, 2, 3, 4, 5, 6});
  const NodeId y = t.matmul(t.constant(mat(2, 2, {1, 0, 0, 1})), t.constant(x));
  EXPECT_EQ(t.value(y), x);
}

TEST(Forward, SoftmaxOfZerosIsUniform) {
  Tape t;
  const NodeId y = t.softmax(t.constant(mat(1, 3, {0, 0, 0})));
  for (double v : t.value(y).values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Forward, TanhOfZeroTensor) {
  Tape t;
  const NodeId y = t.tanh(t.constant(Tensor(Shape{2, 4}, 0.0)));
  EXPECT_EQ(t.value(y), Tensor(Shape{2, 4}, 0.0));
}

TEST(Forward, SoftmaxIsStableForLargeLogits) {
  Tape t;
  const NodeId y = t.softmax(t.constant(mat(1, 3, {1000, 1000, -1000})));
  EXPECT_NEAR(t.value(y)[0], 0.5, 1e-15);
  EXPECT_TRUE(t.value(y).all_finite());
  const NodeId ls = t.log_softmax(t.constant(mat(1, 2, {800, 0})));
  EXPECT_NEAR(t.value(ls)[1], -800.0, 1e-9);
}

TEST(Forward, SigmoidIsStableAtExtremes) {
  Tape t;
  const NodeId y = t.sigmoid(t.constant(mat(1, 3, {-800, 0, 800})));
  EXPECT_EQ(t.value(y)[0], 0.0);
  EXPECT_EQ(t.value(y)[1], 0.5);
  EXPECT_EQ(t.value(y)[2], 1.0);
}

TEST(Forward, ElementwiseOps) {
  Tape t;
  const NodeId a = t.constant(mat(1, 3, {1, -2, 3}));
  const NodeId b = t.constant(mat(1, 3, {4, 5, -6}));
  EXPECT_EQ(t.value(t.add(a, b)), mat(1, 3, {5, 3, -3}));
  EXPECT_EQ(t.value(t.mul(a, b)), mat(1, 3, {4, -10, -18}));
  EXPECT_EQ(t.value(t.leaky_relu(a, 0.2)), mat(1, 3, {1, -0.4, 3}));
  EXPECT_EQ(t.value(t.concat(a, b)), mat(1, 6, {1, -2, 3, 4, 5, -6}));
  EXPECT_EQ(t.value(t.clamp(a, -1, 2)), mat(1, 3, {1, -1, 2}));
  EXPECT_EQ(t.value(t.affine(a, 2, 1)), mat(1, 3, {3, -3, 7}));
  EXPECT_EQ(t.value(t.sum(a)), Tensor::scalar(2));
  EXPECT_EQ(t.value(t.add_bias(a, t.constant(Tensor(Shape{3}, std::vector<double>{1, 1, 1})))),
            mat(1, 3, {2, -1, 4}));
  EXPECT_EQ(t.value(t.mean_batch(t.constant(mat(2, 2, {1, 2, 3, 6})))), mat(1, 2, {2, 4}));
  EXPECT_NEAR(t.value(t.log(t.constant(mat(1, 1, {std::numbers::e}))))[0], 1.0, 1e-15);
}

TEST(Forward, MatmulRowsDoNotDependOnBatch) {
  Rng rng(7);
  const Tensor a = random_normal(Shape{9, 37}, 1.0, rng);
  const Tensor w = random_normal(Shape{37, 53}, 1.0, rng);
  Tape t;
  const Tensor full = t.value(t.matmul(t.constant(a), t.constant(w)));
  for (std::size_t r = 0; r < 9; ++r) {
    const auto row = a.row_view(r);
    Tape u;
    const Tensor one = u.value(u.matmul(u.constant(Tensor::row(row)), u.constant(w)));
    for (std::size_t c = 0; c < 53; ++c) ASSERT_EQ(one[c], full.at(r, c)) << r << "," << c;
  }
}

TEST(Forward, ShapeMismatchNamesNodeAndShapes) {
  Tape t;
  const NodeId a = t.constant(Tensor(Shape{2, 3}));
  const NodeId b = t.constant(Tensor(Shape{4, 5}));
  try {
    t.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("node 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(t.add(a, b), ShapeError);
  EXPECT_THROW(t.mul(a, b), ShapeError);
  EXPECT_THROW(t.concat(a, t.constant(Tensor(Shape{3, 1}))), ShapeError);
  EXPECT_THROW(t.add_bias(a, t.constant(Tensor(Shape{2}))), ShapeError);
}

TEST(Forward, ReplayReproducesOutputsBitForBit) {
  Rng rng(21);
  Tape t;
  const NodeId loss = spargan::testing::build_random_network(t, rng);
  std::vector<Tensor> before;
  for (NodeId i = 0; i < t.size(); ++i) before.push_back(t.value(i));
  t.forward({});
  for (NodeId i = 0; i < t.size(); ++i) EXPECT_EQ(t.value(i), before[i]) << "node " << i;
  EXPECT_TRUE(t.value(loss).all_finite());
}

TEST(Forward, ReplayWithNewInputsMatchesFreshRecording) {
  auto build = [](Tape& t, const Tensor& x) {
    const NodeId in = t.input("x", x);
    const NodeId w = t.constant(mat(2, 2, {0.5, -1, 2, 0.25}));
    return t.sum(t.tanh(t.matmul(in, w)));
  };
  Tape a;
  const NodeId la = build(a, mat(1, 2, {1, 2}));
  a.forward({{"x", mat(1, 2, {-3, 0.5})}});
  Tape b;
  const NodeId lb = build(b, mat(1, 2, {-3, 0.5}));
  EXPECT_EQ(a.value(la), b.value(lb));
  EXPECT_THROW(a.forward({{"x", mat(2, 2, {1, 2, 3, 4})}}), ShapeError);
}

TEST(Forward, NodesAreTopologicallyOrdered) {
  Rng rng(22);
  Tape t;
  spargan::testing::build_random_network(t, rng);
  for (NodeId id = 0; id < t.size(); ++id) {
    const auto& n = t.node(id);
    for (std::size_t k = 0; k < n.arity; ++k) EXPECT_LT(n.inputs[k], id);
  }
}

// ---------------------------------------------------------------------------
// Backward examples

TEST(Backward, SumOfSquares) {
  Tape t;
  const NodeId x = t.param("x", Tensor(Shape{3}, std::vector<double>{1, -2, 3}));
  const NodeId loss = t.sum(t.mul(x, x));
  const auto g = t.backward(loss);
  EXPECT_EQ(g.at("x"), Tensor(Shape{3}, std::vector<double>{2, -4, 6}));
}

TEST(Backward, MeanOfFour) {
  Tape t;
  const NodeId x = t.param("x", mat(4, 1, {1, 2, 3, 4}));
  const NodeId loss = t.sum(t.mean_batch(x));
  const auto g = t.backward(loss);
  EXPECT_EQ(g.at("x"), mat(4, 1, {0.25, 0.25, 0.25, 0.25}));
}

TEST(Backward, UnusedParameterGetsExactZero) {
  Tape t;
  const NodeId x = t.param("x", mat(1, 2, {1, 2}));
  t.param("unused", mat(2, 2, {1, 2, 3, 4}));
  const NodeId loss = t.sum(t.tanh(x));
  // A parameter recorded after the loss node is unused as well.
  t.param("late", mat(1, 1, {5}));
  const auto g = t.backward(loss);
  EXPECT_EQ(g.at("unused"), Tensor(Shape{2, 2}, 0.0));
  EXPECT_EQ(g.at("late"), Tensor(Shape{1, 1}, 0.0));
  EXPECT_EQ(g.size(), 3u);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape t;
  const NodeId x = t.param("x", mat(1, 2, {1, 2}));
  EXPECT_THROW(t.backward(t.tanh(x)), ShapeError);
}

TEST(Backward, ConstantsAndInputsReceiveNoGradient) {
  Tape t;
  const NodeId c = t.constant(mat(1, 2, {1, 2}));
  const NodeId i = t.input("in", mat(1, 2, {3, 4}));
  const NodeId w = t.param("w", mat(1, 2, {0.5, 0.5}));
  const auto g = t.backward(t.sum(t.mul(t.add(c, i), w)));
  EXPECT_EQ(g.size(), 1u);
  EXPECT_EQ(g.at("w"), mat(1, 2, {4, 6}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tape t;
  const NodeId x = t.param("x", mat(1, 1, {3}));
  const NodeId y = t.mul(x, x);
  const auto g = t.backward(t.sum(t.add(y, y)));
  EXPECT_DOUBLE_EQ(g.at("x")[0], 12.0);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(31);
    Tape t;
    const NodeId loss = spargan::testing::build_random_network(t, rng);
    return t.backward(loss);
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, g] : a) EXPECT_EQ(g, b.at(name)) << name;
}

// Each primitive against central differences.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  Tape t;
  const NodeId a = t.param("a", random_normal(Shape{3, 4}, 1.0, rng));
  const NodeId b = t.param("b", random_normal(Shape{3, 4}, 1.0, rng));
  const NodeId w = t.param("w", random_normal(Shape{4, 2}, 1.0, rng));
  const NodeId bias = t.param("bias", random_normal(Shape{4}, 1.0, rng));
  const NodeId pos = t.param("pos", random_normal(Shape{3, 4}, 0.2, rng));
  NodeId y;
  switch (GetParam()) {
    case 0: y = t.matmul(a, w); break;
    case 1: y = t.add(a, b); break;
    case 2: y = t.add_bias(a, bias); break;
    case 3: y = t.concat(a, b); break;
    case 4: y = t.tanh(a); break;
    case 5: y = t.leaky_relu(a, 0.2); break;
    case 6: y = t.sigmoid(a); break;
    case 7: y = t.softmax(a); break;
    case 8: y = t.log_softmax(a); break;
    case 9: y = t.log(t.affine(t.mul(pos, pos), 1.0, 0.5)); break;
    case 10: y = t.mul(a, b); break;
    case 11: y = t.mean_batch(a); break;
    case 12: y = t.affine(a, -1.5, 0.3); break;
    default: y = t.clamp(a, -0.5, 0.5); break;
  }
  // A random linear read-out makes the loss sensitive to every output entry.
  const NodeId r = t.constant(random_normal(t.value(y).shape(), 1.0, rng));
  const NodeId loss = t.sum(t.mul(y, r));
  const auto check = check_gradients(t, loss);
  EXPECT_LT(check.max_relative_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range(0, 14));

TEST(Backward, RandomTwoLayerTanhNetwork) {
  Rng rng(41);
  Tape t;
  const NodeId x = t.param("x", random_normal(Shape{5, 6}, 1.0, rng));
  const NodeId w1 = t.param("w1", random_normal_fan_in(Shape{6, 8}, rng));
  const NodeId b1 = t.param("b1", random_normal(Shape{8}, 0.1, rng));
  const NodeId w2 = t.param("w2", random_normal_fan_in(Shape{8, 3}, rng));
  const NodeId b2 = t.param("b2", random_normal(Shape{3}, 0.1, rng));
  const NodeId h = t.tanh(t.add_bias(t.matmul(x, w1), b1));
  const NodeId o = t.tanh(t.add_bias(t.matmul(h, w2), b2));
  const NodeId loss = t.sum(t.mean_batch(t.mul(o, o)));
  EXPECT_LT(check_gradients(t, loss).max_relative_error, 1e-4);
}

TEST(Backward, RandomNetworkSuite) {
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Tape t;
    std::string desc;
    const NodeId loss = spargan::testing::build_random_network(t, rng, &desc);
    const double err = check_gradients(t, loss).max_relative_error;
    EXPECT_LT(err, 1e-4) << "network " << i << ": " << desc;
    worst = std::max(worst, err);
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}
