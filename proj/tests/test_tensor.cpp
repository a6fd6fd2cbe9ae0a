#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "npq/tensor.hpp"

using namespace npq::ad;

namespace {

Tensor uniform(std::size_t r, std::size_t c, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(r * c);
  for (double& x : v) x = d(rng);
  return Tensor(r, c, std::move(v));
}

// Checks the VJP of f against central differences at a random point, by
// putting every input into a parameter store.
void expect_vjp(const std::function<Tensor(Context&)>& f, ParamStore& store, double tol = 1e-4) {
  const auto rep = grad_check(f, store, 1e-5);
  EXPECT_LE(rep.max_relative_error, tol) << rep.worst_parameter << "[" << rep.worst_index << "]";
  EXPECT_GT(rep.coordinates, 0u);
}

// A fixed random projection turns any tensor output into a scalar loss whose
// gradient exercises every output coordinate.
Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, uniform(y.rows(), y.cols(), rng)));
}

}  // namespace

TEST(Tensor, ShapeAndDataLength) {
  Tensor t(2, 3, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.data().size(), 6u);
  EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, SoftmaxOfEqualLogitsIsUniform) {
  Tensor s = softmax(Tensor::row({0, 0}));
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
}

TEST(Tensor, SigmoidAtZero) { EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0)).item(), 0.5); }

TEST(Tensor, LeakyReluNegative) { EXPECT_DOUBLE_EQ(leaky_relu(Tensor::scalar(-2), 0.2).item(), -0.4); }

TEST(Tensor, ShapeMismatchNamesPrimitiveAndShapes) {
  try {
    matmul(Tensor(2, 3), Tensor(2, 3));
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(Tensor(1, 2), Tensor(2, 1)), std::invalid_argument);
  EXPECT_THROW(concat_cols({Tensor(1, 2), Tensor(2, 2)}), std::invalid_argument);
}

TEST(Tensor, OutputRanges) {
  Rng rng(1);
  Tensor x = uniform(5, 7, rng, -30, 30);
  const Tensor sig = sigmoid(x), th = tanh(scale(x, 0.1));
  for (double v : sig.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (double v : th.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  Tensor s = softmax(x, Axis::Cols);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double total = 0;
    for (double v : s.row_span(r)) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  Tensor sr = softmax(x, Axis::Rows);
  for (std::size_t c = 0; c < sr.cols(); ++c) {
    double total = 0;
    for (std::size_t r = 0; r < sr.rows(); ++r) total += sr(r, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Tensor, SoftmaxShiftInvariance) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = uniform(3, 6, rng);
    Tensor shifted = add(x, Tensor(3, 6, 17.25));
    Tensor a = softmax(x), b = softmax(shifted);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a.data()[k], b.data()[k], 1e-12);
  }
}

TEST(Tensor, ArgmaxOfSoftmaxMatchesArgmax) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = uniform(1, 9, rng);
    EXPECT_EQ(argmax(softmax(x).data()), argmax(x.data()));
  }
}

TEST(Tensor, ArgmaxTiesGoToLowestIndex) {
  const std::vector<double> v{1, 3, 3, 2};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(Tensor, SoftmaxOfEmptyIsEmpty) {
  EXPECT_TRUE(softmax(Tensor(3, 0)).empty());
  EXPECT_EQ(softmax(Tensor(3, 0)).rows(), 3u);
}

TEST(Tape, LinearGradient) {
  ParamStore store;
  store.add("w", Tensor::scalar(0.7));
  Tape tape;
  Context ctx(store, &tape);
  Tensor loss = mul(ctx.param("w"), Tensor::scalar(3.0));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(ctx.gradients().at("w").item(), 3.0);
}

TEST(Tape, SigmoidGradientAtZero) {
  ParamStore store;
  store.add("w", Tensor::scalar(0.0));
  Tape tape;
  Context ctx(store, &tape);
  tape.backward(sigmoid(ctx.param("w")));
  EXPECT_DOUBLE_EQ(ctx.gradients().at("w").item(), 0.25);
}

TEST(Tape, UnreachableParameterHasZeroGradient) {
  ParamStore store;
  store.add("used", Tensor::scalar(2.0));
  store.add("unused", Tensor(2, 2, 1.0));
  Tape tape;
  Context ctx(store, &tape);
  ctx.param("unused");
  tape.backward(mul(ctx.param("used"), ctx.param("used")));
  const auto g = ctx.gradients();
  EXPECT_DOUBLE_EQ(g.at("used").item(), 4.0);
  EXPECT_EQ(g.at("unused").shape(), (std::array<std::size_t, 2>{2, 2}));
  for (double v : g.at("unused").data()) EXPECT_EQ(v, 0.0);
}

TEST(Tape, RejectsNonScalarLoss) {
  ParamStore store;
  store.add("w", Tensor(2, 1, 1.0));
  Tape tape;
  Context ctx(store, &tape);
  EXPECT_THROW(tape.backward(ctx.param("w")), std::invalid_argument);
}

TEST(Tape, BackwardVisitsInReverseTopologicalOrder) {
  ParamStore store;
  store.add("w", Tensor(2, 2, 0.5));
  Tape tape;
  Context ctx(store, &tape);
  Tensor a = tanh(ctx.param("w"));
  Tensor b = mul(a, ctx.param("w"));
  Tensor loss = sum(add(a, b));
  tape.backward(loss);
  const auto& order = tape.visit_order();
  ASSERT_FALSE(order.empty());
  EXPECT_EQ(order.front(), loss.node());
  std::vector<std::size_t> position(tape.size(), order.size());
  for (std::size_t k = 0; k < order.size(); ++k) position[order[k]] = k;
  // Every node is visited before each of its inputs.
  for (std::size_t node : order) {
    for (std::size_t in : tape.inputs_of(node)) EXPECT_LT(position[node], position[in]);
  }
}

TEST(Tape, GradientShapesMatchValues) {
  Rng rng(4);
  ParamStore store;
  auto mlp = Mlp::create(store, "mlp", 3, 5, 2, rng);
  Tape tape;
  Context ctx(store, &tape);
  tape.backward(sum(mlp(ctx, uniform(4, 3, rng))));
  for (const auto& [name, g] : ctx.gradients()) EXPECT_EQ(g.shape(), store.value(name).shape()) << name;
}

TEST(GradCheck, Square) {
  ParamStore store;
  store.add("w", Tensor::scalar(1.0));
  const auto rep = grad_check([](Context& ctx) { return mul(ctx.param("w"), ctx.param("w")); }, store, 1e-5);
  EXPECT_LE(rep.max_relative_error, 1e-6);
}

TEST(GradCheck, ConstantFunction) {
  ParamStore store;
  store.add("w", Tensor::scalar(1.0));
  const auto rep = grad_check([](Context& ctx) {
    ctx.param("w");
    return Tensor::scalar(4.0);
  }, store);
  EXPECT_EQ(rep.max_relative_error, 0.0);
}

TEST(GradCheck, NonFiniteIsReportedWithIndex) {
  ParamStore store;
  store.add("w", Tensor(1, 2, std::vector<double>{1.0, 1e-6}));  // stepping down crosses zero
  try {
    grad_check([](Context& ctx) { return sum(log(ctx.param("w"))); }, store);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'w' index 1"), std::string::npos) << msg;
  }
}

TEST(GradCheck, RandomTwoLayerMlp) {
  Rng rng(5);
  ParamStore store;
  auto mlp = Mlp::create(store, "mlp", 4, 6, 3, rng);
  const Tensor x = uniform(5, 4, rng);
  expect_vjp([&](Context& ctx) { return project(mlp(ctx, x)); }, store);
}

// Each primitive's vector-Jacobian product against central differences on
// random inputs in [-2, 2].
class PrimitiveVjp : public ::testing::Test {
 protected:
  Rng rng{11};
  ParamStore store;
  void SetUp() override {
    store.add("a", uniform(3, 4, rng));
    store.add("b", uniform(3, 4, rng));
    store.add("m", uniform(4, 2, rng));
    store.add("row", uniform(1, 4, rng));
    store.add("col", uniform(3, 1, rng));
    store.add("col4", uniform(4, 1, rng));
    store.add("pos", uniform(3, 4, rng, 0.5, 2.0));
  }
};

TEST_F(PrimitiveVjp, Matmul) { expect_vjp([](Context& c) { return project(matmul(c.param("a"), c.param("m"))); }, store); }
TEST_F(PrimitiveVjp, Transpose) { expect_vjp([](Context& c) { return project(transpose(c.param("a"))); }, store); }
TEST_F(PrimitiveVjp, Reshape) { expect_vjp([](Context& c) { return project(reshape(c.param("a"), 2, 6)); }, store); }
TEST_F(PrimitiveVjp, AddSubMul) {
  expect_vjp([](Context& c) {
    return project(mul(sub(c.param("a"), c.param("b")), add(c.param("a"), c.param("b"))));
  }, store);
}
TEST_F(PrimitiveVjp, ScaleAndBias) {
  expect_vjp([](Context& c) { return project(add_bias(scale(c.param("a"), -1.5), c.param("row"))); }, store);
}
TEST_F(PrimitiveVjp, ScaleRows) { expect_vjp([](Context& c) { return project(scale_rows(c.param("a"), c.param("col"))); }, store); }
TEST_F(PrimitiveVjp, OuterSum) { expect_vjp([](Context& c) { return project(outer_sum(c.param("col"), c.param("col4"))); }, store); }
TEST_F(PrimitiveVjp, Concat) {
  expect_vjp([](Context& c) {
    return project(concat_rows({concat_cols({c.param("a"), c.param("b")}), concat_cols({c.param("b"), c.param("a")})}));
  }, store);
}
TEST_F(PrimitiveVjp, Activations) {
  expect_vjp([](Context& c) { return project(tanh(c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(sigmoid(c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(leaky_relu(c.param("a"), 0.2)); }, store);
  expect_vjp([](Context& c) { return project(relu(c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(exp(c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(log(c.param("pos"))); }, store);
}
TEST_F(PrimitiveVjp, MaximumMinimum) {
  expect_vjp([](Context& c) { return project(maximum(c.param("a"), c.param("b"))); }, store);
  expect_vjp([](Context& c) { return project(minimum(c.param("a"), c.param("b"))); }, store);
}
TEST_F(PrimitiveVjp, Softmax) {
  expect_vjp([](Context& c) { return project(softmax(c.param("a"), Axis::Cols)); }, store);
  expect_vjp([](Context& c) { return project(softmax(c.param("a"), Axis::Rows)); }, store);
}
TEST_F(PrimitiveVjp, Reductions) {
  expect_vjp([](Context& c) { return mean(mul(c.param("a"), c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(sum_rows(c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(sum_cols(c.param("a"))); }, store);
  expect_vjp([](Context& c) { return project(row_dot(c.param("a"), c.param("b"))); }, store);
}
TEST_F(PrimitiveVjp, Gathers) {
  expect_vjp([](Context& c) {
    const std::vector<std::size_t> rows{2, 0, 2, 1}, cols{3, 3, 0};
    return project(gather_cols(gather_rows(c.param("a"), rows), cols));
  }, store);
  expect_vjp([](Context& c) { return project(row_block(c.param("a"), 1, 2)); }, store);
}
TEST_F(PrimitiveVjp, SegmentOps) {
  const std::vector<std::size_t> seg{1, 0, 1};
  expect_vjp([&](Context& c) { return project(segment_reduce(c.param("a"), seg, 3, Reduce::Max)); }, store);
  expect_vjp([&](Context& c) { return project(segment_reduce(c.param("a"), seg, 3, Reduce::Sum)); }, store);
  expect_vjp([&](Context& c) { return project(segment_log_softmax(c.param("col"), seg, 2)); }, store);
}

TEST(Tensor, SegmentReduceEmptySegmentIsZero) {
  Tensor m(2, 3, std::vector<double>{1, -2, 3, -4, 5, -6});
  const std::vector<std::size_t> seg{0, 0};
  Tensor r = segment_reduce(m, seg, 2, Reduce::Max);
  EXPECT_EQ(r(0, 0), 1);
  EXPECT_EQ(r(0, 1), 5);
  EXPECT_EQ(r(0, 2), 3);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(r(1, c), 0.0);
}

TEST(Tensor, SumRowsIsExactlyOrderInvariant) {
  Rng rng(8);
  Tensor a = uniform(9, 5, rng, -1e3, 1e3);
  std::vector<std::size_t> idx(9);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  Tensor x = sum_rows(a), y = sum_rows(gather_rows(a, idx));
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(x.data()[k], y.data()[k]);
}

TEST(Tensor, ForwardOutputsFinite) {
  Rng rng(12);
  ParamStore store;
  auto layer = LinearLayer::create(store, "l", 4, 3, rng);
  Context ctx(store);
  Tensor y = softmax(layer(ctx, uniform(6, 4, rng)));
  EXPECT_TRUE(y.all_finite());
  EXPECT_EQ(y.shape(), (std::array<std::size_t, 2>{6, 3}));
  EXPECT_THROW(layer(ctx, Tensor(2, 5)), std::invalid_argument);
}

TEST(ParamStore, JsonRoundTrip) {
  Rng rng(13);
  ParamStore store;
  LinearLayer::create(store, "layer", 3, 2, rng);
  const auto j = store.to_json();
  ASSERT_TRUE(j.contains("layer.weight"));
  EXPECT_EQ(j["layer.weight"]["shape"], nlohmann::json::array({2, 3}));
  ParamStore back = ParamStore::from_json(j);
  for (const auto& [name, value] : store) {
    ASSERT_TRUE(back.contains(name));
    EXPECT_EQ(std::vector<double>(value.data().begin(), value.data().end()),
              std::vector<double>(back.value(name).data().begin(), back.value(name).data().end()));
  }
  EXPECT_THROW(store.add("layer.bias", Tensor(1, 2)), std::invalid_argument);
}
