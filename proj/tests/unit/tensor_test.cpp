#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "error.hpp"
#include "grad_check.hpp"
#include "helpers.hpp"
#include "tensor.hpp"

using namespace stark;
using stark::test::random_tensor;

namespace {

Tensor eval1(Tensor x, const std::function<Var(Var)>& f) {
  Graph g(false);
  return f(g.constant(std::move(x))).value();
}

double check_op(std::vector<Tensor> params, const ParametricLoss& f) {
  return grad_check(f, params, 1e-6).max_rel_error;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(3);
  const Tensor b = random_tensor({3, 4}, rng);
  Graph g;
  const Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  EXPECT_TRUE(matmul(g.constant(eye), g.constant(b)).value().bit_equal(b));
}

TEST(Matmul, OneByOne) {
  Graph g;
  EXPECT_EQ(matmul(g.constant(Tensor::matrix({{2}})), g.constant(Tensor::matrix({{3}}))).value().item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(4);
  const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  Graph g;
  const Tensor c = matmul(g.constant(a), g.constant(b)).value();
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double ref = 0.0;
      for (std::size_t k = 0; k < 7; ++k) ref += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), ref, 1e-12);
    }
  }
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3})));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::dimension);
  }
}

TEST(Gemm, TransposedKernelsMatchLoops) {
  Rng rng(5);
  const Tensor a = random_tensor({4, 6}, rng), b = random_tensor({5, 6}, rng), c = random_tensor({4, 5}, rng);
  Tensor nt({4, 5});
  gemm_nt_acc(a.data().data(), b.data().data(), nt.data().data(), 4, 6, 5);
  Tensor tn({6, 5});
  gemm_tn_acc(a.data().data(), c.data().data(), tn.data().data(), 4, 6, 5);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double ref = 0.0;
      for (std::size_t k = 0; k < 6; ++k) ref += a.at(i, k) * b.at(j, k);
      EXPECT_NEAR(nt.at(i, j), ref, 1e-12);
    }
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t j = 0; j < 5; ++j) {
      double ref = 0.0;
      for (std::size_t i = 0; i < 4; ++i) ref += a.at(i, k) * c.at(i, j);
      EXPECT_NEAR(tn.at(k, j), ref, 1e-12);
    }
}

TEST(Softmax, UniformLogitsGiveUniformDistribution) {
  for (double tau : {0.5, 1.0, 7.0}) {
    const Tensor p = eval1(Tensor::matrix({{3, 3, 3, 3}}), [&](Var x) { return softmax_t(x, tau); });
    for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  }
}

TEST(Softmax, TwoClassTemperatureExample) {
  const Tensor p = eval1(Tensor::matrix({{2, 0}}), [](Var x) { return softmax_t(x, 2.0); });
  const double oracle = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(p[0], oracle, 1e-15);
  EXPECT_NEAR(p[1], 1.0 - oracle, 1e-15);
  EXPECT_NEAR(p[0], 0.7311, 5e-5);
  EXPECT_NEAR(p[1], 0.2689, 5e-5);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(6);
  const Tensor z = random_tensor({3, 5}, rng, 3.0);
  Tensor shifted = z;
  for (double& v : shifted.data()) v += 41.5;
  const Tensor a = eval1(z, [](Var x) { return softmax_t(x, 1.5); });
  const Tensor b = eval1(shifted, [](Var x) { return softmax_t(x, 1.5); });
  EXPECT_LT(max_abs_diff(a, b), 1e-14);
}

TEST(Softmax, LogSoftmaxIsLogOfSoftmax) {
  Rng rng(7);
  const Tensor z = random_tensor({4, 3}, rng, 5.0);
  const Tensor p = eval1(z, [](Var x) { return softmax_t(x, 2.0); });
  const Tensor lp = eval1(z, [](Var x) { return log_softmax_t(x, 2.0); });
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(std::log(p[i]), lp[i], 1e-12);
}

TEST(Softmax, NonPositiveTemperatureRejected) {
  Graph g;
  EXPECT_THROW(softmax_t(g.constant(Tensor::matrix({{1, 2}})), 0.0), Error);
}

TEST(Gelu, KnownValues) {
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(30.0), 30.0, 1e-12);
  const double phi1 = 0.5 * std::erfc(-1.0 / std::numbers::sqrt2);
  EXPECT_NEAR(gelu_scalar(1.0), phi1, 1e-15);
  EXPECT_NEAR(gelu_scalar(1.0), 0.841345, 5e-7);
}

TEST(LayerNorm, ConstantRowGivesBias) {
  Graph g;
  const Tensor bias = Tensor::vector({0.1, -0.2, 0.3});
  const Tensor y = layer_norm(g.constant(Tensor::matrix({{5, 5, 5}})), g.constant(Tensor::vector({2, 3, 4})),
                              g.constant(bias))
                       .value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], bias[i], 1e-12);
}

TEST(LayerNorm, PlusMinusOneRow) {
  Graph g;
  const Tensor y = layer_norm(g.constant(Tensor::matrix({{1, -1}})), g.constant(Tensor::vector({1, 1})),
                              g.constant(Tensor::vector({0, 0})))
                       .value();
  const double s = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  EXPECT_NEAR(y[0], s, 1e-15);
  EXPECT_NEAR(y[1], -s, 1e-15);
}

TEST(LayerNorm, UniformGainRowMeanEqualsBiasMean) {
  Rng rng(8);
  Graph g;
  const Tensor bias = random_tensor({6}, rng);
  const Tensor y =
      layer_norm(g.constant(random_tensor({4, 6}, rng, 4.0)), g.constant(Tensor::filled({6}, 1.7)), g.constant(bias))
          .value();
  double bm = 0.0;
  for (double b : bias.data()) bm += b / 6.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at(r, c) / 6.0;
    EXPECT_NEAR(m, bm, 1e-12);
  }
}

TEST(Backward, ProductRule) {
  Graph g;
  Var x = g.variable(Tensor::scalar(3.0));
  Var y = g.variable(Tensor::scalar(-2.5));
  g.backward(mul(x, y));
  EXPECT_EQ(g.grad(x).item(), -2.5);
  EXPECT_EQ(g.grad(y).item(), 3.0);
}

TEST(Backward, SumOfSquares) {
  Graph g;
  const Tensor v = Tensor::vector({1.0, -2.0, 0.5});
  Var x = g.variable(v);
  g.backward(sum(mul(x, x)));
  const Tensor gx = g.grad(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(gx[i], 2.0 * v[i]);
}

TEST(Backward, ReusedNodeAccumulates) {
  Graph g;
  Var x = g.variable(Tensor::scalar(2.0));
  Var y = add(mul(x, x), scale(x, 3.0));
  g.backward(y);
  EXPECT_EQ(g.grad(x).item(), 7.0);
}

TEST(Backward, UnusedVariableHasZeroGradient) {
  Graph g;
  Var x = g.variable(Tensor::vector({1, 2}));
  Var y = g.variable(Tensor::vector({3, 4}));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(y), Tensor::filled({2}, 0.0));
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  Var x = g.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(scale(x, 2.0)), Error);
}

TEST(Graph, InferenceModeRecordsNothing) {
  Graph g(false);
  Var x = g.variable(Tensor::vector({1, 2}));
  sum(mul(x, x));
  EXPECT_EQ(g.record_count(), 0u);
}

TEST(GradCheck, QuadraticIsExact) {
  const Tensor x = Tensor::vector({0.3, -1.2, 2.0});
  const auto r = grad_check([](Graph&, std::span<const Var> p) { return sum(mul(p[0], p[0])); },
                            std::vector<Tensor>{x}, 1e-3);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coordinates, 3u);
}

TEST(GradCheck, ZeroEpsIsParameterError) {
  try {
    grad_check([](Graph&, std::span<const Var> p) { return sum(p[0]); }, std::vector<Tensor>{Tensor::vector({1})},
               0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::parameter);
  }
}

TEST(GradCheck, NondeterministicLossIsUnreliable) {
  auto counter = std::make_shared<int>(0);
  try {
    grad_check(
        [counter](Graph& g, std::span<const Var> p) {
          return add(sum(p[0]), g.constant(Tensor::scalar(++*counter)));
        },
        std::vector<Tensor>{Tensor::vector({1})}, 1e-4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::unreliable_check);
  }
}

// Every differentiable op against central differences.
TEST(OpGradients, ElementwiseAndReductions) {
  Rng rng(9);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({4}, rng);
  EXPECT_LT(check_op({a, b}, [](Graph&, std::span<const Var> p) { return sum(mul(sub(p[0], p[1]), add(p[0], p[1]))); }),
            1e-7);
  EXPECT_LT(check_op({a, w}, [](Graph&, std::span<const Var> p) { return sum(mul(add_row(p[0], p[1]), p[0])); }), 1e-7);
  EXPECT_LT(check_op({a, w}, [](Graph&, std::span<const Var> p) { return sum(mul(mul_cols(p[0], p[1]), p[0])); }),
            1e-7);
  EXPECT_LT(check_op({a, w}, [](Graph&, std::span<const Var> p) { return sum(mul(gate_scale(p[0], p[1], 2), p[0])); }),
            1e-7);
  EXPECT_LT(check_op({a}, [](Graph&, std::span<const Var> p) { return sum(mul(gelu(p[0]), p[0])); }), 1e-7);
}

TEST(OpGradients, MatmulSoftmaxLayerNorm) {
  Rng rng(10);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  const Tensor gain = random_tensor({5}, rng), bias = random_tensor({5}, rng), t = random_tensor({3, 5}, rng);
  EXPECT_LT(check_op({a, b}, [&](Graph& g, std::span<const Var> p) {
              return sum(mul(softmax_t(matmul(p[0], p[1]), 1.7), g.constant(t)));
            }),
            1e-7);
  EXPECT_LT(check_op({a, b}, [&](Graph& g, std::span<const Var> p) {
              return sum(mul(log_softmax_t(matmul(p[0], p[1]), 0.8), g.constant(t)));
            }),
            1e-7);
  EXPECT_LT(check_op({a, b, gain, bias}, [&](Graph& g, std::span<const Var> p) {
              return sum(mul(layer_norm(matmul(p[0], p[1]), p[2], p[3]), g.constant(t)));
            }),
            1e-6);
}

TEST(OpGradients, GatherAndAttention) {
  Rng rng(11);
  const Tensor table = random_tensor({6, 4}, rng);
  const Tensor q = random_tensor({5, 3}, rng), k = random_tensor({5, 3}, rng), v = random_tensor({5, 3}, rng);
  const Tensor t = random_tensor({5, 3}, rng);
  const std::vector<std::size_t> idx{0, 3, 3, 5};
  EXPECT_LT(check_op({table}, [&](Graph&, std::span<const Var> p) {
              Var r = gather_rows(p[0], idx);
              return sum(mul(r, r));
            }),
            1e-7);
  const std::vector<std::size_t> offsets{0, 2, 5};
  EXPECT_LT(check_op({q, k, v}, [&](Graph& g, std::span<const Var> p) {
              return sum(mul(attention(p[0], p[1], p[2], offsets), g.constant(t)));
            }),
            1e-6);
}

TEST(Attention, SegmentsAreIndependent) {
  Rng rng(12);
  const Tensor q = random_tensor({5, 3}, rng), k = random_tensor({5, 3}, rng), v = random_tensor({5, 3}, rng);
  Graph g(false);
  const std::vector<std::size_t> both{0, 2, 5};
  const Tensor joint = attention(g.constant(q), g.constant(k), g.constant(v), both).value();
  auto slice = [](const Tensor& t, std::size_t r0, std::size_t r1) {
    Tensor s({r1 - r0, t.cols()});
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) s.at(r - r0, c) = t.at(r, c);
    return s;
  };
  const std::vector<std::size_t> one{0, 3};
  const Tensor second =
      attention(g.constant(slice(q, 2, 5)), g.constant(slice(k, 2, 5)), g.constant(slice(v, 2, 5)), one).value();
  EXPECT_LT(max_abs_diff(slice(joint, 2, 5), second), 1e-14);
}

TEST(Dropout, ZeroRateIsIdentityAndRateOneRejected) {
  Rng rng(13);
  Graph g;
  Var x = g.variable(random_tensor({2, 3}, rng));
  EXPECT_EQ(dropout(x, 0.0, &rng).id(), x.id());
  EXPECT_THROW(dropout(x, 1.0, &rng), Error);
}

TEST(Tensor, BitEqualDistinguishesSignedZero) {
  EXPECT_FALSE(Tensor::vector({0.0}).bit_equal(Tensor::vector({-0.0})));
  EXPECT_TRUE(Tensor::vector({1.5}).bit_equal(Tensor::vector({1.5})));
}

TEST(Tensor, RequireFiniteThrowsNumeric) {
  try {
    Tensor::vector({1.0, std::nan("")}).require_finite("test");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::numeric);
  }
}
