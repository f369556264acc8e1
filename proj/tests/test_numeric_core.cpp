#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "ddcf/autodiff.hpp"
#include "ddcf/layers.hpp"
#include "ddcf/optimizer.hpp"
#include "ddcf/random.hpp"
#include "fixtures.hpp"

using namespace ddcf;
using ddcf::testing::max_relative_error;

namespace {

MlpParams single_layer(Tensor w, Tensor b) {
    MlpParams m;
    m.layers.push_back(DenseLayer{Parameter("w", std::move(w)), Parameter("b", std::move(b)), Activation::identity});
    return m;
}

Parameter random_param(const std::string& name, Shape shape, std::uint64_t seed) {
    Tensor t(shape);
    CounterRng rng{seed, fnv1a(name)};
    for (auto& v : t.values()) {
        v = rng.normal();
    }
    return Parameter(name, std::move(t));
}

} // namespace

TEST(Mlp, IdentityNetworkPassesInputThrough) {
    MlpParams m = single_layer(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::vector({0, 0}));
    Tensor out = mlp_forward(m, Tensor::vector({1, 2}));
    EXPECT_EQ(out, Tensor::vector({1, 2}));
}

TEST(Mlp, SingleAffineLayer) {
    MlpParams m = single_layer(Tensor::matrix({{2}}), Tensor::vector({1}));
    EXPECT_DOUBLE_EQ(mlp_forward(m, Tensor::vector({3}))[0], 7.0);
}

TEST(Mlp, TwoLayerForwardMatchesHandEvaluation) {
    MlpParams m = MlpParams::create("net", {3, 4, 2}, 11);
    std::vector<double> x{0.5, -1.0, 2.0};
    Tensor out = mlp_forward(m, Tensor::vector(x));
    const Tensor& w1 = m.layers[0].weight.value;
    const Tensor& b1 = m.layers[0].bias.value;
    const Tensor& w2 = m.layers[1].weight.value;
    const Tensor& b2 = m.layers[1].bias.value;
    for (std::size_t o = 0; o < 2; o++) {
        double expect = b2[o];
        for (std::size_t h = 0; h < 4; h++) {
            double pre = b1[h];
            for (std::size_t i = 0; i < 3; i++) {
                pre += x[i] * w1.at(i, h);
            }
            expect += std::tanh(pre) * w2.at(h, o);
        }
        EXPECT_NEAR(out[o], expect, 1e-12);
    }
}

TEST(Mlp, SparseForwardEqualsDense) {
    MlpParams m = MlpParams::create("net", {5, 3, 2}, 4);
    SparseRow row;
    row.push(1, 0.5);
    row.push(4, -2.0);
    Tensor dense = mlp_forward(m, Tensor::vector({0, 0.5, 0, 0, -2.0}));
    Tensor sparse = mlp_forward_sparse(m, row);
    for (std::size_t i = 0; i < 2; i++) {
        EXPECT_NEAR(dense[i], sparse[i], 1e-14);
    }
}

TEST(Mlp, ShapeMismatchThrows) {
    MlpParams m = MlpParams::create("net", {3, 2}, 1);
    EXPECT_THROW(mlp_forward(m, Tensor::vector({1, 2})), ShapeError);
}

TEST(Mlp, SeededCreateIsDeterministic) {
    MlpParams a = MlpParams::create("net", {6, 4, 2}, 9);
    MlpParams b = MlpParams::create("net", {6, 4, 2}, 9);
    MlpParams c = MlpParams::create("net", {6, 4, 2}, 10);
    EXPECT_EQ(a.layers[0].weight.value, b.layers[0].weight.value);
    EXPECT_FALSE(a.layers[0].weight.value == c.layers[0].weight.value);
}

TEST(Softmax, SymmetricLogits) {
    Tensor p = softmax_temp(Tensor::vector({0, 0}), 0.4);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, TemperatureOneAndHalf) {
    Tensor p1 = softmax_temp(Tensor::vector({1, 0}), 1.0);
    EXPECT_NEAR(p1[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
    EXPECT_NEAR(p1[0], 0.73106, 1e-5);
    EXPECT_NEAR(p1[1], 0.26894, 1e-5);
    Tensor p2 = softmax_temp(Tensor::vector({1, 0}), 0.5);
    EXPECT_NEAR(p2[0], 0.88080, 1e-5);
    EXPECT_NEAR(p2[1], 0.11920, 1e-5);
}

TEST(Softmax, NonPositiveTemperatureThrows) {
    EXPECT_THROW(softmax_temp(Tensor::vector({1, 0}), 0.0), ParameterError);
    Tape t;
    EXPECT_THROW(op::softmax_rows(t.constant(Tensor::matrix({{1, 0}})), -1.0), ParameterError);
}

TEST(Softmax, LargeLogitsStayFinite) {
    Tensor p = softmax_temp(Tensor::vector({1000, 0}), 0.1);
    EXPECT_TRUE(p.all_finite());
    EXPECT_DOUBLE_EQ(p[0], 1.0);
}

TEST(L2Normalize, Cases) {
    EXPECT_EQ(l2_normalize(Tensor::vector({3, 4})), Tensor::vector({0.6, 0.8}));
    EXPECT_EQ(l2_normalize(Tensor::vector({0, 0, 0})), Tensor::vector({0, 0, 0}));
    EXPECT_EQ(l2_normalize(Tensor::vector({1, 1, 1, 1})), Tensor::vector({0.5, 0.5, 0.5, 0.5}));
}

TEST(Reparameterize, Cases) {
    EXPECT_EQ(gaussian_reparameterize(Tensor::vector({1, 2}), Tensor::vector({1, 1}), Tensor::vector({0, 0})),
              Tensor::vector({1, 2}));
    EXPECT_DOUBLE_EQ(gaussian_reparameterize(Tensor::vector({0}), Tensor::vector({2}), Tensor::vector({1.5}))[0], 3.0);
    EXPECT_DOUBLE_EQ(gaussian_reparameterize(Tensor::vector({1}), Tensor::vector({0.5}), Tensor::vector({-2}))[0], 0.0);
    EXPECT_THROW(gaussian_reparameterize(Tensor::vector({1}), Tensor::vector({1, 1}), Tensor::vector({0})),
                 ShapeError);
}

TEST(Autodiff, SquareGradient) {
    Parameter w("w", Tensor::matrix({{3}}));
    Tape t;
    Var x = t.parameter(w);
    Var loss = op::sum(op::mul(x, x));
    t.backward(loss);
    EXPECT_DOUBLE_EQ(w.grad.at(0, 0), 6.0);
}

TEST(Autodiff, SoftmaxCrossEntropyGradientIsPMinusOnehot) {
    Parameter z("z", Tensor::matrix({{0.3, -1.2, 2.0}}));
    SparseRow target;
    target.push(1, 1.0);
    auto rows = std::make_shared<std::vector<SparseRow>>(std::vector<SparseRow>{target});
    Tape t;
    Var p = op::softmax_rows(t.parameter(z), 1.0);
    // mixture_nll with a 3x3 identity beta is -log p[target].
    Var beta = t.constant(Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
    t.backward(op::mixture_nll(p, beta, rows, 0.0));
    Tensor probs = softmax_temp(z.value, 1.0);
    for (std::size_t c = 0; c < 3; c++) {
        EXPECT_NEAR(z.grad.at(0, c), probs.at(0, c) - (c == 1 ? 1.0 : 0.0), 1e-12);
    }
}

TEST(Autodiff, BackwardNeedsScalar) {
    Tape t;
    Var v = t.variable(Tensor::vector({1, 2}));
    EXPECT_THROW(t.backward(v), UsageError);
}

TEST(Autodiff, NonFiniteValueIsRejected) {
    Tape t;
    Var v = t.variable(Tensor::matrix({{800}}));
    EXPECT_THROW(op::exp(v), std::runtime_error);
}

TEST(Autodiff, ParameterBoundOnceAccumulates) {
    Parameter w("w", Tensor::matrix({{2}}));
    Tape t;
    Var a = t.parameter(w);
    Var b = t.parameter(w);
    t.backward(op::sum(op::add(a, b)));
    EXPECT_DOUBLE_EQ(w.grad.at(0, 0), 2.0);
}

TEST(Autodiff, StopGradientBlocksFlow) {
    Parameter w("w", Tensor::matrix({{2}}));
    Tape t;
    Var a = t.parameter(w);
    t.backward(op::sum(op::mul(op::stop_gradient(a), a)));
    EXPECT_DOUBLE_EQ(w.grad.at(0, 0), 2.0);
}

// Every op against central differences.
class OpGradient : public ::testing::Test {
protected:
    void check(std::vector<Parameter*> params, const std::function<Var(Tape&)>& build, double tol = 1e-6) {
        auto loss = [&] {
            Tape t;
            return build(t).value().item();
        };
        auto analytic = [&] {
            Tape t;
            t.backward(build(t));
        };
        EXPECT_LT(max_relative_error(params, loss, analytic), tol);
    }
};

TEST_F(OpGradient, MatmulFamily) {
    Parameter a = random_param("a", {3, 4}, 1);
    Parameter b = random_param("b", {4, 2}, 2);
    Parameter c = random_param("c", {5, 4}, 3);
    Parameter w = random_param("w", {2, 2}, 4);
    check({&a, &b, &w}, [&](Tape& t) {
        return op::sum(op::mul(op::matmul(t.parameter(a), t.parameter(b)), op::matmul(t.parameter(a), t.parameter(b))));
    });
    check({&a, &c}, [&](Tape& t) { return op::sum(op::tanh(op::matmul_nt(t.parameter(a), t.parameter(c)))); });
}

TEST_F(OpGradient, SparseMatmulAndBias) {
    Parameter w = random_param("w", {5, 3}, 5);
    Parameter bias = random_param("bias", {3}, 6);
    auto rows = std::make_shared<std::vector<SparseRow>>(2);
    (*rows)[0].push(0, 1.0);
    (*rows)[0].push(3, 0.5);
    (*rows)[1].push(4, -2.0);
    check({&w, &bias}, [&](Tape& t) {
        Var h = op::tanh(op::add_row(op::sparse_matmul(rows, t.parameter(w)), t.parameter(bias)));
        return op::sum(op::mul(h, h));
    });
}

TEST_F(OpGradient, ElementwiseOps) {
    Parameter a = random_param("a", {2, 3}, 7);
    Parameter b = random_param("b", {2, 3}, 8);
    check({&a, &b}, [&](Tape& t) {
        Var x = t.parameter(a), y = t.parameter(b);
        return op::sum(op::mul(op::sub(op::exp(op::scale(x, 0.3)), y), op::add(x, op::tanh(y))));
    });
}

TEST_F(OpGradient, SoftmaxRowsAndCols) {
    Parameter a = random_param("a", {3, 4}, 9);
    Parameter weights = random_param("weights", {3, 4}, 10);
    check({&a}, [&](Tape& t) {
        return op::sum(op::mul(op::softmax_rows(t.parameter(a), 0.4), t.constant(weights.value)));
    });
    check({&a}, [&](Tape& t) { return op::sum(op::mul(op::softmax_cols(t.parameter(a)), t.constant(weights.value))); });
}

TEST_F(OpGradient, SliceGatherWeightedSum) {
    Parameter a = random_param("a", {4, 4}, 11);
    check({&a}, [&](Tape& t) {
        Var x = t.parameter(a);
        Var left = op::slice_cols(x, 0, 2);
        Var right = op::gather_rows(op::slice_cols(x, 2, 4), {3, 0, 0, 1});
        return op::weighted_sum({op::sum(op::mul(left, right)), op::sum(op::exp(left))}, {0.7, -1.3});
    });
}

TEST_F(OpGradient, ReparameterizeAndGaussianKl) {
    Parameter mu = random_param("mu", {3, 2}, 12);
    Parameter lv = random_param("lv", {3, 2}, 13);
    Tensor noise = random_param("noise", {3, 2}, 14).value;
    check({&mu, &lv}, [&](Tape& t) {
        Var m = t.parameter(mu), l = t.parameter(lv);
        Var s = op::reparameterize(m, l, noise);
        return op::weighted_sum({op::sum(op::mul(s, s)), op::gaussian_kl(m, l, {0.2, -0.1}, {0.75, 1.5})}, {1, 1});
    });
}

TEST_F(OpGradient, NormalizeRowsAndContrastive) {
    Parameter a = random_param("a", {3, 4}, 15);
    Parameter b = random_param("b", {3, 4}, 16);
    check({&a, &b}, [&](Tape& t) {
        Var s = op::matmul_nt(op::normalize_rows(t.parameter(a)), op::normalize_rows(t.parameter(b)));
        return op::contrastive_nll(s, 0.2, false);
    });
    check({&a, &b}, [&](Tape& t) {
        Var s = op::matmul_nt(op::normalize_rows(t.parameter(a)), op::normalize_rows(t.parameter(b)));
        return op::contrastive_nll(s, 0.5, true);
    });
}

TEST_F(OpGradient, PairDotAndSquaredError) {
    Parameter u = random_param("u", {2, 3}, 17);
    Parameter v = random_param("v", {3, 5}, 18);
    auto pairs = std::make_shared<std::vector<SparseRow>>(2);
    (*pairs)[0].push(1, 0.4);
    (*pairs)[0].push(4, 0.9);
    (*pairs)[1].push(0, 1.0);
    check({&u, &v}, [&](Tape& t) {
        Var pred = op::pair_dot(t.parameter(u), t.parameter(v), pairs);
        return op::squared_error(pred, Tensor::vector({0.4, 0.9, 1.0}));
    });
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Parameter p("p", Tensor::vector({1.0, -2.0}));
    Adam adam;
    p.zero_grad();
    adam.step({&p});
    EXPECT_EQ(p.value, Tensor::vector({1.0, -2.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Parameter p("p", Tensor::vector({0.0}));
    Adam adam(AdamSettings{0.1});
    p.grad = Tensor::vector({1.0});
    adam.step({&p});
    // m_hat = 1, v_hat = 1 after bias correction.
    EXPECT_NEAR(p.value[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteGradientThrows) {
    Parameter p("p", Tensor::vector({0.0}));
    Adam adam;
    p.grad = Tensor::vector({std::nan("")});
    EXPECT_THROW(adam.step({&p}), TrainingError);
}

TEST(Adam, RepeatedRunsAreBitIdentical) {
    auto run = [] {
        Parameter p = random_param("p", {3, 3}, 21);
        Adam adam;
        for (int s = 0; s < 10; s++) {
            Tape t;
            Var x = t.parameter(p);
            p.zero_grad();
            t.backward(op::sum(op::mul(op::tanh(x), x)));
            adam.step({&p});
        }
        return p.value;
    };
    EXPECT_EQ(run(), run());
}

TEST(CounterRng, KeyedStreamsAreReproducible) {
    CounterRng a{1, 2, 3};
    CounterRng b{1, 2, 3};
    CounterRng c{1, 2, 4};
    for (int i = 0; i < 5; i++) {
        std::uint64_t x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        EXPECT_NE(x, c.next_u64());
    }
}

TEST(CounterRng, MomentsOfNormalAndUniform) {
    CounterRng rng{42};
    double sum = 0, sq = 0, usum = 0;
    const int n = 200000;
    for (int i = 0; i < n; i++) {
        double z = rng.normal();
        sum += z;
        sq += z * z;
        usum += rng.uniform();
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
    EXPECT_NEAR(usum / n, 0.5, 0.005);
}
