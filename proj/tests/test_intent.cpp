#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "ddcf/intent.hpp"
#include "fixtures.hpp"

using namespace ddcf;
using ddcf::testing::max_relative_error;

namespace {

std::shared_ptr<std::vector<SparseRow>> binary_rows() {
    auto rows = std::make_shared<std::vector<SparseRow>>(4);
    RatingMatrix m = ddcf::testing::tiny_ratings();
    for (std::size_t u = 0; u < 4; u++) {
        for (Index j : m.rows[u].indices) {
            (*rows)[u].push(j, 1.0);
        }
    }
    return rows;
}

Tensor noise(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Tensor t(Shape{rows, cols});
    CounterRng rng{seed};
    for (auto& v : t.values()) {
        v = rng.normal();
    }
    return t;
}

void zero_all(MlpParams& m) {
    for (auto* p : m.parameters()) {
        p->value.fill(0.0);
    }
}

double abs_sum(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) {
        s += std::abs(v);
    }
    return s;
}

} // namespace

TEST(LaplacePrior, SymmetricAlphaOne) {
    for (std::size_t k : {2u, 4u, 10u}) {
        LaplacePrior p = symmetric_prior(k, 1.0);
        for (std::size_t i = 0; i < k; i++) {
            EXPECT_DOUBLE_EQ(p.mu[i], 0.0);
            EXPECT_NEAR(p.sigma_diag[i], 1.0 - 1.0 / static_cast<double>(k), 1e-15);
        }
    }
    EXPECT_DOUBLE_EQ(symmetric_prior(2, 1.0).sigma_diag[0], 0.5);
    EXPECT_DOUBLE_EQ(symmetric_prior(4, 1.0).sigma_diag[0], 0.75);
}

TEST(LaplacePrior, AsymmetricTwoChannels) {
    LaplacePrior p = laplace_prior({2.0, 1.0});
    EXPECT_NEAR(p.mu[0], 0.5 * std::log(2.0), 1e-15);
    EXPECT_NEAR(p.mu[0], 0.34657, 1e-5);
    EXPECT_NEAR(p.mu[1], -0.34657, 1e-5);
    // (1/a)(1 - 2/K) vanishes for K = 2; (1/4)(1/2 + 1) = 0.375.
    EXPECT_DOUBLE_EQ(p.sigma_diag[0], 0.375);
    EXPECT_DOUBLE_EQ(p.sigma_diag[1], 0.375);
}

TEST(LaplacePrior, InvalidInputs) {
    EXPECT_THROW(laplace_prior({1.0}), ParameterError);
    EXPECT_THROW(laplace_prior({1.0, 0.0}), ParameterError);
    EXPECT_THROW(laplace_prior({1.0, -2.0, 1.0}), ParameterError);
    LaplacePrior one = symmetric_prior(1, 1.0);
    EXPECT_EQ(one.mu, std::vector<double>{0.0});
    EXPECT_EQ(one.sigma_diag, std::vector<double>{1.0});
}

TEST(IntentEncoder, ZeroWeightsGiveZeroPosterior) {
    IntentModel m = IntentModel::create(6, 3, 4, 0, 1);
    zero_all(m.encoder);
    SparseRow x;
    x.push(2, 1.0);
    auto [mu, lv] = encode_user(m, x);
    EXPECT_EQ(mu, Tensor(Shape{3}));
    EXPECT_EQ(lv, Tensor(Shape{3}));
}

TEST(IntentEncoder, OneHotRowSelectsEmbedding) {
    IntentModel m = IntentModel::create(6, 3, 4, 0, 2);
    auto rows = std::make_shared<std::vector<SparseRow>>(1);
    (*rows)[0].push(4, 1.0);
    Tape t;
    Var pre = op::add_row(op::sparse_matmul(rows, t.parameter(m.encoder.layers[0].weight)),
                          t.parameter(m.encoder.layers[0].bias));
    for (std::size_t h = 0; h < 4; h++) {
        EXPECT_DOUBLE_EQ(pre.value().at(0, h),
                         m.encoder.layers[0].weight.value.at(4, h) + m.encoder.layers[0].bias.value[h]);
    }
}

TEST(IntentEncoder, TwoItemRowMatchesHandEvaluation) {
    IntentModel m = IntentModel::create(6, 2, 3, 0, 3);
    SparseRow x;
    x.push(1, 1.0);
    x.push(5, 1.0);
    auto [mu, lv] = encode_user(m, x);
    const auto& l0 = m.encoder.layers[0];
    const auto& l1 = m.encoder.layers[1];
    for (std::size_t o = 0; o < 4; o++) {
        double out = l1.bias.value[o];
        for (std::size_t h = 0; h < 3; h++) {
            double pre = l0.weight.value.at(1, h) + l0.weight.value.at(5, h) + l0.bias.value[h];
            out += std::tanh(pre) * l1.weight.value.at(h, o);
        }
        EXPECT_NEAR(o < 2 ? mu[o] : lv[o - 2], out, 1e-12);
    }
    EXPECT_THROW(encode_user(m, SparseRow{}), ParameterError);
}

TEST(SampleGamma, Cases) {
    Tensor g = sample_gamma(Tensor::vector({0, 0, 0}), Tensor::vector({0, 0, 0}), Tensor::vector({0, 0, 0}), 0.7).gamma;
    for (double v : g.values()) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
    Tensor g2 = sample_gamma(Tensor::vector({1, 0}), Tensor::vector({0, 0}), Tensor::vector({0, 0}), 0.4).gamma;
    EXPECT_NEAR(g2[0], std::exp(2.5) / (std::exp(2.5) + 1.0), 1e-15);
    EXPECT_NEAR(g2[0], 0.92414, 1e-5);
    EXPECT_NEAR(g2[1], 0.07586, 1e-5);
}

TEST(SampleGamma, LowerTemperatureSharpens) {
    Tensor mu = Tensor::vector({0.3, -0.2, 0.1});
    Tensor zero(Shape{3});
    double prev = 0.0;
    for (double tau : {2.0, 1.0, 0.5, 0.25}) {
        Tensor g = sample_gamma(mu, zero, zero, tau).gamma;
        double mx = *std::max_element(g.values().begin(), g.values().end());
        EXPECT_GT(mx, prev);
        prev = mx;
    }
}

TEST(IntentLossTerms, KlIsZeroAtThePrior) {
    LaplacePrior p = laplace_prior({2.0, 1.0, 0.5});
    Tape t;
    Tensor mu = Tensor::matrix(1, 3, p.mu);
    Tensor lv(Shape{1, 3});
    for (std::size_t k = 0; k < 3; k++) {
        lv.at(0, k) = std::log(p.sigma_diag[k]);
    }
    EXPECT_NEAR(op::gaussian_kl(t.constant(mu), t.constant(lv), p.mu, p.sigma_diag).value().item(), 0.0, 1e-15);
}

TEST(IntentLossTerms, ScalarKlHalf) {
    Tape t;
    double kl = op::gaussian_kl(t.constant(Tensor::matrix({{1}})), t.constant(Tensor::matrix({{0}})), {0.0}, {1.0})
                    .value()
                    .item();
    EXPECT_DOUBLE_EQ(kl, 0.5);
}

TEST(IntentLossTerms, OneTermMultinomialReconstruction) {
    auto rows = std::make_shared<std::vector<SparseRow>>(1);
    (*rows)[0].push(0, 1.0);
    Tape t;
    Var gamma = t.constant(Tensor::matrix({{1.0}}));
    Var beta = t.constant(Tensor::matrix({{0.8}, {0.2}}));
    double nll = op::mixture_nll(gamma, beta, rows, kProbabilityFloor).value().item();
    EXPECT_NEAR(nll, -std::log(0.8), 1e-15);
    EXPECT_NEAR(nll, 0.22314, 1e-5);
}

TEST(ItemIntents, ZeroNetworkIsUniform) {
    IntentModel m = IntentModel::create(5, 4, 3, 0, 4);
    zero_all(m.item_net);
    ItemIntentMatrix phi = item_intents(m);
    for (std::size_t j = 0; j < 5; j++) {
        for (std::size_t c = 0; c < 4; c++) {
            EXPECT_DOUBLE_EQ(phi(c, j), 0.25);
        }
    }
}

TEST(ItemIntents, EveryItemSumsToOne) {
    IntentModel m = IntentModel::create(30, 5, 6, 4, 5);
    m.tau = 0.4;
    ItemIntentMatrix phi = item_intents(m);
    for (std::size_t j = 0; j < 30; j++) {
        double total = 0.0;
        for (double v : phi.item(j)) {
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(ItemIntents, ClosedFormLogits) {
    IntentModel m = IntentModel::create(1, 2, 3, 0, 6);
    zero_all(m.item_net);
    m.item_net.layers.back().bias.value = Tensor::vector({1.0, 0.0});
    m.tau = 0.5;
    ItemIntentMatrix phi = item_intents(m);
    EXPECT_NEAR(phi(0, 0), 0.88080, 1e-5);
    EXPECT_NEAR(phi(1, 0), 0.11920, 1e-5);
}

TEST(ItemIntentKl, IdentityAndLimit) {
    auto rows = std::make_shared<std::vector<SparseRow>>(1);
    (*rows)[0].push(0, 1.0);
    Tape t;
    Var same = t.constant(Tensor::matrix({{0.3, 0.7}}));
    EXPECT_NEAR(item_intent_kl_loss(same, Tensor::matrix({{0.3, 0.7}}), rows).value().item(), 0.0, 1e-15);
    double e = 1e-6;
    Var peaked = t.constant(Tensor::matrix({{1.0 - e, e}}));
    double kl = item_intent_kl_loss(peaked, Tensor::matrix({{0.5, 0.5}}), rows).value().item();
    double exact = (1 - e) * std::log((1 - e) / 0.5) + e * std::log(e / 0.5);
    EXPECT_NEAR(kl, exact, 1e-12);
    EXPECT_NEAR(kl, std::log(2.0), 1e-4);
}

TEST(IntentGradients, ElboMatchesFiniteDifferences) {
    IntentModel m = IntentModel::create(6, 3, 4, 0, 7);
    LaplacePrior prior = symmetric_prior(3, 1.0);
    auto rows = binary_rows();
    std::vector<Tensor> eps{noise(4, 3, 1), noise(4, 3, 2)};
    auto build = [&](Tape& t) { return intent_elbo_loss(t, m, prior, rows, eps, 0.7, 0.6).total; };
    double err = max_relative_error(
        m.parameters(), [&] {
            Tape t;
            return build(t).value().item();
        },
        [&] {
            Tape t;
            t.backward(build(t));
        });
    EXPECT_LT(err, 1e-4);
}

TEST(IntentGradients, ItemKlReachesOnlyItemNetworkAndEmbedding) {
    IntentModel m = IntentModel::create(6, 3, 4, 2, 8);
    auto rows = binary_rows();
    LaplacePrior prior = symmetric_prior(3, 1.0);
    std::vector<Tensor> eps{noise(4, 3, 3)};
    for (auto* p : m.parameters()) {
        p->zero_grad();
    }
    Tape t;
    std::vector<Var> gammas;
    intent_elbo_loss(t, m, prior, rows, eps, 1.0, 0.5, &gammas);
    Var phi = item_intents(t, m, {0, 1, 2, 3, 4, 5}, 0.5);
    t.backward(item_intent_kl_loss(phi, gammas.front().value(), rows));
    for (std::size_t l = 0; l < m.encoder.layers.size(); l++) {
        if (l > 0) {
            EXPECT_EQ(m.encoder.layers[l].weight.grad, Tensor(m.encoder.layers[l].weight.value.shape()));
        }
        EXPECT_EQ(m.encoder.layers[l].bias.grad, Tensor(m.encoder.layers[l].bias.value.shape()));
    }
    EXPECT_EQ(m.beta_logits.grad, Tensor(m.beta_logits.value.shape()));
    EXPECT_GT(abs_sum(m.item_embedding().grad), 0.0);
    for (auto* p : m.item_net.parameters()) {
        EXPECT_GT(abs_sum(p->grad), 0.0) << p->name;
    }
}

TEST(IntentGradients, ItemKlMatchesFiniteDifferencesWithGammaFixed) {
    IntentModel m = IntentModel::create(6, 3, 4, 2, 9);
    auto rows = binary_rows();
    Tensor gamma = softmax_temp(noise(4, 3, 4), 1.0);
    std::vector<std::size_t> items{0, 1, 2, 3, 4, 5};
    auto build = [&](Tape& t) { return item_intent_kl_loss(item_intents(t, m, items, 0.6), gamma, rows); };
    std::vector<Parameter*> params = m.item_net.parameters();
    params.push_back(&m.item_embedding());
    double err = max_relative_error(
        params, [&] {
            Tape t;
            return build(t).value().item();
        },
        [&] {
            Tape t;
            t.backward(build(t));
        });
    EXPECT_LT(err, 1e-4);
}
