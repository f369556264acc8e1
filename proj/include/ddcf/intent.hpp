#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "ddcf/autodiff.hpp"
#include "ddcf/layers.hpp"
#include "ddcf/random.hpp"
#include "ddcf/sparse.hpp"
#include "ddcf/tensor.hpp"

namespace ddcf {

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbabilityFloor = 1e-10;

/// Gaussian approximation, in the softmax basis, of a Dirichlet(alpha) prior.
struct LaplacePrior {
    std::vector<double> alpha;
    std::vector<double> mu;
    std::vector<double> sigma_diag;
};

inline LaplacePrior laplace_prior(std::vector<double> alpha) {
    std::size_t k = alpha.size();
    if (k < 2) {
        throw ParameterError("Laplace prior needs at least 2 channels, got " + std::to_string(k));
    }
    for (double a : alpha) {
        if (!(a > 0.0)) {
            throw ParameterError("Dirichlet concentration must be positive, got " + std::to_string(a));
        }
    }
    double kd = static_cast<double>(k);
    double mean_log = 0.0;
    double sum_inv = 0.0;
    for (double a : alpha) {
        mean_log += std::log(a);
        sum_inv += 1.0 / a;
    }
    mean_log /= kd;
    LaplacePrior p;
    p.mu.resize(k);
    p.sigma_diag.resize(k);
    for (std::size_t i = 0; i < k; i++) {
        p.mu[i] = std::log(alpha[i]) - mean_log;
        p.sigma_diag[i] = (1.0 / alpha[i]) * (1.0 - 2.0 / kd) + sum_inv / (kd * kd);
    }
    p.alpha = std::move(alpha);
    return p;
}

/// Symmetric Dirichlet prior; a single channel degenerates to N(0, 1).
inline LaplacePrior symmetric_prior(std::size_t channels, double alpha) {
    if (channels == 1) {
        return LaplacePrior{{alpha}, {0.0}, {1.0}};
    }
    return laplace_prior(std::vector<double>(channels, alpha));
}

/// Intent recognition network parameters.
///
/// - encoder: M -> hidden -> 2K; the first K outputs are the posterior mean of
///   the softmax basis, the last K its log-variance. Row j of the first weight
///   matrix is the item embedding W_j shared with the item network.
/// - beta_logits: M x K; a softmax over items turns each column into a channel
///   distribution.
/// - item_net: W_j -> K channel logits.
struct IntentModel {
    MlpParams encoder;
    Parameter beta_logits;
    MlpParams item_net;
    double tau = 1.0;

    static IntentModel create(std::size_t num_items, std::size_t channels, std::size_t hidden,
                              std::size_t item_hidden, std::uint64_t seed) {
        IntentModel m;
        m.encoder = MlpParams::create("intent.encoder", {num_items, hidden, 2 * channels}, seed);
        std::vector<std::size_t> item_dims{hidden};
        if (item_hidden > 0) {
            item_dims.push_back(item_hidden);
        }
        item_dims.push_back(channels);
        m.item_net = MlpParams::create("intent.item_net", item_dims, seed);
        Tensor logits(Shape{num_items, channels});
        CounterRng rng{seed, fnv1a("intent.beta_logits")};
        for (auto& v : logits.values()) {
            v = 0.01 * rng.normal();
        }
        m.beta_logits = Parameter("intent.beta_logits", std::move(logits));
        return m;
    }

    std::size_t num_items() const { return encoder.input_dim(); }
    std::size_t channels() const { return beta_logits.value.cols(); }

    Parameter& item_embedding() { return encoder.layers.front().weight; }

    std::vector<Parameter*> parameters() {
        auto out = encoder.parameters();
        out.push_back(&beta_logits);
        for (auto* p : item_net.parameters()) {
            out.push_back(p);
        }
        return out;
    }
};

struct UserIntent {
    Tensor s;
    Tensor gamma;
};

/// Item intent distributions, stored item-major: row j is phi_j over the K
/// channels.
struct ItemIntentMatrix {
    Tensor by_item; // [M x K]

    std::size_t num_items() const { return by_item.rows(); }
    std::size_t channels() const { return by_item.cols(); }
    double operator()(std::size_t channel, std::size_t item) const { return by_item.at(item, channel); }
    std::span<const double> item(std::size_t j) const { return by_item.row(j); }
};

/// Posterior heads of the intent encoder on the tape.
struct IntentPosterior {
    Var mu;
    Var logvar;
};

inline IntentPosterior encode_users(Tape& tape, IntentModel& model,
                                    std::shared_ptr<const std::vector<SparseRow>> rows) {
    for (const auto& r : *rows) {
        if (r.empty()) {
            throw ParameterError("cannot encode a user with no interactions");
        }
    }
    std::size_t k = model.channels();
    Var out = mlp_forward_sparse(tape, model.encoder, std::move(rows));
    return {op::slice_cols(out, 0, k), op::slice_cols(out, k, 2 * k)};
}

/// Plain forward of the intent encoder for one binary row.
inline std::pair<Tensor, Tensor> encode_user(const IntentModel& model, const SparseRow& x_row) {
    if (x_row.empty()) {
        throw ParameterError("cannot encode a user with no interactions");
    }
    std::size_t k = model.channels();
    Tensor out = mlp_forward_sparse(model.encoder, x_row);
    Tensor mu(Shape{k}), logvar(Shape{k});
    for (std::size_t i = 0; i < k; i++) {
        mu[i] = out[i];
        logvar[i] = out[k + i];
    }
    return {std::move(mu), std::move(logvar)};
}

/// s = mu + noise * exp(logvar / 2), gamma = softmax(s / tau).
inline UserIntent sample_gamma(const Tensor& mu, const Tensor& logvar, const Tensor& noise, double tau) {
    Tensor sigma = logvar;
    for (auto& v : sigma.values()) {
        v = std::exp(0.5 * v);
    }
    Tensor s = gaussian_reparameterize(mu, sigma, noise);
    Tensor gamma = softmax_temp(s, tau);
    return {std::move(s), std::move(gamma)};
}

/// Channel distributions beta (columns sum to one over items).
inline Var channel_matrix(Tape& tape, IntentModel& model) {
    return op::softmax_cols(tape.parameter(model.beta_logits));
}

inline Tensor channel_matrix(const IntentModel& model) {
    const Tensor& logits = model.beta_logits.value;
    Tensor out(logits.shape());
    for (std::size_t c = 0; c < logits.cols(); c++) {
        double mx = logits.at(0, c);
        for (std::size_t r = 1; r < logits.rows(); r++) {
            mx = std::max(mx, logits.at(r, c));
        }
        double z = 0.0;
        for (std::size_t r = 0; r < logits.rows(); r++) {
            out.at(r, c) = std::exp(logits.at(r, c) - mx);
            z += out.at(r, c);
        }
        for (std::size_t r = 0; r < logits.rows(); r++) {
            out.at(r, c) /= z;
        }
    }
    return out;
}

/// phi for the listed items, [items.size() x K].
inline Var item_intents(Tape& tape, IntentModel& model, std::vector<std::size_t> items, double tau) {
    Var emb = op::gather_rows(tape.parameter(model.item_embedding()), std::move(items));
    return op::softmax_rows(mlp_forward(tape, model.item_net, emb), tau);
}

/// phi for every item, using the model's current temperature.
inline ItemIntentMatrix item_intents(const IntentModel& model) {
    Tensor logits = mlp_forward(model.item_net, model.encoder.layers.front().weight.value);
    return ItemIntentMatrix{softmax_temp(logits, model.tau)};
}

struct IntentLoss {
    Var total;
    Var reconstruction;
    Var kl;
};

/// Negative ELBO of the intent network for a batch of binary rows:
/// multinomial reconstruction under beta*gamma (averaged over the noise
/// samples) plus eta times the analytic Gaussian KL to the prior.
inline IntentLoss intent_elbo_loss(Tape& tape, IntentModel& model, const LaplacePrior& prior,
                                   std::shared_ptr<const std::vector<SparseRow>> rows,
                                   const std::vector<Tensor>& noise, double eta, double tau,
                                   std::vector<Var>* gammas = nullptr) {
    if (noise.empty()) {
        throw ParameterError("intent_elbo_loss needs at least one Monte Carlo sample");
    }
    if (eta < 0.0) {
        throw ParameterError("KL weight must be non-negative");
    }
    IntentPosterior q = encode_users(tape, model, rows);
    Var beta = channel_matrix(tape, model);
    std::vector<Var> recon_terms;
    std::vector<double> weights;
    for (const Tensor& eps : noise) {
        Var s = op::reparameterize(q.mu, q.logvar, eps);
        Var gamma = op::softmax_rows(s, tau);
        if (gammas != nullptr) {
            gammas->push_back(gamma);
        }
        recon_terms.push_back(op::mixture_nll(gamma, beta, rows, kProbabilityFloor));
        weights.push_back(1.0 / static_cast<double>(noise.size()));
    }
    Var recon = op::weighted_sum(recon_terms, weights);
    Var kl = op::gaussian_kl(q.mu, q.logvar, prior.mu, prior.sigma_diag);
    return {op::weighted_sum({recon, kl}, {1.0, eta}), recon, kl};
}

/// Item-intent KL with the user intents held constant: gradients reach only
/// the item network and the shared item embeddings.
///   sum_b sum_{j observed by b} KL(phi_j || gamma_b)
/// `rows` index into the rows of `phi`.
inline Var item_intent_kl_loss(Var phi, const Tensor& gamma_detached,
                               std::shared_ptr<const std::vector<SparseRow>> rows) {
    return op::categorical_kl(phi, gamma_detached, std::move(rows), kProbabilityFloor);
}

} // namespace ddcf
