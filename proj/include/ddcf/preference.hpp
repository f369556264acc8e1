#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "ddcf/autodiff.hpp"
#include "ddcf/intent.hpp"
#include "ddcf/layers.hpp"
#include "ddcf/random.hpp"
#include "ddcf/sparse.hpp"
#include "ddcf/tensor.hpp"

namespace ddcf {

/// Preference decomposition network parameters. One encoder is shared by
/// every channel: M -> hidden -> 2d (mean, log-variance). `items` is V, the
/// d x M item matrix; column j is v_j.
struct PreferenceModel {
    MlpParams encoder;
    Parameter items;

    static PreferenceModel create(std::size_t num_items, std::size_t dim, std::size_t hidden, std::uint64_t seed) {
        PreferenceModel m;
        m.encoder = MlpParams::create("preference.encoder", {num_items, hidden, 2 * dim}, seed);
        Tensor v(Shape{dim, num_items});
        CounterRng rng{seed, fnv1a("preference.items")};
        double scale = 1.0 / std::sqrt(static_cast<double>(dim));
        for (auto& x : v.values()) {
            x = scale * rng.normal();
        }
        m.items = Parameter("preference.items", std::move(v));
        return m;
    }

    std::size_t dim() const { return items.value.rows(); }
    std::size_t num_items() const { return items.value.cols(); }

    std::vector<Parameter*> parameters() {
        auto out = encoder.parameters();
        out.push_back(&items);
        return out;
    }
};

/// Top-L channels of one user's intent distribution with renormalised
/// weights.
struct ChannelSelection {
    Index user = 0;
    std::vector<std::size_t> channels;
    std::vector<double> weights;
};

/// Picks the L largest entries (ties to the lower channel index) and
/// renormalises them to sum to one.
inline ChannelSelection select_top_channels(std::span<const double> gamma, std::size_t top_l, Index user = 0) {
    if (top_l < 1 || top_l > gamma.size()) {
        throw ParameterError("top-L must be in [1, " + std::to_string(gamma.size()) + "], got "
                             + std::to_string(top_l));
    }
    std::vector<std::size_t> order(gamma.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_l), order.end(),
                      [&](std::size_t a, std::size_t b) { return gamma[a] > gamma[b] || (gamma[a] == gamma[b] && a < b); });
    ChannelSelection sel;
    sel.user = user;
    sel.channels.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_l));
    double total = 0.0;
    for (std::size_t c : sel.channels) {
        total += gamma[c];
    }
    for (std::size_t c : sel.channels) {
        sel.weights.push_back(total > 0.0 ? gamma[c] / total : 1.0 / static_cast<double>(top_l));
    }
    return sel;
}

/// Channel-tailored rating rows, one per selected channel, each L2-normalised.
struct DecomposedInput {
    std::vector<SparseRow> rows;
};

/// R_l = normalize(phi_l (elementwise) R) over the observed entries of R.
/// `phi(channel, item)` returns the item's probability under the channel.
template <typename PhiLookup>
DecomposedInput decompose_ratings(const SparseRow& ratings, PhiLookup&& phi, const std::vector<std::size_t>& channels) {
    DecomposedInput out;
    out.rows.reserve(channels.size());
    for (std::size_t c : channels) {
        SparseRow row;
        for (std::size_t e = 0; e < ratings.nnz(); e++) {
            double v = phi(c, ratings.indices[e]) * ratings.values[e];
            if (v != 0.0) {
                row.push(ratings.indices[e], v);
            }
        }
        l2_normalize(row);
        out.rows.push_back(std::move(row));
    }
    return out;
}

inline DecomposedInput decompose_ratings(const SparseRow& ratings, const ItemIntentMatrix& phi,
                                         const ChannelSelection& sel) {
    for (std::size_t c : sel.channels) {
        if (c >= phi.channels()) {
            throw ParameterError("channel " + std::to_string(c) + " out of range");
        }
    }
    return decompose_ratings(ratings, [&](std::size_t c, Index j) { return phi(c, j); }, sel.channels);
}

struct PreferencePosterior {
    Var mu;
    Var logvar;
};

inline PreferencePosterior encode_preference(Tape& tape, PreferenceModel& model,
                                             std::shared_ptr<const std::vector<SparseRow>> rows) {
    std::size_t d = model.dim();
    Var out = mlp_forward_sparse(tape, model.encoder, std::move(rows));
    return {op::slice_cols(out, 0, d), op::slice_cols(out, d, 2 * d)};
}

/// Plain encoder forward for one tailored row: (mean, log-variance).
inline std::pair<Tensor, Tensor> encode_preference(const PreferenceModel& model, const SparseRow& row) {
    std::size_t d = model.dim();
    Tensor out = mlp_forward_sparse(model.encoder, row);
    Tensor mu(Shape{d}), logvar(Shape{d});
    for (std::size_t i = 0; i < d; i++) {
        mu[i] = out[i];
        logvar[i] = out[d + i];
    }
    return {std::move(mu), std::move(logvar)};
}

/// Weighted average over channels of u_l . v_j for every item j.
/// `u` is [L x d] with row l belonging to weights[l].
inline std::vector<double> predict_ratings(const Tensor& u, const Tensor& items, std::span<const double> weights) {
    if (u.rows() != weights.size() || u.cols() != items.rows()) {
        throw ShapeError("predict_ratings: embeddings " + shape_string(u.shape()) + ", items "
                         + shape_string(items.shape()) + ", " + std::to_string(weights.size()) + " weights");
    }
    std::size_t m = items.cols();
    std::vector<double> scores(m, 0.0);
    for (std::size_t l = 0; l < u.rows(); l++) {
        for (std::size_t k = 0; k < u.cols(); k++) {
            double coef = weights[l] * u.at(l, k);
            if (coef == 0.0) {
                continue;
            }
            auto vrow = items.row(k);
            for (std::size_t j = 0; j < m; j++) {
                scores[j] += coef * vrow[j];
            }
        }
    }
    return scores;
}

inline std::vector<double> predict_ratings(const Tensor& u, const Tensor& items, const ChannelSelection& sel) {
    return predict_ratings(u, items, sel.weights);
}

struct PreferenceLoss {
    Var total;
    Var reconstruction;
    Var kl;
};

/// Negative ELBO of the preference network:
///   sum over (row, item, target) of (u_row . v_item - target)^2
///   + eta * KL(q(u | R_l) || N(0, I)).
/// `targets` lists, per tailored row, the items to reconstruct and their
/// target values.
inline PreferenceLoss preference_elbo_loss(Tape& tape, PreferenceModel& model, Var u, Var mu, Var logvar,
                                           std::shared_ptr<const std::vector<SparseRow>> targets, double eta) {
    if (eta < 0.0) {
        throw ParameterError("KL weight must be non-negative");
    }
    std::vector<double> flat;
    for (const auto& row : *targets) {
        flat.insert(flat.end(), row.values.begin(), row.values.end());
    }
    Var pred = op::pair_dot(u, tape.parameter(model.items), targets);
    Var recon = op::squared_error(pred, Tensor::vector(std::move(flat)));
    std::size_t d = model.dim();
    Var kl = op::gaussian_kl(mu, logvar, std::vector<double>(d, 0.0), std::vector<double>(d, 1.0));
    return {op::weighted_sum({recon, kl}, {1.0, eta}), recon, kl};
}

} // namespace ddcf
