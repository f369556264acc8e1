#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "ddcf/autodiff.hpp"
#include "ddcf/config.hpp"
#include "ddcf/contrastive.hpp"
#include "ddcf/intent.hpp"
#include "ddcf/preference.hpp"
#include "ddcf/random.hpp"

namespace ddcf {

/// Both networks plus the intent prior.
struct DdcfModel {
    IntentModel intent;
    PreferenceModel preference;
    LaplacePrior prior;
    std::size_t top_l = 1;

    static DdcfModel create(const TrainConfig& config, std::size_t num_items) {
        DdcfModel m;
        m.intent = IntentModel::create(num_items, config.channels, config.hidden, config.item_hidden, config.seed);
        m.intent.tau = config.tau_start;
        m.preference = PreferenceModel::create(num_items, config.dim, config.hidden, config.seed);
        m.prior = symmetric_prior(config.channels, config.alpha);
        m.top_l = config.top_l;
        return m;
    }

    std::size_t num_items() const { return intent.num_items(); }
    std::size_t channels() const { return intent.channels(); }
    std::size_t dim() const { return preference.dim(); }

    /// Intent parameters first, then preference parameters; the order is
    /// part of the checkpoint format.
    std::vector<Parameter*> parameters() {
        auto out = intent.parameters();
        for (auto* p : preference.parameters()) {
            out.push_back(p);
        }
        return out;
    }

    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (auto* p : const_cast<DdcfModel*>(this)->parameters()) {
            out.push_back(p);
        }
        return out;
    }
};

/// Per-user inputs of a training run.
struct TrainingRows {
    const std::vector<SparseRow>* ratings = nullptr; // explicit training ratings
    const std::vector<SparseRow>* intent = nullptr;  // binary intent-network input
};

struct StepSettings {
    double eta = 1.0;
    double tau = 1.0;
    bool unified = true;
    bool stochastic = true;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

struct LossBreakdown {
    double intent = 0;
    double intent_reconstruction = 0;
    double intent_kl = 0;
    double item_kl = 0;
    double preference = 0;
    double preference_reconstruction = 0;
    double preference_kl = 0;
    double contrastive = 0;
    double total = 0;
    std::size_t users = 0;
    std::size_t slots = 0;

    LossBreakdown& operator+=(const LossBreakdown& o) {
        intent += o.intent;
        intent_reconstruction += o.intent_reconstruction;
        intent_kl += o.intent_kl;
        item_kl += o.item_kl;
        preference += o.preference;
        preference_reconstruction += o.preference_reconstruction;
        preference_kl += o.preference_kl;
        contrastive += o.contrastive;
        total += o.total;
        users += o.users;
        slots += o.slots;
        return *this;
    }
};

/// Handles to every loss term built for one batch.
struct BatchLoss {
    Var total;
    Var intent;
    Var item_kl;
    std::optional<Var> preference;
    std::optional<Var> contrastive;
    LossBreakdown terms;
};

namespace detail {

inline Tensor normal_noise(std::size_t rows, std::size_t cols, std::uint64_t seed, std::uint64_t tag,
                           std::uint64_t step, std::span<const Index> users, std::uint64_t extra = 0) {
    Tensor out(Shape{rows, cols});
    for (std::size_t r = 0; r < rows; r++) {
        CounterRng rng{seed, tag, step, static_cast<std::uint64_t>(users[r % users.size()]), extra, r / users.size()};
        for (auto& v : out.row(r)) {
            v = rng.normal();
        }
    }
    return out;
}

/// Observed entries with their targets plus uniformly drawn unobserved items
/// with target zero.
inline SparseRow reconstruction_targets(const SparseRow& observed, double negative_ratio, std::size_t num_items,
                                        CounterRng& rng) {
    if (negative_ratio <= 0.0) {
        return observed;
    }
    std::vector<std::pair<Index, double>> entries;
    for (std::size_t e = 0; e < observed.nnz(); e++) {
        entries.emplace_back(observed.indices[e], observed.values[e]);
    }
    auto wanted = static_cast<std::size_t>(std::llround(negative_ratio * static_cast<double>(observed.nnz())));
    wanted = std::min(wanted, num_items - std::min(num_items, observed.nnz()));
    std::vector<Index> taken;
    std::size_t attempts = 0;
    while (taken.size() < wanted && attempts < 20 * wanted + 100) {
        attempts++;
        auto j = static_cast<Index>(rng.below(num_items));
        if (std::binary_search(observed.indices.begin(), observed.indices.end(), j)
            || std::find(taken.begin(), taken.end(), j) != taken.end()) {
            continue;
        }
        taken.push_back(j);
        entries.emplace_back(j, 0.0);
    }
    std::sort(entries.begin(), entries.end());
    SparseRow out;
    for (auto [j, v] : entries) {
        out.push(j, v);
    }
    return out;
}

} // namespace detail

/// Builds the full training objective for one batch of users on `tape`:
///   L1 + lambda2 * L2 (+ lambda3 * L3 + lambda4 * L4 in the unified stage).
/// Tailored inputs, channel selections and contrastive views are computed
/// from the current values of gamma and phi and enter the preference terms
/// as constants.
inline BatchLoss batch_loss(Tape& tape, DdcfModel& model, const TrainConfig& config, const TrainingRows& data,
                            std::span<const Index> users, const StepSettings& s) {
    std::size_t b = users.size();
    std::size_t k = model.channels();
    std::size_t m = model.num_items();
    auto x_rows = std::make_shared<std::vector<SparseRow>>();
    x_rows->reserve(b);
    for (Index u : users) {
        x_rows->push_back((*data.intent)[u]);
    }

    // Intent network.
    std::vector<Tensor> noise;
    for (std::size_t h = 0; h < config.mc_samples; h++) {
        noise.push_back(s.stochastic ? detail::normal_noise(b, k, s.seed, 1, s.step, users, h) : Tensor(Shape{b, k}));
    }
    std::vector<Var> gammas;
    IntentLoss l1 = intent_elbo_loss(tape, model.intent, model.prior, x_rows, noise, s.eta, s.tau, &gammas);
    const Tensor& gamma = gammas.front().value();

    // Items touched by this batch, and phi for them.
    std::vector<std::size_t> items;
    for (Index u : users) {
        for (Index j : (*data.intent)[u].indices) {
            items.push_back(j);
        }
        if (s.unified) {
            for (Index j : (*data.ratings)[u].indices) {
                items.push_back(j);
            }
        }
    }
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    std::unordered_map<Index, Index> position;
    for (std::size_t q = 0; q < items.size(); q++) {
        position[static_cast<Index>(items[q])] = static_cast<Index>(q);
    }
    Var phi = item_intents(tape, model.intent, items, s.tau);
    auto q_rows = std::make_shared<std::vector<SparseRow>>();
    for (const auto& row : *x_rows) {
        SparseRow r;
        for (std::size_t e = 0; e < row.nnz(); e++) {
            r.push(position[row.indices[e]], row.values[e]);
        }
        q_rows->push_back(std::move(r));
    }
    Var l2 = item_intent_kl_loss(phi, gamma, q_rows);

    BatchLoss out;
    out.intent = l1.total;
    out.item_kl = l2;
    out.terms.users = b;
    out.terms.intent = l1.total.value().item();
    out.terms.intent_reconstruction = l1.reconstruction.value().item();
    out.terms.intent_kl = l1.kl.value().item();
    out.terms.item_kl = l2.value().item();
    if (!s.unified) {
        out.total = op::weighted_sum({l1.total, l2}, {1.0, config.lambda2});
        out.terms.total = out.total.value().item();
        return out;
    }

    // Preference decomposition on constant tailored inputs.
    std::size_t top_l = model.top_l;
    const Tensor& phi_v = phi.value();
    auto stacked = std::make_shared<std::vector<SparseRow>>();
    stacked->reserve(b * (2 * top_l + 1));
    std::vector<SparseRow> augmented;
    auto targets = std::make_shared<std::vector<SparseRow>>();
    AugmentationConfig aug_cfg{config.node_dropout, config.edge_dropout, s.seed};
    for (std::size_t i = 0; i < b; i++) {
        Index u = users[i];
        const SparseRow& ratings = (*data.ratings)[u];
        ChannelSelection sel = select_top_channels(gamma.row(i), top_l, u);
        DecomposedInput dec = decompose_ratings(
            ratings, [&](std::size_t c, Index j) { return phi_v.at(position.at(j), c); }, sel.channels);
        for (std::size_t l = 0; l < top_l; l++) {
            CounterRng neg_rng{s.seed, 3, s.step, u, l};
            const SparseRow& observed = config.reconstruct_raw ? ratings : dec.rows[l];
            targets->push_back(detail::reconstruction_targets(observed, config.negative_ratio, m, neg_rng));
            augmented.push_back(s.stochastic ? augment(dec.rows[l], aug_cfg, {s.step, u, l}) : dec.rows[l]);
            stacked->push_back(std::move(dec.rows[l]));
        }
    }
    for (auto& r : augmented) {
        stacked->push_back(std::move(r));
    }
    for (Index u : users) {
        SparseRow r = (*data.ratings)[u];
        l2_normalize(r);
        stacked->push_back(std::move(r));
    }
    std::size_t bl = b * top_l;
    PreferencePosterior enc = encode_preference(tape, model.preference, stacked);
    std::vector<std::size_t> dec_idx(bl);
    for (std::size_t r = 0; r < bl; r++) {
        dec_idx[r] = r;
    }
    Var dec_mu = op::gather_rows(enc.mu, dec_idx);
    Var dec_lv = op::gather_rows(enc.logvar, dec_idx);
    std::vector<Index> slot_users;
    for (Index u : users) {
        for (std::size_t l = 0; l < top_l; l++) {
            slot_users.push_back(u);
        }
    }
    Tensor eps = s.stochastic ? detail::normal_noise(bl, model.dim(), s.seed, 2, s.step, slot_users)
                              : Tensor(Shape{bl, model.dim()});
    Var u_sample = op::reparameterize(dec_mu, dec_lv, std::move(eps));
    PreferenceLoss l3 = preference_elbo_loss(tape, model.preference, u_sample, dec_mu, dec_lv, targets, s.eta);
    out.preference = l3.total;
    out.terms.slots = bl;
    out.terms.preference = l3.total.value().item();
    out.terms.preference_reconstruction = l3.reconstruction.value().item();
    out.terms.preference_kl = l3.kl.value().item();

    std::vector<Var> terms{l1.total, l2, l3.total};
    std::vector<double> coeffs{1.0, config.lambda2, config.lambda3};
    if (b >= 2 && config.lambda4 > 0.0) {
        std::vector<std::size_t> ori_idx(b);
        for (std::size_t i = 0; i < b; i++) {
            ori_idx[i] = 2 * bl + i;
        }
        Var ori = op::gather_rows(enc.mu, ori_idx);
        std::vector<Var> views;
        for (std::size_t l = 0; l < top_l; l++) {
            std::vector<std::size_t> idx(b);
            for (std::size_t i = 0; i < b; i++) {
                idx[i] = bl + i * top_l + l;
            }
            views.push_back(op::gather_rows(enc.mu, idx));
        }
        Var l4 = contrastive_loss(ori, views, config.tau_c, config.contrastive_include_positive);
        out.contrastive = l4;
        out.terms.contrastive = l4.value().item();
        terms.push_back(l4);
        coeffs.push_back(config.lambda4);
    }
    out.total = op::weighted_sum(terms, coeffs);
    out.terms.total = out.total.value().item();
    return out;
}

/// Deterministic inference over a frozen model: zero-noise intents, encoder
/// means, and the current temperature.
class Scorer {
public:
    Scorer(const DdcfModel& model, const std::vector<SparseRow>& ratings, const std::vector<SparseRow>& intent_rows)
        : model_(&model), ratings_(&ratings), intent_rows_(&intent_rows), phi_(item_intents(model.intent)),
          beta_(channel_matrix(model.intent)) {}

    const DdcfModel& model() const { return *model_; }
    const ItemIntentMatrix& phi() const { return phi_; }
    const Tensor& beta() const { return beta_; }
    std::size_t num_users() const { return ratings_->size(); }
    std::size_t num_items() const { return model_->num_items(); }

    const SparseRow& ratings(Index user) const {
        check_user(user);
        return (*ratings_)[user];
    }

    /// gamma at zero noise.
    Tensor gamma(Index user) const {
        check_user(user);
        auto [mu, logvar] = encode_user(model_->intent, (*intent_rows_)[user]);
        return softmax_temp(mu, model_->intent.tau);
    }

    ChannelSelection selection(Index user) const {
        Tensor g = gamma(user);
        return select_top_channels(g.values(), model_->top_l, user);
    }

    /// Encoder means of the user's tailored inputs, one row per channel.
    Tensor channel_embeddings(Index user, const std::vector<std::size_t>& channels) const {
        check_user(user);
        for (std::size_t c : channels) {
            if (c >= model_->channels()) {
                throw ParameterError("channel " + std::to_string(c) + " out of range [0, "
                                     + std::to_string(model_->channels()) + ")");
            }
        }
        DecomposedInput dec = decompose_ratings(
            (*ratings_)[user], [&](std::size_t c, Index j) { return phi_(c, j); }, channels);
        Tensor u(Shape{channels.size(), model_->dim()});
        for (std::size_t l = 0; l < channels.size(); l++) {
            Tensor mu = encode_preference(model_->preference, dec.rows[l]).first;
            std::copy(mu.values().begin(), mu.values().end(), u.row(l).begin());
        }
        return u;
    }

    std::vector<double> scores(Index user, const std::vector<std::size_t>& channels,
                               const std::vector<double>& weights) const {
        Tensor u = channel_embeddings(user, channels);
        return predict_ratings(u, model_->preference.items.value, weights);
    }

    /// Blended scores: the user's own top-L channels and weights.
    std::vector<double> scores(Index user) const {
        ChannelSelection sel = selection(user);
        return scores(user, sel.channels, sel.weights);
    }

private:
    void check_user(Index user) const {
        if (user >= ratings_->size()) {
            throw ParameterError("unknown user index " + std::to_string(user));
        }
    }

    const DdcfModel* model_;
    const std::vector<SparseRow>* ratings_;
    const std::vector<SparseRow>* intent_rows_;
    ItemIntentMatrix phi_;
    Tensor beta_;
};

} // namespace ddcf
