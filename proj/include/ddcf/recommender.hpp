#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ddcf/evaluator.hpp"
#include "ddcf/model.hpp"

namespace ddcf {

/// User-chosen channel weights replacing the inferred intent distribution.
struct IntentOverride {
    std::map<std::size_t, double> weights;

    /// Channels and weights rescaled to sum to one.
    std::pair<std::vector<std::size_t>, std::vector<double>> normalized() const {
        double total = 0.0;
        for (auto [c, w] : weights) {
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw ParameterError("intent weights must be finite and non-negative");
            }
            total += w;
        }
        if (!(total > 0.0)) {
            throw ParameterError("intent override needs at least one positive weight");
        }
        std::pair<std::vector<std::size_t>, std::vector<double>> out;
        for (auto [c, w] : weights) {
            out.first.push_back(c);
            out.second.push_back(w / total);
        }
        return out;
    }
};

/// Parses "l:w,l:w".
inline IntentOverride parse_intent_override(const std::string& text) {
    IntentOverride o;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t comma = text.find(',', pos);
        std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        std::size_t colon = item.find(':');
        std::size_t channel = 0;
        double weight = 0.0;
        bool ok = colon != std::string::npos;
        if (ok) {
            auto r1 = std::from_chars(item.data(), item.data() + colon, channel);
            ok = r1.ec == std::errc() && r1.ptr == item.data() + colon;
            try {
                std::size_t used = 0;
                weight = std::stod(item.substr(colon + 1), &used);
                ok = ok && used == item.size() - colon - 1;
            } catch (const std::exception&) {
                ok = false;
            }
        }
        if (!ok) {
            throw ParameterError("malformed intent entry '" + item + "' (expected channel:weight)");
        }
        o.weights[channel] += weight;
        if (comma == std::string::npos) {
            break;
        }
        pos = comma + 1;
    }
    return o;
}

/// Weighted blend over the user's own top-L channels; same path as evaluation.
inline RankedList recommend_blended(const Scorer& scorer, Index user, std::size_t n) {
    return rank_user(scorer, user, n);
}

inline RankedList recommend_with_intent(const Scorer& scorer, Index user, const IntentOverride& intent, std::size_t n) {
    auto [channels, weights] = intent.normalized();
    std::vector<double> s = scorer.scores(user, channels, weights);
    return rank_scores(s, exclusion_mask(scorer.num_items(), {&scorer.ratings(user)}), n, user);
}

/// Ranks by the single channel-l embedding, without blending.
inline RankedList recommend_in_channel(const Scorer& scorer, Index user, std::size_t channel, std::size_t n) {
    IntentOverride o;
    o.weights[channel] = 1.0;
    return recommend_with_intent(scorer, user, o, n);
}

/// The user's n strongest channels with renormalised weights.
inline ChannelSelection user_channels(const Scorer& scorer, Index user, std::size_t n) {
    Tensor g = scorer.gamma(user);
    return select_top_channels(g.values(), std::min(n, g.size()), user);
}

enum class Similarity { cosine, symmetric_kl };

/// Other items ordered by similarity of their channel distributions to
/// item j. Symmetric KL is mapped to 1 / (1 + KL) so larger is closer.
inline RankedList similar_items(const ItemIntentMatrix& phi, Index item, std::size_t n,
                                Similarity measure = Similarity::cosine) {
    std::size_t m = phi.by_item.rows();
    if (item >= m) {
        throw ParameterError("unknown item index " + std::to_string(item));
    }
    std::span<const double> a = phi.by_item.row(item);
    std::vector<double> sim(m, 0.0);
    for (std::size_t j = 0; j < m; j++) {
        std::span<const double> b = phi.by_item.row(j);
        if (measure == Similarity::cosine) {
            double ab = 0.0, aa = 0.0, bb = 0.0;
            for (std::size_t c = 0; c < a.size(); c++) {
                ab += a[c] * b[c];
                aa += a[c] * a[c];
                bb += b[c] * b[c];
            }
            sim[j] = aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
        } else {
            double kl = 0.0;
            for (std::size_t c = 0; c < a.size(); c++) {
                double p = std::max(a[c], kProbabilityFloor);
                double q = std::max(b[c], kProbabilityFloor);
                kl += (p - q) * std::log(p / q);
            }
            sim[j] = 1.0 / (1.0 + kl);
        }
    }
    std::vector<bool> mask(m, false);
    mask[item] = true;
    return rank_scores(sim, mask, n, item);
}

} // namespace ddcf
