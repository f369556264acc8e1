#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ddcf/autodiff.hpp"
#include "ddcf/config.hpp"
#include "ddcf/data.hpp"
#include "ddcf/random.hpp"

namespace ddcf::testing {

/// Central-difference check of the gradients accumulated by `analytic`
/// against numerical derivatives of `loss`. Returns the largest relative
/// error |a - n| / max(|a|, |n|, floor).
inline double max_relative_error(const std::vector<Parameter*>& params, const std::function<double()>& loss,
                                 const std::function<void()>& analytic, double h = 1e-5, double floor = 1e-6) {
    for (Parameter* p : params) {
        p->zero_grad();
    }
    analytic();
    double worst = 0.0;
    for (Parameter* p : params) {
        auto& w = p->value.values();
        const auto& g = p->grad.values();
        for (std::size_t i = 0; i < w.size(); i++) {
            double keep = w[i];
            w[i] = keep + h;
            double up = loss();
            w[i] = keep - h;
            double down = loss();
            w[i] = keep;
            double numeric = (up - down) / (2.0 * h);
            double denom = std::max({std::abs(g[i]), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(g[i] - numeric) / denom);
        }
    }
    return worst;
}

/// Ratings of 4 users over 6 items.
inline RatingMatrix tiny_ratings() {
    RatingMatrix m;
    m.num_users = 4;
    m.num_items = 6;
    m.rows.resize(4);
    m.rows[0].push(0, 5);
    m.rows[0].push(2, 3);
    m.rows[0].push(4, 4);
    m.rows[1].push(1, 2);
    m.rows[1].push(2, 5);
    m.rows[1].push(5, 1);
    m.rows[2].push(0, 4);
    m.rows[2].push(3, 5);
    m.rows[3].push(1, 3);
    m.rows[3].push(3, 4);
    m.rows[3].push(4, 2);
    m.rows[3].push(5, 5);
    for (std::size_t u = 0; u < 4; u++) {
        m.user_ids.push_back("u" + std::to_string(u));
    }
    for (std::size_t j = 0; j < 6; j++) {
        m.item_ids.push_back("i" + std::to_string(j));
    }
    return m;
}

/// Users drawn from K disjoint item groups: each user mixes two groups with
/// Dirichlet(1, 1) weights and samples distinct items from them.
struct PlantedData {
    RatingMatrix ratings;
    std::vector<std::size_t> group_of_item;
    std::size_t groups = 0;
};

inline PlantedData planted_channels(std::size_t users, std::size_t items, std::size_t groups,
                                    std::size_t per_user, std::uint64_t seed) {
    PlantedData d;
    d.groups = groups;
    d.group_of_item.resize(items);
    for (std::size_t j = 0; j < items; j++) {
        d.group_of_item[j] = j * groups / items;
    }
    std::vector<std::vector<Index>> members(groups);
    for (std::size_t j = 0; j < items; j++) {
        members[d.group_of_item[j]].push_back(static_cast<Index>(j));
    }
    RatingMatrix& m = d.ratings;
    m.num_users = users;
    m.num_items = items;
    m.rows.resize(users);
    for (std::size_t u = 0; u < users; u++) {
        CounterRng rng{seed, 0x91a47, u};
        std::size_t a = rng.below(groups);
        std::size_t b = (a + 1 + rng.below(groups - 1)) % groups;
        // Dirichlet(1,1) weight is uniform on [0, 1].
        double wa = rng.uniform();
        std::vector<char> taken(items, 0);
        std::vector<std::pair<Index, double>> entries;
        while (entries.size() < per_user) {
            std::size_t g = rng.uniform() < wa ? a : b;
            Index j = members[g][rng.below(members[g].size())];
            if (taken[j]) {
                continue;
            }
            taken[j] = 1;
            entries.emplace_back(j, static_cast<double>(3 + rng.below(3)));
        }
        std::sort(entries.begin(), entries.end());
        for (auto [j, r] : entries) {
            m.rows[u].push(j, r);
        }
    }
    for (std::size_t u = 0; u < users; u++) {
        m.user_ids.push_back(std::to_string(u));
    }
    for (std::size_t j = 0; j < items; j++) {
        m.item_ids.push_back(std::to_string(j));
    }
    return d;
}

/// Genre table in which each planted group is one genre.
inline GenreTable planted_genres(const PlantedData& d) {
    GenreTable t;
    for (std::size_t j = 0; j < d.group_of_item.size(); j++) {
        t.genres[static_cast<Index>(j)] = {"g" + std::to_string(d.group_of_item[j])};
    }
    return t;
}

/// Small, fast configuration for unit tests.
inline TrainConfig small_config() {
    TrainConfig c;
    c.channels = 3;
    c.dim = 2;
    c.top_l = 2;
    c.hidden = 5;
    c.batch_size = 4;
    c.pretrain_epochs = 2;
    c.unified_epochs = 2;
    c.kappa = 5;
    c.tau_anneal_epochs = 2;
    return c;
}

} // namespace ddcf::testing
