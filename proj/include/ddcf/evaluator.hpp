#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddcf/data.hpp"
#include "ddcf/model.hpp"
#include "ddcf/random.hpp"

namespace ddcf {

/// Items ordered by descending score, ties by ascending item index.
struct RankedList {
    Index user = 0;
    std::vector<Index> items;
    std::vector<double> scores;
};

/// Ranks every item not flagged in `excluded`, keeping the first `n`.
inline RankedList rank_scores(std::span<const double> scores, const std::vector<bool>& excluded, std::size_t n,
                              Index user = 0) {
    std::vector<Index> candidates;
    candidates.reserve(scores.size());
    for (std::size_t j = 0; j < scores.size(); j++) {
        if (excluded.empty() || !excluded[j]) {
            candidates.push_back(static_cast<Index>(j));
        }
    }
    n = std::min(n, candidates.size());
    auto before = [&](Index a, Index b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n), candidates.end(),
                      before);
    RankedList out;
    out.user = user;
    out.items.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n));
    for (Index j : out.items) {
        out.scores.push_back(scores[j]);
    }
    return out;
}

inline std::vector<bool> exclusion_mask(std::size_t num_items, std::initializer_list<const SparseRow*> rows) {
    std::vector<bool> mask(num_items, false);
    for (const SparseRow* r : rows) {
        if (r == nullptr) {
            continue;
        }
        for (Index j : r->indices) {
            mask[j] = true;
        }
    }
    return mask;
}

/// Blended ranking for one user with the user's training items masked out.
inline RankedList rank_user(const Scorer& scorer, Index user, std::size_t n, const SparseRow* also_exclude = nullptr) {
    std::vector<double> s = scorer.scores(user);
    return rank_scores(s, exclusion_mask(scorer.num_items(), {&scorer.ratings(user), also_exclude}), n, user);
}

struct MetricsAtK {
    double precision = 0;
    double recall = 0;
    double average_precision = 0;
    double ndcg = 0;
};

/// Top-k metrics of one ranked list against a set of positive items.
/// AP is normalised by min(|positives|, k); NDCG uses binary gains.
inline MetricsAtK metrics_at_k(const RankedList& ranked, const std::vector<Index>& positives, std::size_t k) {
    if (k < 1) {
        throw ParameterError("cutoff k must be at least 1");
    }
    MetricsAtK m;
    if (positives.empty()) {
        return m;
    }
    std::vector<Index> sorted = positives;
    std::sort(sorted.begin(), sorted.end());
    std::size_t hits = 0;
    double ap = 0.0;
    double dcg = 0.0;
    std::size_t limit = std::min(k, ranked.items.size());
    for (std::size_t r = 0; r < limit; r++) {
        if (std::binary_search(sorted.begin(), sorted.end(), ranked.items[r])) {
            hits++;
            ap += static_cast<double>(hits) / static_cast<double>(r + 1);
            dcg += 1.0 / std::log2(static_cast<double>(r + 2));
        }
    }
    std::size_t ideal_hits = std::min(sorted.size(), k);
    double idcg = 0.0;
    for (std::size_t r = 0; r < ideal_hits; r++) {
        idcg += 1.0 / std::log2(static_cast<double>(r + 2));
    }
    m.precision = static_cast<double>(hits) / static_cast<double>(k);
    m.recall = static_cast<double>(hits) / static_cast<double>(sorted.size());
    m.average_precision = ap / static_cast<double>(ideal_hits);
    m.ndcg = dcg / idcg;
    return m;
}

struct MetricReport {
    std::vector<std::size_t> cutoffs;
    std::map<std::size_t, MetricsAtK> at;
    std::size_t users = 0;
    std::uint64_t seed = 0;
    std::string config_hash;

    double recall(std::size_t k) const { return at.at(k).recall; }
};

enum class EvalTarget { validation, test };

/// Runs fn(i) for i in [0, n) over `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; i++) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; t++) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) {
                fn(i);
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
}

/// Averages metrics over users with at least one positive held-out item.
/// Validation ranks everything but training items; test additionally masks
/// the validation items. `score(u)` returns one score per item.
template <typename ScoreFn>
MetricReport evaluate_scores(ScoreFn&& score, const SplitDataset& split, std::vector<std::size_t> cutoffs,
                             EvalTarget target = EvalTarget::test, std::size_t threads = 1) {
    if (cutoffs.empty()) {
        throw ParameterError("evaluate needs at least one cutoff");
    }
    const RatingMatrix& held = target == EvalTarget::test ? split.test : split.validation;
    std::size_t max_k = *std::max_element(cutoffs.begin(), cutoffs.end());
    std::size_t n_users = held.num_users;
    std::vector<std::vector<MetricsAtK>> per_user(n_users);
    std::vector<bool> counted(n_users, false);
    parallel_for(n_users, threads, [&](std::size_t u) {
        std::vector<Index> positives;
        const SparseRow& row = held.rows[u];
        for (std::size_t e = 0; e < row.nnz(); e++) {
            if (row.values[e] >= split.positive_threshold) {
                positives.push_back(row.indices[e]);
            }
        }
        if (positives.empty() || split.train.rows[u].empty()) {
            return;
        }
        const SparseRow* extra = target == EvalTarget::test ? &split.validation.rows[u] : nullptr;
        std::vector<double> scores = score(static_cast<Index>(u));
        RankedList ranked = rank_scores(
            scores, exclusion_mask(split.train.num_items, {&split.train.rows[u], extra}), max_k, static_cast<Index>(u));
        for (std::size_t k : cutoffs) {
            per_user[u].push_back(metrics_at_k(ranked, positives, k));
        }
        counted[u] = true;
    });
    MetricReport report;
    report.cutoffs = cutoffs;
    for (std::size_t k : cutoffs) {
        report.at[k] = MetricsAtK{};
    }
    for (std::size_t u = 0; u < n_users; u++) {
        if (!counted[u]) {
            continue;
        }
        report.users++;
        for (std::size_t c = 0; c < cutoffs.size(); c++) {
            auto& acc = report.at[cutoffs[c]];
            acc.precision += per_user[u][c].precision;
            acc.recall += per_user[u][c].recall;
            acc.average_precision += per_user[u][c].average_precision;
            acc.ndcg += per_user[u][c].ndcg;
        }
    }
    if (report.users > 0) {
        auto n = static_cast<double>(report.users);
        for (auto& [k, acc] : report.at) {
            acc.precision /= n;
            acc.recall /= n;
            acc.average_precision /= n;
            acc.ndcg /= n;
        }
    }
    return report;
}

inline MetricReport evaluate(const Scorer& scorer, const SplitDataset& split, std::vector<std::size_t> cutoffs,
                             EvalTarget target = EvalTarget::test, std::size_t threads = 1) {
    return evaluate_scores([&](Index u) { return scorer.scores(u); }, split, std::move(cutoffs), target, threads);
}

inline std::string format_report(const MetricReport& r) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    out << "metric ";
    for (std::size_t k : r.cutoffs) {
        out << std::setw(9) << ("@" + std::to_string(k));
    }
    out << "\n";
    auto line = [&](const char* name, double MetricsAtK::*field) {
        out << std::left << std::setw(7) << name << std::right;
        for (std::size_t k : r.cutoffs) {
            out << std::setw(9) << r.at.at(k).*field;
        }
        out << "\n";
    };
    line("P", &MetricsAtK::precision);
    line("R", &MetricsAtK::recall);
    line("MAP", &MetricsAtK::average_precision);
    line("NDCG", &MetricsAtK::ndcg);
    out << "users=" << r.users << " seed=" << r.seed;
    if (!r.config_hash.empty()) {
        out << " config=" << r.config_hash;
    }
    out << "\n";
    return out.str();
}

inline nlohmann::json report_json(const MetricReport& r) {
    nlohmann::json j;
    j["users"] = r.users;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    for (std::size_t k : r.cutoffs) {
        const auto& m = r.at.at(k);
        std::string s = std::to_string(k);
        j["P@" + s] = m.precision;
        j["R@" + s] = m.recall;
        j["MAP@" + s] = m.average_precision;
        j["NDCG@" + s] = m.ndcg;
    }
    return j;
}

/// Top-T items of every channel column of an [M x K] item-by-channel matrix.
inline std::vector<std::vector<Index>> channel_top_items(const Tensor& item_by_channel, std::size_t top_t) {
    std::vector<std::vector<Index>> groups;
    std::size_t m = item_by_channel.rows();
    for (std::size_t c = 0; c < item_by_channel.cols(); c++) {
        std::vector<double> col(m);
        for (std::size_t j = 0; j < m; j++) {
            col[j] = item_by_channel.at(j, c);
        }
        groups.push_back(rank_scores(col, {}, top_t).items);
    }
    return groups;
}

struct CooccurrenceReport {
    double rate = 0;
    double baseline = 0;
    std::vector<double> per_channel;
    std::size_t pairs = 0;
    std::size_t top_t = 0;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> count_pairs(const std::vector<Index>& group, const GenreTable& genres) {
    std::size_t ok = 0, total = 0;
    for (std::size_t a = 0; a < group.size(); a++) {
        for (std::size_t b = a + 1; b < group.size(); b++) {
            total++;
            if (genres.share_genre(group[a], group[b])) {
                ok++;
            }
        }
    }
    return {ok, total};
}

} // namespace detail

/// Share of within-group item pairs that have at least one genre in common.
inline double pair_success_rate(const std::vector<std::vector<Index>>& groups, const GenreTable& genres,
                                std::vector<double>* per_group = nullptr) {
    std::size_t ok = 0, total = 0;
    for (const auto& g : groups) {
        auto [o, t] = detail::count_pairs(g, genres);
        ok += o;
        total += t;
        if (per_group != nullptr) {
            per_group->push_back(t > 0 ? static_cast<double>(o) / static_cast<double>(t) : 0.0);
        }
    }
    return total > 0 ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
}

/// Genre co-occurrence of the top-T items per channel, against random groups
/// of the same sizes drawn from the genre-labelled items.
inline CooccurrenceReport cooccurrence_rate(const Tensor& item_by_channel, const GenreTable& genres, std::size_t top_t,
                                            std::uint64_t seed, std::size_t shuffles = 100) {
    if (top_t < 2) {
        throw ParameterError("co-occurrence needs at least 2 items per channel");
    }
    CooccurrenceReport report;
    report.top_t = top_t;
    auto groups = channel_top_items(item_by_channel, top_t);
    report.rate = pair_success_rate(groups, genres, &report.per_channel);
    for (const auto& g : groups) {
        report.pairs += g.size() * (g.size() - 1) / 2;
    }
    std::vector<Index> universe;
    for (const auto& [item, names] : genres.genres) {
        universe.push_back(item);
    }
    std::sort(universe.begin(), universe.end());
    double acc = 0.0;
    for (std::size_t s = 0; s < shuffles; s++) {
        CounterRng rng{seed, 0xc00c, s};
        std::vector<std::vector<Index>> random_groups;
        for (const auto& g : groups) {
            std::vector<Index> pool = universe;
            std::size_t n = std::min(g.size(), pool.size());
            for (std::size_t i = 0; i < n; i++) {
                std::size_t pick = i + rng.below(pool.size() - i);
                std::swap(pool[i], pool[pick]);
            }
            pool.resize(n);
            random_groups.push_back(std::move(pool));
        }
        acc += pair_success_rate(random_groups, genres);
    }
    report.baseline = shuffles > 0 ? acc / static_cast<double>(shuffles) : 0.0;
    return report;
}

} // namespace ddcf
