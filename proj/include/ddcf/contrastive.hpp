#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ddcf/autodiff.hpp"
#include "ddcf/layers.hpp"
#include "ddcf/preference.hpp"
#include "ddcf/random.hpp"

namespace ddcf {

struct AugmentationConfig {
    double node_dropout = 0.1;
    double edge_dropout = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(node_dropout >= 0.0 && node_dropout < 1.0) || !(edge_dropout >= 0.0 && edge_dropout <= 1.0)) {
            throw ParameterError("dropout rates must lie in [0, 1)");
        }
    }
};

/// Identifies one augmentation draw; the draw is a pure function of it.
struct AugmentationKey {
    std::uint64_t step = 0;
    std::uint64_t user = 0;
    std::uint64_t slot = 0;
};

/// Node dropout removes the whole row with probability node_dropout; edge
/// dropout removes each entry independently. Survivors are re-normalised.
inline SparseRow augment(const SparseRow& row, const AugmentationConfig& cfg, AugmentationKey key) {
    cfg.validate();
    if (cfg.node_dropout == 0.0 && cfg.edge_dropout == 0.0) {
        return row;
    }
    CounterRng rng{cfg.seed, 0xa06, key.step, key.user, key.slot};
    if (rng.uniform() < cfg.node_dropout) {
        return SparseRow{};
    }
    SparseRow out;
    for (std::size_t e = 0; e < row.nnz(); e++) {
        if (rng.uniform() >= cfg.edge_dropout) {
            out.push(row.indices[e], row.values[e]);
        }
    }
    l2_normalize(out);
    return out;
}

/// Encoder mean on the L2-normalised raw rating row.
inline Tensor embed_original(const PreferenceModel& model, const SparseRow& ratings) {
    SparseRow row = ratings;
    l2_normalize(row);
    return encode_preference(model, row).first;
}

struct ContrastiveBatch {
    Tensor original;             // [B x d]
    std::vector<Tensor> augmented; // one [B x d] per channel slot
    double tau_c = 0.2;
};

/// sum over slots of the contrastive NLL between each original embedding and
/// its own augmented view, with the other users' views at the same slot as
/// negatives.
inline Var contrastive_loss(Var original, const std::vector<Var>& augmented, double tau_c, bool include_positive = false) {
    if (original.value().rows() < 2) {
        throw ShapeError("contrastive loss needs at least 2 users in the batch");
    }
    if (!(tau_c > 0.0)) {
        throw ParameterError("contrastive temperature must be positive");
    }
    Var ori = op::normalize_rows(original);
    std::vector<Var> terms;
    for (Var a : augmented) {
        require_same_shape(original.value(), a.value(), "contrastive_loss");
        terms.push_back(op::contrastive_nll(op::matmul_nt(ori, op::normalize_rows(a)), tau_c, include_positive));
    }
    return op::weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
}

inline double contrastive_loss(const ContrastiveBatch& batch, bool include_positive = false) {
    Tape tape;
    std::vector<Var> aug;
    for (const auto& a : batch.augmented) {
        aug.push_back(tape.constant(a));
    }
    return contrastive_loss(tape.constant(batch.original), aug, batch.tau_c, include_positive).value().item();
}

} // namespace ddcf
