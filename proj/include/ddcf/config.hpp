#pragma once

#include <cstdint>
#include <cstdio>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ddcf/random.hpp"

namespace ddcf {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Variant {
    ddcf,        // full model
    ddcf_n,      // intent network sees positive ratings only
    ddcf_s,      // no contrastive term
    k1_baseline, // single channel, single slot
};

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::ddcf:
        return "ddcf";
    case Variant::ddcf_n:
        return "ddcf-n";
    case Variant::ddcf_s:
        return "ddcf-s";
    case Variant::k1_baseline:
        return "k1-baseline";
    }
    return "ddcf";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "ddcf") {
        return Variant::ddcf;
    }
    if (s == "ddcf-n") {
        return Variant::ddcf_n;
    }
    if (s == "ddcf-s") {
        return Variant::ddcf_s;
    }
    if (s == "k1-baseline") {
        return Variant::k1_baseline;
    }
    throw ConfigError("unknown variant '" + s + "' (expected ddcf, ddcf-n, ddcf-s or k1-baseline)");
}

/// Every hyperparameter of a training run.
struct TrainConfig {
    // architecture
    std::size_t channels = 20; // K
    std::size_t dim = 32;      // d
    std::size_t top_l = 2;     // L
    std::size_t hidden = 100;
    std::size_t item_hidden = 0; // 0: the item network is a single linear map

    // temperatures and KL schedule
    double tau_start = 1.0;
    double tau_end = 0.4;
    std::size_t tau_anneal_epochs = 20;
    double tau_c = 0.2;
    double eta_max = 1.0;
    std::size_t kappa = 1000;
    double alpha = 1.0;

    // loss weights
    double lambda2 = 1.0;
    double lambda3 = 1.0;
    double lambda4 = 0.001;

    // optimisation
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t pretrain_epochs = 50;
    std::size_t unified_epochs = 100;
    std::size_t patience = 10;
    std::size_t mc_samples = 1;
    std::size_t validation_cutoff = 10;
    std::uint64_t seed = 0;

    // preference reconstruction and augmentation
    double negative_ratio = 0.0;
    bool reconstruct_raw = false;
    bool contrastive_include_positive = false;
    double node_dropout = 0.1;
    double edge_dropout = 0.1;

    // variants
    Variant variant = Variant::ddcf;
    double positive_threshold = 4.0;
    bool skip_pretrain = false;

    /// Forces the settings a variant implies.
    void apply_variant() {
        if (variant == Variant::ddcf_s) {
            lambda4 = 0.0;
        }
        if (variant == Variant::k1_baseline) {
            channels = 1;
            top_l = 1;
        }
    }

    bool positives_only_intent() const { return variant == Variant::ddcf_n; }

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
        if (channels < 1 || top_l < 1 || top_l > channels) {
            fail("need channels >= top_l >= 1");
        }
        if (dim < 1 || hidden < 1) {
            fail("dim and hidden must be positive");
        }
        if (!(tau_start > 0) || !(tau_end > 0) || !(tau_c > 0)) {
            fail("temperatures must be positive");
        }
        if (tau_end > tau_start) {
            fail("tau_end must not exceed tau_start");
        }
        if (eta_max < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0) {
            fail("KL weight and loss weights must be non-negative");
        }
        if (kappa < 1) {
            fail("kappa must be at least 1");
        }
        if (!(alpha > 0)) {
            fail("alpha must be positive");
        }
        if (!(learning_rate > 0) || batch_size < 1 || mc_samples < 1 || validation_cutoff < 1) {
            fail("learning_rate, batch_size, mc_samples and validation_cutoff must be positive");
        }
        if (negative_ratio < 0) {
            fail("negative_ratio must be non-negative");
        }
        if (!(node_dropout >= 0 && node_dropout < 1) || !(edge_dropout >= 0 && edge_dropout <= 1)) {
            fail("dropout rates must lie in [0, 1)");
        }
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{
        {"channels", c.channels},
        {"dim", c.dim},
        {"top_l", c.top_l},
        {"hidden", c.hidden},
        {"item_hidden", c.item_hidden},
        {"tau_start", c.tau_start},
        {"tau_end", c.tau_end},
        {"tau_anneal_epochs", c.tau_anneal_epochs},
        {"tau_c", c.tau_c},
        {"eta_max", c.eta_max},
        {"kappa", c.kappa},
        {"alpha", c.alpha},
        {"lambda2", c.lambda2},
        {"lambda3", c.lambda3},
        {"lambda4", c.lambda4},
        {"learning_rate", c.learning_rate},
        {"batch_size", c.batch_size},
        {"pretrain_epochs", c.pretrain_epochs},
        {"unified_epochs", c.unified_epochs},
        {"patience", c.patience},
        {"mc_samples", c.mc_samples},
        {"validation_cutoff", c.validation_cutoff},
        {"seed", c.seed},
        {"negative_ratio", c.negative_ratio},
        {"reconstruct_raw", c.reconstruct_raw},
        {"contrastive_include_positive", c.contrastive_include_positive},
        {"node_dropout", c.node_dropout},
        {"edge_dropout", c.edge_dropout},
        {"variant", to_string(c.variant)},
        {"positive_threshold", c.positive_threshold},
        {"skip_pretrain", c.skip_pretrain},
    };
}

/// Overlays keys from `j` onto `c`. Unknown keys, and keys listed in
/// `extra_keys` that callers handle themselves, are treated separately:
/// unknown ones throw.
inline void update_from_json(TrainConfig& c, const nlohmann::json& j, const std::set<std::string>& extra_keys = {}) {
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    nlohmann::json known;
    to_json(known, c);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (extra_keys.count(it.key()) > 0) {
            continue;
        }
        if (!known.contains(it.key())) {
            throw ConfigError("unknown config key '" + it.key() + "'");
        }
    }
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) {
                field = j.at(key).get<std::decay_t<decltype(field)>>();
            }
        };
        get("channels", c.channels);
        get("dim", c.dim);
        get("top_l", c.top_l);
        get("hidden", c.hidden);
        get("item_hidden", c.item_hidden);
        get("tau_start", c.tau_start);
        get("tau_end", c.tau_end);
        get("tau_anneal_epochs", c.tau_anneal_epochs);
        get("tau_c", c.tau_c);
        get("eta_max", c.eta_max);
        get("kappa", c.kappa);
        get("alpha", c.alpha);
        get("lambda2", c.lambda2);
        get("lambda3", c.lambda3);
        get("lambda4", c.lambda4);
        get("learning_rate", c.learning_rate);
        get("batch_size", c.batch_size);
        get("pretrain_epochs", c.pretrain_epochs);
        get("unified_epochs", c.unified_epochs);
        get("patience", c.patience);
        get("mc_samples", c.mc_samples);
        get("validation_cutoff", c.validation_cutoff);
        get("seed", c.seed);
        get("negative_ratio", c.negative_ratio);
        get("reconstruct_raw", c.reconstruct_raw);
        get("contrastive_include_positive", c.contrastive_include_positive);
        get("node_dropout", c.node_dropout);
        get("edge_dropout", c.edge_dropout);
        get("positive_threshold", c.positive_threshold);
        get("skip_pretrain", c.skip_pretrain);
        if (j.contains("variant")) {
            c.variant = parse_variant(j.at("variant").get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config type error: ") + e.what());
    }
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    update_from_json(c, j);
    return c;
}

/// Short stable fingerprint of a configuration.
inline std::string config_hash(const TrainConfig& c) {
    nlohmann::json j = c;
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

} // namespace ddcf
