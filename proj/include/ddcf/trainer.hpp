#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddcf/config.hpp"
#include "ddcf/data.hpp"
#include "ddcf/evaluator.hpp"
#include "ddcf/model.hpp"
#include "ddcf/optimizer.hpp"
#include "ddcf/random.hpp"

namespace ddcf {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Schedule {
    double eta = 0;
    double tau = 1;
};

/// eta ramps linearly from 0 to eta_max over `kappa` steps; tau falls
/// linearly from tau_start to tau_end over `total_steps` steps. Both hold
/// their end value afterwards.
inline Schedule warmup(std::uint64_t step, std::uint64_t kappa, double eta_max, double tau_start, double tau_end,
                       std::uint64_t total_steps) {
    if (kappa < 1) {
        throw ParameterError("kappa must be at least 1");
    }
    Schedule s;
    s.eta = eta_max * std::min(static_cast<double>(step) / static_cast<double>(kappa), 1.0);
    double frac = total_steps == 0 ? 1.0 : std::min(static_cast<double>(step) / static_cast<double>(total_steps), 1.0);
    s.tau = tau_start + (tau_end - tau_start) * frac;
    return s;
}

enum class Stage { pretrain, unified, done };

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::pretrain:
        return "pretrain";
    case Stage::unified:
        return "unified";
    case Stage::done:
        return "done";
    }
    return "done";
}

inline Stage parse_stage(const std::string& s) {
    if (s == "pretrain") {
        return Stage::pretrain;
    }
    if (s == "unified") {
        return Stage::unified;
    }
    if (s == "done") {
        return Stage::done;
    }
    throw CheckpointError("unknown training stage '" + s + "'");
}

/// Losses of one finished epoch, averaged per user.
struct EpochRecord {
    Stage stage = Stage::pretrain;
    std::size_t epoch = 0; // global epoch index
    double eta = 0;
    double tau = 1;
    LossBreakdown loss;
    std::optional<double> validation;
    double seconds = 0;
};

/// Everything besides parameters that a resumed run needs.
struct TrainingState {
    std::uint64_t global_step = 0;
    std::size_t epoch = 0;       // global epoch currently running
    std::size_t stage_epoch = 0; // epoch within the current stage
    std::size_t batch = 0;       // next batch within the epoch
    Stage stage = Stage::pretrain;
    LossBreakdown running;       // sums over the batches done this epoch
    double best_validation = -1;
    std::size_t best_epoch = 0;
    std::size_t stale_epochs = 0;
    std::vector<EpochRecord> history;
    std::vector<Tensor> best_parameters;
    OptimizerState optimizer;
};

/// Binary intent input: every training rating, or only ratings at or above
/// the positive threshold for the positives-only variant. A user without
/// positives keeps the full binary row.
inline std::vector<SparseRow> intent_rows(const RatingMatrix& train, const TrainConfig& config) {
    BinaryMatrix all = binarize(train);
    if (!config.positives_only_intent()) {
        return std::move(all.rows);
    }
    BinaryMatrix pos = binarize(train, config.positive_threshold);
    for (std::size_t u = 0; u < pos.rows.size(); u++) {
        if (pos.rows[u].empty()) {
            pos.rows[u] = all.rows[u];
        }
    }
    return std::move(pos.rows);
}

inline double per_user(double total, std::size_t users) {
    return users > 0 ? total / static_cast<double>(users) : 0.0;
}

/// Two-stage optimiser: intent pre-training on L1 + lambda2 * L2, then the
/// unified objective with early stopping on validation recall.
class Trainer {
public:
    Trainer(TrainConfig config, const SplitDataset& split)
        : config_(std::move(config)), split_(&split) {
        config_.validate();
        model_ = DdcfModel::create(config_, split.train.num_items);
        init();
    }

    /// Resumes from a stored model and state.
    Trainer(TrainConfig config, const SplitDataset& split, DdcfModel model, TrainingState state)
        : config_(std::move(config)), split_(&split), model_(std::move(model)), state_(std::move(state)) {
        config_.validate();
        if (model_.num_items() != split.train.num_items) {
            throw CheckpointError("checkpoint has " + std::to_string(model_.num_items()) + " items, dataset has "
                                  + std::to_string(split.train.num_items));
        }
        init();
        optimizer_.state() = state_.optimizer;
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    const TrainConfig& config() const { return config_; }
    const DdcfModel& model() const { return model_; }
    DdcfModel& model() { return model_; }
    const TrainingState& state() const { return state_; }
    const std::vector<SparseRow>& intent_input() const { return intent_; }
    const SplitDataset& split() const { return *split_; }
    bool finished() const { return state_.stage == Stage::done; }

    std::size_t batches_per_epoch() const {
        return (order_size() + config_.batch_size - 1) / config_.batch_size;
    }

    /// Schedule for the next batch.
    Schedule schedule() const {
        Schedule s = warmup(state_.global_step, config_.kappa, config_.eta_max, config_.tau_start, config_.tau_end,
                            config_.tau_anneal_epochs);
        s.tau = warmup(state_.epoch, 1, 0.0, config_.tau_start, config_.tau_end, config_.tau_anneal_epochs).tau;
        return s;
    }

    /// Runs one optimisation step. Returns false once training is over.
    bool step() {
        if (finished()) {
            return false;
        }
        if (state_.batch == 0) {
            epoch_start_ = std::chrono::steady_clock::now();
        }
        Schedule sched = schedule();
        model_.intent.tau = sched.tau;
        std::vector<Index> order = epoch_order(state_.epoch);
        std::size_t begin = state_.batch * config_.batch_size;
        std::size_t end = std::min(order.size(), begin + config_.batch_size);
        std::span<const Index> users(order.data() + begin, end - begin);

        StepSettings s;
        s.eta = sched.eta;
        s.tau = sched.tau;
        s.unified = state_.stage == Stage::unified;
        s.seed = config_.seed;
        s.step = state_.global_step;
        TrainingRows rows{&split_->train.rows, &intent_};
        Tape tape;
        for (Parameter* p : params_) {
            p->zero_grad();
        }
        BatchLoss loss;
        try {
            loss = batch_loss(tape, model_, config_, rows, users, s);
        } catch (const std::runtime_error& e) {
            throw TrainingError("non-finite loss at step " + std::to_string(state_.global_step) + " ("
                                + to_string(state_.stage) + " epoch " + std::to_string(state_.epoch)
                                + "): " + e.what());
        }
        check_finite(loss.terms);
        tape.backward(loss.total);
        optimizer_.step(params_);
        state_.global_step++;
        state_.running += loss.terms;
        state_.batch++;
        if (state_.batch >= batches_per_epoch()) {
            finish_epoch(sched);
        }
        state_.optimizer = optimizer_.state();
        return !finished();
    }

    /// Runs to completion and restores the best validated parameters.
    void run(const std::function<void(const EpochRecord&)>& on_epoch = {}) {
        std::size_t seen = state_.history.size();
        while (step()) {
            for (; seen < state_.history.size(); seen++) {
                if (on_epoch) {
                    on_epoch(state_.history[seen]);
                }
            }
        }
        for (; seen < state_.history.size(); seen++) {
            if (on_epoch) {
                on_epoch(state_.history[seen]);
            }
        }
    }

    /// Validation recall at the configured cutoff for the current parameters.
    double validation_recall() const {
        Scorer scorer(model_, split_->train.rows, intent_);
        std::size_t k = config_.validation_cutoff;
        return evaluate(scorer, *split_, {k}, EvalTarget::validation).recall(k);
    }

    Scorer scorer() const { return Scorer(model_, split_->train.rows, intent_); }

private:
    void init() {
        intent_ = intent_rows(split_->train, config_);
        params_ = model_.parameters();
        optimizer_ = Adam(AdamSettings{config_.learning_rate});
        if (state_.stage == Stage::pretrain && (config_.skip_pretrain || config_.pretrain_epochs == 0)
            && state_.stage_epoch == 0 && state_.batch == 0) {
            state_.stage = config_.unified_epochs > 0 ? Stage::unified : Stage::done;
        }
    }

    std::size_t order_size() const { return split_->train.num_users; }

    std::vector<Index> epoch_order(std::size_t epoch) const {
        std::vector<Index> order(order_size());
        std::iota(order.begin(), order.end(), Index{0});
        CounterRng rng{config_.seed, 0x0e90c, epoch};
        rng.shuffle(order);
        return order;
    }

    static void check_finite(const LossBreakdown& t) {
        double values[] = {t.intent, t.item_kl, t.preference, t.contrastive, t.total};
        for (double v : values) {
            if (!std::isfinite(v)) {
                std::ostringstream msg;
                msg << "non-finite loss: L1=" << t.intent << " L2=" << t.item_kl << " L3=" << t.preference
                    << " L4=" << t.contrastive;
                throw TrainingError(msg.str());
            }
        }
    }

    void finish_epoch(const Schedule& sched) {
        EpochRecord rec;
        rec.stage = state_.stage;
        rec.epoch = state_.epoch;
        rec.eta = sched.eta;
        rec.tau = sched.tau;
        rec.loss = state_.running;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start_).count();
        state_.running = LossBreakdown{};
        state_.batch = 0;
        state_.epoch++;
        state_.stage_epoch++;
        if (state_.stage == Stage::pretrain) {
            state_.history.push_back(rec);
            if (state_.stage_epoch >= config_.pretrain_epochs) {
                state_.stage = config_.unified_epochs > 0 ? Stage::unified : Stage::done;
                state_.stage_epoch = 0;
            }
            return;
        }
        double recall = validation_recall();
        rec.validation = recall;
        state_.history.push_back(rec);
        if (recall > state_.best_validation) {
            state_.best_validation = recall;
            state_.best_epoch = rec.epoch;
            state_.stale_epochs = 0;
            state_.best_parameters.clear();
            for (const Parameter* p : params_) {
                state_.best_parameters.push_back(p->value);
            }
        } else {
            state_.stale_epochs++;
        }
        if (state_.stage_epoch >= config_.unified_epochs || state_.stale_epochs >= config_.patience) {
            state_.stage = Stage::done;
            restore_best();
        }
    }

    void restore_best() {
        if (state_.best_parameters.size() != params_.size()) {
            return;
        }
        for (std::size_t i = 0; i < params_.size(); i++) {
            params_[i]->value = state_.best_parameters[i];
        }
    }

    TrainConfig config_;
    const SplitDataset* split_;
    DdcfModel model_;
    TrainingState state_;
    std::vector<SparseRow> intent_;
    std::vector<Parameter*> params_;
    Adam optimizer_;
    std::chrono::steady_clock::time_point epoch_start_ = std::chrono::steady_clock::now();
};

/// Text log of a run: config, seed, per-epoch losses and validation recall.
inline std::string run_manifest(const Trainer& trainer, double wall_seconds) {
    const TrainConfig& c = trainer.config();
    const TrainingState& s = trainer.state();
    std::ostringstream out;
    out << "format=ddcf-run-v1\n";
    out << "seed=" << c.seed << "\n";
    out << "config_hash=" << config_hash(c) << "\n";
    out << "variant=" << to_string(c.variant) << "\n";
    out << "config=" << nlohmann::json(c).dump() << "\n";
    if (c.skip_pretrain) {
        out << "warning: intent pre-training was skipped; the unified objective may converge prematurely to a "
               "local optimum\n";
    }
    out << "epochs:\n";
    out << "stage     epoch     eta    tau          L1          L2          L3          L4   KL/user    val_R  sec\n";
    char line[256];
    for (const auto& r : s.history) {
        std::size_t users = std::max<std::size_t>(r.loss.users, 1);
        std::snprintf(line, sizeof(line), "%-8s %6zu %7.4f %6.3f %11.5f %11.5f %11.5f %11.5f %9.5f %8s %5.2f\n",
                      to_string(r.stage).c_str(), r.epoch, r.eta, r.tau, per_user(r.loss.intent, users),
                      per_user(r.loss.item_kl, users), per_user(r.loss.preference, users),
                      per_user(r.loss.contrastive, users), per_user(r.loss.intent_kl, users),
                      r.validation ? (std::to_string(*r.validation).substr(0, 6)).c_str() : "-", r.seconds);
        out << line;
    }
    out << "best_epoch=" << s.best_epoch << "\n";
    out << "best_validation_recall@" << c.validation_cutoff << "=" << s.best_validation << "\n";
    out << "steps=" << s.global_step << "\n";
    out << std::fixed << std::setprecision(2) << "wall_seconds=" << wall_seconds << "\n";
    return out.str();
}

// Checkpoint file: "DDCFCKPT", u32 version, then tagged sections
// (4-byte tag, u64 length, payload), then a u64 FNV-1a checksum of every
// preceding byte. Integers and doubles are little-endian.

inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'C', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    TrainConfig config;
    DdcfModel model;
    TrainingState state;
    std::size_t num_users = 0;
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; i++) {
            bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; i++) {
            bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        }
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        bytes.append(s);
    }
    void raw(const char* p, std::size_t n) { bytes.append(p, n); }
    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        u64(t.rank());
        for (std::size_t d : t.shape()) {
            u64(d);
        }
        for (double v : t.values()) {
            f64(v);
        }
    }
    void section(const char tag[4], const ByteWriter& body) {
        raw(tag, 4);
        u64(body.bytes.size());
        bytes.append(body.bytes);
    }

    std::string bytes;
};

class ByteReader {
public:
    ByteReader(std::string_view data, std::string section) : data_(data), section_(std::move(section)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; i++) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; i++) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string_view raw(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str() {
        std::uint64_t n = u64();
        return std::string(raw(n));
    }
    std::pair<std::string, Tensor> tensor() {
        std::string name = str();
        std::uint64_t rank = u64();
        if (rank > 2) {
            fail("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
        }
        Shape shape;
        std::uint64_t count = 1;
        for (std::uint64_t i = 0; i < rank; i++) {
            shape.push_back(u64());
            count *= shape.back();
        }
        if (count * 8 > remaining()) {
            fail("tensor '" + name + "' is truncated");
        }
        Tensor t(shape);
        for (auto& v : t.values()) {
            v = f64();
        }
        return {std::move(name), std::move(t)};
    }
    /// Reads a tagged section and returns a reader over its payload.
    ByteReader section(const char tag[4]) {
        std::string name(tag, 4);
        if (remaining() < 12) {
            throw CheckpointError("checkpoint truncated before section '" + name + "'");
        }
        std::string_view got = raw(4);
        if (got != name) {
            throw CheckpointError("checkpoint section '" + name + "' missing (found '" + std::string(got) + "')");
        }
        std::uint64_t len = u64();
        if (len > remaining()) {
            throw CheckpointError("checkpoint section '" + name + "' is truncated");
        }
        return ByteReader(raw(len), name);
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t position() const { return pos_; }
    [[noreturn]] void fail(const std::string& msg) const {
        throw CheckpointError("checkpoint section '" + section_ + "': " + msg);
    }

private:
    void need(std::size_t n) const {
        if (remaining() < n) {
            fail("unexpected end of data");
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string section_;
};

inline nlohmann::json loss_json(const LossBreakdown& l) {
    return {{"intent", l.intent},
            {"intent_reconstruction", l.intent_reconstruction},
            {"intent_kl", l.intent_kl},
            {"item_kl", l.item_kl},
            {"preference", l.preference},
            {"preference_reconstruction", l.preference_reconstruction},
            {"preference_kl", l.preference_kl},
            {"contrastive", l.contrastive},
            {"total", l.total},
            {"users", l.users},
            {"slots", l.slots}};
}

inline LossBreakdown loss_from_json(const nlohmann::json& j) {
    LossBreakdown l;
    l.intent = j.at("intent").get<double>();
    l.intent_reconstruction = j.at("intent_reconstruction").get<double>();
    l.intent_kl = j.at("intent_kl").get<double>();
    l.item_kl = j.at("item_kl").get<double>();
    l.preference = j.at("preference").get<double>();
    l.preference_reconstruction = j.at("preference_reconstruction").get<double>();
    l.preference_kl = j.at("preference_kl").get<double>();
    l.contrastive = j.at("contrastive").get<double>();
    l.total = j.at("total").get<double>();
    l.users = j.at("users").get<std::size_t>();
    l.slots = j.at("slots").get<std::size_t>();
    return l;
}

// Doubles go through the binary sections; the JSON state only holds their
// bit patterns so a round trip is exact.
inline std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }
inline double unbits(const nlohmann::json& j) { return std::bit_cast<double>(j.get<std::uint64_t>()); }

inline nlohmann::json exact_loss_json(const LossBreakdown& l) {
    nlohmann::json j = loss_json(l);
    for (auto& [k, v] : j.items()) {
        if (v.is_number_float()) {
            v = bits(v.get<double>());
        }
    }
    return j;
}

inline LossBreakdown exact_loss_from_json(const nlohmann::json& j) {
    nlohmann::json plain = j;
    for (auto& [k, v] : plain.items()) {
        if (k != "users" && k != "slots") {
            v = unbits(v);
        }
    }
    return loss_from_json(plain);
}

inline nlohmann::json state_json(const TrainingState& s) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : s.history) {
        nlohmann::json e{{"stage", to_string(r.stage)},
                         {"epoch", r.epoch},
                         {"eta", bits(r.eta)},
                         {"tau", bits(r.tau)},
                         {"loss", exact_loss_json(r.loss)}};
        if (r.validation) {
            e["validation"] = bits(*r.validation);
        }
        history.push_back(e);
    }
    return {{"global_step", s.global_step},
            {"epoch", s.epoch},
            {"stage_epoch", s.stage_epoch},
            {"batch", s.batch},
            {"stage", to_string(s.stage)},
            {"running", exact_loss_json(s.running)},
            {"best_validation", bits(s.best_validation)},
            {"best_epoch", s.best_epoch},
            {"stale_epochs", s.stale_epochs},
            {"history", history}};
}

inline void state_from_json(TrainingState& s, const nlohmann::json& j) {
    s.global_step = j.at("global_step").get<std::uint64_t>();
    s.epoch = j.at("epoch").get<std::size_t>();
    s.stage_epoch = j.at("stage_epoch").get<std::size_t>();
    s.batch = j.at("batch").get<std::size_t>();
    s.stage = parse_stage(j.at("stage").get<std::string>());
    s.running = exact_loss_from_json(j.at("running"));
    s.best_validation = unbits(j.at("best_validation"));
    s.best_epoch = j.at("best_epoch").get<std::size_t>();
    s.stale_epochs = j.at("stale_epochs").get<std::size_t>();
    s.history.clear();
    for (const auto& e : j.at("history")) {
        EpochRecord r;
        r.stage = parse_stage(e.at("stage").get<std::string>());
        r.epoch = e.at("epoch").get<std::size_t>();
        r.eta = unbits(e.at("eta"));
        r.tau = unbits(e.at("tau"));
        r.loss = exact_loss_from_json(e.at("loss"));
        if (e.contains("validation")) {
            r.validation = unbits(e.at("validation"));
        }
        s.history.push_back(r);
    }
}

} // namespace detail

inline std::string serialize_checkpoint(const TrainConfig& config, const DdcfModel& model, const TrainingState& state,
                                        std::size_t num_users) {
    using detail::ByteWriter;
    ByteWriter out;
    out.raw(kCheckpointMagic, 8);
    out.u32(kCheckpointVersion);

    ByteWriter head;
    head.u64(model.channels());
    head.u64(model.dim());
    head.u64(model.top_l);
    head.u64(model.num_items());
    head.u64(num_users);
    out.section("HEAD", head);

    ByteWriter cfg;
    cfg.str(nlohmann::json(config).dump());
    out.section("CONF", cfg);

    ByteWriter st;
    st.str(detail::state_json(state).dump());
    st.f64(model.intent.tau);
    out.section("STAT", st);

    auto params = model.parameters();
    ByteWriter par;
    par.u64(params.size());
    for (const Parameter* p : params) {
        par.tensor(p->name, p->value);
    }
    out.section("PARM", par);

    const OptimizerState& o = state.optimizer;
    ByteWriter opt;
    opt.f64(o.settings.learning_rate);
    opt.f64(o.settings.beta1);
    opt.f64(o.settings.beta2);
    opt.f64(o.settings.epsilon);
    opt.u64(o.step);
    opt.u64(o.first_moment.size());
    for (std::size_t i = 0; i < o.first_moment.size(); i++) {
        opt.tensor(params[i]->name + ".m", o.first_moment[i]);
        opt.tensor(params[i]->name + ".v", o.second_moment[i]);
    }
    out.section("OPTM", opt);

    ByteWriter best;
    best.u64(state.best_parameters.size());
    for (std::size_t i = 0; i < state.best_parameters.size(); i++) {
        best.tensor(params[i]->name, state.best_parameters[i]);
    }
    out.section("BEST", best);

    out.u64(fnv1a(out.bytes));
    return std::move(out.bytes);
}

/// Writes to a temporary file and renames it into place.
inline void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const DdcfModel& model,
                            const TrainingState& state, std::size_t num_users) {
    std::string bytes = serialize_checkpoint(config, model, state, num_users);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw CheckpointError("cannot write checkpoint " + tmp.string());
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw CheckpointError("failed writing checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer) {
    save_checkpoint(path, trainer.config(), trainer.model(), trainer.state(), trainer.split().train.num_users);
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
    using detail::ByteReader;
    ByteReader in(bytes, "header");
    if (bytes.size() < 12 || in.raw(8) != std::string_view(kCheckpointMagic, 8)) {
        throw CheckpointError("not a ddcf checkpoint (bad magic)");
    }
    std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected "
                              + std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ByteReader head = in.section("HEAD");
    std::size_t k = head.u64(), d = head.u64(), l = head.u64(), m = head.u64();
    ck.num_users = head.u64();

    ByteReader cfg = in.section("CONF");
    try {
        ck.config = config_from_json(nlohmann::json::parse(cfg.str()));
    } catch (const std::exception& e) {
        cfg.fail(e.what());
    }
    if (ck.config.channels != k || ck.config.dim != d || ck.config.top_l != l) {
        cfg.fail("config disagrees with header dimensions");
    }
    ck.model = DdcfModel::create(ck.config, m);

    ByteReader st = in.section("STAT");
    try {
        detail::state_from_json(ck.state, nlohmann::json::parse(st.str()));
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        st.fail(e.what());
    }
    ck.model.intent.tau = st.f64();

    auto params = ck.model.parameters();
    ByteReader par = in.section("PARM");
    if (par.u64() != params.size()) {
        par.fail("parameter count mismatch");
    }
    for (Parameter* p : params) {
        auto [name, t] = par.tensor();
        if (name != p->name || t.shape() != p->value.shape()) {
            par.fail("expected " + p->name + " " + shape_string(p->value.shape()) + ", found " + name + " "
                     + shape_string(t.shape()));
        }
        p->value = std::move(t);
        p->zero_grad();
    }

    ByteReader opt = in.section("OPTM");
    OptimizerState& o = ck.state.optimizer;
    o.settings.learning_rate = opt.f64();
    o.settings.beta1 = opt.f64();
    o.settings.beta2 = opt.f64();
    o.settings.epsilon = opt.f64();
    o.step = opt.u64();
    std::uint64_t moments = opt.u64();
    if (moments != 0 && moments != params.size()) {
        opt.fail("moment count mismatch");
    }
    for (std::uint64_t i = 0; i < moments; i++) {
        auto m1 = opt.tensor();
        auto m2 = opt.tensor();
        if (m1.second.shape() != params[i]->value.shape() || m2.second.shape() != params[i]->value.shape()) {
            opt.fail("moment shape mismatch for " + params[i]->name);
        }
        o.first_moment.push_back(std::move(m1.second));
        o.second_moment.push_back(std::move(m2.second));
    }

    ByteReader best = in.section("BEST");
    std::uint64_t n_best = best.u64();
    if (n_best != 0 && n_best != params.size()) {
        best.fail("snapshot count mismatch");
    }
    for (std::uint64_t i = 0; i < n_best; i++) {
        auto t = best.tensor();
        if (t.second.shape() != params[i]->value.shape()) {
            best.fail("snapshot shape mismatch for " + params[i]->name);
        }
        ck.state.best_parameters.push_back(std::move(t.second));
    }

    std::size_t body = in.position();
    ByteReader tail(bytes.substr(body), "checksum");
    std::uint64_t sum = tail.u64();
    if (sum != fnv1a(bytes.substr(0, body))) {
        throw CheckpointError("checkpoint section 'checksum': mismatch, file is corrupt");
    }
    if (tail.remaining() != 0) {
        throw CheckpointError("checkpoint section 'checksum': trailing bytes after checksum");
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw CheckpointError("cannot open checkpoint " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

/// Rebuilds a trainer that continues exactly where the checkpoint stopped.
inline Trainer resume(const Checkpoint& ck, const SplitDataset& split) {
    if (ck.num_users != split.train.num_users) {
        throw CheckpointError("checkpoint has " + std::to_string(ck.num_users) + " users, dataset has "
                              + std::to_string(split.train.num_users));
    }
    return Trainer(ck.config, split, ck.model, ck.state);
}

} // namespace ddcf
