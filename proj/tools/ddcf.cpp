// ddcf: prepare data, train, evaluate and query disentangled CF models.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ddcf/config.hpp"
#include "ddcf/data.hpp"
#include "ddcf/evaluator.hpp"
#include "ddcf/recommender.hpp"
#include "ddcf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Raised for bad flags, config files and missing inputs (exit code 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t threads = 1;
    bool json = false;

    // prepare
    std::string ratings;
    std::string delimiter;
    bool skip_header = false;
    std::size_t min_interactions = 10;

    // train and queries
    std::string data;
    std::string checkpoint;
    std::string variant;
    bool skip_pretrain = false;
    std::string resume;
    std::string genres;
    std::string user;
    std::string intent;
    std::optional<std::size_t> channel;
    std::string similar_to;
    std::string similarity = "cosine";
    std::size_t top = 10;
    std::size_t top_t = 20;
    std::size_t shuffles = 100;
};

const std::set<std::string> kFileKeys = {"ratings", "data", "out", "genres", "checkpoint", "delimiter",
                                         "skip_header", "min_interactions", "threads"};

json read_config_file(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot open config file " + path);
    }
    try {
        json j = json::parse(in);
        if (!j.is_object()) {
            throw UsageError("config file " + path + " must hold a JSON object");
        }
        return j;
    } catch (const json::parse_error& e) {
        throw UsageError("config file " + path + ": " + e.what());
    }
}

/// Fills unset path options from the config file; flags win.
void merge_file_keys(Options& o, const json& file, const CLI::App& cmd) {
    auto given = [&](const char* flag) {
        const CLI::Option* opt = cmd.get_option_no_throw(flag);
        return opt != nullptr && opt->count() > 0;
    };
    auto take = [&](const char* key, std::string& field, const char* flag) {
        if (file.contains(key) && !given(flag)) {
            field = file.at(key).get<std::string>();
        }
    };
    try {
        take("ratings", o.ratings, "--ratings");
        take("data", o.data, "--data");
        take("out", o.out, "--out");
        take("genres", o.genres, "--genres");
        take("checkpoint", o.checkpoint, "--checkpoint");
        take("delimiter", o.delimiter, "--delimiter");
        if (file.contains("skip_header") && !given("--skip-header")) {
            o.skip_header = file.at("skip_header").get<bool>();
        }
        if (file.contains("min_interactions") && !given("--min-interactions")) {
            o.min_interactions = file.at("min_interactions").get<std::size_t>();
        }
        if (file.contains("threads") && !given("--threads")) {
            o.threads = file.at("threads").get<std::size_t>();
        }
    } catch (const json::exception& e) {
        throw UsageError(std::string("config file: ") + e.what());
    }
}

ddcf::TrainConfig build_config(const Options& o, const json& file) {
    ddcf::TrainConfig c;
    try {
        ddcf::update_from_json(c, file, kFileKeys);
    } catch (const ddcf::ConfigError& e) {
        throw UsageError(e.what());
    }
    if (o.seed) {
        c.seed = *o.seed;
    }
    if (!o.variant.empty()) {
        try {
            c.variant = ddcf::parse_variant(o.variant);
        } catch (const ddcf::ConfigError& e) {
            throw UsageError(e.what());
        }
    }
    if (o.skip_pretrain) {
        c.skip_pretrain = true;
    }
    c.apply_variant();
    try {
        c.validate();
    } catch (const ddcf::ConfigError& e) {
        throw UsageError(e.what());
    }
    return c;
}

void require_path(const std::string& path, const char* what) {
    if (path.empty()) {
        throw UsageError(std::string("missing ") + what);
    }
    if (!fs::exists(path)) {
        throw UsageError(std::string(what) + " not found: " + path);
    }
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

std::string item_label(const ddcf::SplitDataset& split, ddcf::Index j) {
    return j < split.train.item_ids.size() ? split.train.item_ids[j] : std::to_string(j);
}

ddcf::Index lookup_user(const ddcf::SplitDataset& split, const std::string& id) {
    auto u = split.train.find_user(id);
    if (!u) {
        throw ddcf::ParameterError("unknown user '" + id + "'");
    }
    return *u;
}

/// Loads a checkpoint and checks it against the prepared dataset.
struct Loaded {
    ddcf::SplitDataset split;
    ddcf::Checkpoint ck;
    std::vector<ddcf::SparseRow> intent;
};

Loaded load_model(const Options& o) {
    require_path(o.data, "prepared dataset (--data)");
    require_path(o.checkpoint, "checkpoint (--checkpoint)");
    Loaded l;
    l.split = ddcf::load_split(o.data);
    l.ck = ddcf::load_checkpoint(o.checkpoint);
    if (l.ck.model.num_items() != l.split.train.num_items || l.ck.num_users != l.split.train.num_users) {
        throw ddcf::CheckpointError("checkpoint was trained on " + std::to_string(l.ck.num_users) + " users x "
                                    + std::to_string(l.ck.model.num_items()) + " items, dataset has "
                                    + std::to_string(l.split.train.num_users) + " x "
                                    + std::to_string(l.split.train.num_items));
    }
    l.intent = ddcf::intent_rows(l.split.train, l.ck.config);
    return l;
}

json ranked_json(const ddcf::SplitDataset& split, const ddcf::RankedList& r) {
    json items = json::array();
    for (std::size_t i = 0; i < r.items.size(); i++) {
        items.push_back({{"item", item_label(split, r.items[i])}, {"score", r.scores[i]}});
    }
    return items;
}

void print_ranked(const ddcf::SplitDataset& split, const ddcf::RankedList& r) {
    for (std::size_t i = 0; i < r.items.size(); i++) {
        std::printf("%4zu  %-10s %.6f\n", i + 1, item_label(split, r.items[i]).c_str(), r.scores[i]);
    }
}

void provenance(const ddcf::TrainConfig& c) {
    std::printf("seed=%llu config=%s\n", static_cast<unsigned long long>(c.seed), ddcf::config_hash(c).c_str());
}

int cmd_prepare(const Options& o) {
    require_path(o.ratings, "ratings file (--ratings)");
    if (o.out.empty()) {
        throw UsageError("missing output directory (--out)");
    }
    ddcf::LoadOptions lo;
    lo.delimiter = o.delimiter;
    lo.skip_header = o.skip_header;
    ddcf::SplitDataset s = ddcf::prepare_dataset(o.ratings, lo, o.min_interactions, o.seed.value_or(0));
    ddcf::save_split(o.out, s, fs::path(o.ratings).filename().string());
    std::string manifest = ddcf::split_manifest(s, fs::path(o.ratings).filename().string());
    if (o.json) {
        print_json({{"out", o.out},
                    {"seed", s.seed},
                    {"users", s.train.num_users},
                    {"items", s.train.num_items},
                    {"train_entries", s.train.nnz()},
                    {"validation_entries", s.validation.nnz()},
                    {"test_entries", s.test.nnz()},
                    {"min_interactions", s.min_interactions}});
    } else {
        std::cout << manifest;
    }
    return 0;
}

int cmd_train(const Options& o, const ddcf::TrainConfig& config) {
    require_path(o.data, "prepared dataset (--data)");
    if (o.out.empty()) {
        throw UsageError("missing output directory (--out)");
    }
    ddcf::SplitDataset split = ddcf::load_split(o.data);
    auto start = std::chrono::steady_clock::now();
    std::optional<ddcf::Checkpoint> ck;
    if (!o.resume.empty()) {
        require_path(o.resume, "resume checkpoint (--resume)");
        ck = ddcf::load_checkpoint(o.resume);
    }
    auto report = [&](const ddcf::EpochRecord& r) {
        if (o.json) {
            return;
        }
        std::size_t u = r.loss.users;
        std::printf("%-8s epoch %3zu  L1 %.4f  L2 %.4f  L3 %.4f  L4 %.4f", ddcf::to_string(r.stage).c_str(), r.epoch,
                    ddcf::per_user(r.loss.intent, u), ddcf::per_user(r.loss.item_kl, u),
                    ddcf::per_user(r.loss.preference, u), ddcf::per_user(r.loss.contrastive, u));
        if (r.validation) {
            std::printf("  val R@%zu %.4f", config.validation_cutoff, *r.validation);
        }
        std::printf("\n");
        std::fflush(stdout);
    };
    auto finish = [&](ddcf::Trainer& trainer) {
        if (config.skip_pretrain && !o.json) {
            std::printf("warning: pre-training skipped; the model may converge prematurely to a local optimum\n");
        }
        trainer.run(report);
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        fs::create_directories(o.out);
        fs::path ck_path = fs::path(o.out) / "checkpoint.ddcf";
        ddcf::save_checkpoint(ck_path, trainer);
        std::ofstream(fs::path(o.out) / "run_manifest.txt") << ddcf::run_manifest(trainer, wall);
        const auto& st = trainer.state();
        if (o.json) {
            print_json({{"checkpoint", ck_path.string()},
                        {"seed", trainer.config().seed},
                        {"config_hash", ddcf::config_hash(trainer.config())},
                        {"variant", ddcf::to_string(trainer.config().variant)},
                        {"best_epoch", st.best_epoch},
                        {"best_validation_recall", st.best_validation},
                        {"steps", st.global_step},
                        {"skip_pretrain_warning", trainer.config().skip_pretrain},
                        {"wall_seconds", wall}});
        } else {
            std::printf("checkpoint %s\nbest epoch %zu  val R@%zu %.4f  steps %llu  %.1fs\n", ck_path.c_str(),
                        st.best_epoch, trainer.config().validation_cutoff, st.best_validation,
                        static_cast<unsigned long long>(st.global_step), wall);
            provenance(trainer.config());
        }
    };
    if (ck) {
        ddcf::Trainer trainer = ddcf::resume(*ck, split);
        finish(trainer);
    } else {
        ddcf::Trainer trainer(config, split);
        finish(trainer);
    }
    return 0;
}

int cmd_eval(const Options& o) {
    Loaded l = load_model(o);
    ddcf::Scorer scorer(l.ck.model, l.split.train.rows, l.intent);
    ddcf::MetricReport r = ddcf::evaluate(scorer, l.split, {5, 10}, ddcf::EvalTarget::test, o.threads);
    r.seed = l.ck.config.seed;
    r.config_hash = ddcf::config_hash(l.ck.config);
    if (o.json) {
        print_json(ddcf::report_json(r));
    } else {
        std::cout << ddcf::format_report(r);
    }
    return 0;
}

int cmd_channels(const Options& o) {
    Loaded l = load_model(o);
    ddcf::Scorer scorer(l.ck.model, l.split.train.rows, l.intent);
    auto groups = ddcf::channel_top_items(scorer.beta(), o.top);
    json out;
    out["seed"] = l.ck.config.seed;
    out["config_hash"] = ddcf::config_hash(l.ck.config);
    if (!o.user.empty()) {
        ddcf::Index u = lookup_user(l.split, o.user);
        ddcf::ChannelSelection sel = ddcf::user_channels(scorer, u, 3);
        json chans = json::array();
        for (std::size_t i = 0; i < sel.channels.size(); i++) {
            std::size_t c = sel.channels[i];
            json items = json::array();
            for (ddcf::Index j : groups[c]) {
                items.push_back(item_label(l.split, j));
            }
            chans.push_back({{"channel", c}, {"weight", sel.weights[i]}, {"items", items}});
            if (!o.json) {
                std::printf("channel %zu  weight %.4f\n ", c, sel.weights[i]);
                for (ddcf::Index j : groups[c]) {
                    std::printf(" %s", item_label(l.split, j).c_str());
                }
                std::printf("\n");
            }
        }
        out["user"] = o.user;
        out["channels"] = chans;
    } else {
        json chans = json::array();
        for (std::size_t c = 0; c < groups.size(); c++) {
            json items = json::array();
            if (!o.json) {
                std::printf("channel %zu:", c);
            }
            for (ddcf::Index j : groups[c]) {
                items.push_back(item_label(l.split, j));
                if (!o.json) {
                    std::printf(" %s", item_label(l.split, j).c_str());
                }
            }
            if (!o.json) {
                std::printf("\n");
            }
            chans.push_back({{"channel", c}, {"items", items}});
        }
        out["channels"] = chans;
    }
    if (o.json) {
        print_json(out);
    } else {
        provenance(l.ck.config);
    }
    return 0;
}

int cmd_recommend(const Options& o) {
    Loaded l = load_model(o);
    ddcf::Scorer scorer(l.ck.model, l.split.train.rows, l.intent);
    ddcf::RankedList r;
    std::string mode;
    if (!o.similar_to.empty()) {
        auto j = l.split.train.find_item(o.similar_to);
        if (!j) {
            throw ddcf::ParameterError("unknown item '" + o.similar_to + "'");
        }
        ddcf::Similarity m = o.similarity == "kl" ? ddcf::Similarity::symmetric_kl : ddcf::Similarity::cosine;
        r = ddcf::similar_items(scorer.phi(), *j, o.top, m);
        mode = "similar-to " + o.similar_to;
    } else {
        if (o.user.empty()) {
            throw UsageError("recommend needs --user or --similar-to");
        }
        ddcf::Index u = lookup_user(l.split, o.user);
        if (!o.intent.empty()) {
            r = ddcf::recommend_with_intent(scorer, u, ddcf::parse_intent_override(o.intent), o.top);
            mode = "intent " + o.intent;
        } else if (o.channel) {
            r = ddcf::recommend_in_channel(scorer, u, *o.channel, o.top);
            mode = "channel " + std::to_string(*o.channel);
        } else {
            r = ddcf::recommend_blended(scorer, u, o.top);
            mode = "blended";
        }
    }
    if (o.json) {
        print_json({{"mode", mode},
                    {"user", o.user},
                    {"items", ranked_json(l.split, r)},
                    {"seed", l.ck.config.seed},
                    {"config_hash", ddcf::config_hash(l.ck.config)}});
    } else {
        std::printf("%s\n", mode.c_str());
        print_ranked(l.split, r);
        provenance(l.ck.config);
    }
    return 0;
}

int cmd_cooccur(const Options& o) {
    Loaded l = load_model(o);
    require_path(o.genres, "genre file (--genres)");
    ddcf::GenreTable genres = ddcf::load_genres(o.genres, l.split.train);
    ddcf::Scorer scorer(l.ck.model, l.split.train.rows, l.intent);
    ddcf::CooccurrenceReport r =
        ddcf::cooccurrence_rate(scorer.beta(), genres, o.top_t, o.seed.value_or(l.ck.config.seed), o.shuffles);
    if (o.json) {
        print_json({{"rate", r.rate},
                    {"baseline", r.baseline},
                    {"per_channel", r.per_channel},
                    {"pairs", r.pairs},
                    {"top_t", r.top_t},
                    {"seed", l.ck.config.seed},
                    {"config_hash", ddcf::config_hash(l.ck.config)}});
    } else {
        std::printf("co-occurrence  ddcf %.4f  shuffled %.4f  (top %zu per channel, %zu pairs)\n", r.rate, r.baseline,
                    r.top_t, r.pairs);
        for (std::size_t c = 0; c < r.per_channel.size(); c++) {
            std::printf("  channel %zu  %.4f\n", c, r.per_channel[c]);
        }
        provenance(l.ck.config);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Disentangled collaborative filtering"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* cmd) {
        cmd->add_option("--config", o.config_path, "JSON config file (flags win)");
        cmd->add_option("--seed", o.seed, "Random seed");
        cmd->add_option("--out", o.out, "Output directory");
        cmd->add_option("--threads", o.threads, "Worker threads for evaluation")->check(CLI::PositiveNumber);
        cmd->add_flag("--json", o.json, "Machine-readable output");
    };
    auto model_inputs = [&](CLI::App* cmd) {
        cmd->add_option("--data", o.data, "Prepared dataset directory");
        cmd->add_option("--checkpoint", o.checkpoint, "Trained checkpoint");
    };

    auto* prepare = app.add_subcommand("prepare", "Filter and split a ratings file");
    common(prepare);
    prepare->add_option("--ratings", o.ratings, "user,item,rating[,timestamp] file");
    prepare->add_option("--delimiter", o.delimiter, "Field separator (auto-detected when empty)");
    prepare->add_flag("--skip-header", o.skip_header, "Ignore the first line");
    prepare->add_option("--min-interactions", o.min_interactions, "Drop users with fewer ratings");

    auto* train = app.add_subcommand("train", "Pre-train and train a model");
    common(train);
    train->add_option("--data", o.data, "Prepared dataset directory");
    train->add_option("--variant", o.variant, "ddcf, ddcf-n, ddcf-s or k1-baseline");
    train->add_flag("--skip-pretrain", o.skip_pretrain, "Skip intent pre-training");
    train->add_option("--resume", o.resume, "Continue from a checkpoint");

    auto* eval = app.add_subcommand("eval", "Test-set P/R/MAP/NDCG at 5 and 10");
    common(eval);
    model_inputs(eval);

    auto* channels = app.add_subcommand("channels", "Top items per channel, or a user's top channels");
    common(channels);
    model_inputs(channels);
    channels->add_option("--user", o.user, "External user id");
    channels->add_option("--top", o.top, "Items per channel")->check(CLI::PositiveNumber);

    auto* recommend = app.add_subcommand("recommend", "Rank items for a user or find similar items");
    common(recommend);
    model_inputs(recommend);
    recommend->add_option("--user", o.user, "External user id");
    recommend->add_option("--intent", o.intent, "Channel weights, e.g. 3:0.5,7:0.5");
    recommend->add_option("--channel", o.channel, "Rank within one channel");
    recommend->add_option("--similar-to", o.similar_to, "External item id");
    recommend->add_option("--similarity", o.similarity, "cosine or kl")->check(CLI::IsMember({"cosine", "kl"}));
    recommend->add_option("--top", o.top, "List length")->check(CLI::PositiveNumber);

    auto* cooccur = app.add_subcommand("cooccur", "Genre co-occurrence of channel top items");
    common(cooccur);
    model_inputs(cooccur);
    cooccur->add_option("--genres", o.genres, "item_id|genre,genre file");
    cooccur->add_option("--top-t", o.top_t, "Items per channel");
    cooccur->add_option("--shuffles", o.shuffles, "Random baseline draws");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    CLI::App* cmd = app.get_subcommands().front();
    try {
        json file = read_config_file(o.config_path);
        merge_file_keys(o, file, *cmd);
        ddcf::TrainConfig config = build_config(o, file);
        if (cmd == prepare) {
            return cmd_prepare(o);
        }
        if (cmd == train) {
            return cmd_train(o, config);
        }
        if (cmd == eval) {
            return cmd_eval(o);
        }
        if (cmd == channels) {
            return cmd_channels(o);
        }
        if (cmd == recommend) {
            return cmd_recommend(o);
        }
        return cmd_cooccur(o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ddcf::ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
