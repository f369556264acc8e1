#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    static fs::path dir() {
        static const fs::path d = fs::temp_directory_path() / ("ddcf_test_cli_" + std::to_string(::getpid()));
        return d;
    }

    static Result run(const std::string& args) {
        fs::path out = dir() / "stdout.txt", err = dir() / "stderr.txt";
        std::string cmd = std::string(DDCF_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
        int status = std::system(cmd.c_str());
        return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
    }

    static void SetUpTestSuite() {
        fs::remove_all(dir());
        fs::create_directories(dir());
        ddcf::testing::PlantedData d = ddcf::testing::planted_channels(80, 40, 4, 12, 2);
        std::ofstream ratings(dir() / "ratings.csv");
        std::ofstream genres(dir() / "genres.txt");
        for (std::size_t u = 0; u < d.ratings.num_users; u++) {
            const auto& row = d.ratings.rows[u];
            for (std::size_t e = 0; e < row.nnz(); e++) {
                ratings << "u" << u << ",i" << row.indices[e] << "," << row.values[e] << "\n";
            }
        }
        for (std::size_t j = 0; j < 40; j++) {
            genres << "i" << j << "|g" << d.group_of_item[j] << "\n";
        }
        std::ofstream(dir() / "small.json") << R"({"channels": 3, "dim": 2, "top_l": 2, "hidden": 8,
            "batch_size": 16, "pretrain_epochs": 1, "unified_epochs": 2, "kappa": 5, "tau_anneal_epochs": 2})";
    }

    static void TearDownTestSuite() { fs::remove_all(dir()); }

    static std::string data() { return (dir() / "split").string(); }
    static std::string model_dir() { return (dir() / "model").string(); }
    static std::string model_args() {
        return "--data " + data() + " --checkpoint " + (dir() / "model" / "checkpoint.ddcf").string();
    }

    static void ensure_trained() {
        if (fs::exists(dir() / "model" / "checkpoint.ddcf")) {
            return;
        }
        ASSERT_EQ(run("prepare --ratings " + (dir() / "ratings.csv").string() + " --out " + data()).code, 0);
        Result r = run("train --config " + (dir() / "small.json").string() + " --data " + data() + " --out "
                       + model_dir());
        ASSERT_EQ(r.code, 0) << r.err;
    }
};

} // namespace

TEST_F(Cli, PrepareWritesManifestAndIsDeterministic) {
    std::string ratings = (dir() / "ratings.csv").string();
    Result a = run("prepare --ratings " + ratings + " --out " + (dir() / "p1").string() + " --seed 4");
    Result b = run("prepare --ratings " + ratings + " --out " + (dir() / "p2").string() + " --seed 4");
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_NE(a.out.find("min_interactions=10"), std::string::npos);
    EXPECT_NE(a.out.find("fractions=0.6,0.1,0.3"), std::string::npos);
    EXPECT_EQ(slurp(dir() / "p1" / "manifest.txt"), slurp(dir() / "p2" / "manifest.txt"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
    Result missing = run("prepare --ratings /nonexistent.csv --out " + (dir() / "x").string());
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.err.find("not found"), std::string::npos);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("train --bogus-flag").code, 2);
    std::ofstream(dir() / "bad.json") << R"({"channels": 3, "not_a_key": 1})";
    Result bad = run("train --config " + (dir() / "bad.json").string() + " --data " + data());
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.err.find("not_a_key"), std::string::npos) << bad.err;
    std::ofstream(dir() / "invalid.json") << R"({"channels": 2, "top_l": 3})";
    EXPECT_EQ(run("train --config " + (dir() / "invalid.json").string() + " --data " + data()).code, 2);
    EXPECT_EQ(run("train --variant ddcf-x --data " + data()).code, 2);
}

TEST_F(Cli, TrainWritesCheckpointAndManifest) {
    ensure_trained();
    std::string manifest = slurp(dir() / "model" / "run_manifest.txt");
    EXPECT_NE(manifest.find("format=ddcf-run-v1"), std::string::npos);
    EXPECT_NE(manifest.find("variant=ddcf"), std::string::npos);
    EXPECT_EQ(manifest.find("warning"), std::string::npos);
    Result skip = run("train --config " + (dir() / "small.json").string() + " --data " + data() + " --out "
                      + (dir() / "skip").string() + " --skip-pretrain --variant ddcf-s --json");
    ASSERT_EQ(skip.code, 0) << skip.err;
    json j = json::parse(skip.out);
    EXPECT_TRUE(j["skip_pretrain_warning"].get<bool>());
    std::string sm = slurp(dir() / "skip" / "run_manifest.txt");
    EXPECT_NE(sm.find("warning: intent pre-training was skipped"), std::string::npos);
    EXPECT_NE(sm.find("\"lambda4\":0.0"), std::string::npos) << sm;
}

TEST_F(Cli, EvalReportsMetricsWithProvenance) {
    ensure_trained();
    Result text = run("eval " + model_args());
    ASSERT_EQ(text.code, 0) << text.err;
    for (const char* s : {"@5", "@10", "MAP", "NDCG", "seed=0", "config="}) {
        EXPECT_NE(text.out.find(s), std::string::npos) << s;
    }
    Result js = run("eval --json " + model_args());
    json j = json::parse(js.out);
    for (const char* k : {"P@5", "R@5", "MAP@10", "NDCG@10", "config_hash", "seed"}) {
        EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_EQ(run("eval --json --threads 3 " + model_args()).out, js.out);
}

TEST_F(Cli, ChannelsForUserShowsThreeChannels) {
    ensure_trained();
    Result r = run("channels --json --user u5 --top 3 " + model_args());
    ASSERT_EQ(r.code, 0) << r.err;
    json j = json::parse(r.out);
    ASSERT_EQ(j["channels"].size(), 3u);
    double total = 0.0;
    for (const auto& c : j["channels"]) {
        EXPECT_EQ(c["items"].size(), 3u);
        total += c["weight"].get<double>();
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    Result all = run("channels --top 4 " + model_args());
    EXPECT_NE(all.out.find("channel 2:"), std::string::npos);
    EXPECT_EQ(run("channels --user nobody " + model_args()).code, 2);
}

TEST_F(Cli, RecommendIntentNormalisation) {
    ensure_trained();
    Result a = run("recommend --json --user u3 --intent 0:0.5,2:0.5 " + model_args());
    Result b = run("recommend --json --user u3 --intent 0:5,2:5 " + model_args());
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(json::parse(a.out)["items"], json::parse(b.out)["items"]);
    Result one = run("recommend --json --user u3 --intent 1:1 " + model_args());
    Result chan = run("recommend --json --user u3 --channel 1 " + model_args());
    EXPECT_EQ(json::parse(one.out)["items"], json::parse(chan.out)["items"]);
    Result blended = run("recommend --user u3 --top 4 " + model_args());
    EXPECT_NE(blended.out.find("blended"), std::string::npos);
    Result similar = run("recommend --json --similar-to i7 --top 5 --similarity kl " + model_args());
    ASSERT_EQ(similar.code, 0) << similar.err;
    EXPECT_EQ(json::parse(similar.out)["items"].size(), 5u);
    EXPECT_EQ(run("recommend --user u3 --intent 0:0 " + model_args()).code, 2);
    EXPECT_EQ(run("recommend --user u3 --channel 9 " + model_args()).code, 2);
    EXPECT_EQ(run("recommend --user u3 --intent 0=1 " + model_args()).code, 2);
}

TEST_F(Cli, CooccurAndCheckpointMismatch) {
    ensure_trained();
    Result r = run("cooccur --json --top-t 5 --shuffles 10 --genres " + (dir() / "genres.txt").string() + " "
                   + model_args());
    ASSERT_EQ(r.code, 0) << r.err;
    json j = json::parse(r.out);
    EXPECT_EQ(j["per_channel"].size(), 3u);
    EXPECT_GE(j["baseline"].get<double>(), 0.0);
    EXPECT_EQ(run("cooccur --top-t 1 --genres " + (dir() / "genres.txt").string() + " " + model_args()).code, 2);

    // A dataset of a different size cannot be paired with the checkpoint.
    std::ofstream small(dir() / "other.csv");
    for (int u = 0; u < 12; u++) {
        for (int j = 0; j < 10; j++) {
            small << "u" << u << ",i" << j << "," << 1 + (u + j) % 5 << "\n";
        }
    }
    small.close();
    ASSERT_EQ(run("prepare --ratings " + (dir() / "other.csv").string() + " --out " + (dir() / "other").string()).code,
              0);
    Result mismatch = run("eval --data " + (dir() / "other").string() + " --checkpoint "
                          + (dir() / "model" / "checkpoint.ddcf").string());
    EXPECT_EQ(mismatch.code, 1);
    EXPECT_NE(mismatch.err.find("checkpoint"), std::string::npos);
}

TEST_F(Cli, ResumeFromFinalCheckpointIsANoOp) {
    ensure_trained();
    Result r = run("train --json --data " + data() + " --resume " + (dir() / "model" / "checkpoint.ddcf").string()
                   + " --out " + (dir() / "resumed").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(dir() / "resumed" / "checkpoint.ddcf"), slurp(dir() / "model" / "checkpoint.ddcf"));
}
