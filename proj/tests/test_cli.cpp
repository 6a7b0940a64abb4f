#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gridedit/cli.hpp"

using namespace gridedit;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() / ("gridedit_test_cli_" +
                                             std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    std::string path(const std::string& name) const { return (root_ / name).string(); }

    std::string dataset(int count = 12) {
        const auto r = invoke({"generate-data", "--out", path("data"), "--count", std::to_string(count), "--seed", "5",
                            "--val-fraction", "0.5"});
        EXPECT_EQ(r.code, 0) << r.err;
        return path("data");
    }

    Result train(const std::string& out, std::vector<std::string> extra = {}) {
        std::vector<std::string> a{"train", "--out", out, "--preset", "tiny", "--steps", "4", "--batch-size", "2",
                                   "--set", "train.log_every=2"};
        a.insert(a.end(), extra.begin(), extra.end());
        return invoke(a);
    }

    fs::path root_;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(invoke({}).code, 1);
    EXPECT_EQ(invoke({"paint"}).code, 1);
    EXPECT_EQ(invoke({"generate-data"}).code, 1);
    EXPECT_EQ(invoke({"train", "--out", path("t"), "--steps", "many"}).code, 1);
    const auto help = invoke({"--help"});
    EXPECT_EQ(help.code, 0);
    EXPECT_NE(help.out.find("generate-data"), std::string::npos);
}

TEST_F(Cli, ValidationAndConfigErrors) {
    EXPECT_EQ(invoke({"generate-data", "--out", path("d"), "--mix", "invert_color=0.4"}).code, 2);
    EXPECT_EQ(invoke({"generate-data", "--out", path("d"), "--n-examples", "0"}).code, 2);
    EXPECT_EQ(train(path("t"), {"--set", "train.nonsense=1"}).code, 2);
    EXPECT_EQ(invoke({"train", "--out", path("t"), "--preset", "huge"}).code, 2);
    EXPECT_EQ(train(path("t"), {"--cond-dropout", "2"}).code, 2);
    EXPECT_EQ(invoke({"sample", "--checkpoint", "oracle", "--prompt", path("nowhere"), "--out", path("s")}).code, 2);
}

TEST_F(Cli, IoAndVersionErrors) {
    EXPECT_EQ(invoke({"evaluate", "--checkpoint", "oracle", "--data", path("missing"), "--out", path("e")}).code, 3);
    std::ofstream(path("bogus.ckpt")) << "not a checkpoint at all";
    const auto data = dataset(4);
    const auto r    = invoke({"evaluate", "--checkpoint", path("bogus.ckpt"), "--data", data, "--out", path("e")});
    EXPECT_EQ(r.code, 5) << r.err;
    EXPECT_EQ(invoke({"evaluate", "--checkpoint", path("absent.ckpt"), "--data", data, "--out", path("e")}).code, 3);
}

TEST_F(Cli, NumericalFailureWritesDiagnostic) {
    const auto r = train(path("t"), {"--lr", "1e30", "--set", "train.grad_clip=0", "--set", "train.warmup_steps=0"});
    EXPECT_EQ(r.code, 4) << r.err;
    EXPECT_TRUE(fs::exists(path("t/diagnostic.json")));
}

TEST_F(Cli, GenerateIsDeterministic) {
    ASSERT_EQ(invoke({"generate-data", "--out", path("a"), "--count", "10", "--seed", "3"}).code, 0);
    ASSERT_EQ(invoke({"generate-data", "--out", path("b"), "--count", "10", "--seed", "3"}).code, 0);
    EXPECT_EQ(dataset_hash(path("a")), dataset_hash(path("b")));
    EXPECT_TRUE(fs::exists(path("a/run_manifest.json")));
}

TEST_F(Cli, TrainWritesArtifactsAndReruns) {
    const auto r = train(path("t"), {"--checkpoint-every", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"checkpoint.ckpt", "checkpoint_2.ckpt", "train_log.jsonl", "resolved_config.txt",
                          "run_manifest.json"})
        EXPECT_TRUE(fs::exists(path("t/") + f)) << f;
    std::istringstream log(slurp(path("t/train_log.jsonl")));
    std::string line;
    int records = 0;
    while (std::getline(log, line)) {
        const json j = json::parse(line);
        EXPECT_EQ(j.at("step").get<int>(), 2 * ++records);
        EXPECT_TRUE(j.contains("grad_norm"));
    }
    EXPECT_EQ(records, 2);

    const auto rr = invoke({"rerun", "--manifest", path("t/run_manifest.json"), "--out", path("t2")});
    EXPECT_EQ(rr.code, 0) << rr.err;
    EXPECT_EQ(slurp(path("t/checkpoint.ckpt")), slurp(path("t2/checkpoint.ckpt")));

    json m = json::parse(slurp(path("t/run_manifest.json")));
    m["artifacts"]["checkpoint.ckpt"] = "0000000000000000";
    std::ofstream(path("t/run_manifest.json")) << m.dump();
    EXPECT_EQ(invoke({"rerun", "--manifest", path("t/run_manifest.json"), "--out", path("t3")}).code, 2);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
    ASSERT_EQ(train(path("full"), {"--checkpoint-every", "2"}).code, 0);
    const auto r = invoke({"train", "--out", path("resumed"), "--resume", path("full/checkpoint_2.ckpt")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(path("full/checkpoint.ckpt")), slurp(path("resumed/checkpoint.ckpt")));
    EXPECT_EQ(invoke({"train", "--out", path("x"), "--resume", path("full/checkpoint_2.ckpt"), "--lr", "0.1"}).code, 2);
}

TEST_F(Cli, EvaluateAndSampleWithReferenceModels) {
    const auto data = dataset();
    const auto e    = invoke({"evaluate", "--checkpoint", "oracle", "--data", data, "--out", path("e")});
    ASSERT_EQ(e.code, 0) << e.err;
    const json rep = json::parse(slurp(path("e/report.json")));
    EXPECT_EQ(rep.at("format"), "gridedit-report");
    EXPECT_TRUE(fs::exists(path("e/report.txt")));

    const auto m   = load_manifest(data);
    const auto dir = (fs::path(data) / m.records[0].dir).string();
    const auto s   = invoke({"sample", "--checkpoint", "oracle", "--prompt", dir, "--out", path("s")});
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_EQ(read_png(path("s/output.png")).pixels, read_png(dir + "/target.png").pixels);
    for (const char* f : {"input_grid.png", "contact_sheet.png", "run_manifest.json"})
        EXPECT_TRUE(fs::exists(path("s/") + f)) << f;
}

TEST_F(Cli, SampleFromTrainedCheckpointIsDeterministic) {
    ASSERT_EQ(train(path("t")).code, 0);
    const auto data = dataset(2);
    const auto dir  = (fs::path(data) / load_manifest(data).records[0].dir).string();
    for (const char* o : {"s1", "s2"})
        ASSERT_EQ(invoke({"sample", "--checkpoint", path("t/checkpoint.ckpt"), "--prompt", dir, "--out", path(o),
                       "--steps", "5", "--seed", "9"})
                      .code,
                  0);
    EXPECT_EQ(slurp(path("s1/output.png")), slurp(path("s2/output.png")));
    EXPECT_EQ(invoke({"rerun", "--manifest", path("s1/run_manifest.json"), "--out", path("s3")}).code, 0);
}
