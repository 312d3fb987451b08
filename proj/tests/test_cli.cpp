#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "taxalign/text.hpp"

namespace fs = std::filesystem;
using taxalign::text::read_file;
using taxalign::text::write_file;

namespace {

const fs::path fixtures{TAXALIGN_FIXTURE_DIR};

struct Outcome {
    int code = -1;
    std::string output;
};

// Runs the CLI with stdout and stderr captured into one file.
Outcome run(const std::string& args, const fs::path& scratch) {
    const auto log = scratch / "cli.log";
    const std::string cmd = std::string("\"") + TAXALIGN_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.output = fs::exists(log) ? read_file(log.string()) : "";
    return o;
}

std::string fx(const std::string& rel) { return "\"" + (fixtures / rel).string() + "\""; }

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("taxalign_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string out(const std::string& name) const { return "\"" + (dir / name).string() + "\""; }

    std::string build_args(const std::string& out_name) const {
        return "build-bench --taxonomy " + fx("tiny/taxonomy.tsv") + " --image-embeds " + fx("tiny/image_embeds.txt") +
               " --label-embeds " + fx("tiny/label_embeds.txt") + " --images " + fx("tiny/images.tsv") +
               " --ratio 1:2:4:8 --seed 3 --out " + out(out_name);
    }

    fs::path dir;
};

}  // namespace

TEST_F(Cli, BuildBenchRealisesRatioAndRebuildsByteIdentically) {
    auto a = run(build_args("a"), dir);
    ASSERT_EQ(a.code, 0) << a.output;
    ASSERT_EQ(run(build_args("b"), dir).code, 0);
    const auto items = read_file((dir / "a/items.jsonl").string());
    EXPECT_EQ(items, read_file((dir / "b/items.jsonl").string()));
    EXPECT_EQ(std::count(items.begin(), items.end(), '\n'), 15);
    auto m = nlohmann::json::parse(read_file((dir / "a/manifest.json").string()));
    EXPECT_EQ(m["items"], 15);
    EXPECT_EQ(m["counts_per_rank"]["kingdom"], 1);
    EXPECT_EQ(m["counts_per_rank"]["phylum"], 2);
    EXPECT_EQ(m["counts_per_rank"]["class"], 4);
    EXPECT_EQ(m["counts_per_rank"]["order"], 8);
}

TEST_F(Cli, BuildBenchMissingLabelIsValidationError) {
    auto labels = read_file((fixtures / "tiny/label_embeds.txt").string());
    std::string trimmed;
    for (const auto& line : taxalign::text::lines(labels)) {
        if (line.rfind("Fucales\t", 0) != 0 && !line.empty()) trimmed += line + "\n";
    }
    ASSERT_NE(trimmed.size(), labels.size());
    write_file((dir / "labels.txt").string(), trimmed);
    auto r = run("build-bench --taxonomy " + fx("tiny/taxonomy.tsv") + " --image-embeds " + fx("tiny/image_embeds.txt") +
                     " --label-embeds " + out("labels.txt") + " --images " + fx("tiny/images.tsv") + " --out " + out("o"),
                 dir);
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(r.output.find("Fucales"), std::string::npos) << r.output;
}

TEST_F(Cli, EvalWorkedRecord) {
    auto r = run("eval --preds " + fx("metrics/worked_record.jsonl") + " --taxonomy " + fx("metrics/worked_taxonomy.tsv") +
                     " --table --out " + out("e"),
                 dir);
    ASSERT_EQ(r.code, 0) << r.output;
    auto j = nlohmann::json::parse(read_file((dir / "e/report.json").string()));
    EXPECT_NEAR(j["hca"].get<double>(), 0.0, 1e-12);
    EXPECT_NEAR(j["por"].get<double>(), 2.0 / 3.0, 1e-9);
    EXPECT_NEAR(j["s_por"].get<double>(), 1.0 / 3.0, 1e-9);
    EXPECT_NEAR(j["tor"].get<double>(), 0.4, 1e-9);
    EXPECT_EQ(read_file((dir / "e/report.txt").string()),
              "HCA | Acc_leaf | POR | S-POR | TOR\n0.00 | 0.00 | 66.67 | 33.33 | 40.00\n");
}

TEST_F(Cli, EvalDepthOneWithTorNamesTheDivisor) {
    write_file((dir / "p.jsonl").string(), "{\"sample_id\":\"x\",\"predicted\":[\"A\"],\"truth\":[\"A\"]}\n");
    auto r = run("eval --preds " + out("p.jsonl") + " --taxonomy " + fx("metrics/depth1_taxonomy.tsv") + " --out " +
                     out("e"),
                 dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("L-1"), std::string::npos) << r.output;
    EXPECT_EQ(run("eval --preds " + out("p.jsonl") + " --taxonomy " + fx("metrics/depth1_taxonomy.tsv") +
                      " --no-tor --out " + out("e2"),
                  dir)
                  .code,
              0);
}

TEST_F(Cli, GradcheckPassesAndDetectsFaults) {
    auto ok = run("gradcheck --seeds 3 --out " + out("g"), dir);
    EXPECT_EQ(ok.code, 0) << ok.output;
    auto j = nlohmann::json::parse(read_file((dir / "g/gradcheck.json").string()));
    EXPECT_EQ(j.size(), 6u);
    for (const auto& row : j) EXPECT_TRUE(row["passed"].get<bool>()) << row.dump();
    auto fault = run("gradcheck --seeds 2 --inject-fault mlp_backward", dir);
    EXPECT_EQ(fault.code, 1) << fault.output;
    EXPECT_NE(fault.output.find("mlp_backward"), std::string::npos);
    EXPECT_EQ(run("gradcheck --seeds 2 --tol 1e-12", dir).code, 1);
    EXPECT_EQ(run("gradcheck --inject-fault nope", dir).code, 2);
}

TEST_F(Cli, TrainToyZeroStepsAndRftOnly) {
    auto r = run("train-toy --steps 0 --seed 4 --out " + out("t0"), dir);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir / "t0/eval_report.json"));
    EXPECT_TRUE(fs::exists(dir / "t0/config.toml"));

    r = run("train-toy --steps 3 --align-weight 0 --seed 4 --out " + out("t1"), dir);
    ASSERT_EQ(r.code, 0) << r.output;
    auto rows = taxalign::text::lines(read_file((dir / "t1/losses.csv").string()));
    ASSERT_GE(rows.size(), 4u);
    EXPECT_EQ(rows[0].rfind("step,loss_alignment", 0), 0u);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].empty()) continue;
        auto cols = taxalign::text::split(rows[i], ',');
        EXPECT_EQ(std::stod(cols[1]), 0.0) << rows[i];
    }
}

TEST_F(Cli, ProbeOnBlobsIsDeterministic) {
    const std::string args = "probe --features " + fx("probe/blobs_features.txt") + " --labels " +
                             fx("probe/blobs_labels.tsv") + " --epochs 50 --lr 1e-2 --batch-size 32 --seed 2 --out ";
    auto a = run(args + out("a"), dir);
    ASSERT_EQ(a.code, 0) << a.output;
    ASSERT_EQ(run(args + out("b"), dir).code, 0);
    const auto ja = read_file((dir / "a/probe_report.json").string());
    EXPECT_EQ(ja, read_file((dir / "b/probe_report.json").string()));
    auto j = nlohmann::json::parse(ja);
    EXPECT_EQ(j["accuracy"].get<double>(), 1.0);
    EXPECT_EQ(j["regularization"], "none");
    EXPECT_LT(j["final_loss"].get<double>(), j["initial_loss"].get<double>());
}

TEST_F(Cli, MissingInputIsValidationError) {
    auto r = run("eval --preds " + out("absent.jsonl") + " --taxonomy " + fx("tiny/taxonomy.tsv") + " --out " + out("e"),
                 dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("absent.jsonl"), std::string::npos) << r.output;
}

TEST_F(Cli, HelpOnEverySubcommand) {
    for (const char* sub : {"build-bench", "eval", "train-toy", "gradcheck", "probe", "gen-fixtures"}) {
        auto r = run(std::string(sub) + " --help", dir);
        EXPECT_EQ(r.code, 0) << sub;
        EXPECT_NE(r.output.find("--out"), std::string::npos) << sub;
    }
    EXPECT_EQ(run("--help", dir).code, 0);
}
