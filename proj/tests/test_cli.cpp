#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kdcode_cli.hpp"

using namespace kdcode;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;

    std::optional<std::string> field(const std::string& key) const {
        std::istringstream in(out);
        std::string line;
        while (std::getline(in, line))
            if (line.starts_with(key + "\t")) return line.substr(key.size() + 1);
        return std::nullopt;
    }
    double number(const std::string& key) const {
        const auto v = field(key);
        if (!v) throw std::runtime_error("missing field " + key + " in:\n" + out);
        return std::stod(*v);
    }
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const fs::path& p) {
    const auto s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("kdcode_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    // 300 points in 10 tight clusters at a scale where the default lr trains.
    void make_small_set() {
        const auto r = run({"gen-synthetic", "--num-points", "300", "--num-clusters", "10", "--dim", "4",
                            "--center-scale", "2", "--noise-sigma", "0.05", "--seed", "4", "--out", path("emb.txt"),
                            "--labels-out", path("labels.tsv")});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    std::vector<std::string> learn_args(const std::string& tag) const {
        return {"learn-codes", "--input", path("emb.txt"), "--K", "10", "--D", "1", "--allow-collisions",
                "--epochs", "15", "--seed", "3", "--labels", path("labels.tsv"), "--codebook-out",
                path(tag + ".tsv"), "--checkpoint-out", path(tag + ".kdc"), "--report-out", path(tag + ".report")};
    }

    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, GenSyntheticDefaultsAndSizes) {
    auto r = run({"gen-synthetic", "--out", path("big.txt")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.number("N"), 10000);
    EXPECT_EQ(r.number("d"), 10);
    EXPECT_EQ(r.number("clusters"), 100);
    EXPECT_EQ(count_lines(path("big.txt")), 10000u);

    r = run({"gen-synthetic", "--num-points", "10", "--num-clusters", "10", "--out", path("a.txt"), "--labels-out",
             path("a.lab")});
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(count_lines(path("a.txt")), 10u);
    EXPECT_EQ(count_lines(path("a.lab")), 10u);
    run({"gen-synthetic", "--num-points", "10", "--num-clusters", "10", "--out", path("b.txt")});
    EXPECT_EQ(slurp(path("a.txt")), slurp(path("b.txt")));
}

TEST_F(CliTest, EchoesResolvedConfig) {
    const auto r = run({"param-count", "--N", "10", "--d", "4", "--dprime", "3"});
    EXPECT_TRUE(r.out.starts_with("# kdcode param-count\n"));
    EXPECT_NE(r.out.find("# --K 50\n"), std::string::npos);
    EXPECT_NE(r.out.find("# --composer linear\n"), std::string::npos);
}

TEST_F(CliTest, UsageErrors) {
    auto r = run({});
    EXPECT_EQ(r.code, cli::kExitUsage);
    r = run({"learn-codes", "--input", "x", "--bogus", "1"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_TRUE(r.err.starts_with("error\tusage\t"));
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
    r = run({"learn-codes", "--input", "x", "--composer", "gru"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    r = run({"param-count", "--N", "10", "--d", "4"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, LearnCodesRefusesSmallCodeSpace) {
    ASSERT_EQ(run({"gen-synthetic", "--out", path("big.txt")}).code, 0);
    const auto r = run({"learn-codes", "--input", path("big.txt"), "--K", "2", "--D", "3"});
    EXPECT_EQ(r.code, cli::kExitFailure);
    EXPECT_TRUE(r.err.starts_with("error\tlearn-codes\t"));
    EXPECT_NE(r.err.find("K^D >= N"), std::string::npos);
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(CliTest, MissingInputIsOneLineError) {
    const auto r = run({"learn-codes", "--input", path("nope.txt"), "--K", "4", "--D", "4"});
    EXPECT_EQ(r.code, cli::kExitFailure);
    EXPECT_NE(r.err.find("nope.txt"), std::string::npos);
}

TEST_F(CliTest, ZeroEpochLearnKeepsInitialArgmax) {
    make_small_set();
    const auto r = run({"learn-codes", "--input", path("emb.txt"), "--K", "4", "--D", "5", "--epochs", "0", "--seed",
                        "9", "--codebook-out", path("c.tsv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto emb = load_embeddings_text(path("emb.txt"));
    TrainConfig cfg;
    cfg.seed = 9;
    const auto expected = extract_codes(initial_state(emb.vectors, KdSpec(4, 5, 300), cfg).logits);
    const auto got = load_codebook(path("c.tsv"));
    EXPECT_TRUE(std::equal(got.codes().begin(), got.codes().end(), expected.codes().begin()));
}

TEST_F(CliTest, LearnIsDeterministicAndReportsNmi) {
    make_small_set();
    const auto a = run(learn_args("a"));
    ASSERT_EQ(a.code, 0) << a.err;
    const auto b = run(learn_args("b"));
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(slurp(path("a.tsv")), slurp(path("b.tsv")));
    EXPECT_EQ(slurp(path("a.kdc")), slurp(path("b.kdc")));
    EXPECT_EQ(slurp(path("a.report")), slurp(path("b.report")));
    const double v = a.number("nmi");
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    const auto report = RunReport::load(path("a.report"));
    EXPECT_TRUE(report.get("epoch.15.hard_loss").has_value());
    EXPECT_LT(std::stod(*report.get("final_hard_loss")), std::stod(*report.get("initial_hard_loss")));
}

TEST_F(CliTest, RetrainOrdering) {
    make_small_set();
    ASSERT_EQ(run(learn_args("learned")).code, 0);
    const double extraction = std::stod(RunReport::load(path("learned.report")).get("final_hard_loss").value());
    auto re = run({"retrain", "--input", path("emb.txt"), "--codebook", path("learned.tsv"), "--epochs", "15",
                   "--seed", "3", "--checkpoint-out", path("re.kdc")});
    ASSERT_EQ(re.code, 0) << re.err;
    EXPECT_LE(re.number("final_loss"), 2.0 * extraction);

    // Same codes dealt to the wrong symbols.
    const auto cb = load_codebook(path("learned.tsv"));
    std::vector<std::uint32_t> codes(cb.codes().begin(), cb.codes().end());
    Rng rng(1);
    rng.shuffle(codes);
    save_codebook(path("shuffled.tsv"), CodeBook(cb.spec(), codes, cb.labels()));
    const auto sh = run({"retrain", "--input", path("emb.txt"), "--codebook", path("shuffled.tsv"), "--epochs", "15",
                         "--seed", "3"});
    ASSERT_EQ(sh.code, 0) << sh.err;
    EXPECT_GT(sh.number("final_loss"), re.number("final_loss"));

    const auto zero = run({"retrain", "--input", path("emb.txt"), "--codebook", path("learned.tsv"), "--epochs", "0"});
    ASSERT_EQ(zero.code, 0);
    EXPECT_EQ(zero.number("final_loss"), zero.number("initial_loss"));

    const auto bad = run({"retrain", "--input", path("emb.txt"), "--codebook", path("mismatch.tsv")});
    EXPECT_EQ(bad.code, cli::kExitFailure);
    save_codebook(path("mismatch.tsv"), CodeBook(KdSpec(4, 1, 3), {0, 1, 2}));
    const auto mismatch = run({"retrain", "--input", path("emb.txt"), "--codebook", path("mismatch.tsv")});
    EXPECT_EQ(mismatch.code, cli::kExitFailure);
    EXPECT_NE(mismatch.err.find("300"), std::string::npos);
}

TEST_F(CliTest, EvaluateIdentityReconstruction) {
    make_small_set();
    const auto emb = load_embeddings_text(path("emb.txt"));
    // One code per symbol whose table row is the embedding itself, H = I.
    KdModel model = KdModel::zeros(ComposerVariant::linear, 300, 1, 4, 4);
    model.tables.tables[0] = emb.vectors;
    std::get<LinearComposerParams>(model.composer).projection = Matrix::identity(4);
    std::vector<std::uint32_t> codes(300);
    for (std::uint32_t i = 0; i < 300; ++i) codes[i] = i;
    save_codebook(path("id.tsv"), CodeBook(KdSpec(300, 1, 300), codes, emb.labels));
    save_checkpoint(path("id.kdc"), Checkpoint{model, std::nullopt});

    auto r = run({"evaluate", "--input", path("emb.txt"), "--codebook", path("id.tsv"), "--checkpoint", path("id.kdc"),
                  "--labels", path("labels.tsv"), "--nmi"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.number("reconstruction_loss"), 0.0);
    EXPECT_EQ(r.number("neighbor_preservation@10"), 1.0);
    const double v = r.number("nmi");
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(r.number("code_embedding_params"), 1200);

    r = run({"evaluate", "--input", path("emb.txt"), "--codebook", path("id.tsv"), "--checkpoint", path("id.kdc"),
             "--nmi"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("--labels"), std::string::npos);
}

TEST_F(CliTest, InspectGroups) {
    save_codebook(path("g.tsv"), CodeBook(KdSpec(5, 4, 3), {3, 1, 0, 4, 0, 0, 0, 0, 3, 1, 0, 4}, {"week", "x", "tuesday"}));
    auto r = run({"inspect", "--codebook", path("g.tsv")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.field("3-1-0-4"), "2\tweek tuesday");
    EXPECT_EQ(r.field("0-0-0-0"), "1\tx");
    EXPECT_EQ(run({"inspect", "--codebook", path("g.tsv")}).out, r.out);

    r = run({"inspect", "--codebook", path("g.tsv"), "--min-group-size", "2"});
    EXPECT_TRUE(r.field("3-1-0-4").has_value());
    EXPECT_FALSE(r.field("0-0-0-0").has_value());

    save_codebook(path("u.tsv"), CodeBook(KdSpec(5, 1, 2), {1, 2}));
    r = run({"inspect", "--codebook", path("u.tsv")});
    EXPECT_EQ(r.code, cli::kExitFailure);
    EXPECT_NE(r.err.find("no symbol labels"), std::string::npos);
}

TEST_F(CliTest, ParamCountTableRow) {
    auto r = run({"param-count", "--N", "10000", "--d", "200", "--K", "50", "--D", "10", "--dprime", "200",
                  "--composer", "linear"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.field("conventional_baseline"), "2000000");
    EXPECT_EQ(r.field("code_embedding_params"), "100000");
    EXPECT_EQ(r.field("rate_code_only"), "0.05");

    const auto lstm = run({"param-count", "--N", "10000", "--d", "200", "--K", "50", "--D", "10", "--dprime", "200",
                           "--composer", "lstm"});
    EXPECT_EQ(lstm.number("composer_params") - r.number("composer_params"), 4.0 * (200 * 200 + 200));
    const auto enumerated = parameter_count(KdModel::zeros(ComposerVariant::lstm, 50, 10, 200, 200));
    EXPECT_EQ(lstm.number("total"), static_cast<double>(enumerated));

    r = run({"param-count", "--N", "10000", "--d", "200", "--K", "50", "--dprime", "200"});
    EXPECT_EQ(r.field("D"), "3\t(min_code_dim)");
}
