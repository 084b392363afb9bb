#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>

#include "support.hpp"

using namespace mada;

namespace {

struct Outcome {
    int code{-1};
    std::string output;
};

Outcome run_cli(const std::string& args) {
    const std::string cmd = std::string(MADA_CLI_PATH) + " " + args + " 2>&1";
    Outcome o;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return o;
    std::array<char, 4096> buf{};
    while (fgets(buf.data(), buf.size(), pipe) != nullptr) o.output += buf.data();
    const int status = pclose(pipe);
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return o;
}

std::size_t count(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
    return n;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), {}};
}

const std::string kTiny =
    "--limit 64 --set arch=toy_mlp --set mlp_embed=8 --set iterations=6 --set k_domains=1 --set t_adv=2 "
    "--set wae_epochs=1 --set wae_hidden=16 --set wae_latent=4 --set critic_hidden=8 --set batch_size=16";

}  // namespace

TEST(Cli, HelpListsEveryConfigKey) {
    auto o = run_cli("train --help");
    EXPECT_EQ(o.code, 0);
    for (const auto& f : hyperparam_fields()) EXPECT_NE(o.output.find(std::string(f.key)), std::string::npos) << f.key;
    EXPECT_NE(o.output.find("beta (β)"), std::string::npos);
}

TEST(Cli, UsageAndConfigErrorsExitTwo) {
    EXPECT_EQ(run_cli("").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
    auto bad_key = run_cli("train --set alhpa=1 --out /tmp/mada-cli-unused");
    EXPECT_EQ(bad_key.code, 2);
    EXPECT_NE(bad_key.output.find("error: config: alhpa"), std::string::npos) << bad_key.output;
    EXPECT_EQ(count(bad_key.output, "\n"), 1u) << bad_key.output;
    EXPECT_EQ(run_cli("train --set beta=-1 --limit 8 --out /tmp/mada-cli-unused").code, 2);
    EXPECT_EQ(run_cli("train --config /nonexistent.cfg").code, 2);
}

TEST(Cli, MissingDataExitsThree) {
    test::TempDir dir("cli-data");
    auto o = run_cli("train --data-root " + (dir.path() / "empty").string() + " --out " + dir.path().string());
    EXPECT_EQ(o.code, 3);
    EXPECT_NE(o.output.find("error: data:"), std::string::npos) << o.output;
    EXPECT_EQ(run_cli("evaluate --checkpoint " + (dir.path() / "nope").string() + " --out " + dir.path().string()).code, 3);
}

TEST(Cli, TrainEvaluateExportAndReportEndToEnd) {
    test::TempDir dir("cli-e2e");
    const auto out = dir.path().string();
    auto train = run_cli("train " + kTiny + " --save-augmented --out " + out + "/run");
    ASSERT_EQ(train.code, 0) << train.output;
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "run" / "checkpoint" / "manifest.cfg")) << train.output;
    const auto manifest = slurp(dir.path() / "run" / "manifest.cfg");
    EXPECT_NE(manifest.find("run.verb = train"), std::string::npos) << manifest;
    EXPECT_NE(manifest.find("run.status = ok"), std::string::npos) << manifest;
    EXPECT_NE(manifest.find("k_domains = 1"), std::string::npos);

    auto eval = run_cli("evaluate --checkpoint " + out + "/run/checkpoint --shift invert --corruption gaussian_noise@2 "
                        "--limit 64 --method tiny --results " + out + "/results.jsonl --out " + out + "/eval");
    ASSERT_EQ(eval.code, 0) << eval.output;
    auto records = read_results(dir.path() / "results.jsonl");
    ASSERT_GE(records.size(), 3u);
    for (const auto& r : records) EXPECT_EQ(r.method, "tiny");

    auto corrupt = run_cli("corrupt --kind fog --severity 3 --limit 32 --out " + out + "/fog");
    ASSERT_EQ(corrupt.code, 0) << corrupt.output;

    auto exp = run_cli("export-embeddings --checkpoint " + out + "/run/checkpoint --shift invert --limit 16 --out " + out + "/emb");
    ASSERT_EQ(exp.code, 0) << exp.output;

    auto rep = run_cli("report --results " + out + "/results.jsonl --out " + out + "/rep");
    ASSERT_EQ(rep.code, 0) << rep.output;
    EXPECT_NE(rep.output.find("method"), std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "rep" / "severity.svg"));
}

TEST(Report, SummaryStatisticsHandArithmetic) {
    std::vector<ResultRecord> rs{{"mada", 0, "invert", "accuracy", 0.5},
                                 {"mada", 1, "invert", "accuracy", 0.7},
                                 {"mada", 2, "invert", "accuracy", 0.6},
                                 {"erm", 0, "invert", "accuracy", 0.4}};
    auto rows = summarize(rs);
    ASSERT_EQ(rows.size(), 2u);
    const auto& m = rows[1].method == "mada" ? rows[1] : rows[0];
    EXPECT_NEAR(m.mean, 0.6, 1e-15);
    EXPECT_NEAR(m.stddev, 0.1, 1e-15);
    EXPECT_EQ(m.n, 3);
    const auto text = format_table(rows);
    EXPECT_NE(text.find("0.6000"), std::string::npos);
    EXPECT_NE(text.find("0.1000"), std::string::npos);
    EXPECT_EQ(count(text, "\n"), 4u);
}

TEST(Report, SeverityPlotHasFiveTicksAndOneSeriesPerMethod) {
    std::vector<ResultRecord> rs;
    for (int s = 1; s <= 5; ++s) {
        for (const auto* kind : {"gaussian_noise", "fog"}) {
            const auto dom = std::string("mnist-test/") + kind + "@" + std::to_string(s);
            rs.push_back({"mada", 0, dom, "accuracy", 1.0 - 0.1 * s});
            rs.push_back({"erm", 0, dom, "accuracy", 1.0 - 0.15 * s});
        }
    }
    rs.push_back({"erm", 0, "clean", "accuracy", 0.99});
    const auto svg = severity_svg(rs);
    EXPECT_EQ(count(svg, "class=\"xtick\""), 5u);
    EXPECT_EQ(count(svg, "class=\"series\""), 2u);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Report, LossCurveFromMetricsLog) {
    test::TempDir dir("curve");
    {
        std::ofstream out(dir.path() / "metrics.jsonl");
        for (int i = 0; i < 120; ++i) out << "{\"iteration\":" << i << ",\"source_loss\":" << 2.0 / (i + 1) << "}\n";
    }
    const auto svg = loss_curve_svg({dir.path() / "metrics.jsonl"}, 50);
    EXPECT_EQ(count(svg, "class=\"series\""), 1u);
    std::ofstream(dir.path() / "bad.jsonl") << "{\"iteration\": 1}\n";
    EXPECT_THROW(static_cast<void>(loss_curve_svg({dir.path() / "bad.jsonl"})), DataError);
}
