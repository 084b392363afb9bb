#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>

#include "support.hpp"

using namespace mada;

namespace {

double brute_force_w2(const torch::Tensor& a, const torch::Tensor& b) {
    const auto n = a.size(0);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0;
        for (std::int64_t i = 0; i < n; ++i) c += (a[i] - b[perm[static_cast<std::size_t>(i)]]).pow(2).sum().item<double>();
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(best / static_cast<double>(n));
}

TaskParams tiny_model(std::uint64_t seed) {
    auto h = test::toy_params();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return init_task_params(ArchSpec::from(h, {3, 3, 1, 3}), gen);
}

ErrorTable table(double clean, std::map<std::string, double> entries) {
    ErrorTable t;
    t.clean_error = clean;
    t.entries = std::move(entries);
    return t;
}

}  // namespace

TEST(Wasserstein, EqualSizesMatchBruteForce) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto a = torch::randn({7, 2}, gen, torch::kFloat64);
        auto b = torch::randn({7, 2}, gen, torch::kFloat64) * 2 + 1;
        EXPECT_NEAR(empirical_wasserstein(a, b), brute_force_w2(a, b), 1e-9);
    }
}

TEST(Wasserstein, UnequalSizesMatchReplicatedAssignment) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(22);
    auto a = torch::randn({2, 2}, gen, torch::kFloat64);
    auto b = torch::randn({3, 2}, gen, torch::kFloat64);
    auto ra = a.repeat_interleave(3, 0);
    auto rb = b.repeat_interleave(2, 0);
    EXPECT_NEAR(empirical_wasserstein(a, b), brute_force_w2(ra, rb), 1e-9);
    EXPECT_NEAR(empirical_wasserstein(b, a), brute_force_w2(rb, ra), 1e-9);
}

TEST(Wasserstein, OneDimensionalSortedMatching) {
    auto a = torch::tensor({{3.0}, {-1.0}, {0.5}, {2.0}}, torch::kFloat64);
    auto b = torch::tensor({{0.0}, {4.0}, {1.0}, {-2.0}}, torch::kFloat64);
    // sorted: -1,0.5,2,3 vs -2,0,1,4 -> squared gaps 1, 0.25, 1, 1
    EXPECT_NEAR(empirical_wasserstein(a, b), std::sqrt(3.25 / 4), 1e-12);
}

TEST(Wasserstein, IdentitySymmetryAndErrors) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(23);
    auto a = torch::randn({5, 3}, gen, torch::kFloat64);
    auto b = torch::randn({6, 3}, gen, torch::kFloat64);
    EXPECT_NEAR(empirical_wasserstein(a, a), 0.0, 1e-12);
    EXPECT_NEAR(empirical_wasserstein(a, b), empirical_wasserstein(b, a), 1e-12);
    EXPECT_NEAR(empirical_wasserstein(a, a + 2.0), 2.0 * std::sqrt(3.0), 1e-12);
    EXPECT_THROW(static_cast<void>(empirical_wasserstein(a, torch::randn({5, 2}))), DataError);
    EXPECT_THROW(static_cast<void>(empirical_wasserstein(a, torch::zeros({0, 3}))), DataError);
}

TEST(Metrics, MceAndRmceOfModelAgainstItselfAreOne) {
    auto f = table(0.1, {{"a", 0.3}, {"b", 0.7}, {"c", 0.2}});
    EXPECT_EQ(mce(f, f), 1.0);
    EXPECT_EQ(rmce(f, f), 1.0);
}

TEST(Metrics, ThreeCorruptionHandArithmetic) {
    auto erm = table(0.10, {{"a", 0.40}, {"b", 0.50}, {"c", 0.20}});
    auto f = table(0.05, {{"a", 0.20}, {"b", 0.45}, {"c", 0.15}});
    EXPECT_NEAR(mce(f, erm), (0.20 / 0.40 + 0.45 / 0.50 + 0.15 / 0.20) / 3, 1e-12);
    EXPECT_NEAR(rmce(f, erm), ((0.15 / 0.30) + (0.40 / 0.40) + (0.10 / 0.10)) / 3, 1e-12);
}

TEST(Metrics, ZeroDenominatorsNameTheCorruption) {
    auto erm = table(0.10, {{"a", 0.40}, {"b", 0.0}});
    auto f = table(0.05, {{"a", 0.20}, {"b", 0.1}});
    try {
        static_cast<void>(mce(f, erm));
        FAIL();
    } catch (const UndefinedMetricError& e) {
        EXPECT_EQ(e.corruption(), "b");
    }
    auto flat = table(0.10, {{"a", 0.40}, {"b", 0.10}});
    try {
        static_cast<void>(rmce(f, flat));
        FAIL();
    } catch (const UndefinedMetricError& e) {
        EXPECT_EQ(e.corruption(), "b");
    }
}

TEST(Metrics, MismatchedTablesAreDataErrors) {
    auto erm = table(0.1, {{"a", 0.4}});
    auto f = table(0.1, {{"b", 0.4}});
    EXPECT_THROW(static_cast<void>(mce(f, erm)), DataError);
    EXPECT_THROW(static_cast<void>(rmce(table(0.1, {}), table(0.1, {}))), DataError);
    EXPECT_THROW(table(1.5, {}).validate(), DataError);
}

TEST(Metrics, AccuracyMatchesArgmaxCount) {
    auto theta = tiny_model(3);
    auto d = test::random_domain(50, 3, 3, 1, 3, 4);
    torch::NoGradGuard ng;
    auto pred = forward_logits(theta, forward_features(theta, d.images, Mode::eval)).argmax(1);
    const double expected = pred.eq(d.labels).sum().item<double>() / 50.0;
    EXPECT_DOUBLE_EQ(accuracy(theta, d, 7), expected);
    auto t = error_table(theta, d, {{"same", d}});
    EXPECT_DOUBLE_EQ(t.entries.at("same"), 1.0 - expected);
    EXPECT_DOUBLE_EQ(t.clean_error, 1.0 - expected);
}

TEST(Embeddings, ExportRoundTrip) {
    test::TempDir dir("emb");
    auto theta = tiny_model(5);
    auto a = test::random_domain(4, 3, 3, 1, 3, 1, "src");
    auto b = test::random_domain(3, 3, 3, 1, 3, 2, "aug-1");
    std::vector<Domain> ds{a, b};
    export_embeddings(theta, ds, dir.path() / "emb.csv");
    auto rows = read_embeddings(dir.path() / "emb.csv");
    ASSERT_EQ(rows.size(), 7u);
    auto z = embed_domain(theta, b).to(torch::kFloat64);
    EXPECT_EQ(rows[5].domain_id, "aug-1");
    EXPECT_EQ(rows[5].sample_id, 1);
    EXPECT_EQ(rows[5].label, b.labels[1].item<std::int64_t>());
    ASSERT_EQ(rows[5].z.size(), static_cast<std::size_t>(theta.embedding_dim()));
    for (std::size_t k = 0; k < rows[5].z.size(); ++k) EXPECT_EQ(rows[5].z[k], z[1][static_cast<std::int64_t>(k)].item<double>());
    std::ofstream(dir.path() / "bad.csv") << "domain_id,sample_id,label,z0\nsrc,0,1\n";
    EXPECT_THROW(static_cast<void>(read_embeddings(dir.path() / "bad.csv")), DataError);
}

TEST(Results, AppendAndReadBack) {
    test::TempDir dir("res");
    std::vector<ResultRecord> first{{"mada", 0, "gaussian_noise@3", "accuracy", 0.75}};
    std::vector<ResultRecord> second{{"erm", 1, "clean", "error", 0.125}};
    append_results(dir.path() / "r.jsonl", first);
    append_results(dir.path() / "r.jsonl", second);
    auto back = read_results(dir.path() / "r.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], first[0]);
    EXPECT_EQ(back[1], second[0]);
    std::ofstream(dir.path() / "r.jsonl", std::ios::app) << "{\"method\": 3}\n";
    EXPECT_THROW(static_cast<void>(read_results(dir.path() / "r.jsonl")), DataError);
}

TEST(FewShot, SamplesPerClassAndSeeded) {
    auto d = test::random_domain(60, 3, 3, 1, 3, 6);
    auto s = sample_shots(d, 4, 11);
    EXPECT_EQ(s.size(), 12);
    auto counts = torch::bincount(s.labels, {}, 3);
    EXPECT_TRUE(counts.eq(4).all().item<bool>());
    EXPECT_TRUE(torch::equal(s.images, sample_shots(d, 4, 11).images));
    EXPECT_THROW(static_cast<void>(sample_shots(d, 30, 11)), DataError);
}

TEST(FewShot, AdaptationFitsShotsAndLeavesThetaAlone) {
    auto theta = tiny_model(8);
    auto d = test::random_domain(30, 3, 3, 1, 3, 6);
    auto h = test::toy_params();
    h.fewshot_iters = 100;
    h.fewshot_lr = 1e-2;
    h.fewshot_batch = 4;
    auto before = theta.clone();
    auto adapted = fewshot_adapt(theta, d, h);
    for (std::size_t i = 0; i < theta.tensors().size(); ++i) EXPECT_TRUE(torch::equal(theta.tensors()[i], before.tensors()[i]));
    torch::NoGradGuard ng;
    EXPECT_LT(task_loss(adapted, d.all()).item<float>(), task_loss(theta, d.all()).item<float>());
    auto missing = d;
    missing.labels = torch::zeros_like(d.labels);
    EXPECT_THROW(static_cast<void>(fewshot_adapt(theta, missing, h)), DataError);
}
