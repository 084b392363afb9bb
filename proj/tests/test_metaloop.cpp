#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"

using namespace mada;

namespace {

struct Toy {
    HyperParams h;
    TaskParams theta;
    Batch source;
    std::vector<Batch> augmented;
};

// 27 parameters: 4 -> 3 embedding, 3 -> 3 classifier, all float64.
Toy make_toy(MetaGradMode mode) {
    Toy t;
    t.h = test::toy_params();
    t.h.mlp_embed = 3;
    t.h.eta = 0.5;
    t.h.meta_grad_mode = mode;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(17);
    ArchSpec arch = ArchSpec::from(t.h, {2, 2, 1, 3});
    t.theta = init_task_params(arch, gen, torch::kFloat64);
    auto batch = [&](std::int64_t n) {
        return Batch{torch::rand({n, 2, 2, 1}, gen, torch::kFloat64), torch::randint(0, 3, {n}, gen, torch::kInt64), 3};
    };
    t.source = batch(6);
    t.augmented = {batch(5), batch(4)};
    return t;
}

// L(θ; S) + Σ_k L(θ - η ∇L(θ; S); S⁺_k) evaluated from scratch.
double composite(const Toy& t, const std::vector<torch::Tensor>& values) {
    std::vector<torch::Tensor> leaves;
    for (const auto& v : values) leaves.push_back(v.detach().clone().requires_grad_(true));
    auto theta = t.theta.with_tensors(leaves);
    auto ls = task_loss(theta, t.source);
    auto g = torch::autograd::grad({ls}, leaves);
    std::vector<torch::Tensor> hat;
    for (std::size_t i = 0; i < leaves.size(); ++i) hat.push_back(leaves[i] - t.h.eta * g[i]);
    auto th = t.theta.with_tensors(hat);
    double total = ls.item<double>();
    for (const auto& b : t.augmented) total += task_loss(th, b).item<double>();
    return total;
}

}  // namespace

TEST(Meta, SecondOrderGradientMatchesFiniteDifferences) {
    auto t = make_toy(MetaGradMode::full_second_order);
    ASSERT_LE(t.theta.parameter_count(), 50);
    auto mg = meta_gradient(t.theta, t.source, t.augmented, t.h);
    auto base = t.theta.tensors();
    const double eps = 1e-6;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        for (std::int64_t j = 0; j < base[i].numel(); ++j) {
            auto shifted = [&](double d) {
                auto values = base;
                auto v = values[i].detach().clone().reshape(-1);
                v[j] += d;
                values[i] = v.reshape(base[i].sizes());
                return composite(t, values);
            };
            const double fd = (shifted(eps) - shifted(-eps)) / (2 * eps);
            const double an = mg.grads[i].reshape(-1)[j].item<double>();
            num += (an - fd) * (an - fd);
            den += fd * fd;
        }
    }
    EXPECT_LE(std::sqrt(num / den), 1e-6);
}

TEST(Meta, FirstOrderGradientTreatsInnerStepAsConstant) {
    auto t = make_toy(MetaGradMode::first_order);
    auto mg = meta_gradient(t.theta, t.source, t.augmented, t.h);
    auto params = t.theta.tensors();
    auto g0 = torch::autograd::grad({task_loss(t.theta, t.source)}, params);
    std::vector<torch::Tensor> hat;
    for (std::size_t i = 0; i < params.size(); ++i) hat.push_back((params[i] - t.h.eta * g0[i]).detach().requires_grad_(true));
    auto th = t.theta.with_tensors(hat);
    auto lt = task_loss(th, t.augmented[0]) + task_loss(th, t.augmented[1]);
    auto gt = torch::autograd::grad({lt}, hat);
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_TRUE(torch::allclose(mg.grads[i], g0[i] + gt[i], 1e-12, 1e-14)) << i;
    }
    ASSERT_EQ(mg.test_losses.size(), 2u);
    EXPECT_NEAR(mg.test_losses[1], task_loss(th, t.augmented[1]).item<double>(), 1e-14);
}

TEST(Meta, OrdersDifferWhenCurvatureMatters) {
    auto first = make_toy(MetaGradMode::first_order);
    auto second = make_toy(MetaGradMode::full_second_order);
    auto a = meta_gradient(first.theta, first.source, first.augmented, first.h);
    auto b = meta_gradient(second.theta, second.source, second.augmented, second.h);
    EXPECT_GT(std::abs(a.grad_norm - b.grad_norm), 1e-9);
}

TEST(Meta, UpdateIsPlainGradientStep) {
    auto t = make_toy(MetaGradMode::full_second_order);
    MetaGradient info;
    auto next = meta_update(t.theta, t.source, t.augmented, t.h, &info);
    for (std::size_t i = 0; i < next.tensors().size(); ++i) {
        auto expected = t.theta.tensors()[i].detach() - t.h.eta * info.grads[i];
        EXPECT_TRUE(torch::equal(next.tensors()[i].detach(), expected));
        EXPECT_TRUE(next.tensors()[i].is_leaf());
    }
}

TEST(Meta, NoAugmentedDomainsGivesSourceGradient) {
    auto t = make_toy(MetaGradMode::first_order);
    auto mg = meta_gradient(t.theta, t.source, {}, t.h);
    auto g = torch::autograd::grad({task_loss(t.theta, t.source)}, t.theta.tensors());
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_TRUE(torch::equal(mg.grads[i], g[i]));
    EXPECT_TRUE(mg.test_losses.empty());
}

TEST(Meta, NonFiniteGradientIsNumericalError) {
    auto t = make_toy(MetaGradMode::first_order);
    auto values = t.theta.tensors();
    values[0] = values[0].detach().clone();
    values[0][0][0] = std::numeric_limits<double>::quiet_NaN();
    values[0].requires_grad_(true);
    auto bad = t.theta.with_tensors(values);
    EXPECT_THROW(static_cast<void>(meta_gradient(bad, t.source, t.augmented, t.h)), NumericalError);
}

TEST(Meta, InnerStepsRepeatPlainGradientSteps) {
    auto t = make_toy(MetaGradMode::first_order);
    t.h.inner_steps = 3;
    auto hat = meta_train_step(t.theta, t.source, t.h);
    auto cur = t.theta.tensors();
    for (int s = 0; s < 3; ++s) {
        std::vector<torch::Tensor> leaves;
        for (auto& c : cur) leaves.push_back(c.detach().requires_grad_(true));
        auto g = torch::autograd::grad({task_loss(t.theta.with_tensors(leaves), t.source)}, leaves);
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = leaves[i].detach() - t.h.eta * g[i];
    }
    for (std::size_t i = 0; i < cur.size(); ++i) EXPECT_TRUE(torch::allclose(hat.tensors()[i], cur[i], 1e-13, 1e-15));
}

TEST(Schedule, RoundStartsSplitIterationsEvenly) {
    EXPECT_EQ(round_start(1, 3, 2000), 500);
    EXPECT_EQ(round_start(2, 3, 2000), 1000);
    EXPECT_EQ(round_start(3, 3, 2000), 1500);
    EXPECT_EQ(round_start(1, 2, 10), 3);
    EXPECT_EQ(round_start(2, 2, 10), 6);
}

TEST(Sampler, EachEpochVisitsEveryIndexOnce) {
    BatchSampler s(10, 5, at::make_generator<at::CPUGeneratorImpl>(1));
    for (int epoch = 0; epoch < 3; ++epoch) {
        std::set<std::int64_t> seen;
        for (int b = 0; b < 2; ++b) {
            auto idx = s.next();
            for (std::int64_t i = 0; i < idx.numel(); ++i) seen.insert(idx[i].item<std::int64_t>());
        }
        EXPECT_EQ(seen.size(), 10u);
    }
    EXPECT_THROW(BatchSampler(0, 5, at::make_generator<at::CPUGeneratorImpl>(1)), DataError);
}

TEST(Wae, TrainingLowersHeldOutError) {
    auto h = test::toy_params();
    h.wae_epochs = 30;
    h.wae_lr = 1e-2;
    auto source = test::random_domain(200, 3, 3, 1, 2, 4);
    source.images = (source.images > 0.5).to(torch::kFloat32) * 0.8 + 0.1;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    WaeTrainLog log;
    auto psi = pretrain_wae(init_wae_params(h, source.signature(), gen), source, h, gen, &log);
    EXPECT_EQ(log.epoch_losses.size(), 30u);
    EXPECT_LT(log.heldout_after, log.heldout_before);
    for (const auto& t : psi.autoencoder_tensors()) EXPECT_FALSE(t.grad().defined());
}

TEST(Wae, RetrainWithZeroEpochsIsCopy) {
    auto h = test::toy_params();
    h.wae_retrain_fraction = 0.0;
    auto source = test::random_domain(20, 3, 3, 1, 2, 4);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    auto psi = init_wae_params(h, source.signature(), gen);
    auto again = retrain_wae(psi, source, source, h, gen);
    for (std::size_t i = 0; i < psi.named().size(); ++i) EXPECT_TRUE(torch::equal(psi.named()[i].value, again.named()[i].value));
}

TEST(Wae, NonFiniteLossIsNumericalError) {
    auto h = test::toy_params();
    auto source = test::random_domain(20, 3, 3, 1, 2, 4);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    auto psi = init_wae_params(h, source.signature(), gen);
    auto images = source.images.clone();
    images.select(1, 0).fill_(std::numeric_limits<float>::quiet_NaN());
    EXPECT_THROW(static_cast<void>(train_wae(psi, images, 1, h, gen)), NumericalError);
}

TEST(Driver, ZeroDomainsMatchesErmTrajectory) {
    auto h = test::toy_params();
    h.iterations = 25;
    auto source = test::random_domain(30, 3, 3, 1, 3, 8);
    std::vector<MetricRecord> erm_hist;
    auto erm = train_erm(source, h, [&](const MetricRecord& r) { erm_hist.push_back(r); });
    auto mada = run_mada(source, h);
    ASSERT_EQ(mada.history.size(), erm.history.size());
    for (std::size_t i = 0; i < erm.history.size(); ++i) EXPECT_EQ(mada.history[i], erm.history[i]) << i;
    EXPECT_EQ(erm_hist, erm.history);
    for (std::size_t i = 0; i < erm.theta.tensors().size(); ++i) {
        EXPECT_TRUE(torch::equal(mada.theta.tensors()[i], erm.theta.tensors()[i]));
    }
    EXPECT_TRUE(mada.augmented.empty());
}

TEST(Driver, RepeatedRunsAreBitIdentical) {
    auto h = test::toy_params();
    h.iterations = 12;
    h.k_domains = 2;
    h.aug_fraction = 0.5;
    auto source = test::random_domain(24, 3, 3, 1, 3, 8);
    auto a = run_mada(source, h);
    auto b = run_mada(source, h);
    ASSERT_EQ(a.history.size(), 12u);
    EXPECT_EQ(a.history, b.history);
    ASSERT_EQ(a.rounds.size(), 2u);
    EXPECT_TRUE(a.rounds[1].same_metrics(b.rounds[1]));
    EXPECT_EQ(a.augmented.size(), 2u);
    EXPECT_TRUE(torch::equal(a.augmented[1].images, b.augmented[1].images));
}

TEST(Driver, RoundsCloseAtScheduledIterations) {
    auto h = test::toy_params();
    h.iterations = 12;
    h.k_domains = 2;
    auto source = test::random_domain(24, 3, 3, 1, 3, 8);
    test::TempDir dir("driver");
    RunOptions o;
    o.metrics_log = dir.path() / "metrics.jsonl";
    o.checkpoint_dir = dir.path() / "ck";
    auto st = run_mada(source, h, o);
    EXPECT_EQ(st.history[4].round, 1);
    EXPECT_EQ(st.history[8].round, 2);
    EXPECT_EQ(st.history[3].meta_test_losses.size(), 0u);
    EXPECT_EQ(st.history[4].meta_test_losses.size(), 1u);
    EXPECT_EQ(st.history[11].meta_test_losses.size(), 2u);
    EXPECT_EQ(st.augmented[0].kind, DomainKind::augmented(1));
    std::ifstream in(o.metrics_log);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    EXPECT_EQ(lines, 12);
    EXPECT_EQ(read_checkpoint_manifest(o.checkpoint_dir).get_int("iteration"), 12);
    EXPECT_NO_THROW(static_cast<void>(load_wae_params(o.checkpoint_dir)));
}

TEST(Driver, InvalidConfigIsRejectedBeforeTraining) {
    auto h = test::toy_params();
    h.eta = -1;
    auto source = test::random_domain(24, 3, 3, 1, 3, 8);
    EXPECT_THROW(static_cast<void>(run_mada(source, h)), ConfigError);
}
