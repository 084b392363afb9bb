#include <gtest/gtest.h>

#include <limits>

#include "support.hpp"

using namespace mada;

namespace {

struct Toy {
    TaskParams theta;
    WAEParams psi;
    Domain source;
    HyperParams h;
};

Toy make_toy(torch::Dtype dtype = torch::kFloat64) {
    Toy t;
    t.h = test::toy_params();
    t.source = test::random_domain(40, 3, 3, 1, 3, 7, "src");
    t.source.images = t.source.images * 0.5 + 0.25;  // keep away from the clamp
    if (dtype == torch::kFloat64) t.source.images = t.source.images.to(torch::kFloat64);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
    t.theta = init_task_params(ArchSpec::from(t.h, t.source.signature()), gen, dtype);
    t.psi = init_wae_params(t.source.signature(), 2, 6, 4, Divergence::gan, gen, dtype);
    return t;
}

}  // namespace

TEST(LossConst, HalfSquaredDistanceHandArithmetic) {
    auto z = torch::tensor({{0.0, 0.0}, {1.0, 2.0}}, torch::kFloat64);
    auto zp = torch::tensor({{3.0, 4.0}, {1.0, 0.0}}, torch::kFloat64);
    auto y = torch::tensor({1, 2}, torch::kInt64);
    auto per = loss_const_per_sample(z, zp, y, y);
    EXPECT_DOUBLE_EQ(per[0].item<double>(), 12.5);
    EXPECT_DOUBLE_EQ(per[1].item<double>(), 2.0);
    EXPECT_DOUBLE_EQ(loss_const(z, zp, y, y).item<double>(), 7.25);
}

TEST(LossConst, LabelMismatchGivesLargestFiniteValue) {
    auto z = torch::zeros({2, 2});
    auto y = torch::tensor({0, 1}, torch::kInt64);
    auto yp = torch::tensor({0, 0}, torch::kInt64);
    auto per = loss_const_per_sample(z, z, y, yp);
    EXPECT_EQ(per[0].item<float>(), 0.0f);
    EXPECT_EQ(per[1].item<float>(), std::numeric_limits<float>::max());
    EXPECT_EQ(loss_const(z, z, y, yp).item<float>(), std::numeric_limits<float>::max());
    EXPECT_TRUE(std::isfinite(loss_const(z, z, y, yp).item<float>()));
}

TEST(LossRelax, DeltaVariantVanishesAtStart) {
    auto t = make_toy();
    auto x = t.source.images.slice(0, 0, 5);
    EXPECT_EQ(loss_relax(t.psi, x, RelaxVariant::recon_delta, x).item<double>(), 0.0);
    auto direct = (x - wae_reconstruct(t.psi, x)).pow(2).mean();
    EXPECT_NEAR(loss_relax(t.psi, x, RelaxVariant::recon_of_xplus, x).item<double>(), direct.item<double>(), 1e-15);
}

TEST(LossAda, ComposesTheThreeTerms) {
    auto t = make_toy();
    t.h.alpha = 0.7;
    t.h.beta = 3.0;
    auto x = t.source.images.slice(0, 0, 6);
    auto y = t.source.labels.slice(0, 0, 6);
    auto xp = (x + 0.1).clamp(0, 1);
    auto z = forward_features(t.theta, x, Mode::eval);
    auto zp = forward_features(t.theta, xp, Mode::eval);
    auto expected = task_loss_per_sample(t.theta, xp, y, Mode::eval) - 0.7 * loss_const_per_sample(z, zp, y, y) +
                    3.0 * loss_relax_per_sample(t.psi, xp, RelaxVariant::recon_of_xplus, x);
    EXPECT_TRUE(torch::allclose(loss_ada_per_sample(t.theta, t.psi, xp, x, y, t.h), expected, 1e-12, 1e-12));
}

TEST(Ascent, StepFollowsFiniteDifferenceGradient) {
    auto t = make_toy();
    t.h.alpha = 1.0;
    t.h.beta = 2.0;
    const double gamma = 1e-3;
    t.h.gamma = gamma;
    auto b = t.source.batch(torch::arange(4));
    auto a0 = make_adversarial_batch(t.theta, b);
    a0.x_plus = (a0.x + 0.05).clamp(0, 1);  // away from x so the const term has a gradient
    auto a1 = ascend_step(t.theta, t.psi, a0, t.h);
    auto objective = [&](const torch::Tensor& xp) {
        return loss_ada_per_sample(t.theta, t.psi, xp, a0.x, a0.labels, t.h, a0.z).sum().item<double>();
    };
    const double eps = 1e-6;
    auto flat = a0.x_plus.reshape(-1);
    for (std::int64_t j = 0; j < flat.numel(); ++j) {
        auto up = flat.clone();
        auto dn = flat.clone();
        up[j] += eps;
        dn[j] -= eps;
        const double fd = (objective(up.reshape(a0.x_plus.sizes())) - objective(dn.reshape(a0.x_plus.sizes()))) / (2 * eps);
        const double moved = (a1.x_plus.reshape(-1)[j].item<double>() - flat[j].item<double>()) / gamma;
        EXPECT_NEAR(moved, fd, 1e-6 * std::max(1.0, std::abs(fd))) << "pixel " << j;
    }
    EXPECT_EQ(a1.steps, 1);
}

TEST(Ascent, StaysInUnitRangeAndLeavesModelsAlone) {
    auto t = make_toy(torch::kFloat32);
    t.h.gamma = 50.0;
    t.h.t_adv = 4;
    auto before = t.theta.clone();
    auto b = t.source.batch(torch::arange(8));
    auto a = run_ascent(t.theta, t.psi, b, t.h);
    EXPECT_GE(a.x_plus.min().item<float>(), 0.0f);
    EXPECT_LE(a.x_plus.max().item<float>(), 1.0f);
    EXPECT_EQ(a.steps, 4);
    EXPECT_TRUE(torch::equal(a.labels, b.labels));
    for (std::size_t i = 0; i < before.tensors().size(); ++i) {
        EXPECT_TRUE(torch::equal(before.tensors()[i], t.theta.tensors()[i]));
        EXPECT_FALSE(t.theta.tensors()[i].grad().defined());
    }
}

TEST(Ascent, ZeroStepsIsIdentity) {
    auto t = make_toy();
    t.h.t_adv = 0;
    auto b = t.source.batch(torch::arange(5));
    auto a = run_ascent(t.theta, t.psi, b, t.h);
    EXPECT_TRUE(torch::equal(a.x_plus, b.images));
}

TEST(Ascent, TaskOnlyAscentRaisesTaskLoss) {
    auto t = make_toy();
    t.h.alpha = 0.0;
    t.h.beta = 0.0;
    t.h.gamma = 1e-2;
    t.h.t_adv = 5;
    auto b = t.source.batch(torch::arange(16));
    auto a = run_ascent(t.theta, t.psi, b, t.h);
    auto l0 = task_loss_per_sample(t.theta, b.images, b.labels, Mode::eval);
    auto l1 = task_loss_per_sample(t.theta, a.x_plus, b.labels, Mode::eval);
    EXPECT_TRUE((l1 > l0).all().item<bool>());
}

TEST(Ascent, NonFiniteGradientIsNumericalError) {
    auto t = make_toy();
    auto b = t.source.batch(torch::arange(3));
    auto a = make_adversarial_batch(t.theta, b);
    auto bad = [](const torch::Tensor& xp) { return (xp * std::numeric_limits<double>::infinity()).sum({1, 2, 3}); };
    auto embed = [&](const torch::Tensor& xp) { return forward_features(t.theta, xp, Mode::eval); };
    EXPECT_THROW(static_cast<void>(ascend_step_with(a, 1.0, bad, embed)), NumericalError);
}

TEST(GenerateDomain, SizeLabelsAndProvenance) {
    auto t = make_toy(torch::kFloat32);
    t.h.aug_fraction = 0.25;
    std::vector<Domain> pool{t.source};
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    auto d = generate_domain(t.theta, t.psi, pool, t.h, 2, gen);
    EXPECT_EQ(d.size(), 10);
    EXPECT_EQ(d.kind, DomainKind::augmented(2));
    EXPECT_NO_THROW(d.validate());
    ASSERT_TRUE(d.provenance.has_value());
    EXPECT_EQ(d.provenance->ascent_steps, t.h.t_adv);
    for (std::int64_t i = 0; i < d.size(); ++i) {
        const auto& o = d.provenance->origins[static_cast<std::size_t>(i)];
        ASSERT_EQ(o.rfind("src#", 0), 0u) << o;
        const auto src = std::stoll(o.substr(4));
        EXPECT_EQ(d.labels[i].item<std::int64_t>(), t.source.labels[src].item<std::int64_t>());
    }
}

TEST(GenerateDomain, DrawsFromWholePoolAndIsSeeded) {
    auto t = make_toy(torch::kFloat32);
    t.h.aug_fraction = 1.0;
    auto extra = test::random_domain(40, 3, 3, 1, 3, 9, "aug1");
    std::vector<Domain> pool{t.source, extra};
    auto g1 = at::make_generator<at::CPUGeneratorImpl>(5);
    auto g2 = at::make_generator<at::CPUGeneratorImpl>(5);
    auto a = generate_domain(t.theta, t.psi, pool, t.h, 1, g1);
    auto b = generate_domain(t.theta, t.psi, pool, t.h, 1, g2);
    EXPECT_EQ(a.size(), 40);
    EXPECT_TRUE(torch::equal(a.images, b.images));
    EXPECT_EQ(a.provenance->origins, b.provenance->origins);
    bool from_extra = false;
    for (const auto& o : a.provenance->origins) from_extra |= o.rfind("aug1#", 0) == 0;
    EXPECT_TRUE(from_extra);
}
