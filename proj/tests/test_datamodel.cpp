#include <gtest/gtest.h>

#include <vector>

#include "support.hpp"

using namespace mada;

TEST(Onehot, RowsSumToOneAtLabel) {
    std::vector<std::int64_t> labels{2, 0, 1, 2};
    auto y = onehot(labels, 3);
    ASSERT_EQ(y.sizes(), (std::vector<std::int64_t>{4, 3}));
    EXPECT_TRUE(y.sum(1).eq(1).all().item<bool>());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        EXPECT_EQ(y[static_cast<std::int64_t>(i)][labels[i]].item<float>(), 1.0f);
    }
}

TEST(Onehot, RejectsOutOfRangeLabels) {
    std::vector<std::int64_t> labels{0, 3};
    EXPECT_THROW(static_cast<void>(onehot(labels, 3)), DataError);
    std::vector<std::int64_t> negative{-1};
    EXPECT_THROW(static_cast<void>(onehot(negative, 3)), DataError);
    EXPECT_THROW(static_cast<void>(onehot(labels, 0)), DataError);
}

TEST(Domain, ValidateAcceptsWellFormed) {
    auto d = test::random_domain(6, 4, 4, 3, 3, 1);
    EXPECT_NO_THROW(d.validate());
    EXPECT_EQ(d.signature(), (ShapeSignature{4, 4, 3, 3}));
    EXPECT_EQ(d.signature().pixels(), 48);
}

TEST(Domain, ValidateRejectsPixelsOutsideUnitRange) {
    auto d = test::random_domain(4, 2, 2, 1, 2, 1);
    d.images[0][0][0][0] = 1.5f;
    EXPECT_THROW(d.validate(), DataError);
}

TEST(Domain, ValidateRejectsLabelMismatch) {
    auto d = test::random_domain(4, 2, 2, 1, 2, 1);
    d.labels = d.labels.slice(0, 0, 3);
    EXPECT_THROW(d.validate(), DataError);
    auto e = test::random_domain(4, 2, 2, 1, 2, 1);
    e.labels[0] = 5;
    EXPECT_THROW(e.validate(), DataError);
}

TEST(Domain, ProvenanceMustCoverEverySample) {
    auto d = test::random_domain(3, 2, 2, 1, 2, 1);
    d.kind = DomainKind::augmented(1);
    d.provenance = AugmentProvenance{{"s#0", "s#1"}, 5, 1.0, 1.0, 2000.0};
    EXPECT_THROW(d.validate(), DataError);
    d.provenance->origins.push_back("s#2");
    EXPECT_NO_THROW(d.validate());
}

TEST(DomainKind, AugmentedRoundStartsAtOne) {
    EXPECT_THROW(static_cast<void>(DomainKind::augmented(0)), DataError);
    EXPECT_EQ(DomainKind::augmented(2).round, 2);
    EXPECT_EQ(DomainKind::augmented(2).str(), "augmented");
}

TEST(Domain, BatchSelectsRowsInOrder) {
    auto d = test::random_domain(10, 2, 2, 1, 5, 3);
    auto idx = torch::tensor({7, 1, 4}, torch::kInt64);
    auto b = d.batch(idx);
    EXPECT_EQ(b.size(), 3);
    EXPECT_TRUE(torch::equal(b.images[0], d.images[7]));
    EXPECT_EQ(b.labels[2].item<std::int64_t>(), d.labels[4].item<std::int64_t>());
    EXPECT_TRUE(torch::equal(b.labels_onehot().argmax(1), b.labels));
}

TEST(Domain, ConcatPreservesOrderAndChecksSignature) {
    auto a = test::random_domain(3, 2, 2, 1, 2, 1, "a");
    auto b = test::random_domain(2, 2, 2, 1, 2, 2, "b");
    std::vector<Domain> parts{a, b};
    auto c = concat_domains(parts, "ab");
    EXPECT_EQ(c.size(), 5);
    EXPECT_TRUE(torch::equal(c.images[3], b.images[0]));
    auto bad = test::random_domain(2, 3, 3, 1, 2, 2, "bad");
    std::vector<Domain> mixed{a, bad};
    EXPECT_THROW(static_cast<void>(concat_domains(mixed, "x")), DataError);
    EXPECT_THROW(static_cast<void>(concat_domains(std::span<const Domain>{}, "x")), DataError);
}

TEST(Batch, ValidateRejectsEmpty) {
    Batch b{torch::zeros({0, 2, 2, 1}), torch::zeros({0}, torch::kInt64), 2};
    EXPECT_THROW(b.validate(), DataError);
}
