#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "mada/nets.hpp"

namespace mada {

/// Independent random streams, all derived from the run seed, so that turning a
/// feature off (e.g. K = 0) never shifts the draws of another.
struct RngStreams {
    at::Generator init;     // parameter initialization
    at::Generator data;     // source minibatch order
    at::Generator augment;  // pool sampling for augmented domains
    at::Generator meta;     // minibatches drawn from augmented domains
    at::Generator wae;      // WAE init, shuffling and prior samples

    static RngStreams from_seed(std::uint64_t seed) {
        auto make = [seed](std::uint64_t stream) {
            return at::make_generator<at::CPUGeneratorImpl>(seed * 0x9E3779B97F4A7C15ULL + stream);
        };
        return {make(1), make(2), make(3), make(4), make(5)};
    }
};

/// One row of the per-iteration metrics log.
struct MetricRecord {
    std::int64_t iteration{0};
    double source_loss{0.0};
    std::vector<double> meta_test_losses;
    double grad_norm{0.0};
    int round{0};  // > 0 on the iteration that closes augmentation round `round`

    bool operator==(const MetricRecord&) const = default;
};

/// Summary of one augmentation round.
struct MetaRoundReport {
    int round{0};
    double meta_train_loss{0.0};
    std::vector<double> meta_test_losses;  // one per augmented domain S⁺_1..S⁺_k
    double combined_grad_norm{0.0};
    double wall_time{0.0};                 // seconds; excluded from equality

    [[nodiscard]] bool same_metrics(const MetaRoundReport& o) const {
        return round == o.round && meta_train_loss == o.meta_train_loss && meta_test_losses == o.meta_test_losses &&
               combined_grad_norm == o.combined_grad_norm;
    }
};

struct TrainState {
    TaskParams theta;
    WAEParams psi;
    std::int64_t iteration{0};
    RngStreams rng;
    std::vector<MetricRecord> history;
    std::vector<MetaRoundReport> rounds;
    std::vector<Domain> augmented;
};

}  // namespace mada
