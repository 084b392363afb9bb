#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>

#include "mada/mada.hpp"

namespace mada::test {

/// Random domain of n images h x w x c in [0,1] with labels cycling through the classes.
inline Domain random_domain(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t c, std::int64_t classes,
                            std::uint64_t seed, std::string id = "rand") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    Domain d;
    d.id = std::move(id);
    d.images = torch::rand({n, h, w, c}, gen);
    d.labels = torch::arange(n, torch::kInt64).remainder(classes);
    d.n_classes = classes;
    return d;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("mada-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    [[nodiscard]] const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Toy-MLP hyper-parameters sized for quick tests.
inline HyperParams toy_params() {
    HyperParams h;
    h.arch = ArchTag::toy_mlp;
    h.mlp_hidden = 0;
    h.mlp_embed = 4;
    h.batch_size = 8;
    h.iterations = 20;
    h.eta = 1e-2;
    h.k_domains = 0;
    h.t_adv = 3;
    h.gamma = 0.1;
    h.wae_latent = 4;
    h.wae_hidden = 16;
    h.critic_hidden = 8;
    h.wae_epochs = 2;
    h.wae_batch = 16;
    return h;
}

}  // namespace mada::test
