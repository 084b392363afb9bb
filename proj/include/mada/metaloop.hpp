#pragma once

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mada/augment.hpp"
#include "mada/checkpoint.hpp"
#include "mada/config.hpp"
#include "mada/datamodel.hpp"
#include "mada/error.hpp"
#include "mada/nets.hpp"
#include "mada/train_state.hpp"

namespace mada {

/// Epoch-wise shuffled minibatch indices over [0, n).
class BatchSampler {
public:
    BatchSampler(std::int64_t n, std::int64_t batch, at::Generator gen)
        : n_(n), batch_(std::min(batch, n)), gen_(std::move(gen)) {
        if (n_ <= 0) throw DataError("BatchSampler: empty domain");
    }

    [[nodiscard]] torch::Tensor next() {
        if (!perm_.defined() || pos_ + batch_ > n_) {
            perm_ = torch::randperm(n_, gen_, torch::kInt64);
            pos_ = 0;
        }
        auto out = perm_.slice(0, pos_, pos_ + batch_);
        pos_ += batch_;
        return out;
    }

private:
    std::int64_t n_;
    std::int64_t batch_;
    at::Generator gen_;
    torch::Tensor perm_;
    std::int64_t pos_{0};
};

namespace detail {

inline double global_norm(const std::vector<torch::Tensor>& grads) {
    double acc = 0.0;
    for (const auto& g : grads) acc += g.detach().to(torch::kFloat64).pow(2).sum().item<double>();
    return std::sqrt(acc);
}

inline std::vector<torch::Tensor> grads_or_zeros(const std::vector<torch::Tensor>& grads,
                                                 const std::vector<torch::Tensor>& params) {
    std::vector<torch::Tensor> out(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) {
        out[i] = grads[i].defined() ? grads[i] : torch::zeros_like(params[i]);
    }
    return out;
}

inline std::unique_ptr<torch::optim::Optimizer> make_optimizer(const HyperParams& h, std::vector<torch::Tensor> params,
                                                               double lr) {
    switch (h.optimizer) {
        case OptimizerKind::adam:
            return std::make_unique<torch::optim::Adam>(std::move(params), torch::optim::AdamOptions(lr));
        case OptimizerKind::sgd_nesterov:
            return std::make_unique<torch::optim::SGD>(
                std::move(params), torch::optim::SGDOptions(lr).momentum(h.momentum).nesterov(true));
    }
    return nullptr;
}

inline void apply_grads(torch::optim::Optimizer& opt, const std::vector<torch::Tensor>& params,
                        const std::vector<torch::Tensor>& grads) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_grad() = grads[i].detach();
    opt.step();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// WAE training
// ---------------------------------------------------------------------------

struct WaeTrainLog {
    double heldout_before{0.0};
    double heldout_after{0.0};
    std::vector<double> epoch_losses;
};

/// Mean per-element reconstruction error over `images`, in chunks.
[[nodiscard]] inline double mean_reconstruction_error(const WAEParams& psi, const torch::Tensor& images,
                                                      std::int64_t chunk = 512) {
    torch::NoGradGuard no_grad;
    if (images.size(0) == 0) return 0.0;
    double acc = 0.0;
    for (std::int64_t s = 0; s < images.size(0); s += chunk) {
        auto x = images.slice(0, s, std::min(images.size(0), s + chunk));
        acc += reconstruction_error(psi, x).sum().item<double>();
    }
    return acc / static_cast<double>(images.size(0));
}

/// Minimizes the WAE objective over `images` for `epochs` epochs (Adam, lr = wae_lr). With the GAN
/// divergence the latent critic takes one step before every auto-encoder step.
[[nodiscard]] inline WAEParams train_wae(const WAEParams& init, const torch::Tensor& images, std::int64_t epochs,
                                         const HyperParams& h, at::Generator& gen, WaeTrainLog* log = nullptr) {
    WAEParams psi = init.clone();
    if (epochs <= 0 || images.size(0) == 0) return psi;
    const bool use_critic = psi.divergence == Divergence::gan && h.lambda > 0.0 && !psi.critic.empty();
    torch::optim::Adam ae_opt(psi.autoencoder_tensors(), torch::optim::AdamOptions(h.wae_lr));
    std::unique_ptr<torch::optim::Adam> critic_opt;
    if (use_critic) {
        critic_opt = std::make_unique<torch::optim::Adam>(psi.critic.tensors(), torch::optim::AdamOptions(h.wae_lr));
    }
    BatchSampler sampler(images.size(0), h.wae_batch, gen);
    const auto per_epoch = (images.size(0) + h.wae_batch - 1) / h.wae_batch;
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::int64_t b = 0; b < per_epoch; ++b, ++step) {
            auto x = images.index_select(0, sampler.next());
            auto prior = sample_prior(x.size(0), psi.latent_dim, h.prior_sigma, gen, x.scalar_type());
            if (use_critic) {
                critic_opt->zero_grad();
                torch::Tensor q;
                {
                    torch::NoGradGuard no_grad;
                    q = wae_encode(psi, x);
                }
                auto closs = critic_loss(psi, q, prior);
                closs.backward();
                critic_opt->step();
            }
            ae_opt.zero_grad();
            auto loss = wae_objective(psi, x, h.lambda, prior);
            const auto value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw NumericalError("WAE training diverged at iteration " + std::to_string(step));
            }
            loss.backward();
            ae_opt.step();
            epoch_loss += value;
        }
        if (log != nullptr) log->epoch_losses.push_back(epoch_loss / static_cast<double>(per_epoch));
    }
    // Only the critic and auto-encoder optimizers touched .grad; clear it so frozen use starts clean.
    for (const auto& p : psi.named()) p.value.mutable_grad() = torch::Tensor();
    return psi;
}

/// Pre-trains V on the source. The last `wae_holdout_fraction` of the source is held out and its
/// reconstruction error is reported before and after.
[[nodiscard]] inline WAEParams pretrain_wae(const WAEParams& psi_init, const Domain& source, const HyperParams& h,
                                            at::Generator& gen, WaeTrainLog* log = nullptr) {
    if (source.empty()) throw DataError("pretrain_wae: empty source domain");
    const auto n = source.size();
    auto n_hold = static_cast<std::int64_t>(std::floor(h.wae_holdout_fraction * static_cast<double>(n)));
    if (n_hold >= n) n_hold = 0;
    auto train = source.images.slice(0, 0, n - n_hold);
    auto hold = source.images.slice(0, n - n_hold, n);
    WaeTrainLog local;
    auto& lg = log != nullptr ? *log : local;
    lg.heldout_before = mean_reconstruction_error(psi_init, hold);
    auto psi = train_wae(psi_init, train, h.wae_epochs, h, gen, &lg);
    lg.heldout_after = mean_reconstruction_error(psi, hold);
    return psi;
}

/// Continues WAE training with S⁺_k, on S ∪ S⁺_k when `wae_retrain_union` is set, for
/// round(wae_retrain_fraction * wae_epochs) epochs.
[[nodiscard]] inline WAEParams retrain_wae(const WAEParams& psi, const Domain& new_domain, const Domain& source,
                                           const HyperParams& h, at::Generator& gen, WaeTrainLog* log = nullptr) {
    const auto epochs = static_cast<std::int64_t>(std::llround(h.wae_retrain_fraction * static_cast<double>(h.wae_epochs)));
    auto images = h.wae_retrain_union ? torch::cat({source.images, new_domain.images}, 0) : new_domain.images;
    return train_wae(psi, images, epochs, h, gen, log);
}

// ---------------------------------------------------------------------------
// Meta-train / meta-test / meta-update
// ---------------------------------------------------------------------------

/// θ̂ after `steps` plain gradient steps of size `eta` on `loss(θ)`. In full_second_order mode
/// θ̂ stays differentiable w.r.t. θ through the gradients; in first_order mode the gradients are
/// constants, so dθ̂/dθ = I. θ itself is never modified.
template <typename LossFn>
[[nodiscard]] TaskParams inner_update(const TaskParams& theta, LossFn&& loss, double eta, std::int64_t steps,
                                      MetaGradMode mode) {
    const bool second = mode == MetaGradMode::full_second_order;
    auto current = theta.tensors();
    for (std::int64_t s = 0; s < steps; ++s) {
        auto l = loss(theta.with_tensors(current));
        auto g = detail::grads_or_zeros(torch::autograd::grad({l}, current, {}, second, second, true), current);
        for (std::size_t i = 0; i < current.size(); ++i) {
            current[i] = current[i] - eta * (second ? g[i] : g[i].detach());
        }
    }
    return theta.with_tensors(current);
}

/// θ̂ ← θ - η ∇θ L_task(θ; S), repeated `inner_steps` times on the given source batch.
[[nodiscard]] inline TaskParams meta_train_step(const TaskParams& theta, const Batch& source_batch,
                                                const HyperParams& h) {
    if (h.inner_steps < 1) throw ConfigError("inner_steps", "must be >= 1");
    return inner_update(
        theta, [&](const TaskParams& p) { return task_loss(p, source_batch); }, h.eta, h.inner_steps,
        h.meta_grad_mode);
}

/// Mean task loss of θ̂ on each augmented batch (differentiable scalars, one per domain).
[[nodiscard]] inline std::vector<torch::Tensor> meta_test_losses(const TaskParams& theta_hat,
                                                                 std::span<const Batch> augmented) {
    std::vector<torch::Tensor> out;
    if (augmented.empty()) return out;
    std::vector<torch::Tensor> xs;
    std::vector<torch::Tensor> ys;
    for (const auto& b : augmented) {
        if (b.size() == 0) throw DataError("meta_test_losses: empty augmented domain");
        xs.push_back(b.images);
        ys.push_back(b.labels);
    }
    auto per = task_loss_per_sample(theta_hat, torch::cat(xs, 0), torch::cat(ys, 0));
    std::int64_t offset = 0;
    for (const auto& b : augmented) {
        out.push_back(per.slice(0, offset, offset + b.size()).mean());
        offset += b.size();
    }
    return out;
}

/// Whole-domain variant: per-domain mean loss at θ̂, evaluated in chunks without gradients.
[[nodiscard]] inline std::vector<double> meta_test_losses(const TaskParams& theta_hat, std::span<const Domain> augmented,
                                                          std::int64_t chunk = 256) {
    torch::NoGradGuard no_grad;
    std::vector<double> out;
    for (const auto& d : augmented) {
        if (d.empty()) throw DataError("meta_test_losses: empty augmented domain " + d.id);
        double acc = 0.0;
        for (std::int64_t s = 0; s < d.size(); s += chunk) {
            const auto e = std::min(d.size(), s + chunk);
            acc += task_loss_per_sample(theta_hat, d.images.slice(0, s, e), d.labels.slice(0, s, e), Mode::eval)
                       .sum()
                       .item<double>();
        }
        out.push_back(acc / static_cast<double>(d.size()));
    }
    return out;
}

/// Gradient of L_task(θ; S) + Σ_k L_task(θ̂; S⁺_k) w.r.t. θ, plus the pieces that went into it.
struct MetaGradient {
    std::vector<torch::Tensor> grads;
    double source_loss{0.0};
    std::vector<double> test_losses;
    double grad_norm{0.0};
};

[[nodiscard]] inline MetaGradient meta_gradient(const TaskParams& theta, const Batch& source_batch,
                                                std::span<const Batch> augmented, const HyperParams& h) {
    const auto params = theta.tensors();
    MetaGradient out;
    auto source_loss = task_loss(theta, source_batch);
    out.source_loss = source_loss.item<double>();
    if (augmented.empty()) {
        out.grads = detail::grads_or_zeros(torch::autograd::grad({source_loss}, params, {}, false, false, true), params);
    } else {
        const bool second = h.meta_grad_mode == MetaGradMode::full_second_order;
        auto g0 = detail::grads_or_zeros(torch::autograd::grad({source_loss}, params, {}, true, second, true), params);
        std::vector<torch::Tensor> current(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) current[i] = params[i] - h.eta * (second ? g0[i] : g0[i].detach());
        auto theta_hat = theta.with_tensors(current);
        if (h.inner_steps > 1) {
            theta_hat = inner_update(
                theta_hat, [&](const TaskParams& p) { return task_loss(p, source_batch); }, h.eta, h.inner_steps - 1,
                h.meta_grad_mode);
        }
        auto tests = meta_test_losses(theta_hat, augmented);
        auto total = tests.front();
        for (std::size_t k = 1; k < tests.size(); ++k) total = total + tests[k];
        for (const auto& t : tests) out.test_losses.push_back(t.item<double>());
        auto gt = detail::grads_or_zeros(torch::autograd::grad({total}, params, {}, false, false, true), params);
        out.grads.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) out.grads[i] = (g0[i] + gt[i]).detach();
    }
    out.grad_norm = detail::global_norm(out.grads);
    if (!std::isfinite(out.grad_norm)) throw NumericalError("meta_update: non-finite combined gradient");
    return out;
}

/// θ ← θ - η ∇θ [L_task(θ; S) + Σ_k L_task(θ̂; S⁺_k)] as a plain gradient step. Returns new leaves.
[[nodiscard]] inline TaskParams meta_update(const TaskParams& theta, const Batch& source_batch,
                                            std::span<const Batch> augmented, const HyperParams& h,
                                            MetaGradient* info = nullptr) {
    auto mg = meta_gradient(theta, source_batch, augmented, h);
    auto params = theta.tensors();
    std::vector<torch::Tensor> next(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        next[i] = (params[i].detach() - h.eta * mg.grads[i]).requires_grad_(true);
    }
    if (info != nullptr) *info = std::move(mg);
    return theta.with_tensors(next);
}

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

struct RunOptions {
    std::optional<WAEParams> wae;          // pre-trained V; trained on the source when absent
    std::filesystem::path checkpoint_dir;  // round-boundary and final checkpoints; empty = none
    std::filesystem::path metrics_log;     // JSON-lines metrics; empty = none
    std::function<void(const MetricRecord&)> on_iteration;
    std::function<void(const MetaRoundReport&)> on_round;
};

/// Iteration at which augmentation round k (1-based) starts: floor(k * total / (K + 1)).
[[nodiscard]] inline std::int64_t round_start(std::int64_t k, std::int64_t k_domains, std::int64_t total) {
    return (k * total) / (k_domains + 1);
}

namespace detail {

class MetricsLog {
public:
    explicit MetricsLog(const std::filesystem::path& path) {
        if (path.empty()) return;
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::app);
        if (!out_) throw DataError("cannot open metrics log " + path.string());
    }

    void write(const nlohmann::json& record) {
        if (!out_.is_open()) return;
        out_ << record.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

inline nlohmann::json to_json(const MetricRecord& r) {
    nlohmann::json j;
    j["iteration"] = r.iteration;
    j["source_loss"] = r.source_loss;
    j["meta_test_losses"] = r.meta_test_losses;
    j["grad_norm"] = r.grad_norm;
    if (r.round > 0) j["round"] = r.round;
    return j;
}

inline TrainState fresh_state(const Domain& source, const HyperParams& h) {
    static_cast<void>(validate_config(h, source.signature()));
    source.validate();
    TrainState st;
    st.rng = RngStreams::from_seed(h.seed);
    st.theta = init_task_params(ArchSpec::from(h, source.signature()), st.rng.init);
    return st;
}

}  // namespace detail

/// Baseline: plain cross-entropy training on the source with the configured optimizer.
[[nodiscard]] inline TrainState train_erm(const Domain& source, const HyperParams& h,
                                          const std::function<void(const MetricRecord&)>& on_iteration = {}) {
    auto st = detail::fresh_state(source, h);
    auto params = st.theta.tensors();
    auto opt = detail::make_optimizer(h, params, h.eta);
    BatchSampler sampler(source.size(), h.batch_size, st.rng.data);
    for (std::int64_t it = 0; it < h.iterations; ++it) {
        auto batch = source.batch(sampler.next());
        auto loss = task_loss(st.theta, batch);
        auto grads = detail::grads_or_zeros(torch::autograd::grad({loss}, params, {}, false, false, true), params);
        MetricRecord rec{it, loss.item<double>(), {}, detail::global_norm(grads), 0};
        if (!std::isfinite(rec.grad_norm)) throw NumericalError("erm: non-finite gradient at iteration " + std::to_string(it));
        detail::apply_grads(*opt, params, grads);
        st.history.push_back(rec);
        st.iteration = it + 1;
        if (on_iteration) on_iteration(rec);
    }
    return st;
}

/// Full M-ADA training. Round k (k = 1..K) starts at iteration floor(k T / (K+1)): it generates
/// S⁺_k from S ∪ S⁺_1..S⁺_{k-1}, re-trains V, then every following iteration is a meta-train /
/// meta-test / meta-update step over all augmented domains so far. With K = 0 this is ERM.
[[nodiscard]] inline TrainState run_mada(const Domain& source, const HyperParams& h, const RunOptions& opts = {}) {
    auto st = detail::fresh_state(source, h);
    const auto sig = source.signature();
    if (h.k_domains > 0) {
        if (opts.wae) {
            if (opts.wae->input != sig) throw DataError("run_mada: WAE input signature does not match the source");
            st.psi = opts.wae->clone();
        } else {
            st.psi = pretrain_wae(init_wae_params(h, sig, st.rng.wae), source, h, st.rng.wae);
        }
    }
    auto params = st.theta.tensors();
    auto opt = detail::make_optimizer(h, params, h.eta);
    BatchSampler sampler(source.size(), h.batch_size, st.rng.data);
    std::vector<BatchSampler> aug_samplers;
    detail::MetricsLog log(opts.metrics_log);
    CheckpointInfo info{0, h};

    std::int64_t next_round = 1;
    for (std::int64_t it = 0; it < h.iterations; ++it) {
        int closing_round = 0;
        double round_wall = 0.0;
        while (next_round <= h.k_domains && it == round_start(next_round, h.k_domains, h.iterations)) {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<Domain> pool{source};
            pool.insert(pool.end(), st.augmented.begin(), st.augmented.end());
            auto fresh = generate_domain(st.theta, st.psi, pool, h, static_cast<int>(next_round), st.rng.augment);
            st.psi = retrain_wae(st.psi, fresh, source, h, st.rng.wae);
            aug_samplers.emplace_back(fresh.size(), h.batch_size, st.rng.meta);
            st.augmented.push_back(std::move(fresh));
            closing_round = static_cast<int>(next_round);
            round_wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            ++next_round;
        }

        const auto t0 = std::chrono::steady_clock::now();
        auto batch = source.batch(sampler.next());
        std::vector<Batch> aug_batches;
        for (std::size_t k = 0; k < st.augmented.size(); ++k) aug_batches.push_back(st.augmented[k].batch(aug_samplers[k].next()));
        auto mg = meta_gradient(st.theta, batch, aug_batches, h);
        detail::apply_grads(*opt, params, mg.grads);

        MetricRecord rec{it, mg.source_loss, mg.test_losses, mg.grad_norm, closing_round};
        st.history.push_back(rec);
        st.iteration = it + 1;
        log.write(detail::to_json(rec));
        if (opts.on_iteration) opts.on_iteration(rec);
        if (closing_round > 0) {
            round_wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            MetaRoundReport report{closing_round, mg.source_loss, mg.test_losses, mg.grad_norm, round_wall};
            st.rounds.push_back(report);
            if (opts.on_round) opts.on_round(report);
            if (!opts.checkpoint_dir.empty()) {
                info.iteration = st.iteration;
                save_checkpoint(opts.checkpoint_dir, &st.theta, h.k_domains > 0 ? &st.psi : nullptr, info);
            }
        }
    }
    if (!opts.checkpoint_dir.empty()) {
        info.iteration = st.iteration;
        save_checkpoint(opts.checkpoint_dir, &st.theta, h.k_domains > 0 ? &st.psi : nullptr, info);
    }
    return st;
}

}  // namespace mada
