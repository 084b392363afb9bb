#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mada/config.hpp"
#include "mada/datamodel.hpp"
#include "mada/error.hpp"
#include "mada/nets.hpp"

namespace mada {

/// Value standing in for +∞ in the semantic-consistency penalty: the largest finite
/// value of the tensor's scalar type.
[[nodiscard]] inline double const_sentinel(torch::Dtype dtype) {
    return dtype == torch::kFloat64 ? std::numeric_limits<double>::max()
                                    : static_cast<double>(std::numeric_limits<float>::max());
}

/// Perturbed samples x⁺ with the labels and embeddings of the samples they started from.
struct AdversarialBatch {
    torch::Tensor x;       // starting images, N x H x W x C
    torch::Tensor z;       // F(x), fixed
    torch::Tensor x_plus;  // current perturbation, clamped to [0,1]
    torch::Tensor z_plus;  // F(x_plus), refreshed after every step
    torch::Tensor labels;  // inherited from x
    std::int64_t n_classes{0};
    std::vector<std::string> origins;
    std::int64_t steps{0};
    double gamma{0.0};

    [[nodiscard]] std::int64_t size() const { return x.size(0); }
    [[nodiscard]] torch::Tensor labels_onehot() const { return onehot(labels, n_classes, x.scalar_type()); }
};

namespace detail {

inline TaskParams frozen(const TaskParams& theta) {
    std::vector<torch::Tensor> values;
    for (const auto& t : theta.tensors()) values.push_back(t.detach());
    return theta.with_tensors(values);
}

inline WAEParams frozen(const WAEParams& psi) {
    WAEParams out = psi;
    for (auto* s : {&out.encoder, &out.decoder, &out.critic}) {
        for (auto& l : s->layers) l.value = l.value.detach();
    }
    return out;
}

}  // namespace detail

/// Starts an ascent at x⁺₀ = x.
[[nodiscard]] inline AdversarialBatch make_adversarial_batch(const TaskParams& theta, const Batch& batch,
                                                             std::vector<std::string> origins = {}) {
    batch.validate();
    torch::NoGradGuard no_grad;
    AdversarialBatch a;
    a.x = batch.images.detach();
    a.x_plus = a.x.clone();
    a.labels = batch.labels;
    a.n_classes = batch.n_classes;
    a.z = forward_features(theta, a.x, Mode::eval).detach();
    a.z_plus = a.z.clone();
    a.origins = std::move(origins);
    return a;
}

/// Per-sample ½|z - z⁺|², or the sentinel where the labels differ.
[[nodiscard]] inline torch::Tensor loss_const_per_sample(const torch::Tensor& z, const torch::Tensor& z_plus,
                                                         const torch::Tensor& y, const torch::Tensor& y_plus) {
    TORCH_CHECK(z.sizes() == z_plus.sizes(), "loss_const: embedding shapes differ");
    auto half_sq = 0.5 * (z - z_plus).pow(2).sum(1);
    auto mismatch = y.ne(y_plus);
    if (mismatch.any().item<bool>()) {
        auto sentinel = torch::full_like(half_sq, const_sentinel(half_sq.scalar_type()));
        return torch::where(mismatch, sentinel, half_sq);
    }
    return half_sq;
}

/// Batch mean of ½|z - z⁺|²; the sentinel if any label differs.
[[nodiscard]] inline torch::Tensor loss_const(const torch::Tensor& z, const torch::Tensor& z_plus,
                                              const torch::Tensor& y, const torch::Tensor& y_plus) {
    auto per = loss_const_per_sample(z, z_plus, y, y_plus);
    if (y.ne(y_plus).any().item<bool>()) {
        return torch::full({}, const_sentinel(per.scalar_type()), per.options());
    }
    return per.mean();
}

/// Per-sample relaxation term, mean over the elements of each sample.
[[nodiscard]] inline torch::Tensor loss_relax_per_sample(const WAEParams& psi, const torch::Tensor& x_plus,
                                                         RelaxVariant variant, const torch::Tensor& x) {
    const auto n = x_plus.size(0);
    switch (variant) {
        case RelaxVariant::recon_of_xplus:
            return (x_plus - wae_reconstruct(psi, x_plus)).pow(2).reshape({n, -1}).mean(1);
        case RelaxVariant::recon_delta: {
            if (x.sizes() != x_plus.sizes()) throw DataError("loss_relax: x and x_plus shapes differ");
            torch::Tensor v_x;
            {
                torch::NoGradGuard no_grad;
                v_x = wae_reconstruct(psi, x);
            }
            return (v_x - wae_reconstruct(psi, x_plus)).pow(2).reshape({n, -1}).mean(1);
        }
    }
    return {};
}

/// mean |x⁺ - V(x⁺)|² (recon_of_xplus) or mean |V(x) - V(x⁺)|² (recon_delta).
[[nodiscard]] inline torch::Tensor loss_relax(const WAEParams& psi, const torch::Tensor& x_plus, RelaxVariant variant,
                                              const torch::Tensor& x) {
    return loss_relax_per_sample(psi, x_plus, variant, x).mean();
}

/// Per-sample L_ADA = L_task(θ; x⁺) - α L_const + β L_relax.
/// `z` is F(x); pass an undefined tensor to have it computed.
[[nodiscard]] inline torch::Tensor loss_ada_per_sample(const TaskParams& theta, const WAEParams& psi,
                                                       const torch::Tensor& x_plus, const torch::Tensor& x,
                                                       const torch::Tensor& labels, const HyperParams& h,
                                                       torch::Tensor z = {}) {
    if (!z.defined()) {
        torch::NoGradGuard no_grad;
        z = forward_features(theta, x, Mode::eval);
    }
    auto z_plus = forward_features(theta, x_plus, Mode::eval);
    auto logits = forward_logits(theta, z_plus);
    auto task = cross_entropy_logits_per_sample(onehot(labels, theta.arch.input.n_classes, logits.scalar_type()), logits);
    auto total = task;
    if (h.alpha != 0.0) total = total - h.alpha * loss_const_per_sample(z, z_plus, labels, labels);
    if (h.beta != 0.0) total = total + h.beta * loss_relax_per_sample(psi, x_plus, h.relax_variant, x);
    return total;
}

[[nodiscard]] inline torch::Tensor loss_ada(const TaskParams& theta, const WAEParams& psi, const torch::Tensor& x_plus,
                                            const torch::Tensor& x, const torch::Tensor& labels, const HyperParams& h) {
    return loss_ada_per_sample(theta, psi, x_plus, x, labels, h).mean();
}

/// One step x⁺ ← clamp(x⁺ + γ ∇ objective, 0, 1) where `objective(x⁺)` returns per-sample values;
/// each sample moves along the gradient of its own value.
template <typename Objective, typename Embed>
[[nodiscard]] AdversarialBatch ascend_step_with(const AdversarialBatch& batch, double gamma, Objective&& objective,
                                                Embed&& embed) {
    torch::AutoGradMode grad_on(true);
    AdversarialBatch out = batch;
    auto x_plus = batch.x_plus.detach().clone().requires_grad_(true);
    auto values = objective(x_plus);
    auto grad = torch::autograd::grad({values.sum()}, {x_plus})[0];
    auto finite = torch::isfinite(grad).reshape({grad.size(0), -1}).all(1);
    if (!finite.all().template item<bool>()) {
        const auto bad = (~finite).nonzero()[0][0].template item<std::int64_t>();
        throw NumericalError("ascent: non-finite gradient at sample " + std::to_string(bad));
    }
    {
        torch::NoGradGuard no_grad;
        out.x_plus = torch::clamp(x_plus.detach() + gamma * grad, 0.0, 1.0);
        out.z_plus = embed(out.x_plus).detach();
    }
    out.steps = batch.steps + 1;
    out.gamma = gamma;
    return out;
}

/// One ascent step on L_ADA with θ and ψ held fixed.
[[nodiscard]] inline AdversarialBatch ascend_step(const TaskParams& theta, const WAEParams& psi,
                                                  const AdversarialBatch& batch, const HyperParams& h) {
    const auto theta_c = detail::frozen(theta);
    const auto psi_c = detail::frozen(psi);
    return ascend_step_with(
        batch, h.gamma,
        [&](const torch::Tensor& xp) { return loss_ada_per_sample(theta_c, psi_c, xp, batch.x, batch.labels, h, batch.z); },
        [&](const torch::Tensor& xp) { return forward_features(theta_c, xp, Mode::eval); });
}

/// Runs `h.t_adv` ascent steps from x⁺₀ = x.
[[nodiscard]] inline AdversarialBatch run_ascent(const TaskParams& theta, const WAEParams& psi, const Batch& batch,
                                                 const HyperParams& h, std::vector<std::string> origins = {}) {
    auto a = make_adversarial_batch(theta, batch, std::move(origins));
    a.gamma = h.gamma;
    for (std::int64_t t = 0; t < h.t_adv; ++t) a = ascend_step(theta, psi, a, h);
    return a;
}

/// Builds S⁺_k from the pool S ∪ S⁺_1 ∪ ... ∪ S⁺_{k-1}. `pool.front()` must be the source; the new
/// domain holds round(aug_fraction * |S|) samples drawn uniformly without replacement from the pool,
/// processed in pool order.
[[nodiscard]] inline Domain generate_domain(const TaskParams& theta, const WAEParams& psi, std::span<const Domain> pool,
                                            const HyperParams& h, int k, at::Generator& gen) {
    if (pool.empty()) throw DataError("generate_domain: empty pool");
    std::int64_t total = 0;
    for (const auto& d : pool) total += d.size();
    if (total == 0) throw DataError("generate_domain: empty pool");
    const auto& source = pool.front();
    const auto wanted = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::llround(h.aug_fraction * static_cast<double>(source.size()))));
    const auto n = std::min(wanted, total);

    auto picked = torch::randperm(total, gen, torch::kInt64).slice(0, 0, n);
    picked = std::get<0>(picked.sort());
    const auto* idx = picked.data_ptr<std::int64_t>();

    // Map a flat pool index to (domain, local index).
    std::vector<std::int64_t> offsets;
    std::int64_t acc = 0;
    for (const auto& d : pool) {
        offsets.push_back(acc);
        acc += d.size();
    }
    auto locate = [&](std::int64_t flat) {
        std::size_t di = pool.size() - 1;
        while (offsets[di] > flat) --di;
        return std::pair{di, flat - offsets[di]};
    };

    std::vector<torch::Tensor> xs;
    std::vector<torch::Tensor> ys;
    std::vector<std::string> origins;
    xs.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        auto [di, li] = locate(idx[i]);
        xs.push_back(pool[di].images[li]);
        ys.push_back(pool[di].labels[li]);
        origins.push_back(pool[di].id + "#" + std::to_string(li));
    }
    auto all_x = torch::stack(xs);
    auto all_y = torch::stack(ys);

    std::vector<torch::Tensor> out_x;
    for (std::int64_t start = 0; start < n; start += h.batch_size) {
        const auto stop = std::min(n, start + h.batch_size);
        Batch b{all_x.slice(0, start, stop), all_y.slice(0, start, stop), source.n_classes};
        out_x.push_back(run_ascent(theta, psi, b, h).x_plus);
    }

    Domain d;
    d.id = "augmented-" + std::to_string(k);
    d.kind = DomainKind::augmented(k);
    d.images = torch::cat(out_x, 0).contiguous();
    d.labels = all_y.contiguous();
    d.n_classes = source.n_classes;
    d.provenance = AugmentProvenance{std::move(origins), h.t_adv, h.gamma, h.alpha, h.beta};
    return d;
}

}  // namespace mada
