#pragma once

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mada/config.hpp"
#include "mada/datamodel.hpp"
#include "mada/error.hpp"

namespace mada {

struct NamedTensor {
    std::string name;
    torch::Tensor value;
};

using ParamList = std::vector<NamedTensor>;

/// Batch-norm uses batch statistics in `train` and running statistics in `eval`.
enum class Mode { train, eval };

/// Lower clamp applied to probabilities before the log in the cross-entropy.
inline constexpr double kLogEpsilon = 1e-12;

/// Shape of a task model. Widths that do not apply to `tag` are ignored.
struct ArchSpec {
    ArchTag tag{ArchTag::digits_convnet};
    ShapeSignature input{};
    std::int64_t conv1_channels{64};
    std::int64_t conv2_channels{128};
    std::int64_t fc_width{1024};
    std::int64_t mlp_hidden{0};
    std::int64_t mlp_embed{16};

    static ArchSpec from(const HyperParams& h, const ShapeSignature& sig) {
        return {h.arch, sig, h.conv1_channels, h.conv2_channels, h.fc_width, h.mlp_hidden, h.mlp_embed};
    }

    [[nodiscard]] std::int64_t embedding_dim() const {
        switch (tag) {
            case ArchTag::digits_convnet: return fc_width;
            case ArchTag::wrn_16_4: return 256;
            case ArchTag::toy_mlp: return mlp_embed;
        }
        return 0;
    }

    bool operator==(const ArchSpec&) const = default;
};

namespace detail {

inline torch::Tensor to_nchw(const torch::Tensor& x) { return x.permute({0, 3, 1, 2}).contiguous(); }
inline torch::Tensor to_nhwc(const torch::Tensor& x) { return x.permute({0, 2, 3, 1}).contiguous(); }

// Default PyTorch layer init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline torch::Tensor uniform_init(torch::IntArrayRef shape, std::int64_t fan_in, at::Generator& gen,
                                  torch::Dtype dtype) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return torch::rand(shape, gen, torch::TensorOptions().dtype(dtype)) * (2.0 * bound) - bound;
}

inline void add_linear(ParamList& out, const std::string& name, std::int64_t in, std::int64_t outw,
                       at::Generator& gen, torch::Dtype dtype) {
    out.push_back({name + ".weight", uniform_init({outw, in}, in, gen, dtype)});
    out.push_back({name + ".bias", uniform_init({outw}, in, gen, dtype)});
}

inline void add_conv(ParamList& out, const std::string& name, std::int64_t in, std::int64_t outc, std::int64_t k,
                     bool bias, at::Generator& gen, torch::Dtype dtype) {
    const auto fan_in = in * k * k;
    out.push_back({name + ".weight", uniform_init({outc, in, k, k}, fan_in, gen, dtype)});
    if (bias) out.push_back({name + ".bias", uniform_init({outc}, fan_in, gen, dtype)});
}

inline void add_bn(ParamList& params, ParamList& buffers, const std::string& name, std::int64_t c,
                   torch::Dtype dtype) {
    const auto opts = torch::TensorOptions().dtype(dtype);
    params.push_back({name + ".weight", torch::ones({c}, opts)});
    params.push_back({name + ".bias", torch::zeros({c}, opts)});
    buffers.push_back({name + ".running_mean", torch::zeros({c}, opts)});
    buffers.push_back({name + ".running_var", torch::ones({c}, opts)});
}

// Walks a ParamList in construction order.
class Cursor {
public:
    explicit Cursor(const ParamList& list) : list_(list) {}
    const torch::Tensor& next() {
        TORCH_CHECK(pos_ < list_.size(), "parameter list exhausted");
        return list_[pos_++].value;
    }
    [[nodiscard]] bool done() const { return pos_ == list_.size(); }

private:
    const ParamList& list_;
    std::size_t pos_{0};
};

}  // namespace detail

/// Parameters of the task model: feature extractor F followed by classifier C.
struct TaskParams {
    ArchSpec arch;
    ParamList feature;
    ParamList classifier;
    ParamList buffers;

    [[nodiscard]] std::int64_t embedding_dim() const { return arch.embedding_dim(); }

    [[nodiscard]] std::vector<torch::Tensor> tensors() const {
        std::vector<torch::Tensor> out;
        out.reserve(feature.size() + classifier.size());
        for (const auto& p : feature) out.push_back(p.value);
        for (const auto& p : classifier) out.push_back(p.value);
        return out;
    }

    [[nodiscard]] ParamList named() const {
        ParamList out = feature;
        out.insert(out.end(), classifier.begin(), classifier.end());
        return out;
    }

    /// Same structure, new tensors (in `tensors()` order). Buffers are shared.
    [[nodiscard]] TaskParams with_tensors(const std::vector<torch::Tensor>& values) const {
        TORCH_CHECK(values.size() == feature.size() + classifier.size(), "with_tensors: wrong tensor count");
        TaskParams out = *this;
        std::size_t i = 0;
        for (auto& p : out.feature) p.value = values[i++];
        for (auto& p : out.classifier) p.value = values[i++];
        return out;
    }

    /// Deep copy: detached leaves that track gradients.
    [[nodiscard]] TaskParams clone() const {
        TaskParams out = *this;
        for (auto* list : {&out.feature, &out.classifier}) {
            for (auto& p : *list) p.value = p.value.detach().clone().requires_grad_(true);
        }
        for (auto& b : out.buffers) b.value = b.value.detach().clone();
        return out;
    }

    [[nodiscard]] std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& t : tensors()) n += t.numel();
        return n;
    }

    [[nodiscard]] torch::Dtype dtype() const { return feature.front().value.scalar_type(); }
};

/// Fresh parameters for `arch`, drawn from `gen`. All tensors are leaves with requires_grad.
[[nodiscard]] inline TaskParams init_task_params(const ArchSpec& arch, at::Generator& gen,
                                                 torch::Dtype dtype = torch::kFloat32) {
    using namespace detail;
    TaskParams p;
    p.arch = arch;
    const auto& in = arch.input;
    switch (arch.tag) {
        case ArchTag::digits_convnet: {
            add_conv(p.feature, "conv1", in.channels, arch.conv1_channels, 5, true, gen, dtype);
            add_conv(p.feature, "conv2", arch.conv1_channels, arch.conv2_channels, 5, true, gen, dtype);
            const auto hh = conv_pool(conv_pool(in.height, 5), 5);
            const auto ww = conv_pool(conv_pool(in.width, 5), 5);
            add_linear(p.feature, "fc1", arch.conv2_channels * hh * ww, arch.fc_width, gen, dtype);
            add_linear(p.feature, "fc2", arch.fc_width, arch.fc_width, gen, dtype);
            add_linear(p.classifier, "logits", arch.fc_width, in.n_classes, gen, dtype);
            break;
        }
        case ArchTag::wrn_16_4: {
            add_conv(p.feature, "conv0", in.channels, 16, 3, false, gen, dtype);
            std::int64_t c_in = 16;
            const std::int64_t widths[] = {64, 128, 256};
            for (int g = 0; g < 3; ++g) {
                for (int b = 0; b < 2; ++b) {
                    const auto name = "group" + std::to_string(g + 1) + ".block" + std::to_string(b + 1);
                    const auto c_out = widths[g];
                    add_bn(p.feature, p.buffers, name + ".bn1", c_in, dtype);
                    add_conv(p.feature, name + ".conv1", c_in, c_out, 3, false, gen, dtype);
                    add_bn(p.feature, p.buffers, name + ".bn2", c_out, dtype);
                    add_conv(p.feature, name + ".conv2", c_out, c_out, 3, false, gen, dtype);
                    if (c_in != c_out) add_conv(p.feature, name + ".shortcut", c_in, c_out, 1, false, gen, dtype);
                    c_in = c_out;
                }
            }
            add_bn(p.feature, p.buffers, "bn_final", c_in, dtype);
            add_linear(p.classifier, "logits", c_in, in.n_classes, gen, dtype);
            break;
        }
        case ArchTag::toy_mlp: {
            const auto d = in.pixels();
            if (arch.mlp_hidden > 0) {
                add_linear(p.feature, "hidden", d, arch.mlp_hidden, gen, dtype);
                add_linear(p.feature, "embed", arch.mlp_hidden, arch.mlp_embed, gen, dtype);
            } else {
                add_linear(p.feature, "embed", d, arch.mlp_embed, gen, dtype);
            }
            add_linear(p.classifier, "logits", arch.mlp_embed, in.n_classes, gen, dtype);
            break;
        }
    }
    for (auto* list : {&p.feature, &p.classifier}) {
        for (auto& t : *list) t.value.requires_grad_(true);
    }
    return p;
}

namespace detail {

inline void check_input(const ArchSpec& arch, const torch::Tensor& x) {
    const auto& s = arch.input;
    if (x.dim() != 4 || x.size(1) != s.height || x.size(2) != s.width || x.size(3) != s.channels) {
        throw DataError("input shape " + std::string(c10::str(x.sizes())) + " does not match " + s.str());
    }
}

inline torch::Tensor batch_norm(const torch::Tensor& x, Cursor& params, Cursor& buffers, Mode mode) {
    const auto& w = params.next();
    const auto& b = params.next();
    const auto& mean = buffers.next();
    const auto& var = buffers.next();
    return torch::batch_norm(x, w, b, mean, var, mode == Mode::train, 0.1, 1e-5, false);
}

inline torch::Tensor wrn_features(const TaskParams& theta, const torch::Tensor& x_nchw, Mode mode) {
    Cursor params(theta.feature);
    Cursor buffers(theta.buffers);
    auto x = torch::conv2d(x_nchw, params.next(), {}, 1, 1);
    std::int64_t c_in = 16;
    const std::int64_t widths[] = {64, 128, 256};
    for (int g = 0; g < 3; ++g) {
        for (int b = 0; b < 2; ++b) {
            const std::int64_t stride = (b == 0 && g > 0) ? 2 : 1;
            const auto c_out = widths[g];
            auto o = torch::relu(batch_norm(x, params, buffers, mode));
            auto y = torch::conv2d(o, params.next(), {}, stride, 1);
            y = torch::relu(batch_norm(y, params, buffers, mode));
            y = torch::conv2d(y, params.next(), {}, 1, 1);
            auto shortcut = (c_in != c_out) ? torch::conv2d(o, params.next(), {}, stride, std::int64_t{0}) : x;
            x = y + shortcut;
            c_in = c_out;
        }
    }
    x = torch::relu(batch_norm(x, params, buffers, mode));
    x = torch::avg_pool2d(x, 8);
    return x.flatten(1);
}

}  // namespace detail

/// z = F(x) for images laid out N x H x W x C.
[[nodiscard]] inline torch::Tensor forward_features(const TaskParams& theta, const torch::Tensor& x,
                                                    Mode mode = Mode::train) {
    detail::check_input(theta.arch, x);
    const auto& f = theta.feature;
    switch (theta.arch.tag) {
        case ArchTag::digits_convnet: {
            auto h = detail::to_nchw(x);
            h = torch::max_pool2d(torch::relu(torch::conv2d(h, f[0].value, f[1].value)), 2);
            h = torch::max_pool2d(torch::relu(torch::conv2d(h, f[2].value, f[3].value)), 2);
            h = h.flatten(1);
            h = torch::relu(torch::linear(h, f[4].value, f[5].value));
            return torch::relu(torch::linear(h, f[6].value, f[7].value));
        }
        case ArchTag::wrn_16_4:
            return detail::wrn_features(theta, detail::to_nchw(x), mode);
        case ArchTag::toy_mlp: {
            auto h = x.reshape({x.size(0), -1});
            if (theta.arch.mlp_hidden > 0) {
                h = torch::tanh(torch::linear(h, f[0].value, f[1].value));
                return torch::linear(h, f[2].value, f[3].value);
            }
            return torch::linear(h, f[0].value, f[1].value);
        }
    }
    return {};
}

/// Classifier logits C(z).
[[nodiscard]] inline torch::Tensor forward_logits(const TaskParams& theta, const torch::Tensor& z) {
    if (z.dim() != 2 || z.size(1) != theta.embedding_dim()) {
        throw DataError("embedding width " + std::to_string(z.dim() == 2 ? z.size(1) : -1) + " does not match " +
                        std::to_string(theta.embedding_dim()));
    }
    return torch::linear(z, theta.classifier[0].value, theta.classifier[1].value);
}

/// Softmax class distribution for each embedding row.
[[nodiscard]] inline torch::Tensor forward_classify(const TaskParams& theta, const torch::Tensor& z) {
    return torch::softmax(forward_logits(theta, z), 1);
}

/// Mean over rows of -sum_i y_i log(max(y_hat_i, 1e-12)).
[[nodiscard]] inline torch::Tensor cross_entropy(const torch::Tensor& y_onehot, const torch::Tensor& y_hat) {
    TORCH_CHECK(y_onehot.sizes() == y_hat.sizes(), "cross_entropy: shape mismatch");
    auto logp = torch::log(torch::clamp_min(y_hat, kLogEpsilon));
    return -(y_onehot.to(y_hat.scalar_type()) * logp).sum(1).mean();
}

/// Per-sample cross-entropy (length-N vector).
[[nodiscard]] inline torch::Tensor cross_entropy_per_sample(const torch::Tensor& y_onehot,
                                                            const torch::Tensor& y_hat) {
    auto logp = torch::log(torch::clamp_min(y_hat, kLogEpsilon));
    return -(y_onehot.to(y_hat.scalar_type()) * logp).sum(1);
}

/// Per-sample cross-entropy computed from logits with log-softmax. Same value as
/// cross_entropy_per_sample(y, softmax(logits)) without saturating at confident predictions.
[[nodiscard]] inline torch::Tensor cross_entropy_logits_per_sample(const torch::Tensor& y_onehot,
                                                                   const torch::Tensor& logits) {
    TORCH_CHECK(y_onehot.sizes() == logits.sizes(), "cross_entropy: shape mismatch");
    return -(y_onehot.to(logits.scalar_type()) * torch::log_softmax(logits, 1)).sum(1);
}

/// Per-sample L_task(θ; x, y).
[[nodiscard]] inline torch::Tensor task_loss_per_sample(const TaskParams& theta, const torch::Tensor& images,
                                                        const torch::Tensor& labels, Mode mode = Mode::train) {
    auto logits = forward_logits(theta, forward_features(theta, images, mode));
    return cross_entropy_logits_per_sample(onehot(labels, theta.arch.input.n_classes, logits.scalar_type()), logits);
}

/// L_task(θ; x, y) averaged over the batch.
[[nodiscard]] inline torch::Tensor task_loss(const TaskParams& theta, const torch::Tensor& images,
                                             const torch::Tensor& labels, Mode mode = Mode::train) {
    return task_loss_per_sample(theta, images, labels, mode).mean();
}

[[nodiscard]] inline torch::Tensor task_loss(const TaskParams& theta, const Batch& batch, Mode mode = Mode::train) {
    return task_loss(theta, batch.images, batch.labels, mode);
}

// ---------------------------------------------------------------------------
// Wasserstein auto-encoder
// ---------------------------------------------------------------------------

enum class Activation { none, relu, sigmoid };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
    }
    return "none";
}

inline Activation parse_activation(std::string_view s) {
    if (s == "none") return Activation::none;
    if (s == "relu") return Activation::relu;
    if (s == "sigmoid") return Activation::sigmoid;
    throw DataError("unknown activation '" + std::string(s) + "'");
}

/// A chain of dense layers, each followed by its own activation.
struct DenseStack {
    ParamList layers;  // weight, bias per layer
    std::vector<Activation> activations;

    [[nodiscard]] std::size_t depth() const { return activations.size(); }
    [[nodiscard]] std::int64_t in_width() const { return layers.front().value.size(1); }
    [[nodiscard]] std::int64_t out_width() const { return layers[layers.size() - 2].value.size(0); }
    [[nodiscard]] bool empty() const { return layers.empty(); }

    [[nodiscard]] torch::Tensor forward(torch::Tensor h) const {
        for (std::size_t i = 0; i < activations.size(); ++i) {
            h = torch::linear(h, layers[2 * i].value, layers[2 * i + 1].value);
            switch (activations[i]) {
                case Activation::none: break;
                case Activation::relu: h = torch::relu(h); break;
                case Activation::sigmoid: h = torch::sigmoid(h); break;
            }
        }
        return h;
    }

    [[nodiscard]] std::vector<torch::Tensor> tensors() const {
        std::vector<torch::Tensor> out;
        for (const auto& l : layers) out.push_back(l.value);
        return out;
    }
};

[[nodiscard]] inline DenseStack make_dense_stack(const std::string& prefix, const std::vector<std::int64_t>& widths,
                                                 const std::vector<Activation>& activations, at::Generator& gen,
                                                 torch::Dtype dtype) {
    TORCH_CHECK(widths.size() == activations.size() + 1, "make_dense_stack: widths/activations mismatch");
    DenseStack s;
    s.activations = activations;
    for (std::size_t i = 0; i < activations.size(); ++i) {
        detail::add_linear(s.layers, prefix + "." + std::to_string(i), widths[i], widths[i + 1], gen, dtype);
    }
    for (auto& l : s.layers) l.value.requires_grad_(true);
    return s;
}

/// Encoder Q, decoder G and (for the GAN divergence) a latent critic.
struct WAEParams {
    ShapeSignature input{};
    std::int64_t latent_dim{0};
    Divergence divergence{Divergence::gan};
    double mmd_bandwidth{0.0};
    DenseStack encoder;
    DenseStack decoder;
    DenseStack critic;

    [[nodiscard]] std::vector<torch::Tensor> autoencoder_tensors() const {
        auto out = encoder.tensors();
        auto dec = decoder.tensors();
        out.insert(out.end(), dec.begin(), dec.end());
        return out;
    }

    [[nodiscard]] ParamList named() const {
        ParamList out = encoder.layers;
        out.insert(out.end(), decoder.layers.begin(), decoder.layers.end());
        out.insert(out.end(), critic.layers.begin(), critic.layers.end());
        return out;
    }

    [[nodiscard]] WAEParams clone() const {
        WAEParams out = *this;
        for (auto* s : {&out.encoder, &out.decoder, &out.critic}) {
            for (auto& l : s->layers) l.value = l.value.detach().clone().requires_grad_(true);
        }
        return out;
    }

    /// Turns gradient tracking on or off for every tensor (off while frozen during augmentation).
    void set_requires_grad(bool on) const {
        for (const auto* s : {&encoder, &decoder, &critic}) {
            for (const auto& l : s->layers) l.value.requires_grad_(on);
        }
    }
};

/// Fully-connected WAE: encoder D -> hidden -> latent, decoder latent -> hidden -> D (sigmoid output),
/// critic latent -> critic_hidden -> 1.
[[nodiscard]] inline WAEParams init_wae_params(const ShapeSignature& sig, std::int64_t latent, std::int64_t hidden,
                                               std::int64_t critic_hidden, Divergence divergence, at::Generator& gen,
                                               torch::Dtype dtype = torch::kFloat32, double mmd_bandwidth = 0.0) {
    WAEParams p;
    p.input = sig;
    p.latent_dim = latent;
    p.divergence = divergence;
    p.mmd_bandwidth = mmd_bandwidth;
    const auto d = sig.pixels();
    p.encoder = make_dense_stack("encoder", {d, hidden, latent}, {Activation::relu, Activation::none}, gen, dtype);
    p.decoder = make_dense_stack("decoder", {latent, hidden, d}, {Activation::relu, Activation::sigmoid}, gen, dtype);
    if (divergence == Divergence::gan) {
        p.critic = make_dense_stack("critic", {latent, critic_hidden, 1}, {Activation::relu, Activation::none}, gen,
                                    dtype);
    }
    return p;
}

[[nodiscard]] inline WAEParams init_wae_params(const HyperParams& h, const ShapeSignature& sig, at::Generator& gen) {
    return init_wae_params(sig, h.wae_latent, h.wae_hidden, h.critic_hidden, h.wae_divergence, gen, torch::kFloat32,
                           h.mmd_bandwidth);
}

/// Deterministic encoding Q(x) (point estimate).
[[nodiscard]] inline torch::Tensor wae_encode(const WAEParams& psi, const torch::Tensor& x) {
    const auto& s = psi.input;
    if (x.dim() != 4 || x.size(1) != s.height || x.size(2) != s.width || x.size(3) != s.channels) {
        throw DataError("wae input shape " + std::string(c10::str(x.sizes())) + " does not match " + s.str());
    }
    return psi.encoder.forward(x.reshape({x.size(0), -1}));
}

[[nodiscard]] inline torch::Tensor wae_decode(const WAEParams& psi, const torch::Tensor& e) {
    const auto& s = psi.input;
    return psi.decoder.forward(e).reshape({e.size(0), s.height, s.width, s.channels});
}

/// V(x) = G(Q(x)), same shape as x.
[[nodiscard]] inline torch::Tensor wae_reconstruct(const WAEParams& psi, const torch::Tensor& x) {
    return wae_decode(psi, wae_encode(psi, x));
}

/// Per-sample mean squared reconstruction error (length-N vector).
[[nodiscard]] inline torch::Tensor reconstruction_error(const WAEParams& psi, const torch::Tensor& x) {
    return (wae_reconstruct(psi, x) - x).pow(2).reshape({x.size(0), -1}).mean(1);
}

[[nodiscard]] inline torch::Tensor sample_prior(std::int64_t n, std::int64_t dim, double sigma, at::Generator& gen,
                                                torch::Dtype dtype = torch::kFloat32) {
    return torch::randn({n, dim}, gen, torch::TensorOptions().dtype(dtype)) * sigma;
}

/// Median pairwise Euclidean distance over i < j of the pooled rows (detached).
[[nodiscard]] inline double median_pairwise_distance(const torch::Tensor& pooled) {
    auto x = pooled.detach().to(torch::kFloat64);
    const auto n = x.size(0);
    if (n < 2) return 1.0;
    auto d2 = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1);
    auto iu = torch::triu_indices(n, n, 1);
    auto dist = d2.index({iu[0], iu[1]}).sqrt();
    auto sorted = std::get<0>(dist.sort());
    const auto m = sorted.size(0);
    const double med = (m % 2 == 1) ? sorted[m / 2].item<double>()
                                    : 0.5 * (sorted[m / 2 - 1].item<double>() + sorted[m / 2].item<double>());
    return med > 0.0 ? med : 1.0;
}

/// Biased (V-statistic) squared MMD with k(a,b) = exp(-|a-b|^2 / (2 h^2)).
/// `bandwidth` <= 0 selects the median heuristic over the pooled samples.
[[nodiscard]] inline torch::Tensor mmd_penalty(const torch::Tensor& q, const torch::Tensor& p, double bandwidth) {
    if (q.size(0) == 0 || p.size(0) == 0) {
        throw DataError("mmd: empty sample set");
    }
    TORCH_CHECK(q.size(1) == p.size(1), "mmd: dimension mismatch");
    const double h = bandwidth > 0.0 ? bandwidth : median_pairwise_distance(torch::cat({q, p}, 0));
    const double scale = 1.0 / (2.0 * h * h);
    auto kernel_mean = [scale](const torch::Tensor& a, const torch::Tensor& b) {
        return torch::exp(-(a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1) * scale).mean();
    };
    return kernel_mean(q, q) + kernel_mean(p, p) - 2.0 * kernel_mean(q, p);
}

/// Critic logit for each latent row.
[[nodiscard]] inline torch::Tensor critic_logits(const WAEParams& psi, const torch::Tensor& e) {
    return psi.critic.forward(e).squeeze(1);
}

/// Encoder-side adversarial penalty: -mean log sigmoid(D(q)).
[[nodiscard]] inline torch::Tensor gan_penalty(const WAEParams& psi, const torch::Tensor& q) {
    if (q.size(0) == 0) {
        throw DataError("gan penalty: empty sample set");
    }
    if (psi.critic.empty()) {
        throw DataError("gan penalty: WAE has no latent critic");
    }
    return torch::softplus(-critic_logits(psi, q)).mean();
}

/// Critic objective (minimized): -mean log D(p) - mean log(1 - D(q)).
[[nodiscard]] inline torch::Tensor critic_loss(const WAEParams& psi, const torch::Tensor& q, const torch::Tensor& p) {
    return torch::softplus(-critic_logits(psi, p)).mean() + torch::softplus(critic_logits(psi, q)).mean();
}

/// D_e(Q(x), P(e)) as configured on `psi`.
[[nodiscard]] inline torch::Tensor divergence_penalty(const WAEParams& psi, const torch::Tensor& q,
                                                      const torch::Tensor& p) {
    if (q.size(0) == 0 || p.size(0) == 0) {
        throw DataError("divergence_penalty: empty sample set");
    }
    switch (psi.divergence) {
        case Divergence::mmd: return mmd_penalty(q, p, psi.mmd_bandwidth);
        case Divergence::gan: return gan_penalty(psi, q);
    }
    throw ConfigError("wae_divergence", "unsupported divergence");
}

/// mean |G(Q(x)) - x|^2 + λ D_e(Q(x), P(e)). With λ = 0 the divergence is not evaluated.
[[nodiscard]] inline torch::Tensor wae_objective(const WAEParams& psi, const torch::Tensor& x, double lambda,
                                                 const torch::Tensor& prior_samples) {
    if (lambda < 0.0) {
        throw ConfigError("lambda", "must be >= 0");
    }
    auto e = wae_encode(psi, x);
    auto recon = (wae_decode(psi, e) - x).pow(2).mean();
    if (lambda == 0.0) return recon;
    return recon + lambda * divergence_penalty(psi, e, prior_samples);
}

}  // namespace mada
