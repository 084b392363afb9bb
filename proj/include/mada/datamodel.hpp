#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mada/error.hpp"

namespace mada {

/// (H, W, C, n_classes) shared by every sample of a domain.
struct ShapeSignature {
    std::int64_t height{0};
    std::int64_t width{0};
    std::int64_t channels{0};
    std::int64_t n_classes{0};

    [[nodiscard]] std::int64_t pixels() const { return height * width * channels; }
    bool operator==(const ShapeSignature&) const = default;

    [[nodiscard]] std::string str() const {
        std::ostringstream os;
        os << height << "x" << width << "x" << channels << "/" << n_classes;
        return os.str();
    }
};

/// One image (H x W x C, float in [0,1]) with its class index.
struct Sample {
    torch::Tensor image;
    std::int64_t label{0};
};

/// Expands class indices into an N x n_classes one-hot matrix.
[[nodiscard]] inline torch::Tensor onehot(const torch::Tensor& labels, std::int64_t n_classes,
                                          torch::Dtype dtype = torch::kFloat32) {
    TORCH_CHECK(labels.dim() == 1, "onehot expects a label vector");
    if (n_classes <= 0) {
        throw DataError("onehot: n_classes must be positive");
    }
    auto idx = labels.to(torch::kInt64).contiguous();
    if (idx.numel() > 0) {
        const auto lo = idx.min().item<std::int64_t>();
        const auto hi = idx.max().item<std::int64_t>();
        if (lo < 0 || hi >= n_classes) {
            throw DataError("onehot: label index out of range [0, " + std::to_string(n_classes) + ")");
        }
    }
    auto out = torch::zeros({idx.size(0), n_classes}, torch::TensorOptions().dtype(dtype));
    out.scatter_(1, idx.unsqueeze(1), 1.0);
    return out;
}

[[nodiscard]] inline torch::Tensor onehot(std::span<const std::int64_t> labels, std::int64_t n_classes,
                                          torch::Dtype dtype = torch::kFloat32) {
    auto t = torch::tensor(std::vector<std::int64_t>(labels.begin(), labels.end()), torch::kInt64);
    return onehot(t, n_classes, dtype);
}

/// Minibatch: images N x H x W x C and class indices; one-hot rows are built on demand.
struct Batch {
    torch::Tensor images;
    torch::Tensor labels;
    std::int64_t n_classes{0};

    [[nodiscard]] std::int64_t size() const { return images.defined() ? images.size(0) : 0; }

    [[nodiscard]] torch::Tensor labels_onehot() const {
        return onehot(labels, n_classes, images.scalar_type());
    }

    void validate() const {
        if (!images.defined() || images.dim() != 4 || images.size(0) < 1) {
            throw DataError("batch: images must be a non-empty N x H x W x C tensor");
        }
        if (!labels.defined() || labels.dim() != 1 || labels.size(0) != images.size(0)) {
            throw DataError("batch: label count does not match image count");
        }
    }
};

/// Where a domain came from. Augmented domains remember their generation round.
struct DomainKind {
    enum class Tag { source, augmented, target };
    Tag tag{Tag::source};
    int round{0};

    static DomainKind source() { return {Tag::source, 0}; }
    static DomainKind target() { return {Tag::target, 0}; }
    static DomainKind augmented(int k) {
        if (k < 1) {
            throw DataError("augmented domain round must be >= 1");
        }
        return {Tag::augmented, k};
    }

    [[nodiscard]] std::string str() const {
        switch (tag) {
            case Tag::source: return "source";
            case Tag::target: return "target";
            case Tag::augmented: return "augmented";
        }
        return "source";
    }
    bool operator==(const DomainKind&) const = default;
};

/// Ascent bookkeeping carried by augmented domains.
struct AugmentProvenance {
    std::vector<std::string> origins;  // "<domain id>#<sample index>" per sample
    std::int64_t ascent_steps{0};
    double gamma{0.0};
    double alpha{0.0};
    double beta{0.0};

    bool operator==(const AugmentProvenance&) const = default;
};

/// An ordered sample collection with a single shape signature.
/// Images are stored contiguously as N x H x W x C float32; labels as int64 indices.
struct Domain {
    std::string id;
    DomainKind kind{DomainKind::source()};
    torch::Tensor images;
    torch::Tensor labels;
    std::int64_t n_classes{0};
    std::optional<AugmentProvenance> provenance;

    [[nodiscard]] std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
    [[nodiscard]] bool empty() const { return size() == 0; }

    [[nodiscard]] ShapeSignature signature() const {
        return {images.size(1), images.size(2), images.size(3), n_classes};
    }

    [[nodiscard]] Sample sample(std::int64_t i) const { return {images[i], labels[i].item<std::int64_t>()}; }

    [[nodiscard]] Batch batch(const torch::Tensor& indices) const {
        return {images.index_select(0, indices), labels.index_select(0, indices), n_classes};
    }

    [[nodiscard]] Batch all() const { return {images, labels, n_classes}; }

    void validate() const {
        if (!images.defined() || images.dim() != 4) {
            throw DataError("domain " + id + ": images must be N x H x W x C");
        }
        if (!labels.defined() || labels.dim() != 1 || labels.size(0) != images.size(0)) {
            throw DataError("domain " + id + ": label count does not match image count");
        }
        if (images.numel() > 0) {
            const auto lo = images.min().item<double>();
            const auto hi = images.max().item<double>();
            if (lo < 0.0 || hi > 1.0) {
                throw DataError("domain " + id + ": pixel values outside [0,1]");
            }
        }
        if (labels.numel() > 0) {
            const auto lo = labels.min().item<std::int64_t>();
            const auto hi = labels.max().item<std::int64_t>();
            if (lo < 0 || hi >= n_classes) {
                throw DataError("domain " + id + ": label index outside [0, n_classes)");
            }
        }
        if (kind.tag == DomainKind::Tag::augmented && kind.round < 1) {
            throw DataError("domain " + id + ": augmented round must be >= 1");
        }
        if (provenance && static_cast<std::int64_t>(provenance->origins.size()) != size()) {
            throw DataError("domain " + id + ": provenance does not cover every sample");
        }
    }
};

/// Concatenates domains that share a signature, in the given order.
[[nodiscard]] inline Domain concat_domains(std::span<const Domain> parts, std::string id) {
    if (parts.empty()) {
        throw DataError("concat_domains: nothing to concatenate");
    }
    std::vector<torch::Tensor> images;
    std::vector<torch::Tensor> labels;
    for (const auto& d : parts) {
        if (d.signature() != parts.front().signature()) {
            throw DataError("concat_domains: signature mismatch between " + parts.front().id + " and " + d.id);
        }
        images.push_back(d.images);
        labels.push_back(d.labels);
    }
    Domain out;
    out.id = std::move(id);
    out.kind = parts.front().kind;
    out.images = torch::cat(images, 0);
    out.labels = torch::cat(labels, 0);
    out.n_classes = parts.front().n_classes;
    return out;
}

}  // namespace mada
