#pragma once

#include <torch/torch.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mada/config.hpp"
#include "mada/error.hpp"
#include "mada/kvfile.hpp"
#include "mada/nets.hpp"

namespace mada {

// Named-tensor archive, all integers little-endian:
//   "MADATNSR" | u32 version | u32 count
//   per tensor: u32 name_len | name | u32 dtype (0 = float32, 1 = float64) | u32 ndim | i64 dims[ndim]
//               | u64 nbytes | raw row-major little-endian payload

namespace detail {

inline constexpr std::array<char, 8> kArchiveMagic{'M', 'A', 'D', 'A', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kArchiveVersion = 1;

static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");

template <typename T>
void put_le(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw DataError("tensor archive truncated");
    return v;
}

}  // namespace detail

inline void write_tensor_archive(const std::filesystem::path& path, const ParamList& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(detail::kArchiveMagic.data(), detail::kArchiveMagic.size());
    detail::put_le<std::uint32_t>(out, detail::kArchiveVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, value] : tensors) {
        auto t = value.detach().contiguous();
        std::uint32_t dtype = 0;
        if (t.scalar_type() == torch::kFloat64) {
            dtype = 1;
        } else if (t.scalar_type() != torch::kFloat32) {
            t = t.to(torch::kFloat32);
        }
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint32_t>(out, dtype);
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
        for (auto d : t.sizes()) detail::put_le<std::int64_t>(out, d);
        const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
        detail::put_le<std::uint64_t>(out, nbytes);
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    }
    if (!out) throw DataError("write failed for " + path.string());
}

[[nodiscard]] inline ParamList read_tensor_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != detail::kArchiveMagic) throw DataError(path.string() + ": not a tensor archive");
    if (detail::get_le<std::uint32_t>(in) != detail::kArchiveVersion) {
        throw DataError(path.string() + ": unsupported archive version");
    }
    const auto count = detail::get_le<std::uint32_t>(in);
    ParamList out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::get_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto dtype = detail::get_le<std::uint32_t>(in);
        if (dtype > 1) throw DataError(path.string() + ": unknown dtype tag for " + name);
        const auto ndim = detail::get_le<std::uint32_t>(in);
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) d = detail::get_le<std::int64_t>(in);
        const auto nbytes = detail::get_le<std::uint64_t>(in);
        auto t = torch::empty(dims, dtype == 0 ? torch::kFloat32 : torch::kFloat64);
        if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != nbytes) {
            throw DataError(path.string() + ": size mismatch for " + name);
        }
        in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        if (!in) throw DataError(path.string() + ": truncated payload for " + name);
        out.push_back({std::move(name), t});
    }
    return out;
}

namespace detail {

inline void describe_arch(KeyValues& kv, const ArchSpec& a) {
    kv.set("arch", to_string(a.tag));
    kv.set("input.height", a.input.height);
    kv.set("input.width", a.input.width);
    kv.set("input.channels", a.input.channels);
    kv.set("input.n_classes", a.input.n_classes);
    kv.set("conv1_channels", a.conv1_channels);
    kv.set("conv2_channels", a.conv2_channels);
    kv.set("fc_width", a.fc_width);
    kv.set("mlp_hidden", a.mlp_hidden);
    kv.set("mlp_embed", a.mlp_embed);
}

inline ArchSpec read_arch(const KeyValues& kv) {
    ArchSpec a;
    auto tag = kArchNames.parse(kv.get("arch"));
    if (!tag) throw DataError("checkpoint: unknown arch " + kv.get("arch"));
    a.tag = *tag;
    a.input = {kv.get_int("input.height"), kv.get_int("input.width"), kv.get_int("input.channels"),
               kv.get_int("input.n_classes")};
    a.conv1_channels = kv.get_int("conv1_channels");
    a.conv2_channels = kv.get_int("conv2_channels");
    a.fc_width = kv.get_int("fc_width");
    a.mlp_hidden = kv.get_int("mlp_hidden");
    a.mlp_embed = kv.get_int("mlp_embed");
    return a;
}

inline std::string join_activations(const DenseStack& s) {
    std::string out;
    for (auto a : s.activations) {
        if (!out.empty()) out += ",";
        out += to_string(a);
    }
    return out;
}

inline std::vector<Activation> split_activations(const std::string& text) {
    std::vector<Activation> out;
    std::size_t start = 0;
    while (start <= text.size() && !text.empty()) {
        const auto comma = text.find(',', start);
        out.push_back(parse_activation(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline const torch::Tensor& lookup(const ParamList& list, const std::string& name) {
    for (const auto& p : list) {
        if (p.name == name) return p.value;
    }
    throw DataError("checkpoint: missing tensor " + name);
}

}  // namespace detail

/// What goes into a checkpoint directory besides the tensors.
struct CheckpointInfo {
    std::int64_t iteration{0};
    std::optional<HyperParams> config;
};

/// Writes `dir/tensors.bin` + `dir/manifest.cfg` atomically. Either model may be absent.
inline void save_checkpoint(const std::filesystem::path& dir, const TaskParams* theta, const WAEParams* psi,
                            const CheckpointInfo& info) {
    write_directory_atomically(dir, [&](const std::filesystem::path& tmp) {
        ParamList all;
        KeyValues kv;
        kv.set("format", "mada-checkpoint-1");
        kv.set("iteration", info.iteration);
        if (theta != nullptr) {
            kv.set("theta", "present");
            detail::describe_arch(kv, theta->arch);
            for (const auto& p : theta->named()) all.push_back({"theta." + p.name, p.value});
            for (const auto& b : theta->buffers) all.push_back({"theta_buffer." + b.name, b.value});
        }
        if (psi != nullptr) {
            kv.set("psi", "present");
            kv.set("wae.height", psi->input.height);
            kv.set("wae.width", psi->input.width);
            kv.set("wae.channels", psi->input.channels);
            kv.set("wae.n_classes", psi->input.n_classes);
            kv.set("latent_dim", psi->latent_dim);
            kv.set("divergence", to_string(psi->divergence));
            kv.set("mmd_bandwidth", psi->mmd_bandwidth);
            kv.set("wae.encoder.activations", detail::join_activations(psi->encoder));
            kv.set("wae.decoder.activations", detail::join_activations(psi->decoder));
            kv.set("wae.critic.activations", detail::join_activations(psi->critic));
            for (const auto& p : psi->named()) all.push_back({"psi." + p.name, p.value});
        }
        if (info.config) {
            for (const auto& f : hyperparam_fields()) kv.set("config." + std::string(f.key), f.get(*info.config));
        }
        write_tensor_archive(tmp / "tensors.bin", all);
        kv.save(tmp / "manifest.cfg");
    });
}

[[nodiscard]] inline KeyValues read_checkpoint_manifest(const std::filesystem::path& dir) {
    return KeyValues::load(dir / "manifest.cfg");
}

[[nodiscard]] inline TaskParams load_task_params(const std::filesystem::path& dir) {
    const auto kv = read_checkpoint_manifest(dir);
    if (!kv.contains("theta")) throw DataError(dir.string() + ": checkpoint has no task model");
    const auto tensors = read_tensor_archive(dir / "tensors.bin");
    auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
    const auto arch = detail::read_arch(kv);
    auto theta = init_task_params(arch, gen);
    for (auto* list : {&theta.feature, &theta.classifier}) {
        for (auto& p : *list) {
            const auto& src = detail::lookup(tensors, "theta." + p.name);
            if (src.sizes() != p.value.sizes()) throw DataError("checkpoint: shape mismatch for " + p.name);
            p.value = src.clone().requires_grad_(true);
        }
    }
    for (auto& b : theta.buffers) b.value = detail::lookup(tensors, "theta_buffer." + b.name).clone();
    return theta;
}

[[nodiscard]] inline WAEParams load_wae_params(const std::filesystem::path& dir) {
    const auto kv = read_checkpoint_manifest(dir);
    if (!kv.contains("psi")) throw DataError(dir.string() + ": checkpoint has no WAE");
    const auto tensors = read_tensor_archive(dir / "tensors.bin");
    WAEParams psi;
    psi.input = {kv.get_int("wae.height"), kv.get_int("wae.width"), kv.get_int("wae.channels"),
                 kv.get_int("wae.n_classes")};
    psi.latent_dim = kv.get_int("latent_dim");
    auto div = detail::kDivergenceNames.parse(kv.get("divergence"));
    if (!div) throw DataError("checkpoint: unknown divergence " + kv.get("divergence"));
    psi.divergence = *div;
    psi.mmd_bandwidth = kv.get_real("mmd_bandwidth");
    auto fill = [&](DenseStack& s, const std::string& prefix) {
        s.activations = detail::split_activations(kv.get("wae." + prefix + ".activations"));
        for (std::size_t i = 0; i < s.activations.size(); ++i) {
            for (const char* part : {".weight", ".bias"}) {
                const auto name = prefix + "." + std::to_string(i) + part;
                s.layers.push_back({name, detail::lookup(tensors, "psi." + name).clone().requires_grad_(true)});
            }
        }
    };
    fill(psi.encoder, "encoder");
    fill(psi.decoder, "decoder");
    fill(psi.critic, "critic");
    return psi;
}

/// Config echoed in a checkpoint manifest, when present.
[[nodiscard]] inline std::optional<HyperParams> load_checkpoint_config(const std::filesystem::path& dir) {
    const auto kv = read_checkpoint_manifest(dir);
    if (!kv.contains("config.alpha")) return std::nullopt;
    HyperParams h;
    for (const auto& f : hyperparam_fields()) {
        const auto key = "config." + std::string(f.key);
        if (kv.contains(key)) f.set(h, kv.get(key));
    }
    return h;
}

}  // namespace mada
