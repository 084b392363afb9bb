#pragma once

#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mada/datamodel.hpp"
#include "mada/error.hpp"

namespace mada {

enum class MetaGradMode { first_order, full_second_order };
enum class RelaxVariant { recon_of_xplus, recon_delta };
enum class ArchTag { digits_convnet, wrn_16_4, toy_mlp };
enum class Divergence { gan, mmd };
enum class OptimizerKind { adam, sgd_nesterov };

namespace detail {

template <typename E, std::size_t N>
struct EnumNames {
    std::array<std::pair<E, std::string_view>, N> entries;

    [[nodiscard]] std::string_view name(E e) const {
        for (const auto& [v, n] : entries) {
            if (v == e) return n;
        }
        return "?";
    }

    [[nodiscard]] std::optional<E> parse(std::string_view s) const {
        for (const auto& [v, n] : entries) {
            if (n == s) return v;
        }
        return std::nullopt;
    }

    [[nodiscard]] std::string choices() const {
        std::string out;
        for (const auto& [v, n] : entries) {
            if (!out.empty()) out += "|";
            out += n;
        }
        return out;
    }
};

inline constexpr EnumNames<MetaGradMode, 2> kMetaGradNames{
    {{{MetaGradMode::first_order, "first_order"}, {MetaGradMode::full_second_order, "full_second_order"}}}};
inline constexpr EnumNames<RelaxVariant, 2> kRelaxNames{
    {{{RelaxVariant::recon_of_xplus, "recon_of_xplus"}, {RelaxVariant::recon_delta, "recon_delta"}}}};
inline constexpr EnumNames<ArchTag, 3> kArchNames{{{{ArchTag::digits_convnet, "digits_convnet"},
                                                    {ArchTag::wrn_16_4, "wrn_16_4"},
                                                    {ArchTag::toy_mlp, "toy_mlp"}}}};
inline constexpr EnumNames<Divergence, 2> kDivergenceNames{{{{Divergence::gan, "gan"}, {Divergence::mmd, "mmd"}}}};
inline constexpr EnumNames<OptimizerKind, 2> kOptimizerNames{
    {{{OptimizerKind::adam, "adam"}, {OptimizerKind::sgd_nesterov, "sgd_nesterov"}}}};

}  // namespace detail

inline std::string to_string(MetaGradMode v) { return std::string(detail::kMetaGradNames.name(v)); }
inline std::string to_string(RelaxVariant v) { return std::string(detail::kRelaxNames.name(v)); }
inline std::string to_string(ArchTag v) { return std::string(detail::kArchNames.name(v)); }
inline std::string to_string(Divergence v) { return std::string(detail::kDivergenceNames.name(v)); }
inline std::string to_string(OptimizerKind v) { return std::string(detail::kOptimizerNames.name(v)); }

/// Every scalar knob of a run. The first block mirrors the method's symbols;
/// the rest are presets and budgets the method leaves open.
struct HyperParams {
    double alpha{1.0};         // weight of the semantic-consistency penalty
    double beta{2000.0};       // weight of the WAE relaxation term
    double gamma{1.0};         // ascent step size
    std::int64_t t_adv{25};    // ascent iterations per augmented batch
    std::int64_t k_domains{3}; // number of augmented domains
    double eta{1e-4};          // task learning rate, inner and outer
    double lambda{0.01};       // WAE latent divergence weight
    std::int64_t inner_steps{1};
    MetaGradMode meta_grad_mode{MetaGradMode::first_order};
    RelaxVariant relax_variant{RelaxVariant::recon_of_xplus};
    std::uint64_t seed{0};

    ArchTag arch{ArchTag::digits_convnet};
    std::int64_t conv1_channels{64};
    std::int64_t conv2_channels{128};
    std::int64_t fc_width{1024};
    std::int64_t mlp_hidden{0};
    std::int64_t mlp_embed{16};

    std::int64_t batch_size{32};
    std::int64_t iterations{10000};
    OptimizerKind optimizer{OptimizerKind::adam};
    double momentum{0.9};
    double aug_fraction{0.1};

    std::int64_t wae_latent{20};
    std::int64_t wae_hidden{400};
    Divergence wae_divergence{Divergence::gan};
    double wae_lr{1e-3};
    std::int64_t wae_epochs{20};
    std::int64_t wae_batch{100};
    double wae_retrain_fraction{0.2};
    bool wae_retrain_union{true};
    double wae_holdout_fraction{0.1};
    std::int64_t critic_hidden{128};
    double mmd_bandwidth{0.0};  // 0 selects the median pairwise-distance heuristic
    double prior_sigma{1.0};

    std::int64_t fewshot_iters{200};
    double fewshot_lr{1e-4};
    std::int64_t fewshot_batch{16};

    std::int64_t w2_subsample{256};
    std::uint64_t w2_seed{0};
    std::int64_t eval_batch{256};

    bool operator==(const HyperParams&) const = default;
};

/// Describes one config key: its name, the symbol it stands for, and how to read/write it.
struct FieldSpec {
    std::string_view key;
    std::string_view symbol;
    std::string_view help;
    std::function<void(HyperParams&, std::string_view)> set;
    std::function<std::string(const HyperParams&)> get;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::string format_real(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

inline double parse_real(std::string_view key, std::string_view text) {
    double v = 0.0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc{} || ptr != end || !std::isfinite(v)) {
        throw ConfigError(std::string(key), "expected a finite real, got '" + std::string(text) + "'");
    }
    return v;
}

inline std::int64_t parse_int(std::string_view key, std::string_view text) {
    std::int64_t v = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError(std::string(key), "expected an integer, got '" + std::string(text) + "'");
    }
    return v;
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view text) {
    std::uint64_t v = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError(std::string(key), "expected an unsigned integer, got '" + std::string(text) + "'");
    }
    return v;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(std::string(key), "expected true|false, got '" + std::string(text) + "'");
}

template <typename E, std::size_t N>
E parse_enum(const EnumNames<E, N>& names, std::string_view key, std::string_view text) {
    if (auto v = names.parse(text)) return *v;
    throw ConfigError(std::string(key), "expected one of " + names.choices() + ", got '" + std::string(text) + "'");
}

template <auto Member>
FieldSpec real_field(std::string_view key, std::string_view symbol, std::string_view help) {
    return {key, symbol, help,
            [key](HyperParams& h, std::string_view s) { h.*Member = parse_real(key, s); },
            [](const HyperParams& h) { return format_real(h.*Member); }};
}

template <auto Member>
FieldSpec int_field(std::string_view key, std::string_view symbol, std::string_view help) {
    return {key, symbol, help,
            [key](HyperParams& h, std::string_view s) { h.*Member = parse_int(key, s); },
            [](const HyperParams& h) { return std::to_string(h.*Member); }};
}

template <auto Member>
FieldSpec uint_field(std::string_view key, std::string_view symbol, std::string_view help) {
    return {key, symbol, help,
            [key](HyperParams& h, std::string_view s) { h.*Member = parse_uint(key, s); },
            [](const HyperParams& h) { return std::to_string(h.*Member); }};
}

template <auto Member>
FieldSpec bool_field(std::string_view key, std::string_view help) {
    return {key, "", help,
            [key](HyperParams& h, std::string_view s) { h.*Member = parse_bool(key, s); },
            [](const HyperParams& h) { return std::string(h.*Member ? "true" : "false"); }};
}

template <auto Member, typename E, std::size_t N>
FieldSpec enum_field(const EnumNames<E, N>& names, std::string_view key, std::string_view help) {
    return {key, "", help,
            [&names, key](HyperParams& h, std::string_view s) { h.*Member = parse_enum(names, key, s); },
            [&names](const HyperParams& h) { return std::string(names.name(h.*Member)); }};
}

}  // namespace detail

/// All config keys in file order.
[[nodiscard]] inline const std::vector<FieldSpec>& hyperparam_fields() {
    using namespace detail;
    static const std::vector<FieldSpec> fields = {
        real_field<&HyperParams::alpha>("alpha", "α", "weight of the semantic-consistency penalty"),
        real_field<&HyperParams::beta>("beta", "β", "weight of the WAE relaxation term"),
        real_field<&HyperParams::gamma>("gamma", "γ", "adversarial ascent step size"),
        int_field<&HyperParams::t_adv>("t_adv", "T_adv", "ascent iterations per augmented batch"),
        int_field<&HyperParams::k_domains>("k_domains", "K", "number of augmented domains"),
        real_field<&HyperParams::eta>("eta", "η", "task learning rate (meta-train and meta-update)"),
        real_field<&HyperParams::lambda>("lambda", "λ", "WAE latent divergence weight"),
        int_field<&HyperParams::inner_steps>("inner_steps", "", "meta-train gradient steps"),
        enum_field<&HyperParams::meta_grad_mode>(kMetaGradNames, "meta_grad_mode", "meta-gradient order"),
        enum_field<&HyperParams::relax_variant>(kRelaxNames, "relax_variant", "relaxation term variant"),
        uint_field<&HyperParams::seed>("seed", "", "master seed"),
        enum_field<&HyperParams::arch>(kArchNames, "arch", "task model architecture"),
        int_field<&HyperParams::conv1_channels>("conv1_channels", "", "digits_convnet first conv width"),
        int_field<&HyperParams::conv2_channels>("conv2_channels", "", "digits_convnet second conv width"),
        int_field<&HyperParams::fc_width>("fc_width", "", "digits_convnet fully-connected width"),
        int_field<&HyperParams::mlp_hidden>("mlp_hidden", "", "toy_mlp hidden width (0 = single linear map)"),
        int_field<&HyperParams::mlp_embed>("mlp_embed", "", "toy_mlp embedding width"),
        int_field<&HyperParams::batch_size>("batch_size", "", "training minibatch size"),
        int_field<&HyperParams::iterations>("iterations", "", "total task-model iterations"),
        enum_field<&HyperParams::optimizer>(kOptimizerNames, "optimizer", "outer optimizer"),
        real_field<&HyperParams::momentum>("momentum", "", "momentum for sgd_nesterov"),
        real_field<&HyperParams::aug_fraction>("aug_fraction", "|S+|/|S|", "augmented domain size relative to the source"),
        int_field<&HyperParams::wae_latent>("wae_latent", "dim e", "WAE latent width"),
        int_field<&HyperParams::wae_hidden>("wae_hidden", "", "WAE hidden width"),
        enum_field<&HyperParams::wae_divergence>(kDivergenceNames, "wae_divergence", "latent divergence D_e"),
        real_field<&HyperParams::wae_lr>("wae_lr", "", "WAE Adam learning rate"),
        int_field<&HyperParams::wae_epochs>("wae_epochs", "", "WAE pre-training epochs"),
        int_field<&HyperParams::wae_batch>("wae_batch", "", "WAE minibatch size"),
        real_field<&HyperParams::wae_retrain_fraction>("wae_retrain_fraction", "", "re-training epochs per round as a fraction of wae_epochs"),
        bool_field<&HyperParams::wae_retrain_union>("wae_retrain_union", "re-train on S and S+_k (false: S+_k only)"),
        real_field<&HyperParams::wae_holdout_fraction>("wae_holdout_fraction", "", "held-out source share for WAE monitoring"),
        int_field<&HyperParams::critic_hidden>("critic_hidden", "", "latent critic hidden width"),
        real_field<&HyperParams::mmd_bandwidth>("mmd_bandwidth", "", "RBF bandwidth (0 = median heuristic)"),
        real_field<&HyperParams::prior_sigma>("prior_sigma", "", "std-dev of the Gaussian latent prior P(e)"),
        int_field<&HyperParams::fewshot_iters>("fewshot_iters", "", "few-shot fine-tuning iterations"),
        real_field<&HyperParams::fewshot_lr>("fewshot_lr", "", "few-shot fine-tuning learning rate"),
        int_field<&HyperParams::fewshot_batch>("fewshot_batch", "", "few-shot fine-tuning batch size"),
        int_field<&HyperParams::w2_subsample>("w2_subsample", "", "embeddings per domain for Wasserstein distance"),
        uint_field<&HyperParams::w2_seed>("w2_seed", "", "subsample seed for Wasserstein distance"),
        int_field<&HyperParams::eval_batch>("eval_batch", "", "evaluation batch size"),
    };
    return fields;
}

[[nodiscard]] inline const FieldSpec* find_field(std::string_view key) {
    for (const auto& f : hyperparam_fields()) {
        if (f.key == key) return &f;
    }
    return nullptr;
}

/// Applies one `key=value` override.
inline void apply_override(HyperParams& h, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) {
        throw ConfigError(std::string(assignment), "override must look like key=value");
    }
    const auto key = detail::trim(assignment.substr(0, eq));
    const auto value = detail::trim(assignment.substr(eq + 1));
    const auto* field = find_field(key);
    if (field == nullptr) {
        throw ConfigError(key, "unknown config key");
    }
    field->set(h, value);
}

/// Parses `key = value` lines. Absent keys keep their defaults; `#` starts a comment;
/// keys under the `run.` prefix are run metadata written by manifests and are skipped.
[[nodiscard]] inline HyperParams parse_config(std::string_view text) {
    HyperParams h;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
        }
        if (detail::trim(std::string_view(body).substr(0, eq)).starts_with("run.")) continue;
        apply_override(h, body);
    }
    return h;
}

[[nodiscard]] inline HyperParams load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config", "cannot open " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

[[nodiscard]] inline std::string to_config_text(const HyperParams& h) {
    std::string out;
    for (const auto& f : hyperparam_fields()) {
        out += std::string(f.key) + " = " + f.get(h) + "\n";
    }
    return out;
}

namespace detail {

inline void require(bool ok, std::string_view field, const std::string& message) {
    if (!ok) throw ConfigError(std::string(field), message);
}

// Spatial size after a valid (unpadded) conv with kernel k followed by 2x2 pooling.
inline std::int64_t conv_pool(std::int64_t n, std::int64_t k) { return (n - k + 1) / 2; }

}  // namespace detail

/// Checks every invariant and the architecture against the data signature.
/// Returns the record unchanged when valid; idempotent.
[[nodiscard]] inline HyperParams validate_config(const HyperParams& h, const ShapeSignature& sig) {
    using detail::require;
    require(h.alpha >= 0.0, "alpha", "must be >= 0");
    require(h.beta >= 0.0, "beta", "must be >= 0");
    require(h.lambda >= 0.0, "lambda", "must be >= 0");
    require(h.gamma >= 0.0, "gamma", "must be >= 0");
    require(h.gamma > 0.0 || h.t_adv == 0, "gamma", "must be > 0 unless t_adv = 0");
    require(h.eta > 0.0, "eta", "must be > 0");
    require(h.t_adv >= 0, "t_adv", "must be >= 0");
    require(h.k_domains >= 0, "k_domains", "must be >= 0");
    require(h.inner_steps >= 1, "inner_steps", "must be >= 1");
    require(h.batch_size >= 1, "batch_size", "must be >= 1");
    require(h.iterations >= 0, "iterations", "must be >= 0");
    require(h.momentum >= 0.0 && h.momentum < 1.0, "momentum", "must lie in [0,1)");
    require(h.aug_fraction > 0.0 && h.aug_fraction <= 1.0, "aug_fraction", "must lie in (0,1]");
    require(h.wae_latent >= 1, "wae_latent", "must be >= 1");
    require(h.wae_hidden >= 1, "wae_hidden", "must be >= 1");
    require(h.wae_lr > 0.0, "wae_lr", "must be > 0");
    require(h.wae_epochs >= 0, "wae_epochs", "must be >= 0");
    require(h.wae_batch >= 1, "wae_batch", "must be >= 1");
    require(h.wae_retrain_fraction >= 0.0, "wae_retrain_fraction", "must be >= 0");
    require(h.wae_holdout_fraction >= 0.0 && h.wae_holdout_fraction < 1.0, "wae_holdout_fraction",
            "must lie in [0,1)");
    require(h.critic_hidden >= 1, "critic_hidden", "must be >= 1");
    require(h.mmd_bandwidth >= 0.0, "mmd_bandwidth", "must be >= 0");
    require(h.prior_sigma > 0.0, "prior_sigma", "must be > 0");
    require(h.fewshot_iters >= 0, "fewshot_iters", "must be >= 0");
    require(h.fewshot_lr > 0.0, "fewshot_lr", "must be > 0");
    require(h.fewshot_batch >= 1, "fewshot_batch", "must be >= 1");
    require(h.w2_subsample >= 1, "w2_subsample", "must be >= 1");
    require(h.eval_batch >= 1, "eval_batch", "must be >= 1");

    require(sig.height >= 1 && sig.width >= 1 && sig.channels >= 1, "data", "empty shape signature " + sig.str());
    require(sig.n_classes >= 2, "data", "need at least two classes");
    switch (h.arch) {
        case ArchTag::digits_convnet: {
            require(h.conv1_channels >= 1, "conv1_channels", "must be >= 1");
            require(h.conv2_channels >= 1, "conv2_channels", "must be >= 1");
            require(h.fc_width >= 1, "fc_width", "must be >= 1");
            const auto hh = detail::conv_pool(detail::conv_pool(sig.height, 5), 5);
            const auto ww = detail::conv_pool(detail::conv_pool(sig.width, 5), 5);
            require(hh >= 1 && ww >= 1, "arch", "digits_convnet needs inputs of at least 16x16, got " + sig.str());
            break;
        }
        case ArchTag::wrn_16_4:
            require(sig.height == 32 && sig.width == 32, "arch", "wrn_16_4 expects 32x32 inputs, got " + sig.str());
            break;
        case ArchTag::toy_mlp:
            require(h.mlp_hidden >= 0, "mlp_hidden", "must be >= 0");
            require(h.mlp_embed >= 1, "mlp_embed", "must be >= 1");
            break;
    }
    return h;
}

/// Seconds-resolution UTC timestamp.
[[nodiscard]] inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

#ifndef MADA_VERSION
#define MADA_VERSION "0.1.0"
#endif

/// Writes the resolved config plus run metadata (`run.*` keys) as a re-loadable config file.
inline void write_manifest(const std::filesystem::path& path, const HyperParams& h,
                           const std::map<std::string, std::string>& run_info) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write manifest " + path.string());
    }
    out << "# resolved run configuration; reload with --config\n";
    out << "run.version = " << MADA_VERSION << "\n";
    for (const auto& [k, v] : run_info) {
        out << "run." << k << " = " << v << "\n";
    }
    out << to_config_text(h);
}

}  // namespace mada
