#pragma once

#include <openssl/evp.h>
#include <torch/torch.h>
#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mada/config.hpp"
#include "mada/datamodel.hpp"
#include "mada/error.hpp"
#include "mada/kvfile.hpp"

#ifndef MADA_DATA_DIR
#define MADA_DATA_DIR "data"
#endif

namespace mada {

// ---------------------------------------------------------------------------
// Checksums
// ---------------------------------------------------------------------------

/// Incremental SHA-256, hex-encoded.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
            throw DataError("sha256: init failed");
        }
    }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;
    ~Sha256() { EVP_MD_CTX_free(ctx_); }

    void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }

    [[nodiscard]] std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md.data(), &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out += digits[md[i] >> 4];
            out += digits[md[i] & 0xF];
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

[[nodiscard]] inline std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

[[nodiscard]] inline std::string sha256_tensor(const torch::Tensor& t) {
    auto c = t.contiguous();
    Sha256 h;
    h.update(c.data_ptr(), static_cast<std::size_t>(c.numel() * c.element_size()));
    return h.hex();
}

/// Reads a `sha256sum`-style file into name -> digest.
[[nodiscard]] inline std::map<std::string, std::string> read_sha256sums(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path.string());
    std::map<std::string, std::string> out;
    std::string digest;
    std::string name;
    while (in >> digest >> name) out[name] = digest;
    return out;
}

// ---------------------------------------------------------------------------
// Source datasets
// ---------------------------------------------------------------------------

enum class Split { train, test };
enum class DatasetOrigin { downloaded, synthesized };

struct DatasetManifest {
    std::string name;
    Split split{Split::train};
    std::int64_t n_samples{0};
    ShapeSignature signature;
    std::string checksum;  // SHA-256 of the float32 image payload followed by the int32 labels
    DatasetOrigin source{DatasetOrigin::downloaded};
};

/// How raw digits are brought to the model's input shape.
struct SourceOptions {
    std::int64_t resize{32};   // 0 keeps the native size
    bool rgb{true};            // duplicate grayscale into three channels
    std::filesystem::path root{MADA_DATA_DIR};
};

namespace detail {

inline std::vector<std::uint8_t> read_gz(const std::filesystem::path& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::array<std::uint8_t, 1 << 16> buf{};
    int n = 0;
    while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw DataError("corrupt gzip stream in " + path.string());
    return out;
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    if (off + 4 > b.size()) throw DataError("IDX header truncated");
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline std::string fetch_hint() {
    return "run `python3 tools/fetch_mnist.py --mlxtend` (or `--official DIR` with the four MNIST files)";
}

}  // namespace detail

/// Reads an IDX image file (magic 0x803) as N x H x W uint8.
[[nodiscard]] inline torch::Tensor read_idx_images(const std::filesystem::path& path) {
    const auto b = detail::read_gz(path);
    if (detail::be32(b, 0) != 0x803) throw DataError(path.string() + ": not an IDX image file");
    const std::int64_t n = detail::be32(b, 4), h = detail::be32(b, 8), w = detail::be32(b, 12);
    if (b.size() != static_cast<std::size_t>(16 + n * h * w)) throw DataError(path.string() + ": payload size mismatch");
    return torch::from_blob(const_cast<std::uint8_t*>(b.data()) + 16, {n, h, w}, torch::kUInt8).clone();
}

/// Reads an IDX label file (magic 0x801) as int64.
[[nodiscard]] inline torch::Tensor read_idx_labels(const std::filesystem::path& path) {
    const auto b = detail::read_gz(path);
    if (detail::be32(b, 0) != 0x801) throw DataError(path.string() + ": not an IDX label file");
    const std::int64_t n = detail::be32(b, 4);
    if (b.size() != static_cast<std::size_t>(8 + n)) throw DataError(path.string() + ": payload size mismatch");
    return torch::from_blob(const_cast<std::uint8_t*>(b.data()) + 8, {n}, torch::kUInt8).to(torch::kInt64);
}

/// The first `limit` samples of `name` ("mnist" or "mnist-test"), scaled to [0,1], bilinearly
/// resized and channel-duplicated as configured. Every file is checked against SHA256SUMS.
[[nodiscard]] inline Domain load_source(const std::string& name, std::int64_t limit, const SourceOptions& opt = {},
                                        DatasetManifest* manifest = nullptr) {
    Split split = Split::train;
    if (name == "mnist-test") {
        split = Split::test;
    } else if (name != "mnist") {
        throw DataError("unknown dataset '" + name + "' (known: mnist, mnist-test)");
    }
    const auto dir = opt.root / "mnist";
    const std::string prefix = split == Split::train ? "train" : "t10k";
    const auto img_file = prefix + "-images-idx3-ubyte.gz";
    const auto lbl_file = prefix + "-labels-idx1-ubyte.gz";
    for (const auto& f : {img_file, lbl_file}) {
        if (!std::filesystem::exists(dir / f)) throw DataError("dataset missing: " + (dir / f).string() + "; " + detail::fetch_hint());
    }
    if (!std::filesystem::exists(dir / "SHA256SUMS")) throw DataError("missing " + (dir / "SHA256SUMS").string() + "; " + detail::fetch_hint());
    const auto sums = read_sha256sums(dir / "SHA256SUMS");
    for (const auto& f : {img_file, lbl_file}) {
        const auto it = sums.find(f);
        if (it == sums.end()) throw DataError("SHA256SUMS has no entry for " + f);
        if (sha256_file(dir / f) != it->second) throw DataError("checksum mismatch for " + (dir / f).string());
    }
    auto raw = read_idx_images(dir / img_file);
    auto labels = read_idx_labels(dir / lbl_file);
    if (raw.size(0) != labels.size(0)) throw DataError(name + ": image and label counts differ");
    if (limit < 1 || limit > raw.size(0)) {
        throw DataError(name + ": limit " + std::to_string(limit) + " outside [1, " + std::to_string(raw.size(0)) + "]");
    }
    auto x = raw.slice(0, 0, limit).to(torch::kFloat32).div(255.0f).unsqueeze(1);  // N x 1 x H x W
    if (opt.resize > 0 && (x.size(2) != opt.resize || x.size(3) != opt.resize)) {
        namespace F = torch::nn::functional;
        x = F::interpolate(x, F::InterpolateFuncOptions()
                                  .size(std::vector<std::int64_t>{opt.resize, opt.resize})
                                  .mode(torch::kBilinear)
                                  .align_corners(false))
                .clamp(0.0, 1.0);
    }
    if (opt.rgb) x = x.expand({x.size(0), 3, x.size(2), x.size(3)});
    Domain d;
    d.id = name;
    d.kind = DomainKind::source();
    d.images = x.permute({0, 2, 3, 1}).contiguous();
    d.labels = labels.slice(0, 0, limit).contiguous();
    d.n_classes = 10;
    d.validate();
    if (manifest != nullptr) {
        Sha256 h;
        h.update(d.images.data_ptr(), static_cast<std::size_t>(d.images.numel() * 4));
        auto l32 = d.labels.to(torch::kInt32).contiguous();
        h.update(l32.data_ptr(), static_cast<std::size_t>(l32.numel() * 4));
        *manifest = {name, split, d.size(), d.signature(), h.hex(), DatasetOrigin::downloaded};
    }
    return d;
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

enum class CorruptionFamily { noise, blur, weather, digital };

inline std::string to_string(CorruptionFamily f) {
    switch (f) {
        case CorruptionFamily::noise: return "noise";
        case CorruptionFamily::blur: return "blur";
        case CorruptionFamily::weather: return "weather";
        case CorruptionFamily::digital: return "digital";
    }
    return "noise";
}

inline const std::vector<std::string>& corruption_kinds() {
    static const std::vector<std::string> kinds{"gaussian_noise", "shot_noise",    "impulse_noise", "speckle_noise",
                                                "defocus_blur",   "gaussian_blur", "motion_blur",   "fog",
                                                "brightness",     "contrast",      "jpeg",          "pixelate"};
    return kinds;
}

struct CorruptionSpec {
    CorruptionFamily family{CorruptionFamily::noise};
    std::string kind;
    int severity{1};  // 1..5; 0 is the identity

    [[nodiscard]] std::string domain_id() const { return kind + "@" + std::to_string(severity); }
};

/// Per-kind family and five severity parameters.
struct CorruptionTable {
    CorruptionFamily family{CorruptionFamily::noise};
    std::array<double, 5> levels{};
};

[[nodiscard]] inline std::map<std::string, CorruptionTable> load_corruption_tables(
    const std::filesystem::path& path = std::filesystem::path(MADA_DATA_DIR) / "tables" / "corruptions.cfg") {
    const auto kv = KeyValues::load(path);
    std::map<std::string, CorruptionTable> out;
    for (const auto& [kind, value] : kv.entries()) {
        std::vector<std::string> cells;
        std::stringstream ss(value);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(detail::trim(cell));
        if (cells.size() != 6) throw DataError(path.string() + ": " + kind + " needs a family and 5 levels");
        CorruptionTable t;
        if (cells[0] == "noise") t.family = CorruptionFamily::noise;
        else if (cells[0] == "blur") t.family = CorruptionFamily::blur;
        else if (cells[0] == "weather") t.family = CorruptionFamily::weather;
        else if (cells[0] == "digital") t.family = CorruptionFamily::digital;
        else throw DataError(path.string() + ": unknown family " + cells[0]);
        for (std::size_t i = 0; i < 5; ++i) {
            try {
                t.levels[i] = detail::parse_real(kind, cells[i + 1]);
            } catch (const ConfigError& e) {
                throw DataError(path.string() + ": " + e.what());
            }
        }
        out[kind] = t;
    }
    return out;
}

[[nodiscard]] inline CorruptionSpec make_corruption_spec(const std::string& kind, int severity,
                                                         const std::map<std::string, CorruptionTable>& tables) {
    const auto it = tables.find(kind);
    if (it == tables.end()) throw ConfigError("corruption", "unknown kind '" + kind + "'");
    if (severity < 0 || severity > 5) throw ConfigError("severity", "must be in 1..5");
    return {it->second.family, kind, severity};
}

namespace detail {

using torch::indexing::Slice;

/// Depthwise 2-D convolution of NCHW `x` with a single k x k kernel, replicate padding.
inline torch::Tensor depthwise(const torch::Tensor& x, const torch::Tensor& kernel) {
    const auto c = x.size(1);
    const auto kh = kernel.size(0);
    const auto kw = kernel.size(1);
    namespace F = torch::nn::functional;
    auto padded = F::pad(x, F::PadFuncOptions({kw / 2, (kw - 1) / 2, kh / 2, (kh - 1) / 2}).mode(torch::kReplicate));
    auto w = kernel.to(x.scalar_type()).expand({c, 1, kh, kw}).contiguous();
    return torch::conv2d(padded, w, {}, 1, std::int64_t{0}, 1, c);
}

inline torch::Tensor gaussian_kernel(double sigma) {
    const auto r = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    auto t = torch::arange(-r, r + 1, torch::kFloat64);
    auto g = torch::exp(-(t * t) / (2.0 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g);
}

inline torch::Tensor disk_kernel(double radius) {
    const auto r = static_cast<std::int64_t>(std::ceil(radius));
    auto t = torch::arange(-r, r + 1, torch::kFloat64);
    auto d2 = t.unsqueeze(1).pow(2) + t.unsqueeze(0).pow(2);
    auto k = (d2 <= radius * radius).to(torch::kFloat64);
    return k / k.sum();
}

inline torch::Tensor dct_matrix(std::int64_t n) {
    auto m = torch::empty({n, n}, torch::kFloat64);
    const double pi = std::acos(-1.0);
    for (std::int64_t k = 0; k < n; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            m[k][i] = scale * std::cos(pi * (2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(k) / (2.0 * static_cast<double>(n)));
        }
    }
    return m;
}

/// 8x8 block DCT, coefficients quantized with step q * (1 + u + v), inverse DCT.
inline torch::Tensor block_dct_quantize(const torch::Tensor& x, double q) {
    const std::int64_t b = 8;
    const auto h = x.size(2);
    const auto w = x.size(3);
    const auto ph = (b - h % b) % b;
    const auto pw = (b - w % b) % b;
    namespace F = torch::nn::functional;
    auto xp = F::pad(x.to(torch::kFloat64), F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
    const auto n = xp.size(0), c = xp.size(1), hh = xp.size(2), ww = xp.size(3);
    auto blocks = xp.reshape({n, c, hh / b, b, ww / b, b}).permute({0, 1, 2, 4, 3, 5});
    auto d = dct_matrix(b);
    auto coef = torch::matmul(torch::matmul(d, blocks - 0.5), d.t());
    auto uv = torch::arange(b, torch::kFloat64);
    auto step = q * (1.0 + uv.unsqueeze(1) + uv.unsqueeze(0));
    coef = torch::round(coef / step) * step;
    auto back = torch::matmul(torch::matmul(d.t(), coef), d) + 0.5;
    back = back.permute({0, 1, 2, 4, 3, 5}).reshape({n, c, hh, ww});
    return back.index({Slice(), Slice(), Slice(0, h), Slice(0, w)}).to(x.scalar_type());
}

inline torch::Tensor low_res_field(std::int64_t n, std::int64_t h, std::int64_t w, at::Generator& gen) {
    namespace F = torch::nn::functional;
    auto coarse = torch::rand({n, 1, 4, 4}, gen, torch::kFloat32);
    return F::interpolate(coarse, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{h, w})
                                      .mode(torch::kBilinear)
                                      .align_corners(true));
}

}  // namespace detail

/// Applies the seeded corruption kernel at `spec.severity`; labels and shape are unchanged and
/// pixels are clamped to [0,1]. Severity 0 returns the input unchanged.
[[nodiscard]] inline Domain corrupt(const Domain& domain, const CorruptionSpec& spec, std::uint64_t seed,
                                    const std::map<std::string, CorruptionTable>& tables = load_corruption_tables()) {
    const auto it = tables.find(spec.kind);
    if (it == tables.end()) throw ConfigError("corruption", "unknown kind '" + spec.kind + "'");
    if (spec.severity < 0 || spec.severity > 5) throw ConfigError("severity", "must be in 1..5");
    Domain out = domain;
    out.id = domain.id + "/" + spec.domain_id();
    out.kind = DomainKind::target();
    out.provenance.reset();
    if (spec.severity == 0) {
        out.images = domain.images.clone();
        return out;
    }
    const double p = it->second.levels[static_cast<std::size_t>(spec.severity - 1)];
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto x = domain.images.permute({0, 3, 1, 2}).contiguous();  // NCHW
    const auto& k = spec.kind;
    torch::Tensor y;
    if (k == "gaussian_noise") {
        y = x + p * torch::randn(x.sizes(), gen, x.options());
    } else if (k == "shot_noise") {
        y = torch::poisson(x * p, gen) / p;
    } else if (k == "impulse_noise") {
        auto u = torch::rand(x.sizes(), gen, x.options());
        auto salt = torch::rand(x.sizes(), gen, x.options()) < 0.5;
        y = torch::where(u < p, salt.to(x.scalar_type()), x);
    } else if (k == "speckle_noise") {
        y = x + x * p * torch::randn(x.sizes(), gen, x.options());
    } else if (k == "defocus_blur") {
        y = detail::depthwise(x, detail::disk_kernel(p));
    } else if (k == "gaussian_blur") {
        y = detail::depthwise(x, detail::gaussian_kernel(p));
    } else if (k == "motion_blur") {
        const auto len = static_cast<std::int64_t>(p);
        y = detail::depthwise(x, torch::full({1, len}, 1.0 / static_cast<double>(len), torch::kFloat64));
    } else if (k == "fog") {
        auto field = detail::low_res_field(x.size(0), x.size(2), x.size(3), gen);
        auto peak = x.amax({1, 2, 3}, true);
        y = (x + p * field) * peak / (peak + p);
    } else if (k == "brightness") {
        y = x + p;
    } else if (k == "contrast") {
        auto mean = x.mean({1, 2, 3}, true);
        y = (x - mean) * p + mean;
    } else if (k == "jpeg") {
        y = detail::block_dct_quantize(x, p);
    } else if (k == "pixelate") {
        namespace F = torch::nn::functional;
        const auto h = x.size(2), w = x.size(3);
        const auto sh = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(static_cast<double>(h) * p)));
        const auto sw = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(static_cast<double>(w) * p)));
        auto small = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({sh, sw}));
        y = F::interpolate(small, F::InterpolateFuncOptions().size(std::vector<std::int64_t>{h, w}).mode(torch::kNearest));
    } else {
        throw ConfigError("corruption", "no kernel for kind '" + k + "'");
    }
    out.images = y.clamp(0.0, 1.0).permute({0, 2, 3, 1}).contiguous();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic appearance shifts
// ---------------------------------------------------------------------------

enum class ShiftKind { invert, color_background, channel_swap, noise_overlay };

inline std::string to_string(ShiftKind k) {
    switch (k) {
        case ShiftKind::invert: return "invert";
        case ShiftKind::color_background: return "color_background";
        case ShiftKind::channel_swap: return "channel_swap";
        case ShiftKind::noise_overlay: return "noise_overlay";
    }
    return "invert";
}

[[nodiscard]] inline ShiftKind parse_shift(const std::string& s) {
    for (auto k : {ShiftKind::invert, ShiftKind::color_background, ShiftKind::channel_swap, ShiftKind::noise_overlay}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("shift", "unknown shift kind '" + s + "'");
}

/// Label-preserving appearance shifts:
///   invert            1 - x
///   color_background  per-image random foreground and background colours blended by the
///                     channel-mean intensity; the two colours differ by at least 0.4 in mean
///   channel_swap      per-image random permutation of the colour channels
///   noise_overlay     0.6 x + 0.4 u with u uniform per pixel and channel
[[nodiscard]] inline Domain synth_shift(const Domain& domain, ShiftKind kind, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto& x = domain.images;
    const auto n = x.size(0);
    const auto c = x.size(3);
    torch::Tensor y;
    switch (kind) {
        case ShiftKind::invert:
            y = 1.0 - x;
            break;
        case ShiftKind::color_background: {
            auto bg = torch::rand({n, 1, 1, c}, gen, x.options());
            auto fg = torch::rand({n, 1, 1, c}, gen, x.options());
            // Blend the brighter colour toward white and the dimmer toward black by t, which widens
            // the mean gap g to g + t (1 - g); t is the smallest value reaching 0.4.
            auto gap = fg.mean(3, true) - bg.mean(3, true);
            auto fg_brighter = gap >= 0;
            auto t = ((0.4 - gap.abs()) / (1.0 - gap.abs())).clamp_min(0.0);
            auto hi = torch::where(fg_brighter, fg, bg);
            auto lo = torch::where(fg_brighter, bg, fg);
            hi = hi + t * (1.0 - hi);
            lo = lo * (1.0 - t);
            fg = torch::where(fg_brighter, hi, lo);
            bg = torch::where(fg_brighter, lo, hi);
            auto intensity = x.mean(3, true);
            y = intensity * fg + (1.0 - intensity) * bg;
            break;
        }
        case ShiftKind::channel_swap: {
            std::vector<torch::Tensor> imgs;
            imgs.reserve(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) imgs.push_back(x[i].index_select(2, torch::randperm(c, gen, torch::kInt64)));
            y = torch::stack(imgs);
            break;
        }
        case ShiftKind::noise_overlay:
            y = 0.6 * x + 0.4 * torch::rand(x.sizes(), gen, x.options());
            break;
    }
    Domain out = domain;
    out.id = domain.id + "/" + to_string(kind);
    out.kind = DomainKind::target();
    out.provenance.reset();
    out.images = y.clamp(0.0, 1.0).contiguous();
    return out;
}

// ---------------------------------------------------------------------------
// Domain persistence
// ---------------------------------------------------------------------------

namespace detail {

inline std::string domain_checksum(const std::filesystem::path& dir) {
    Sha256 h;
    for (const char* f : {"images.f32", "labels.i32"}) {
        std::ifstream in(dir / f, std::ios::binary);
        if (!in) throw DataError("cannot read " + (dir / f).string());
        std::array<char, 1 << 16> buf{};
        while (in) {
            in.read(buf.data(), buf.size());
            h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
        }
    }
    return h.hex();
}

inline void write_raw(const std::filesystem::path& path, const torch::Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    auto c = t.contiguous();
    out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
    if (!out) throw DataError("write failed for " + path.string());
}

inline torch::Tensor read_raw(const std::filesystem::path& path, std::vector<std::int64_t> shape, torch::Dtype dtype) {
    auto t = torch::empty(shape, dtype);
    const auto nbytes = static_cast<std::uintmax_t>(t.numel() * t.element_size());
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec || size != nbytes) throw DataError(path.string() + ": payload size does not match manifest");
    std::ifstream in(path, std::ios::binary);
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw DataError("cannot read " + path.string());
    return t;
}

}  // namespace detail

/// Directory container: manifest.cfg, images.f32 (little-endian float32, N x H x W x C row-major),
/// labels.i32, checksum.sha256 and, for augmented domains, provenance.cfg.
inline void save_domain(const Domain& domain, const std::filesystem::path& path) {
    domain.validate();
    write_directory_atomically(path, [&](const std::filesystem::path& tmp) {
        detail::write_raw(tmp / "images.f32", domain.images.to(torch::kFloat32));
        detail::write_raw(tmp / "labels.i32", domain.labels.to(torch::kInt32));
        KeyValues kv;
        kv.set("format", "mada-domain-1");
        kv.set("id", domain.id);
        kv.set("kind", domain.kind.str());
        kv.set("round", domain.kind.round);
        kv.set("n_samples", domain.size());
        kv.set("height", domain.images.size(1));
        kv.set("width", domain.images.size(2));
        kv.set("channels", domain.images.size(3));
        kv.set("n_classes", domain.n_classes);
        kv.set("images", "images.f32 float32 little-endian NHWC");
        kv.set("labels", "labels.i32 int32 little-endian");
        kv.save(tmp / "manifest.cfg");
        if (domain.provenance) {
            KeyValues pv;
            pv.set("ascent_steps", domain.provenance->ascent_steps);
            pv.set("gamma", domain.provenance->gamma);
            pv.set("alpha", domain.provenance->alpha);
            pv.set("beta", domain.provenance->beta);
            for (std::size_t i = 0; i < domain.provenance->origins.size(); ++i) {
                pv.set("origin." + std::to_string(i), domain.provenance->origins[i]);
            }
            pv.save(tmp / "provenance.cfg");
        }
        std::ofstream(tmp / "checksum.sha256") << detail::domain_checksum(tmp) << "\n";
    });
}

[[nodiscard]] inline Domain load_domain(const std::filesystem::path& path) {
    const auto kv = KeyValues::load(path / "manifest.cfg");
    if (kv.get_or("format", "") != "mada-domain-1") throw DataError(path.string() + ": not a domain container");
    std::ifstream sum_in(path / "checksum.sha256");
    std::string expected;
    if (!(sum_in >> expected)) throw DataError(path.string() + ": missing checksum");
    if (detail::domain_checksum(path) != expected) throw DataError(path.string() + ": checksum mismatch");
    Domain d;
    d.id = kv.get("id");
    const auto kind = kv.get("kind");
    const auto round = static_cast<int>(kv.get_int("round"));
    if (kind == "source") d.kind = DomainKind::source();
    else if (kind == "target") d.kind = DomainKind::target();
    else if (kind == "augmented") d.kind = DomainKind::augmented(round);
    else throw DataError(path.string() + ": unknown domain kind " + kind);
    const auto n = kv.get_int("n_samples");
    d.n_classes = kv.get_int("n_classes");
    d.images = detail::read_raw(path / "images.f32", {n, kv.get_int("height"), kv.get_int("width"), kv.get_int("channels")},
                                torch::kFloat32);
    d.labels = detail::read_raw(path / "labels.i32", {n}, torch::kInt32).to(torch::kInt64);
    if (std::filesystem::exists(path / "provenance.cfg")) {
        const auto pv = KeyValues::load(path / "provenance.cfg");
        AugmentProvenance p;
        p.ascent_steps = pv.get_int("ascent_steps");
        p.gamma = pv.get_real("gamma");
        p.alpha = pv.get_real("alpha");
        p.beta = pv.get_real("beta");
        for (std::int64_t i = 0; i < n; ++i) p.origins.push_back(pv.get("origin." + std::to_string(i)));
        d.provenance = std::move(p);
    }
    d.validate();
    return d;
}

}  // namespace mada
