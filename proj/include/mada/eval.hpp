#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mada/config.hpp"
#include "mada/datamodel.hpp"
#include "mada/error.hpp"
#include "mada/metaloop.hpp"
#include "mada/nets.hpp"

namespace mada {

// ---------------------------------------------------------------------------
// Accuracy and corruption metrics
// ---------------------------------------------------------------------------

/// Fraction of samples whose arg-max prediction equals the label.
[[nodiscard]] inline double accuracy(const TaskParams& theta, const Domain& domain, std::int64_t chunk = 256) {
    if (domain.empty()) throw DataError("accuracy: empty domain " + domain.id);
    torch::NoGradGuard no_grad;
    std::int64_t correct = 0;
    for (std::int64_t s = 0; s < domain.size(); s += chunk) {
        const auto e = std::min(domain.size(), s + chunk);
        auto logits = forward_logits(theta, forward_features(theta, domain.images.slice(0, s, e), Mode::eval));
        correct += logits.argmax(1).eq(domain.labels.slice(0, s, e)).sum().item<std::int64_t>();
    }
    return static_cast<double>(correct) / static_cast<double>(domain.size());
}

/// Per-corruption error rates plus the clean error.
struct ErrorTable {
    std::map<std::string, double> entries;
    double clean_error{0.0};

    void validate() const {
        auto check = [](const std::string& name, double e) {
            if (!(e >= 0.0 && e <= 1.0)) throw DataError("error table: rate for " + name + " outside [0,1]");
        };
        check("clean", clean_error);
        for (const auto& [k, v] : entries) check(k, v);
    }
};

/// Error = 1 - accuracy on the clean domain and on each corrupted domain.
[[nodiscard]] inline ErrorTable error_table(const TaskParams& theta, const Domain& clean,
                                            const std::map<std::string, Domain>& corrupted) {
    ErrorTable t;
    t.clean_error = 1.0 - accuracy(theta, clean);
    for (const auto& [name, d] : corrupted) t.entries[name] = 1.0 - accuracy(theta, d);
    return t;
}

namespace detail {

inline void require_same_keys(const ErrorTable& f, const ErrorTable& erm) {
    if (f.entries.empty()) throw DataError("error table has no corruptions");
    if (f.entries.size() != erm.entries.size()) throw DataError("error tables cover different corruptions");
    for (const auto& [k, v] : f.entries) {
        if (!erm.entries.contains(k)) throw DataError("baseline error table lacks corruption " + k);
    }
}

}  // namespace detail

/// (1/N) Σ_i E_i^f / E_i^ERM.
[[nodiscard]] inline double mce(const ErrorTable& f, const ErrorTable& erm) {
    detail::require_same_keys(f, erm);
    double acc = 0.0;
    for (const auto& [k, e] : f.entries) {
        const auto base = erm.entries.at(k);
        if (base == 0.0) throw UndefinedMetricError(k, "baseline error is zero, mCE ratio undefined");
        acc += e / base;
    }
    return acc / static_cast<double>(f.entries.size());
}

/// (1/N) Σ_i (E_i^f - E_clean^f) / (E_i^ERM - E_clean^ERM).
[[nodiscard]] inline double rmce(const ErrorTable& f, const ErrorTable& erm) {
    detail::require_same_keys(f, erm);
    double acc = 0.0;
    for (const auto& [k, e] : f.entries) {
        const auto denom = erm.entries.at(k) - erm.clean_error;
        if (denom == 0.0) throw UndefinedMetricError(k, "baseline error equals clean error, RmCE ratio undefined");
        acc += (e - f.clean_error) / denom;
    }
    return acc / static_cast<double>(f.entries.size());
}

// ---------------------------------------------------------------------------
// Exact empirical 2-Wasserstein distance
// ---------------------------------------------------------------------------

namespace detail {

/// Squared Euclidean cost matrix, row-major n x m, in double precision.
inline std::vector<double> sq_cost(const torch::Tensor& a, const torch::Tensor& b) {
    auto a64 = a.to(torch::kFloat64).contiguous();
    auto b64 = b.to(torch::kFloat64).contiguous();
    const auto n = a64.size(0);
    const auto m = b64.size(0);
    const auto d = a64.size(1);
    const auto* pa = a64.data_ptr<double>();
    const auto* pb = b64.data_ptr<double>();
    std::vector<double> c(static_cast<std::size_t>(n * m));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::int64_t k = 0; k < d; ++k) {
                const auto diff = pa[i * d + k] - pb[j * d + k];
                s += diff * diff;
            }
            c[static_cast<std::size_t>(i * m + j)] = s;
        }
    }
    return c;
}

/// Minimum-cost perfect matching on an n x n cost matrix (shortest augmenting path, O(n^3)).
/// Returns the total cost.
inline double hungarian(const std::vector<double>& cost, std::int64_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::int64_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::int64_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const auto i0 = p[j0];
            double delta = inf;
            std::int64_t j1 = 0;
            for (std::int64_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const auto cur = cost[static_cast<std::size_t>((i0 - 1) * n + (j - 1))] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::int64_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const auto j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0.0;
    for (std::int64_t j = 1; j <= n; ++j) total += cost[static_cast<std::size_t>((p[j] - 1) * n + (j - 1))];
    return total;
}

/// Transportation problem with supplies `m` at each of n rows and demands `n` at each of m
/// columns, solved by successive shortest paths with potentials. Returns Σ flow * cost.
inline double transport_uniform(const std::vector<double>& cost, std::int64_t n, std::int64_t m) {
    // Nodes: 0 = source, 1..n rows, n+1..n+m columns, n+m+1 = sink.
    struct Edge {
        std::int64_t to;
        std::int64_t cap;
        double cost;
    };
    const auto nodes = n + m + 2;
    const auto src = 0;
    const auto sink = n + m + 1;
    std::vector<Edge> edges;
    std::vector<std::vector<std::int64_t>> adj(static_cast<std::size_t>(nodes));
    auto add = [&](std::int64_t a, std::int64_t b, std::int64_t cap, double c) {
        adj[a].push_back(static_cast<std::int64_t>(edges.size()));
        edges.push_back({b, cap, c});
        adj[b].push_back(static_cast<std::int64_t>(edges.size()));
        edges.push_back({a, 0, -c});
    };
    for (std::int64_t i = 0; i < n; ++i) add(src, 1 + i, m, 0.0);
    for (std::int64_t j = 0; j < m; ++j) add(1 + n + j, sink, n, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) add(1 + i, 1 + n + j, n * m, cost[static_cast<std::size_t>(i * m + j)]);
    }
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> pot(static_cast<std::size_t>(nodes), 0.0), dist(static_cast<std::size_t>(nodes));
    std::vector<std::int64_t> prev_edge(static_cast<std::size_t>(nodes));
    std::int64_t remaining = n * m;
    double total = 0.0;
    while (remaining > 0) {
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(prev_edge.begin(), prev_edge.end(), -1);
        std::vector<char> done(static_cast<std::size_t>(nodes), 0);
        dist[src] = 0.0;
        for (std::int64_t iter = 0; iter < nodes; ++iter) {
            std::int64_t u = -1;
            for (std::int64_t x = 0; x < nodes; ++x) {
                if (!done[x] && dist[x] < inf && (u < 0 || dist[x] < dist[u])) u = x;
            }
            if (u < 0) break;
            done[u] = 1;
            for (auto ei : adj[u]) {
                const auto& e = edges[ei];
                if (e.cap <= 0) continue;
                const auto nd = dist[u] + std::max(0.0, e.cost + pot[u] - pot[e.to]);
                if (nd < dist[e.to]) {
                    dist[e.to] = nd;
                    prev_edge[e.to] = ei;
                }
            }
        }
        if (dist[sink] == inf) throw NumericalError("transport: infeasible flow");
        for (std::int64_t x = 0; x < nodes; ++x) {
            if (dist[x] < inf) pot[x] += dist[x];
        }
        std::int64_t push = remaining;
        for (auto x = sink; x != src; x = edges[prev_edge[x] ^ 1].to) push = std::min(push, edges[prev_edge[x]].cap);
        for (auto x = sink; x != src; x = edges[prev_edge[x] ^ 1].to) {
            auto& e = edges[prev_edge[x]];
            e.cap -= push;
            edges[prev_edge[x] ^ 1].cap += push;
            total += static_cast<double>(push) * e.cost;
        }
        remaining -= push;
    }
    return total;
}

}  // namespace detail

/// Exact W2 between the uniform empirical measures on the rows of `a` and `b`.
[[nodiscard]] inline double empirical_wasserstein(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2) throw DataError("empirical_wasserstein: expected 2-D point sets");
    if (a.size(0) == 0 || b.size(0) == 0) throw DataError("empirical_wasserstein: empty point set");
    if (a.size(1) != b.size(1)) {
        throw DataError("empirical_wasserstein: dimension mismatch " + std::to_string(a.size(1)) + " vs " +
                        std::to_string(b.size(1)));
    }
    const auto n = a.size(0);
    const auto m = b.size(0);
    const auto cost = detail::sq_cost(a.detach(), b.detach());
    double w2sq = 0.0;
    if (n == m) {
        w2sq = detail::hungarian(cost, n) / static_cast<double>(n);
    } else {
        w2sq = detail::transport_uniform(cost, n, m) / static_cast<double>(n * m);
    }
    return std::sqrt(std::max(0.0, w2sq));
}

/// Rows of `domain` embedded by F in eval mode, in chunks.
[[nodiscard]] inline torch::Tensor embed_domain(const TaskParams& theta, const Domain& domain,
                                                const torch::Tensor& indices = {}, std::int64_t chunk = 256) {
    torch::NoGradGuard no_grad;
    auto images = indices.defined() ? domain.images.index_select(0, indices) : domain.images;
    std::vector<torch::Tensor> parts;
    for (std::int64_t s = 0; s < images.size(0); s += chunk) {
        parts.push_back(forward_features(theta, images.slice(0, s, std::min(images.size(0), s + chunk)), Mode::eval));
    }
    return torch::cat(parts, 0);
}

/// W2 between embedded subsamples of at most `subsample` rows per domain, drawn with `seed`.
[[nodiscard]] inline double domain_distance(const TaskParams& theta, const Domain& a, const Domain& b,
                                            std::int64_t subsample, std::uint64_t seed) {
    if (a.empty() || b.empty()) throw DataError("domain_distance: empty domain");
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto pick = [&](const Domain& d) {
        return torch::randperm(d.size(), gen, torch::kInt64).slice(0, 0, std::min(subsample, d.size()));
    };
    auto ia = pick(a);
    auto ib = pick(b);
    return empirical_wasserstein(embed_domain(theta, a, ia), embed_domain(theta, b, ib));
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

struct EmbeddingRow {
    std::string domain_id;
    std::int64_t sample_id{0};
    std::int64_t label{0};
    std::vector<double> z;

    bool operator==(const EmbeddingRow&) const = default;
};

/// Writes `domain_id,sample_id,label,z0..z{d-1}` with a header row and round-trip precision.
inline void export_embeddings(const TaskParams& theta, std::span<const Domain> domains,
                              const std::filesystem::path& path) {
    if (domains.empty()) throw DataError("export_embeddings: no domains");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    const auto dim = theta.embedding_dim();
    out << "domain_id,sample_id,label";
    for (std::int64_t k = 0; k < dim; ++k) out << ",z" << k;
    out << "\n";
    for (const auto& d : domains) {
        if (d.id.find(',') != std::string::npos) throw DataError("export_embeddings: domain id contains ','");
        auto z = embed_domain(theta, d).to(torch::kFloat64).contiguous();
        const auto* pz = z.data_ptr<double>();
        const auto* pl = d.labels.contiguous().data_ptr<std::int64_t>();
        for (std::int64_t i = 0; i < d.size(); ++i) {
            out << d.id << "," << i << "," << pl[i];
            for (std::int64_t k = 0; k < dim; ++k) out << "," << detail::format_real(pz[i * dim + k]);
            out << "\n";
        }
    }
    if (!out) throw DataError("write failed for " + path.string());
}

[[nodiscard]] inline std::vector<EmbeddingRow> read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("domain_id,sample_id,label", 0) != 0) {
        throw DataError(path.string() + ": missing embedding header");
    }
    const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') + 1);
    std::vector<EmbeddingRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != columns) throw DataError(path.string() + ": ragged row '" + line + "'");
        EmbeddingRow r;
        try {
            r.domain_id = cells[0];
            r.sample_id = detail::parse_int("sample_id", cells[1]);
            r.label = detail::parse_int("label", cells[2]);
            for (std::size_t k = 3; k < cells.size(); ++k) r.z.push_back(detail::parse_real("z", cells[k]));
        } catch (const ConfigError& e) {
            throw DataError(path.string() + ": " + e.what());
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Results records
// ---------------------------------------------------------------------------

/// One line of an append-only results file.
struct ResultRecord {
    std::string method;  // e.g. "mada", "erm"
    std::int64_t seed{0};
    std::string domain;  // corruption domains are named "<kind>@<severity>"
    std::string metric;  // "accuracy", "error", "mce", "rmce", "w2", ...
    double value{0.0};

    bool operator==(const ResultRecord&) const = default;
};

inline void append_results(const std::filesystem::path& path, std::span<const ResultRecord> records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& r : records) {
        nlohmann::json j{{"method", r.method}, {"seed", r.seed}, {"domain", r.domain}, {"metric", r.metric},
                         {"value", r.value}};
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("write failed for " + path.string());
}

[[nodiscard]] inline std::vector<ResultRecord> read_results(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path.string());
    std::vector<ResultRecord> out;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("method").get<std::string>(), j.at("seed").get<std::int64_t>(),
                           j.at("domain").get<std::string>(), j.at("metric").get<std::string>(),
                           j.at("value").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed results record");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Few-shot adaptation
// ---------------------------------------------------------------------------

/// The first `per_class` samples of each class, in a seeded random order of `domain`.
[[nodiscard]] inline Domain sample_shots(const Domain& domain, std::int64_t per_class, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto order = torch::randperm(domain.size(), gen, torch::kInt64);
    const auto* po = order.data_ptr<std::int64_t>();
    auto labels = domain.labels.contiguous();
    const auto* pl = labels.data_ptr<std::int64_t>();
    std::vector<std::int64_t> taken(static_cast<std::size_t>(domain.n_classes), 0);
    std::vector<std::int64_t> picked;
    for (std::int64_t i = 0; i < domain.size(); ++i) {
        const auto c = pl[po[i]];
        if (taken[c] < per_class) {
            ++taken[c];
            picked.push_back(po[i]);
        }
    }
    for (std::int64_t c = 0; c < domain.n_classes; ++c) {
        if (taken[c] < per_class) {
            throw DataError("sample_shots: class " + std::to_string(c) + " has only " + std::to_string(taken[c]) +
                            " samples in " + domain.id);
        }
    }
    std::sort(picked.begin(), picked.end());
    auto idx = torch::tensor(picked, torch::kInt64);
    Domain out;
    out.id = domain.id + "-shots" + std::to_string(per_class);
    out.kind = domain.kind;
    out.images = domain.images.index_select(0, idx).contiguous();
    out.labels = domain.labels.index_select(0, idx).contiguous();
    out.n_classes = domain.n_classes;
    return out;
}

/// Fine-tunes a copy of θ on the labelled shots: Adam at `fewshot_lr`, minibatches of
/// `fewshot_batch`, `fewshot_iters` iterations. θ itself is untouched.
[[nodiscard]] inline TaskParams fewshot_adapt(const TaskParams& theta, const Domain& shots, const HyperParams& h) {
    if (shots.empty()) throw DataError("fewshot_adapt: no target shots");
    auto present = torch::bincount(shots.labels, {}, shots.n_classes);
    for (std::int64_t c = 0; c < shots.n_classes; ++c) {
        if (present[c].item<std::int64_t>() == 0) {
            throw DataError("fewshot_adapt: class " + std::to_string(c) + " missing from target shots");
        }
    }
    auto adapted = theta.clone();
    if (h.fewshot_iters <= 0) return adapted;
    auto params = adapted.tensors();
    torch::optim::Adam opt(params, torch::optim::AdamOptions(h.fewshot_lr));
    BatchSampler sampler(shots.size(), h.fewshot_batch,
                         at::make_generator<at::CPUGeneratorImpl>(h.seed * 0x9E3779B97F4A7C15ULL + 6));
    for (std::int64_t it = 0; it < h.fewshot_iters; ++it) {
        opt.zero_grad();
        auto loss = task_loss(adapted, shots.batch(sampler.next()));
        if (!std::isfinite(loss.item<double>())) {
            throw NumericalError("fewshot_adapt: non-finite loss at iteration " + std::to_string(it));
        }
        loss.backward();
        opt.step();
    }
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    return adapted;
}

}  // namespace mada
