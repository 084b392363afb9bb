// mada: command-line driver for WAE pre-training, M-ADA training, evaluation,
// few-shot adaptation, embedding export, corruption generation and reporting.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mada/mada.hpp"

#ifndef MADA_GIT_DESCRIBE
#define MADA_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace mada;

namespace {

/// Options shared by every verb.
struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out{"runs/latest"};
};

struct DataOpts {
    std::string source{"mnist"};
    std::int64_t limit{10000};
    std::string data_root{MADA_DATA_DIR};
};

std::string keys_footer() {
    std::ostringstream os;
    os << "Config keys (--set key=value):\n";
    std::size_t width = 0;
    for (const auto& f : hyperparam_fields()) width = std::max(width, f.key.size() + (f.symbol.empty() ? 0 : f.symbol.size() + 3));
    for (const auto& f : hyperparam_fields()) {
        std::string label(f.key);
        if (!f.symbol.empty()) label += " (" + std::string(f.symbol) + ")";
        // Symbols are multi-byte UTF-8; pad by code points.
        std::size_t cps = 0;
        for (unsigned char c : label) cps += (c & 0xC0) != 0x80;
        os << "  " << label << std::string(width + 2 > cps ? width + 2 - cps : 1, ' ') << f.help << "\n";
    }
    return os.str();
}

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "config file (key = value lines)");
    app->add_option("--set", c.overrides, "override one config key: key=value (repeatable)");
    app->add_option("--out", c.out, "output directory");
    app->footer(keys_footer());
}

void add_data(CLI::App* app, DataOpts& d) {
    app->add_option("--source", d.source, "source dataset (mnist)");
    app->add_option("--limit", d.limit, "use the first N source samples");
    app->add_option("--data-root", d.data_root, "directory holding mnist/ and tables/");
}

HyperParams resolve(const Common& c) {
    HyperParams h;
    if (!c.config.empty()) {
        if (!fs::exists(c.config)) throw ConfigError("config", "file not found: " + c.config);
        h = load_config(c.config);
    }
    for (const auto& o : c.overrides) apply_override(h, o);
    return h;
}

Domain load_train(const DataOpts& d) {
    SourceOptions so;
    so.root = d.data_root;
    return load_source(d.source, d.limit, so);
}

Domain load_test(const DataOpts& d) {
    SourceOptions so;
    so.root = d.data_root;
    const std::string test = d.source == "mnist" ? "mnist-test" : d.source;
    // Whole test split.
    auto probe = read_idx_labels(fs::path(d.data_root) / "mnist" / "t10k-labels-idx1-ubyte.gz");
    return load_source(test, probe.size(0), so);
}

/// Writes `<out>/manifest.cfg` at the start of a run and refreshes it with the finish time.
class RunManifest {
public:
    RunManifest(std::string verb, const Common& c, const HyperParams& h, std::map<std::string, std::string> extra)
        : path_(fs::path(c.out) / "manifest.cfg"), h_(h), info_(std::move(extra)) {
        info_["verb"] = std::move(verb);
        info_["git"] = MADA_GIT_DESCRIBE;
        info_["seed"] = std::to_string(h.seed);
        info_["started"] = utc_timestamp();
        info_["status"] = "running";
        write_manifest(path_, h_, info_);
    }

    void finish(const std::map<std::string, std::string>& more = {}) {
        for (const auto& [k, v] : more) info_[k] = v;
        info_["finished"] = utc_timestamp();
        info_["status"] = "ok";
        write_manifest(path_, h_, info_);
    }

private:
    fs::path path_;
    HyperParams h_;
    std::map<std::string, std::string> info_;
};

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

/// Resolves the evaluation domains named on the command line against the test split.
std::vector<Domain> resolve_domains(const std::vector<std::string>& domain_dirs, const std::vector<std::string>& shifts,
                                    const std::vector<std::string>& corruptions, bool include_clean, const DataOpts& d,
                                    std::uint64_t seed) {
    std::vector<Domain> out;
    for (const auto& p : domain_dirs) out.push_back(load_domain(p));
    if (shifts.empty() && corruptions.empty() && !include_clean) return out;
    auto test = load_test(d);
    if (include_clean) out.push_back(test);
    for (const auto& s : shifts) out.push_back(synth_shift(test, parse_shift(s), seed));
    if (!corruptions.empty()) {
        const auto tables = load_corruption_tables(fs::path(d.data_root) / "tables" / "corruptions.cfg");
        for (const auto& c : corruptions) {
            std::vector<std::string> kinds;
            std::vector<int> levels;
            const auto at = c.find('@');
            const auto kind = c.substr(0, at);
            if (kind == "all") {
                kinds = corruption_kinds();
            } else {
                kinds = {kind};
            }
            if (at == std::string::npos) {
                levels = {1, 2, 3, 4, 5};
            } else {
                levels = {static_cast<int>(mada::detail::parse_int("severity", c.substr(at + 1)))};
            }
            for (const auto& k : kinds) {
                for (int l : levels) out.push_back(corrupt(test, make_corruption_spec(k, l, tables), seed, tables));
            }
        }
    }
    return out;
}

int run_pretrain_wae(const Common& c, const DataOpts& d) {
    auto h = resolve(c);
    auto source = load_train(d);
    h = validate_config(h, source.signature());
    RunManifest manifest("pretrain-wae", c, h, {{"source", d.source}, {"limit", std::to_string(d.limit)}});
    auto rng = RngStreams::from_seed(h.seed);
    WaeTrainLog log;
    auto psi = pretrain_wae(init_wae_params(h, source.signature(), rng.wae), source, h, rng.wae, &log);
    save_checkpoint(fs::path(c.out) / "wae", nullptr, &psi, CheckpointInfo{0, h});
    std::cout << "heldout_recon_before " << fmt(log.heldout_before) << "\n";
    std::cout << "heldout_recon_after  " << fmt(log.heldout_after) << "\n";
    manifest.finish({{"heldout_recon_before", fmt(log.heldout_before)}, {"heldout_recon_after", fmt(log.heldout_after)}});
    return 0;
}

int run_train(const Common& c, const DataOpts& d, const std::string& wae_dir, bool save_aug) {
    auto h = resolve(c);
    auto source = load_train(d);
    h = validate_config(h, source.signature());
    RunManifest manifest("train", c, h, {{"source", d.source}, {"limit", std::to_string(d.limit)}, {"wae", wae_dir}});
    RunOptions opts;
    if (!wae_dir.empty()) opts.wae = load_wae_params(wae_dir);
    opts.checkpoint_dir = fs::path(c.out) / "checkpoint";
    opts.metrics_log = fs::path(c.out) / "metrics.jsonl";
    fs::remove(opts.metrics_log);
    opts.on_round = [](const MetaRoundReport& r) {
        std::cout << "round " << r.round << " meta_train_loss " << fmt(r.meta_train_loss) << " grad_norm "
                  << fmt(r.combined_grad_norm) << " wall " << fmt(r.wall_time) << "s\n";
    };
    auto st = run_mada(source, h, opts);
    if (save_aug) {
        for (const auto& a : st.augmented) save_domain(a, fs::path(c.out) / "domains" / a.id);
    }
    const auto final_loss = st.history.empty() ? 0.0 : st.history.back().source_loss;
    std::cout << "iterations " << st.iteration << " final_source_loss " << fmt(final_loss) << "\n";
    manifest.finish({{"iterations_done", std::to_string(st.iteration)}, {"final_source_loss", fmt(final_loss)}});
    return 0;
}

int run_evaluate(const Common& c, const DataOpts& d, const std::string& ckpt, const std::string& baseline,
                 const std::vector<std::string>& domain_dirs, const std::vector<std::string>& shifts,
                 const std::vector<std::string>& corruptions, std::string method, const std::string& results) {
    auto h = resolve(c);
    auto theta = load_task_params(ckpt);
    if (method.empty()) method = fs::path(ckpt).parent_path().filename().string();
    RunManifest manifest("evaluate", c, h, {{"checkpoint", ckpt}, {"baseline", baseline}, {"method", method}});
    const bool need_clean = !corruptions.empty();
    auto domains = resolve_domains(domain_dirs, shifts, corruptions, need_clean, d, h.seed);
    if (domains.empty()) throw ConfigError("domains", "nothing to evaluate; pass --domain, --shift or --corruption");
    std::vector<ResultRecord> records;
    std::map<std::string, Domain> corrupted;
    const Domain* clean = nullptr;
    for (const auto& dom : domains) {
        const auto acc = accuracy(theta, dom, h.eval_batch);
        records.push_back({method, static_cast<std::int64_t>(h.seed), dom.id, "accuracy", acc});
        if (mada::detail::parse_severity_id(dom.id)) corrupted[dom.id] = dom;
        if (need_clean && clean == nullptr && dom.kind.tag == DomainKind::Tag::source) clean = &dom;
    }
    if (!baseline.empty() && clean != nullptr && !corrupted.empty()) {
        auto base = load_task_params(baseline);
        const auto ef = error_table(theta, *clean, corrupted);
        const auto eb = error_table(base, *clean, corrupted);
        records.push_back({method, static_cast<std::int64_t>(h.seed), "corruptions", "mce", mce(ef, eb)});
        records.push_back({method, static_cast<std::int64_t>(h.seed), "corruptions", "rmce", rmce(ef, eb)});
    }
    const auto path = results.empty() ? fs::path(c.out) / "results.jsonl" : fs::path(results);
    append_results(path, records);
    auto rows = summarize(records);
    std::cout << format_table(rows);
    manifest.finish({{"results", path.string()}});
    return 0;
}

int run_adapt(const Common& c, const DataOpts& d, const std::string& ckpt, const std::string& target_dir,
              const std::string& shift, std::int64_t shots) {
    auto h = resolve(c);
    auto theta = load_task_params(ckpt);
    RunManifest manifest("adapt", c, h, {{"checkpoint", ckpt}, {"shots", std::to_string(shots)}});
    Domain target;
    if (!target_dir.empty()) {
        target = load_domain(target_dir);
    } else if (!shift.empty()) {
        target = synth_shift(load_test(d), parse_shift(shift), h.seed);
    } else {
        throw ConfigError("target", "pass --target DIR or --shift KIND");
    }
    auto support = sample_shots(target, shots, h.seed);
    auto adapted = fewshot_adapt(theta, support, h);
    const auto before = accuracy(theta, target, h.eval_batch);
    const auto after = accuracy(adapted, target, h.eval_batch);
    save_checkpoint(fs::path(c.out) / "checkpoint", &adapted, nullptr, CheckpointInfo{h.fewshot_iters, h});
    std::cout << "zero_shot_accuracy " << fmt(before) << "\nadapted_accuracy   " << fmt(after) << "\n";
    manifest.finish({{"zero_shot_accuracy", fmt(before)}, {"adapted_accuracy", fmt(after)}});
    return 0;
}

int run_export(const Common& c, const DataOpts& d, const std::string& ckpt, const std::vector<std::string>& domain_dirs,
               const std::vector<std::string>& shifts, bool include_source) {
    auto h = resolve(c);
    auto theta = load_task_params(ckpt);
    RunManifest manifest("export-embeddings", c, h, {{"checkpoint", ckpt}});
    auto domains = resolve_domains(domain_dirs, shifts, {}, false, d, h.seed);
    if (include_source) domains.insert(domains.begin(), load_train(d));
    const auto path = fs::path(c.out) / "embeddings.csv";
    export_embeddings(theta, domains, path);
    std::cout << "wrote " << path.string() << "\n";
    manifest.finish({{"embeddings", path.string()}});
    return 0;
}

int run_corrupt(const Common& c, const DataOpts& d, const std::string& domain_dir, const std::string& kind, int severity,
                const std::string& shift, bool from_train) {
    auto h = resolve(c);
    RunManifest manifest("corrupt", c, h, {{"kind", kind}, {"severity", std::to_string(severity)}, {"shift", shift}});
    Domain base = !domain_dir.empty() ? load_domain(domain_dir) : (from_train ? load_train(d) : load_test(d));
    Domain out;
    if (!shift.empty()) {
        out = synth_shift(base, parse_shift(shift), h.seed);
    } else if (!kind.empty()) {
        const auto tables = load_corruption_tables(fs::path(d.data_root) / "tables" / "corruptions.cfg");
        out = corrupt(base, make_corruption_spec(kind, severity, tables), h.seed, tables);
    } else {
        throw ConfigError("kind", "pass --kind KIND --severity N or --shift KIND");
    }
    const auto dir = fs::path(c.out) / "domain";
    save_domain(out, dir);
    std::cout << "wrote " << out.id << " (" << out.size() << " samples) to " << dir.string() << "\n";
    manifest.finish({{"domain", dir.string()}});
    return 0;
}

int run_report(const Common& c, const std::vector<std::string>& results, const std::vector<std::string>& metrics) {
    auto h = resolve(c);
    RunManifest manifest("report", c, h, {});
    if (results.empty() && metrics.empty()) throw ConfigError("results", "pass at least one --results file");
    std::vector<ResultRecord> all;
    for (const auto& r : results) {
        auto part = read_results(r);
        all.insert(all.end(), part.begin(), part.end());
    }
    const fs::path out(c.out);
    if (!all.empty()) {
        const auto table = format_table(summarize(all));
        std::cout << table;
        std::ofstream(out / "table.txt") << table;
        std::ofstream(out / "severity.svg") << severity_svg(all);
    }
    if (!metrics.empty()) {
        std::vector<fs::path> logs(metrics.begin(), metrics.end());
        std::ofstream(out / "loss_curves.svg") << loss_curve_svg(logs);
    }
    manifest.finish();
    return 0;
}

std::string one_line(std::string s) {
    for (auto& ch : s) {
        if (ch == '\n' || ch == '\r') ch = ' ';
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"M-ADA: single-domain generalization with meta-learned adversarial augmentation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(MADA_VERSION) + " (" + MADA_GIT_DESCRIBE + ")");

    Common common;
    DataOpts data;

    auto* pre = app.add_subcommand("pretrain-wae", "train the auto-encoder V on the source domain");
    add_common(pre, common);
    add_data(pre, data);

    std::string wae_dir;
    bool save_aug = false;
    auto* train = app.add_subcommand("train", "train the task model (k_domains=0 gives the ERM baseline)");
    add_common(train, common);
    add_data(train, data);
    train->add_option("--wae", wae_dir, "pre-trained WAE checkpoint directory (trained on the fly if omitted)");
    train->add_flag("--save-augmented", save_aug, "write every augmented domain under <out>/domains/");

    std::string ckpt, baseline, method, results_path;
    std::vector<std::string> domain_dirs, shifts, corruptions;
    auto* eval = app.add_subcommand("evaluate", "per-domain accuracy, plus mCE/RmCE against a baseline");
    add_common(eval, common);
    add_data(eval, data);
    eval->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
    eval->add_option("--baseline", baseline, "ERM checkpoint for mCE/RmCE");
    eval->add_option("--domains,--domain", domain_dirs, "saved domain directories");
    eval->add_option("--shift", shifts, "synthetic shift of the test split: invert, color_background, channel_swap, noise_overlay");
    eval->add_option("--corruption", corruptions, "corruption of the test split: KIND[@SEVERITY] or all[@SEVERITY]");
    eval->add_option("--method", method, "method label stored with each record");
    eval->add_option("--results", results_path, "append records here (default <out>/results.jsonl)");

    std::string target_dir, adapt_shift;
    std::int64_t shots = 10;
    auto* adapt = app.add_subcommand("adapt", "few-shot fine-tuning on a target domain");
    add_common(adapt, common);
    add_data(adapt, data);
    adapt->add_option("--checkpoint", ckpt, "pre-trained checkpoint directory")->required();
    adapt->add_option("--target", target_dir, "saved target domain directory");
    adapt->add_option("--shift", adapt_shift, "synthetic shift of the test split to adapt to");
    adapt->add_option("--shots", shots, "labelled samples per class");

    bool include_source = false;
    auto* exp = app.add_subcommand("export-embeddings", "write F(x) for each domain as CSV");
    add_common(exp, common);
    add_data(exp, data);
    exp->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
    exp->add_option("--domains,--domain", domain_dirs, "saved domain directories");
    exp->add_option("--shift", shifts, "synthetic shifts of the test split");
    exp->add_flag("--with-source", include_source, "also export the source training samples");

    std::string kind, shift, in_domain;
    int severity = 1;
    bool from_train = false;
    auto* cor = app.add_subcommand("corrupt", "write a corrupted or shifted copy of a domain");
    add_common(cor, common);
    add_data(cor, data);
    cor->add_option("--domain", in_domain, "input domain directory (default: test split)");
    cor->add_flag("--train-split", from_train, "start from the first --limit training samples instead");
    cor->add_option("--kind", kind, "corruption kind");
    cor->add_option("--severity", severity, "severity 1..5");
    cor->add_option("--shift", shift, "synthetic shift instead of a corruption");

    std::vector<std::string> results, metrics;
    auto* rep = app.add_subcommand("report", "tables and SVG plots from results and metrics files");
    add_common(rep, common);
    rep->add_option("--results", results, "results JSON-lines files");
    rep->add_option("--metrics", metrics, "training metrics JSON-lines files for loss curves");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return 2;
    }

    try {
        if (*pre) return run_pretrain_wae(common, data);
        if (*train) return run_train(common, data, wae_dir, save_aug);
        if (*eval) return run_evaluate(common, data, ckpt, baseline, domain_dirs, shifts, corruptions, method, results_path);
        if (*adapt) return run_adapt(common, data, ckpt, target_dir, adapt_shift, shots);
        if (*exp) return run_export(common, data, ckpt, domain_dirs, shifts, include_source);
        if (*cor) return run_corrupt(common, data, in_domain, kind, severity, shift, from_train);
        if (*rep) return run_report(common, results, metrics);
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: data: " << one_line(e.what()) << "\n";
        return 3;
    } catch (const UndefinedMetricError& e) {
        std::cerr << "error: metric: " << one_line(e.what()) << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "error: numerical: " << one_line(e.what()) << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 2;
}
