#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "mada/error.hpp"
#include "mada/eval.hpp"

namespace mada {

/// Mean and sample standard deviation of one (method, domain, metric) cell over seeds.
struct SummaryRow {
    std::string method;
    std::string domain;
    std::string metric;
    double mean{0.0};
    double stddev{0.0};  // 0 when n == 1
    std::int64_t n{0};
};

[[nodiscard]] inline std::vector<SummaryRow> summarize(std::span<const ResultRecord> records) {
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : records) groups[{r.method, r.domain, r.metric}].push_back(r.value);
    std::vector<SummaryRow> out;
    for (const auto& [key, values] : groups) {
        SummaryRow row{std::get<0>(key), std::get<1>(key), std::get<2>(key), 0.0, 0.0,
                       static_cast<std::int64_t>(values.size())};
        for (auto v : values) row.mean += v;
        row.mean /= static_cast<double>(values.size());
        if (values.size() > 1) {
            double ss = 0.0;
            for (auto v : values) ss += (v - row.mean) * (v - row.mean);
            row.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
        out.push_back(row);
    }
    return out;
}

/// Column-aligned text table: method, domain, metric, mean, std, seeds.
[[nodiscard]] inline std::string format_table(std::span<const SummaryRow> rows) {
    std::vector<std::array<std::string, 6>> cells;
    cells.push_back({"method", "domain", "metric", "mean", "std", "seeds"});
    for (const auto& r : rows) {
        std::ostringstream mean;
        mean << std::fixed << std::setprecision(4) << r.mean;
        std::ostringstream sd;
        if (r.n > 1) {
            sd << std::fixed << std::setprecision(4) << r.stddev;
        } else {
            sd << "-";
        }
        cells.push_back({r.method, r.domain, r.metric, mean.str(), sd.str(), std::to_string(r.n)});
    }
    std::array<std::size_t, 6> width{};
    for (const auto& row : cells) {
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t c = 0; c < cells[i].size(); ++c) {
            const bool numeric = c >= 3;
            const auto pad = std::string(width[c] - cells[i][c].size(), ' ');
            out << (c > 0 ? "  " : "") << (numeric ? pad + cells[i][c] : cells[i][c] + pad);
        }
        out << "\n";
        if (i == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w;
            out << std::string(total + 2 * (width.size() - 1), '-') << "\n";
        }
    }
    return out.str();
}

namespace detail {

/// Severity of a domain id ending in "@<1..5>", if any, with the kind before it.
inline std::optional<std::pair<std::string, int>> parse_severity_id(const std::string& domain) {
    const auto slash = domain.rfind('/');
    const auto tail = slash == std::string::npos ? domain : domain.substr(slash + 1);
    const auto at = tail.rfind('@');
    if (at == std::string::npos || at + 2 != tail.size()) return std::nullopt;
    const int level = tail.back() - '0';
    if (level < 1 || level > 5) return std::nullopt;
    return std::pair{tail.substr(0, at), level};
}

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

/// Line chart with fixed x ticks. The y range is taken from the data.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, const std::vector<double>& xticks) {
    const double w = 640, h = 400, left = 70, right = 160, top = 40, bottom = 60;
    double xmin = xticks.empty() ? 0.0 : xticks.front(), xmax = xticks.empty() ? 1.0 : xticks.back();
    double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            if (xticks.empty()) {
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
            }
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (!std::isfinite(ymin)) ymin = 0.0, ymax = 1.0;
    if (ymax - ymin < 1e-12) ymin -= 0.5, ymax += 0.5;
    if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
    auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (w - left - right); };
    auto py = [&](double y) { return h - bottom - (y - ymin) / (ymax - ymin) * (h - top - bottom); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
    std::ostringstream o;
    o << std::setprecision(6);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
    o << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
    for (auto t : xticks) {
        o << "<g class=\"xtick\"><line x1=\"" << px(t) << "\" y1=\"" << h - bottom << "\" x2=\"" << px(t) << "\" y2=\"" << h - bottom + 5
          << "\" stroke=\"black\"/><text x=\"" << px(t) << "\" y=\"" << h - bottom + 18 << "\" text-anchor=\"middle\">" << t << "</text></g>\n";
    }
    for (int i = 0; i <= 4; ++i) {
        const double v = ymin + (ymax - ymin) * i / 4.0;
        o << "<g class=\"ytick\"><line x1=\"" << left - 5 << "\" y1=\"" << py(v) << "\" x2=\"" << left << "\" y2=\"" << py(v)
          << "\" stroke=\"black\"/><text x=\"" << left - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v << "</text></g>\n";
    }
    o << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\">" << svg_escape(xlabel) << "</text>\n";
    o << "<text x=\"18\" y=\"" << (top + h - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << (top + h - bottom) / 2 << ")\">" << svg_escape(ylabel) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto* color = colors[i % 7];
        o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : series[i].points) o << px(x) << "," << py(y) << " ";
        o << "\"/>\n";
        const double ly = top + 16.0 * static_cast<double>(i);
        o << "<text x=\"" << w - right + 10 << "\" y=\"" << ly + 4 << "\" fill=\"" << color << "\">" << svg_escape(series[i].name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace detail

/// Metric vs. corruption severity: one line per method, averaged over kinds and seeds.
[[nodiscard]] inline std::string severity_svg(std::span<const ResultRecord> records, const std::string& metric = "accuracy") {
    std::map<std::string, std::array<std::pair<double, int>, 5>> acc;
    for (const auto& r : records) {
        if (r.metric != metric) continue;
        auto sev = detail::parse_severity_id(r.domain);
        if (!sev) continue;
        auto& slot = acc[r.method][static_cast<std::size_t>(sev->second - 1)];
        slot.first += r.value;
        slot.second += 1;
    }
    std::vector<detail::Series> series;
    for (const auto& [method, levels] : acc) {
        detail::Series s{method, {}};
        for (int l = 0; l < 5; ++l) {
            if (levels[l].second > 0) s.points.emplace_back(l + 1, levels[l].first / levels[l].second);
        }
        series.push_back(std::move(s));
    }
    return detail::line_chart(metric + " vs. corruption severity", "severity", metric, series, {1, 2, 3, 4, 5});
}

/// Source loss per iteration from one or more JSON-lines metrics logs, averaged in windows.
[[nodiscard]] inline std::string loss_curve_svg(const std::vector<std::filesystem::path>& logs, std::int64_t window = 50) {
    std::vector<detail::Series> series;
    for (const auto& path : logs) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot read " + path.string());
        detail::Series s{path.parent_path().filename().string().empty() ? path.filename().string()
                                                                          : path.parent_path().filename().string(),
                         {}};
        std::string line;
        double sum = 0.0;
        std::int64_t count = 0;
        std::int64_t last = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            try {
                auto j = nlohmann::json::parse(line);
                sum += j.at("source_loss").get<double>();
                last = j.at("iteration").get<std::int64_t>();
            } catch (const nlohmann::json::exception&) {
                throw DataError(path.string() + ": malformed metrics record");
            }
            if (++count == window) {
                s.points.emplace_back(static_cast<double>(last), sum / static_cast<double>(count));
                sum = 0.0;
                count = 0;
            }
        }
        if (count > 0) s.points.emplace_back(static_cast<double>(last), sum / static_cast<double>(count));
        series.push_back(std::move(s));
    }
    return detail::line_chart("source loss", "iteration", "cross-entropy", series, {});
}

}  // namespace mada
