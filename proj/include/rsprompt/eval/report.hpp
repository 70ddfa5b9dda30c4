#pragma once

// Results emission: line-delimited JSON, a flat CSV in the layout of the usual
// method x dataset accuracy table, SVG confusion heatmaps, shots-vs-accuracy curves,
// and transfer / winner heatmaps. Output bytes depend only on the inputs.

#include "rsprompt/data/registry.hpp"
#include "rsprompt/eval/metrics.hpp"
#include "rsprompt/eval/transfer.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace rsprompt {

inline std::string method_display_name(const std::string& m) {
    static const std::map<std::string, std::string> names{{"zeroshot", "Handcrafted prompt"}, {"probe", "linear probe CLIP"},
                                                          {"coop", "CLIP+CoOp"},            {"cocoop", "CLIP+CoCoOp"},
                                                          {"maple", "CLIP+MaPLe"},          {"promptsrc", "CLIP+PromptSRC"}};
    auto it = names.find(m);
    return it == names.end() ? m : it->second;
}

namespace detail {

inline int report_method_order(const std::string& m) {
    static const std::vector<std::string> order{"zeroshot", "probe", "coop", "cocoop", "maple", "promptsrc"};
    auto it = std::find(order.begin(), order.end(), m);
    return static_cast<int>(it - order.begin());
}

inline int dataset_order(const std::string& d) {
    const auto& r = dataset_registry();
    for (std::size_t i = 0; i < r.size(); ++i)
        if (r[i].name == d) return static_cast<int>(i);
    return static_cast<int>(r.size());
}

inline std::string dataset_label(const std::string& d) {
    for (const auto& x : dataset_registry())
        if (x.name == d) return x.display_name;
    return d;
}

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '&') o += "&amp;";
        else if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '"') o += "&quot;";
        else o += c;
    }
    return o;
}

inline std::string file_token(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
    return s;
}

/// White -> dark blue ramp for v in [0, 1].
inline std::string heat_colour(double v) {
    v = std::clamp(v, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(247 - v * (247 - 8)));
    const int g = static_cast<int>(std::lround(251 - v * (251 - 48)));
    const int b = static_cast<int>(std::lround(255 - v * (255 - 107)));
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

inline const char* method_colour(const std::string& m) {
    static const std::map<std::string, const char*> c{{"zeroshot", "#7f7f7f"}, {"probe", "#8c564b"}, {"coop", "#1f77b4"},
                                                      {"cocoop", "#ff7f0e"},   {"maple", "#2ca02c"}, {"promptsrc", "#d62728"}};
    auto it = c.find(m);
    return it == c.end() ? "#000000" : it->second;
}

/// Square heatmap; `cell(r, c)` returns the value in [0, 1] (nullopt = missing) and
/// `text(r, c)` the label drawn in the cell.
template <class Cell, class Text>
std::string heatmap_svg(const std::string& title, const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::string& row_axis, const std::string& col_axis, Cell cell, Text text) {
    const int cs = 36, left = 170, top = 60 + 0, label_h = 150;
    const int w = left + cs * static_cast<int>(cols.size()) + 20, h = top + label_h + cs * static_cast<int>(rows.size()) + 40;
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
                    "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"10\" y=\"20\" font-size=\"14\">" + xml_escape(title) + "</text>\n";
    s += "<text x=\"10\" y=\"40\">rows: " + xml_escape(row_axis) + ", columns: " + xml_escape(col_axis) + "</text>\n";
    const int y0 = top + label_h;
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const int x = left + cs * static_cast<int>(c) + cs / 2;
        s += "<text transform=\"translate(" + std::to_string(x) + "," + std::to_string(y0 - 4) + ") rotate(-60)\">" + xml_escape(cols[c]) + "</text>\n";
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int y = y0 + cs * static_cast<int>(r);
        s += "<text x=\"" + std::to_string(left - 4) + "\" y=\"" + std::to_string(y + cs / 2 + 3) + "\" text-anchor=\"end\">" + xml_escape(rows[r]) + "</text>\n";
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const int x = left + cs * static_cast<int>(c);
            std::optional<double> v = cell(r, c);
            s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" + std::to_string(cs) + "\" height=\"" +
                 std::to_string(cs) + "\" fill=\"" + (v ? heat_colour(*v) : std::string("#dddddd")) + "\" stroke=\"#ffffff\"/>\n";
            const bool dark = v && *v > 0.55;
            s += "<text x=\"" + std::to_string(x + cs / 2) + "\" y=\"" + std::to_string(y + cs / 2 + 3) + "\" text-anchor=\"middle\" fill=\"" +
                 (dark ? "white" : "black") + "\" font-size=\"8\">" + xml_escape(text(r, c)) + "</text>\n";
        }
    }
    s += "</svg>\n";
    return s;
}

inline std::string curve_svg(const std::string& dataset, const std::vector<const EvalReport*>& reports) {
    const int w = 520, h = 360, l = 60, r = 150, t = 40, b = 50;
    const std::vector<int> shots{1, 2, 4, 8, 16};
    auto xpos = [&](int k) {
        int i = static_cast<int>(std::find(shots.begin(), shots.end(), k) - shots.begin());
        return l + (w - l - r) * i / 4.0;
    };
    double lo = 1, hi = 0;
    for (const auto* rep : reports) {
        lo = std::min(lo, rep->mean_accuracy);
        hi = std::max(hi, rep->mean_accuracy);
    }
    lo = std::max(0.0, std::floor(lo * 10 - 0.5) / 10);
    hi = std::min(1.0, std::ceil(hi * 10 + 0.5) / 10);
    if (hi <= lo) hi = lo + 0.1;
    auto ypos = [&](double a) { return t + (h - t - b) * (1 - (a - lo) / (hi - lo)); };
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
                    "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + std::to_string(l) + "\" y=\"22\" font-size=\"14\">" + xml_escape(dataset_label(dataset)) + ": accuracy vs shots</text>\n";
    s += "<line x1=\"" + std::to_string(l) + "\" y1=\"" + std::to_string(h - b) + "\" x2=\"" + std::to_string(w - r) + "\" y2=\"" + std::to_string(h - b) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + std::to_string(l) + "\" y1=\"" + std::to_string(t) + "\" x2=\"" + std::to_string(l) + "\" y2=\"" + std::to_string(h - b) + "\" stroke=\"black\"/>\n";
    for (int k : shots)
        s += "<text x=\"" + fmt("%.1f", xpos(k)) + "\" y=\"" + std::to_string(h - b + 16) + "\" text-anchor=\"middle\">" + std::to_string(k) + "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double a = lo + (hi - lo) * i / 4.0;
        s += "<text x=\"" + std::to_string(l - 6) + "\" y=\"" + fmt("%.1f", ypos(a) + 4) + "\" text-anchor=\"end\">" + fmt("%.1f", 100 * a) + "</text>\n";
    }
    s += "<text x=\"" + std::to_string((l + w - r) / 2) + "\" y=\"" + std::to_string(h - 12) + "\" text-anchor=\"middle\">shots per class</text>\n";
    std::map<std::string, std::vector<std::pair<int, double>>> series;
    for (const auto* rep : reports) series[rep->method].emplace_back(rep->shots, rep->mean_accuracy);
    std::vector<std::string> methods;
    for (auto& [m, pts] : series) methods.push_back(m);
    std::sort(methods.begin(), methods.end(), [](const auto& a, const auto& b) { return report_method_order(a) < report_method_order(b); });
    int legend = 0;
    for (const auto& m : methods) {
        auto pts = series[m];
        std::sort(pts.begin(), pts.end());
        const char* col = method_colour(m);
        if (m == "zeroshot") {
            const double y = ypos(pts.front().second);
            s += "<line x1=\"" + std::to_string(l) + "\" y1=\"" + fmt("%.1f", y) + "\" x2=\"" + std::to_string(w - r) + "\" y2=\"" + fmt("%.1f", y) +
                 "\" stroke=\"" + col + "\" stroke-dasharray=\"4 3\"/>\n";
        } else {
            std::string poly;
            for (auto [k, a] : pts) poly += fmt("%.1f", xpos(k)) + "," + fmt("%.1f", ypos(a)) + " ";
            s += "<polyline fill=\"none\" stroke=\"" + std::string(col) + "\" stroke-width=\"2\" points=\"" + poly + "\"/>\n";
            for (auto [k, a] : pts)
                s += "<circle cx=\"" + fmt("%.1f", xpos(k)) + "\" cy=\"" + fmt("%.1f", ypos(a)) + "\" r=\"3\" fill=\"" + col + "\"/>\n";
        }
        const int ly = t + 14 * legend++;
        s += "<rect x=\"" + std::to_string(w - r + 10) + "\" y=\"" + std::to_string(ly) + "\" width=\"10\" height=\"10\" fill=\"" + col + "\"/>\n";
        s += "<text x=\"" + std::to_string(w - r + 24) + "\" y=\"" + std::to_string(ly + 9) + "\">" + xml_escape(method_display_name(m)) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("write failed for " + p.string());
}

}  // namespace detail

struct TransferReport {
    std::vector<TransferMatrix> grids;
    std::optional<WinnerMatrix> winners;
};

/// Table rows in display order: (method, shots) pairs, datasets as columns.
inline std::string results_csv(const std::vector<EvalReport>& reports) {
    std::vector<std::string> datasets;
    std::vector<std::pair<std::string, int>> rows;
    std::map<std::pair<std::pair<std::string, int>, std::string>, double> value;
    for (const auto& r : reports) {
        if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
        std::pair<std::string, int> row{r.method, r.method == "zeroshot" ? 0 : r.shots};
        if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
        value[{row, r.dataset}] = r.mean_accuracy;
    }
    std::sort(datasets.begin(), datasets.end(), [](const auto& a, const auto& b) {
        return detail::dataset_order(a) != detail::dataset_order(b) ? detail::dataset_order(a) < detail::dataset_order(b) : a < b;
    });
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        int oa = detail::report_method_order(a.first), ob = detail::report_method_order(b.first);
        return oa != ob ? oa < ob : (a.first != b.first ? a.first < b.first : a.second < b.second);
    });
    std::string s = "Method";
    for (const auto& d : datasets) s += "," + detail::dataset_label(d);
    s += "\n";
    for (const auto& row : rows) {
        std::string label = method_display_name(row.first);
        if (row.first != "zeroshot") label += ", shots=" + std::to_string(row.second);
        s += "\"" + label + "\"";
        for (const auto& d : datasets) {
            auto it = value.find({row, d});
            s += "," + (it == value.end() ? std::string("NA") : detail::fmt("%.2f", 100 * it->second));
        }
        s += "\n";
    }
    return s;
}

/// Writes the report set under `out` and returns the written paths (relative, sorted).
inline std::vector<std::string> emit_report(std::vector<EvalReport> reports, const TransferReport& transfer, const std::filesystem::path& out) {
    namespace fs = std::filesystem;
    if (reports.empty() && transfer.grids.empty()) throw ContractError("emit_report: nothing to report");
    std::set<std::string> keys;
    for (const auto& r : reports)
        if (!keys.insert(r.key()).second) throw ContractError("emit_report: duplicate report " + r.key());
    std::sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
        auto ka = std::make_tuple(detail::dataset_order(a.dataset), a.dataset, detail::report_method_order(a.method), a.method, a.shots);
        auto kb = std::make_tuple(detail::dataset_order(b.dataset), b.dataset, detail::report_method_order(b.method), b.method, b.shots);
        return ka < kb;
    });
    std::error_code ec;
    fs::create_directories(out / "figures", ec);
    if (ec || !fs::is_directory(out / "figures")) throw IoError("cannot create report directory " + out.string());

    std::map<std::string, std::string> files;
    nlohmann::json summary = {{"format", "rsprompt-report/1"}, {"reports", nlohmann::json::array()}};
    if (!reports.empty()) {
        std::string jsonl;
        for (const auto& r : reports) {
            jsonl += r.to_json().dump() + "\n";
            summary["reports"].push_back({{"key", r.key()}, {"seeds", r.seeds}, {"mean_accuracy", r.mean_accuracy}, {"provenance", r.provenance}});
        }
        files["results.jsonl"] = jsonl;
        files["results.csv"] = results_csv(reports);
        std::map<std::string, std::vector<const EvalReport*>> by_dataset;
        for (const auto& r : reports) {
            by_dataset[r.dataset].push_back(&r);
            auto norm = r.confusion.normalized();
            const int n = r.confusion.size();
            files["figures/confusion_" + detail::file_token(r.dataset + "_" + r.method + "_" + std::to_string(r.shots)) + ".svg"] =
                detail::heatmap_svg(detail::dataset_label(r.dataset) + " / " + method_display_name(r.method) + " / " + std::to_string(r.shots) +
                                        " shots: normalized confusion",
                                    r.confusion.classes, r.confusion.classes, "true class", "predicted class",
                                    [&](std::size_t a, std::size_t b) -> std::optional<double> {
                                        if (r.confusion.row_total(static_cast<int>(a)) == 0) return std::nullopt;
                                        return norm(static_cast<Index>(a), static_cast<Index>(b));
                                    },
                                    [&](std::size_t a, std::size_t b) {
                                        return n <= 25 ? detail::fmt("%.2f", norm(static_cast<Index>(a), static_cast<Index>(b))) : std::string();
                                    });
        }
        for (const auto& [d, reps] : by_dataset) files["figures/curve_" + detail::file_token(d) + ".svg"] = detail::curve_svg(d, reps);
    }
    if (!transfer.grids.empty()) {
        nlohmann::json tj = {{"grids", nlohmann::json::array()}};
        for (const auto& g : transfer.grids) {
            tj["grids"].push_back(g.to_json());
            std::vector<std::string> rl, cl;
            for (const auto& s : g.sources) rl.push_back(detail::dataset_label(s));
            for (const auto& t : g.targets) cl.push_back(detail::dataset_label(t));
            files["figures/transfer_" + detail::file_token(g.method) + ".svg"] = detail::heatmap_svg(
                method_display_name(g.method) + ": cross-dataset accuracy", rl, cl, "source", "target",
                [&](std::size_t a, std::size_t b) { return g.cells[a][b]; },
                [&](std::size_t a, std::size_t b) { return g.cells[a][b] ? detail::fmt("%.1f", 100 * *g.cells[a][b]) : std::string("NA"); });
        }
        if (transfer.winners) {
            const auto& w = *transfer.winners;
            tj["winners"] = w.to_json();
            std::vector<std::string> rl, cl;
            for (const auto& s : w.sources) rl.push_back(detail::dataset_label(s));
            for (const auto& t : w.targets) cl.push_back(detail::dataset_label(t));
            files["figures/winner.svg"] = detail::heatmap_svg(
                "maximum accuracy across methods (winner initial, * = tie)", rl, cl, "source", "target",
                [&](std::size_t a, std::size_t b) { return w.cells[a][b].accuracy; },
                [&](std::size_t a, std::size_t b) {
                    const auto& c = w.cells[a][b];
                    if (!c.method) return std::string("NA");
                    return detail::fmt("%.1f", 100 * *c.accuracy) + " " + c.method->substr(0, 2) + (c.tie ? "*" : "");
                });
        }
        files["transfer.json"] = tj.dump(2) + "\n";
    }
    for (const auto& [name, text] : files) summary["files"].push_back(name);
    files["summary.json"] = summary.dump(2) + "\n";
    std::vector<std::string> written;
    for (const auto& [name, text] : files) {
        detail::write_file(out / name, text);
        written.push_back(name);
    }
    return written;
}

}  // namespace rsprompt
