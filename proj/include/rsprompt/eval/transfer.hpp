#pragma once

#include "rsprompt/eval/metrics.hpp"
#include "rsprompt/methods/prompt_state.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace rsprompt {

/// Source x target accuracy grid for one method. Missing cells are nullopt, never 0.
struct TransferMatrix {
    std::string method;
    std::vector<std::string> sources;
    std::vector<std::string> targets;
    std::vector<std::vector<std::optional<double>>> cells;  // [source][target]

    static TransferMatrix empty(std::string method, std::vector<std::string> sources, std::vector<std::string> targets) {
        TransferMatrix m{std::move(method), std::move(sources), std::move(targets), {}};
        m.cells.assign(m.sources.size(), std::vector<std::optional<double>>(m.targets.size()));
        return m;
    }

    std::size_t index_of(const std::vector<std::string>& v, const std::string& name, const char* what) const {
        auto it = std::find(v.begin(), v.end(), name);
        if (it == v.end()) throw ContractError(std::string("transfer matrix: unknown ") + what + " '" + name + "'");
        return static_cast<std::size_t>(it - v.begin());
    }

    std::optional<double>& at(const std::string& source, const std::string& target) {
        return cells[index_of(sources, source, "source")][index_of(targets, target, "target")];
    }

    std::size_t missing() const {
        std::size_t n = 0;
        for (const auto& r : cells)
            for (const auto& c : r) n += !c;
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json g = nlohmann::json::array();
        for (const auto& r : cells) {
            nlohmann::json row = nlohmann::json::array();
            for (const auto& c : r) row.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
            g.push_back(row);
        }
        return {{"method", method}, {"sources", sources}, {"targets", targets}, {"accuracy", g}};
    }
};

struct WinnerCell {
    std::optional<std::string> method;  // nullopt when every method is missing
    std::optional<double> accuracy;
    bool tie = false;
    bool incomplete = false;  // some method had no value for this cell
};

struct WinnerMatrix {
    std::vector<std::string> sources;
    std::vector<std::string> targets;
    std::vector<std::vector<WinnerCell>> cells;

    nlohmann::json to_json() const {
        nlohmann::json g = nlohmann::json::array();
        for (const auto& r : cells) {
            nlohmann::json row = nlohmann::json::array();
            for (const auto& c : r)
                row.push_back({{"method", c.method ? nlohmann::json(*c.method) : nlohmann::json(nullptr)},
                               {"accuracy", c.accuracy ? nlohmann::json(*c.accuracy) : nlohmann::json(nullptr)},
                               {"tie", c.tie},
                               {"incomplete", c.incomplete}});
            g.push_back(row);
        }
        return {{"sources", sources}, {"targets", targets}, {"cells", g}};
    }
};

/// Rank of a method in the fixed tie-break order coop < cocoop < maple < promptsrc.
inline int method_rank(const std::string& m) {
    const auto& order = prompt_methods();
    for (std::size_t i = 0; i < order.size(); ++i)
        if (to_string(order[i]) == m) return static_cast<int>(i);
    return static_cast<int>(order.size());
}

/// Per-cell argmax over methods; exact ties go to the earlier method and are flagged.
/// A cell where some methods are missing still reports the best present value but is
/// marked incomplete; a cell where all are missing has no winner.
inline WinnerMatrix winner(std::vector<TransferMatrix> grids) {
    if (grids.empty()) throw ContractError("winner: no transfer matrices");
    std::stable_sort(grids.begin(), grids.end(), [](const auto& a, const auto& b) { return method_rank(a.method) < method_rank(b.method); });
    const auto& first = grids.front();
    for (const auto& g : grids)
        if (g.sources != first.sources || g.targets != first.targets) throw ContractError("winner: grids are not aligned (" + g.method + ")");
    WinnerMatrix w{first.sources, first.targets, {}};
    w.cells.assign(first.sources.size(), std::vector<WinnerCell>(first.targets.size()));
    for (std::size_t s = 0; s < first.sources.size(); ++s)
        for (std::size_t t = 0; t < first.targets.size(); ++t) {
            auto& cell = w.cells[s][t];
            for (const auto& g : grids) {
                const auto& v = g.cells[s][t];
                if (!v) {
                    cell.incomplete = true;
                    continue;
                }
                if (!cell.accuracy || *v > *cell.accuracy) {
                    cell.accuracy = *v;
                    cell.method = g.method;
                    cell.tie = false;
                } else if (*v == *cell.accuracy) {
                    cell.tie = true;
                }
            }
        }
    return w;
}

}  // namespace rsprompt
