#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "boottod/common.hpp"

namespace boottod {

struct F1Counts {
    long long tp = 0, fp = 0, fn = 0;
};

struct F1Result {
    double micro_f1 = 0.0;
    double macro_f1 = 0.0;
    bool degenerate = false;  // all counts zero
};

/// micro pools counts across labels; macro averages per-label F1. Empty
/// ratios (0/0) are defined as 0.
inline F1Result f1_metrics(const std::vector<F1Counts>& per_label) {
    for (const auto& c : per_label) {
        if (c.tp < 0 || c.fp < 0 || c.fn < 0) throw DataError("f1_metrics: negative counts");
    }
    // definitional form (precision, recall, harmonic mean); empty ratios are 0
    auto f1_of = [](long long tp, long long fp, long long fn) {
        const double p = (tp + fp) == 0 ? 0.0
                                        : static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double r = (tp + fn) == 0 ? 0.0
                                        : static_cast<double>(tp) / static_cast<double>(tp + fn);
        return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
    };
    F1Result out;
    long long tp = 0, fp = 0, fn = 0;
    double macro_sum = 0.0;
    for (const auto& c : per_label) {
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
        macro_sum += f1_of(c.tp, c.fp, c.fn);
    }
    out.micro_f1 = f1_of(tp, fp, fn);
    out.macro_f1 = per_label.empty() ? 0.0 : macro_sum / static_cast<double>(per_label.size());
    out.degenerate = (tp == 0 && fp == 0 && fn == 0);
    return out;
}

/// Rank of the truth among its pool under descending score, ties broken by
/// candidate index (lower index wins).
inline std::size_t rank_of_truth(const std::vector<double>& scores, std::size_t truth_index) {
    if (truth_index >= scores.size()) throw DataError("rank_of_truth: index out of range");
    std::size_t rank = 1;
    const double st = scores[truth_index];
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (i == truth_index) continue;
        if (scores[i] > st || (scores[i] == st && i < truth_index)) ++rank;
    }
    return rank;
}

/// Downstream evaluation results with run metadata; serialized as JSON and
/// CSV (columns: task,metric,value).
struct MetricsReport {
    std::string task;
    std::vector<std::pair<std::string, double>> metrics;  // insertion-ordered
    nlohmann::json metadata = nlohmann::json::object();

    void add(const std::string& name, double value) { metrics.emplace_back(name, value); }

    bool has(const std::string& name) const {
        for (const auto& [k, v] : metrics)
            if (k == name) return true;
        return false;
    }

    double get(const std::string& name) const {
        for (const auto& [k, v] : metrics)
            if (k == name) return v;
        throw DataError("metric '" + name + "' absent from report '" + task + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [k, v] : metrics) m[k] = v;
        return {{"task", task}, {"metrics", m}, {"metadata", metadata}};
    }

    std::string to_csv() const {
        std::string out = "task,metric,value\n";
        for (const auto& [k, v] : metrics) {
            out += task + "," + k + "," + nlohmann::json(v).dump() + "\n";
        }
        return out;
    }

    void save(const std::string& path_base) const {
        {
            std::ofstream js(path_base + ".json");
            if (!js) throw DataError("cannot write report: " + path_base + ".json");
            js << to_json().dump(2) << "\n";
        }
        std::ofstream cs(path_base + ".csv");
        if (!cs) throw DataError("cannot write report: " + path_base + ".csv");
        cs << to_csv();
    }
};

}  // namespace boottod
