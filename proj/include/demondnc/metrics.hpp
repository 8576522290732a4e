#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "demondnc/errors.hpp"

namespace demondnc {

struct MetricsRecord {
    std::uint64_t step = 0;
    double task_loss = 0.0;
    double error = 0.0;  // bit_error for bit tasks, babi_error for bAbI
    bool babi = false;
    double mi_estimate = 0.0;
    double demon_reward_mean = 0.0;
    double clip_fraction = 0.0;
    double mean_ratio = 0.0;
    double wall_clock = 0.0;  // seconds; excluded from determinism comparisons
};

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// One self-describing key=value line per record, stream-appendable.
inline std::string metrics_line(const MetricsRecord& r) {
    std::ostringstream out;
    out << "step=" << r.step;
    out << " task_loss=" << detail::fmt_g17(r.task_loss);
    out << (r.babi ? " babi_error=" : " bit_error=") << detail::fmt_g17(r.error);
    out << " mi_estimate=" << detail::fmt_g17(r.mi_estimate);
    out << " demon_reward_mean=" << detail::fmt_g17(r.demon_reward_mean);
    out << " clip_fraction=" << detail::fmt_g17(r.clip_fraction);
    out << " mean_ratio=" << detail::fmt_g17(r.mean_ratio);
    out << " wall_clock=" << detail::fmt_g17(r.wall_clock);
    return out.str();
}

inline MetricsRecord metrics_parse_line(const std::string& line) {
    MetricsRecord r;
    std::istringstream in(line);
    std::string field;
    bool have_step = false;
    while (in >> field) {
        const std::size_t eq = field.find('=');
        if (eq == std::string::npos) throw ParseError("metrics: malformed field '" + field + "'");
        const std::string key = field.substr(0, eq);
        const std::string val = field.substr(eq + 1);
        try {
            if (key == "step") {
                r.step = std::stoull(val);
                have_step = true;
            } else if (key == "task_loss") {
                r.task_loss = std::stod(val);
            } else if (key == "bit_error") {
                r.error = std::stod(val);
                r.babi = false;
            } else if (key == "babi_error") {
                r.error = std::stod(val);
                r.babi = true;
            } else if (key == "mi_estimate") {
                r.mi_estimate = std::stod(val);
            } else if (key == "demon_reward_mean") {
                r.demon_reward_mean = std::stod(val);
            } else if (key == "clip_fraction") {
                r.clip_fraction = std::stod(val);
            } else if (key == "mean_ratio") {
                r.mean_ratio = std::stod(val);
            } else if (key == "wall_clock") {
                r.wall_clock = std::stod(val);
            }  // unknown keys are forward-compatible noise
        } catch (const std::exception&) {
            throw ParseError("metrics: bad value in '" + field + "'");
        }
    }
    if (!have_step) throw ParseError("metrics: line without step field");
    return r;
}

// All records in a file; summary and comment lines are skipped.
inline std::vector<MetricsRecord> metrics_load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("metrics: cannot open " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("summary", 0) == 0) continue;
        out.push_back(metrics_parse_line(line));
    }
    return out;
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) throw ArgumentError("mean_std: empty input");
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double acc = 0.0;
    for (const double x : v) acc += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(acc / static_cast<double>(v.size() - 1)) : 0.0;
    return {mean, sd};
}

inline std::string metrics_summary_line(const std::vector<MetricsRecord>& records) {
    if (records.empty()) throw ArgumentError("metrics: no records to summarize");
    std::vector<double> errs, losses;
    for (const auto& r : records) {
        errs.push_back(r.error);
        losses.push_back(r.task_loss);
    }
    const auto [em, es] = mean_std(errs);
    const auto [lm, ls] = mean_std(losses);
    std::ostringstream out;
    out << "summary records=" << records.size();
    out << " final_step=" << records.back().step;
    out << " final_error=" << detail::fmt_g17(records.back().error);
    out << " error_mean=" << detail::fmt_g17(em) << " error_std=" << detail::fmt_g17(es);
    out << " loss_mean=" << detail::fmt_g17(lm) << " loss_std=" << detail::fmt_g17(ls);
    return out.str();
}

// Spearman rank correlation with average ranks for ties (Pearson on ranks).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ArgumentError("spearman: length mismatch");
    if (a.size() < 2) throw ArgumentError("spearman: need at least 2 points");
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) throw DomainError("spearman: constant input has no rank ordering");
    return num / std::sqrt(da * db);
}

}  // namespace demondnc
