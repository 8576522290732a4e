#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "demondnc/config.hpp"
#include "demondnc/metrics.hpp"

namespace demondnc {

struct RunSeries {
    std::string dir;
    std::string variant;  // "demon" or "baseline", from the run's config
    ExperimentConfig config;
    std::vector<MetricsRecord> records;
};

inline RunSeries load_run(const std::string& dir) {
    RunSeries run;
    run.dir = dir;
    run.config = config_load(dir + "/config.json");
    run.variant = run.config.demon_enabled ? "demon" : "baseline";
    run.records = metrics_load(dir + "/metrics.txt");
    if (run.records.empty()) throw IoError("compare: no metrics records in " + dir);
    return run;
}

// Aligns runs on their common logging steps and reports per-variant error
// statistics per step, then the rank correlation between final MI estimate
// and final error across all runs.
inline std::string compare_report(const std::vector<RunSeries>& runs) {
    if (runs.size() < 2) throw ArgumentError("compare: need at least two runs");

    std::set<std::uint64_t> common;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        std::set<std::uint64_t> steps;
        for (const auto& r : runs[i].records) steps.insert(r.step);
        if (i == 0) {
            common = std::move(steps);
        } else {
            std::set<std::uint64_t> both;
            std::set_intersection(common.begin(), common.end(), steps.begin(), steps.end(),
                                  std::inserter(both, both.begin()));
            common = std::move(both);
        }
    }
    if (common.empty()) throw DomainError("compare: runs share no logging steps");

    std::vector<std::string> variants;
    for (const auto& run : runs)
        if (std::find(variants.begin(), variants.end(), run.variant) == variants.end())
            variants.push_back(run.variant);
    std::sort(variants.begin(), variants.end());

    std::ostringstream out;
    for (const std::uint64_t step : common) {
        out << "step=" << step;
        for (const auto& variant : variants) {
            std::vector<double> errs, mis;
            for (const auto& run : runs) {
                if (run.variant != variant) continue;
                for (const auto& rec : run.records)
                    if (rec.step == step) {
                        errs.push_back(rec.error);
                        mis.push_back(rec.mi_estimate);
                        break;
                    }
            }
            const auto [em, es] = mean_std(errs);
            out << " " << variant << "_error_mean=" << detail::fmt_g17(em);
            out << " " << variant << "_error_std=" << detail::fmt_g17(es);
            if (variant == "demon") {
                const auto [mm, ms] = mean_std(mis);
                out << " demon_mi_mean=" << detail::fmt_g17(mm);
                (void)ms;
            }
        }
        out << "\n";
    }

    std::vector<double> final_mi, final_err;
    for (const auto& run : runs) {
        final_mi.push_back(run.records.back().mi_estimate);
        final_err.push_back(run.records.back().error);
    }
    out << "correlation runs=" << runs.size() << " steps=" << common.size();
    out << " spearman_mi_error=";
    try {
        out << detail::fmt_g17(spearman(final_mi, final_err));
    } catch (const DomainError&) {
        out << "nan";  // constant MI or error across runs carries no ranking
    }
    out << "\n";
    return out.str();
}

}  // namespace demondnc
