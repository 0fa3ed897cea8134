#include "fedmob/privacy.hpp"

#include <algorithm>
#include <cmath>

#include "fedmob/errors.hpp"

namespace fedmob::privacy {

double histogram_entropy(std::span<const double> values, int bins) {
    if (bins < 2) throw ConfigError("entropy: bins must be >= 2");
    if (values.empty()) throw DataError("entropy: layer has no values");

    double lo = values[0], hi = values[0];
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (lo == hi) return 0.0; // degenerate distribution

    std::vector<size_t> counts(static_cast<size_t>(bins), 0);
    double width_inv = static_cast<double>(bins) / (hi - lo);
    for (double v : values) {
        auto b = static_cast<long>((v - lo) * width_inv);
        if (b >= bins) b = bins - 1; // v == hi lands in the top cell
        if (b < 0) b = 0;
        ++counts[static_cast<size_t>(b)];
    }
    double h = 0.0;
    double n = static_cast<double>(values.size());
    for (size_t c : counts) {
        if (c == 0) continue;
        double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h;
}

EntropyReport layer_entropy(const WeightBundle& bundle, int bins) {
    if (bins < 2) throw ConfigError("entropy: bins must be >= 2");
    EntropyReport report;
    double weighted = 0.0;
    size_t total = 0;
    for (const auto& l : bundle.layers()) {
        double h = histogram_entropy(bundle.layer_values(l.name), bins);
        report.per_layer.push_back(LayerEntropy{l.name, h, bins, l.size});
        weighted += h * static_cast<double>(l.size);
        total += l.size;
    }
    report.total = total > 0 ? weighted / static_cast<double>(total) : 0.0;
    return report;
}

EntropyComparison entropy_comparison(std::span<const EntropyReport> fltn_rounds,
                                     std::span<const EntropyReport> plain_rounds) {
    if (fltn_rounds.size() != plain_rounds.size())
        throw DataError("entropy comparison: runs have different round counts");
    if (fltn_rounds.empty()) throw DataError("entropy comparison: no rounds to compare");

    EntropyComparison cmp;
    double abs_sum = 0.0, rel_sum = 0.0;
    size_t rel_count = 0;
    for (size_t r = 0; r < fltn_rounds.size(); ++r) {
        const auto& a = fltn_rounds[r].per_layer;
        const auto& b = plain_rounds[r].per_layer;
        if (a.size() != b.size())
            throw DataError("entropy comparison: round " + std::to_string(r + 1) +
                            " has mismatched layer counts");
        for (size_t i = 0; i < a.size(); ++i) {
            if (a[i].layer != b[i].layer || a[i].bins != b[i].bins)
                throw DataError("entropy comparison: layer layout or bin settings differ at round " +
                                std::to_string(r + 1));
            EntropyDelta d;
            d.round = static_cast<int>(r + 1);
            d.layer = a[i].layer;
            d.bins = a[i].bins;
            d.absolute = a[i].entropy - b[i].entropy;
            if (b[i].entropy > 0.0) {
                d.relative = d.absolute / b[i].entropy;
                rel_sum += *d.relative;
                ++rel_count;
            }
            abs_sum += d.absolute;
            cmp.deltas.push_back(std::move(d));
        }
    }
    cmp.mean_absolute = abs_sum / static_cast<double>(cmp.deltas.size());
    if (rel_count > 0) cmp.mean_relative = rel_sum / static_cast<double>(rel_count);
    return cmp;
}

TurnoverStats turnover_stats(std::span<const mobility::DwellRun> dwell) {
    if (dwell.empty()) throw DataError("turnover stats: empty dwell list");
    TurnoverStats stats;
    std::vector<int> durations;
    durations.reserve(dwell.size());
    for (const auto& run : dwell) {
        ++stats.counts[run.duration_epochs];
        durations.push_back(run.duration_epochs);
    }
    stats.runs = durations.size();
    std::sort(durations.begin(), durations.end());
    size_t n = durations.size();
    stats.median = n % 2 == 1 ? durations[n / 2]
                              : 0.5 * (durations[n / 2 - 1] + durations[n / 2]);
    size_t rank = static_cast<size_t>(std::ceil(0.9 * static_cast<double>(n)));
    if (rank == 0) rank = 1;
    stats.p90 = durations[rank - 1];
    size_t le2 = 0;
    for (int d : durations)
        if (d <= 2) ++le2;
    stats.fraction_le2 = static_cast<double>(le2) / static_cast<double>(n);
    return stats;
}

} // namespace fedmob::privacy
