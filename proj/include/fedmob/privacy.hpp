#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmob/bundle.hpp"
#include "fedmob/mobility.hpp"

namespace fedmob::privacy {

struct LayerEntropy {
    std::string layer;
    double entropy = 0.0; // nats
    int bins = 0;
    size_t values = 0;
};

struct EntropyReport {
    std::vector<LayerEntropy> per_layer;
    double total = 0.0; // parameter-count-weighted mean over layers
    std::string mode;
};

// Shannon entropy of each layer's weight-value histogram: `bins` equal
// width cells over [min, max] of the layer, H = -sum p_i ln p_i. A
// constant layer has H = 0 by convention.
EntropyReport layer_entropy(const WeightBundle& bundle, int bins);

double histogram_entropy(std::span<const double> values, int bins);

struct EntropyDelta {
    int round = 0;
    std::string layer;
    int bins = 0;
    double absolute = 0.0; // fltn - plain_fl
    std::optional<double> relative;
};

struct EntropyComparison {
    std::vector<EntropyDelta> deltas;
    double mean_absolute = 0.0;
    std::optional<double> mean_relative;
};

// Pairs per-round entropy reports from an fltn run and a plain-FL control
// sharing everything but the federation mode.
EntropyComparison entropy_comparison(std::span<const EntropyReport> fltn_rounds,
                                     std::span<const EntropyReport> plain_rounds);

struct TurnoverStats {
    std::map<int, size_t> counts; // dwell duration -> run count
    size_t runs = 0;
    double median = 0.0;
    int p90 = 0;              // nearest-rank 90th percentile
    double fraction_le2 = 0.0; // share of stays lasting at most 2 epochs
};

TurnoverStats turnover_stats(std::span<const mobility::DwellRun> dwell);

} // namespace fedmob::privacy
