#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmob/federation.hpp"
#include "fedmob/mobility.hpp"

namespace fedmob {
struct RunConfig;
}

namespace fedmob::harness {

struct ExperimentSpec {
    std::string name = "sweep";
    std::vector<fed::Mode> modes = {fed::Mode::fltn};
    std::vector<int> ev_counts = {50, 100, 150, 200, 250, 300, 350, 400, 450, 500};
    int communities_per_group = 3;
    std::vector<double> charge_levels = {0.2, 0.4, 0.6, 0.8, 1.0};
    int rounds = 10;
    std::vector<uint64_t> seeds = {1, 2, 3};

    void validate() const;
};

// Trips touching a community (pickups plus dropoffs), the density that
// ranks communities into bands.
std::map<int, size_t> trip_density(std::span<const mobility::TripRecord> trips);

struct CommunityGrouping {
    std::vector<std::vector<int>> bands;   // density-ranked partition, densest first
    std::vector<std::vector<int>> sampled; // per_group ids sampled per band
};

// Ranks communities by trip density, partitions them into `groups`
// contiguous bands, and samples `per_group` communities uniformly without
// replacement from each band.
CommunityGrouping sample_community_groups(const std::vector<mobility::CommunityArea>& city,
                                          const std::map<int, size_t>& density, int groups,
                                          int per_group, uint64_t seed);

struct ResultRow {
    std::string label;
    std::vector<int> communities;
    std::vector<double> accuracies;
    double average = 0.0;
    double std_dev = 0.0;
    double min = 0.0;
    double max = 0.0;

    static ResultRow from(std::string label, std::vector<int> communities,
                          std::vector<double> accuracies);
};

// Population standard deviation (divide by n).
double population_std(std::span<const double> values);
double mean(std::span<const double> values);

// Assigns a battery level to its charge-level slice: the bands
// (0, l1], (l1, l2], ..., (l_{k-1}, l_k] partition the battery range.
size_t charge_level_slice(double battery, std::span<const double> levels);

// --- simulation assembly -------------------------------------------------

struct SimSetup {
    std::vector<mobility::CommunityArea> city;
    mobility::FleetData fleet;
    std::vector<fed::EvAgent> agents;
    model::TokenizerConfig tokenizer;
    model::ModelConfig model_cfg;
    size_t train_samples = 0;
    size_t test_samples = 0;
};

// Builds city, fleet, samples, splits, classifications, and agents from a
// run config. `seed` overrides the config seed (sweeps derive one per cell).
SimSetup build_simulation(const RunConfig& cfg, uint64_t seed);
fed::FederationEngine make_engine(const RunConfig& cfg, SimSetup& setup, uint64_t seed);

// Trains one model on the pooled training samples and scores the pooled
// chronological test split. No federation, no privacy machinery.
double run_centralized_baseline(const model::TransformerClassifier& model,
                                std::span<const model::Sample> train,
                                std::span<const model::Sample> test,
                                const model::OptimizerConfig& opt, int epochs, uint64_t seed,
                                std::vector<uint8_t>* correct = nullptr);

// --- sweep results ---------------------------------------------------------

struct AccuracyCell {
    std::string mode;
    int ev_count = 0;
    int community = 0;
    double accuracy = 0.0;
    uint64_t seed = 0;
};

struct SummaryRow {
    std::string mode;
    int ev_count = 0;
    double avg = 0.0, std_dev = 0.0, min = 0.0, max = 0.0;
};

struct ChargeLevelCell {
    int ev_count = 0;
    double charge_level = 0.0;
    bool missing = true;
    double max = 0.0, min = 0.0, avg = 0.0, sd = 0.0;
};

struct SweepResult {
    std::vector<AccuracyCell> cells;
    std::vector<ResultRow> rows; // one per (mode, ev_count)
    std::vector<SummaryRow> summary;
};

// Full EV-count sweep: one simulation per (mode, ev_count, seed) with the
// density band for that row supplying the evaluated communities.
SweepResult run_ev_count_sweep(const RunConfig& cfg, const ExperimentSpec& spec);

// Charge-level sweep: evaluation-time battery slices of one jointly
// trained model per (ev_count, seed), aggregated across sampled
// communities.
std::vector<ChargeLevelCell> run_charge_level_sweep(const RunConfig& cfg,
                                                    const ExperimentSpec& spec);

} // namespace fedmob::harness
