#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmob/bundle.hpp"
#include "fedmob/mobility.hpp"
#include "fedmob/model.hpp"
#include "fedmob/privacy.hpp"
#include "fedmob/train.hpp"

namespace fedmob::fed {

struct AugmentationConfig {
    double alpha = 1.0;   // equal for all peers
    bool normalize = true; // divide by (1 + alpha * peer_count)
    double noise_sigma = 0.0;
    int min_group_size = 2;
};

enum class Weighting { uniform, by_sample_count };
enum class Mode { fltn, plain_fl, centralized };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);
std::string to_string(Weighting w);
Weighting parse_weighting(const std::string& name);

struct FederationConfig {
    int rounds = 10;
    AugmentationConfig aug;
    Weighting weighting = Weighting::uniform;
    Mode mode = Mode::fltn;
};

struct PeerGroup {
    int community = 0;
    std::vector<int> members; // sorted ev ids, all non-transitory
    int round = 0;
};

// One group per community holding its non-transitory EVs; groups smaller
// than min_group_size dissolve and their members fall back to direct
// submission.
std::vector<PeerGroup> form_peer_groups(std::span<const mobility::MobilityClass> classifications,
                                        const std::map<int, int>& community_of_ev,
                                        int min_group_size, int round);

// W_aug = own + alpha * sum(peers), optionally divided by
// (1 + alpha * |peers|), plus optional seeded Gaussian noise. Peers are
// summed in a canonical content order, so the result is independent of the
// caller's peer ordering; with alpha = 1 and normalization the result is
// the exact group mean and every member of a full peer group emits
// bit-identical weights.
WeightBundle peer_share(const WeightBundle& own, std::span<const WeightBundle* const> peers,
                        const AugmentationConfig& cfg, uint64_t noise_seed = 0);

// Element-wise mean of the bundles (uniform) or sample-count-weighted mean.
WeightBundle fed_avg(std::span<const WeightBundle* const> bundles, Weighting weighting,
                     std::span<const size_t> sample_counts = {});

struct EvAgent {
    int id = 0;
    std::string model_name;
    std::vector<mobility::TripRecord> trips;
    std::vector<mobility::ChargeEvent> charges;
    std::vector<model::Sample> train_samples;
    std::vector<model::Sample> test_samples;
    std::vector<model::SampleBatch> train_batches;
    std::vector<int> location_by_day; // end-of-day community, days 1..horizon
    mobility::MobilityClass classification;
    WeightBundle weights;
};

// Charge-time model update: the EV's local weights become bit-identical to
// the community model. Only ever invoked for a charge transaction.
void distribute(const WeightBundle& theta, EvAgent& ev, const mobility::ChargeEvent& at);

struct CommunityRoundStat {
    int community = 0;
    int submissions = 0;
    int peer_groups = 0;
    int grouped_members = 0;
    int direct_members = 0;
    uint64_t theta_hash = 0;
    double accuracy = -1.0; // -1 when the community had no test samples
    size_t test_samples = 0;
};

struct RedistributionEntry {
    int ev_id = 0;
    int community = 0;
    int64_t time = 0;
    uint64_t bundle_hash = 0; // EV bundle content hash right after the update
};

struct RoundReport {
    int round = 0;
    int day = 0;
    Mode mode = Mode::fltn;
    std::vector<CommunityRoundStat> communities;
    double overall_accuracy = -1.0;
    size_t overall_test_samples = 0;
    std::vector<privacy::LayerEntropy> submission_entropy; // mean over submitted bundles
    privacy::TurnoverStats dwell;
    std::vector<RedistributionEntry> redistributions;

    nlohmann::json to_json() const;
    static RoundReport from_json(const nlohmann::json& j);
};

struct EngineConfig {
    FederationConfig fed;
    model::OptimizerConfig opt;
    int privacy_bins = 64;
    int threads = 1;
};

// Drives the round loop: local training, peer share and augmentation for
// non-transitory EVs, direct submission for transitory EVs, per-community
// FedAvg, and charge-time redistribution.
class FederationEngine {
public:
    FederationEngine(std::vector<mobility::CommunityArea> city, std::vector<EvAgent> agents,
                     model::TransformerClassifier model, EngineConfig cfg, uint64_t seed);

    // Advances one round in the configured mode.
    RoundReport run_round();
    // The regular-FL control: identical pipeline with augmentation disabled.
    RoundReport run_plain_fl_round();

    int round() const { return round_; }
    int horizon_days() const { return horizon_days_; }
    const std::map<int, WeightBundle>& community_models() const { return theta_; }
    const std::vector<EvAgent>& agents() const { return agents_; }
    const model::TransformerClassifier& model() const { return model_; }

private:
    std::vector<mobility::CommunityArea> city_;
    std::vector<EvAgent> agents_;
    model::TransformerClassifier model_;
    EngineConfig cfg_;
    uint64_t seed_;
    int round_ = 0;
    int horizon_days_ = 0;
    std::map<int, WeightBundle> theta_;

    RoundReport execute_round(bool augment, Mode label);
};

} // namespace fedmob::fed
