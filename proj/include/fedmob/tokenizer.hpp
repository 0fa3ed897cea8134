#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fedmob/mobility.hpp"

namespace fedmob::model {

// Token index 0 is the reserved pad in every channel; community tokens are
// the ids 1..C and battery tokens are bucket+1.
inline constexpr int32_t kPadToken = 0;
inline constexpr int kTimeFeatures = 4; // sin/cos time-of-day, sin/cos day-of-week

struct TokenizerConfig {
    int window_len = 32;
    int communities = 0;
    int battery_buckets = 10;
};

// floor(battery * buckets); battery == 1.0 maps to the top bucket.
int battery_bucket(double battery, int buckets);

std::array<double, kTimeFeatures> cyclical_time_features(int64_t epoch_seconds);

struct TokenSeq {
    std::vector<int32_t> pickup;   // window_len entries
    std::vector<int32_t> dropoff;  // window_len entries
    std::vector<int32_t> battery;  // window_len entries
    std::vector<double> time_feats; // window_len * kTimeFeatures
    int n_real = 0;                 // trailing non-pad positions
};

// Embeds the last min(L, available) trips ending at or before `upto`,
// left-padded. Throws DataError when no trip ends by `upto`.
TokenSeq encode_sequence(std::span<const mobility::TripRecord> trips, int64_t upto,
                         const TokenizerConfig& cfg);

struct Sample {
    TokenSeq seq;
    int32_t target = 0;                 // next-charge community, 1..C
    int ev_id = 0;
    int64_t anchor_time = 0;            // trip end the window closes at
    double battery_at_prediction = 1.0; // battery_after of the last trip
};

// One sample per trip whose next charge event lies strictly after the trip
// end; trips after the final charge of the horizon yield no sample.
std::vector<Sample> build_samples(std::span<const mobility::TripRecord> trips,
                                  std::span<const mobility::ChargeEvent> charges,
                                  const TokenizerConfig& cfg);

// Chronological split: the first ceil(train_fraction * n) samples train,
// the remainder tests.
std::pair<std::vector<Sample>, std::vector<Sample>> split_chronological(std::vector<Sample> samples,
                                                                        double train_fraction);

struct SampleBatch {
    int batch = 0;
    int window_len = 0;
    std::vector<int32_t> pickup;    // batch * window_len
    std::vector<int32_t> dropoff;   // batch * window_len
    std::vector<int32_t> battery;   // batch * window_len
    std::vector<double> time_feats; // batch * window_len * kTimeFeatures
    std::vector<int32_t> targets;   // batch entries, 1..C

    static SampleBatch from(std::span<const Sample> samples);
};

std::vector<SampleBatch> make_batches(std::span<const Sample> samples, int batch_size);

// Default batch size: max(floor, n / 8).
int default_batch_size(size_t n_samples, int floor);

} // namespace fedmob::model
