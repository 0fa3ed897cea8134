#include "fedmob/tokenizer.hpp"

#include <algorithm>
#include <cmath>

#include "fedmob/errors.hpp"

namespace fedmob::model {

int battery_bucket(double battery, int buckets) {
    if (buckets < 1) throw ConfigError("battery_buckets must be >= 1");
    int b = static_cast<int>(std::floor(battery * buckets));
    if (b >= buckets) b = buckets - 1;
    if (b < 0) b = 0;
    return b;
}

std::array<double, kTimeFeatures> cyclical_time_features(int64_t epoch_seconds) {
    double day_frac = static_cast<double>(epoch_seconds % mobility::kSecondsPerDay) /
                      static_cast<double>(mobility::kSecondsPerDay);
    double week_frac = static_cast<double>((epoch_seconds / mobility::kSecondsPerDay) % 7) / 7.0;
    return {std::sin(2.0 * M_PI * day_frac), std::cos(2.0 * M_PI * day_frac),
            std::sin(2.0 * M_PI * week_frac), std::cos(2.0 * M_PI * week_frac)};
}

TokenSeq encode_sequence(std::span<const mobility::TripRecord> trips, int64_t upto,
                         const TokenizerConfig& cfg) {
    if (cfg.window_len < 1) throw ConfigError("window_len must be >= 1");
    if (cfg.communities < 1) throw ConfigError("tokenizer: communities must be >= 1");

    // Trips are time-ordered per EV; find the last one ending at or before upto.
    size_t end = 0;
    for (size_t i = 0; i < trips.size(); ++i) {
        if (trips[i].start_time + trips[i].duration_s <= upto) end = i + 1;
    }
    if (end == 0) throw DataError("encode_sequence: no trip history before the requested time");

    const int L = cfg.window_len;
    TokenSeq seq;
    seq.pickup.assign(static_cast<size_t>(L), kPadToken);
    seq.dropoff.assign(static_cast<size_t>(L), kPadToken);
    seq.battery.assign(static_cast<size_t>(L), kPadToken);
    seq.time_feats.assign(static_cast<size_t>(L) * kTimeFeatures, 0.0);

    size_t take = std::min(static_cast<size_t>(L), end);
    seq.n_real = static_cast<int>(take);
    for (size_t k = 0; k < take; ++k) {
        const auto& trip = trips[end - take + k];
        size_t pos = static_cast<size_t>(L) - take + k;
        seq.pickup[pos] = trip.pickup;
        seq.dropoff[pos] = trip.dropoff;
        seq.battery[pos] = battery_bucket(trip.battery_after, cfg.battery_buckets) + 1;
        auto tf = cyclical_time_features(trip.start_time);
        for (int f = 0; f < kTimeFeatures; ++f) seq.time_feats[pos * kTimeFeatures + static_cast<size_t>(f)] = tf[static_cast<size_t>(f)];
    }
    return seq;
}

std::vector<Sample> build_samples(std::span<const mobility::TripRecord> trips,
                                  std::span<const mobility::ChargeEvent> charges,
                                  const TokenizerConfig& cfg) {
    std::vector<Sample> out;
    if (trips.empty()) return out;
    size_t next_charge = 0;
    for (size_t k = 0; k < trips.size(); ++k) {
        int64_t anchor = trips[k].start_time + trips[k].duration_s;
        while (next_charge < charges.size() && charges[next_charge].time <= anchor) ++next_charge;
        if (next_charge == charges.size()) break; // no label past the final charge
        Sample s;
        s.seq = encode_sequence(trips.subspan(0, k + 1), anchor, cfg);
        s.target = charges[next_charge].community;
        s.ev_id = trips[k].ev_id;
        s.anchor_time = anchor;
        s.battery_at_prediction = trips[k].battery_after;
        out.push_back(std::move(s));
    }
    return out;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_chronological(std::vector<Sample> samples,
                                                                        double train_fraction) {
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw ConfigError("train_fraction must lie in (0, 1)");
    size_t n_train =
        static_cast<size_t>(std::ceil(train_fraction * static_cast<double>(samples.size())));
    if (n_train > samples.size()) n_train = samples.size();
    std::vector<Sample> train(samples.begin(), samples.begin() + static_cast<ptrdiff_t>(n_train));
    std::vector<Sample> test(samples.begin() + static_cast<ptrdiff_t>(n_train), samples.end());
    return {std::move(train), std::move(test)};
}

SampleBatch SampleBatch::from(std::span<const Sample> samples) {
    if (samples.empty()) throw DataError("cannot build an empty batch");
    const int L = static_cast<int>(samples[0].seq.pickup.size());
    SampleBatch b;
    b.batch = static_cast<int>(samples.size());
    b.window_len = L;
    size_t n = samples.size() * static_cast<size_t>(L);
    b.pickup.reserve(n);
    b.dropoff.reserve(n);
    b.battery.reserve(n);
    b.time_feats.reserve(n * kTimeFeatures);
    b.targets.reserve(samples.size());
    for (const auto& s : samples) {
        if (static_cast<int>(s.seq.pickup.size()) != L)
            throw DataError("batch mixes window lengths");
        b.pickup.insert(b.pickup.end(), s.seq.pickup.begin(), s.seq.pickup.end());
        b.dropoff.insert(b.dropoff.end(), s.seq.dropoff.begin(), s.seq.dropoff.end());
        b.battery.insert(b.battery.end(), s.seq.battery.begin(), s.seq.battery.end());
        b.time_feats.insert(b.time_feats.end(), s.seq.time_feats.begin(), s.seq.time_feats.end());
        b.targets.push_back(s.target);
    }
    return b;
}

std::vector<SampleBatch> make_batches(std::span<const Sample> samples, int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::vector<SampleBatch> out;
    for (size_t i = 0; i < samples.size(); i += static_cast<size_t>(batch_size)) {
        size_t n = std::min(static_cast<size_t>(batch_size), samples.size() - i);
        out.push_back(SampleBatch::from(samples.subspan(i, n)));
    }
    return out;
}

int default_batch_size(size_t n_samples, int floor) {
    return std::max(floor, static_cast<int>(n_samples / 8));
}

} // namespace fedmob::model
