#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fedmob::mobility {

struct CommunityArea {
    int id = 0; // 1..C, contiguous
    double demand_weight = 1.0;
    std::vector<int> neighbors;
    bool hotspot = false;
};

struct CityConfig {
    int communities = 77;
    int hotspots = 5;
    // Fraction of total trip-origin demand carried by the hotspot areas.
    double hotspot_demand_ratio = 0.5;
};

struct EvModelProfile {
    std::string name;
    double range_km = 0.0;
    double energy_per_km = 0.0; // battery fraction per km, 1 / range_km
};

// Nine profiles spanning 143 km to 416 km of range.
std::vector<EvModelProfile> default_ev_models();
EvModelProfile make_profile(std::string name, double range_km);

struct TripRecord {
    int ev_id = 0;
    int pickup = 0;
    int dropoff = 0;
    int64_t start_time = 0; // epoch seconds
    int64_t duration_s = 0;
    double distance_km = 0.0;
    double battery_before = 1.0;
    double battery_after = 1.0;
};

struct ChargeEvent {
    int ev_id = 0;
    int community = 0;
    int64_t time = 0;
    double battery_at_charge = 0.0;
};

enum class MobilityKind { transitory, non_transitory };

struct MobilityClass {
    int ev_id = 0;
    int64_t window_start = 0;
    int64_t window_end = 0;
    MobilityKind kind = MobilityKind::transitory;
    double same_community_fraction = 0.0;
};

struct GeneratorConfig {
    int ev_count = 60;
    int horizon_days = 28;
    double charge_threshold = 0.20;
    // Share of EVs that operate out of a fixed home community.
    double non_transitory_fraction = 0.5;
    // For home-based EVs: probability the next dropoff is the home community.
    double same_community_prob = 0.93;
    // For roaming EVs: probability the next dropoff is a neighbor of the
    // current community; otherwise drawn city-wide by demand weight.
    double neighbor_bias = 0.5;
    int trips_per_day = 6;
    // Share of EVs injected with no trips at all (always fully charged).
    double idle_fraction = 0.0;
    double classification_tau = 0.8;
};

// Simple battery ledger. A trip consumes distance * energy_per_km of
// charge, clamped at zero; charging restores the battery to 100%.
struct BatteryState {
    double charge = 1.0;

    double drive(double distance_km, double energy_per_km) {
        double next = charge - distance_km * energy_per_km;
        charge = next < 0.0 ? 0.0 : next;
        return charge;
    }
    bool needs_charge(double threshold) const { return charge <= threshold; }
    void recharge() { charge = 1.0; }
};

struct FleetData {
    std::vector<TripRecord> trips;     // sorted by (ev_id, start_time)
    std::vector<ChargeEvent> charges;  // sorted by (ev_id, time)
    std::vector<int> initial_community; // index ev_id - 1
    std::vector<std::string> ev_model;  // index ev_id - 1
    int ev_count = 0;
    int horizon_days = 0;

    std::span<const TripRecord> trips_of(int ev_id) const;
    std::span<const ChargeEvent> charges_of(int ev_id) const;
};

std::vector<CommunityArea> generate_city(const CityConfig& config, uint64_t seed);

FleetData generate_trips(const std::vector<CommunityArea>& city,
                         const std::vector<EvModelProfile>& profiles,
                         const GeneratorConfig& config, uint64_t seed);

// --- trip CSV ingestion -----------------------------------------------

struct RowError {
    size_t row = 0; // 1-based data row number (header is row 0)
    int ev_id = 0;
    std::string message;
};

struct IngestResult {
    std::vector<TripRecord> records; // validated, sorted by (ev_id, start_time)
    std::vector<RowError> rejected;
};

extern const char* const kTripCsvHeader;
extern const char* const kChargeCsvHeader;

IngestResult ingest_trips_csv(const std::filesystem::path& path);

void write_trips_csv(const std::filesystem::path& path, std::span<const TripRecord> trips);
void write_charges_csv(const std::filesystem::path& path, std::span<const ChargeEvent> charges);
void write_city_json(const std::filesystem::path& path, const std::vector<CommunityArea>& city);
std::vector<CommunityArea> read_city_json(const std::filesystem::path& path);

// --- classification and dwell -----------------------------------------

// Fraction of window trips that start and end in the modal same-community
// area. Non-transitory requires fraction >= tau and a unique modal
// community; an EV with no trips in the window is transitory.
MobilityClass classify_mobility(int ev_id, std::span<const TripRecord> trips, int64_t window_start,
                                int64_t window_end, double tau);

inline constexpr int64_t kSecondsPerDay = 86400;

// Community the EV occupies at the end of each simulated day, days 1..horizon.
std::vector<int> locations_by_day(std::span<const TripRecord> trips, int initial_community,
                                  int horizon_days);

struct DwellRun {
    int ev_id = 0;
    int duration_epochs = 0; // consecutive days in one DERMS area
};

// Maximal runs of consecutive days an EV spends in one DERMS area. DERMS
// scope is the community itself, so the run boundaries are community
// changes in the end-of-day locations.
std::vector<DwellRun> dwell_durations(const FleetData& fleet);

} // namespace fedmob::mobility
