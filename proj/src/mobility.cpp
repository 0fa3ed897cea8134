#include "fedmob/mobility.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "fedmob/errors.hpp"
#include "fedmob/rng.hpp"

namespace fedmob::mobility {

namespace {

constexpr int64_t kDayStart = 6 * 3600;  // trips begin no earlier than 06:00
constexpr int64_t kDayEnd = 22 * 3600;   // last trip of a day departs by 22:00
constexpr int64_t kPlugInDelay = 60;     // seconds between arrival and charge event
constexpr int64_t kMinTurnaround = 300;  // seconds between consecutive trips

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

int64_t day_of(int64_t t) { return t / kSecondsPerDay + 1; }

} // namespace

EvModelProfile make_profile(std::string name, double range_km) {
    if (range_km <= 0.0) throw ConfigError("EV model range must be positive: " + name);
    return EvModelProfile{std::move(name), range_km, 1.0 / range_km};
}

std::vector<EvModelProfile> default_ev_models() {
    // Nine ranges spread across the 143..416 km span.
    static const double ranges[] = {143, 177, 211, 245, 279, 313, 347, 382, 416};
    std::vector<EvModelProfile> out;
    for (double r : ranges) {
        char name[32];
        std::snprintf(name, sizeof name, "ev-%d", static_cast<int>(r));
        out.push_back(make_profile(name, r));
    }
    return out;
}

std::vector<CommunityArea> generate_city(const CityConfig& config, uint64_t seed) {
    if (config.communities < 2) throw ConfigError("city: communities must be >= 2");
    if (config.hotspots < 0 || config.hotspots > config.communities)
        throw ConfigError("city: hotspots must lie in [0, communities]");
    if (config.hotspot_demand_ratio < 0.0 || config.hotspot_demand_ratio >= 1.0)
        throw ConfigError("city: hotspot_demand_ratio must lie in [0, 1)");

    const int c = config.communities;
    const int h = config.hotspots;
    const int width = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(c))));

    std::vector<CommunityArea> city(static_cast<size_t>(c));
    for (int i = 0; i < c; ++i) {
        CommunityArea& area = city[static_cast<size_t>(i)];
        area.id = i + 1;
        // Communities tile a grid; adjacency is shared grid edges, which
        // keeps the neighbor relation symmetric by construction.
        int row = i / width, col = i % width;
        auto add = [&](int r2, int c2) {
            int j = r2 * width + c2;
            if (r2 >= 0 && c2 >= 0 && c2 < width && j >= 0 && j < c) area.neighbors.push_back(j + 1);
        };
        add(row - 1, col);
        add(row + 1, col);
        add(row, col - 1);
        add(row, col + 1);
    }

    Rng rng(derive_seed(seed, "city"));
    std::vector<int> ids(static_cast<size_t>(c));
    for (int i = 0; i < c; ++i) ids[static_cast<size_t>(i)] = i + 1;
    for (int i = 0; i < h; ++i) {
        int j = static_cast<int>(rng.uniform_int(i, c - 1));
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
    for (int i = 0; i < h; ++i) city[static_cast<size_t>(ids[static_cast<size_t>(i)] - 1)].hotspot = true;

    // Non-hotspot areas carry unit demand; hotspot areas split the mass
    // that makes their share of total demand equal hotspot_demand_ratio.
    double hotspot_weight = 1.0;
    if (h > 0 && h < c && config.hotspot_demand_ratio > 0.0) {
        double rho = config.hotspot_demand_ratio;
        hotspot_weight = rho / (1.0 - rho) * static_cast<double>(c - h) / static_cast<double>(h);
    }
    for (auto& area : city) area.demand_weight = area.hotspot ? hotspot_weight : 1.0;
    return city;
}

namespace {

struct DestinationSampler {
    const std::vector<CommunityArea>& city;
    DiscreteDist demand;

    explicit DestinationSampler(const std::vector<CommunityArea>& c)
        : city(c), demand(make_weights(c)) {}

    static std::vector<double> make_weights(const std::vector<CommunityArea>& c) {
        std::vector<double> w;
        w.reserve(c.size());
        for (const auto& area : c) w.push_back(area.demand_weight);
        return w;
    }

    int by_demand(Rng& rng) const { return static_cast<int>(demand.sample(rng)) + 1; }

    int neighbor_of(int community, Rng& rng) const {
        const auto& ns = city[static_cast<size_t>(community - 1)].neighbors;
        if (ns.empty()) return community;
        return ns[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(ns.size()) - 1))];
    }

    bool adjacent(int a, int b) const {
        const auto& ns = city[static_cast<size_t>(a - 1)].neighbors;
        return std::find(ns.begin(), ns.end(), b) != ns.end();
    }
};

} // namespace

FleetData generate_trips(const std::vector<CommunityArea>& city,
                         const std::vector<EvModelProfile>& profiles,
                         const GeneratorConfig& config, uint64_t seed) {
    if (city.size() < 2) throw ConfigError("generate_trips: city must have >= 2 communities");
    if (profiles.empty()) throw ConfigError("generate_trips: no EV model profiles");
    if (config.ev_count < 1) throw ConfigError("generate_trips: ev_count must be >= 1");
    if (config.horizon_days < 1) throw ConfigError("generate_trips: horizon_days must be >= 1");
    if (config.charge_threshold <= 0.0 || config.charge_threshold >= 1.0)
        throw ConfigError("generate_trips: charge_threshold must lie in (0, 1)");

    DestinationSampler dest(city);
    FleetData fleet;
    fleet.ev_count = config.ev_count;
    fleet.horizon_days = config.horizon_days;
    fleet.initial_community.resize(static_cast<size_t>(config.ev_count));
    fleet.ev_model.resize(static_cast<size_t>(config.ev_count));

    for (int ev = 1; ev <= config.ev_count; ++ev) {
        Rng rng(derive_seed(seed, "ev", static_cast<uint64_t>(ev)));
        const EvModelProfile& profile =
            profiles[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(profiles.size()) - 1))];
        fleet.ev_model[static_cast<size_t>(ev - 1)] = profile.name;

        bool home_based = rng.uniform() < config.non_transitory_fraction;
        int home = dest.by_demand(rng);
        int location = home;
        fleet.initial_community[static_cast<size_t>(ev - 1)] = location;

        if (rng.uniform() < config.idle_fraction) continue; // idle EV: empty log

        BatteryState battery;
        int64_t available_from = 0;
        for (int day = 1; day <= config.horizon_days; ++day) {
            int64_t day_base = static_cast<int64_t>(day - 1) * kSecondsPerDay;
            int lo = std::max(0, config.trips_per_day - 2);
            int n = static_cast<int>(rng.uniform_int(lo, config.trips_per_day + 2));
            std::vector<int64_t> starts;
            starts.reserve(static_cast<size_t>(n));
            for (int k = 0; k < n; ++k) starts.push_back(day_base + rng.uniform_int(kDayStart, kDayEnd));
            std::sort(starts.begin(), starts.end());

            for (int64_t planned : starts) {
                int64_t start = std::max(planned, available_from);
                if (start > day_base + kDayEnd) break; // day is full

                int pickup = location;
                int dropoff;
                if (home_based) {
                    dropoff = rng.uniform() < config.same_community_prob ? home
                                                                         : dest.neighbor_of(pickup, rng);
                } else {
                    dropoff = rng.uniform() < config.neighbor_bias ? dest.neighbor_of(pickup, rng)
                                                                   : dest.by_demand(rng);
                }

                double distance;
                if (dropoff == pickup)
                    distance = rng.uniform(1.0, 8.0);
                else if (dest.adjacent(pickup, dropoff))
                    distance = rng.uniform(3.0, 15.0);
                else
                    distance = rng.uniform(5.0, 40.0);
                double speed_kmh = rng.uniform(25.0, 45.0);
                int64_t duration = std::max<int64_t>(60, static_cast<int64_t>(distance / speed_kmh * 3600.0));

                TripRecord trip;
                trip.ev_id = ev;
                trip.pickup = pickup;
                trip.dropoff = dropoff;
                trip.start_time = start;
                trip.duration_s = duration;
                trip.distance_km = distance;
                trip.battery_before = battery.charge;
                trip.battery_after = battery.drive(distance, profile.energy_per_km);
                fleet.trips.push_back(trip);

                location = dropoff;
                int64_t end = start + duration;
                available_from = end + kMinTurnaround;
                if (battery.needs_charge(config.charge_threshold)) {
                    ChargeEvent evn;
                    evn.ev_id = ev;
                    evn.community = location;
                    evn.time = end + kPlugInDelay;
                    evn.battery_at_charge = battery.charge;
                    fleet.charges.push_back(evn);
                    battery.recharge();
                    available_from = end + kPlugInDelay + rng.uniform_int(1200, 3600);
                }
            }
        }
    }
    return fleet;
}

std::span<const TripRecord> FleetData::trips_of(int ev_id) const {
    auto lo = std::lower_bound(trips.begin(), trips.end(), ev_id,
                               [](const TripRecord& t, int id) { return t.ev_id < id; });
    auto hi = std::upper_bound(trips.begin(), trips.end(), ev_id,
                               [](int id, const TripRecord& t) { return id < t.ev_id; });
    return {&*lo, static_cast<size_t>(hi - lo)};
}

std::span<const ChargeEvent> FleetData::charges_of(int ev_id) const {
    auto lo = std::lower_bound(charges.begin(), charges.end(), ev_id,
                               [](const ChargeEvent& c, int id) { return c.ev_id < id; });
    auto hi = std::upper_bound(charges.begin(), charges.end(), ev_id,
                               [](int id, const ChargeEvent& c) { return id < c.ev_id; });
    return {&*lo, static_cast<size_t>(hi - lo)};
}

// --- CSV ----------------------------------------------------------------

const char* const kTripCsvHeader =
    "ev_id,pickup_community,dropoff_community,start_time,duration_s,distance_km,battery_before,battery_after";
const char* const kChargeCsvHeader = "ev_id,community,time,battery_at_charge";

void write_trips_csv(const std::filesystem::path& path, std::span<const TripRecord> trips) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << kTripCsvHeader << '\n';
    for (const auto& t : trips) {
        os << t.ev_id << ',' << t.pickup << ',' << t.dropoff << ',' << t.start_time << ','
           << t.duration_s << ',' << fmt_double(t.distance_km) << ',' << fmt_double(t.battery_before)
           << ',' << fmt_double(t.battery_after) << '\n';
    }
    if (!os) throw IoError("write failed: " + path.string());
}

void write_charges_csv(const std::filesystem::path& path, std::span<const ChargeEvent> charges) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << kChargeCsvHeader << '\n';
    for (const auto& c : charges) {
        os << c.ev_id << ',' << c.community << ',' << c.time << ',' << fmt_double(c.battery_at_charge)
           << '\n';
    }
    if (!os) throw IoError("write failed: " + path.string());
}

void write_city_json(const std::filesystem::path& path, const std::vector<CommunityArea>& city) {
    nlohmann::json areas = nlohmann::json::array();
    for (const auto& a : city) {
        areas.push_back({{"id", a.id},
                         {"demand_weight", a.demand_weight},
                         {"neighbors", a.neighbors},
                         {"hotspot", a.hotspot}});
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << nlohmann::json{{"communities", areas}}.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + path.string());
}

std::vector<CommunityArea> read_city_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed city file " + path.string() + ": " + e.what());
    }
    std::vector<CommunityArea> city;
    for (const auto& a : j.at("communities")) {
        CommunityArea area;
        area.id = a.at("id").get<int>();
        area.demand_weight = a.at("demand_weight").get<double>();
        area.neighbors = a.at("neighbors").get<std::vector<int>>();
        area.hotspot = a.at("hotspot").get<bool>();
        city.push_back(std::move(area));
    }
    return city;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

bool parse_i64(const std::string& s, int64_t& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

bool parse_f64(const std::string& s, double& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

} // namespace

IngestResult ingest_trips_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());

    std::string line;
    if (!std::getline(is, line)) throw DataError("empty trip CSV: " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kTripCsvHeader)
        throw DataError("trip CSV header mismatch in " + path.string() + "; expected \"" +
                        kTripCsvHeader + "\"");

    IngestResult result;
    std::map<int, int64_t> last_start; // per-EV ordering check, in file order
    size_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        auto reject = [&](int ev, const std::string& msg) {
            result.rejected.push_back(RowError{row, ev, "data row " + std::to_string(row) + ": " + msg});
        };
        if (fields.size() != 8) {
            reject(0, "expected 8 fields, got " + std::to_string(fields.size()));
            continue;
        }
        TripRecord t;
        int64_t ev64 = 0, pickup = 0, dropoff = 0;
        if (!parse_i64(fields[0], ev64) || ev64 <= 0) {
            reject(0, "bad ev_id \"" + fields[0] + "\"");
            continue;
        }
        t.ev_id = static_cast<int>(ev64);
        bool ok = parse_i64(fields[1], pickup) && parse_i64(fields[2], dropoff) &&
                  parse_i64(fields[3], t.start_time) && parse_i64(fields[4], t.duration_s) &&
                  parse_f64(fields[5], t.distance_km) && parse_f64(fields[6], t.battery_before) &&
                  parse_f64(fields[7], t.battery_after);
        if (!ok) {
            reject(t.ev_id, "unparsable numeric field");
            continue;
        }
        t.pickup = static_cast<int>(pickup);
        t.dropoff = static_cast<int>(dropoff);
        if (t.pickup <= 0 || t.dropoff <= 0) {
            reject(t.ev_id, "community ids must be positive");
            continue;
        }
        if (t.duration_s <= 0) {
            reject(t.ev_id, "duration_s must be positive");
            continue;
        }
        if (t.distance_km < 0.0) {
            reject(t.ev_id, "distance_km must be >= 0");
            continue;
        }
        if (t.battery_before < 0.0 || t.battery_before > 1.0 || t.battery_after < 0.0 ||
            t.battery_after > 1.0) {
            reject(t.ev_id, "battery values must lie in [0, 1]");
            continue;
        }
        if (t.battery_after > t.battery_before) {
            reject(t.ev_id, "battery_after exceeds battery_before");
            continue;
        }
        auto it = last_start.find(t.ev_id);
        if (it != last_start.end() && t.start_time <= it->second) {
            reject(t.ev_id, "non-monotone timestamps for ev_id " + std::to_string(t.ev_id));
            continue;
        }
        last_start[t.ev_id] = t.start_time;
        result.records.push_back(t);
    }
    std::stable_sort(result.records.begin(), result.records.end(),
                     [](const TripRecord& a, const TripRecord& b) {
                         if (a.ev_id != b.ev_id) return a.ev_id < b.ev_id;
                         return a.start_time < b.start_time;
                     });
    return result;
}

// --- classification and dwell -------------------------------------------

MobilityClass classify_mobility(int ev_id, std::span<const TripRecord> trips, int64_t window_start,
                                int64_t window_end, double tau) {
    if (window_end <= window_start) throw ConfigError("classify_mobility: empty window");
    MobilityClass out;
    out.ev_id = ev_id;
    out.window_start = window_start;
    out.window_end = window_end;

    size_t total = 0;
    std::map<int, size_t> same_counts;
    for (const auto& t : trips) {
        if (t.start_time < window_start || t.start_time > window_end) continue;
        ++total;
        if (t.pickup == t.dropoff) ++same_counts[t.dropoff];
    }
    if (total == 0) return out; // no trips in window: transitory by convention

    size_t best = 0, ties = 0;
    for (const auto& [community, count] : same_counts) {
        if (count > best) {
            best = count;
            ties = 1;
        } else if (count == best) {
            ++ties;
        }
    }
    out.same_community_fraction = static_cast<double>(best) / static_cast<double>(total);
    if (best > 0 && ties == 1 && out.same_community_fraction >= tau)
        out.kind = MobilityKind::non_transitory;
    return out;
}

std::vector<int> locations_by_day(std::span<const TripRecord> trips, int initial_community,
                                  int horizon_days) {
    std::vector<int> loc(static_cast<size_t>(horizon_days));
    int current = initial_community;
    size_t i = 0;
    for (int day = 1; day <= horizon_days; ++day) {
        int64_t day_end = static_cast<int64_t>(day) * kSecondsPerDay;
        while (i < trips.size() && trips[i].start_time + trips[i].duration_s <= day_end) {
            current = trips[i].dropoff;
            ++i;
        }
        loc[static_cast<size_t>(day - 1)] = current;
    }
    return loc;
}

std::vector<DwellRun> dwell_durations(const FleetData& fleet) {
    std::vector<DwellRun> runs;
    for (int ev = 1; ev <= fleet.ev_count; ++ev) {
        auto loc = locations_by_day(fleet.trips_of(ev), fleet.initial_community[static_cast<size_t>(ev - 1)],
                                    fleet.horizon_days);
        int len = 0;
        for (size_t d = 0; d < loc.size(); ++d) {
            ++len;
            if (d + 1 == loc.size() || loc[d + 1] != loc[d]) {
                runs.push_back(DwellRun{ev, len});
                len = 0;
            }
        }
    }
    return runs;
}

} // namespace fedmob::mobility
