#include "fedmob/harness.hpp"

#include <algorithm>
#include <cmath>

#include "fedmob/config.hpp"
#include "fedmob/errors.hpp"
#include "fedmob/log.hpp"
#include "fedmob/rng.hpp"

namespace fedmob::harness {

void ExperimentSpec::validate() const {
    if (name.empty()) throw ConfigError("experiment.name must not be empty");
    if (modes.empty()) throw ConfigError("experiment.modes must not be empty");
    if (ev_counts.empty()) throw ConfigError("experiment.ev_counts must not be empty");
    for (size_t i = 0; i < ev_counts.size(); ++i) {
        if (ev_counts[i] < 1) throw ConfigError("experiment.ev_counts entries must be >= 1");
        if (i > 0 && ev_counts[i] <= ev_counts[i - 1])
            throw ConfigError("experiment.ev_counts must be strictly ascending");
    }
    if (communities_per_group < 1) throw ConfigError("experiment.communities_per_group must be >= 1");
    if (charge_levels.empty()) throw ConfigError("experiment.charge_levels must not be empty");
    for (size_t i = 0; i < charge_levels.size(); ++i) {
        if (charge_levels[i] <= 0.0 || charge_levels[i] > 1.0)
            throw ConfigError("experiment.charge_levels must lie in (0, 1]");
        if (i > 0 && charge_levels[i] <= charge_levels[i - 1])
            throw ConfigError("experiment.charge_levels must be strictly ascending");
    }
    if (rounds < 1) throw ConfigError("experiment.rounds must be >= 1");
    if (seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
}

std::map<int, size_t> trip_density(std::span<const mobility::TripRecord> trips) {
    std::map<int, size_t> density;
    for (const auto& t : trips) {
        ++density[t.pickup];
        ++density[t.dropoff];
    }
    return density;
}

CommunityGrouping sample_community_groups(const std::vector<mobility::CommunityArea>& city,
                                          const std::map<int, size_t>& density, int groups,
                                          int per_group, uint64_t seed) {
    if (groups < 1) throw ConfigError("sample_community_groups: groups must be >= 1");
    if (per_group < 1) throw ConfigError("sample_community_groups: per_group must be >= 1");
    if (static_cast<size_t>(groups) > city.size())
        throw ConfigError("sample_community_groups: more groups than communities");

    // Rank by descending trip density; ties broken by community id so the
    // ranking is total and deterministic.
    std::vector<std::pair<size_t, int>> ranked;
    ranked.reserve(city.size());
    for (const auto& area : city) {
        auto it = density.find(area.id);
        ranked.emplace_back(it == density.end() ? 0 : it->second, area.id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    CommunityGrouping grouping;
    size_t n = ranked.size();
    size_t base = n / static_cast<size_t>(groups);
    size_t extra = n % static_cast<size_t>(groups);
    size_t cursor = 0;
    for (int g = 0; g < groups; ++g) {
        size_t len = base + (static_cast<size_t>(g) < extra ? 1 : 0);
        std::vector<int> band;
        for (size_t i = 0; i < len; ++i) band.push_back(ranked[cursor++].second);
        if (static_cast<size_t>(per_group) > band.size())
            throw ConfigError("sample_community_groups: per_group exceeds band size " +
                              std::to_string(band.size()));
        grouping.bands.push_back(band);
    }

    Rng rng(derive_seed(seed, "community.sampling"));
    for (const auto& band : grouping.bands) {
        std::vector<int> pool = band;
        std::vector<int> chosen;
        for (int k = 0; k < per_group; ++k) {
            size_t j = static_cast<size_t>(
                rng.uniform_int(static_cast<int64_t>(k), static_cast<int64_t>(pool.size()) - 1));
            std::swap(pool[static_cast<size_t>(k)], pool[j]);
            chosen.push_back(pool[static_cast<size_t>(k)]);
        }
        std::sort(chosen.begin(), chosen.end());
        grouping.sampled.push_back(std::move(chosen));
    }
    return grouping;
}

double mean(std::span<const double> values) {
    if (values.empty()) throw DataError("mean of empty set");
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}

double population_std(std::span<const double> values) {
    if (values.empty()) throw DataError("std of empty set");
    double mu = mean(values);
    double acc = 0.0;
    for (double v : values) acc += (v - mu) * (v - mu);
    return std::sqrt(acc / static_cast<double>(values.size()));
}

ResultRow ResultRow::from(std::string label, std::vector<int> communities,
                          std::vector<double> accuracies) {
    if (accuracies.empty()) throw DataError("result row with no accuracies");
    ResultRow row;
    row.label = std::move(label);
    row.communities = std::move(communities);
    row.accuracies = std::move(accuracies);
    row.average = mean(row.accuracies);
    row.std_dev = population_std(row.accuracies);
    row.min = *std::min_element(row.accuracies.begin(), row.accuracies.end());
    row.max = *std::max_element(row.accuracies.begin(), row.accuracies.end());
    return row;
}

size_t charge_level_slice(double battery, std::span<const double> levels) {
    if (levels.empty()) throw ConfigError("charge_level_slice: no levels");
    for (size_t i = 0; i < levels.size(); ++i) {
        if (battery <= levels[i]) return i;
    }
    return levels.size() - 1; // battery above the last level: top slice
}

// --- simulation assembly ----------------------------------------------------

SimSetup build_simulation(const RunConfig& cfg, uint64_t seed) {
    SimSetup setup;
    setup.city = mobility::generate_city(cfg.city, seed);
    setup.fleet = mobility::generate_trips(setup.city, cfg.ev_models, cfg.gen, seed);
    setup.tokenizer = cfg.tokenizer;
    setup.model_cfg = cfg.model;

    const int64_t window_end = static_cast<int64_t>(cfg.gen.horizon_days) * mobility::kSecondsPerDay;
    for (int ev = 1; ev <= cfg.gen.ev_count; ++ev) {
        fed::EvAgent agent;
        agent.id = ev;
        agent.model_name = setup.fleet.ev_model[static_cast<size_t>(ev - 1)];
        auto trips = setup.fleet.trips_of(ev);
        auto charges = setup.fleet.charges_of(ev);
        agent.trips.assign(trips.begin(), trips.end());
        agent.charges.assign(charges.begin(), charges.end());
        auto samples = model::build_samples(agent.trips, agent.charges, setup.tokenizer);
        auto [train, test] = model::split_chronological(std::move(samples), cfg.optimizer.train_fraction);
        agent.train_samples = std::move(train);
        agent.test_samples = std::move(test);
        if (!agent.train_samples.empty()) {
            int batch = model::default_batch_size(agent.train_samples.size(), cfg.optimizer.batch_floor);
            agent.train_batches = model::make_batches(agent.train_samples, batch);
        }
        agent.location_by_day = mobility::locations_by_day(
            agent.trips, setup.fleet.initial_community[static_cast<size_t>(ev - 1)],
            cfg.gen.horizon_days);
        agent.classification =
            mobility::classify_mobility(ev, agent.trips, 0, window_end, cfg.gen.classification_tau);
        setup.train_samples += agent.train_samples.size();
        setup.test_samples += agent.test_samples.size();
        setup.agents.push_back(std::move(agent));
    }
    log::info("simulation: %zu trips, %zu charges, %zu train / %zu test samples",
              setup.fleet.trips.size(), setup.fleet.charges.size(), setup.train_samples,
              setup.test_samples);
    return setup;
}

fed::FederationEngine make_engine(const RunConfig& cfg, SimSetup& setup, uint64_t seed) {
    model::TransformerClassifier classifier(setup.model_cfg, setup.tokenizer);
    fed::EngineConfig engine_cfg;
    engine_cfg.fed = cfg.federation;
    engine_cfg.opt = cfg.optimizer;
    engine_cfg.privacy_bins = cfg.privacy_bins;
    engine_cfg.threads = cfg.threads;
    return fed::FederationEngine(setup.city, std::move(setup.agents), std::move(classifier),
                                 engine_cfg, seed);
}

double run_centralized_baseline(const model::TransformerClassifier& model,
                                std::span<const model::Sample> train,
                                std::span<const model::Sample> test,
                                const model::OptimizerConfig& opt, int epochs, uint64_t seed,
                                std::vector<uint8_t>* correct) {
    if (train.empty()) throw DataError("centralized baseline: no training samples");
    if (test.empty()) throw DataError("centralized baseline: no test samples");
    int batch = model::default_batch_size(train.size(), opt.batch_floor);
    auto batches = model::make_batches(train, batch);
    WeightBundle w = model.init_weights(derive_seed(seed, "centralized.init"));
    w = model::train_local(model, std::move(w), batches, epochs, opt,
                           derive_seed(seed, "centralized.train"));
    return model.evaluate(w, test, correct);
}

// --- sweeps ------------------------------------------------------------------

namespace {

struct CellRun {
    std::map<int, double> community_accuracy;          // final-round accuracy per community
    std::map<int, std::vector<size_t>> member_agents;  // community -> agent indices
    std::vector<fed::EvAgent> agents;                  // engine state after the last round
    std::map<int, WeightBundle> thetas;
    int final_day = 0;
};

// Runs one federated simulation cell and keeps what the sweeps score.
CellRun run_federated_cell(const RunConfig& cfg, fed::Mode mode, int ev_count, int rounds,
                           uint64_t seed) {
    RunConfig cell_cfg = cfg;
    cell_cfg.gen.ev_count = ev_count;
    cell_cfg.federation.rounds = rounds;
    cell_cfg.federation.mode = mode;
    SimSetup setup = build_simulation(cell_cfg, seed);
    auto engine = make_engine(cell_cfg, setup, seed);
    fed::RoundReport last;
    for (int r = 0; r < rounds; ++r) last = engine.run_round();

    CellRun out;
    out.final_day = last.day;
    for (const auto& stat : last.communities)
        if (stat.accuracy >= 0.0) out.community_accuracy[stat.community] = stat.accuracy;
    for (size_t i = 0; i < engine.agents().size(); ++i) {
        const auto& agent = engine.agents()[i];
        if (agent.train_batches.empty() || agent.test_samples.empty()) continue;
        int community = agent.location_by_day[static_cast<size_t>(last.day - 1)];
        out.member_agents[community].push_back(i);
    }
    out.agents = engine.agents();
    out.thetas = engine.community_models();
    return out;
}

} // namespace

SweepResult run_ev_count_sweep(const RunConfig& cfg, const ExperimentSpec& spec) {
    spec.validate();
    SweepResult result;
    const int groups = static_cast<int>(spec.ev_counts.size());

    for (fed::Mode mode : spec.modes) {
        for (size_t row_idx = 0; row_idx < spec.ev_counts.size(); ++row_idx) {
            int ev_count = spec.ev_counts[row_idx];
            std::vector<double> row_accs;
            std::vector<int> row_comms;
            for (uint64_t seed : spec.seeds) {
                RunConfig cell_cfg = cfg;
                cell_cfg.gen.ev_count = ev_count;
                SimSetup probe = build_simulation(cell_cfg, seed);
                auto density = trip_density(probe.fleet.trips);
                auto grouping = sample_community_groups(probe.city, density, groups,
                                                        spec.communities_per_group,
                                                        derive_seed(seed, "sweep.grouping"));
                const auto& communities = grouping.sampled[row_idx];

                if (mode == fed::Mode::centralized) {
                    // Per community: pool its members' data into one model.
                    int day = (spec.rounds - 1) % probe.fleet.horizon_days + 1;
                    model::TransformerClassifier classifier(probe.model_cfg, probe.tokenizer);
                    for (int community : communities) {
                        std::vector<model::Sample> train, test;
                        for (const auto& agent : probe.agents) {
                            if (agent.train_samples.empty()) continue;
                            if (agent.location_by_day[static_cast<size_t>(day - 1)] != community)
                                continue;
                            train.insert(train.end(), agent.train_samples.begin(),
                                         agent.train_samples.end());
                            test.insert(test.end(), agent.test_samples.begin(),
                                        agent.test_samples.end());
                        }
                        if (train.empty() || test.empty()) continue; // missing cell
                        double acc = run_centralized_baseline(
                            classifier, train, test, cfg.optimizer,
                            spec.rounds * cfg.optimizer.epochs_per_round, seed);
                        result.cells.push_back(
                            AccuracyCell{fed::to_string(mode), ev_count, community, acc, seed});
                        row_accs.push_back(acc);
                        row_comms.push_back(community);
                    }
                } else {
                    CellRun cell = run_federated_cell(cfg, mode, ev_count, spec.rounds, seed);
                    for (int community : communities) {
                        auto it = cell.community_accuracy.find(community);
                        if (it == cell.community_accuracy.end()) continue; // missing cell
                        result.cells.push_back(AccuracyCell{fed::to_string(mode), ev_count,
                                                            community, it->second, seed});
                        row_accs.push_back(it->second);
                        row_comms.push_back(community);
                    }
                }
            }
            if (row_accs.empty()) continue;
            auto row = ResultRow::from(fed::to_string(mode) + "/" + std::to_string(ev_count) + "ev",
                                       row_comms, row_accs);
            result.summary.push_back(SummaryRow{fed::to_string(mode), ev_count, row.average,
                                                row.std_dev, row.min, row.max});
            result.rows.push_back(std::move(row));
        }
    }
    return result;
}

std::vector<ChargeLevelCell> run_charge_level_sweep(const RunConfig& cfg,
                                                    const ExperimentSpec& spec) {
    spec.validate();
    std::vector<ChargeLevelCell> table;
    const auto& levels = spec.charge_levels;
    fed::Mode mode = spec.modes.front();
    if (mode == fed::Mode::centralized) mode = fed::Mode::fltn;

    model::TransformerClassifier classifier(cfg.model, cfg.tokenizer);
    for (int ev_count : spec.ev_counts) {
        // accuracy samples per level, across sampled communities and seeds
        std::vector<std::vector<double>> level_accs(levels.size());
        for (uint64_t seed : spec.seeds) {
            CellRun cell = run_federated_cell(cfg, mode, ev_count, spec.rounds, seed);
            for (const auto& [community, members] : cell.member_agents) {
                auto theta = cell.thetas.find(community);
                if (theta == cell.thetas.end()) continue;
                std::vector<size_t> hits(levels.size(), 0), totals(levels.size(), 0);
                for (size_t idx : members) {
                    const auto& agent = cell.agents[idx];
                    if (agent.test_samples.empty()) continue;
                    std::vector<uint8_t> correct;
                    classifier.evaluate(theta->second, agent.test_samples, &correct);
                    for (size_t s = 0; s < correct.size(); ++s) {
                        size_t slice = charge_level_slice(
                            agent.test_samples[s].battery_at_prediction, levels);
                        ++totals[slice];
                        hits[slice] += correct[s];
                    }
                }
                for (size_t l = 0; l < levels.size(); ++l) {
                    if (totals[l] == 0) continue;
                    level_accs[l].push_back(static_cast<double>(hits[l]) /
                                            static_cast<double>(totals[l]));
                }
            }
        }
        for (size_t l = 0; l < levels.size(); ++l) {
            ChargeLevelCell cell;
            cell.ev_count = ev_count;
            cell.charge_level = levels[l];
            if (!level_accs[l].empty()) {
                cell.missing = false;
                cell.avg = mean(level_accs[l]);
                cell.sd = population_std(level_accs[l]);
                cell.min = *std::min_element(level_accs[l].begin(), level_accs[l].end());
                cell.max = *std::max_element(level_accs[l].begin(), level_accs[l].end());
            }
            table.push_back(cell);
        }
    }
    return table;
}

} // namespace fedmob::harness
