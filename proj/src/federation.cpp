#include "fedmob/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <thread>

#include "fedmob/errors.hpp"
#include "fedmob/hash.hpp"
#include "fedmob/log.hpp"
#include "fedmob/rng.hpp"

namespace fedmob::fed {

std::string to_string(Mode mode) {
    switch (mode) {
    case Mode::fltn: return "fltn";
    case Mode::plain_fl: return "plain_fl";
    case Mode::centralized: return "centralized";
    }
    return "fltn";
}

Mode parse_mode(const std::string& name) {
    if (name == "fltn") return Mode::fltn;
    if (name == "plain_fl") return Mode::plain_fl;
    if (name == "centralized") return Mode::centralized;
    throw ConfigError("unknown federation mode \"" + name + "\" (fltn|plain_fl|centralized)");
}

std::string to_string(Weighting w) {
    return w == Weighting::uniform ? "uniform" : "by_sample_count";
}

Weighting parse_weighting(const std::string& name) {
    if (name == "uniform") return Weighting::uniform;
    if (name == "by_sample_count") return Weighting::by_sample_count;
    throw ConfigError("unknown weighting \"" + name + "\" (uniform|by_sample_count)");
}

std::vector<PeerGroup> form_peer_groups(std::span<const mobility::MobilityClass> classifications,
                                        const std::map<int, int>& community_of_ev,
                                        int min_group_size, int round) {
    if (min_group_size < 2) throw ConfigError("min_group_size must be >= 2");
    std::map<int, std::vector<int>> by_community;
    for (const auto& cls : classifications) {
        if (cls.kind != mobility::MobilityKind::non_transitory) continue;
        auto it = community_of_ev.find(cls.ev_id);
        if (it == community_of_ev.end())
            throw DataError("form_peer_groups: no community assignment for ev " +
                            std::to_string(cls.ev_id));
        by_community[it->second].push_back(cls.ev_id);
    }
    std::vector<PeerGroup> groups;
    for (auto& [community, members] : by_community) {
        if (static_cast<int>(members.size()) < min_group_size) continue; // dissolved: direct share
        std::sort(members.begin(), members.end());
        groups.push_back(PeerGroup{community, std::move(members), round});
    }
    return groups;
}

WeightBundle peer_share(const WeightBundle& own, std::span<const WeightBundle* const> peers,
                        const AugmentationConfig& cfg, uint64_t noise_seed) {
    if (peers.empty())
        throw DataError("peer_share: empty peer list; use direct submission instead");
    if (cfg.alpha < 0.0) throw ConfigError("peer_share: alpha must be >= 0");
    for (const auto* p : peers) own.require_same_layout(*p, "peer_share");

    // Canonical peer order (by content) makes the sum independent of the
    // caller's ordering.
    std::vector<const WeightBundle*> sorted(peers.begin(), peers.end());
    std::vector<uint64_t> hashes(sorted.size());
    for (size_t i = 0; i < sorted.size(); ++i) hashes[i] = sorted[i]->content_hash();
    std::vector<size_t> order(sorted.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return hashes[a] < hashes[b]; });

    WeightBundle out;
    double scale = 1.0 + cfg.alpha * static_cast<double>(peers.size());
    if (cfg.alpha == 1.0 && cfg.normalize) {
        // The normalized equal-alpha case is exactly the group mean; summing
        // the whole group in content order makes every member's result
        // bit-identical.
        std::vector<const WeightBundle*> group(sorted.size() + 1);
        std::vector<uint64_t> ghash(sorted.size() + 1);
        for (size_t i = 0; i < sorted.size(); ++i) {
            group[i] = sorted[i];
            ghash[i] = hashes[i];
        }
        group.back() = &own;
        ghash.back() = own.content_hash();
        std::vector<size_t> gorder(group.size());
        for (size_t i = 0; i < gorder.size(); ++i) gorder[i] = i;
        std::sort(gorder.begin(), gorder.end(),
                  [&](size_t a, size_t b) { return ghash[a] < ghash[b]; });
        out = *group[gorder[0]];
        for (size_t i = 1; i < gorder.size(); ++i) out.add_scaled(*group[gorder[i]], 1.0);
        out.scale(1.0 / scale);
    } else {
        out = own;
        for (size_t i : order) out.add_scaled(*sorted[i], cfg.alpha);
        if (cfg.normalize) out.scale(1.0 / scale);
    }

    if (cfg.noise_sigma > 0.0) {
        Rng rng(noise_seed);
        for (double& v : out.values()) v += rng.normal(0.0, cfg.noise_sigma);
    }
    return out;
}

WeightBundle fed_avg(std::span<const WeightBundle* const> bundles, Weighting weighting,
                     std::span<const size_t> sample_counts) {
    if (bundles.empty()) throw DataError("fed_avg: nothing to aggregate");
    for (const auto* b : bundles) bundles[0]->require_same_layout(*b, "fed_avg");

    WeightBundle out = *bundles[0];
    if (weighting == Weighting::uniform) {
        for (size_t i = 1; i < bundles.size(); ++i) out.add_scaled(*bundles[i], 1.0);
        out.scale(1.0 / static_cast<double>(bundles.size()));
    } else {
        if (sample_counts.size() != bundles.size())
            throw DataError("fed_avg: sample counts do not match bundle count");
        double total = 0.0;
        for (size_t n : sample_counts) total += static_cast<double>(n);
        if (total <= 0.0) throw DataError("fed_avg: zero total sample count");
        out.scale(static_cast<double>(sample_counts[0]));
        for (size_t i = 1; i < bundles.size(); ++i)
            out.add_scaled(*bundles[i], static_cast<double>(sample_counts[i]));
        out.scale(1.0 / total);
    }
    return out;
}

void distribute(const WeightBundle& theta, EvAgent& ev, const mobility::ChargeEvent& at) {
    if (at.ev_id != ev.id)
        throw DataError("distribute: charge event belongs to ev " + std::to_string(at.ev_id) +
                        ", not ev " + std::to_string(ev.id));
    theta.require_same_layout(ev.weights, "distribute");
    ev.weights = theta;
}

// --- round reports --------------------------------------------------------

nlohmann::json RoundReport::to_json() const {
    nlohmann::json j;
    j["round"] = round;
    j["day"] = day;
    j["mode"] = fed::to_string(mode);
    nlohmann::json comms = nlohmann::json::array();
    for (const auto& c : communities) {
        comms.push_back({{"community", c.community},
                         {"submissions", c.submissions},
                         {"peer_groups", c.peer_groups},
                         {"grouped_members", c.grouped_members},
                         {"direct_members", c.direct_members},
                         {"theta_hash", c.theta_hash},
                         {"accuracy", c.accuracy},
                         {"test_samples", c.test_samples}});
    }
    j["communities"] = comms;
    j["overall_accuracy"] = overall_accuracy;
    j["overall_test_samples"] = overall_test_samples;
    nlohmann::json ent = nlohmann::json::array();
    for (const auto& e : submission_entropy)
        ent.push_back({{"layer", e.layer}, {"entropy", e.entropy}, {"bins", e.bins}, {"values", e.values}});
    j["submission_entropy"] = ent;
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [dur, n] : dwell.counts) counts[std::to_string(dur)] = n;
    j["dwell"] = {{"counts", counts},
                  {"runs", dwell.runs},
                  {"median", dwell.median},
                  {"p90", dwell.p90},
                  {"fraction_le2", dwell.fraction_le2}};
    nlohmann::json redis = nlohmann::json::array();
    for (const auto& r : redistributions)
        redis.push_back({{"ev_id", r.ev_id}, {"community", r.community}, {"time", r.time},
                         {"bundle_hash", r.bundle_hash}});
    j["redistributions"] = redis;
    return j;
}

RoundReport RoundReport::from_json(const nlohmann::json& j) {
    RoundReport r;
    r.round = j.at("round").get<int>();
    r.day = j.at("day").get<int>();
    r.mode = parse_mode(j.at("mode").get<std::string>());
    for (const auto& c : j.at("communities")) {
        CommunityRoundStat s;
        s.community = c.at("community").get<int>();
        s.submissions = c.at("submissions").get<int>();
        s.peer_groups = c.at("peer_groups").get<int>();
        s.grouped_members = c.at("grouped_members").get<int>();
        s.direct_members = c.at("direct_members").get<int>();
        s.theta_hash = c.at("theta_hash").get<uint64_t>();
        s.accuracy = c.at("accuracy").get<double>();
        s.test_samples = c.at("test_samples").get<size_t>();
        r.communities.push_back(std::move(s));
    }
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    r.overall_test_samples = j.at("overall_test_samples").get<size_t>();
    for (const auto& e : j.at("submission_entropy")) {
        privacy::LayerEntropy le;
        le.layer = e.at("layer").get<std::string>();
        le.entropy = e.at("entropy").get<double>();
        le.bins = e.at("bins").get<int>();
        le.values = e.at("values").get<size_t>();
        r.submission_entropy.push_back(std::move(le));
    }
    const auto& dw = j.at("dwell");
    for (const auto& [k, v] : dw.at("counts").items())
        r.dwell.counts[std::stoi(k)] = v.get<size_t>();
    r.dwell.runs = dw.at("runs").get<size_t>();
    r.dwell.median = dw.at("median").get<double>();
    r.dwell.p90 = dw.at("p90").get<int>();
    r.dwell.fraction_le2 = dw.at("fraction_le2").get<double>();
    for (const auto& e : j.at("redistributions")) {
        RedistributionEntry re;
        re.ev_id = e.at("ev_id").get<int>();
        re.community = e.at("community").get<int>();
        re.time = e.at("time").get<int64_t>();
        re.bundle_hash = e.at("bundle_hash").get<uint64_t>();
        r.redistributions.push_back(re);
    }
    return r;
}

// --- engine ----------------------------------------------------------------

namespace {

// Deterministic parallel map: results land in agent order regardless of
// scheduling. The first worker exception is rethrown after the join.
void parallel_over(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    int use = std::min<int>(threads, static_cast<int>(n));
    for (int t = 0; t < use; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

uint64_t pack_round_ev(int round, int ev_id) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(round)) << 32) |
           static_cast<uint32_t>(ev_id);
}

std::vector<mobility::DwellRun> dwell_runs_upto(const std::vector<EvAgent>& agents, int day) {
    std::vector<mobility::DwellRun> runs;
    for (const auto& agent : agents) {
        int len = 0;
        int upto = std::min<int>(day, static_cast<int>(agent.location_by_day.size()));
        for (int d = 0; d < upto; ++d) {
            ++len;
            bool boundary = d + 1 == upto ||
                            agent.location_by_day[static_cast<size_t>(d + 1)] !=
                                agent.location_by_day[static_cast<size_t>(d)];
            if (boundary) {
                runs.push_back(mobility::DwellRun{agent.id, len});
                len = 0;
            }
        }
    }
    return runs;
}

} // namespace

FederationEngine::FederationEngine(std::vector<mobility::CommunityArea> city,
                                   std::vector<EvAgent> agents,
                                   model::TransformerClassifier model, EngineConfig cfg,
                                   uint64_t seed)
    : city_(std::move(city)), agents_(std::move(agents)), model_(std::move(model)), cfg_(cfg),
      seed_(seed) {
    if (cfg_.fed.rounds < 1) throw ConfigError("federation: rounds must be >= 1");
    std::sort(agents_.begin(), agents_.end(),
              [](const EvAgent& a, const EvAgent& b) { return a.id < b.id; });
    for (const auto& agent : agents_) {
        if (agent.location_by_day.empty())
            throw DataError("federation: agent " + std::to_string(agent.id) +
                            " has no per-day locations");
        horizon_days_ = std::max<int>(horizon_days_, static_cast<int>(agent.location_by_day.size()));
    }
    // One shared initialization: every community model and every EV starts
    // from the same seeded bundle.
    WeightBundle init = model_.init_weights(derive_seed(seed_, "theta.init"));
    for (const auto& area : city_) theta_.emplace(area.id, init);
    for (auto& agent : agents_) agent.weights = init;
}

RoundReport FederationEngine::run_round() {
    return execute_round(cfg_.fed.mode == Mode::fltn, cfg_.fed.mode);
}

RoundReport FederationEngine::run_plain_fl_round() {
    return execute_round(false, Mode::plain_fl);
}

RoundReport FederationEngine::execute_round(bool augment, Mode label) {
    ++round_;
    const int day = (round_ - 1) % horizon_days_ + 1;
    RoundReport report;
    report.round = round_;
    report.day = day;
    report.mode = label;

    // 1. Local training, one owner per bundle; commit order is agent order.
    std::vector<WeightBundle> trained(agents_.size());
    parallel_over(agents_.size(), cfg_.threads, [&](size_t i) {
        EvAgent& agent = agents_[i];
        if (agent.train_batches.empty()) return;
        uint64_t tseed = derive_seed(seed_, "round.train", pack_round_ev(round_, agent.id));
        try {
            trained[i] = model::train_local(model_, agent.weights, agent.train_batches,
                                            cfg_.opt.epochs_per_round, cfg_.opt, tseed);
        } catch (const Error& e) {
            throw NumericError("round " + std::to_string(round_) + ", ev " +
                               std::to_string(agent.id) + ": " + e.what());
        }
    });
    for (size_t i = 0; i < agents_.size(); ++i) {
        if (!agents_[i].train_batches.empty()) agents_[i].weights = std::move(trained[i]);
    }

    // 2. Assignments and peer groups for this round.
    std::map<int, int> community_of_ev;
    std::vector<mobility::MobilityClass> classifications;
    std::vector<size_t> participants;
    for (size_t i = 0; i < agents_.size(); ++i) {
        const EvAgent& agent = agents_[i];
        if (agent.train_batches.empty()) continue;
        participants.push_back(i);
        community_of_ev[agent.id] = agent.location_by_day[static_cast<size_t>(day - 1)];
        classifications.push_back(agent.classification);
    }

    std::vector<PeerGroup> groups;
    if (augment)
        groups = form_peer_groups(classifications, community_of_ev, cfg_.fed.aug.min_group_size,
                                  round_);
    std::map<int, const PeerGroup*> group_of_ev;
    for (const auto& g : groups)
        for (int ev : g.members) group_of_ev[ev] = &g;

    // 3. Submissions. Inboxes keyed by opaque per-round tokens so the
    //    aggregator cannot link a bundle back to an EV.
    struct Submission {
        uint64_t token;
        const WeightBundle* bundle;
        size_t samples;
    };
    std::map<int, std::vector<Submission>> inbox;
    std::map<int, std::pair<int, int>> member_counts; // community -> (grouped, direct)
    std::vector<WeightBundle> augmented(agents_.size());
    std::map<int, size_t> agent_index;
    for (size_t i = 0; i < agents_.size(); ++i) agent_index[agents_[i].id] = i;

    for (size_t i : participants) {
        EvAgent& agent = agents_[i];
        int community = community_of_ev.at(agent.id);
        const WeightBundle* submitted = &agent.weights;
        auto git = group_of_ev.find(agent.id);
        if (git != group_of_ev.end()) {
            std::vector<const WeightBundle*> peers;
            for (int peer_id : git->second->members) {
                if (peer_id == agent.id) continue;
                peers.push_back(&agents_[agent_index.at(peer_id)].weights);
            }
            uint64_t nseed = derive_seed(seed_, "round.noise", pack_round_ev(round_, agent.id));
            augmented[i] = peer_share(agent.weights, peers, cfg_.fed.aug, nseed);
            submitted = &augmented[i];
            ++member_counts[community].first;
        } else {
            ++member_counts[community].second;
        }
        uint64_t token = derive_seed(seed_, "round.token", pack_round_ev(round_, agent.id));
        inbox[community].push_back(Submission{token, submitted, agent.train_samples.size()});
    }

    // 4. Per-community FedAvg in token order.
    std::vector<const WeightBundle*> all_submissions;
    for (auto& [community, subs] : inbox) {
        std::sort(subs.begin(), subs.end(),
                  [](const Submission& a, const Submission& b) { return a.token < b.token; });
        std::vector<const WeightBundle*> bundles;
        std::vector<size_t> counts;
        for (const auto& s : subs) {
            bundles.push_back(s.bundle);
            counts.push_back(s.samples);
            all_submissions.push_back(s.bundle);
        }
        auto it = theta_.find(community);
        if (it == theta_.end())
            throw DataError("round " + std::to_string(round_) + ": submission for community " +
                            std::to_string(community) + " which is not in the city");
        it->second = fed_avg(bundles, cfg_.fed.weighting, counts);
    }

    // 5. Charge-time redistribution, in event-time order within the day.
    std::vector<std::pair<size_t, const mobility::ChargeEvent*>> todays;
    for (size_t i = 0; i < agents_.size(); ++i) {
        for (const auto& ev : agents_[i].charges) {
            int event_day = static_cast<int>(ev.time / mobility::kSecondsPerDay) + 1;
            if (event_day == day) todays.emplace_back(i, &ev);
        }
    }
    std::sort(todays.begin(), todays.end(), [](const auto& a, const auto& b) {
        if (a.second->time != b.second->time) return a.second->time < b.second->time;
        return a.second->ev_id < b.second->ev_id;
    });
    for (auto& [i, event] : todays) {
        auto it = theta_.find(event->community);
        if (it == theta_.end()) continue;
        distribute(it->second, agents_[i], *event);
        report.redistributions.push_back(RedistributionEntry{
            event->ev_id, event->community, event->time, agents_[i].weights.content_hash()});
    }

    // 6. Report: accuracy per community over its members' held-out samples,
    //    entropy over everything the aggregators saw, dwell so far.
    size_t total_hits = 0, total_samples = 0;
    for (const auto& [community, theta] : theta_) {
        CommunityRoundStat stat;
        stat.community = community;
        auto ib = inbox.find(community);
        stat.submissions = ib == inbox.end() ? 0 : static_cast<int>(ib->second.size());
        for (const auto& g : groups)
            if (g.community == community) ++stat.peer_groups, stat.grouped_members += static_cast<int>(g.members.size());
        auto mc = member_counts.find(community);
        stat.direct_members = mc == member_counts.end() ? 0 : mc->second.second;
        stat.theta_hash = theta.content_hash();

        std::vector<model::Sample> tests;
        for (size_t i : participants) {
            if (community_of_ev.at(agents_[i].id) != community) continue;
            tests.insert(tests.end(), agents_[i].test_samples.begin(), agents_[i].test_samples.end());
        }
        stat.test_samples = tests.size();
        if (!tests.empty()) {
            std::vector<uint8_t> correct;
            stat.accuracy = model_.evaluate(theta, tests, &correct);
            for (uint8_t c : correct) total_hits += c;
            total_samples += correct.size();
        }
        report.communities.push_back(std::move(stat));
    }
    report.overall_test_samples = total_samples;
    if (total_samples > 0)
        report.overall_accuracy = static_cast<double>(total_hits) / static_cast<double>(total_samples);

    if (!all_submissions.empty()) {
        std::vector<privacy::EntropyReport> reports;
        reports.reserve(all_submissions.size());
        for (const auto* b : all_submissions)
            reports.push_back(privacy::layer_entropy(*b, cfg_.privacy_bins));
        for (size_t li = 0; li < reports[0].per_layer.size(); ++li) {
            privacy::LayerEntropy mean = reports[0].per_layer[li];
            for (size_t r = 1; r < reports.size(); ++r) mean.entropy += reports[r].per_layer[li].entropy;
            mean.entropy /= static_cast<double>(reports.size());
            report.submission_entropy.push_back(std::move(mean));
        }
    }

    auto runs = dwell_runs_upto(agents_, day);
    if (!runs.empty()) report.dwell = privacy::turnover_stats(runs);

    log::info("round %d (day %d, %s): %zu submissions, overall accuracy %.4f", round_, day,
              to_string(label).c_str(), all_submissions.size(), report.overall_accuracy);
    return report;
}

} // namespace fedmob::fed
