#include "fedmob/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "fedmob/errors.hpp"
#include "fedmob/toml.hpp"

namespace fedmob {

namespace {

constexpr double kMinRangeKm = 143.0;
constexpr double kMaxRangeKm = 416.0;

class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected a table");
    }

    ~Section() = default;

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    const nlohmann::json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    int64_t integer(const std::string& key, int64_t fallback) {
        if (!has(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
        return v.get<int64_t>();
    }

    double real(const std::string& key, double fallback) {
        if (!has(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
        return v.get<double>();
    }

    bool boolean(const std::string& key, bool fallback) {
        if (!has(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_boolean()) throw ConfigError(at(key) + ": expected true or false");
        return v.get<bool>();
    }

    std::string text(const std::string& key, std::string fallback) {
        if (!has(key)) return fallback;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
        return v.get<std::string>();
    }

    std::string at(const std::string& key) const { return path_ + "." + key; }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key))
                throw ConfigError("unknown key \"" + path_ + "." + key + "\" in run config");
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

const nlohmann::json kEmptyObject = nlohmann::json::object();

const nlohmann::json& subsection(Section& parent, const std::string& key) {
    if (!parent.has(key)) return kEmptyObject;
    const auto& v = parent.raw(key);
    if (!v.is_object()) throw ConfigError("[" + key + "]: expected a table");
    return v;
}

} // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    Section root(j, "config");

    {
        int64_t seed = root.integer("seed", 1);
        if (seed < 0) throw ConfigError("seed must be >= 0");
        cfg.seed = static_cast<uint64_t>(seed);
        cfg.threads = static_cast<int>(root.integer("threads", 1));
        cfg.out_dir = root.text("out_dir", cfg.out_dir);
    }

    {
        Section city(subsection(root, "city"), "city");
        cfg.city.communities = static_cast<int>(city.integer("communities", cfg.city.communities));
        cfg.city.hotspots = static_cast<int>(city.integer("hotspots", cfg.city.hotspots));
        cfg.city.hotspot_demand_ratio = city.real("hotspot_demand_ratio", cfg.city.hotspot_demand_ratio);
        cfg.gen.ev_count = static_cast<int>(city.integer("ev_count", cfg.gen.ev_count));
        cfg.gen.horizon_days = static_cast<int>(city.integer("horizon_days", cfg.gen.horizon_days));
        cfg.gen.charge_threshold = city.real("charge_threshold", cfg.gen.charge_threshold);
        if (city.has("ev_models")) {
            const auto& models = city.raw("ev_models");
            if (!models.is_array() || models.empty())
                throw ConfigError("city.ev_models: expected a non-empty array");
            for (const auto& m : models) {
                Section ms(m, "city.ev_models[]");
                std::string name = ms.text("name", "");
                double range = ms.real("range_km", 0.0);
                ms.finish();
                if (name.empty()) throw ConfigError("city.ev_models[]: name required");
                cfg.ev_models.push_back(mobility::make_profile(name, range));
            }
        } else {
            cfg.ev_models = mobility::default_ev_models();
        }
        city.finish();
    }

    {
        Section mob(subsection(root, "mobility"), "mobility");
        cfg.gen.trips_per_day = static_cast<int>(mob.integer("trips_per_day", cfg.gen.trips_per_day));
        cfg.gen.non_transitory_fraction =
            mob.real("non_transitory_fraction", cfg.gen.non_transitory_fraction);
        cfg.gen.same_community_prob = mob.real("same_community_prob", cfg.gen.same_community_prob);
        cfg.gen.neighbor_bias = mob.real("neighbor_bias", cfg.gen.neighbor_bias);
        cfg.gen.idle_fraction = mob.real("idle_fraction", cfg.gen.idle_fraction);
        cfg.gen.classification_tau = mob.real("classification_tau", cfg.gen.classification_tau);
        mob.finish();
    }

    {
        Section mdl(subsection(root, "model"), "model");
        std::string preset = mdl.text("preset", "desk");
        if (preset == "paper") {
            cfg.model = model::paper_scale_config();
        } else if (preset != "desk") {
            throw ConfigError("model.preset must be \"desk\" or \"paper\"");
        }
        cfg.model.d_model = static_cast<int>(mdl.integer("d_model", cfg.model.d_model));
        cfg.model.n_layers = static_cast<int>(mdl.integer("n_layers", cfg.model.n_layers));
        cfg.model.n_heads = static_cast<int>(mdl.integer("n_heads", cfg.model.n_heads));
        cfg.model.d_ff = static_cast<int>(mdl.integer("d_ff", cfg.model.d_ff));
        cfg.model.dropout = mdl.real("dropout", cfg.model.dropout);
        cfg.model.max_len = static_cast<int>(mdl.integer("max_len", cfg.model.max_len));
        cfg.tokenizer.window_len = static_cast<int>(mdl.integer("window_len", cfg.tokenizer.window_len));
        cfg.tokenizer.battery_buckets =
            static_cast<int>(mdl.integer("battery_buckets", cfg.tokenizer.battery_buckets));
        mdl.finish();
    }
    cfg.tokenizer.communities = cfg.city.communities;
    if (cfg.model.max_len < cfg.tokenizer.window_len) cfg.model.max_len = cfg.tokenizer.window_len;

    {
        Section opt(subsection(root, "optimizer"), "optimizer");
        cfg.optimizer.lr = opt.real("lr", cfg.optimizer.lr);
        cfg.optimizer.beta1 = opt.real("beta1", cfg.optimizer.beta1);
        cfg.optimizer.beta2 = opt.real("beta2", cfg.optimizer.beta2);
        cfg.optimizer.epsilon = opt.real("epsilon", cfg.optimizer.epsilon);
        cfg.optimizer.batch_floor = static_cast<int>(opt.integer("batch_floor", cfg.optimizer.batch_floor));
        cfg.optimizer.epochs_per_round =
            static_cast<int>(opt.integer("epochs_per_round", cfg.optimizer.epochs_per_round));
        cfg.optimizer.train_fraction = opt.real("train_fraction", cfg.optimizer.train_fraction);
        opt.finish();
    }

    {
        Section fedc(subsection(root, "federation"), "federation");
        cfg.federation.rounds = static_cast<int>(fedc.integer("rounds", cfg.federation.rounds));
        cfg.federation.aug.alpha = fedc.real("alpha", cfg.federation.aug.alpha);
        cfg.federation.aug.normalize = fedc.boolean("normalize", cfg.federation.aug.normalize);
        cfg.federation.aug.noise_sigma = fedc.real("noise_sigma", cfg.federation.aug.noise_sigma);
        cfg.federation.aug.min_group_size =
            static_cast<int>(fedc.integer("min_group_size", cfg.federation.aug.min_group_size));
        cfg.federation.weighting =
            fed::parse_weighting(fedc.text("weighting", fed::to_string(cfg.federation.weighting)));
        cfg.federation.mode = fed::parse_mode(fedc.text("mode", fed::to_string(cfg.federation.mode)));
        fedc.finish();
    }

    {
        Section priv(subsection(root, "privacy"), "privacy");
        cfg.privacy_bins = static_cast<int>(priv.integer("bins", cfg.privacy_bins));
        priv.finish();
    }

    {
        Section exp(subsection(root, "experiment"), "experiment");
        cfg.experiment.name = exp.text("name", cfg.experiment.name);
        cfg.experiment.rounds = static_cast<int>(exp.integer("rounds", cfg.federation.rounds));
        cfg.experiment.communities_per_group =
            static_cast<int>(exp.integer("communities_per_group", cfg.experiment.communities_per_group));
        if (exp.has("modes")) {
            const auto& modes = exp.raw("modes");
            if (!modes.is_array() || modes.empty())
                throw ConfigError("experiment.modes: expected a non-empty array");
            cfg.experiment.modes.clear();
            for (const auto& m : modes) {
                if (!m.is_string()) throw ConfigError("experiment.modes: expected strings");
                cfg.experiment.modes.push_back(fed::parse_mode(m.get<std::string>()));
            }
        } else {
            cfg.experiment.modes = {cfg.federation.mode};
        }
        if (exp.has("ev_counts")) {
            const auto& counts = exp.raw("ev_counts");
            if (!counts.is_array() || counts.empty())
                throw ConfigError("experiment.ev_counts: expected a non-empty array");
            cfg.experiment.ev_counts.clear();
            for (const auto& c : counts) {
                if (!c.is_number_integer()) throw ConfigError("experiment.ev_counts: expected integers");
                cfg.experiment.ev_counts.push_back(c.get<int>());
            }
        }
        if (exp.has("charge_levels")) {
            const auto& levels = exp.raw("charge_levels");
            if (!levels.is_array() || levels.empty())
                throw ConfigError("experiment.charge_levels: expected a non-empty array");
            cfg.experiment.charge_levels.clear();
            for (const auto& l : levels) {
                if (!l.is_number()) throw ConfigError("experiment.charge_levels: expected numbers");
                cfg.experiment.charge_levels.push_back(l.get<double>());
            }
        }
        if (exp.has("seeds")) {
            const auto& seeds = exp.raw("seeds");
            if (!seeds.is_array() || seeds.empty())
                throw ConfigError("experiment.seeds: expected a non-empty array");
            cfg.experiment.seeds.clear();
            for (const auto& s : seeds) {
                if (!s.is_number_integer() || s.get<int64_t>() < 0)
                    throw ConfigError("experiment.seeds: expected non-negative integers");
                cfg.experiment.seeds.push_back(static_cast<uint64_t>(s.get<int64_t>()));
            }
        }
        exp.finish();
    }

    root.finish();
    cfg.validate();
    return cfg;
}

void RunConfig::validate() const {
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (city.communities < 2) throw ConfigError("city.communities must be >= 2");
    if (city.hotspots < 0 || city.hotspots > city.communities)
        throw ConfigError("city.hotspots must lie in [0, communities]");
    if (city.hotspot_demand_ratio < 0.0 || city.hotspot_demand_ratio >= 1.0)
        throw ConfigError("city.hotspot_demand_ratio must lie in [0, 1)");
    if (gen.ev_count < 1) throw ConfigError("city.ev_count must be >= 1");
    if (gen.horizon_days < 1) throw ConfigError("city.horizon_days must be >= 1");
    if (gen.charge_threshold <= 0.0 || gen.charge_threshold >= 1.0)
        throw ConfigError("city.charge_threshold must lie in (0, 1)");
    if (ev_models.empty()) throw ConfigError("city.ev_models must not be empty");
    for (const auto& m : ev_models) {
        if (m.range_km < kMinRangeKm || m.range_km > kMaxRangeKm)
            throw ConfigError("city.ev_models: range_km for \"" + m.name + "\" must lie in [143, 416]");
    }
    if (gen.trips_per_day < 0) throw ConfigError("mobility.trips_per_day must be >= 0");
    for (auto [value, name] : {std::pair<double, const char*>{gen.non_transitory_fraction,
                                                              "mobility.non_transitory_fraction"},
                               {gen.same_community_prob, "mobility.same_community_prob"},
                               {gen.neighbor_bias, "mobility.neighbor_bias"},
                               {gen.idle_fraction, "mobility.idle_fraction"}}) {
        if (value < 0.0 || value > 1.0)
            throw ConfigError(std::string(name) + " must lie in [0, 1]");
    }
    if (gen.classification_tau <= 0.0 || gen.classification_tau > 1.0)
        throw ConfigError("mobility.classification_tau must lie in (0, 1]");

    if (model.d_model < 1 || model.n_layers < 1 || model.n_heads < 1 || model.d_ff < 1)
        throw ConfigError("model dimensions must be positive");
    if (model.d_model % model.n_heads != 0)
        throw ConfigError("model.d_model must be divisible by model.n_heads");
    if (model.dropout < 0.0 || model.dropout >= 1.0)
        throw ConfigError("model.dropout must lie in [0, 1)");
    if (tokenizer.window_len < 1) throw ConfigError("model.window_len must be >= 1");
    if (tokenizer.battery_buckets < 1) throw ConfigError("model.battery_buckets must be >= 1");
    if (model.max_len < tokenizer.window_len)
        throw ConfigError("model.max_len must be >= model.window_len");

    if (optimizer.lr < 0.0) throw ConfigError("optimizer.lr must be >= 0");
    if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 ||
        optimizer.beta2 >= 1.0)
        throw ConfigError("optimizer decay coefficients must lie in [0, 1)");
    if (optimizer.epsilon <= 0.0) throw ConfigError("optimizer.epsilon must be > 0");
    if (optimizer.batch_floor < 1) throw ConfigError("optimizer.batch_floor must be >= 1");
    if (optimizer.epochs_per_round < 1) throw ConfigError("optimizer.epochs_per_round must be >= 1");
    if (optimizer.train_fraction <= 0.0 || optimizer.train_fraction >= 1.0)
        throw ConfigError("optimizer.train_fraction must lie in (0, 1)");

    if (federation.rounds < 1) throw ConfigError("federation.rounds must be >= 1");
    if (federation.aug.alpha < 0.0) throw ConfigError("federation.alpha must be >= 0");
    if (federation.aug.noise_sigma < 0.0) throw ConfigError("federation.noise_sigma must be >= 0");
    if (federation.aug.min_group_size < 2) throw ConfigError("federation.min_group_size must be >= 2");

    if (privacy_bins < 2) throw ConfigError("privacy.bins must be >= 2");

    experiment.validate();
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : ev_models) models.push_back({{"name", m.name}, {"range_km", m.range_km}});
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : experiment.modes) modes.push_back(fed::to_string(m));
    return {
        {"seed", seed},
        {"threads", threads},
        {"out_dir", out_dir},
        {"city",
         {{"communities", city.communities},
          {"hotspots", city.hotspots},
          {"hotspot_demand_ratio", city.hotspot_demand_ratio},
          {"ev_count", gen.ev_count},
          {"horizon_days", gen.horizon_days},
          {"charge_threshold", gen.charge_threshold},
          {"ev_models", models}}},
        {"mobility",
         {{"trips_per_day", gen.trips_per_day},
          {"non_transitory_fraction", gen.non_transitory_fraction},
          {"same_community_prob", gen.same_community_prob},
          {"neighbor_bias", gen.neighbor_bias},
          {"idle_fraction", gen.idle_fraction},
          {"classification_tau", gen.classification_tau}}},
        {"model",
         {{"d_model", model.d_model},
          {"n_layers", model.n_layers},
          {"n_heads", model.n_heads},
          {"d_ff", model.d_ff},
          {"dropout", model.dropout},
          {"max_len", model.max_len},
          {"window_len", tokenizer.window_len},
          {"battery_buckets", tokenizer.battery_buckets}}},
        {"optimizer",
         {{"lr", optimizer.lr},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"epsilon", optimizer.epsilon},
          {"batch_floor", optimizer.batch_floor},
          {"epochs_per_round", optimizer.epochs_per_round},
          {"train_fraction", optimizer.train_fraction}}},
        {"federation",
         {{"rounds", federation.rounds},
          {"alpha", federation.aug.alpha},
          {"normalize", federation.aug.normalize},
          {"noise_sigma", federation.aug.noise_sigma},
          {"min_group_size", federation.aug.min_group_size},
          {"weighting", fed::to_string(federation.weighting)},
          {"mode", fed::to_string(federation.mode)}}},
        {"privacy", {{"bins", privacy_bins}}},
        {"experiment",
         {{"name", experiment.name},
          {"modes", modes},
          {"ev_counts", experiment.ev_counts},
          {"communities_per_group", experiment.communities_per_group},
          {"charge_levels", experiment.charge_levels},
          {"rounds", experiment.rounds},
          {"seeds", experiment.seeds}}},
    };
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return run_config_from_json(parse_toml(ss.str()));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

} // namespace fedmob
