#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmob/federation.hpp"
#include "fedmob/harness.hpp"
#include "fedmob/mobility.hpp"
#include "fedmob/model.hpp"
#include "fedmob/train.hpp"

namespace fedmob {

// Everything a run needs, parsed strictly: unknown keys and out-of-range
// values abort before any work starts.
struct RunConfig {
    uint64_t seed = 1;
    int threads = 1;
    std::string out_dir = "runs/out";

    mobility::CityConfig city;
    mobility::GeneratorConfig gen;
    std::vector<mobility::EvModelProfile> ev_models; // defaults to the nine built-ins

    model::TokenizerConfig tokenizer;
    model::ModelConfig model;
    model::OptimizerConfig optimizer;

    fed::FederationConfig federation;
    int privacy_bins = 64;

    harness::ExperimentSpec experiment;

    void validate() const;
    nlohmann::json to_json() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace fedmob
