#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedmob/bundle.hpp"
#include "fedmob/model.hpp"

namespace fedmob::model {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_floor = 64; // lower bound for the default batch size
    int epochs_per_round = 1;
    double train_fraction = 0.8;
};

// Adaptive moment estimation over a bundle's flat parameter vector.
class AdamOptimizer {
public:
    AdamOptimizer(const OptimizerConfig& cfg, size_t param_count);
    void step(WeightBundle& weights, const WeightBundle& grad);

private:
    OptimizerConfig cfg_;
    std::vector<double> m_, v_;
    int64_t t_ = 0;
};

struct TrainReport {
    std::vector<double> epoch_loss;   // mean batch loss per epoch
    double final_train_accuracy = 0.0;
};

// Local training: a fresh optimizer per call, batch order reshuffled each
// epoch from the seed. Deterministic given (weights, data, seed).
WeightBundle train_local(const TransformerClassifier& model, WeightBundle weights,
                         std::span<const SampleBatch> data, int epochs, const OptimizerConfig& opt,
                         uint64_t seed, TrainReport* report = nullptr);

} // namespace fedmob::model
