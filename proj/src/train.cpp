#include "fedmob/train.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "fedmob/errors.hpp"
#include "fedmob/rng.hpp"

namespace fedmob::model {

AdamOptimizer::AdamOptimizer(const OptimizerConfig& cfg, size_t param_count)
    : cfg_(cfg), m_(param_count, 0.0), v_(param_count, 0.0) {
    if (cfg_.lr < 0.0) throw ConfigError("optimizer: lr must be >= 0");
    if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
        throw ConfigError("optimizer: decay coefficients must lie in [0, 1)");
    if (cfg_.epsilon <= 0.0) throw ConfigError("optimizer: epsilon must be > 0");
}

void AdamOptimizer::step(WeightBundle& weights, const WeightBundle& grad) {
    weights.require_same_layout(grad, "optimizer step");
    if (weights.param_count() != m_.size()) throw DataError("optimizer: parameter count changed");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto w = weights.values();
    auto g = grad.values();
    for (size_t i = 0; i < w.size(); ++i) {
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g[i];
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        double mhat = m_[i] / bc1;
        double vhat = v_[i] / bc2;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
}

WeightBundle train_local(const TransformerClassifier& model, WeightBundle weights,
                         std::span<const SampleBatch> data, int epochs, const OptimizerConfig& opt,
                         uint64_t seed, TrainReport* report) {
    if (epochs < 1) throw ConfigError("train_local: epochs must be >= 1");
    if (data.empty()) throw DataError("train_local: no training batches");

    AdamOptimizer adam(opt, weights.param_count());
    const bool dropout = model.config().dropout > 0.0;
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, "train.shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        Rng dropout_rng(derive_seed(seed, "train.dropout", static_cast<uint64_t>(epoch)));
        double loss_sum = 0.0;
        for (size_t bi : order) {
            TransformerClassifier::LossGrad lg;
            try {
                lg = model.loss_and_grad(weights, data[bi], dropout ? &dropout_rng : nullptr);
            } catch (const NumericError& e) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ": " +
                                   e.what());
            }
            loss_sum += lg.loss;
            adam.step(weights, lg.grad);
        }
        if (report) report->epoch_loss.push_back(loss_sum / static_cast<double>(data.size()));
    }
    if (report) report->final_train_accuracy = model.evaluate_batches(weights, data);
    return weights;
}

} // namespace fedmob::model
