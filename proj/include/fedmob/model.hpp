#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedmob/bundle.hpp"
#include "fedmob/rng.hpp"
#include "fedmob/tokenizer.hpp"

namespace fedmob::model {

struct ModelConfig {
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 64;
    double dropout = 0.0;
    int max_len = 64;
};

// Full-size configuration: six encoder layers with eight attention heads.
ModelConfig paper_scale_config();

// Captured attention probabilities, one flat array per encoder layer with
// layout [batch][head][query][key].
struct ForwardTrace {
    std::vector<std::vector<double>> attention;
};

// Transformer encoder classifier over community areas. Trips enter as
// (pickup, dropoff, battery bucket, cyclical time) tokens; the logit row
// is read from the last sequence position, which is always a real trip
// because sequences are left-padded.
class TransformerClassifier {
public:
    TransformerClassifier(ModelConfig cfg, TokenizerConfig tok);

    const ModelConfig& config() const { return cfg_; }
    const TokenizerConfig& tokenizer() const { return tok_; }
    uint64_t expected_fingerprint() const { return fingerprint_; }
    size_t param_count() const { return param_count_; }

    // Zero-filled bundle with this model's layout.
    WeightBundle empty_bundle() const;
    // Seeded random initialization (normal weights, zero biases, unit norms).
    WeightBundle init_weights(uint64_t seed) const;

    // Evaluation-mode forward; returns logits, row-major batch x communities.
    std::vector<double> forward(const WeightBundle& weights, const SampleBatch& batch,
                                ForwardTrace* trace = nullptr) const;

    struct LossGrad {
        double loss = 0.0;
        WeightBundle grad;
    };
    // Mean categorical cross-entropy and exact gradients for every
    // parameter. Dropout is active only when a generator is supplied.
    LossGrad loss_and_grad(const WeightBundle& weights, const SampleBatch& batch,
                           Rng* dropout_rng = nullptr) const;

    double evaluate_batches(const WeightBundle& weights, std::span<const SampleBatch> batches,
                            std::vector<uint8_t>* correct = nullptr) const;
    double evaluate(const WeightBundle& weights, std::span<const Sample> samples,
                    std::vector<uint8_t>* correct = nullptr) const;

private:
    ModelConfig cfg_;
    TokenizerConfig tok_;
    std::vector<double> positional_; // max_len x d_model
    std::vector<std::pair<std::string, std::vector<size_t>>> layout_;
    uint64_t fingerprint_ = 0;
    size_t param_count_ = 0;

    struct Workspace;
    void run_forward(const WeightBundle& weights, const SampleBatch& batch, Workspace& ws,
                     bool training, Rng* dropout_rng, ForwardTrace* trace) const;
    void run_backward(const WeightBundle& weights, const SampleBatch& batch, Workspace& ws,
                      WeightBundle& grad) const;
    void check_batch(const SampleBatch& batch) const;
};

} // namespace fedmob::model
