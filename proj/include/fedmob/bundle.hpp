#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedmob {

// Flattened model parameters with layer metadata. Two bundles may be
// combined (added, averaged, exchanged) only when their layout
// fingerprints match.
class WeightBundle {
public:
    struct Layer {
        std::string name;
        std::vector<size_t> shape;
        size_t offset = 0;
        size_t size = 0;
    };

    WeightBundle() = default;

    static WeightBundle with_layout(std::vector<std::pair<std::string, std::vector<size_t>>> layers,
                                    uint32_t version = 1);

    const std::vector<Layer>& layers() const { return layers_; }
    size_t param_count() const { return values_.size(); }
    uint32_t version() const { return version_; }

    // 64-bit hash of the layout (names, shapes, version). Value-independent.
    uint64_t fingerprint() const { return fingerprint_; }
    // 64-bit hash over the value bits; changes whenever any weight changes.
    uint64_t content_hash() const;

    bool same_layout(const WeightBundle& other) const { return fingerprint_ == other.fingerprint_; }
    // Throws IncompatibleWeightsError when layouts differ.
    void require_same_layout(const WeightBundle& other, std::string_view context) const;

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::span<double> layer_values(std::string_view name);
    std::span<const double> layer_values(std::string_view name) const;
    const Layer& layer(std::string_view name) const;

    void fill(double v);
    void scale(double s);
    // this += s * other (layouts must match)
    void add_scaled(const WeightBundle& other, double s);

    bool bitwise_equal(const WeightBundle& other) const;

    // Binary container: layout header followed by little-endian 64-bit floats.
    void save(const std::filesystem::path& path) const;
    static WeightBundle load(const std::filesystem::path& path);
    // Human-readable layout sidecar (JSON text).
    std::string layout_json() const;

private:
    std::vector<Layer> layers_;
    std::vector<double> values_;
    uint32_t version_ = 1;
    uint64_t fingerprint_ = 0;

    void recompute_fingerprint();
};

} // namespace fedmob
