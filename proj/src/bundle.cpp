#include "fedmob/bundle.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

#include "fedmob/errors.hpp"
#include "fedmob/hash.hpp"

namespace fedmob {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'W', 'B'};
constexpr uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

WeightBundle WeightBundle::with_layout(std::vector<std::pair<std::string, std::vector<size_t>>> layers,
                                       uint32_t version) {
    WeightBundle b;
    b.version_ = version;
    size_t offset = 0;
    for (auto& [name, shape] : layers) {
        if (name.empty()) throw ConfigError("weight bundle: empty layer name");
        size_t n = 1;
        for (size_t d : shape) {
            if (d == 0) throw ConfigError("weight bundle: zero dimension in layer " + name);
            n *= d;
        }
        b.layers_.push_back(Layer{std::move(name), std::move(shape), offset, n});
        offset += n;
    }
    b.values_.assign(offset, 0.0);
    b.recompute_fingerprint();
    return b;
}

void WeightBundle::recompute_fingerprint() {
    uint64_t h = hash_u64(version_);
    for (const auto& l : layers_) {
        h = fnv1a64(l.name, h);
        h = hash_u64(l.shape.size(), h);
        for (size_t d : l.shape) h = hash_u64(d, h);
    }
    fingerprint_ = h;
}

uint64_t WeightBundle::content_hash() const {
    return hash_doubles(values_, hash_u64(fingerprint_));
}

void WeightBundle::require_same_layout(const WeightBundle& other, std::string_view context) const {
    if (!same_layout(other))
        throw IncompatibleWeightsError(std::string(context) + ": weight layout fingerprints differ");
}

std::span<double> WeightBundle::layer_values(std::string_view name) {
    const Layer& l = layer(name);
    return {values_.data() + l.offset, l.size};
}

std::span<const double> WeightBundle::layer_values(std::string_view name) const {
    const Layer& l = layer(name);
    return {values_.data() + l.offset, l.size};
}

const WeightBundle::Layer& WeightBundle::layer(std::string_view name) const {
    for (const auto& l : layers_)
        if (l.name == name) return l;
    throw DataError("weight bundle: no layer named " + std::string(name));
}

void WeightBundle::fill(double v) {
    for (double& x : values_) x = v;
}

void WeightBundle::scale(double s) {
    for (double& x : values_) x *= s;
}

void WeightBundle::add_scaled(const WeightBundle& other, double s) {
    require_same_layout(other, "add_scaled");
    for (size_t i = 0; i < values_.size(); ++i) values_[i] += s * other.values_[i];
}

bool WeightBundle::bitwise_equal(const WeightBundle& other) const {
    if (!same_layout(other) || values_.size() != other.values_.size()) return false;
    for (size_t i = 0; i < values_.size(); ++i) {
        uint64_t a, b;
        std::memcpy(&a, &values_[i], 8);
        std::memcpy(&b, &other.values_[i], 8);
        if (a != b) return false;
    }
    return true;
}

void WeightBundle::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(kMagic, 4);
    write_u32(os, kFormatVersion);
    write_u32(os, version_);
    write_u64(os, fingerprint_);
    write_u32(os, static_cast<uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
        write_u32(os, static_cast<uint32_t>(l.name.size()));
        os.write(l.name.data(), static_cast<std::streamsize>(l.name.size()));
        write_u32(os, static_cast<uint32_t>(l.shape.size()));
        for (size_t d : l.shape) write_u64(os, d);
    }
    write_u64(os, values_.size());
    for (double v : values_) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        write_u64(os, bits);
    }
    if (!os) throw IoError("write failed: " + path.string());
}

WeightBundle WeightBundle::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("not a weight bundle file: " + path.string());
    uint32_t fmt = read_u32(is);
    if (fmt != kFormatVersion)
        throw DataError("unsupported weight bundle format version in " + path.string());
    WeightBundle b;
    b.version_ = read_u32(is);
    uint64_t stored_fp = read_u64(is);
    uint32_t n_layers = read_u32(is);
    size_t offset = 0;
    for (uint32_t i = 0; i < n_layers; ++i) {
        Layer l;
        uint32_t name_len = read_u32(is);
        l.name.resize(name_len);
        is.read(l.name.data(), name_len);
        uint32_t ndim = read_u32(is);
        size_t n = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            size_t dim = read_u64(is);
            l.shape.push_back(dim);
            n *= dim;
        }
        l.offset = offset;
        l.size = n;
        offset += n;
        b.layers_.push_back(std::move(l));
    }
    uint64_t count = read_u64(is);
    if (count != offset) throw DataError("weight bundle value count mismatches layout: " + path.string());
    b.values_.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        uint64_t bits = read_u64(is);
        std::memcpy(&b.values_[i], &bits, 8);
    }
    if (!is) throw DataError("truncated weight bundle: " + path.string());
    b.recompute_fingerprint();
    if (b.fingerprint_ != stored_fp)
        throw DataError("weight bundle fingerprint mismatch in " + path.string());
    return b;
}

std::string WeightBundle::layout_json() const {
    nlohmann::json j;
    j["version"] = version_;
    j["fingerprint"] = fingerprint_;
    j["param_count"] = param_count();
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : layers_) {
        layers.push_back({{"name", l.name}, {"shape", l.shape}, {"offset", l.offset}, {"size", l.size}});
    }
    j["layers"] = layers;
    return j.dump(2) + "\n";
}

} // namespace fedmob
