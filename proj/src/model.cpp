#include "fedmob/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "fedmob/errors.hpp"

namespace fedmob::model {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluAlpha = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
constexpr double kMaskScore = -1e30;

double gelu(double x) {
    double u = kGeluAlpha * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
    double u = kGeluAlpha * (x + kGeluCubic * x * x * x);
    double t = std::tanh(u);
    double du = kGeluAlpha * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// C[M,N] += A[M,K] * B[K,N]
void mm_nn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
void mm_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            double* crow = c + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void add_bias_rows(double* x, const double* bias, size_t rows, size_t n) {
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < n; ++j) x[r * n + j] += bias[j];
}

void accumulate_bias_grad(const double* dy, double* dbias, size_t rows, size_t n) {
    for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < n; ++j) dbias[j] += dy[r * n + j];
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string enc(int layer, const char* suffix) {
    return "enc" + std::to_string(layer) + "." + suffix;
}

} // namespace

ModelConfig paper_scale_config() {
    ModelConfig cfg;
    cfg.d_model = 128;
    cfg.n_layers = 6;
    cfg.n_heads = 8;
    cfg.d_ff = 512;
    return cfg;
}

TransformerClassifier::TransformerClassifier(ModelConfig cfg, TokenizerConfig tok)
    : cfg_(cfg), tok_(tok) {
    if (cfg_.d_model < 1 || cfg_.n_layers < 1 || cfg_.n_heads < 1 || cfg_.d_ff < 1)
        throw ConfigError("model: dimensions must be positive");
    if (cfg_.d_model % cfg_.n_heads != 0)
        throw ConfigError("model: d_model must be divisible by n_heads");
    if (cfg_.dropout < 0.0 || cfg_.dropout >= 1.0)
        throw ConfigError("model: dropout must lie in [0, 1)");
    if (tok_.communities < 2) throw ConfigError("model: need at least 2 communities");
    if (cfg_.max_len < tok_.window_len)
        throw ConfigError("model: max_len must cover the tokenizer window");

    const size_t d = static_cast<size_t>(cfg_.d_model);
    const size_t c = static_cast<size_t>(tok_.communities);
    const size_t buckets = static_cast<size_t>(tok_.battery_buckets);
    const size_t f = static_cast<size_t>(cfg_.d_ff);

    layout_.emplace_back("embed.pickup", std::vector<size_t>{c + 1, d});
    layout_.emplace_back("embed.dropoff", std::vector<size_t>{c + 1, d});
    layout_.emplace_back("embed.battery", std::vector<size_t>{buckets + 1, d});
    layout_.emplace_back("embed.time_w", std::vector<size_t>{kTimeFeatures, d});
    layout_.emplace_back("embed.time_b", std::vector<size_t>{d});
    for (int l = 0; l < cfg_.n_layers; ++l) {
        layout_.emplace_back(enc(l, "attn.wq"), std::vector<size_t>{d, d});
        layout_.emplace_back(enc(l, "attn.bq"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "attn.wk"), std::vector<size_t>{d, d});
        layout_.emplace_back(enc(l, "attn.bk"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "attn.wv"), std::vector<size_t>{d, d});
        layout_.emplace_back(enc(l, "attn.bv"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "attn.wo"), std::vector<size_t>{d, d});
        layout_.emplace_back(enc(l, "attn.bo"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "ln1.gain"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "ln1.bias"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "ff.w1"), std::vector<size_t>{d, f});
        layout_.emplace_back(enc(l, "ff.b1"), std::vector<size_t>{f});
        layout_.emplace_back(enc(l, "ff.w2"), std::vector<size_t>{f, d});
        layout_.emplace_back(enc(l, "ff.b2"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "ln2.gain"), std::vector<size_t>{d});
        layout_.emplace_back(enc(l, "ln2.bias"), std::vector<size_t>{d});
    }
    layout_.emplace_back("head.w", std::vector<size_t>{d, c});
    layout_.emplace_back("head.b", std::vector<size_t>{c});

    WeightBundle probe = WeightBundle::with_layout(layout_);
    fingerprint_ = probe.fingerprint();
    param_count_ = probe.param_count();

    // Sinusoidal positional encoding, fixed (not a parameter).
    positional_.assign(static_cast<size_t>(cfg_.max_len) * d, 0.0);
    for (int pos = 0; pos < cfg_.max_len; ++pos) {
        for (size_t j = 0; j < d; ++j) {
            double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(d);
            double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
            positional_[static_cast<size_t>(pos) * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

WeightBundle TransformerClassifier::empty_bundle() const {
    return WeightBundle::with_layout(layout_);
}

WeightBundle TransformerClassifier::init_weights(uint64_t seed) const {
    WeightBundle b = empty_bundle();
    Rng rng(derive_seed(seed, "model.init"));
    for (const auto& l : b.layers()) {
        auto vals = b.layer_values(l.name);
        bool is_norm_gain = l.name.ends_with("gain");
        bool is_bias = l.name.ends_with(".bias") || l.name.ends_with(".bq") || l.name.ends_with(".bk") ||
                       l.name.ends_with(".bv") || l.name.ends_with(".bo") || l.name.ends_with(".b1") ||
                       l.name.ends_with(".b2") || l.name == "embed.time_b" || l.name == "head.b";
        if (is_norm_gain) {
            for (double& v : vals) v = 1.0;
        } else if (is_bias) {
            for (double& v : vals) v = 0.0;
        } else {
            for (double& v : vals) v = rng.normal(0.0, 0.02);
        }
    }
    return b;
}

void TransformerClassifier::check_batch(const SampleBatch& batch) const {
    if (batch.batch < 1) throw DataError("forward: empty batch");
    if (batch.window_len != tok_.window_len) throw DataError("forward: batch window length mismatch");
    size_t n = static_cast<size_t>(batch.batch) * static_cast<size_t>(batch.window_len);
    if (batch.pickup.size() != n || batch.dropoff.size() != n || batch.battery.size() != n ||
        batch.time_feats.size() != n * kTimeFeatures ||
        batch.targets.size() != static_cast<size_t>(batch.batch))
        throw DataError("forward: batch tensor sizes are inconsistent");
    for (size_t i = 0; i < n; ++i) {
        if (batch.pickup[i] < 0 || batch.pickup[i] > tok_.communities ||
            batch.dropoff[i] < 0 || batch.dropoff[i] > tok_.communities ||
            batch.battery[i] < 0 || batch.battery[i] > tok_.battery_buckets)
            throw DataError("forward: token index out of vocabulary");
    }
    for (int32_t t : batch.targets)
        if (t < 1 || t > tok_.communities) throw DataError("forward: target community out of range");
}

struct TransformerClassifier::Workspace {
    struct LayerWs {
        std::vector<double> input; // B*L*d, layer input
        std::vector<double> q, k, v;
        std::vector<double> probs;       // B*H*L*L
        std::vector<double> probs_kept;  // after attention dropout
        std::vector<double> concat;      // B*L*d
        std::vector<double> attn_out;    // B*L*d
        std::vector<double> drop_attn;   // scale mask, empty when unused
        std::vector<double> res1, ln1_xhat, x1;
        std::vector<double> ln1_inv_std; // B*L
        std::vector<double> ff_pre, ff_act, ff_out;
        std::vector<double> drop_ff;
        std::vector<double> res2, ln2_xhat, x2;
        std::vector<double> ln2_inv_std;
    };
    std::vector<double> x0;
    std::vector<double> drop_embed;
    std::vector<LayerWs> layers;
    std::vector<double> logits;
    std::vector<double> probs;
};

namespace {

void layer_norm_forward(const double* x, const double* gain, const double* bias, double* xhat,
                        double* inv_std, double* out, size_t rows, size_t d) {
    for (size_t r = 0; r < rows; ++r) {
        const double* row = x + r * d;
        double mu = 0.0;
        for (size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[r] = is;
        for (size_t j = 0; j < d; ++j) {
            double xh = (row[j] - mu) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
}

// Given upstream dY, adds the input gradient into dx and parameter
// gradients into dgain/dbias.
void layer_norm_backward(const double* dy, const double* xhat, const double* inv_std,
                         const double* gain, double* dx, double* dgain, double* dbias, size_t rows,
                         size_t d) {
    for (size_t r = 0; r < rows; ++r) {
        const double* dyr = dy + r * d;
        const double* xh = xhat + r * d;
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double dxh = dyr[j] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
        }
        double inv_d = 1.0 / static_cast<double>(d);
        for (size_t j = 0; j < d; ++j) {
            double dxh = dyr[j] * gain[j];
            dx[r * d + j] +=
                inv_std[r] * (dxh - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
}

// Inverted dropout; keeps[i] is 0 or 1/(1-p).
void fill_dropout_mask(std::vector<double>& mask, size_t n, double p, Rng& rng) {
    mask.resize(n);
    double scale = 1.0 / (1.0 - p);
    for (size_t i = 0; i < n; ++i) mask[i] = rng.uniform() < p ? 0.0 : scale;
}

} // namespace

void TransformerClassifier::run_forward(const WeightBundle& weights, const SampleBatch& batch,
                                        Workspace& ws, bool training, Rng* dropout_rng,
                                        ForwardTrace* trace) const {
    if (weights.fingerprint() != fingerprint_)
        throw IncompatibleWeightsError("forward: bundle does not match this model configuration");
    check_batch(batch);

    const size_t b = static_cast<size_t>(batch.batch);
    const size_t L = static_cast<size_t>(batch.window_len);
    const size_t d = static_cast<size_t>(cfg_.d_model);
    const size_t heads = static_cast<size_t>(cfg_.n_heads);
    const size_t dh = d / heads;
    const size_t f = static_cast<size_t>(cfg_.d_ff);
    const size_t c = static_cast<size_t>(tok_.communities);
    const size_t rows = b * L;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool use_dropout = training && cfg_.dropout > 0.0 && dropout_rng != nullptr;

    auto epick = weights.layer_values("embed.pickup");
    auto edrop = weights.layer_values("embed.dropoff");
    auto ebat = weights.layer_values("embed.battery");
    auto tw = weights.layer_values("embed.time_w");
    auto tb = weights.layer_values("embed.time_b");

    ws.x0.assign(rows * d, 0.0);
    for (size_t r = 0; r < rows; ++r) {
        double* out = ws.x0.data() + r * d;
        const double* pe = positional_.data() + (r % L) * d;
        size_t pi = static_cast<size_t>(batch.pickup[r]) * d;
        size_t di = static_cast<size_t>(batch.dropoff[r]) * d;
        size_t bi = static_cast<size_t>(batch.battery[r]) * d;
        for (size_t j = 0; j < d; ++j) out[j] = epick[pi + j] + edrop[di + j] + ebat[bi + j] + tb[j] + pe[j];
        const double* tf = batch.time_feats.data() + r * kTimeFeatures;
        for (size_t ff = 0; ff < kTimeFeatures; ++ff) {
            double tv = tf[ff];
            if (tv == 0.0) continue;
            const double* wrow = tw.data() + ff * d;
            for (size_t j = 0; j < d; ++j) out[j] += tv * wrow[j];
        }
    }
    if (use_dropout) {
        fill_dropout_mask(ws.drop_embed, rows * d, cfg_.dropout, *dropout_rng);
        for (size_t i = 0; i < rows * d; ++i) ws.x0[i] *= ws.drop_embed[i];
    } else {
        ws.drop_embed.clear();
    }

    if (trace) trace->attention.assign(static_cast<size_t>(cfg_.n_layers), {});
    ws.layers.resize(static_cast<size_t>(cfg_.n_layers));
    const std::vector<double>* x = &ws.x0;
    for (int l = 0; l < cfg_.n_layers; ++l) {
        auto& lw = ws.layers[static_cast<size_t>(l)];
        lw.input = *x;

        auto wq = weights.layer_values(enc(l, "attn.wq"));
        auto wk = weights.layer_values(enc(l, "attn.wk"));
        auto wv = weights.layer_values(enc(l, "attn.wv"));
        auto wo = weights.layer_values(enc(l, "attn.wo"));

        lw.q.assign(rows * d, 0.0);
        lw.k.assign(rows * d, 0.0);
        lw.v.assign(rows * d, 0.0);
        mm_nn(lw.input.data(), wq.data(), lw.q.data(), rows, d, d);
        mm_nn(lw.input.data(), wk.data(), lw.k.data(), rows, d, d);
        mm_nn(lw.input.data(), wv.data(), lw.v.data(), rows, d, d);
        add_bias_rows(lw.q.data(), weights.layer_values(enc(l, "attn.bq")).data(), rows, d);
        add_bias_rows(lw.k.data(), weights.layer_values(enc(l, "attn.bk")).data(), rows, d);
        add_bias_rows(lw.v.data(), weights.layer_values(enc(l, "attn.bv")).data(), rows, d);

        lw.probs.assign(b * heads * L * L, 0.0);
        lw.concat.assign(rows * d, 0.0);
        for (size_t bi2 = 0; bi2 < b; ++bi2) {
            const int32_t* pick = batch.pickup.data() + bi2 * L;
            for (size_t h = 0; h < heads; ++h) {
                double* probs = lw.probs.data() + ((bi2 * heads + h) * L) * L;
                for (size_t i = 0; i < L; ++i) {
                    const double* qrow = lw.q.data() + (bi2 * L + i) * d + h * dh;
                    double* prow = probs + i * L;
                    double maxv = -1e300;
                    for (size_t j = 0; j < L; ++j) {
                        double s;
                        if (pick[j] == kPadToken) {
                            s = kMaskScore;
                        } else {
                            const double* krow = lw.k.data() + (bi2 * L + j) * d + h * dh;
                            double acc = 0.0;
                            for (size_t cc = 0; cc < dh; ++cc) acc += qrow[cc] * krow[cc];
                            s = acc * inv_sqrt_dh;
                        }
                        prow[j] = s;
                        if (s > maxv) maxv = s;
                    }
                    double denom = 0.0;
                    for (size_t j = 0; j < L; ++j) {
                        double e = std::exp(prow[j] - maxv);
                        prow[j] = e;
                        denom += e;
                    }
                    for (size_t j = 0; j < L; ++j) prow[j] /= denom;
                }
            }
        }
        if (trace) trace->attention[static_cast<size_t>(l)] = lw.probs;

        if (use_dropout) {
            std::vector<double> mask;
            fill_dropout_mask(mask, lw.probs.size(), cfg_.dropout, *dropout_rng);
            lw.probs_kept.resize(lw.probs.size());
            for (size_t i = 0; i < lw.probs.size(); ++i) lw.probs_kept[i] = lw.probs[i] * mask[i];
        } else {
            lw.probs_kept.clear();
        }
        const std::vector<double>& attend_probs = lw.probs_kept.empty() ? lw.probs : lw.probs_kept;

        for (size_t bi2 = 0; bi2 < b; ++bi2) {
            for (size_t h = 0; h < heads; ++h) {
                const double* probs = attend_probs.data() + ((bi2 * heads + h) * L) * L;
                for (size_t i = 0; i < L; ++i) {
                    double* out = lw.concat.data() + (bi2 * L + i) * d + h * dh;
                    const double* prow = probs + i * L;
                    for (size_t j = 0; j < L; ++j) {
                        double p = prow[j];
                        if (p == 0.0) continue;
                        const double* vrow = lw.v.data() + (bi2 * L + j) * d + h * dh;
                        for (size_t cc = 0; cc < dh; ++cc) out[cc] += p * vrow[cc];
                    }
                }
            }
        }

        lw.attn_out.assign(rows * d, 0.0);
        mm_nn(lw.concat.data(), wo.data(), lw.attn_out.data(), rows, d, d);
        add_bias_rows(lw.attn_out.data(), weights.layer_values(enc(l, "attn.bo")).data(), rows, d);
        if (use_dropout) {
            fill_dropout_mask(lw.drop_attn, rows * d, cfg_.dropout, *dropout_rng);
            for (size_t i = 0; i < rows * d; ++i) lw.attn_out[i] *= lw.drop_attn[i];
        } else {
            lw.drop_attn.clear();
        }

        lw.res1.resize(rows * d);
        for (size_t i = 0; i < rows * d; ++i) lw.res1[i] = lw.input[i] + lw.attn_out[i];
        lw.ln1_xhat.resize(rows * d);
        lw.ln1_inv_std.resize(rows);
        lw.x1.resize(rows * d);
        layer_norm_forward(lw.res1.data(), weights.layer_values(enc(l, "ln1.gain")).data(),
                           weights.layer_values(enc(l, "ln1.bias")).data(), lw.ln1_xhat.data(),
                           lw.ln1_inv_std.data(), lw.x1.data(), rows, d);

        auto w1 = weights.layer_values(enc(l, "ff.w1"));
        auto w2 = weights.layer_values(enc(l, "ff.w2"));
        lw.ff_pre.assign(rows * f, 0.0);
        mm_nn(lw.x1.data(), w1.data(), lw.ff_pre.data(), rows, d, f);
        add_bias_rows(lw.ff_pre.data(), weights.layer_values(enc(l, "ff.b1")).data(), rows, f);
        lw.ff_act.resize(rows * f);
        for (size_t i = 0; i < rows * f; ++i) lw.ff_act[i] = gelu(lw.ff_pre[i]);
        lw.ff_out.assign(rows * d, 0.0);
        mm_nn(lw.ff_act.data(), w2.data(), lw.ff_out.data(), rows, f, d);
        add_bias_rows(lw.ff_out.data(), weights.layer_values(enc(l, "ff.b2")).data(), rows, d);
        if (use_dropout) {
            fill_dropout_mask(lw.drop_ff, rows * d, cfg_.dropout, *dropout_rng);
            for (size_t i = 0; i < rows * d; ++i) lw.ff_out[i] *= lw.drop_ff[i];
        } else {
            lw.drop_ff.clear();
        }

        lw.res2.resize(rows * d);
        for (size_t i = 0; i < rows * d; ++i) lw.res2[i] = lw.x1[i] + lw.ff_out[i];
        lw.ln2_xhat.resize(rows * d);
        lw.ln2_inv_std.resize(rows);
        lw.x2.resize(rows * d);
        layer_norm_forward(lw.res2.data(), weights.layer_values(enc(l, "ln2.gain")).data(),
                           weights.layer_values(enc(l, "ln2.bias")).data(), lw.ln2_xhat.data(),
                           lw.ln2_inv_std.data(), lw.x2.data(), rows, d);

        if (!all_finite(lw.x2))
            throw NumericError("forward: non-finite values leaving " + enc(l, "ln2"));
        x = &lw.x2;
    }

    auto hw = weights.layer_values("head.w");
    auto hb = weights.layer_values("head.b");
    ws.logits.assign(b * c, 0.0);
    for (size_t bi2 = 0; bi2 < b; ++bi2) {
        const double* hlast = x->data() + (bi2 * L + (L - 1)) * d;
        double* lrow = ws.logits.data() + bi2 * c;
        for (size_t j = 0; j < d; ++j) {
            double hv = hlast[j];
            if (hv == 0.0) continue;
            const double* wrow = hw.data() + j * c;
            for (size_t cc = 0; cc < c; ++cc) lrow[cc] += hv * wrow[cc];
        }
        for (size_t cc = 0; cc < c; ++cc) lrow[cc] += hb[cc];
    }
    if (!all_finite(ws.logits)) throw NumericError("forward: non-finite values leaving head");
}

std::vector<double> TransformerClassifier::forward(const WeightBundle& weights,
                                                   const SampleBatch& batch,
                                                   ForwardTrace* trace) const {
    Workspace ws;
    run_forward(weights, batch, ws, /*training=*/false, nullptr, trace);
    return std::move(ws.logits);
}

void TransformerClassifier::run_backward(const WeightBundle& weights, const SampleBatch& batch,
                                         Workspace& ws, WeightBundle& grad) const {
    const size_t b = static_cast<size_t>(batch.batch);
    const size_t L = static_cast<size_t>(batch.window_len);
    const size_t d = static_cast<size_t>(cfg_.d_model);
    const size_t heads = static_cast<size_t>(cfg_.n_heads);
    const size_t dh = d / heads;
    const size_t f = static_cast<size_t>(cfg_.d_ff);
    const size_t c = static_cast<size_t>(tok_.communities);
    const size_t rows = b * L;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // Softmax cross-entropy gradient at the logits.
    std::vector<double> dlogits(b * c);
    for (size_t bi = 0; bi < b; ++bi) {
        size_t target = static_cast<size_t>(batch.targets[bi] - 1);
        for (size_t cc = 0; cc < c; ++cc) {
            double p = ws.probs[bi * c + cc];
            dlogits[bi * c + cc] = (p - (cc == target ? 1.0 : 0.0)) / static_cast<double>(b);
        }
    }

    const std::vector<double>& top =
        ws.layers.empty() ? ws.x0 : ws.layers.back().x2;
    auto hw = weights.layer_values("head.w");
    auto ghw = grad.layer_values("head.w");
    auto ghb = grad.layer_values("head.b");
    std::vector<double> dx(rows * d, 0.0);
    for (size_t bi = 0; bi < b; ++bi) {
        const double* hlast = top.data() + (bi * L + (L - 1)) * d;
        const double* dlrow = dlogits.data() + bi * c;
        double* dxrow = dx.data() + (bi * L + (L - 1)) * d;
        for (size_t cc = 0; cc < c; ++cc) ghb[cc] += dlrow[cc];
        for (size_t j = 0; j < d; ++j) {
            const double* wrow = hw.data() + j * c;
            double* gwrow = ghw.data() + j * c;
            double acc = 0.0;
            for (size_t cc = 0; cc < c; ++cc) {
                acc += wrow[cc] * dlrow[cc];
                gwrow[cc] += hlast[j] * dlrow[cc];
            }
            dxrow[j] += acc;
        }
    }

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        auto& lw = ws.layers[static_cast<size_t>(l)];

        // ln2
        std::vector<double> dres2(rows * d, 0.0);
        layer_norm_backward(dx.data(), lw.ln2_xhat.data(), lw.ln2_inv_std.data(),
                            weights.layer_values(enc(l, "ln2.gain")).data(), dres2.data(),
                            grad.layer_values(enc(l, "ln2.gain")).data(),
                            grad.layer_values(enc(l, "ln2.bias")).data(), rows, d);

        // res2 = x1 + dropout(ff_out)
        std::vector<double> dx1 = dres2;
        std::vector<double> dff_out = dres2;
        if (!lw.drop_ff.empty())
            for (size_t i = 0; i < rows * d; ++i) dff_out[i] *= lw.drop_ff[i];

        // feed-forward
        auto w1 = weights.layer_values(enc(l, "ff.w1"));
        auto w2 = weights.layer_values(enc(l, "ff.w2"));
        accumulate_bias_grad(dff_out.data(), grad.layer_values(enc(l, "ff.b2")).data(), rows, d);
        mm_tn(lw.ff_act.data(), dff_out.data(), grad.layer_values(enc(l, "ff.w2")).data(), rows, f, d);
        std::vector<double> dff_act(rows * f, 0.0);
        mm_nt(dff_out.data(), w2.data(), dff_act.data(), rows, d, f);
        for (size_t i = 0; i < rows * f; ++i) dff_act[i] *= gelu_derivative(lw.ff_pre[i]);
        accumulate_bias_grad(dff_act.data(), grad.layer_values(enc(l, "ff.b1")).data(), rows, f);
        mm_tn(lw.x1.data(), dff_act.data(), grad.layer_values(enc(l, "ff.w1")).data(), rows, d, f);
        mm_nt(dff_act.data(), w1.data(), dx1.data(), rows, f, d);

        // ln1
        std::vector<double> dres1(rows * d, 0.0);
        layer_norm_backward(dx1.data(), lw.ln1_xhat.data(), lw.ln1_inv_std.data(),
                            weights.layer_values(enc(l, "ln1.gain")).data(), dres1.data(),
                            grad.layer_values(enc(l, "ln1.gain")).data(),
                            grad.layer_values(enc(l, "ln1.bias")).data(), rows, d);

        // res1 = input + dropout(attn_out)
        std::vector<double> dinput = dres1;
        std::vector<double> dattn_out = dres1;
        if (!lw.drop_attn.empty())
            for (size_t i = 0; i < rows * d; ++i) dattn_out[i] *= lw.drop_attn[i];

        // output projection
        auto wo = weights.layer_values(enc(l, "attn.wo"));
        accumulate_bias_grad(dattn_out.data(), grad.layer_values(enc(l, "attn.bo")).data(), rows, d);
        mm_tn(lw.concat.data(), dattn_out.data(), grad.layer_values(enc(l, "attn.wo")).data(), rows, d, d);
        std::vector<double> dconcat(rows * d, 0.0);
        mm_nt(dattn_out.data(), wo.data(), dconcat.data(), rows, d, d);

        // attention core
        std::vector<double> dq(rows * d, 0.0), dk(rows * d, 0.0), dv(rows * d, 0.0);
        std::vector<double> dprobs(L * L);
        const bool attn_dropout = !lw.probs_kept.empty();
        for (size_t bi = 0; bi < b; ++bi) {
            for (size_t h = 0; h < heads; ++h) {
                const double* probs = lw.probs.data() + ((bi * heads + h) * L) * L;
                const double* kept =
                    (attn_dropout ? lw.probs_kept.data() : lw.probs.data()) + ((bi * heads + h) * L) * L;
                // dPkept[i,j] = dConcat_h[i] . V_h[j]; dV_h[j] += sum_i kept[i,j] dConcat_h[i]
                for (size_t i = 0; i < L; ++i) {
                    const double* dcrow = dconcat.data() + (bi * L + i) * d + h * dh;
                    double* dprow = dprobs.data() + i * L;
                    for (size_t j = 0; j < L; ++j) {
                        const double* vrow = lw.v.data() + (bi * L + j) * d + h * dh;
                        double acc = 0.0;
                        for (size_t cc = 0; cc < dh; ++cc) acc += dcrow[cc] * vrow[cc];
                        dprow[j] = acc;
                        double p = kept[i * L + j];
                        if (p != 0.0) {
                            double* dvrow = dv.data() + (bi * L + j) * d + h * dh;
                            for (size_t cc = 0; cc < dh; ++cc) dvrow[cc] += p * dcrow[cc];
                        }
                    }
                }
                // attention dropout: kept = probs * mask, so dprobs picks up the mask
                if (attn_dropout) {
                    for (size_t i = 0; i < L; ++i) {
                        for (size_t j = 0; j < L; ++j) {
                            double p = probs[i * L + j];
                            double k2 = kept[i * L + j];
                            if (p != 0.0) dprobs[i * L + j] *= k2 / p;
                        }
                    }
                }
                // softmax backward and score gradients
                for (size_t i = 0; i < L; ++i) {
                    const double* prow = probs + i * L;
                    double* dprow = dprobs.data() + i * L;
                    double dot = 0.0;
                    for (size_t j = 0; j < L; ++j) dot += dprow[j] * prow[j];
                    const double* qrow = lw.q.data() + (bi * L + i) * d + h * dh;
                    double* dqrow = dq.data() + (bi * L + i) * d + h * dh;
                    for (size_t j = 0; j < L; ++j) {
                        double ds = prow[j] * (dprow[j] - dot) * inv_sqrt_dh;
                        if (ds == 0.0) continue;
                        const double* krow = lw.k.data() + (bi * L + j) * d + h * dh;
                        double* dkrow = dk.data() + (bi * L + j) * d + h * dh;
                        for (size_t cc = 0; cc < dh; ++cc) {
                            dqrow[cc] += ds * krow[cc];
                            dkrow[cc] += ds * qrow[cc];
                        }
                    }
                }
            }
        }

        accumulate_bias_grad(dq.data(), grad.layer_values(enc(l, "attn.bq")).data(), rows, d);
        accumulate_bias_grad(dk.data(), grad.layer_values(enc(l, "attn.bk")).data(), rows, d);
        accumulate_bias_grad(dv.data(), grad.layer_values(enc(l, "attn.bv")).data(), rows, d);
        mm_tn(lw.input.data(), dq.data(), grad.layer_values(enc(l, "attn.wq")).data(), rows, d, d);
        mm_tn(lw.input.data(), dk.data(), grad.layer_values(enc(l, "attn.wk")).data(), rows, d, d);
        mm_tn(lw.input.data(), dv.data(), grad.layer_values(enc(l, "attn.wv")).data(), rows, d, d);
        mm_nt(dq.data(), weights.layer_values(enc(l, "attn.wq")).data(), dinput.data(), rows, d, d);
        mm_nt(dk.data(), weights.layer_values(enc(l, "attn.wk")).data(), dinput.data(), rows, d, d);
        mm_nt(dv.data(), weights.layer_values(enc(l, "attn.wv")).data(), dinput.data(), rows, d, d);

        dx = std::move(dinput);
    }

    // embedding gradients
    if (!ws.drop_embed.empty())
        for (size_t i = 0; i < rows * d; ++i) dx[i] *= ws.drop_embed[i];
    auto gpick = grad.layer_values("embed.pickup");
    auto gdrop = grad.layer_values("embed.dropoff");
    auto gbat = grad.layer_values("embed.battery");
    auto gtw = grad.layer_values("embed.time_w");
    auto gtb = grad.layer_values("embed.time_b");
    for (size_t r = 0; r < rows; ++r) {
        const double* dxr = dx.data() + r * d;
        double* gp = gpick.data() + static_cast<size_t>(batch.pickup[r]) * d;
        double* gd = gdrop.data() + static_cast<size_t>(batch.dropoff[r]) * d;
        double* gb = gbat.data() + static_cast<size_t>(batch.battery[r]) * d;
        for (size_t j = 0; j < d; ++j) {
            gp[j] += dxr[j];
            gd[j] += dxr[j];
            gb[j] += dxr[j];
            gtb[j] += dxr[j];
        }
        const double* tf = batch.time_feats.data() + r * kTimeFeatures;
        for (size_t ff = 0; ff < kTimeFeatures; ++ff) {
            double tv = tf[ff];
            if (tv == 0.0) continue;
            double* grow = gtw.data() + ff * d;
            for (size_t j = 0; j < d; ++j) grow[j] += tv * dxr[j];
        }
    }
}

TransformerClassifier::LossGrad TransformerClassifier::loss_and_grad(const WeightBundle& weights,
                                                                     const SampleBatch& batch,
                                                                     Rng* dropout_rng) const {
    Workspace ws;
    run_forward(weights, batch, ws, /*training=*/true, dropout_rng, nullptr);

    const size_t b = static_cast<size_t>(batch.batch);
    const size_t c = static_cast<size_t>(tok_.communities);
    ws.probs.resize(b * c);
    double loss = 0.0;
    for (size_t bi = 0; bi < b; ++bi) {
        const double* lrow = ws.logits.data() + bi * c;
        double* prow = ws.probs.data() + bi * c;
        double maxv = lrow[0];
        for (size_t cc = 1; cc < c; ++cc) maxv = std::max(maxv, lrow[cc]);
        double denom = 0.0;
        for (size_t cc = 0; cc < c; ++cc) {
            double e = std::exp(lrow[cc] - maxv);
            prow[cc] = e;
            denom += e;
        }
        for (size_t cc = 0; cc < c; ++cc) prow[cc] /= denom;
        size_t target = static_cast<size_t>(batch.targets[bi] - 1);
        loss -= std::log(std::max(prow[target], 1e-300));
    }
    loss /= static_cast<double>(b);
    if (!std::isfinite(loss)) throw NumericError("loss_and_grad: non-finite loss");

    LossGrad out;
    out.loss = loss;
    out.grad = empty_bundle();
    run_backward(weights, batch, ws, out.grad);
    return out;
}

double TransformerClassifier::evaluate_batches(const WeightBundle& weights,
                                               std::span<const SampleBatch> batches,
                                               std::vector<uint8_t>* correct) const {
    size_t total = 0, hits = 0;
    const size_t c = static_cast<size_t>(tok_.communities);
    for (const auto& batch : batches) {
        std::vector<double> logits = forward(weights, batch);
        for (size_t bi = 0; bi < static_cast<size_t>(batch.batch); ++bi) {
            const double* lrow = logits.data() + bi * c;
            size_t best = 0;
            for (size_t cc = 1; cc < c; ++cc)
                if (lrow[cc] > lrow[best]) best = cc;
            bool hit = static_cast<int32_t>(best + 1) == batch.targets[bi];
            if (correct) correct->push_back(hit ? 1 : 0);
            hits += hit ? 1 : 0;
            ++total;
        }
    }
    if (total == 0) throw DataError("evaluate: no samples");
    return static_cast<double>(hits) / static_cast<double>(total);
}

double TransformerClassifier::evaluate(const WeightBundle& weights, std::span<const Sample> samples,
                                       std::vector<uint8_t>* correct) const {
    if (samples.empty()) throw DataError("evaluate: no samples");
    auto batches = make_batches(samples, 256);
    return evaluate_batches(weights, batches, correct);
}

} // namespace fedmob::model
