#pragma once

#include <random>

#include "mpq/supernet.hpp"

namespace mpq {

// ---------------------------------------------------------------------------
// Scalar 2D regression probe: minimize E_x[ (x w* - x Q_b(w))^2 ] with STE,
// sampling one bit per step from the configured set. The quantized value and
// gradient are recorded for every bit in the set each step.
// ---------------------------------------------------------------------------

struct Regress2dConfig {
    float target = 0.31f;        // w*, off-level by default
    std::vector<int> bits{4};
    float gamma = 0.125f;        // fixed scale; not learned here
    // optional per-bit scales (parallel to `bits`); empty uses `gamma` for
    // every bit. Distinct scales give each bit-width its own grid, which is
    // what makes the bit-widths pull the shared weight toward different
    // levels.
    std::vector<float> gammas;
    int batch = 64;
    int steps = 2000;
    float lr = 0.01f;
    unsigned seed = 0;

    float gamma_for(std::size_t k) const {
        return gammas.size() == bits.size() ? gammas[k] : gamma;
    }
};

struct Regress2dRun {
    Regress2dConfig cfg;
    std::vector<float> latent;                         // w per step
    std::vector<std::vector<float>> quantized;         // [bit][step]
    std::vector<std::vector<float>> grad_norm;         // [bit][step]
    std::vector<int> sampled_bit;                      // per step
};

inline Regress2dRun regress2d(const Regress2dConfig& cfg) {
    if (cfg.bits.empty()) throw std::invalid_argument("regress2d: empty bit set");
    if (!cfg.gammas.empty() && cfg.gammas.size() != cfg.bits.size())
        throw std::invalid_argument("regress2d: gammas must be empty or match bits");
    Regress2dRun run;
    run.cfg = cfg;
    run.quantized.resize(cfg.bits.size());
    run.grad_norm.resize(cfg.bits.size());
    std::mt19937 rng(cfg.seed);
    std::normal_distribution<float> gauss(0.f, 1.f);
    std::uniform_int_distribution<std::size_t> pick(0, cfg.bits.size() - 1);
    float w = cfg.target;
    for (int t = 0; t < cfg.steps; ++t) {
        std::vector<float> x(cfg.batch);
        for (auto& xi : x) xi = gauss(rng);
        std::size_t bi = pick(rng);
        run.sampled_bit.push_back(cfg.bits[bi]);
        run.latent.push_back(w);
        // gradient of the batch loss w.r.t. w under STE, per bit
        std::vector<float> grads(cfg.bits.size());
        for (std::size_t k = 0; k < cfg.bits.size(); ++k) {
            int b = cfg.bits[k];
            float g = cfg.gamma_for(k);
            float q = quantize_value(w, b, g, QuantKind::Weight);
            run.quantized[k].push_back(q);
            float lo = g * static_cast<float>(-(1 << (b - 1)));
            float hi = g * static_cast<float>((1 << (b - 1)) - 1);
            bool in_range = w >= lo && w <= hi;
            double acc = 0.0;
            for (float xi : x) {
                float r = xi * cfg.target - xi * q;
                if (in_range) acc += -2.0 * r * xi;  // STE: dq/dw = 1 inside the clip range
            }
            grads[k] = static_cast<float>(acc / cfg.batch);
            run.grad_norm[k].push_back(std::abs(grads[k]));
        }
        w -= cfg.lr * grads[bi];
    }
    return run;
}

// Number of consecutive-step pairs whose nearest BRS levels differ.
inline int count_boundary_crossings(const std::vector<float>& trajectory, const Brs& set) {
    if (trajectory.empty()) throw std::invalid_argument("count_boundary_crossings: empty trajectory");
    int crossings = 0;
    float prev = distance_to_level(trajectory[0], set).first;
    for (std::size_t i = 1; i < trajectory.size(); ++i) {
        float cur = distance_to_level(trajectory[i], set).first;
        if (cur != prev) ++crossings;
        prev = cur;
    }
    return crossings;
}

// Variance over steps of the RMS-normalized gradient magnitude series.
inline double normalized_grad_variance(const std::vector<float>& grad_norms) {
    double sq = 0.0;
    for (float g : grad_norms) sq += static_cast<double>(g) * g;
    double rms = std::sqrt(sq / grad_norms.size());
    if (rms == 0.0) return 0.0;
    double mean = 0.0;
    for (float g : grad_norms) mean += g / rms;
    mean /= grad_norms.size();
    double var = 0.0;
    for (float g : grad_norms) {
        double d = g / rms - mean;
        var += d * d;
    }
    return var / grad_norms.size();
}

// ---------------------------------------------------------------------------
// Supernet-level probes
// ---------------------------------------------------------------------------

// ||W_l - Q_b(W_l)||_2 for each requested bit.
inline std::vector<double> weight_distance(const Supernet& net, int layer,
                                           const std::vector<int>& bits) {
    if (layer < 0 || layer >= static_cast<int>(net.num_layers()))
        throw std::invalid_argument("weight_distance: invalid layer id " + std::to_string(layer));
    const auto& l = net.layers[layer];
    std::vector<double> out;
    for (int b : bits) {
        float gamma = l.wq.at(b).gamma();
        double acc = 0.0;
        for (float w : l.weight->v) {
            double d = w - quantize_value(w, b, gamma, QuantKind::Weight);
            acc += d * d;
        }
        out.push_back(std::sqrt(acc));
    }
    return out;
}

struct DensityReport {
    int layer = 0, bit = 0;
    std::vector<double> bin_edges;  // bins+1 edges, uniform
    std::vector<double> counts;     // normalized, sums to 1
};

// Histogram of a layer's pre-activation outputs with the layer at bit b and
// every other layer at its max candidate. Shared bin edges across bits.
inline std::vector<DensityReport> output_density(const Supernet& net, int layer,
                                                 const std::vector<int>& bits,
                                                 const TensorPtr& batch, int bins) {
    if (bins < 2) throw std::invalid_argument("output_density: need at least 2 bins");
    if (layer < 0 || layer >= static_cast<int>(net.num_layers()))
        throw std::invalid_argument("output_density: invalid layer id");
    Supernet priv = net.clone();
    priv.training = false;
    std::vector<std::vector<float>> outputs;
    double lo = 1e30, hi = -1e30;
    for (int b : bits) {
        Policy p = priv.max_policy();
        p.bits[layer] = {b, b};
        auto res = priv.forward(p, batch, /*capture=*/true);
        outputs.push_back(res.layer_outputs[layer]->v);
        for (float v : outputs.back()) {
            lo = std::min(lo, static_cast<double>(v));
            hi = std::max(hi, static_cast<double>(v));
        }
    }
    if (hi <= lo) hi = lo + 1e-6;
    std::vector<DensityReport> reports;
    for (std::size_t k = 0; k < bits.size(); ++k) {
        DensityReport r;
        r.layer = layer;
        r.bit = bits[k];
        for (int i = 0; i <= bins; ++i)
            r.bin_edges.push_back(lo + (hi - lo) * i / bins);
        r.counts.assign(bins, 0.0);
        for (float v : outputs[k]) {
            int bin = static_cast<int>((v - lo) / (hi - lo) * bins);
            bin = std::clamp(bin, 0, bins - 1);
            r.counts[bin] += 1.0;
        }
        for (auto& c : r.counts) c /= static_cast<double>(outputs[k].size());
        reports.push_back(std::move(r));
    }
    return reports;
}

// Symmetric KL between two histograms with add-one-count smoothing.
inline double symmetric_kl(const DensityReport& a, const DensityReport& b) {
    if (a.counts.size() != b.counts.size())
        throw std::invalid_argument("symmetric_kl: histogram size mismatch");
    const double eps = 1e-6;
    double n = static_cast<double>(a.counts.size());
    double kl_ab = 0.0, kl_ba = 0.0;
    for (std::size_t i = 0; i < a.counts.size(); ++i) {
        double p = (a.counts[i] + eps) / (1.0 + eps * n);
        double q = (b.counts[i] + eps) / (1.0 + eps * n);
        kl_ab += p * std::log(p / q);
        kl_ba += q * std::log(q / p);
    }
    return kl_ab + kl_ba;
}

// Exact loss perturbation: take one SGD step on the low-bit policy's
// objective and report the change in the high-bit policy's loss on a fixed
// batch. Works on a private clone; the supplied net is untouched.
inline double loss_perturbation_probe(const Supernet& net, const Policy& high, const Policy& low,
                                      const TensorPtr& batch_x, const std::vector<int>& batch_y,
                                      float lr) {
    Supernet priv = net.clone();
    priv.training = false;
    auto loss_of = [&](const Policy& p) {
        return softmax_cross_entropy(priv.forward(p, batch_x).logits, batch_y)->item();
    };
    double before = loss_of(high);
    // single plain-SGD step on the low-bit objective (latent weights only);
    // BN running stats are restored afterwards so only the weight step perturbs
    std::vector<std::pair<std::vector<float>, std::vector<float>>> bn_saved;
    for (auto& l : priv.layers)
        bn_saved.push_back({l.bn.running_mean, l.bn.running_var});
    priv.training = true;
    auto res = priv.forward(low, batch_x);
    auto loss = softmax_cross_entropy(res.logits, batch_y);
    for (auto& l : priv.layers) {
        l.weight->zero_grad();
        l.bias->zero_grad();
    }
    backward(loss);
    for (auto& l : priv.layers)
        for (std::size_t i = 0; i < l.weight->numel(); ++i)
            l.weight->v[i] -= lr * l.weight->g[i];
    for (std::size_t l = 0; l < priv.layers.size(); ++l) {
        priv.layers[l].bn.running_mean = bn_saved[l].first;
        priv.layers[l].bn.running_var = bn_saved[l].second;
    }
    priv.training = false;
    return loss_of(high) - before;
}

// ---------------------------------------------------------------------------
// CSV emission (column layouts documented in docs/output_schemas.md)
// ---------------------------------------------------------------------------

inline std::string regress2d_csv(const Regress2dRun& run) {
    std::ostringstream os;
    os << "step,latent_w,sampled_bit";
    for (int b : run.cfg.bits) os << ",qw_" << b;
    for (int b : run.cfg.bits) os << ",gradnorm_" << b;
    os << "\n";
    for (std::size_t t = 0; t < run.latent.size(); ++t) {
        os << t << "," << run.latent[t] << "," << run.sampled_bit[t];
        for (std::size_t k = 0; k < run.cfg.bits.size(); ++k) os << "," << run.quantized[k][t];
        for (std::size_t k = 0; k < run.cfg.bits.size(); ++k) os << "," << run.grad_norm[k][t];
        os << "\n";
    }
    return os.str();
}

inline std::string density_csv(const DensityReport& r) {
    std::ostringstream os;
    os << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < r.counts.size(); ++i)
        os << r.bin_edges[i] << "," << r.bin_edges[i + 1] << "," << r.counts[i] << "\n";
    return os.str();
}

}  // namespace mpq
