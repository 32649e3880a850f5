#pragma once

#include "mpq/ops.hpp"

namespace mpq {

enum class QuantKind { Weight, Activation };

// Uniform quantizer range for b bits: signed for weights, unsigned for
// ReLU-style activations.
struct QuantSpec {
    int bit = 0;
    QuantKind kind = QuantKind::Weight;
    TensorPtr scale;  // gamma, scalar, learnable

    QuantSpec() = default;
    QuantSpec(int b, QuantKind k, TensorPtr gamma) : bit(b), kind(k), scale(std::move(gamma)) {
        if (b < 2) throw std::invalid_argument("quant: bit-width must be >= 2");
    }

    int n_min() const { return kind == QuantKind::Weight ? -(1 << (bit - 1)) : 0; }
    int n_max() const { return kind == QuantKind::Weight ? (1 << (bit - 1)) - 1 : (1 << bit) - 1; }
    float gamma() const { return scale->v[0]; }
};

// Bit-width representation set: the 2^b discrete levels gamma * {-2^(b-1), ..., 2^(b-1)-1}.
struct Brs {
    int bit;
    float gamma;
    std::vector<float> levels;
};

inline Brs brs(int b, float gamma) {
    if (b < 2) throw std::invalid_argument("brs: bit-width must be >= 2");
    if (!(gamma > 0.f)) throw std::invalid_argument("brs: scale must be positive");
    Brs r{b, gamma, {}};
    int lo = -(1 << (b - 1)), hi = (1 << (b - 1)) - 1;
    r.levels.reserve(static_cast<std::size_t>(hi - lo + 1));
    for (int q = lo; q <= hi; ++q) r.levels.push_back(gamma * static_cast<float>(q));
    return r;
}

// Nearest level by absolute difference; ties resolved toward the lower level.
inline std::pair<float, float> distance_to_level(float w, const Brs& set) {
    float best = set.levels.front();
    float best_d = std::abs(w - best);
    for (float lv : set.levels) {
        float d = std::abs(w - lv);
        if (d < best_d) {
            best = lv;
            best_d = d;
        }
    }
    return {best, best_d};
}

// gamma = 2*mean(|W|)/sqrt(n_max), floored at 1e-8.
inline float init_scale(const Tensor& w, int bit, QuantKind kind) {
    if (w.numel() == 0) throw std::invalid_argument("init_scale: empty tensor");
    QuantSpec probe(bit, kind, make_scalar(1.f));
    double acc = 0.0;
    for (float x : w.v) acc += std::abs(x);
    double m = acc / static_cast<double>(w.numel());
    return std::max(static_cast<float>(2.0 * m / std::sqrt(static_cast<double>(probe.n_max()))),
                    1e-8f);
}

// Fake-quantize: round(clip(x/gamma, n_min, n_max)) * gamma, recorded with
// STE on x and the LSQ step-size gradient on gamma (scaled by
// 1/sqrt(numel * n_max)).
inline TensorPtr quantize(const TensorPtr& x, const QuantSpec& spec) {
    if (!spec.scale) throw std::invalid_argument("quantize: spec has no scale");
    float gamma = spec.gamma();
    if (!(gamma > 0.f)) throw std::invalid_argument("quantize: scale must be positive, got " +
                                                    std::to_string(gamma));
    check_finite("quantize", *x);
    const float lo = static_cast<float>(spec.n_min()), hi = static_cast<float>(spec.n_max());
    auto out = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) {
        float z = x->v[i] / gamma;
        float zc = std::min(std::max(z, lo), hi);
        out->v[i] = round_ties_away(zc) * gamma;
    }
    if (x->tracked() || spec.scale->tracked()) {
        out->parents = {x, spec.scale};
        auto xp = x;
        auto sp = spec.scale;
        float gscale = 1.f / std::sqrt(static_cast<float>(x->numel()) * hi);
        out->backward_fn = [xp, sp, gamma, lo, hi, gscale](Tensor& self) {
            double gacc = 0.0;
            for (std::size_t i = 0; i < self.numel(); ++i) {
                float z = xp->v[i] / gamma;
                float up = self.g[i];
                if (z < lo) {
                    gacc += static_cast<double>(up) * lo;
                } else if (z > hi) {
                    gacc += static_cast<double>(up) * hi;
                } else {
                    if (xp->tracked()) xp->g[i] += up;
                    gacc += static_cast<double>(up) * (round_ties_away(z) - z);
                }
            }
            if (sp->tracked()) sp->g[0] += gscale * static_cast<float>(gacc);
        };
    }
    return out;
}

// Plain value-level quantization (no graph), used by oracles and analysis.
inline float quantize_value(float x, int bit, float gamma, QuantKind kind = QuantKind::Weight) {
    QuantSpec s(bit, kind, make_scalar(gamma));
    float z = std::min(std::max(x / gamma, static_cast<float>(s.n_min())),
                       static_cast<float>(s.n_max()));
    return round_ties_away(z) * gamma;
}

}  // namespace mpq
