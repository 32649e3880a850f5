#pragma once

#include "mpq/supernet.hpp"

namespace mpq {

enum class CriterionMode { BoundDistance, Literal };

struct CriterionReport {
    std::vector<int> layer_index;     // scored (non-fixed) layers
    std::vector<double> score;        // one per scored layer, >= 0
    CriterionMode mode = CriterionMode::BoundDistance;
    float epsilon = 0.25f;
    long step = 0;
};

struct ScheduleConfig {
    int k0 = 0;             // initial Top-K; 0 means ceil(L_scored / 2)
    long total_steps = 1;   // T_s for the cosine decay of K
    long period = 1;        // steps between re-evaluations
    long duration = 1;      // steps a freeze lasts
    CriterionMode mode = CriterionMode::BoundDistance;
    float epsilon = 0.25f;
};

// Per-layer instability score. Bound-distance mode counts weights whose
// distance to the nearest quantization level is within eps*gamma/2 of the
// bound (the rounding-flip midpoint); literal mode evaluates the indicator
// sum-over-levels form verbatim. Both are normalized by 1/2^(b-1) per bit
// and by the weight count.
inline CriterionReport unstable_criterion(const Supernet& net, float epsilon, CriterionMode mode,
                                          long step = 0) {
    if (epsilon < 0.f || epsilon > 1.f)
        throw std::invalid_argument("unstable_criterion: epsilon must be in [0,1]");
    CriterionReport rep;
    rep.mode = mode;
    rep.epsilon = epsilon;
    rep.step = step;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        if (layer.cfg.fixed8) continue;
        const auto& w = layer.weight->v;
        double score = 0.0;
        for (int b : layer.candidates) {
            float gamma = layer.wq.at(b).gamma();
            auto set = brs(b, gamma);
            long count = 0;
            if (mode == CriterionMode::BoundDistance) {
                float threshold = (1.f - epsilon) * gamma / 2.f;
                for (float x : w) {
                    auto [lv, d] = distance_to_level(x, set);
                    if (d >= threshold) ++count;
                }
            } else {
                for (float q : set.levels) {
                    float bound = gamma * ((1.f - epsilon) / 2.f + q / gamma);
                    for (float x : w)
                        if (std::abs(x) <= bound) ++count;
                }
            }
            score += std::pow(2.0, 1 - b) * static_cast<double>(count) /
                     static_cast<double>(w.size());
        }
        rep.layer_index.push_back(static_cast<int>(l));
        rep.score.push_back(score);
    }
    return rep;
}

// The K highest-scoring layers; ties broken toward the lower layer index.
inline std::vector<int> topk_layers(const CriterionReport& rep, int k) {
    if (k < 0 || k > static_cast<int>(rep.score.size()))
        throw std::invalid_argument("topk_layers: K out of range");
    std::vector<std::size_t> idx(rep.score.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return rep.score[a] > rep.score[b]; });
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(rep.layer_index[idx[i]]);
    return out;
}

// For each selected layer, freeze its smallest currently-unfrozen candidate
// bit until now + duration. A layer's last remaining candidate is never
// frozen.
inline void topk_to_freeze(const Supernet& net, const CriterionReport& rep, int k,
                           FreezeMask& mask, long now, long duration) {
    for (int l : topk_layers(rep, k)) {
        auto unfrozen = net.layers[l].unfrozen(mask, l);
        if (unfrozen.size() <= 1) continue;
        int bit = *std::min_element(unfrozen.begin(), unfrozen.end());
        mask.freeze(l, bit, now + duration);
    }
}

// K(t) = round(K0 * 0.5 * (1 + cos(pi * t / T_s)))
inline int k_schedule(long t, long total_steps, int k0) {
    if (total_steps <= 0) throw std::invalid_argument("k_schedule: total_steps must be > 0");
    if (t < 0 || t > total_steps) throw std::invalid_argument("k_schedule: t out of range");
    double v = k0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / total_steps));
    return static_cast<int>(std::lround(v));
}

class BitScheduler {
public:
    ScheduleConfig cfg;
    FreezeMask mask;
    std::optional<CriterionReport> last_report;

    explicit BitScheduler(ScheduleConfig c = {}) : cfg(c) {}

    int effective_k0(const Supernet& net) const {
        if (cfg.k0 > 0) return cfg.k0;
        int scored = 0;
        for (const auto& l : net.layers)
            if (!l.cfg.fixed8) ++scored;
        return (scored + 1) / 2;
    }

    // Call every step; acts only on period boundaries. Purges expired
    // freezes, recomputes the criterion, and freezes the Top-K layers'
    // smallest bits.
    void apply(const Supernet& net, long step) {
        mask.purge(step);
        if (step % cfg.period != 0) return;
        auto rep = unstable_criterion(net, cfg.epsilon, cfg.mode, step);
        long t = std::min(step, cfg.total_steps);
        int k = k_schedule(t, cfg.total_steps, effective_k0(net));
        topk_to_freeze(net, rep, std::min<int>(k, static_cast<int>(rep.score.size())), mask, step,
                       cfg.duration);
        last_report = rep;
    }
};

inline std::string criterion_csv(const CriterionReport& rep) {
    std::ostringstream os;
    os << "layer,score,mode,epsilon,step\n";
    for (std::size_t i = 0; i < rep.score.size(); ++i)
        os << rep.layer_index[i] << "," << rep.score[i] << ","
           << (rep.mode == CriterionMode::BoundDistance ? "bound" : "literal") << ","
           << rep.epsilon << "," << rep.step << "\n";
    return os.str();
}

}  // namespace mpq
