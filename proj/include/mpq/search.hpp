#pragma once

#include <future>
#include <thread>

#include "mpq/supernet.hpp"

namespace mpq {

// BitOps(S) = sum_l MAC_l * b_w(l) * b_a(l)
inline double bitops(const Policy& p, const Supernet& net) {
    if (p.size() != net.num_layers())
        throw std::invalid_argument("bitops: policy length does not match model");
    double total = 0.0;
    for (std::size_t l = 0; l < p.size(); ++l)
        total += static_cast<double>(net.layers[l].macs) * p.bits[l].first * p.bits[l].second;
    return total;
}

struct SearchConfig {
    float lambda = 1.5f;
    double budget = 0.0;           // C
    int max_steps = 64;            // T
    int calibration_batches = 8;
    int workers = 1;
    bool recalibrate_bn = true;
    bool coupled_moves = true;     // 2L neighborhood; false gives the 4L ablation
};

struct Candidate {
    Policy policy;
    int layer = -1;
    int direction = 0;  // +1 up, -1 down
    bool moves_weight = true;  // uncoupled mode only
    double loss = 0.0, bitops = 0.0, j = 0.0;
};

struct SearchStepRecord {
    int step = 0;
    int accepted_layer = -1;
    int direction = 0;
    int bw = 0, ba = 0;
    double loss = 0.0, bitops = 0.0, j = 0.0;
    std::vector<Candidate> table;
};

struct SearchResult {
    Policy policy;
    std::vector<SearchStepRecord> trajectory;
    double final_loss = 0.0, final_bitops = 0.0;
};

// One-bit neighbors: per non-fixed layer, both bits moved one candidate
// step up or down together (2L). Uncoupled mode moves b_w and b_a
// independently (4L). Moves outside the candidate range are omitted.
inline std::vector<Candidate> neighbors(const Policy& p, const Supernet& net,
                                        bool coupled = true) {
    net.validate_policy(p);
    std::vector<Candidate> out;
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const auto& cand = net.layers[l].candidates;
        if (net.layers[l].cfg.fixed8 || cand.size() < 2) continue;
        auto idx_of = [&](int b) {
            return static_cast<int>(std::find(cand.begin(), cand.end(), b) - cand.begin());
        };
        int wi = idx_of(p.bits[l].first), ai = idx_of(p.bits[l].second);
        for (int dir : {+1, -1}) {
            if (coupled) {
                int nwi = wi + dir, nai = ai + dir;
                if (nwi < 0 || nwi >= static_cast<int>(cand.size()) || nai < 0 ||
                    nai >= static_cast<int>(cand.size()))
                    continue;
                Candidate c;
                c.policy = p;
                c.policy.bits[l] = {cand[nwi], cand[nai]};
                c.layer = static_cast<int>(l);
                c.direction = dir;
                out.push_back(std::move(c));
            } else {
                for (bool move_w : {true, false}) {
                    int ni = (move_w ? wi : ai) + dir;
                    if (ni < 0 || ni >= static_cast<int>(cand.size())) continue;
                    Candidate c;
                    c.policy = p;
                    if (move_w)
                        c.policy.bits[l].first = cand[ni];
                    else
                        c.policy.bits[l].second = cand[ni];
                    c.layer = static_cast<int>(l);
                    c.direction = dir;
                    c.moves_weight = move_w;
                    out.push_back(std::move(c));
                }
            }
        }
    }
    return out;
}

// Validation loss of a policy on a private clone (bn recalibrated first),
// so concurrent candidate evaluations never share mutable state.
inline double evaluate_candidate(const Supernet& net, const Policy& policy,
                                 const std::vector<TensorPtr>& calib_batches,
                                 const TensorPtr& val_x, const std::vector<int>& val_y,
                                 bool recalibrate = true) {
    Supernet priv = net.clone();
    priv.training = false;
    if (recalibrate && !calib_batches.empty()) priv.bn_recalibrate(policy, calib_batches);
    auto res = priv.forward(policy, val_x);
    return softmax_cross_entropy(res.logits, val_y)->item();
}

namespace detail {

// min-max normalize in place; a constant vector maps to all zeros
inline std::vector<double> minmax(const std::vector<double>& v) {
    auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    std::vector<double> out(v.size(), 0.0);
    if (*mx > *mn)
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *mn) / (*mx - *mn);
    return out;
}

}  // namespace detail

class GreedySearch {
public:
    using EvalFn = std::function<double(const Policy&)>;

    GreedySearch(const Supernet& net, SearchConfig cfg, EvalFn eval)
        : net_(net), cfg_(cfg), eval_(std::move(eval)) {
        if (cfg_.lambda < 0.f) throw std::invalid_argument("search: lambda must be >= 0");
        if (!(cfg_.budget > 0.0)) throw std::invalid_argument("search: budget must be > 0");
    }

    // Score all neighbors of the current policy and accept the argmin of
    // J = minmax(loss) + lambda * minmax(bitops); ties go to the lower index.
    SearchStepRecord step(const Policy& current, int step_no) const {
        auto cands = neighbors(current, net_, cfg_.coupled_moves);
        if (cands.empty()) throw std::runtime_error("greedy_step: empty neighborhood");
        evaluate_all(cands);
        std::vector<double> losses, ops;
        for (const auto& c : cands) {
            losses.push_back(c.loss);
            ops.push_back(c.bitops);
        }
        auto nl = detail::minmax(losses);
        auto nb = detail::minmax(ops);
        std::size_t best = 0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            cands[i].j = nl[i] + cfg_.lambda * nb[i];
            if (cands[i].j < cands[best].j) best = i;
        }
        SearchStepRecord rec;
        rec.step = step_no;
        rec.accepted_layer = cands[best].layer;
        rec.direction = cands[best].direction;
        rec.bw = cands[best].policy.bits[cands[best].layer].first;
        rec.ba = cands[best].policy.bits[cands[best].layer].second;
        rec.loss = cands[best].loss;
        rec.bitops = cands[best].bitops;
        rec.j = cands[best].j;
        rec.table = cands;
        return rec;
    }

    SearchResult run(std::optional<Policy> init = {}) const {
        Policy current = init.value_or(net_.max_policy());
        net_.validate_policy(current);
        if (bitops(net_.min_policy(), net_) > cfg_.budget)
            throw std::runtime_error("search: budget " + std::to_string(cfg_.budget) +
                                     " is below the all-min-bit BitOps " +
                                     std::to_string(bitops(net_.min_policy(), net_)));
        SearchResult res;
        struct Visited {
            Policy p;
            double loss, ops;
        };
        std::vector<Visited> met_budget;
        for (int t = 0; t < cfg_.max_steps; ++t) {
            double ops = bitops(current, net_);
            if (ops <= cfg_.budget) {
                res.policy = current;
                res.final_bitops = ops;
                res.final_loss = eval_(current);
                return res;
            }
            auto rec = step(current, t);
            const Candidate* accepted = nullptr;
            for (const auto& c : rec.table)
                if (c.layer == rec.accepted_layer && c.direction == rec.direction &&
                    c.policy.bits[c.layer].first == rec.bw &&
                    c.policy.bits[c.layer].second == rec.ba) {
                    accepted = &c;
                    break;
                }
            current = accepted->policy;
            if (accepted->bitops <= cfg_.budget)
                met_budget.push_back({current, accepted->loss, accepted->bitops});
            res.trajectory.push_back(std::move(rec));
        }
        // T exhausted: fall back to the best feasible policy seen, or fail.
        double ops = bitops(current, net_);
        if (ops <= cfg_.budget) {
            res.policy = current;
            res.final_bitops = ops;
            res.final_loss = eval_(current);
            return res;
        }
        if (met_budget.empty())
            throw std::runtime_error("search: budget not met within " +
                                     std::to_string(cfg_.max_steps) + " steps");
        auto best = std::min_element(met_budget.begin(), met_budget.end(),
                                     [](const Visited& a, const Visited& b) {
                                         return a.loss < b.loss;
                                     });
        res.policy = best->p;
        res.final_loss = best->loss;
        res.final_bitops = best->ops;
        return res;
    }

private:
    void evaluate_all(std::vector<Candidate>& cands) const {
        auto eval_range = [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                cands[i].loss = eval_(cands[i].policy);
                cands[i].bitops = bitops(cands[i].policy, net_);
            }
        };
        int workers = std::max(1, cfg_.workers);
        if (workers == 1 || cands.size() < 2) {
            eval_range(0, cands.size());
            return;
        }
        std::vector<std::thread> pool;
        std::size_t chunk = (cands.size() + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            std::size_t lo = w * chunk, hi = std::min(cands.size(), lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(eval_range, lo, hi);
        }
        for (auto& t : pool) t.join();
    }

    const Supernet& net_;
    SearchConfig cfg_;
    EvalFn eval_;
};

}  // namespace mpq
