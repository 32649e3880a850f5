#pragma once

#include <map>
#include <optional>
#include <random>
#include <set>

#include "mpq/batchnorm.hpp"
#include "mpq/idm.hpp"
#include "mpq/optim.hpp"
#include "mpq/quant.hpp"

namespace mpq {

// ---------------------------------------------------------------------------
// Topology description
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, Fc };

struct LayerConfig {
    LayerKind kind = LayerKind::Fc;
    // conv
    int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
    // fc
    int in_features = 0, out_features = 0;
    bool has_bn = false;
    bool has_relu = true;
    bool fixed8 = false;  // first/last layers quantize at a fixed 8 bits
};

struct Topology {
    int in_ch = 1, in_h = 8, in_w = 8;
    int classes = 10;
    std::vector<LayerConfig> layers;
};

// Per-layer (weight bit, activation bit) assignment.
struct Policy {
    std::vector<std::pair<int, int>> bits;

    bool operator==(const Policy& o) const { return bits == o.bits; }
    std::size_t size() const { return bits.size(); }
};

// Frozen (layer, weight-bit) pairs with expiry steps.
class FreezeMask {
public:
    struct Entry {
        int layer, bit;
        long expiry;
    };

    void purge(long step) {
        entries_.erase(std::remove_if(entries_.begin(), entries_.end(),
                                      [step](const Entry& e) { return e.expiry <= step; }),
                       entries_.end());
    }

    void freeze(int layer, int bit, long expiry) {
        if (!frozen(layer, bit)) entries_.push_back({layer, bit, expiry});
    }

    bool frozen(int layer, int bit) const {
        for (const auto& e : entries_)
            if (e.layer == layer && e.bit == bit) return true;
        return false;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

private:
    std::vector<Entry> entries_;
};

struct SamplerConfig {
    int mc_samples = 2;  // K
    bool include_max_policy = true;
    // relative draw weight of the lowest candidate bit (1.0 = uniform)
    float lowest_bit_weight = 1.f;
};

// ---------------------------------------------------------------------------
// Shared layer: one latent weight tensor serving every candidate bit-width
// ---------------------------------------------------------------------------

struct SharedLayer {
    LayerConfig cfg;
    TensorPtr weight, bias;
    std::map<int, QuantSpec> wq;  // per candidate bit (plus 8 for fixed layers)
    std::map<int, QuantSpec> aq;
    BatchNormState bn;
    IdmHead idm;
    long macs = 0;
    std::vector<int> candidates;  // weight/activation bit candidates ({8} if fixed)
    int out_h = 0, out_w = 0;     // conv output spatial dims

    std::vector<int> unfrozen(const FreezeMask& mask, int layer_index) const {
        std::vector<int> r;
        for (int b : candidates)
            if (!mask.frozen(layer_index, b)) r.push_back(b);
        return r;
    }
};

// ---------------------------------------------------------------------------

struct ForwardResult {
    TensorPtr logits;
    std::vector<TensorPtr> layer_outputs;  // pre-activation, post-bn
};

struct StepMetrics {
    std::vector<float> policy_losses;  // per forwarded policy (reference last)
    float mean_task_loss = 0.f;
    float idm_loss = 0.f;
    float lr = 0.f;
    std::vector<Policy> policies;
};

class Supernet {
public:
    Topology topo;
    std::vector<SharedLayer> layers;
    std::vector<int> bit_candidates;  // search-space bits for non-fixed layers
    bool training = true;

    Supernet() = default;

    Supernet(const Topology& t, std::vector<int> candidates, std::mt19937& rng)
        : topo(t), bit_candidates(std::move(candidates)) {
        if (bit_candidates.empty())
            throw std::invalid_argument("supernet: empty bit candidate set");
        std::sort(bit_candidates.begin(), bit_candidates.end());
        int h = t.in_h, w = t.in_w;
        for (const auto& cfg : t.layers) {
            SharedLayer layer;
            layer.cfg = cfg;
            if (cfg.kind == LayerKind::Conv) {
                layer.weight = init_weight({cfg.out_ch, cfg.in_ch, cfg.kernel, cfg.kernel},
                                           cfg.in_ch * cfg.kernel * cfg.kernel, rng);
                layer.bias = make_param({cfg.out_ch}, std::vector<float>(cfg.out_ch, 0.f));
                layer.out_h = (h + 2 * cfg.pad - cfg.kernel) / cfg.stride + 1;
                layer.out_w = (w + 2 * cfg.pad - cfg.kernel) / cfg.stride + 1;
                layer.macs = static_cast<long>(cfg.out_ch) * cfg.in_ch * cfg.kernel * cfg.kernel *
                             layer.out_h * layer.out_w;
                if (cfg.has_bn) layer.bn.reset(cfg.out_ch);
                layer.idm = IdmHead(cfg.out_ch);
                h = layer.out_h;
                w = layer.out_w;
            } else {
                layer.weight = init_weight({cfg.in_features, cfg.out_features}, cfg.in_features, rng);
                layer.bias = make_param({cfg.out_features},
                                        std::vector<float>(cfg.out_features, 0.f));
                layer.macs = static_cast<long>(cfg.in_features) * cfg.out_features;
                if (cfg.has_bn) layer.bn.reset(cfg.out_features);
                layer.idm = IdmHead(cfg.out_features);
            }
            layer.candidates = cfg.fixed8 ? std::vector<int>{8} : bit_candidates;
            for (int b : layer.candidates) {
                layer.wq.emplace(b, QuantSpec(b, QuantKind::Weight,
                                              learnable_scale(init_scale(*layer.weight, b,
                                                                         QuantKind::Weight))));
                // activation ranges are not known yet; start with a clip range
                // of [0, 1] at every bit and let the learned scale adapt
                float a_init = 1.f / static_cast<float>((1 << b) - 1);
                layer.aq.emplace(b, QuantSpec(b, QuantKind::Activation, learnable_scale(a_init)));
            }
            layers.push_back(std::move(layer));
        }
    }

    std::size_t num_layers() const { return layers.size(); }

    Policy max_policy() const {
        Policy p;
        for (const auto& l : layers) p.bits.push_back({l.candidates.back(), l.candidates.back()});
        return p;
    }

    Policy min_policy() const {
        Policy p;
        for (const auto& l : layers) p.bits.push_back({l.candidates.front(), l.candidates.front()});
        return p;
    }

    void validate_policy(const Policy& p) const {
        if (p.size() != layers.size())
            throw std::invalid_argument("policy: length " + std::to_string(p.size()) +
                                        " does not match " + std::to_string(layers.size()) +
                                        " layers");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto [bw, ba] = p.bits[l];
            const auto& c = layers[l].candidates;
            if (std::find(c.begin(), c.end(), bw) == c.end() ||
                std::find(c.begin(), c.end(), ba) == c.end())
                throw std::invalid_argument("policy: bits (" + std::to_string(bw) + "," +
                                            std::to_string(ba) + ") not in candidate set of layer " +
                                            std::to_string(l));
        }
    }

    // Per-layer independent uniform draw over unfrozen weight-bit candidates;
    // activation bits draw over the full candidate set (freezing is
    // weight-only). Fixed layers always emit (8, 8).
    Policy sample_policy(const FreezeMask& mask, std::mt19937& rng) const {
        Policy p;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& layer = layers[l];
            if (layer.cfg.fixed8) {
                p.bits.push_back({8, 8});
                continue;
            }
            auto wbits = layer.unfrozen(mask, static_cast<int>(l));
            if (wbits.empty())
                throw std::runtime_error("sample_policy: all candidates frozen for layer " +
                                         std::to_string(l));
            p.bits.push_back({draw_bit(wbits, rng), draw_bit(layer.candidates, rng)});
        }
        return p;
    }

    ForwardResult forward(const Policy& policy, const TensorPtr& input, bool capture = false) {
        validate_policy(policy);
        ForwardResult res;
        TensorPtr x = input;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& layer = layers[l];
            auto [bw, ba] = policy.bits[l];
            auto xa = quantize(x, layer.aq.at(ba));
            auto wq = quantize(layer.weight, layer.wq.at(bw));
            TensorPtr y;
            if (layer.cfg.kind == LayerKind::Conv) {
                y = conv2d(xa, wq, layer.cfg.stride, layer.cfg.pad);
            } else {
                if (x->shape.size() != 2)
                    xa = reshape(xa, {x->shape[0], static_cast<int>(x->numel()) / x->shape[0]});
                y = matmul(xa, wq);
            }
            y = add_channel(y, layer.bias);
            if (layer.cfg.has_bn) y = batchnorm(y, layer.bn, training);
            if (capture) res.layer_outputs.push_back(y);
            x = layer.cfg.has_relu ? relu(y) : y;
        }
        if (x->shape.size() != 2)
            throw std::runtime_error("forward: final output is not [batch, classes]");
        res.logits = x;
        return res;
    }

    // One training step: K sampled policies (+ optional all-max reference),
    // averaged task loss, IDM alignment for smallest-unfrozen-bit layers,
    // fairness weight-decay mask, one optimizer step.
    StepMetrics train_step(const TensorPtr& batch_x, const std::vector<int>& batch_y,
                           const SamplerConfig& sampler, const FreezeMask& mask,
                           float idm_weight, SgdOptimizer& opt, float lr, std::mt19937& rng,
                           bool fairness = true) {
        training = true;
        StepMetrics m;
        m.lr = lr;
        for (int k = 0; k < sampler.mc_samples; ++k)
            m.policies.push_back(sample_with_weights(mask, sampler, rng));
        bool with_ref = sampler.include_max_policy;
        if (with_ref) m.policies.push_back(max_policy());

        // Reference forward first so its captured outputs can serve as IDM targets.
        std::vector<ForwardResult> results(m.policies.size());
        std::vector<TensorPtr> losses;
        ForwardResult* ref = nullptr;
        if (with_ref) {
            results.back() = forward(m.policies.back(), batch_x, idm_weight > 0.f);
            ref = &results.back();
        }
        for (std::size_t k = 0; k < m.policies.size(); ++k) {
            if (with_ref && k + 1 == m.policies.size()) break;
            results[k] = forward(m.policies[k], batch_x, idm_weight > 0.f && with_ref);
        }

        TensorPtr total;
        float inv_n = 1.f / static_cast<float>(m.policies.size());
        for (std::size_t k = 0; k < m.policies.size(); ++k) {
            auto loss = softmax_cross_entropy(results[k].logits, batch_y);
            if (!loss->all_finite())
                throw std::runtime_error("train_step: non-finite loss under policy " +
                                         policy_str(m.policies[k]));
            m.policy_losses.push_back(loss->item());
            total = total ? add(total, scale(loss, inv_n)) : scale(loss, inv_n);
        }
        m.mean_task_loss = total->item();

        if (idm_weight > 0.f && with_ref) {
            TensorPtr idm_total;
            int idm_terms = 0;
            for (std::size_t k = 0; k + 1 < m.policies.size(); ++k) {
                for (std::size_t l = 0; l < layers.size(); ++l) {
                    if (layers[l].cfg.fixed8) continue;
                    auto unfrozen = layers[l].unfrozen(mask, static_cast<int>(l));
                    if (!idm_site_active(m.policies[k].bits[l].first, unfrozen)) continue;
                    auto target = detach(ref->layer_outputs[l]);
                    auto il = idm_loss(results[k].layer_outputs[l], target, layers[l].idm);
                    idm_total = idm_total ? add(idm_total, il) : il;
                    ++idm_terms;
                }
            }
            if (idm_terms > 0) {
                m.idm_loss = idm_total->item() / idm_terms;
                total = add(total, scale(idm_total, idm_weight / idm_terms));
            }
        }

        opt.zero_grad();
        backward(total);
        opt.step(lr, fairness ? fairness_decay_mask(m.policies, sampler.mc_samples) : no_fairness());
        clamp_scales();
        return m;
    }

    // Keep learned quantizer step sizes strictly positive; a large update on
    // a small scale would otherwise flip its sign and invalidate the grid.
    void clamp_scales() {
        for (auto& l : layers) {
            for (auto& [b, q] : l.wq) q.scale->v[0] = std::max(q.scale->v[0], 1e-5f);
            for (auto& [b, q] : l.aq) q.scale->v[0] = std::max(q.scale->v[0], 1e-5f);
        }
    }

    // Weight decay applies to a layer's latent weights only when some sampled
    // policy gave it the max candidate bit; quantizer scales, bn and idm
    // parameters never decay.
    std::unordered_map<const Tensor*, float> fairness_decay_mask(
        const std::vector<Policy>& policies, int num_sampled) const {
        auto mask = no_fairness();
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (layers[l].cfg.fixed8) continue;
            float mult = 0.f;
            int max_bit = layers[l].candidates.back();
            for (int k = 0; k < num_sampled && k < static_cast<int>(policies.size()); ++k)
                if (policies[k].bits[l].first == max_bit) mult = 1.f;
            mask[layers[l].weight.get()] = mult;
            mask[layers[l].bias.get()] = mult;
        }
        return mask;
    }

    // decay on latent weights/biases only
    std::unordered_map<const Tensor*, float> no_fairness() const {
        std::unordered_map<const Tensor*, float> mask;
        for (const auto& l : layers) {
            for (const auto& [b, q] : l.wq) mask[q.scale.get()] = 0.f;
            for (const auto& [b, q] : l.aq) mask[q.scale.get()] = 0.f;
            if (l.bn.gamma) {
                mask[l.bn.gamma.get()] = 0.f;
                mask[l.bn.beta.get()] = 0.f;
            }
            for (const auto& p : l.idm.params())
                if (p) mask[p.get()] = 0.f;
        }
        return mask;
    }

    std::vector<TensorPtr> trainable_params() const {
        std::vector<TensorPtr> ps;
        for (const auto& l : layers) {
            ps.push_back(l.weight);
            ps.push_back(l.bias);
            for (const auto& [b, q] : l.wq) ps.push_back(q.scale);
            for (const auto& [b, q] : l.aq) ps.push_back(q.scale);
            if (l.bn.gamma) {
                ps.push_back(l.bn.gamma);
                ps.push_back(l.bn.beta);
            }
            for (const auto& p : l.idm.params())
                if (p) ps.push_back(p);
        }
        return ps;
    }

    // Replace running bn stats with the average batch statistics over the
    // calibration batches, under the given policy. Parameters untouched.
    void bn_recalibrate(const Policy& policy, const std::vector<TensorPtr>& batches) {
        if (batches.empty()) throw std::invalid_argument("bn_recalibrate: no calibration batches");
        validate_policy(policy);
        struct Acc {
            std::vector<double> mean, var;
        };
        std::vector<Acc> accs(layers.size());
        bool was_training = training;
        training = false;
        for (const auto& batch : batches) {
            // run in inference mode but record the batch statistics each bn
            // layer would see
            TensorPtr x = batch;
            for (std::size_t l = 0; l < layers.size(); ++l) {
                auto& layer = layers[l];
                auto [bw, ba] = policy.bits[l];
                auto xa = quantize(x, layer.aq.at(ba));
                auto wq = quantize(layer.weight, layer.wq.at(bw));
                TensorPtr y;
                if (layer.cfg.kind == LayerKind::Conv) {
                    y = conv2d(xa, wq, layer.cfg.stride, layer.cfg.pad);
                } else {
                    if (x->shape.size() != 2)
                        xa = reshape(xa, {x->shape[0], static_cast<int>(x->numel()) / x->shape[0]});
                    y = matmul(xa, wq);
                }
                y = add_channel(y, layer.bias);
                if (layer.cfg.has_bn) {
                    auto st = channel_stats(*y);
                    auto& a = accs[l];
                    if (a.mean.empty()) {
                        a.mean.assign(st.mean.size(), 0.0);
                        a.var.assign(st.var.size(), 0.0);
                    }
                    for (std::size_t c = 0; c < st.mean.size(); ++c) {
                        a.mean[c] += st.mean[c];
                        a.var[c] += st.var[c];
                    }
                    // continue the pass with the batch's own stats so later
                    // layers see calibrated inputs
                    y = batchnorm_with(y, layer.bn, st);
                }
                x = layer.cfg.has_relu ? relu(y) : y;
            }
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (!layers[l].cfg.has_bn) continue;
            auto& a = accs[l];
            for (std::size_t c = 0; c < a.mean.size(); ++c) {
                layers[l].bn.running_mean[c] = static_cast<float>(a.mean[c] / batches.size());
                layers[l].bn.running_var[c] = static_cast<float>(a.var[c] / batches.size());
            }
        }
        training = was_training;
    }

    // Deep copy (private parameters and bn stats); used for concurrent
    // read-only candidate evaluation in the search.
    Supernet clone() const {
        Supernet c;
        c.topo = topo;
        c.bit_candidates = bit_candidates;
        c.training = training;
        for (const auto& l : layers) {
            SharedLayer nl;
            nl.cfg = l.cfg;
            nl.macs = l.macs;
            nl.candidates = l.candidates;
            nl.out_h = l.out_h;
            nl.out_w = l.out_w;
            nl.weight = clone_param(l.weight);
            nl.bias = clone_param(l.bias);
            for (const auto& [b, q] : l.wq)
                nl.wq.emplace(b, QuantSpec(b, QuantKind::Weight, clone_param(q.scale)));
            for (const auto& [b, q] : l.aq)
                nl.aq.emplace(b, QuantSpec(b, QuantKind::Activation, clone_param(q.scale)));
            nl.bn.running_mean = l.bn.running_mean;
            nl.bn.running_var = l.bn.running_var;
            nl.bn.momentum = l.bn.momentum;
            nl.bn.eps = l.bn.eps;
            nl.bn.gamma = l.bn.gamma ? clone_param(l.bn.gamma) : nullptr;
            nl.bn.beta = l.bn.beta ? clone_param(l.bn.beta) : nullptr;
            nl.idm.rectify_q = l.idm.rectify_q;
            nl.idm.eps_stab = l.idm.eps_stab;
            if (l.idm.gain_s) {
                nl.idm.gain_s = clone_param(l.idm.gain_s);
                nl.idm.shift_s = clone_param(l.idm.shift_s);
                nl.idm.gain_h = clone_param(l.idm.gain_h);
                nl.idm.shift_h = clone_param(l.idm.shift_h);
            }
            c.layers.push_back(std::move(nl));
        }
        return c;
    }

    static std::string policy_str(const Policy& p) {
        std::ostringstream os;
        for (auto [bw, ba] : p.bits) os << "(" << bw << "," << ba << ")";
        return os.str();
    }

    Policy sample_with_weights(const FreezeMask& mask, const SamplerConfig& sampler,
                               std::mt19937& rng) const {
        if (sampler.lowest_bit_weight == 1.f) return sample_policy(mask, rng);
        Policy p;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& layer = layers[l];
            if (layer.cfg.fixed8) {
                p.bits.push_back({8, 8});
                continue;
            }
            auto wbits = layer.unfrozen(mask, static_cast<int>(l));
            if (wbits.empty())
                throw std::runtime_error("sample_policy: all candidates frozen for layer " +
                                         std::to_string(l));
            p.bits.push_back({draw_weighted(wbits, sampler.lowest_bit_weight, rng),
                              draw_weighted(layer.candidates, sampler.lowest_bit_weight, rng)});
        }
        return p;
    }

private:
    static TensorPtr learnable_scale(float v) { return make_scalar(v, /*requires_grad=*/true); }

    static TensorPtr clone_param(const TensorPtr& p) {
        auto c = make_tensor(p->shape, p->v);
        c->requires_grad = p->requires_grad;
        c->name = p->name;
        return c;
    }

    static TensorPtr init_weight(std::vector<int> shape, int fan_in, std::mt19937& rng) {
        float bound = std::sqrt(2.f / static_cast<float>(fan_in));
        std::normal_distribution<float> dist(0.f, bound);
        std::vector<float> vals(Tensor::numel_of(shape));
        for (auto& x : vals) x = dist(rng);
        return make_param(std::move(shape), std::move(vals));
    }

    static int draw_bit(const std::vector<int>& bits, std::mt19937& rng) {
        std::uniform_int_distribution<std::size_t> d(0, bits.size() - 1);
        return bits[d(rng)];
    }

    // lowest candidate of the whole space gets relative weight `w`, the rest 1
    int draw_weighted(const std::vector<int>& bits, float w, std::mt19937& rng) const {
        int lowest = bit_candidates.front();
        std::vector<double> ws;
        for (int b : bits) ws.push_back(b == lowest ? w : 1.0);
        std::discrete_distribution<std::size_t> d(ws.begin(), ws.end());
        return bits[d(rng)];
    }

    TensorPtr batchnorm_with(const TensorPtr& x, const BatchNormState& bn,
                             const ChannelStats& st) const {
        const int C = bn.channels();
        std::size_t spatial = x->numel() / (static_cast<std::size_t>(x->shape[0]) * C);
        auto out = make_tensor(x->shape);
        for (std::size_t i = 0; i < x->numel(); ++i) {
            std::size_t c = (i / spatial) % C;
            float inv = 1.f / std::sqrt(static_cast<float>(st.var[c]) + bn.eps);
            out->v[i] = (x->v[i] - static_cast<float>(st.mean[c])) * inv * bn.gamma->v[c] +
                        bn.beta->v[c];
        }
        return out;
    }
};

}  // namespace mpq
