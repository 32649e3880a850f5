#pragma once

#include <filesystem>

#include "mpq/analysis.hpp"
#include "mpq/checkpoint.hpp"
#include "mpq/config.hpp"
#include "mpq/data.hpp"

namespace mpq {

struct TrainSplit {
    Dataset train, val;
};

inline TrainSplit split_dataset(const Dataset& ds, float val_fraction) {
    std::size_t n_val = static_cast<std::size_t>(ds.size() * val_fraction);
    std::size_t n_train = ds.size() - n_val;
    TrainSplit s;
    s.train.channels = s.val.channels = ds.channels;
    s.train.height = s.val.height = ds.height;
    s.train.width = s.val.width = ds.width;
    s.train.classes = s.val.classes = ds.classes;
    std::size_t pix = ds.image_numel();
    s.train.images.assign(ds.images.begin(), ds.images.begin() + n_train * pix);
    s.train.labels.assign(ds.labels.begin(), ds.labels.begin() + n_train);
    s.val.images.assign(ds.images.begin() + n_train * pix, ds.images.end());
    s.val.labels.assign(ds.labels.begin() + n_train, ds.labels.end());
    return s;
}

inline Dataset load_dataset(const DatasetConfig& cfg) {
    if (cfg.kind == "mnist") return load_mnist_idx(cfg.images, cfg.labels);
    if (cfg.kind == "synthetic") {
        SyntheticConfig s;
        s.classes = cfg.classes;
        s.samples = cfg.samples;
        s.height = cfg.height;
        s.width = cfg.width;
        s.contrast = cfg.contrast;
        s.noise = cfg.noise;
        s.seed = cfg.seed;
        return make_synthetic(s);
    }
    throw std::invalid_argument("dataset: unknown kind '" + cfg.kind + "'");
}

struct EvalReport {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t samples = 0;
};

// Top-1 accuracy and mean loss under a fixed policy, inference mode.
inline EvalReport evaluate(Supernet& net, const Policy& policy, const Dataset& ds,
                           int batch_size = 128) {
    bool was_training = net.training;
    net.training = false;
    EvalReport rep;
    rep.samples = ds.size();
    double loss_acc = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        auto x = ds.batch(start, batch_size);
        auto y = ds.batch_labels(start, batch_size);
        auto res = net.forward(policy, x);
        loss_acc += softmax_cross_entropy(res.logits, y)->item() * y.size();
        int classes = res.logits->shape[1];
        for (std::size_t n = 0; n < y.size(); ++n) {
            int best = 0;
            for (int k = 1; k < classes; ++k)
                if (res.logits->v[n * classes + k] > res.logits->v[n * classes + best]) best = k;
            if (best == y[n]) ++correct;
        }
    }
    rep.accuracy = static_cast<double>(correct) / ds.size();
    rep.loss = loss_acc / ds.size();
    net.training = was_training;
    return rep;
}

struct Trainer {
    RunConfig cfg;
    Supernet net;
    SgdOptimizer opt;
    BitScheduler scheduler;
    std::mt19937 rng;
    TrainSplit data;
    long step = 0;
    std::ostringstream log_csv;

    explicit Trainer(const RunConfig& c) : cfg(c), rng(c.seed) {
        data = split_dataset(load_dataset(c.dataset), c.dataset.val_fraction);
        net = Supernet(c.topology, c.weight_bits, rng);
        opt.base_lr = c.optimizer.lr;
        opt.momentum = c.optimizer.momentum;
        opt.weight_decay = c.optimizer.weight_decay;
        for (auto& p : net.trainable_params()) opt.register_param(p);
        long spe = steps_per_epoch();
        ScheduleConfig sc = c.schedule;
        sc.total_steps = spe * c.epochs;
        sc.period = spe;    // re-evaluate once per epoch
        sc.duration = spe;  // freezes last one epoch
        scheduler = BitScheduler(sc);
        log_csv << "step,lr,task_loss,idm_loss,frozen,policy_losses\n";
    }

    long steps_per_epoch() const {
        return static_cast<long>((data.train.size() + cfg.batch_size - 1) / cfg.batch_size);
    }
    long total_steps() const { return steps_per_epoch() * cfg.epochs; }
    long warmup_steps() const { return steps_per_epoch() * cfg.optimizer.warmup_epochs; }

    void run_epochs(int epochs) {
        long target = step + static_cast<long>(epochs) * steps_per_epoch();
        while (step < target) run_step();
    }

    void run_step() {
        if (cfg.use_schedule) scheduler.apply(net, step);
        auto order = epoch_order();
        std::size_t in_epoch = static_cast<std::size_t>(step % steps_per_epoch());
        std::size_t start = in_epoch * cfg.batch_size;
        auto [x, y] = gather_batch(order, start);
        float lr = cosine_lr(std::min(step, total_steps()), total_steps(), opt.base_lr,
                             warmup_steps());
        auto m = net.train_step(x, y, cfg.sampler, scheduler.mask, cfg.use_idm ? cfg.idm.beta : 0.f,
                                opt, lr, rng, cfg.use_fairness);
        log_csv << step << "," << lr << "," << m.mean_task_loss << "," << m.idm_loss << ",\""
                << frozen_str() << "\",\"";
        for (std::size_t i = 0; i < m.policy_losses.size(); ++i)
            log_csv << (i ? ";" : "") << m.policy_losses[i];
        log_csv << "\"\n";
        ++step;
    }

    Policy policy_all(int bit) const {
        Policy p;
        for (const auto& l : net.layers) {
            if (l.cfg.fixed8) {
                p.bits.push_back({8, 8});
            } else {
                const auto& c = l.candidates;
                int b = *std::min_element(c.begin(), c.end(),
                                          [bit](int a, int x) {
                                              return std::abs(a - bit) < std::abs(x - bit);
                                          });
                p.bits.push_back({b, b});
            }
        }
        return p;
    }

    std::vector<TensorPtr> calibration_batches(int n) const {
        std::vector<TensorPtr> out;
        for (int i = 0; i < n; ++i) {
            std::size_t start = static_cast<std::size_t>(i) * cfg.batch_size;
            if (start >= data.train.size()) break;
            out.push_back(data.train.batch(start, cfg.batch_size));
        }
        return out;
    }

    EvalReport eval_policy(const Policy& policy, bool recalibrate = true) {
        Supernet priv = net.clone();
        if (recalibrate)
            priv.bn_recalibrate(policy, calibration_batches(cfg.search.calibration_batches));
        return evaluate(priv, policy, data.val, cfg.batch_size);
    }

    void save(const std::string& path) {
        save_checkpoint(path, net, &opt, step, rng_to_string(rng), &scheduler.mask);
    }

    void load(const std::string& path) {
        auto lc = load_checkpoint(path, net, &opt);
        step = lc.step;
        opt.step_count = lc.step;
        rng = rng_from_string(lc.rng_state);
        scheduler.mask = lc.mask;
    }

private:
    std::string frozen_str() const {
        std::ostringstream os;
        for (const auto& e : scheduler.mask.entries())
            os << "(" << e.layer << ":" << e.bit << ")";
        return os.str();
    }

    // deterministic per-epoch shuffle derived from (seed, epoch)
    const std::vector<std::size_t>& epoch_order() {
        long epoch = step / steps_per_epoch();
        if (epoch != cached_epoch_) {
            cached_order_.resize(data.train.size());
            std::iota(cached_order_.begin(), cached_order_.end(), 0);
            std::mt19937 shuffle_rng(cfg.seed * 7919u + static_cast<unsigned>(epoch));
            std::shuffle(cached_order_.begin(), cached_order_.end(), shuffle_rng);
            cached_epoch_ = epoch;
        }
        return cached_order_;
    }

    std::pair<TensorPtr, std::vector<int>> gather_batch(const std::vector<std::size_t>& order,
                                                        std::size_t start) {
        std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
        auto x = make_tensor({static_cast<int>(count), data.train.channels, data.train.height,
                              data.train.width});
        std::vector<int> y(count);
        std::size_t pix = data.train.image_numel();
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t src = order[start + i];
            std::copy_n(data.train.images.begin() + src * pix, pix, x->v.begin() + i * pix);
            y[i] = data.train.labels[src];
        }
        return {x, y};
    }

    long cached_epoch_ = -1;
    std::vector<std::size_t> cached_order_;
};

}  // namespace mpq
