#pragma once

#include <fstream>

#include <json.hpp>

#include "mpq/scheduler.hpp"
#include "mpq/search.hpp"
#include "mpq/supernet.hpp"

namespace mpq {

using json = nlohmann::json;

struct OptimizerConfig {
    float lr = 0.04f;
    float momentum = 0.9f;
    float weight_decay = 2.5e-5f;
    int warmup_epochs = 5;
};

struct IdmConfig {
    float beta = 0.1f;
    float rectify_q = 0.f;
    float eps_stab = 1e-5f;
};

struct DatasetConfig {
    std::string kind = "synthetic";  // synthetic | mnist
    std::string images, labels;      // mnist files
    int classes = 10, samples = 2048, height = 8, width = 8;
    float contrast = 0.35f, noise = 0.55f;
    unsigned seed = 1234;
    float val_fraction = 0.2f;
};

struct RunConfig {
    Topology topology;
    std::vector<int> weight_bits{2, 3, 4, 5, 6};
    SamplerConfig sampler;
    ScheduleConfig schedule;
    IdmConfig idm;
    OptimizerConfig optimizer;
    SearchConfig search;
    DatasetConfig dataset;
    int epochs = 10;
    int batch_size = 32;
    unsigned seed = 0;
    std::string out_dir = "out";
    bool use_schedule = true;
    bool use_idm = true;
    bool use_fairness = true;
};

inline json topology_to_json(const Topology& t) {
    json layers = json::array();
    for (const auto& l : t.layers) {
        json j;
        j["kind"] = l.kind == LayerKind::Conv ? "conv" : "fc";
        if (l.kind == LayerKind::Conv) {
            j["in_ch"] = l.in_ch;
            j["out_ch"] = l.out_ch;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["pad"] = l.pad;
        } else {
            j["in_features"] = l.in_features;
            j["out_features"] = l.out_features;
        }
        j["bn"] = l.has_bn;
        j["relu"] = l.has_relu;
        j["fixed8"] = l.fixed8;
        layers.push_back(j);
    }
    return json{{"in_ch", t.in_ch}, {"in_h", t.in_h}, {"in_w", t.in_w},
                {"classes", t.classes}, {"layers", layers}};
}

inline Topology topology_from_json(const json& j) {
    Topology t;
    t.in_ch = j.at("in_ch");
    t.in_h = j.at("in_h");
    t.in_w = j.at("in_w");
    t.classes = j.at("classes");
    for (const auto& lj : j.at("layers")) {
        LayerConfig l;
        std::string kind = lj.at("kind");
        if (kind == "conv") {
            l.kind = LayerKind::Conv;
            l.in_ch = lj.at("in_ch");
            l.out_ch = lj.at("out_ch");
            l.kernel = lj.at("kernel");
            l.stride = lj.value("stride", 1);
            l.pad = lj.value("pad", 0);
        } else if (kind == "fc") {
            l.kind = LayerKind::Fc;
            l.in_features = lj.at("in_features");
            l.out_features = lj.at("out_features");
        } else {
            throw std::invalid_argument("topology: unknown layer kind '" + kind + "'");
        }
        l.has_bn = lj.value("bn", false);
        l.has_relu = lj.value("relu", true);
        l.fixed8 = lj.value("fixed8", false);
        t.layers.push_back(l);
    }
    return t;
}

// FNV-1a over the canonical topology JSON; stable across runs and platforms.
inline uint64_t topology_hash(const Topology& t) {
    std::string s = topology_to_json(t).dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Reference model: 2 conv + 2 fc, first and last layers fixed at 8 bits.
inline Topology reference_cnn(int in_h = 8, int in_w = 8, int classes = 10) {
    Topology t;
    t.in_ch = 1;
    t.in_h = in_h;
    t.in_w = in_w;
    t.classes = classes;
    LayerConfig c0;
    c0.kind = LayerKind::Conv;
    c0.in_ch = 1;
    c0.out_ch = 8;
    c0.kernel = 3;
    c0.stride = 1;
    c0.pad = 1;
    c0.has_bn = true;
    c0.fixed8 = true;
    LayerConfig c1;
    c1.kind = LayerKind::Conv;
    c1.in_ch = 8;
    c1.out_ch = 16;
    c1.kernel = 3;
    c1.stride = 2;
    c1.pad = 1;
    c1.has_bn = true;
    int h1 = (in_h + 2 - 3) / 2 + 1, w1 = (in_w + 2 - 3) / 2 + 1;
    LayerConfig f0;
    f0.kind = LayerKind::Fc;
    f0.in_features = 16 * h1 * w1;
    f0.out_features = 32;
    f0.has_bn = true;
    LayerConfig f1;
    f1.kind = LayerKind::Fc;
    f1.in_features = 32;
    f1.out_features = classes;
    f1.has_relu = false;
    f1.fixed8 = true;
    t.layers = {c0, c1, f0, f1};
    return t;
}

// 8-layer mini-VGG (6 conv + 2 fc).
inline Topology mini_vgg(int in_h = 12, int in_w = 12, int classes = 10) {
    Topology t;
    t.in_ch = 1;
    t.in_h = in_h;
    t.in_w = in_w;
    t.classes = classes;
    auto conv = [](int ic, int oc, int stride, bool fixed = false) {
        LayerConfig c;
        c.kind = LayerKind::Conv;
        c.in_ch = ic;
        c.out_ch = oc;
        c.kernel = 3;
        c.stride = stride;
        c.pad = 1;
        c.has_bn = true;
        c.fixed8 = fixed;
        return c;
    };
    int h = in_h;
    t.layers.push_back(conv(1, 8, 1, true));
    t.layers.push_back(conv(8, 8, 1));
    t.layers.push_back(conv(8, 16, 2));
    h = (h + 2 - 3) / 2 + 1;
    t.layers.push_back(conv(16, 16, 1));
    t.layers.push_back(conv(16, 32, 2));
    h = (h + 2 - 3) / 2 + 1;
    t.layers.push_back(conv(32, 32, 1));
    LayerConfig f0;
    f0.kind = LayerKind::Fc;
    f0.in_features = 32 * h * h;
    f0.out_features = 64;
    f0.has_bn = true;
    t.layers.push_back(f0);
    LayerConfig f1;
    f1.kind = LayerKind::Fc;
    f1.in_features = 64;
    f1.out_features = classes;
    f1.has_relu = false;
    f1.fixed8 = true;
    t.layers.push_back(f1);
    return t;
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    if (j.contains("topology")) {
        if (j["topology"].is_string()) {
            std::string name = j["topology"];
            if (name == "reference_cnn")
                c.topology = reference_cnn(j.value("in_h", 8), j.value("in_w", 8));
            else if (name == "mini_vgg")
                c.topology = mini_vgg(j.value("in_h", 12), j.value("in_w", 12));
            else
                throw std::invalid_argument("config: unknown topology preset '" + name + "'");
        } else {
            c.topology = topology_from_json(j["topology"]);
        }
    } else {
        c.topology = reference_cnn();
    }
    c.weight_bits = j.value("weight_bits", c.weight_bits);
    if (c.weight_bits.empty()) throw std::invalid_argument("config: empty bit candidate set");
    std::sort(c.weight_bits.begin(), c.weight_bits.end());
    if (j.contains("sampler")) {
        const auto& s = j["sampler"];
        c.sampler.mc_samples = s.value("mc_samples", c.sampler.mc_samples);
        c.sampler.include_max_policy = s.value("include_max_policy", c.sampler.include_max_policy);
        c.sampler.lowest_bit_weight = s.value("lowest_bit_weight", c.sampler.lowest_bit_weight);
        if (c.sampler.mc_samples < 1) throw std::invalid_argument("config: mc_samples must be >= 1");
    }
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        c.schedule.k0 = s.value("k0", c.schedule.k0);
        c.schedule.epsilon = s.value("epsilon", c.schedule.epsilon);
        std::string mode = s.value("mode", "bound");
        c.schedule.mode = mode == "literal" ? CriterionMode::Literal : CriterionMode::BoundDistance;
    }
    if (j.contains("idm")) {
        const auto& s = j["idm"];
        c.idm.beta = s.value("beta", c.idm.beta);
        c.idm.rectify_q = s.value("rectify_q", c.idm.rectify_q);
        c.idm.eps_stab = s.value("eps_stab", c.idm.eps_stab);
    }
    if (j.contains("optimizer")) {
        const auto& s = j["optimizer"];
        c.optimizer.lr = s.value("lr", c.optimizer.lr);
        c.optimizer.momentum = s.value("momentum", c.optimizer.momentum);
        c.optimizer.weight_decay = s.value("weight_decay", c.optimizer.weight_decay);
        c.optimizer.warmup_epochs = s.value("warmup_epochs", c.optimizer.warmup_epochs);
    }
    if (j.contains("search")) {
        const auto& s = j["search"];
        c.search.lambda = s.value("lambda", c.search.lambda);
        c.search.budget = s.value("budget", c.search.budget);
        c.search.max_steps = s.value("max_steps", c.search.max_steps);
        c.search.calibration_batches = s.value("calibration_batches", c.search.calibration_batches);
        c.search.workers = s.value("workers", c.search.workers);
        c.search.recalibrate_bn = s.value("recalibrate_bn", c.search.recalibrate_bn);
        c.search.coupled_moves = s.value("coupled_moves", c.search.coupled_moves);
    }
    if (j.contains("dataset")) {
        const auto& s = j["dataset"];
        c.dataset.kind = s.value("kind", c.dataset.kind);
        c.dataset.images = s.value("images", c.dataset.images);
        c.dataset.labels = s.value("labels", c.dataset.labels);
        c.dataset.classes = s.value("classes", c.dataset.classes);
        c.dataset.samples = s.value("samples", c.dataset.samples);
        c.dataset.height = s.value("height", c.dataset.height);
        c.dataset.width = s.value("width", c.dataset.width);
        c.dataset.contrast = s.value("contrast", c.dataset.contrast);
        c.dataset.noise = s.value("noise", c.dataset.noise);
        c.dataset.seed = s.value("seed", c.dataset.seed);
        c.dataset.val_fraction = s.value("val_fraction", c.dataset.val_fraction);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out", c.out_dir);
    c.use_schedule = j.value("use_schedule", true);
    c.use_idm = j.value("use_idm", true);
    c.use_fairness = j.value("use_fairness", true);
    return c;
}

inline json run_config_to_json(const RunConfig& c) {
    json j;
    j["topology"] = topology_to_json(c.topology);
    j["weight_bits"] = c.weight_bits;
    j["sampler"] = {{"mc_samples", c.sampler.mc_samples},
                    {"include_max_policy", c.sampler.include_max_policy},
                    {"lowest_bit_weight", c.sampler.lowest_bit_weight}};
    j["schedule"] = {{"k0", c.schedule.k0},
                     {"epsilon", c.schedule.epsilon},
                     {"mode", c.schedule.mode == CriterionMode::Literal ? "literal" : "bound"}};
    j["idm"] = {{"beta", c.idm.beta}, {"rectify_q", c.idm.rectify_q}, {"eps_stab", c.idm.eps_stab}};
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"momentum", c.optimizer.momentum},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"warmup_epochs", c.optimizer.warmup_epochs}};
    j["search"] = {{"lambda", c.search.lambda},
                   {"budget", c.search.budget},
                   {"max_steps", c.search.max_steps},
                   {"calibration_batches", c.search.calibration_batches},
                   {"workers", c.search.workers},
                   {"recalibrate_bn", c.search.recalibrate_bn},
                   {"coupled_moves", c.search.coupled_moves}};
    j["dataset"] = {{"kind", c.dataset.kind},       {"images", c.dataset.images},
                    {"labels", c.dataset.labels},   {"classes", c.dataset.classes},
                    {"samples", c.dataset.samples}, {"height", c.dataset.height},
                    {"width", c.dataset.width},     {"contrast", c.dataset.contrast},
                    {"noise", c.dataset.noise},     {"seed", c.dataset.seed},
                    {"val_fraction", c.dataset.val_fraction}};
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["use_schedule"] = c.use_schedule;
    j["use_idm"] = c.use_idm;
    j["use_fairness"] = c.use_fairness;
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    json j;
    in >> j;
    return run_config_from_json(j);
}

}  // namespace mpq
