// Command-line front end: supernet training, bit-width search, evaluation,
// and the analysis probes. Exit codes: 0 success, 2 usage/config error,
// 3 numerical failure, 4 infeasible search budget.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mpq/trainer.hpp"

namespace fs = std::filesystem;
using namespace mpq;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir = "out";
    int seed = -1;
    int workers = 0;
    bool no_schedule = false, no_idm = false, no_fairness = false;
    std::string criterion_mode;
};

RunConfig resolve_config(const CommonFlags& f) {
    RunConfig cfg = f.config_path.empty() ? RunConfig{} : load_run_config(f.config_path);
    if (f.seed >= 0) cfg.seed = static_cast<unsigned>(f.seed);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (f.workers > 0) cfg.search.workers = f.workers;
    if (f.no_schedule) cfg.use_schedule = false;
    if (f.no_idm) cfg.use_idm = false;
    if (f.no_fairness) cfg.use_fairness = false;
    if (f.criterion_mode == "literal")
        cfg.schedule.mode = CriterionMode::Literal;
    else if (f.criterion_mode == "bound")
        cfg.schedule.mode = CriterionMode::BoundDistance;
    else if (!f.criterion_mode.empty())
        throw std::invalid_argument("unknown --criterion-mode '" + f.criterion_mode + "'");
    return cfg;
}

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "run configuration JSON");
    cmd->add_option("--out", f.out_dir, "output directory");
    cmd->add_option("--seed", f.seed, "rng seed override");
    cmd->add_option("--workers", f.workers, "parallel candidate evaluations");
    cmd->add_flag("--no-schedule", f.no_schedule, "disable the dynamic bit-width scheduler");
    cmd->add_flag("--no-idm", f.no_idm, "disable the feature alignment loss");
    cmd->add_flag("--no-fairness", f.no_fairness, "disable the fairness weight-decay rule");
    cmd->add_option("--criterion-mode", f.criterion_mode, "literal|bound");
}

void write_file(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

Policy policy_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open policy file " + path);
    json j;
    in >> j;
    Policy p;
    for (const auto& e : j) p.bits.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
    return p;
}

json policy_to_json(const Policy& p) {
    json j = json::array();
    for (auto [bw, ba] : p.bits) j.push_back({bw, ba});
    return j;
}

int cmd_train(const CommonFlags& flags, int epochs_override, const std::string& resume) {
    RunConfig cfg = resolve_config(flags);
    if (epochs_override > 0) cfg.epochs = epochs_override;
    Trainer trainer(cfg);
    if (!resume.empty()) trainer.load(resume);
    fs::create_directories(cfg.out_dir);
    // the fully resolved config is written next to the outputs for reproducibility
    write_file(fs::path(cfg.out_dir) / "resolved_config.json", run_config_to_json(cfg).dump(2));
    long target = trainer.total_steps();
    long epoch_len = trainer.steps_per_epoch();
    while (trainer.step < target) {
        trainer.run_step();
        if (trainer.step % epoch_len == 0) {
            trainer.save((fs::path(cfg.out_dir) / "ckpt.bin").string());
            auto rep = trainer.eval_policy(trainer.net.max_policy());
            std::cout << "epoch " << trainer.step / epoch_len << "/" << cfg.epochs
                      << "  val_acc(max-bit)=" << rep.accuracy << "  val_loss=" << rep.loss
                      << "\n";
            if (trainer.scheduler.last_report)
                write_file(fs::path(cfg.out_dir) / "criterion.csv",
                           criterion_csv(*trainer.scheduler.last_report));
        }
    }
    trainer.save((fs::path(cfg.out_dir) / "ckpt.bin").string());
    write_file(fs::path(cfg.out_dir) / "train_log.csv", trainer.log_csv.str());
    std::cout << "checkpoint: " << (fs::path(cfg.out_dir) / "ckpt.bin").string() << "\n";
    return 0;
}

int cmd_search(const CommonFlags& flags, const std::string& ckpt) {
    RunConfig cfg = resolve_config(flags);
    Trainer trainer(cfg);
    trainer.load(ckpt);
    trainer.net.training = false;
    if (!(cfg.search.budget > 0)) {
        // default: 60% of the max-bit BitOps
        cfg.search.budget = 0.6 * bitops(trainer.net.max_policy(), trainer.net);
    }
    auto calib = trainer.calibration_batches(cfg.search.calibration_batches);
    std::size_t val_n = std::min<std::size_t>(trainer.data.val.size(), 2000);
    auto val_x = trainer.data.val.batch(0, val_n);
    auto val_y = trainer.data.val.batch_labels(0, val_n);
    GreedySearch search(trainer.net, cfg.search, [&](const Policy& p) {
        return evaluate_candidate(trainer.net, p, calib, val_x, val_y, cfg.search.recalibrate_bn);
    });
    auto result = search.run();
    fs::create_directories(cfg.out_dir);
    std::ostringstream jsonl;
    for (const auto& rec : result.trajectory) {
        json j{{"step", rec.step},   {"accepted_layer", rec.accepted_layer},
               {"direction", rec.direction}, {"bw", rec.bw},
               {"ba", rec.ba},       {"loss", rec.loss},
               {"bitops", rec.bitops}, {"J", rec.j}};
        jsonl << j.dump() << "\n";
    }
    write_file(fs::path(cfg.out_dir) / "trajectory.jsonl", jsonl.str());
    write_file(fs::path(cfg.out_dir) / "policy.json", policy_to_json(result.policy).dump());
    std::cout << "final loss=" << result.final_loss << " bitops=" << result.final_bitops
              << " policy=" << Supernet::policy_str(result.policy) << "\n";
    return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& ckpt, const std::string& policy_path) {
    RunConfig cfg = resolve_config(flags);
    Trainer trainer(cfg);
    trainer.load(ckpt);
    Policy p = policy_path.empty() ? trainer.net.max_policy() : policy_from_json_file(policy_path);
    auto rep = trainer.eval_policy(p);
    json out{{"accuracy", rep.accuracy}, {"loss", rep.loss}, {"samples", rep.samples},
             {"policy", policy_to_json(p)}};
    fs::create_directories(cfg.out_dir);
    write_file(fs::path(cfg.out_dir) / "eval.json", out.dump(2));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_criterion_dump(const CommonFlags& flags, const std::string& ckpt) {
    RunConfig cfg = resolve_config(flags);
    Trainer trainer(cfg);
    if (!ckpt.empty()) trainer.load(ckpt);
    auto rep = unstable_criterion(trainer.net, cfg.schedule.epsilon, cfg.schedule.mode,
                                  trainer.step);
    auto csv = criterion_csv(rep);
    if (!flags.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        write_file(fs::path(cfg.out_dir) / "criterion.csv", csv);
    }
    std::cout << csv;
    return 0;
}

int cmd_analyze_regress2d(const CommonFlags& flags, const std::vector<int>& bits, int seeds,
                          int steps) {
    RunConfig cfg = resolve_config(flags);
    fs::create_directories(cfg.out_dir);
    std::ostringstream summary;
    summary << "seed,grad_variance_4bit,crossings_4bit\n";
    for (int s = 0; s < seeds; ++s) {
        Regress2dConfig rc;
        rc.bits = bits;
        rc.seed = cfg.seed + static_cast<unsigned>(s);
        if (steps > 0) rc.steps = steps;
        auto run = regress2d(rc);
        write_file(fs::path(cfg.out_dir) / ("regress2d_seed" + std::to_string(s) + ".csv"),
                   regress2d_csv(run));
        auto it = std::find(bits.begin(), bits.end(), 4);
        if (it != bits.end()) {
            std::size_t k = static_cast<std::size_t>(it - bits.begin());
            summary << s << "," << normalized_grad_variance(run.grad_norm[k]) << ","
                    << count_boundary_crossings(run.quantized[k], brs(4, rc.gamma)) << "\n";
        }
    }
    write_file(fs::path(cfg.out_dir) / "regress2d_summary.csv", summary.str());
    return 0;
}

int cmd_analyze_distance(const CommonFlags& flags, const std::string& ckpt, int layer,
                         const std::vector<int>& bits, int steps) {
    RunConfig cfg = resolve_config(flags);
    Trainer trainer(cfg);
    if (!ckpt.empty()) trainer.load(ckpt);
    std::ostringstream csv;
    csv << "step";
    for (int b : bits) csv << ",dist_" << b;
    csv << "\n";
    for (int t = 0; t < steps; ++t) {
        trainer.run_step();
        auto d = weight_distance(trainer.net, layer, bits);
        csv << trainer.step;
        for (double v : d) csv << "," << v;
        csv << "\n";
    }
    fs::create_directories(cfg.out_dir);
    write_file(fs::path(cfg.out_dir) / "distance.csv", csv.str());
    return 0;
}

int cmd_analyze_density(const CommonFlags& flags, const std::string& ckpt, int layer,
                        const std::vector<int>& bits, int bins) {
    RunConfig cfg = resolve_config(flags);
    Trainer trainer(cfg);
    trainer.load(ckpt);
    auto batch = trainer.data.val.batch(0, std::min<std::size_t>(trainer.data.val.size(), 256));
    auto reports = output_density(trainer.net, layer, bits, batch, bins);
    fs::create_directories(cfg.out_dir);
    for (const auto& r : reports)
        write_file(fs::path(cfg.out_dir) / ("density_" + std::to_string(r.layer) + "_" +
                                            std::to_string(r.bit) + ".csv"),
                   density_csv(r));
    if (reports.size() == 2)
        std::cout << "symmetric_kl=" << symmetric_kl(reports[0], reports[1]) << "\n";
    return 0;
}

int cmd_analyze_perturb(const CommonFlags& flags, const std::string& ckpt, int low_bit,
                        int high_bit, int batches, float lr) {
    RunConfig cfg = resolve_config(flags);
    Trainer trainer(cfg);
    trainer.load(ckpt);
    trainer.net.training = false;
    std::ostringstream csv;
    csv << "batch,low_bit,delta_loss\n";
    for (int i = 0; i < batches; ++i) {
        std::size_t start = static_cast<std::size_t>(i) * cfg.batch_size;
        if (start >= trainer.data.train.size()) break;
        auto x = trainer.data.train.batch(start, cfg.batch_size);
        auto y = trainer.data.train.batch_labels(start, cfg.batch_size);
        double dl = loss_perturbation_probe(trainer.net, trainer.net.max_policy(),
                                            trainer.policy_all(low_bit), x, y, lr);
        csv << i << "," << low_bit << "," << dl << "\n";
        if (high_bit > 0) {
            double dh = loss_perturbation_probe(trainer.net, trainer.net.max_policy(),
                                                trainer.policy_all(high_bit), x, y, lr);
            csv << i << "," << high_bit << "," << dh << "\n";
        }
    }
    fs::create_directories(cfg.out_dir);
    write_file(fs::path(cfg.out_dir) / "perturb.csv", csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weight-sharing mixed-precision quantization engine"};
    app.require_subcommand(1);

    CommonFlags flags;
    int epochs_override = 0;
    std::string resume, ckpt, policy_path;
    std::vector<int> bits{2, 6};
    int layer = 1, seeds = 20, steps = 0, bins = 48, low_bit = 2, high_bit = 5, batches = 20;
    float probe_lr = 2e-4f;

    auto* train = app.add_subcommand("train", "train the weight-sharing supernet");
    add_common(train, flags);
    train->add_option("--epochs", epochs_override, "epoch count override");
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* search = app.add_subcommand("search", "bidirectional greedy bit-width search");
    add_common(search, flags);
    search->add_option("--ckpt", ckpt, "trained checkpoint")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a policy");
    add_common(eval, flags);
    eval->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    eval->add_option("--policy", policy_path, "policy JSON (default: all-max-bit)");

    auto* crit = app.add_subcommand("criterion-dump", "dump the per-layer instability scores");
    add_common(crit, flags);
    crit->add_option("--ckpt", ckpt, "checkpoint (optional)");

    auto* analyze = app.add_subcommand("analyze", "diagnostic probes");
    analyze->require_subcommand(1);
    auto* a_reg = analyze->add_subcommand("regress2d", "scalar weight-sharing regression probe");
    add_common(a_reg, flags);
    a_reg->add_option("--bits", bits, "bit set");
    a_reg->add_option("--seeds", seeds, "number of seeds");
    a_reg->add_option("--steps", steps, "steps per run");
    auto* a_dist = analyze->add_subcommand("distance", "latent-to-quantized distance trace");
    add_common(a_dist, flags);
    a_dist->add_option("--ckpt", ckpt, "checkpoint to start from");
    a_dist->add_option("--layer", layer, "layer id");
    a_dist->add_option("--bits", bits, "bits to trace");
    a_dist->add_option("--steps", steps, "training steps to record")->default_val(100);
    auto* a_den = analyze->add_subcommand("density", "output histogram per bit");
    add_common(a_den, flags);
    a_den->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    a_den->add_option("--layer", layer, "layer id");
    a_den->add_option("--bits", bits, "bits to compare");
    a_den->add_option("--bins", bins, "histogram bins");
    auto* a_per = analyze->add_subcommand("perturb", "cross-bit loss perturbation probe");
    add_common(a_per, flags);
    a_per->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    a_per->add_option("--low-bit", low_bit, "co-update bit");
    a_per->add_option("--high-bit", high_bit, "comparison bit (0 to skip)");
    a_per->add_option("--batches", batches, "number of probe batches");
    a_per->add_option("--lr", probe_lr, "probe step size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) return cmd_train(flags, epochs_override, resume);
        if (search->parsed()) return cmd_search(flags, ckpt);
        if (eval->parsed()) return cmd_eval(flags, ckpt, policy_path);
        if (crit->parsed()) return cmd_criterion_dump(flags, ckpt);
        if (a_reg->parsed()) return cmd_analyze_regress2d(flags, bits, seeds, steps);
        if (a_dist->parsed()) return cmd_analyze_distance(flags, ckpt, layer, bits, steps);
        if (a_den->parsed()) return cmd_analyze_density(flags, ckpt, layer, bits, bins);
        if (a_per->parsed())
            return cmd_analyze_perturb(flags, ckpt, low_bit, high_bit, batches, probe_lr);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        std::cerr << "error: " << msg << "\n";
        if (msg.find("budget") != std::string::npos) return 4;
        if (msg.find("non-finite") != std::string::npos || msg.find("NaN") != std::string::npos)
            return 3;
        return 1;
    }
    return 2;
}
