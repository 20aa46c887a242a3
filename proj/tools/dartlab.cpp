#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dartlab/dartlab.hpp"

namespace fs = std::filesystem;
using dartlab::json;

namespace {

std::vector<double> parse_alpha_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        if (!cell.empty()) out.push_back(std::stod(cell));
    }
    return out;
}

int cmd_gen_data(const std::string& dataset, std::size_t n, double rotation, double noise,
                 double shift_x, double shift_y, std::uint64_t seed, const std::string& out_dir) {
    std::pair<dartlab::LabeledSet, dartlab::LabeledSet> pair;
    if (dataset == "two_moons") {
        pair = dartlab::gen_two_moons_shift(n, rotation, noise, seed);
    } else if (dataset == "blobs") {
        pair = dartlab::gen_blobs_shift(n, shift_x, shift_y, noise, seed);
    } else {
        std::cerr << "unknown dataset: " << dataset << "\n";
        return 1;
    }
    const fs::path dir = out_dir;
    dartlab::save_csv(pair.first.features, &pair.first.labels, dir / "source.csv");
    dartlab::save_csv(pair.second.features, &pair.second.labels, dir / "target.csv");
    std::cout << "wrote " << (dir / "source.csv").string() << " and "
              << (dir / "target.csv").string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool force) {
    dartlab::ExperimentConfig cfg = dartlab::load_experiment_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    dartlab::RunStatus status = dartlab::run_experiment(cfg, force);
    if (status.skipped) {
        std::cout << "already complete: " << cfg.output_dir << " (use --force to rerun)\n";
        return 0;
    }
    const auto& o = status.outcome;
    std::printf("nat_acc_test=%.4f pgd_acc_test=%.4f (selected iteration %ld)\n", o.nat_acc_test,
                o.pgd_acc_test, o.selected_iteration);
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir, int trials,
              std::uint64_t seed, bool force) {
    dartlab::ExperimentConfig cfg = dartlab::load_experiment_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    dartlab::SweepResult result = dartlab::random_search(cfg, trials, seed, force);
    if (result.skipped) {
        std::cout << "already complete: " << cfg.output_dir << " (use --force to rerun)\n";
        return 0;
    }
    for (const auto& t : result.trials) {
        if (t.failed)
            std::printf("trial %d FAILED: %s\n", t.trial, t.error.c_str());
        else
            std::printf("trial %d nat_val=%.4f pgd_val=%.4f nat_test=%.4f pgd_test=%.4f%s\n",
                        t.trial, t.nat_acc_val, t.pgd_acc_val, t.nat_acc_test, t.pgd_acc_test,
                        t.trial == result.best_trial ? "  <- selected" : "");
    }
    return result.best_trial >= 0 ? 0 : 1;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, double alpha, int steps) {
    dartlab::ModelParams params = dartlab::load_checkpoint(ckpt);
    dartlab::LabeledSet test =
        dartlab::load_labeled_csv(data_path, dartlab::Domain::target, dartlab::Split::test);
    dartlab::AttackConfig attack;
    attack.alpha = alpha;
    attack.steps = alpha > 0.0 ? steps : 0;
    attack.step_size = alpha > 0.0 ? alpha / 8.0 : 0.0;
    const dartlab::EvalMetrics m = dartlab::evaluate(params, test, attack);
    json out{{"nat_acc", m.nat_acc}, {"robust_acc", m.robust_acc}, {"alpha", alpha},
             {"steps", attack.steps}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_theory_check(const std::string& instance_path, const std::string& out_path) {
    std::ifstream in(instance_path);
    if (!in.good()) {
        std::cerr << "cannot open instance: " << instance_path << "\n";
        return 1;
    }
    json doc;
    in >> doc;
    dartlab::theory::Instance inst = dartlab::theory::instance_from_json(doc);
    dartlab::theory::BoundReport report = dartlab::theory::check_bound(inst);
    json rep = dartlab::theory::report_to_json(report);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        out << rep.dump(2) << "\n";
    } else {
        std::cout << rep.dump(2) << "\n";
    }
    return report.all_hold() ? 0 : 2;
}

int cmd_alpha_sweep(const std::string& config_path, const std::string& out_dir,
                    const std::string& alphas_csv, bool force) {
    dartlab::ExperimentConfig cfg = dartlab::load_experiment_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    std::vector<double> alphas = parse_alpha_list(alphas_csv);
    auto rows = dartlab::alpha_sweep(cfg, alphas, force);
    std::cout << dartlab::alpha_sweep_csv(rows);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dartlab: adversarially robust unsupervised domain adaptation at desk scale"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_dataset = "two_moons", gd_out = ".";
    std::size_t gd_n = 2000;
    double gd_rotation = 30.0, gd_noise = 0.1, gd_shift_x = 1.0, gd_shift_y = 0.5;
    std::uint64_t gd_seed = 1;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic domain-shift pair as CSV");
    gen->add_option("--dataset", gd_dataset, "two_moons | blobs");
    gen->add_option("--n", gd_n, "points per domain");
    gen->add_option("--rotation", gd_rotation, "target rotation in degrees (two_moons)");
    gen->add_option("--noise", gd_noise, "noise standard deviation");
    gen->add_option("--shift-x", gd_shift_x, "target mean shift x (blobs)");
    gen->add_option("--shift-y", gd_shift_y, "target mean shift y (blobs)");
    gen->add_option("--seed", gd_seed, "generator seed");
    gen->add_option("--out", gd_out, "output directory");

    // train
    std::string tr_config, tr_out;
    bool tr_force = false;
    auto* train = app.add_subcommand("train", "run one experiment from a config file");
    train->add_option("--config", tr_config, "experiment config JSON")->required();
    train->add_option("--out", tr_out, "output directory (overrides config)");
    train->add_flag("--force", tr_force, "rerun even if the directory is complete");

    // sweep
    std::string sw_config, sw_out;
    int sw_trials = 4;
    std::uint64_t sw_seed = 1;
    bool sw_force = false;
    auto* sweep = app.add_subcommand("sweep", "random-search over the tuning distributions");
    sweep->add_option("--config", sw_config, "experiment config JSON")->required();
    sweep->add_option("--trials", sw_trials, "number of random-search trials");
    sweep->add_option("--seed", sw_seed, "sweep seed");
    sweep->add_option("--out", sw_out, "output directory (overrides config)");
    sweep->add_flag("--force", sw_force, "rerun even if the directory is complete");

    // eval
    std::string ev_ckpt, ev_data;
    double ev_alpha = 0.1;
    int ev_steps = 20;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labelled CSV");
    eval->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    eval->add_option("--data", ev_data, "labelled CSV path")->required();
    eval->add_option("--alpha", ev_alpha, "perturbation radius");
    eval->add_option("--steps", ev_steps, "PGD iterations");

    // theory-check
    std::string th_instance, th_out;
    auto* theory = app.add_subcommand("theory-check", "check the bound on a finite instance");
    theory->add_option("--instance", th_instance, "instance JSON")->required();
    theory->add_option("--out", th_out, "report path (stdout when omitted)");

    // alpha-sweep
    std::string as_config, as_out, as_alphas = "0,0.05,0.1,0.2";
    bool as_force = false;
    auto* alpha = app.add_subcommand("alpha-sweep",
                                     "robust accuracy as a function of perturbation size");
    alpha->add_option("--config", as_config, "experiment config JSON")->required();
    alpha->add_option("--alphas", as_alphas, "comma-separated radii");
    alpha->add_option("--out", as_out, "output directory (overrides config)");
    alpha->add_flag("--force", as_force, "retrain even if models exist");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gd_dataset, gd_n, gd_rotation, gd_noise, gd_shift_x, gd_shift_y,
                                gd_seed, gd_out);
        if (train->parsed()) return cmd_train(tr_config, tr_out, tr_force);
        if (sweep->parsed()) return cmd_sweep(sw_config, sw_out, sw_trials, sw_seed, sw_force);
        if (eval->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_alpha, ev_steps);
        if (theory->parsed()) return cmd_theory_check(th_instance, th_out);
        if (alpha->parsed()) return cmd_alpha_sweep(as_config, as_out, as_alphas, as_force);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
