#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dartlab/attacks.hpp"
#include "dartlab/common.hpp"
#include "dartlab/data.hpp"
#include "dartlab/models.hpp"
#include "dartlab/trainers.hpp"

namespace dartlab {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct DatasetSpec {
    std::string type = "two_moons"; // two_moons | blobs | csv
    std::size_t n_per_domain = 2000;
    double rotation_degrees = 30.0;
    double noise_std = 0.1;
    double shift_x = 1.0; // blobs
    double shift_y = 0.5;
    std::string source_csv;
    std::string target_csv;
    std::array<double, 3> target_ratios{0.6, 0.2, 0.2};
    double source_train_fraction = 0.8;
};

struct ModelSpecConfig {
    std::vector<std::size_t> g_hidden{32, 16};
    std::vector<std::size_t> d_hidden{16};
};

struct SeedPack {
    std::uint64_t data = 1;
    std::uint64_t init = 2;
    std::uint64_t train = 3;
    std::uint64_t attack = 4;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    ModelSpecConfig model;
    AlgorithmConfig algorithm;
    AttackConfig eval_attack;
    SeedPack seeds;
    int trials = 4;
    std::string output_dir;
    std::vector<AlgorithmTag> sweep_algorithms; // alpha-sweep only; empty = just `algorithm`
};

namespace detail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (j.contains(key) && !j[key].is_null()) return j[key].get<T>();
    return fallback;
}

inline AttackConfig attack_from_json(const json& j, const AttackConfig& base = {}) {
    AttackConfig a = base;
    a.alpha = get_or(j, "alpha", a.alpha);
    a.steps = get_or(j, "steps", a.steps);
    a.step_size = get_or(j, "step_size", a.step_size);
    a.random_start = get_or(j, "random_start", a.random_start);
    if (j.contains("clamp") && !j["clamp"].is_null()) {
        auto box = j["clamp"].get<std::vector<double>>();
        check(box.size() == 2, "config: clamp must be [lo, hi]");
        a.clamp = std::array<double, 2>{box[0], box[1]};
    }
    return a;
}

inline json attack_to_json(const AttackConfig& a) {
    json j{{"alpha", a.alpha},
           {"steps", a.steps},
           {"step_size", a.step_size},
           {"random_start", a.random_start}};
    if (a.clamp)
        j["clamp"] = {(*a.clamp)[0], (*a.clamp)[1]};
    else
        j["clamp"] = nullptr;
    return j;
}

inline DivergenceKind divergence_from_json(const json& j) {
    DivergenceKind k;
    const std::string tag = get_or<std::string>(j, "tag", "dann");
    if (tag == "dann")
        k.tag = DivergenceTag::dann;
    else if (tag == "mmd")
        k.tag = DivergenceTag::mmd;
    else if (tag == "coral")
        k.tag = DivergenceTag::coral;
    else if (tag == "cmd")
        k.tag = DivergenceTag::cmd;
    else
        throw std::invalid_argument("config: unknown divergence tag: " + tag);
    k.sigma = get_or(j, "sigma", k.sigma);
    k.moments = get_or(j, "moments", k.moments);
    if (j.contains("box") && !j["box"].is_null()) {
        auto box = j["box"].get<std::vector<double>>();
        check(box.size() == 2, "config: divergence box must be [a, b]");
        k.box = std::make_pair(box[0], box[1]);
    }
    k.validate();
    return k;
}

inline json divergence_to_json(const DivergenceKind& k) {
    json j{{"tag", divergence_name(k.tag)}, {"sigma", k.sigma}, {"moments", k.moments}};
    if (k.box)
        j["box"] = {k.box->first, k.box->second};
    else
        j["box"] = nullptr;
    return j;
}

inline AlgorithmConfig algorithm_from_json(const json& j) {
    AlgorithmConfig a;
    a.tag = algorithm_from_name(get_or<std::string>(j, "tag", "dart"));
    const std::string src = get_or<std::string>(j, "source_choice", "clean");
    if (src == "clean")
        a.source_choice = SourceChoice::clean;
    else if (src == "adv")
        a.source_choice = SourceChoice::adv;
    else if (src == "kl")
        a.source_choice = SourceChoice::kl;
    else
        throw std::invalid_argument("config: unknown source choice: " + src);
    a.lambda1 = get_or(j, "lambda1", a.lambda1);
    a.lambda2 = get_or(j, "lambda2", a.lambda2);
    a.trades_beta = get_or(j, "trades_beta", a.trades_beta);
    if (j.contains("divergence")) a.divergence = divergence_from_json(j["divergence"]);
    if (j.contains("train_attack")) a.train_attack = attack_from_json(j["train_attack"]);
    if (j.contains("optimizer")) {
        const json& o = j["optimizer"];
        a.optimizer.learning_rate = get_or(o, "learning_rate", a.optimizer.learning_rate);
        a.optimizer.beta1 = get_or(o, "beta1", a.optimizer.beta1);
        a.optimizer.beta2 = get_or(o, "beta2", a.optimizer.beta2);
        a.optimizer.weight_decay = get_or(o, "weight_decay", a.optimizer.weight_decay);
    }
    a.batch_size = get_or(j, "batch_size", a.batch_size);
    a.iterations = get_or(j, "iterations", a.iterations);
    a.checkpoint_frequency = get_or(j, "checkpoint_frequency", a.checkpoint_frequency);
    a.discriminator_steps = get_or(j, "discriminator_steps", a.discriminator_steps);
    const std::string mode = get_or<std::string>(j, "dann_mode", "gradient_reversal");
    if (mode == "gradient_reversal")
        a.dann_mode = DannMode::gradient_reversal;
    else if (mode == "alternating")
        a.dann_mode = DannMode::alternating;
    else
        throw std::invalid_argument("config: unknown dann mode: " + mode);
    if (j.contains("ablation")) {
        const json& ab = j["ablation"];
        a.ablation.drop_divergence = get_or(ab, "drop_divergence", false);
        a.ablation.drop_third_term = get_or(ab, "drop_third_term", false);
        a.ablation.fixed_pseudo_labels = get_or(ab, "fixed_pseudo_labels", false);
        a.ablation.self_labels = get_or(ab, "self_labels", false);
    }
    a.pseudo_label_refresh = get_or(j, "pseudo_label_refresh", false);
    a.validate();
    return a;
}

inline json algorithm_to_json(const AlgorithmConfig& a) {
    const char* src = a.source_choice == SourceChoice::clean
                          ? "clean"
                          : (a.source_choice == SourceChoice::adv ? "adv" : "kl");
    return json{
        {"tag", algorithm_name(a.tag)},
        {"source_choice", src},
        {"lambda1", a.lambda1},
        {"lambda2", a.lambda2},
        {"trades_beta", a.trades_beta},
        {"divergence", divergence_to_json(a.divergence)},
        {"train_attack", attack_to_json(a.train_attack)},
        {"optimizer",
         {{"learning_rate", a.optimizer.learning_rate},
          {"beta1", a.optimizer.beta1},
          {"beta2", a.optimizer.beta2},
          {"weight_decay", a.optimizer.weight_decay}}},
        {"batch_size", a.batch_size},
        {"iterations", a.iterations},
        {"checkpoint_frequency", a.checkpoint_frequency},
        {"discriminator_steps", a.discriminator_steps},
        {"dann_mode", a.dann_mode == DannMode::gradient_reversal ? "gradient_reversal"
                                                                 : "alternating"},
        {"ablation",
         {{"drop_divergence", a.ablation.drop_divergence},
          {"drop_third_term", a.ablation.drop_third_term},
          {"fixed_pseudo_labels", a.ablation.fixed_pseudo_labels},
          {"self_labels", a.ablation.self_labels}}},
        {"pseudo_label_refresh", a.pseudo_label_refresh}};
}

} // namespace detail

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig cfg;
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        cfg.dataset.type = detail::get_or<std::string>(d, "type", cfg.dataset.type);
        cfg.dataset.n_per_domain = detail::get_or(d, "n_per_domain", cfg.dataset.n_per_domain);
        cfg.dataset.rotation_degrees =
            detail::get_or(d, "rotation_degrees", cfg.dataset.rotation_degrees);
        cfg.dataset.noise_std = detail::get_or(d, "noise_std", cfg.dataset.noise_std);
        cfg.dataset.shift_x = detail::get_or(d, "shift_x", cfg.dataset.shift_x);
        cfg.dataset.shift_y = detail::get_or(d, "shift_y", cfg.dataset.shift_y);
        cfg.dataset.source_csv = detail::get_or<std::string>(d, "source_csv", "");
        cfg.dataset.target_csv = detail::get_or<std::string>(d, "target_csv", "");
        if (d.contains("target_ratios")) {
            auto r = d["target_ratios"].get<std::vector<double>>();
            check(r.size() == 3, "config: target_ratios must have 3 entries");
            cfg.dataset.target_ratios = {r[0], r[1], r[2]};
        }
        cfg.dataset.source_train_fraction =
            detail::get_or(d, "source_train_fraction", cfg.dataset.source_train_fraction);
    }
    if (j.contains("model")) {
        cfg.model.g_hidden = detail::get_or(j["model"], "g_hidden", cfg.model.g_hidden);
        cfg.model.d_hidden = detail::get_or(j["model"], "d_hidden", cfg.model.d_hidden);
    }
    if (j.contains("algorithm")) cfg.algorithm = detail::algorithm_from_json(j["algorithm"]);
    if (j.contains("eval_attack")) cfg.eval_attack = detail::attack_from_json(j["eval_attack"]);
    if (j.contains("seeds")) {
        const json& s = j["seeds"];
        cfg.seeds.data = detail::get_or(s, "data", cfg.seeds.data);
        cfg.seeds.init = detail::get_or(s, "init", cfg.seeds.init);
        cfg.seeds.train = detail::get_or(s, "train", cfg.seeds.train);
        cfg.seeds.attack = detail::get_or(s, "attack", cfg.seeds.attack);
    }
    cfg.trials = detail::get_or(j, "trials", cfg.trials);
    cfg.output_dir = detail::get_or<std::string>(j, "output_dir", "");
    if (j.contains("algorithms"))
        for (const auto& name : j["algorithms"])
            cfg.sweep_algorithms.push_back(algorithm_from_name(name.get<std::string>()));

    // Evaluation defaults: 20 PGD iterations, step alpha/8.
    if (cfg.eval_attack.alpha > 0.0) {
        if (cfg.eval_attack.steps == 0) cfg.eval_attack.steps = 20;
        if (cfg.eval_attack.step_size == 0.0) cfg.eval_attack.step_size = cfg.eval_attack.alpha / 8.0;
    }
    // Image-like CSV data lives in [0,1]; synthetic data is unclamped.
    if (cfg.dataset.type == "csv") {
        if (!cfg.eval_attack.clamp) cfg.eval_attack.clamp = std::array<double, 2>{0.0, 1.0};
        if (!cfg.algorithm.train_attack.clamp)
            cfg.algorithm.train_attack.clamp = std::array<double, 2>{0.0, 1.0};
    }
    cfg.eval_attack.validate();
    return cfg;
}

inline json experiment_config_to_json(const ExperimentConfig& cfg) {
    json d{{"type", cfg.dataset.type},
           {"n_per_domain", cfg.dataset.n_per_domain},
           {"rotation_degrees", cfg.dataset.rotation_degrees},
           {"noise_std", cfg.dataset.noise_std},
           {"shift_x", cfg.dataset.shift_x},
           {"shift_y", cfg.dataset.shift_y},
           {"source_csv", cfg.dataset.source_csv},
           {"target_csv", cfg.dataset.target_csv},
           {"target_ratios",
            {cfg.dataset.target_ratios[0], cfg.dataset.target_ratios[1],
             cfg.dataset.target_ratios[2]}},
           {"source_train_fraction", cfg.dataset.source_train_fraction}};
    json out{{"dataset", std::move(d)},
             {"model", {{"g_hidden", cfg.model.g_hidden}, {"d_hidden", cfg.model.d_hidden}}},
             {"algorithm", detail::algorithm_to_json(cfg.algorithm)},
             {"eval_attack", detail::attack_to_json(cfg.eval_attack)},
             {"seeds",
              {{"data", cfg.seeds.data},
               {"init", cfg.seeds.init},
               {"train", cfg.seeds.train},
               {"attack", cfg.seeds.attack}}},
             {"trials", cfg.trials},
             {"output_dir", cfg.output_dir}};
    if (!cfg.sweep_algorithms.empty()) {
        json names = json::array();
        for (AlgorithmTag t : cfg.sweep_algorithms) names.push_back(algorithm_name(t));
        out["algorithms"] = std::move(names);
    }
    return out;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path);
    check_runtime(in.good(), "cannot open config: " + path.string());
    json j;
    in >> j;
    return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

struct DataBundle {
    LabeledSet source_train;
    UnlabeledSet target_train;
    LabeledSet target_val;
    LabeledSet target_test;
    std::size_t input_dim = 0;
    std::size_t classes = 0;
};

inline DataBundle prepare_data(const DatasetSpec& spec, std::uint64_t data_seed) {
    LabeledSet source, target;
    if (spec.type == "two_moons") {
        auto pair = gen_two_moons_shift(spec.n_per_domain, spec.rotation_degrees, spec.noise_std,
                                        data_seed);
        source = std::move(pair.first);
        target = std::move(pair.second);
    } else if (spec.type == "blobs") {
        auto pair = gen_blobs_shift(spec.n_per_domain, spec.shift_x, spec.shift_y, spec.noise_std,
                                    data_seed);
        source = std::move(pair.first);
        target = std::move(pair.second);
    } else if (spec.type == "csv") {
        source = load_labeled_csv(spec.source_csv, Domain::source, Split::train);
        target = load_labeled_csv(spec.target_csv, Domain::target, Split::train);
        check(source.features.cols() == target.features.cols(),
              "csv source and target widths differ");
    } else {
        throw std::invalid_argument("unknown dataset type: " + spec.type);
    }

    DataBundle bundle;
    bundle.source_train = split_source_train(source, spec.source_train_fraction,
                                             derive_seed(data_seed, "source-split"));
    TargetSplits splits =
        split_target(target, spec.target_ratios, derive_seed(data_seed, "target-split"));
    bundle.target_train = std::move(splits.train);
    bundle.target_val = std::move(splits.val);
    bundle.target_test = std::move(splits.test);
    bundle.input_dim = bundle.source_train.features.cols();
    int max_label = 0;
    for (int y : bundle.source_train.labels) max_label = std::max(max_label, y);
    for (int y : bundle.target_val.labels) max_label = std::max(max_label, y);
    for (int y : bundle.target_test.labels) max_label = std::max(max_label, y);
    bundle.classes = static_cast<std::size_t>(max_label) + 1;
    check(bundle.classes >= 2, "dataset must have at least two classes");
    return bundle;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
    double nat_acc = 0.0;
    double robust_acc = 0.0;
};

namespace detail {

inline double accuracy(const ModelParams& params, const Tensor& x, const std::vector<int>& y) {
    const std::vector<int> pred =
        argmax_rows(forward_value(params, "f", forward_value(params, "g", x)));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (pred[i] == y[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(y.size());
}

} // namespace detail

// Standard accuracy plus robust accuracy under a per-example cross-entropy
// PGD attack. Examples are independent, so one batched attack takes the same
// per-example sign steps as attacking each row alone.
inline EvalMetrics evaluate(const ModelParams& params, const LabeledSet& test,
                            const AttackConfig& attack, Rng* rng = nullptr) {
    check(!test.labels.empty(), "evaluate: labels required");
    EvalMetrics m;
    m.nat_acc = detail::accuracy(params, test.features, test.labels);
    if (attack.alpha > 0.0 && attack.steps > 0) {
        Tensor adv = pgd(ce_objective(params, test.labels), test.features, attack, rng);
        m.robust_acc = detail::accuracy(params, adv, test.labels);
    } else {
        m.robust_acc = m.nat_acc;
    }
    return m;
}

// Worst-case accuracy against the exhaustive lattice oracle: an example
// counts as robust only if every lattice point classifies correctly.
inline double grid_robust_accuracy(const ModelParams& params, const LabeledSet& test,
                                   double alpha, int points_per_dim) {
    std::size_t robust = 0;
    const std::size_t d = test.features.cols();
    for (std::size_t i = 0; i < test.size(); ++i) {
        Tensor x({1, d});
        for (std::size_t j = 0; j < d; ++j) x.at(0, j) = test.features.at(i, j);
        const int label = test.labels[i];
        auto misclassified = [&](const Tensor& cand) {
            const std::vector<int> pred =
                argmax_rows(forward_value(params, "f", forward_value(params, "g", cand)));
            return pred[0] != label ? 1.0 : 0.0;
        };
        auto [point, worst] = grid_bruteforce(misclassified, x, alpha, points_per_dim);
        (void)point;
        if (worst < 0.5) ++robust;
    }
    return static_cast<double>(robust) / static_cast<double>(test.size());
}

// Human-readable statement of the objective a configuration trains; ablation
// switches and degenerate weights fold away their terms.
inline std::string objective_string(const AlgorithmConfig& c) {
    const bool atk = c.train_attack.alpha > 0.0 && c.train_attack.steps > 0;
    const std::string div = divergence_name(c.divergence.tag);
    switch (c.tag) {
        case AlgorithmTag::natural_uda: {
            std::string s = "CE(f.g(x_s), y_s)";
            if (c.effective_lambda1() > 0.0)
                s += " + l1*Omega_" + div + "(g(x_s), g(x_t))";
            return s;
        }
        case AlgorithmTag::at_src:
            return atk ? "CE(f.g(adv_ce(x_s)), y_s)" : "CE(f.g(x_s), y_s)";
        case AlgorithmTag::trades_src: {
            std::string s = "CE(f.g(x_s), y_s)";
            if (c.trades_beta > 0.0 && atk) s += " + beta*KL(f.g(adv_kl(x_s)) || f.g(x_s))";
            return s;
        }
        case AlgorithmTag::at_tgt_pseudo:
            return atk ? "CE(f.g(adv_ce(x_t)), yhat_t)" : "CE(f.g(x_t), yhat_t)";
        case AlgorithmTag::trades_tgt_pseudo: {
            std::string s = "CE(f.g(x_t), yhat_t)";
            if (c.trades_beta > 0.0 && atk) s += " + beta*KL(f.g(adv_kl(x_t)) || f.g(x_t))";
            return s;
        }
        case AlgorithmTag::at_plus_uda: {
            std::string s = atk ? "CE(f.g(adv_ce(x_s)), y_s)" : "CE(f.g(x_s), y_s)";
            if (c.effective_lambda1() > 0.0)
                s += " + l1*Omega_" + div + (atk ? "(g(adv_ce(x_s)), g(x_t))" : "(g(x_s), g(x_t))");
            return s;
        }
        case AlgorithmTag::dart: {
            std::string src = "x_s";
            if (atk && c.source_choice == SourceChoice::adv) src = "adv_ce(x_s)";
            if (atk && c.source_choice == SourceChoice::kl) src = "adv_kl(x_s)";
            const bool any_target = c.effective_lambda1() > 0.0 || c.effective_lambda2() > 0.0;
            const std::string tgt = (atk && any_target) ? "adv_dart(x_t)" : "x_t";
            std::string s = "CE(f.g(" + src + "), y_s)";
            if (c.effective_lambda1() > 0.0)
                s += " + l1*Omega_" + div + "(g(" + src + "), g(" + tgt + "))";
            if (c.effective_lambda2() > 0.0) s += " + l2*CE(f.g(" + tgt + "), yhat_t)";
            return s;
        }
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Experiment execution
// ---------------------------------------------------------------------------

struct TrialOutcome {
    int trial = 0;
    AlgorithmConfig config;
    std::string objective;
    double nat_acc_val = 0.0;
    double pgd_acc_val = 0.0;
    double nat_acc_test = 0.0;
    double pgd_acc_test = 0.0;
    long selected_iteration = -1;
    bool failed = false;
    std::string error;
};

namespace detail {

inline void append_cadence_record(std::vector<json>& lines, const char* phase, int trial,
                                  const TrainRecord& rec, double pgd_val) {
    lines.push_back(json{{"phase", phase},
                         {"trial", trial},
                         {"iteration", rec.iteration},
                         {"nat_acc_val", rec.proxy_accuracy},
                         {"pgd_acc_val", pgd_val},
                         {"selected", false}});
}

inline void append_train_log(std::vector<json>& lines, const char* phase,
                             const std::vector<TrainRecord>& log) {
    for (const TrainRecord& rec : log) {
        json terms = json::object();
        for (const auto& [name, v] : rec.losses) terms[name] = v;
        lines.push_back(json{{"phase", phase},
                             {"iteration", rec.iteration},
                             {"losses", std::move(terms)},
                             {"proxy_accuracy", rec.proxy_accuracy},
                             {"pseudo_label_swap", rec.pseudo_label_swap}});
    }
}

inline void write_jsonl_atomic(const fs::path& path, const std::vector<json>& lines) {
    std::ostringstream out;
    for (const json& line : lines) out << line.dump() << '\n';
    write_file_atomic(path, out.str());
}

} // namespace detail

// One end-to-end trial: natural pretraining, checkpoint selection by proxy
// accuracy, the robust algorithm from that initialization, early-stopped model
// selection, and a final test evaluation. Artifacts land in `dir`.
inline TrialOutcome execute_trial(const ExperimentConfig& cfg, const AlgorithmConfig& algo,
                                  int trial_id, const DataBundle& data, const fs::path& dir) {
    fs::create_directories(dir);
    MlpSpec spec_g, spec_f, spec_d;
    spec_g.widths.push_back(data.input_dim);
    for (std::size_t w : cfg.model.g_hidden) spec_g.widths.push_back(w);
    spec_f.widths = {spec_g.widths.back(), data.classes};
    spec_d.widths.push_back(spec_g.widths.back());
    for (std::size_t w : cfg.model.d_hidden) spec_d.widths.push_back(w);
    spec_d.widths.push_back(1);

    ModelParams init = init_params(spec_g, spec_f, spec_d, cfg.seeds.init);

    ProxyEval proxy = [&data](const ModelParams& p) {
        return detail::accuracy(p, data.target_val.features, data.target_val.labels);
    };

    std::vector<json> metric_lines;
    auto make_hook = [&](const char* phase) {
        return CadenceHook([&, phase](const TrainRecord& rec, const ModelParams& p) {
            const EvalMetrics val = evaluate(p, data.target_val, cfg.eval_attack);
            detail::append_cadence_record(metric_lines, phase, trial_id, rec, val.robust_acc);
        });
    };

    std::vector<json> log_lines;

    // Step 1: natural pretraining with the same divergence and optimizer; the
    // checkpoint with the best proxy accuracy initializes the algorithm.
    AlgorithmConfig pre = algo;
    pre.tag = AlgorithmTag::natural_uda;
    pre.train_attack.steps = 0;
    pre.train_attack.alpha = 0.0;
    Trainer pretrainer(pre, cfg.seeds.train, cfg.seeds.attack);
    TrainResult pretrain = pretrainer.run(init, data.source_train, data.target_train, proxy,
                                          std::nullopt, make_hook("pretrain"));
    detail::append_train_log(log_lines, "pretrain", pretrain.log);
    save_checkpoint(pretrain.best_params, dir / "ckpt_pretrain.json");

    TrainResult result;
    if (algo.tag == AlgorithmTag::natural_uda) {
        result = std::move(pretrain);
    } else {
        ModelParams start = pretrain.best_params;
        std::optional<PseudoLabelState> pseudo;
        if (Trainer::needs_pseudo_labels(algo.tag)) {
            sync_pseudo_predictor(start);
            PseudoLabelState state;
            state.labels = predict_pseudo_labels(start, data.target_train.features);
            state.best_proxy_accuracy = pretrain.best_proxy_accuracy;
            pseudo = std::move(state);
        }
        Trainer trainer(algo, cfg.seeds.train, cfg.seeds.attack);
        result = trainer.run(start, data.source_train, data.target_train, proxy,
                             std::move(pseudo), make_hook("train"));
        detail::append_train_log(log_lines, "train", result.log);
    }

    save_checkpoint(result.best_params, dir / "ckpt_selected.json");

    const EvalMetrics val = evaluate(result.best_params, data.target_val, cfg.eval_attack);
    const EvalMetrics test = evaluate(result.best_params, data.target_test, cfg.eval_attack);

    TrialOutcome outcome;
    outcome.trial = trial_id;
    outcome.config = algo;
    outcome.objective = objective_string(algo);
    outcome.nat_acc_val = val.nat_acc;
    outcome.pgd_acc_val = val.robust_acc;
    outcome.nat_acc_test = test.nat_acc;
    outcome.pgd_acc_test = test.robust_acc;
    outcome.selected_iteration = result.best_iteration;

    metric_lines.push_back(json{{"phase", "final"},
                                {"trial", trial_id},
                                {"iteration", result.best_iteration},
                                {"nat_acc_val", val.nat_acc},
                                {"pgd_acc_val", val.robust_acc},
                                {"nat_acc_test", test.nat_acc},
                                {"pgd_acc_test", test.robust_acc},
                                {"selected", true},
                                {"objective", outcome.objective},
                                {"checkpoint", "ckpt_selected.json"},
                                {"pretrain_checkpoint", "ckpt_pretrain.json"}});
    detail::write_jsonl_atomic(dir / "metrics.jsonl", metric_lines);
    detail::write_jsonl_atomic(dir / "train_log.jsonl", log_lines);
    return outcome;
}

namespace detail {

inline bool trial_completed(const fs::path& dir, const json& cfg_json) {
    if (!fs::exists(dir / "DONE") || !fs::exists(dir / "config.json")) return false;
    std::ifstream in(dir / "config.json");
    json stored;
    try {
        in >> stored;
    } catch (...) {
        return false;
    }
    return stored == cfg_json;
}

inline void mark_done(const fs::path& dir, const json& cfg_json) {
    write_file_atomic(dir / "config.json", cfg_json.dump(2) + "\n");
    write_file_atomic(dir / "DONE", "ok\n");
}

} // namespace detail

struct RunStatus {
    bool skipped = false;
    TrialOutcome outcome;
};

// `dartlab train`: one configured run in its output directory. Re-running a
// completed directory with the same config is a no-op unless forced.
inline RunStatus run_experiment(const ExperimentConfig& cfg, bool force = false) {
    check(!cfg.output_dir.empty(), "run_experiment: output_dir required");
    const fs::path dir = cfg.output_dir;
    const json cfg_json = experiment_config_to_json(cfg);
    if (!force && detail::trial_completed(dir, cfg_json)) return RunStatus{true, {}};
    DataBundle data = prepare_data(cfg.dataset, cfg.seeds.data);
    RunStatus status;
    status.outcome = execute_trial(cfg, cfg.algorithm, 0, data, dir);
    detail::mark_done(dir, cfg_json);
    return status;
}

// ---------------------------------------------------------------------------
// Random search (`dartlab sweep`)
// ---------------------------------------------------------------------------

struct SweepResult {
    bool skipped = false;
    std::vector<TrialOutcome> trials;
    int best_trial = -1;
};

// Draws one hyperparameter sample per trial from the search distributions:
// lambda1, lambda2 ~ 10^U(-1,1); discriminator steps ~ round(2^U(0,3));
// adam beta1 ~ U(0, 0.9); learning rate ~ 10^U(-4.5,-2.5).
inline AlgorithmConfig sample_trial_config(const AlgorithmConfig& base, Rng& rng) {
    AlgorithmConfig c = base;
    c.lambda1 = std::pow(10.0, rng.uniform(-1.0, 1.0));
    c.lambda2 = std::pow(10.0, rng.uniform(-1.0, 1.0));
    c.discriminator_steps =
        static_cast<int>(std::lround(std::pow(2.0, rng.uniform(0.0, 3.0))));
    c.optimizer.beta1 = rng.uniform(0.0, 0.9);
    c.optimizer.learning_rate = std::pow(10.0, rng.uniform(-4.5, -2.5));
    return c;
}

// Runs `trials` sampled configurations end to end and selects the best by
// target-validation standard accuracy (ties: higher robust validation
// accuracy, then lower trial id). A failed trial is recorded and skipped.
inline SweepResult random_search(const ExperimentConfig& cfg, int trials, std::uint64_t sweep_seed,
                                 bool force = false) {
    check(trials >= 1, "random_search: trials must be >= 1");
    check(!cfg.output_dir.empty(), "random_search: output_dir required");
    const fs::path dir = cfg.output_dir;
    json sweep_cfg = experiment_config_to_json(cfg);
    sweep_cfg["sweep"] = {{"trials", trials}, {"seed", sweep_seed}};
    if (!force && detail::trial_completed(dir, sweep_cfg)) return SweepResult{true, {}, -1};
    fs::create_directories(dir);

    DataBundle data = prepare_data(cfg.dataset, cfg.seeds.data);
    Rng rng(derive_seed(sweep_seed, "random-search"));

    SweepResult result;
    std::vector<json> summary;
    for (int k = 0; k < trials; ++k) {
        AlgorithmConfig trial_cfg = sample_trial_config(cfg.algorithm, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "trial_%03d", k);
        TrialOutcome outcome;
        try {
            outcome = execute_trial(cfg, trial_cfg, k, data, dir / name);
        } catch (const std::exception& e) {
            outcome.trial = k;
            outcome.config = trial_cfg;
            outcome.failed = true;
            outcome.error = e.what();
        }
        summary.push_back(json{{"trial", k},
                               {"lambda1", trial_cfg.lambda1},
                               {"lambda2", trial_cfg.lambda2},
                               {"discriminator_steps", trial_cfg.discriminator_steps},
                               {"beta1", trial_cfg.optimizer.beta1},
                               {"learning_rate", trial_cfg.optimizer.learning_rate},
                               {"nat_acc_val", outcome.nat_acc_val},
                               {"pgd_acc_val", outcome.pgd_acc_val},
                               {"nat_acc_test", outcome.nat_acc_test},
                               {"pgd_acc_test", outcome.pgd_acc_test},
                               {"failed", outcome.failed},
                               {"error", outcome.error}});
        result.trials.push_back(std::move(outcome));
    }

    for (std::size_t k = 0; k < result.trials.size(); ++k) {
        const TrialOutcome& t = result.trials[k];
        if (t.failed) continue;
        if (result.best_trial < 0) {
            result.best_trial = static_cast<int>(k);
            continue;
        }
        const TrialOutcome& best = result.trials[static_cast<std::size_t>(result.best_trial)];
        if (t.nat_acc_val > best.nat_acc_val ||
            (t.nat_acc_val == best.nat_acc_val && t.pgd_acc_val > best.pgd_acc_val))
            result.best_trial = static_cast<int>(k);
    }
    for (std::size_t k = 0; k < summary.size(); ++k)
        summary[k]["selected"] = (static_cast<int>(k) == result.best_trial);

    detail::write_jsonl_atomic(dir / "sweep_summary.jsonl", summary);
    if (result.best_trial >= 0) {
        const TrialOutcome& best = result.trials[static_cast<std::size_t>(result.best_trial)];
        json best_doc{{"trial", result.best_trial},
                      {"algorithm", detail::algorithm_to_json(best.config)},
                      {"nat_acc_val", best.nat_acc_val},
                      {"pgd_acc_val", best.pgd_acc_val},
                      {"nat_acc_test", best.nat_acc_test},
                      {"pgd_acc_test", best.pgd_acc_test}};
        detail::write_file_atomic(dir / "best.json", best_doc.dump(2) + "\n");
    }
    detail::mark_done(dir, sweep_cfg);
    return result;
}

// ---------------------------------------------------------------------------
// Robust accuracy as a function of perturbation size (`dartlab alpha-sweep`)
// ---------------------------------------------------------------------------

struct AlphaSweepRow {
    double alpha = 0.0;
    std::string algorithm;
    double nat_acc = 0.0;
    double robust_acc = 0.0;
};

inline std::string alpha_sweep_csv(const std::vector<AlphaSweepRow>& rows) {
    std::ostringstream out;
    out << "alpha,algorithm,nat_acc,robust_acc\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.alpha);
        out << buf << ',' << r.algorithm << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", r.nat_acc);
        out << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.17g", r.robust_acc);
        out << buf << '\n';
    }
    return out.str();
}

// Trains each requested algorithm once, then evaluates the selected model at
// every alpha with the standard 20-step PGD evaluation.
inline std::vector<AlphaSweepRow> alpha_sweep(const ExperimentConfig& cfg,
                                              const std::vector<double>& alphas,
                                              bool force = false) {
    check(!alphas.empty(), "alpha_sweep: at least one alpha required");
    check(!cfg.output_dir.empty(), "alpha_sweep: output_dir required");
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    DataBundle data = prepare_data(cfg.dataset, cfg.seeds.data);

    std::vector<AlgorithmTag> algorithms = cfg.sweep_algorithms;
    if (algorithms.empty()) algorithms.push_back(cfg.algorithm.tag);

    std::vector<AlphaSweepRow> rows;
    for (AlgorithmTag tag : algorithms) {
        AlgorithmConfig algo = cfg.algorithm;
        algo.tag = tag;
        const fs::path subdir = dir / algorithm_name(tag);
        json cfg_json = detail::algorithm_to_json(algo);
        TrialOutcome outcome;
        if (!force && detail::trial_completed(subdir, cfg_json)) {
            outcome.config = algo; // re-evaluate from the stored checkpoint
        } else {
            outcome = execute_trial(cfg, algo, 0, data, subdir);
            detail::mark_done(subdir, cfg_json);
        }
        ModelParams selected = load_checkpoint(subdir / "ckpt_selected.json");
        for (double alpha : alphas) {
            AttackConfig attack = cfg.eval_attack;
            attack.alpha = alpha;
            attack.steps = alpha > 0.0 ? (attack.steps > 0 ? attack.steps : 20) : 0;
            attack.step_size = alpha > 0.0 ? alpha / 8.0 : 0.0;
            const EvalMetrics m = evaluate(selected, data.target_test, attack);
            rows.push_back(AlphaSweepRow{alpha, algorithm_name(tag), m.nat_acc, m.robust_acc});
        }
    }
    detail::write_file_atomic(dir / "alpha_sweep.csv", alpha_sweep_csv(rows));
    return rows;
}

} // namespace dartlab
