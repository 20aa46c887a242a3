#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dartlab/attacks.hpp"
#include "dartlab/autodiff.hpp"
#include "dartlab/common.hpp"
#include "dartlab/data.hpp"
#include "dartlab/divergence.hpp"
#include "dartlab/models.hpp"

namespace dartlab {

enum class AlgorithmTag {
    natural_uda,
    at_src,
    trades_src,
    at_tgt_pseudo,
    trades_tgt_pseudo,
    at_plus_uda,
    dart
};

enum class SourceChoice { clean, adv, kl };
enum class DannMode { gradient_reversal, alternating };

inline const char* algorithm_name(AlgorithmTag t) {
    switch (t) {
        case AlgorithmTag::natural_uda: return "natural_uda";
        case AlgorithmTag::at_src: return "at_src";
        case AlgorithmTag::trades_src: return "trades_src";
        case AlgorithmTag::at_tgt_pseudo: return "at_tgt_pseudo";
        case AlgorithmTag::trades_tgt_pseudo: return "trades_tgt_pseudo";
        case AlgorithmTag::at_plus_uda: return "at_plus_uda";
        case AlgorithmTag::dart: return "dart";
    }
    return "?";
}

inline AlgorithmTag algorithm_from_name(const std::string& s) {
    if (s == "natural_uda") return AlgorithmTag::natural_uda;
    if (s == "at_src") return AlgorithmTag::at_src;
    if (s == "trades_src") return AlgorithmTag::trades_src;
    if (s == "at_tgt_pseudo") return AlgorithmTag::at_tgt_pseudo;
    if (s == "trades_tgt_pseudo") return AlgorithmTag::trades_tgt_pseudo;
    if (s == "at_plus_uda") return AlgorithmTag::at_plus_uda;
    if (s == "dart") return AlgorithmTag::dart;
    throw std::invalid_argument("unknown algorithm tag: " + s);
}

struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
};

struct AblationConfig {
    bool drop_divergence = false;   // forces lambda1 = 0
    bool drop_third_term = false;   // forces lambda2 = 0
    bool fixed_pseudo_labels = false;
    bool self_labels = false;       // current f.g generates labels every cadence
};

struct AlgorithmConfig {
    AlgorithmTag tag = AlgorithmTag::dart;
    SourceChoice source_choice = SourceChoice::clean; // dart only
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double trades_beta = 6.0;
    DivergenceKind divergence;
    AttackConfig train_attack;
    OptimizerConfig optimizer;
    std::size_t batch_size = 128;
    long iterations = 2000;
    long checkpoint_frequency = 100; // K: evaluation and pseudo-label cadence
    int discriminator_steps = 1;     // alternating mode only
    DannMode dann_mode = DannMode::gradient_reversal;
    AblationConfig ablation;
    bool pseudo_label_refresh = false; // the "cg" variants of AT/TRADES(tgt)

    double effective_lambda1() const { return ablation.drop_divergence ? 0.0 : lambda1; }
    double effective_lambda2() const { return ablation.drop_third_term ? 0.0 : lambda2; }

    void validate() const {
        check(std::isfinite(lambda1) && lambda1 >= 0.0, "config: lambda1 must be finite and >= 0");
        check(std::isfinite(lambda2) && lambda2 >= 0.0, "config: lambda2 must be finite and >= 0");
        check(trades_beta >= 0.0, "config: trades_beta must be >= 0");
        check(batch_size >= 1, "config: batch size must be >= 1");
        check(iterations >= 0, "config: iterations must be >= 0");
        check(checkpoint_frequency >= 1, "config: checkpoint frequency must be >= 1");
        check(discriminator_steps >= 1, "config: discriminator steps must be >= 1");
        train_attack.validate();
        divergence.validate();
    }
};

// Adam with bias correction; per-component step counters so alternating
// discriminator updates keep their own schedule.
class Adam {
public:
    explicit Adam(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(ModelParams& params, const std::string& component,
              const std::vector<std::pair<Tensor, Tensor>>& grads) {
        MlpComponent& comp = params.at(component);
        check(grads.size() == comp.layers.size(), "adam: gradient count mismatch");
        State& st = states_[component];
        if (st.m.empty()) {
            for (const auto& layer : comp.layers)
                st.m.emplace_back(Tensor::zeros_like(layer.weight),
                                  Tensor::zeros_like(layer.bias));
            st.v = st.m;
        }
        st.t += 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
        for (std::size_t l = 0; l < comp.layers.size(); ++l) {
            update(comp.layers[l].weight, grads[l].first, st.m[l].first, st.v[l].first, bc1, bc2);
            update(comp.layers[l].bias, grads[l].second, st.m[l].second, st.v[l].second, bc1, bc2);
        }
    }

private:
    struct State {
        std::vector<std::pair<Tensor, Tensor>> m, v;
        long t = 0;
    };

    void update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, double bc1, double bc2) {
        constexpr double kEps = 1e-8;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            double grad = g[i] + cfg_.weight_decay * p[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad * grad;
            p[i] -= cfg_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
        }
        check_runtime(p.all_finite(), "adam: parameters became non-finite");
    }

    OptimizerConfig cfg_;
    std::map<std::string, State> states_;
};

// Independent shuffled epochs over an index pool; a trailing chunk smaller
// than the batch is dropped and the pool reshuffled.
class BatchStream {
public:
    BatchStream(std::size_t pool, std::size_t batch, std::uint64_t seed)
        : batch_(batch), rng_(seed) {
        check(batch >= 1 && batch <= pool, "batch stream: batch size must fit the pool");
        order_.resize(pool);
        for (std::size_t i = 0; i < pool; ++i) order_[i] = i;
        reshuffle();
    }

    const std::vector<std::size_t>& next() {
        if (pos_ + batch_ > order_.size()) reshuffle();
        current_.assign(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                        order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
        pos_ += batch_;
        return current_;
    }

private:
    void reshuffle() {
        for (std::size_t i = order_.size(); i > 1; --i)
            std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_.below(i))]);
        pos_ = 0;
    }

    std::vector<std::size_t> order_;
    std::vector<std::size_t> current_;
    std::size_t pos_ = 0;
    std::size_t batch_;
    Rng rng_;
};

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), x.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(rows[i], j);
    return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      const std::vector<std::size_t>& rows) {
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
    return out;
}

// ---------------------------------------------------------------------------
// Pseudo labels
// ---------------------------------------------------------------------------

struct PseudoLabelState {
    std::vector<int> labels;           // one class index per target training row
    double best_proxy_accuracy = 0.0;  // nondecreasing over a run
};

inline std::vector<int> predict_pseudo_labels(const ModelParams& params,
                                              const Tensor& target_features) {
    return argmax_rows(forward_value(params, "h_p", target_features));
}

// Swap rule: when the current model's proxy accuracy beats the stored best,
// h_p takes f.g's weights, the best is raised, and the labels are regenerated.
// `fixed_pseudo_labels` freezes everything; `self_labels` mirrors the current
// model on every call. Returns whether the labels were regenerated.
inline bool maybe_update_pseudo_labels(PseudoLabelState& state, ModelParams& params,
                                       double current_proxy_accuracy,
                                       const Tensor& target_features,
                                       const AblationConfig& ablation = {}) {
    if (ablation.fixed_pseudo_labels) return false;
    if (ablation.self_labels) {
        sync_pseudo_predictor(params);
        state.labels = predict_pseudo_labels(params, target_features);
        state.best_proxy_accuracy = std::max(state.best_proxy_accuracy, current_proxy_accuracy);
        return true;
    }
    if (current_proxy_accuracy > state.best_proxy_accuracy) {
        sync_pseudo_predictor(params);
        state.best_proxy_accuracy = current_proxy_accuracy;
        state.labels = predict_pseudo_labels(params, target_features);
        return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

struct TrainRecord {
    long iteration = 0;
    std::map<std::string, double> losses;
    double proxy_accuracy = 0.0;
    bool pseudo_label_swap = false;
};

struct TrainResult {
    ModelParams final_params;
    ModelParams best_params; // highest proxy accuracy seen at the cadence
    double best_proxy_accuracy = -1.0;
    long best_iteration = -1;
    std::vector<TrainRecord> log;
    PseudoLabelState pseudo;
};

// Standard accuracy of the current f.g under the tuning proxy (the labelled
// target validation split at this scale).
using ProxyEval = std::function<double(const ModelParams&)>;

// Invoked at every evaluation cadence with the fresh record and the live
// parameters (harness uses it to collect robust metrics per checkpoint).
using CadenceHook = std::function<void(const TrainRecord&, const ModelParams&)>;

class Trainer {
public:
    Trainer(AlgorithmConfig cfg, std::uint64_t train_seed, std::uint64_t attack_seed)
        : cfg_(std::move(cfg)),
          train_seed_(train_seed),
          attack_rng_(derive_seed(attack_seed, "attack")) {
        cfg_.validate();
    }

    static bool needs_pseudo_labels(AlgorithmTag tag) {
        return tag == AlgorithmTag::dart || tag == AlgorithmTag::at_tgt_pseudo ||
               tag == AlgorithmTag::trades_tgt_pseudo;
    }

    static bool uses_target_batches(AlgorithmTag tag) {
        return tag != AlgorithmTag::at_src && tag != AlgorithmTag::trades_src;
    }

    TrainResult run(const ModelParams& init, const LabeledSet& source_train,
                    const UnlabeledSet& target_train, const ProxyEval& proxy,
                    std::optional<PseudoLabelState> pseudo = std::nullopt,
                    const CadenceHook& hook = {}) {
        check(source_train.size() >= 1, "trainer: empty source pool");
        ModelParams params = init;

        PseudoLabelState state;
        if (needs_pseudo_labels(cfg_.tag)) {
            check(pseudo.has_value(), "trainer: missing pseudo labels for " +
                                          std::string(algorithm_name(cfg_.tag)));
            state = std::move(*pseudo);
            check(state.labels.size() == target_train.size(),
                  "trainer: pseudo label count must match target pool");
            if (!params.has("h_p")) sync_pseudo_predictor(params);
        }

        std::size_t batch = cfg_.batch_size;
        batch = std::min(batch, source_train.size());
        if (uses_target_batches(cfg_.tag)) {
            check(target_train.size() >= 1, "trainer: empty target pool");
            batch = std::min(batch, target_train.size());
        }
        BatchStream src_stream(source_train.size(), batch,
                               derive_seed(train_seed_, "source-batches"));
        std::optional<BatchStream> tgt_stream;
        if (uses_target_batches(cfg_.tag))
            tgt_stream.emplace(target_train.size(), batch,
                               derive_seed(train_seed_, "target-batches"));

        Adam adam(cfg_.optimizer);
        TrainResult res;

        std::map<std::string, double> losses;
        for (long t = 1; t <= cfg_.iterations; ++t) {
            const auto& src_rows = src_stream.next();
            Tensor xs = gather_rows(source_train.features, src_rows);
            std::vector<int> ys = gather_labels(source_train.labels, src_rows);

            Tensor xt;
            std::vector<int> pseudo_batch;
            if (tgt_stream) {
                const auto& tgt_rows = tgt_stream->next();
                xt = gather_rows(target_train.features, tgt_rows);
                if (needs_pseudo_labels(cfg_.tag))
                    pseudo_batch = gather_labels(state.labels, tgt_rows);
            }

            losses = step(params, adam, xs, ys, xt, pseudo_batch);

            if (t % cfg_.checkpoint_frequency == 0 || t == cfg_.iterations) {
                const double acc = proxy(params);
                bool swap = false;
                if (refreshes_pseudo_labels())
                    swap = maybe_update_pseudo_labels(state, params, acc, target_train.features,
                                                      cfg_.tag == AlgorithmTag::dart
                                                          ? cfg_.ablation
                                                          : AblationConfig{});
                if (acc > res.best_proxy_accuracy) {
                    res.best_proxy_accuracy = acc;
                    res.best_params = params;
                    res.best_iteration = t;
                }
                res.log.push_back(TrainRecord{t, losses, acc, swap});
                if (hook) hook(res.log.back(), params);
            }
        }

        if (res.best_iteration < 0) { // zero-iteration run: the init is the model
            res.best_proxy_accuracy = proxy(params);
            res.best_params = params;
            res.best_iteration = 0;
        }
        res.final_params = params;
        res.pseudo = std::move(state);
        return res;
    }

private:
    bool refreshes_pseudo_labels() const {
        if (cfg_.tag == AlgorithmTag::dart) return true; // ablations gate inside the update
        if (cfg_.tag == AlgorithmTag::at_tgt_pseudo || cfg_.tag == AlgorithmTag::trades_tgt_pseudo)
            return cfg_.pseudo_label_refresh;
        return false;
    }

    bool attack_enabled() const {
        return cfg_.train_attack.alpha > 0.0 && cfg_.train_attack.steps > 0;
    }

    struct DivergenceTerm {
        NodeId node;
        double omega = 0.0;
        bool updates_d = false;
    };

    // Wires the divergence proxy into a joint graph. DANN in gradient-reversal
    // mode routes both feature batches through a reversal layer scaled by
    // lambda1, so one backward pass trains d down and g up the domain loss;
    // in alternating mode d is held fixed here and trained in its own passes.
    DivergenceTerm divergence_term(Graph& g, const ParamBinding& binding,
                                   const ModelParams& params, double lambda1, NodeId feat_s,
                                   NodeId feat_t) {
        if (cfg_.divergence.tag == DivergenceTag::dann) {
            if (cfg_.dann_mode == DannMode::gradient_reversal) {
                NodeId rev_s = g.gradient_reversal(feat_s, lambda1);
                NodeId rev_t = g.gradient_reversal(feat_t, lambda1);
                NodeId ldom = dann_domain_loss(g, binding, params, rev_s, rev_t);
                return DivergenceTerm{ldom, -g.value(ldom).value(), true};
            }
            NodeId ldom = dann_domain_loss(g, binding, params, feat_s, feat_t);
            return DivergenceTerm{g.scale(ldom, -lambda1), -g.value(ldom).value(), false};
        }
        NodeId omega = divergence_node(g, cfg_.divergence, feat_s, feat_t);
        return DivergenceTerm{g.scale(omega, lambda1), g.value(omega).value(), false};
    }

    // Alternating-mode discriminator updates on fixed features.
    void discriminator_passes(ModelParams& params, Adam& adam, const Tensor& feat_s,
                              const Tensor& feat_t) {
        for (int k = 0; k < cfg_.discriminator_steps; ++k) {
            Graph g;
            ParamBinding binding = bind_params(g, params);
            NodeId ldom = dann_domain_loss(g, binding, params, g.constant(feat_s),
                                           g.constant(feat_t));
            apply_component_grads(params, adam, g, binding, ldom, {"d"});
        }
    }

    void apply_component_grads(ModelParams& params, Adam& adam, Graph& g,
                               const ParamBinding& binding, NodeId loss,
                               const std::vector<std::string>& components) {
        for (const std::string& comp : components) {
            const auto& ids = binding.nodes.at(comp);
            std::vector<NodeId> flat;
            for (const auto& [w, b] : ids) {
                flat.push_back(w);
                flat.push_back(b);
            }
            std::vector<Tensor> grads = g.backward(loss, flat);
            std::vector<std::pair<Tensor, Tensor>> pairs;
            for (std::size_t i = 0; i < grads.size(); i += 2)
                pairs.emplace_back(std::move(grads[i]), std::move(grads[i + 1]));
            adam.step(params, comp, pairs);
        }
    }

    // One backward for all components, then per-component Adam updates.
    void joint_update(ModelParams& params, Adam& adam, Graph& g, const ParamBinding& binding,
                      NodeId loss, const std::vector<std::string>& components) {
        std::vector<NodeId> flat;
        std::vector<std::size_t> counts;
        for (const std::string& comp : components) {
            const auto& ids = binding.nodes.at(comp);
            counts.push_back(ids.size());
            for (const auto& [w, b] : ids) {
                flat.push_back(w);
                flat.push_back(b);
            }
        }
        std::vector<Tensor> grads = g.backward(loss, flat);
        std::size_t cursor = 0;
        for (std::size_t c = 0; c < components.size(); ++c) {
            std::vector<std::pair<Tensor, Tensor>> pairs;
            for (std::size_t l = 0; l < counts[c]; ++l) {
                pairs.emplace_back(std::move(grads[cursor]), std::move(grads[cursor + 1]));
                cursor += 2;
            }
            adam.step(params, components[c], pairs);
        }
    }

    std::map<std::string, double> step(ModelParams& params, Adam& adam, const Tensor& xs,
                                       const std::vector<int>& ys, const Tensor& xt,
                                       const std::vector<int>& pseudo_batch) {
        switch (cfg_.tag) {
            case AlgorithmTag::natural_uda:
                return uda_step(params, adam, xs, ys, xt, /*attack_source=*/false);
            case AlgorithmTag::at_plus_uda:
                return uda_step(params, adam, xs, ys, xt, /*attack_source=*/true);
            case AlgorithmTag::at_src:
                return at_step(params, adam, xs, ys);
            case AlgorithmTag::trades_src:
                return trades_step(params, adam, xs, ys);
            case AlgorithmTag::at_tgt_pseudo:
                return at_step(params, adam, xt, pseudo_batch);
            case AlgorithmTag::trades_tgt_pseudo:
                return trades_step(params, adam, xt, pseudo_batch);
            case AlgorithmTag::dart:
                return dart_step(params, adam, xs, ys, xt, pseudo_batch);
        }
        throw std::invalid_argument("unknown algorithm tag");
    }

    // Eq.-(4)-style step: source cross-entropy plus lambda1 * divergence on
    // the learned features; AT+UDA attacks the source batch first.
    std::map<std::string, double> uda_step(ModelParams& params, Adam& adam, const Tensor& xs,
                                           const std::vector<int>& ys, const Tensor& xt,
                                           bool attack_source) {
        Tensor src = xs;
        if (attack_source && attack_enabled())
            src = pgd(ce_objective(params, ys), xs, cfg_.train_attack, &attack_rng_);
        const double lambda1 = cfg_.effective_lambda1();

        const bool alternating_d = lambda1 > 0.0 &&
                                   cfg_.divergence.tag == DivergenceTag::dann &&
                                   cfg_.dann_mode == DannMode::alternating;
        if (alternating_d)
            discriminator_passes(params, adam, forward_value(params, "g", src),
                                 forward_value(params, "g", xt));

        Graph g;
        ParamBinding binding = bind_params(g, params);
        NodeId feat_s = forward(g, binding, params, "g", g.leaf(src));
        NodeId ce = g.softmax_cross_entropy(forward(g, binding, params, "f", feat_s), ys);
        std::map<std::string, double> losses{{"source_ce", g.value(ce).value()}};
        NodeId loss = ce;
        std::vector<std::string> components{"f", "g"};
        if (lambda1 > 0.0) {
            NodeId feat_t = forward(g, binding, params, "g", g.leaf(xt));
            DivergenceTerm div = divergence_term(g, binding, params, lambda1, feat_s, feat_t);
            loss = g.add(loss, div.node);
            losses["omega"] = div.omega;
            if (div.updates_d) components.push_back("d");
        }
        losses["total"] = g.value(loss).value();
        joint_update(params, adam, g, binding, loss, components);
        return losses;
    }

    std::map<std::string, double> at_step(ModelParams& params, Adam& adam, const Tensor& x,
                                          const std::vector<int>& y) {
        Tensor adv = attack_enabled()
                         ? pgd(ce_objective(params, y), x, cfg_.train_attack, &attack_rng_)
                         : x;
        Graph g;
        ParamBinding binding = bind_params(g, params);
        NodeId ce = g.softmax_cross_entropy(
            forward(g, binding, params, "f", forward(g, binding, params, "g", g.leaf(adv))), y);
        joint_update(params, adam, g, binding, ce, {"f", "g"});
        return {{"ce", g.value(ce).value()}, {"total", g.value(ce).value()}};
    }

    // CE(clean) + beta * KL(adv || clean); beta = 0 degenerates to standard
    // training on the clean batch.
    std::map<std::string, double> trades_step(ModelParams& params, Adam& adam, const Tensor& x,
                                              const std::vector<int>& y) {
        Graph g;
        ParamBinding binding = bind_params(g, params);
        NodeId clean_logits = forward(g, binding, params, "f",
                                      forward(g, binding, params, "g", g.leaf(x)));
        NodeId ce = g.softmax_cross_entropy(clean_logits, y);
        std::map<std::string, double> losses{{"ce", g.value(ce).value()}};
        NodeId loss = ce;
        if (cfg_.trades_beta > 0.0 && attack_enabled()) {
            Tensor adv = kl_transform(params, x, cfg_.train_attack, &attack_rng_);
            NodeId adv_logits = forward(g, binding, params, "f",
                                        forward(g, binding, params, "g", g.leaf(adv)));
            NodeId kl = softmax_kl_mean(g, adv_logits, clean_logits);
            losses["kl"] = g.value(kl).value();
            loss = g.add(loss, g.scale(kl, cfg_.trades_beta));
        }
        losses["total"] = g.value(loss).value();
        joint_update(params, adam, g, binding, loss, {"f", "g"});
        return losses;
    }

    // Eq.-(5) step: transform the source, attack the target against
    // lambda1*Omega + lambda2*CE(pseudo), then one joint update on the full
    // objective (with Omega maximized over d).
    std::map<std::string, double> dart_step(ModelParams& params, Adam& adam, const Tensor& xs,
                                            const std::vector<int>& ys, const Tensor& xt,
                                            const std::vector<int>& pseudo_batch) {
        const double lambda1 = cfg_.effective_lambda1();
        const double lambda2 = cfg_.effective_lambda2();

        Tensor src = xs;
        if (attack_enabled()) {
            if (cfg_.source_choice == SourceChoice::adv)
                src = pgd(ce_objective(params, ys), xs, cfg_.train_attack, &attack_rng_);
            else if (cfg_.source_choice == SourceChoice::kl)
                src = kl_transform(params, xs, cfg_.train_attack, &attack_rng_);
        }

        Tensor tgt = xt;
        if (attack_enabled() && (lambda1 > 0.0 || lambda2 > 0.0)) {
            Tensor src_features = forward_value(params, "g", src);
            tgt = dart_target_attack(params, xt, pseudo_batch, cfg_.divergence, src_features,
                                     lambda1, lambda2, cfg_.train_attack, &attack_rng_);
        }

        const bool alternating_d = lambda1 > 0.0 &&
                                   cfg_.divergence.tag == DivergenceTag::dann &&
                                   cfg_.dann_mode == DannMode::alternating;
        if (alternating_d)
            discriminator_passes(params, adam, forward_value(params, "g", src),
                                 forward_value(params, "g", tgt));

        Graph g;
        ParamBinding binding = bind_params(g, params);
        NodeId feat_s = forward(g, binding, params, "g", g.leaf(src));
        NodeId ce = g.softmax_cross_entropy(forward(g, binding, params, "f", feat_s), ys);
        std::map<std::string, double> losses{{"source_ce", g.value(ce).value()}};
        NodeId loss = ce;
        std::vector<std::string> components{"f", "g"};

        std::optional<NodeId> feat_t;
        if (lambda1 > 0.0 || lambda2 > 0.0)
            feat_t = forward(g, binding, params, "g", g.leaf(tgt));
        if (lambda1 > 0.0) {
            DivergenceTerm div = divergence_term(g, binding, params, lambda1, feat_s, *feat_t);
            loss = g.add(loss, div.node);
            losses["omega"] = div.omega;
            if (div.updates_d) components.push_back("d");
        }
        if (lambda2 > 0.0) {
            NodeId tgt_ce = g.softmax_cross_entropy(forward(g, binding, params, "f", *feat_t),
                                                    pseudo_batch);
            losses["target_ce"] = g.value(tgt_ce).value();
            loss = g.add(loss, g.scale(tgt_ce, lambda2));
        }
        losses["total"] = g.value(loss).value();
        joint_update(params, adam, g, binding, loss, components);
        return losses;
    }

    AlgorithmConfig cfg_;
    std::uint64_t train_seed_;
    Rng attack_rng_;
};

} // namespace dartlab
