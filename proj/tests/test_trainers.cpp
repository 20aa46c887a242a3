#include <catch2/catch_amalgamated.hpp>

#include "dartlab/harness.hpp"
#include "dartlab/trainers.hpp"
#include "test_support.hpp"

using namespace dartlab;

namespace {

ModelParams desk_model(std::uint64_t seed) {
    return init_params(MlpSpec{{2, 32, 16}}, MlpSpec{{16, 2}}, MlpSpec{{16, 16, 1}}, seed);
}

// Independent oracle: plain supervised source training, composed directly
// from the tape, the batch stream, and Adam.
ModelParams plain_source_training(ModelParams params, const LabeledSet& src, std::size_t batch,
                                  const OptimizerConfig& opt, std::uint64_t train_seed,
                                  long iterations) {
    BatchStream stream(src.size(), std::min(batch, src.size()),
                       derive_seed(train_seed, "source-batches"));
    Adam adam(opt);
    for (long t = 1; t <= iterations; ++t) {
        const auto& rows = stream.next();
        Tensor xs = gather_rows(src.features, rows);
        std::vector<int> ys = gather_labels(src.labels, rows);
        Graph g;
        ParamBinding binding = bind_params(g, params);
        NodeId ce = g.softmax_cross_entropy(
            forward(g, binding, params, "f", forward(g, binding, params, "g", g.leaf(xs))), ys);
        std::vector<NodeId> ids;
        for (const char* comp : {"f", "g"})
            for (const auto& [w, b] : binding.nodes.at(comp)) {
                ids.push_back(w);
                ids.push_back(b);
            }
        std::vector<Tensor> grads = g.backward(ce, std::span<const NodeId>(ids));
        std::size_t cursor = 0;
        for (const char* comp : {"f", "g"}) {
            std::vector<std::pair<Tensor, Tensor>> pairs;
            for (std::size_t l = 0; l < params.at(comp).layers.size(); ++l) {
                pairs.emplace_back(grads[cursor], grads[cursor + 1]);
                cursor += 2;
            }
            adam.step(params, comp, pairs);
        }
    }
    return params;
}

bool component_equal(const ModelParams& a, const ModelParams& b, const std::string& name) {
    const auto& ca = a.at(name);
    const auto& cb = b.at(name);
    if (ca.layers.size() != cb.layers.size()) return false;
    for (std::size_t l = 0; l < ca.layers.size(); ++l) {
        if (!tensors_equal(ca.layers[l].weight, cb.layers[l].weight)) return false;
        if (!tensors_equal(ca.layers[l].bias, cb.layers[l].bias)) return false;
    }
    return true;
}

struct SmallData {
    LabeledSet src;
    UnlabeledSet tgt;
    LabeledSet val;
};

SmallData small_data(std::uint64_t seed, std::size_t n = 64) {
    auto [source, target] = gen_two_moons_shift(n, 30.0, 0.1, seed);
    TargetSplits splits = split_target(target, {0.6, 0.2, 0.2}, derive_seed(seed, "split"));
    return SmallData{std::move(source), std::move(splits.train), std::move(splits.val)};
}

ProxyEval make_proxy(const SmallData& data) {
    return [&data](const ModelParams& p) {
        const std::vector<int> pred =
            argmax_rows(forward_value(p, "f", forward_value(p, "g", data.val.features)));
        std::size_t correct = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == data.val.labels[i]) ++correct;
        return static_cast<double>(correct) / static_cast<double>(pred.size());
    };
}

PseudoLabelState initial_pseudo(const ModelParams& start, const SmallData& data,
                                const ProxyEval& proxy) {
    ModelParams with_hp = start;
    sync_pseudo_predictor(with_hp);
    PseudoLabelState state;
    state.labels = predict_pseudo_labels(with_hp, data.tgt.features);
    state.best_proxy_accuracy = proxy(start);
    return state;
}

AlgorithmConfig base_config(AlgorithmTag tag) {
    AlgorithmConfig cfg;
    cfg.tag = tag;
    cfg.batch_size = 16;
    cfg.iterations = 10;
    cfg.checkpoint_frequency = 100; // only the final-iteration evaluation fires
    cfg.optimizer.learning_rate = 5e-3;
    return cfg;
}

} // namespace

TEST_CASE("pseudo-label protocol: swap only on strict improvement") {
    SmallData data = small_data(5);
    ModelParams params = desk_model(1);
    sync_pseudo_predictor(params);
    PseudoLabelState state;
    state.best_proxy_accuracy = 0.5;
    state.labels = predict_pseudo_labels(params, data.tgt.features);
    const std::vector<int> initial_labels = state.labels;

    // 0.7 beats 0.5: swap and regenerate
    ModelParams improved = desk_model(2); // different f.g so regenerated labels differ
    improved.components["h_p"] = params.at("h_p");
    CHECK(maybe_update_pseudo_labels(state, improved, 0.7, data.tgt.features));
    CHECK(state.best_proxy_accuracy == 0.7);
    const std::vector<int> after_first = state.labels;
    CHECK(after_first != initial_labels); // regenerated from the new predictor
    CHECK(after_first == predict_pseudo_labels(improved, data.tgt.features));

    // 0.6 does not beat 0.7: state unchanged bitwise
    ModelParams another = desk_model(3);
    another.components["h_p"] = improved.at("h_p");
    CHECK_FALSE(maybe_update_pseudo_labels(state, another, 0.6, data.tgt.features));
    CHECK(state.best_proxy_accuracy == 0.7);
    CHECK(state.labels == after_first);
    CHECK(component_equal(another, improved, "h_p")); // predictor untouched

    // 0.8 beats 0.7: swap again
    CHECK(maybe_update_pseudo_labels(state, another, 0.8, data.tgt.features));
    CHECK(state.best_proxy_accuracy == 0.8);
    CHECK(state.labels == predict_pseudo_labels(another, data.tgt.features));
}

TEST_CASE("pseudo-label ablations: fixed freezes, self mirrors the live model") {
    SmallData data = small_data(6);
    ModelParams params = desk_model(4);
    sync_pseudo_predictor(params);
    PseudoLabelState state;
    state.best_proxy_accuracy = 0.3;
    state.labels = predict_pseudo_labels(params, data.tgt.features);
    const std::vector<int> frozen = state.labels;

    AblationConfig fixed;
    fixed.fixed_pseudo_labels = true;
    ModelParams other = desk_model(9);
    CHECK_FALSE(maybe_update_pseudo_labels(state, other, 0.9, data.tgt.features, fixed));
    CHECK(state.labels == frozen);
    CHECK(state.best_proxy_accuracy == 0.3);

    AblationConfig self;
    self.self_labels = true;
    CHECK(maybe_update_pseudo_labels(state, other, 0.2, data.tgt.features, self));
    CHECK(state.labels == predict_pseudo_labels(other, data.tgt.features));
    CHECK(state.best_proxy_accuracy == 0.3); // max(0.3, 0.2): still nondecreasing
}

TEST_CASE("batch streams draw equal-size batches over shuffled epochs") {
    BatchStream stream(10, 4, 99);
    std::vector<std::size_t> seen;
    for (int i = 0; i < 2; ++i) {
        const auto& batch = stream.next();
        CHECK(batch.size() == 4);
        seen.insert(seen.end(), batch.begin(), batch.end());
    }
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end()); // within one epoch
    BatchStream a(10, 4, 7), b(10, 4, 7);
    CHECK(a.next() == b.next());
    CHECK_THROWS_AS(BatchStream(3, 4, 1), std::invalid_argument);
}

TEST_CASE("degenerate DART reproduces plain source training bitwise") {
    SmallData data = small_data(7);
    ModelParams init = desk_model(11);
    ProxyEval proxy = make_proxy(data);

    for (long iterations : {1L, 3L, 10L}) {
        AlgorithmConfig cfg = base_config(AlgorithmTag::dart);
        cfg.iterations = iterations;
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        cfg.source_choice = SourceChoice::clean;
        cfg.train_attack.alpha = 0.0;
        cfg.train_attack.steps = 0;

        Trainer trainer(cfg, /*train seed*/ 31, /*attack seed*/ 32);
        PseudoLabelState state = initial_pseudo(init, data, proxy);
        TrainResult result = trainer.run(init, data.src, data.tgt, proxy, state);

        ModelParams oracle = plain_source_training(init, data.src, cfg.batch_size,
                                                   cfg.optimizer, 31, iterations);
        CHECK(component_equal(result.final_params, oracle, "f"));
        CHECK(component_equal(result.final_params, oracle, "g"));
        CHECK(component_equal(result.final_params, init, "d")); // untouched
    }
}

TEST_CASE("TRADES with beta zero and AT with alpha zero reproduce standard training") {
    SmallData data = small_data(8);
    ModelParams init = desk_model(13);
    ProxyEval proxy = make_proxy(data);
    ModelParams oracle = plain_source_training(init, data.src, 16, OptimizerConfig{5e-3, 0.9, 0.999, 0.0},
                                               41, 8);

    AlgorithmConfig trades = base_config(AlgorithmTag::trades_src);
    trades.iterations = 8;
    trades.trades_beta = 0.0;
    trades.train_attack.alpha = 0.1;
    trades.train_attack.steps = 5;
    trades.train_attack.step_size = 0.02;
    TrainResult tr = Trainer(trades, 41, 42).run(init, data.src, data.tgt, proxy);
    CHECK(component_equal(tr.final_params, oracle, "f"));
    CHECK(component_equal(tr.final_params, oracle, "g"));

    AlgorithmConfig at = base_config(AlgorithmTag::at_src);
    at.iterations = 8;
    at.train_attack.alpha = 0.0;
    at.train_attack.steps = 5;
    at.train_attack.step_size = 0.02;
    TrainResult ar = Trainer(at, 41, 42).run(init, data.src, data.tgt, proxy);
    CHECK(component_equal(ar.final_params, oracle, "f"));
    CHECK(component_equal(ar.final_params, oracle, "g"));
}

TEST_CASE("DART with lambda2 = 0 and no attack walks the natural-UDA trajectory") {
    SmallData data = small_data(9);
    ModelParams init = desk_model(17);
    ProxyEval proxy = make_proxy(data);

    AlgorithmConfig natural = base_config(AlgorithmTag::natural_uda);
    natural.lambda1 = 0.8;
    TrainResult nat = Trainer(natural, 51, 52).run(init, data.src, data.tgt, proxy);

    AlgorithmConfig dart = base_config(AlgorithmTag::dart);
    dart.lambda1 = 0.8;
    dart.lambda2 = 0.0;
    dart.source_choice = SourceChoice::clean;
    dart.train_attack.alpha = 0.0;
    dart.train_attack.steps = 0;
    PseudoLabelState state = initial_pseudo(init, data, proxy);
    TrainResult dr = Trainer(dart, 51, 52).run(init, data.src, data.tgt, proxy, state);

    for (const char* comp : {"f", "g", "d"})
        CHECK(component_equal(dr.final_params, nat.final_params, comp));
}

TEST_CASE("clean-source DART step gradient = natural step gradient + lambda2 target CE") {
    SmallData data = small_data(10);
    ModelParams params = desk_model(19);
    Rng rng(20);
    Tensor xs = gather_rows(data.src.features, {0, 1, 2, 3});
    std::vector<int> ys = gather_labels(data.src.labels, {0, 1, 2, 3});
    Tensor xt = gather_rows(data.tgt.features, {0, 1, 2, 3});
    std::vector<int> pseudo{0, 1, 1, 0};
    const double lambda1 = 0.7, lambda2 = 1.3;

    auto collect = [&](const std::function<NodeId(Graph&, ParamBinding&)>& assemble) {
        Graph g;
        ParamBinding binding = bind_params(g, params);
        NodeId loss = assemble(g, binding);
        std::vector<NodeId> ids;
        for (const char* comp : {"f", "g", "d"})
            for (const auto& [w, b] : binding.nodes.at(comp)) {
                ids.push_back(w);
                ids.push_back(b);
            }
        std::vector<Tensor> grads = g.backward(loss, std::span<const NodeId>(ids));
        std::vector<double> flat;
        for (const Tensor& t : grads) flat.insert(flat.end(), t.raw().begin(), t.raw().end());
        return flat;
    };

    // the full joint objective as the dart step assembles it (alpha = 0)
    auto joint = collect([&](Graph& g, ParamBinding& binding) {
        NodeId feat_s = forward(g, binding, params, "g", g.leaf(xs));
        NodeId ce = g.softmax_cross_entropy(forward(g, binding, params, "f", feat_s), ys);
        NodeId feat_t = forward(g, binding, params, "g", g.leaf(xt));
        NodeId ldom = dann_domain_loss(g, binding, params, g.gradient_reversal(feat_s, lambda1),
                                       g.gradient_reversal(feat_t, lambda1));
        NodeId tgt_ce = g.softmax_cross_entropy(forward(g, binding, params, "f", feat_t), pseudo);
        return g.add(g.add(ce, ldom), g.scale(tgt_ce, lambda2));
    });
    // a natural-UDA step
    auto natural = collect([&](Graph& g, ParamBinding& binding) {
        NodeId feat_s = forward(g, binding, params, "g", g.leaf(xs));
        NodeId ce = g.softmax_cross_entropy(forward(g, binding, params, "f", feat_s), ys);
        NodeId feat_t = forward(g, binding, params, "g", g.leaf(xt));
        NodeId ldom = dann_domain_loss(g, binding, params, g.gradient_reversal(feat_s, lambda1),
                                       g.gradient_reversal(feat_t, lambda1));
        return g.add(ce, ldom);
    });
    // the pseudo-label CE alone
    auto target_only = collect([&](Graph& g, ParamBinding& binding) {
        NodeId feat_t = forward(g, binding, params, "g", g.leaf(xt));
        return g.scale(g.softmax_cross_entropy(forward(g, binding, params, "f", feat_t), pseudo),
                       lambda2);
    });

    REQUIRE(joint.size() == natural.size());
    for (std::size_t i = 0; i < joint.size(); ++i)
        CHECK(joint[i] == Catch::Approx(natural[i] + target_only[i]).margin(1e-10));
}

TEST_CASE("ablation switches force the lambdas to zero") {
    AlgorithmConfig cfg;
    cfg.lambda1 = 2.0;
    cfg.lambda2 = 3.0;
    CHECK(cfg.effective_lambda1() == 2.0);
    CHECK(cfg.effective_lambda2() == 3.0);
    cfg.ablation.drop_divergence = true;
    cfg.ablation.drop_third_term = true;
    CHECK(cfg.effective_lambda1() == 0.0);
    CHECK(cfg.effective_lambda2() == 0.0);
}

TEST_CASE("runs are reproducible and keep parameters finite") {
    SmallData data = small_data(11);
    ModelParams init = desk_model(23);
    ProxyEval proxy = make_proxy(data);

    AlgorithmConfig cfg = base_config(AlgorithmTag::dart);
    cfg.iterations = 20;
    cfg.checkpoint_frequency = 5;
    cfg.train_attack.alpha = 0.1;
    cfg.train_attack.steps = 3;
    cfg.train_attack.step_size = 0.04;

    auto run_once = [&]() {
        PseudoLabelState state = initial_pseudo(init, data, proxy);
        return Trainer(cfg, 61, 62).run(init, data.src, data.tgt, proxy, state);
    };
    TrainResult a = run_once();
    TrainResult b = run_once();
    for (const char* comp : {"f", "g", "d"})
        CHECK(component_equal(a.final_params, b.final_params, comp));
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].iteration == b.log[i].iteration);
        CHECK(a.log[i].proxy_accuracy == b.log[i].proxy_accuracy);
        CHECK(a.log[i].losses == b.log[i].losses);
    }
    for (const auto& [name, comp] : a.final_params.components)
        for (const auto& layer : comp.layers) {
            CHECK(layer.weight.all_finite());
            CHECK(layer.bias.all_finite());
        }
    // stored best proxy accuracy never decreases
    CHECK(a.pseudo.best_proxy_accuracy >= proxy(init));
}

TEST_CASE("fixed pseudo-label baselines never regenerate; cg variants may") {
    SmallData data = small_data(12);
    ModelParams init = desk_model(29);
    ProxyEval proxy = make_proxy(data);

    AlgorithmConfig at_fixed = base_config(AlgorithmTag::at_tgt_pseudo);
    at_fixed.iterations = 20;
    at_fixed.checkpoint_frequency = 5;
    at_fixed.train_attack.alpha = 0.1;
    at_fixed.train_attack.steps = 2;
    at_fixed.train_attack.step_size = 0.05;

    PseudoLabelState state = initial_pseudo(init, data, proxy);
    const std::vector<int> initial_labels = state.labels;
    TrainResult fixed_run = Trainer(at_fixed, 71, 72).run(init, data.src, data.tgt, proxy, state);
    CHECK(fixed_run.pseudo.labels == initial_labels);
    for (const TrainRecord& rec : fixed_run.log) CHECK_FALSE(rec.pseudo_label_swap);

    AlgorithmConfig at_cg = at_fixed;
    at_cg.pseudo_label_refresh = true;
    PseudoLabelState state2 = initial_pseudo(init, data, proxy);
    state2.best_proxy_accuracy = 0.0; // any improvement triggers the shared protocol
    TrainResult cg_run = Trainer(at_cg, 71, 72).run(init, data.src, data.tgt, proxy, state2);
    bool any_swap = false;
    for (const TrainRecord& rec : cg_run.log) any_swap = any_swap || rec.pseudo_label_swap;
    CHECK(any_swap);
}

TEST_CASE("missing pseudo labels are an error for pseudo-label algorithms") {
    SmallData data = small_data(13);
    ModelParams init = desk_model(31);
    ProxyEval proxy = make_proxy(data);
    AlgorithmConfig cfg = base_config(AlgorithmTag::dart);
    Trainer trainer(cfg, 1, 2);
    CHECK_THROWS_AS(trainer.run(init, data.src, data.tgt, proxy), std::invalid_argument);
}

TEST_CASE("alternating discriminator mode also aligns domains") {
    SmallData data = small_data(14, 128);
    ModelParams init = desk_model(37);
    ProxyEval proxy = make_proxy(data);
    AlgorithmConfig cfg = base_config(AlgorithmTag::natural_uda);
    cfg.iterations = 30;
    cfg.dann_mode = DannMode::alternating;
    cfg.discriminator_steps = 2;
    TrainResult result = Trainer(cfg, 81, 82).run(init, data.src, data.tgt, proxy);
    CHECK(result.final_params.at("d").layers[0].weight.all_finite());
    // d was actually trained in its own passes
    CHECK_FALSE(component_equal(result.final_params, init, "d"));
}

TEST_CASE("natural run learns the rotated target") {
    auto [source, target] = gen_two_moons_shift(2000, 30.0, 0.1, 303);
    LabeledSet src = split_source_train(source, 0.8, 305);
    TargetSplits splits = split_target(target, {0.6, 0.2, 0.2}, 304);
    SmallData data{std::move(src), std::move(splits.train), std::move(splits.val)};
    ModelParams init = desk_model(41);
    ProxyEval proxy = make_proxy(data);
    AlgorithmConfig cfg = base_config(AlgorithmTag::natural_uda);
    cfg.iterations = 2000;
    cfg.checkpoint_frequency = 100;
    cfg.batch_size = 128;
    cfg.optimizer.learning_rate = 1e-3;
    TrainResult result = Trainer(cfg, 91, 92).run(init, data.src, data.tgt, proxy);
    CHECK(result.best_proxy_accuracy > 0.85);
}
