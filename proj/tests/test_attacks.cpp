#include <catch2/catch_amalgamated.hpp>

#include "dartlab/attacks.hpp"
#include "test_support.hpp"

using namespace dartlab;
using testsupport::finite_difference_grad;
using testsupport::random_tensor;

namespace {

ModelParams small_model(std::uint64_t seed) {
    return init_params(MlpSpec{{2, 8, 4}}, MlpSpec{{4, 2}}, MlpSpec{{4, 4, 1}}, seed);
}

// Maximizing -y * (w.x + b) drives the margin toward its minimum.
AttackObjective linear_margin_objective(const Tensor& w, double b, int y) {
    return [w, b, y](Graph& g, NodeId xid) {
        NodeId wcol = g.constant(Tensor::matrix(w.numel(), 1, w.raw()));
        NodeId z = g.add(g.matmul(xid, wcol),
                         g.constant(Tensor::matrix(1, 1, {b})));
        return g.scale(z, -static_cast<double>(y));
    };
}

double margin(const Tensor& w, double b, int y, const Tensor& x) {
    double z = b;
    for (std::size_t i = 0; i < w.numel(); ++i) z += w[i] * x[i];
    return y * z;
}

} // namespace

TEST_CASE("alpha zero or zero steps leaves the input untouched") {
    Rng rng(1);
    Tensor x = random_tensor(rng, {1, 3});
    AttackConfig cfg;
    cfg.alpha = 0.0;
    cfg.steps = 5;
    cfg.step_size = 0.1;
    auto objective = [](Graph& g, NodeId xid) { return g.sum(g.square(xid)); };
    CHECK(tensors_equal(pgd(objective, x, cfg), x));
    cfg.alpha = 0.3;
    cfg.steps = 0;
    CHECK(tensors_equal(pgd(objective, x, cfg), x));
}

TEST_CASE("one signed step against a linear margin") {
    Tensor w = Tensor::row({1.0, 2.0});
    Tensor x({1, 2}); // origin
    AttackConfig cfg;
    cfg.alpha = 0.1;
    cfg.steps = 1;
    cfg.step_size = 0.1;
    Tensor adv = pgd(linear_margin_objective(w, 0.0, +1), x, cfg);
    CHECK(adv[0] == Catch::Approx(-0.1).margin(1e-15));
    CHECK(adv[1] == Catch::Approx(-0.1).margin(1e-15));
}

TEST_CASE("projection and clamp box always hold") {
    Rng rng(17);
    ModelParams p = small_model(2);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor(rng, {3, 2}, 0.1, 0.9);
        AttackConfig cfg;
        cfg.alpha = rng.uniform(0.01, 0.5);
        cfg.steps = 1 + static_cast<int>(rng.below(10));
        cfg.step_size = rng.uniform(0.01, 0.4);
        cfg.random_start = trial % 2 == 0;
        cfg.clamp = std::array<double, 2>{0.0, 1.0};
        std::vector<int> labels{0, 1, 0};
        Tensor adv = pgd(ce_objective(p, labels), x, cfg, &rng);
        for (std::size_t i = 0; i < adv.numel(); ++i) {
            CHECK(std::abs(adv[i] - x[i]) <= cfg.alpha + 1e-12);
            CHECK(adv[i] >= 0.0);
            CHECK(adv[i] <= 1.0);
        }
    }
}

TEST_CASE("pgd is deterministic given seed and config") {
    ModelParams p = small_model(3);
    Rng data_rng(5);
    Tensor x = random_tensor(data_rng, {4, 2});
    std::vector<int> labels{0, 1, 1, 0};
    AttackConfig cfg;
    cfg.alpha = 0.2;
    cfg.steps = 7;
    cfg.step_size = 0.05;
    cfg.random_start = true;
    Rng a(42), b(42);
    CHECK(tensors_equal(pgd(ce_objective(p, labels), x, cfg, &a),
                        pgd(ce_objective(p, labels), x, cfg, &b)));
}

TEST_CASE("pgd rejects a start outside the clamp box") {
    AttackConfig cfg;
    cfg.alpha = 0.1;
    cfg.steps = 1;
    cfg.step_size = 0.1;
    cfg.clamp = std::array<double, 2>{0.0, 1.0};
    Tensor x = Tensor::matrix(1, 2, {-0.5, 0.5});
    auto objective = [](Graph& g, NodeId xid) { return g.sum(xid); };
    CHECK_THROWS_AS(pgd(objective, x, cfg), std::invalid_argument);
}

TEST_CASE("kl transform is stationary for a uniform-logit model") {
    ModelParams p = small_model(4);
    for (auto& layer : p.at("f").layers)
        for (std::size_t i = 0; i < layer.weight.numel(); ++i) layer.weight[i] = 0.0;
    Rng rng(6);
    Tensor x = random_tensor(rng, {3, 2});
    AttackConfig cfg;
    cfg.alpha = 0.2;
    cfg.steps = 5;
    cfg.step_size = 0.05;
    Tensor adv = kl_transform(p, x, cfg);
    CHECK(tensors_equal(adv, x)); // KL = 0 and gradient 0 at the start

    cfg.alpha = 0.0;
    CHECK(tensors_equal(kl_transform(small_model(7), x, cfg), x));
}

TEST_CASE("kl objective value after the attack is nonnegative") {
    ModelParams p = small_model(8);
    Rng rng(9);
    Tensor x = random_tensor(rng, {4, 2});
    AttackConfig cfg;
    cfg.alpha = 0.3;
    cfg.steps = 10;
    cfg.step_size = 0.06;
    Tensor adv = kl_transform(p, x, cfg);
    Graph g;
    ParamBinding binding = bind_params(g, p);
    NodeId adv_logits = forward(g, binding, p, "f", forward(g, binding, p, "g", g.leaf(adv)));
    NodeId clean_logits = g.constant(forward_value(p, "f", forward_value(p, "g", x)));
    const double kl = g.value(softmax_kl_mean(g, adv_logits, clean_logits)).value();
    CHECK(kl >= 0.0); // value at the unattacked point is 0
}

TEST_CASE("dart target attack degenerates and composes correctly") {
    ModelParams p = small_model(10);
    Rng rng(11);
    Tensor x = random_tensor(rng, {3, 2});
    std::vector<int> pseudo{1, 0, 1};
    DivergenceKind coral_kind;
    coral_kind.tag = DivergenceTag::coral;
    Tensor src_feat = forward_value(p, "g", random_tensor(rng, {5, 2}));

    AttackConfig cfg;
    cfg.alpha = 0.2;
    cfg.steps = 4;
    cfg.step_size = 0.06;
    cfg.random_start = true;

    SECTION("lambda1 = 0 coincides with plain pseudo-label PGD at the same seed") {
        Rng a(77), b(77);
        Tensor via_dart = dart_target_attack(p, x, pseudo, coral_kind, src_feat, 0.0, 1.7,
                                             cfg, &a);
        Tensor via_pgd = pgd(ce_objective(p, pseudo), x, cfg, &b);
        CHECK(tensors_equal(via_dart, via_pgd));
    }

    SECTION("alpha = 0 returns the input") {
        AttackConfig off = cfg;
        off.alpha = 0.0;
        CHECK(tensors_equal(
            dart_target_attack(p, x, pseudo, coral_kind, src_feat, 1.0, 1.0, off), x));
    }

    SECTION("lambda2 = 0: one step moves along sign of the divergence gradient") {
        AttackConfig one = cfg;
        one.steps = 1;
        one.random_start = false;
        const double lambda1 = 0.8;
        Tensor adv = dart_target_attack(p, x, pseudo, coral_kind, src_feat, lambda1, 0.0, one);
        auto value_fn = [&](const Tensor& xt) {
            return lambda1 * coral(src_feat, forward_value(p, "g", xt));
        };
        Tensor fd = finite_difference_grad(value_fn, x);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (std::abs(fd[i]) < 1e-6) continue; // sign too fragile to assert
            const double want = x[i] + one.step_size * (fd[i] > 0 ? 1.0 : -1.0);
            CHECK(adv[i] == Catch::Approx(want).margin(1e-9));
        }
    }

    SECTION("pseudo label count must match the batch") {
        CHECK_THROWS_AS(dart_target_attack(p, x, {0, 1}, coral_kind, src_feat, 1.0, 1.0, cfg),
                        std::invalid_argument);
    }
}

TEST_CASE("linear worst margin closed form") {
    Tensor w = Tensor::row({1.0, 2.0});
    Tensor x = Tensor::row({0.0, 0.0});
    CHECK(linear_worst_margin(w, 0.0, +1, x, 0.1) == Catch::Approx(-0.3).margin(1e-15));
    Rng rng(12);
    Tensor w2 = random_tensor(rng, {4});
    Tensor x2 = random_tensor(rng, {4});
    CHECK(linear_worst_margin(w2, 0.5, -1, x2, 0.0) ==
          Catch::Approx(margin(w2, 0.5, -1, x2)).margin(1e-12));
    Tensor zero_w({3});
    CHECK(linear_worst_margin(zero_w, 0.7, +1, Tensor::row({1, 2, 3}), 5.0) ==
          Catch::Approx(0.7).margin(1e-15));
}

TEST_CASE("pgd on a linear model reaches the analytic worst margin") {
    Rng rng(13);
    double worst_gap = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 1 + rng.below(4);
        Tensor w = random_tensor(rng, {d});
        const double b = rng.uniform(-1.0, 1.0);
        const int y = rng.below(2) ? 1 : -1;
        Tensor x = random_tensor(rng, {1, d});
        const double alpha = rng.uniform(0.05, 0.5);

        AttackConfig cfg;
        cfg.alpha = alpha;
        cfg.steps = 10;
        cfg.step_size = alpha / 4.0;
        Tensor adv = pgd(linear_margin_objective(w, b, y), x, cfg);
        const double pgd_margin = margin(w, b, y, adv);
        const double exact = linear_worst_margin(w, b, y, x, alpha);
        CHECK(pgd_margin >= exact - 1e-12); // cannot beat the true minimum
        worst_gap = std::max(worst_gap, pgd_margin - exact);
    }
    CHECK(worst_gap < 1e-6);
}

TEST_CASE("grid bruteforce enumerates the lattice") {
    auto square = [](const Tensor& x) { return x[0] * x[0]; };
    Tensor x0 = Tensor::row({0.0});
    // enumerate {-1, 0, 1} by hand: the maximum of x^2 is 1
    auto [point, value] = grid_bruteforce(square, x0, 1.0, 3);
    CHECK(value == 1.0);
    CHECK(std::abs(point[0]) == 1.0);

    auto [p1, v1] = grid_bruteforce(square, Tensor::row({0.4}), 1.0, 1);
    CHECK(p1[0] == 0.4); // singleton grid
    CHECK(v1 == Catch::Approx(0.16));

    CHECK_THROWS_AS(grid_bruteforce(square, Tensor({1, 8}), 0.5, 12), std::invalid_argument);
}

TEST_CASE("grid bruteforce tracks the linear oracle within lattice resolution") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 1 + rng.below(2);
        Tensor w = random_tensor(rng, {d});
        const double b = rng.uniform(-0.5, 0.5);
        const int y = rng.below(2) ? 1 : -1;
        Tensor x = random_tensor(rng, {d});
        const double alpha = rng.uniform(0.05, 0.5);
        const int P = 5 + static_cast<int>(rng.below(8));

        auto objective = [&](const Tensor& cand) { return -margin(w, b, y, cand); };
        auto [point, value] = grid_bruteforce(objective, x, alpha, P);
        (void)point;
        const double exact = linear_worst_margin(w, b, y, x, alpha);
        double l1 = 0.0;
        for (std::size_t i = 0; i < d; ++i) l1 += std::abs(w[i]);
        const double resolution = alpha * 2.0 / (P - 1) * l1;
        CHECK(-value >= exact - 1e-12);
        CHECK(-value <= exact + resolution + 1e-12);
    }
}

TEST_CASE("worst-case loss is nondecreasing in alpha under the grid oracle") {
    // convex objective: the lattice maximum sits at a corner and scales with alpha
    auto quad = [](const Tensor& x) { return x[0] * x[0] + 2.0 * x[1] * x[1]; };
    Tensor x = Tensor::row({0.3, -0.2});
    double prev = -1.0;
    for (double alpha : {0.0, 0.05, 0.1, 0.2, 0.4}) {
        auto [point, value] = grid_bruteforce(quad, x, alpha, 9);
        (void)point;
        CHECK(value >= prev);
        prev = value;
    }

    // cross-entropy of a fixed random model behaves the same way here
    ModelParams p = small_model(15);
    Rng rng(16);
    Tensor batch = random_tensor(rng, {1, 2});
    auto ce_loss = [&](const Tensor& cand) {
        Graph g;
        ParamBinding binding = bind_params(g, p);
        NodeId logits = forward(g, binding, p, "f", forward(g, binding, p, "g", g.leaf(cand)));
        return g.value(g.softmax_cross_entropy(logits, std::vector<int>{0})).value();
    };
    prev = -1.0;
    for (double alpha : {0.0, 0.05, 0.1, 0.2, 0.4}) {
        auto [point, value] = grid_bruteforce(ce_loss, batch, alpha, 9);
        (void)point;
        CHECK(value >= prev - 1e-12);
        prev = value;
    }
}
