#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "dartlab/autodiff.hpp"
#include "dartlab/common.hpp"
#include "dartlab/divergence.hpp"
#include "dartlab/models.hpp"
#include "dartlab/tensor.hpp"

namespace dartlab {

// l-infinity threat model description.
struct AttackConfig {
    double alpha = 0.0;     // ball radius, input units
    int steps = 0;          // PGD iterations
    double step_size = 0.0; // per-step movement, input units
    bool random_start = false;
    std::optional<std::array<double, 2>> clamp; // [lo, hi] box per coordinate

    void validate() const {
        check(alpha >= 0.0, "attack: alpha must be >= 0");
        check(steps >= 0, "attack: steps must be >= 0");
        if (steps > 0) check(step_size > 0.0, "attack: step_size must be positive");
        if (clamp) check((*clamp)[0] <= (*clamp)[1], "attack: clamp box is empty");
    }
};

// Builds the (scalar) objective to maximize for a candidate perturbation node.
using AttackObjective = std::function<NodeId(Graph&, NodeId)>;

namespace detail {

inline void clamp_to_box(Tensor& x, const std::optional<std::array<double, 2>>& box) {
    if (!box) return;
    for (std::size_t i = 0; i < x.numel(); ++i)
        x[i] = std::min(std::max(x[i], (*box)[0]), (*box)[1]);
}

inline bool in_box(const Tensor& x, const std::optional<std::array<double, 2>>& box) {
    if (!box) return true;
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (x[i] < (*box)[0] || x[i] > (*box)[1]) return false;
    return true;
}

} // namespace detail

// Sign-gradient ascent on the objective with projection onto the l-infinity
// ball around x (and the clamp box) after every step.
inline Tensor pgd(const AttackObjective& objective, const Tensor& x, const AttackConfig& cfg,
                  Rng* rng = nullptr) {
    cfg.validate();
    check(detail::in_box(x, cfg.clamp), "pgd: starting point outside the clamp box");
    if (cfg.alpha == 0.0 || cfg.steps == 0) return x;

    Tensor adv = x;
    if (cfg.random_start) {
        check(rng != nullptr, "pgd: random start requires a generator");
        for (std::size_t i = 0; i < adv.numel(); ++i)
            adv[i] += rng->uniform(-cfg.alpha, cfg.alpha);
        detail::clamp_to_box(adv, cfg.clamp);
    }

    for (int step = 0; step < cfg.steps; ++step) {
        Graph g;
        NodeId xid = g.leaf(adv);
        NodeId loss = objective(g, xid);
        Tensor grad = g.backward(loss, {xid})[0];
        check_runtime(grad.all_finite(), "pgd: non-finite gradient");
        for (std::size_t i = 0; i < adv.numel(); ++i) {
            const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
            double v = adv[i] + cfg.step_size * s;
            v = std::min(std::max(v, x[i] - cfg.alpha), x[i] + cfg.alpha);
            adv[i] = v;
        }
        detail::clamp_to_box(adv, cfg.clamp);
    }
    return adv;
}

// Mean cross-entropy attack objective for a labelled batch.
inline AttackObjective ce_objective(const ModelParams& params, std::vector<int> labels) {
    return [&params, labels = std::move(labels)](Graph& g, NodeId xid) {
        ParamBinding binding = bind_params(g, params);
        NodeId logits = forward(g, binding, params, "f", forward(g, binding, params, "g", xid));
        return g.softmax_cross_entropy(logits, labels);
    };
}

// TRADES-style transform: maximize KL(softmax(f(g(x~))) || softmax(f(g(x))))
// with the clean prediction held constant.
inline Tensor kl_transform(const ModelParams& params, const Tensor& x, const AttackConfig& cfg,
                           Rng* rng = nullptr) {
    Tensor clean_logits = forward_value(params, "f", forward_value(params, "g", x));
    AttackObjective objective = [&params, clean_logits](Graph& g, NodeId xid) {
        ParamBinding binding = bind_params(g, params);
        NodeId logits = forward(g, binding, params, "f", forward(g, binding, params, "g", xid));
        return softmax_kl_mean(g, logits, g.constant(clean_logits));
    };
    return pgd(objective, x, cfg, rng);
}

// DART's inner maximization over the target batch:
//   lambda1 * Omega(source features, g(x~)) + lambda2 * CE(f(g(x~)), pseudo labels)
// with the source features fixed for the duration of the attack. Terms whose
// weight is exactly zero are left out of the objective entirely.
inline Tensor dart_target_attack(const ModelParams& params, const Tensor& x_t,
                                 const std::vector<int>& pseudo_labels,
                                 const DivergenceKind& divergence, const Tensor& x_s_features,
                                 double lambda1, double lambda2, const AttackConfig& cfg,
                                 Rng* rng = nullptr) {
    check(lambda1 >= 0.0 && lambda2 >= 0.0, "dart_target_attack: lambdas must be >= 0");
    check(pseudo_labels.size() == x_t.rows(),
          "dart_target_attack: one pseudo label per target row required");
    AttackObjective objective = [&](Graph& g, NodeId xid) {
        ParamBinding binding = bind_params(g, params);
        NodeId feat_t = forward(g, binding, params, "g", xid);
        std::optional<NodeId> loss;
        if (lambda1 > 0.0) {
            NodeId fs = g.constant(x_s_features);
            NodeId omega = divergence_node(g, divergence, fs, feat_t, &binding, &params);
            loss = g.scale(omega, lambda1);
        }
        if (lambda2 > 0.0) {
            NodeId ce = g.softmax_cross_entropy(forward(g, binding, params, "f", feat_t),
                                                pseudo_labels);
            NodeId term = g.scale(ce, lambda2);
            loss = loss ? g.add(*loss, term) : term;
        }
        if (!loss) loss = g.constant(Tensor::scalar(0.0));
        return *loss;
    };
    return pgd(objective, x_t, cfg, rng);
}

// Exact minimum of y*(w.x + b) over the l-infinity ball of radius alpha:
// the adversary spends the full budget against each coordinate's sign.
inline double linear_worst_margin(const Tensor& w, double b, int y, const Tensor& x,
                                  double alpha) {
    check(y == 1 || y == -1, "linear_worst_margin: y must be +1 or -1");
    check(w.numel() == x.numel(), "linear_worst_margin: w and x sizes differ");
    check(alpha >= 0.0, "linear_worst_margin: alpha must be >= 0");
    double margin = b;
    double l1 = 0.0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
        margin += w[i] * x[i];
        l1 += std::abs(w[i]);
    }
    return static_cast<double>(y) * margin - alpha * l1;
}

// Exhaustive maximization over the lattice {x_i + alpha*(2k/(P-1) - 1)} per
// coordinate (plus the unperturbed point). Intended for dimensions <= 4.
inline std::pair<Tensor, double> grid_bruteforce(
    const std::function<double(const Tensor&)>& objective, const Tensor& x, double alpha,
    int points_per_dim) {
    check(points_per_dim >= 1, "grid_bruteforce: points_per_dim must be >= 1");
    check(alpha >= 0.0, "grid_bruteforce: alpha must be >= 0");
    const std::size_t dim = x.numel();
    double total = 1.0;
    for (std::size_t i = 0; i < dim; ++i) {
        total *= static_cast<double>(points_per_dim);
        check(total <= 1e6, "grid_bruteforce: grid too large");
    }

    Tensor best_point = x;
    double best_value = objective(x);

    if (points_per_dim == 1 || alpha == 0.0) return {best_point, best_value};

    std::vector<double> offsets(points_per_dim);
    for (int k = 0; k < points_per_dim; ++k)
        offsets[k] = alpha * (2.0 * k / (points_per_dim - 1) - 1.0);

    std::vector<int> idx(dim, 0);
    Tensor cand = x;
    for (;;) {
        for (std::size_t i = 0; i < dim; ++i) cand[i] = x[i] + offsets[idx[i]];
        const double v = objective(cand);
        if (v > best_value) {
            best_value = v;
            best_point = cand;
        }
        std::size_t pos = 0;
        while (pos < dim && ++idx[pos] == points_per_dim) idx[pos++] = 0;
        if (pos == dim) break;
    }
    return {best_point, best_value};
}

} // namespace dartlab
