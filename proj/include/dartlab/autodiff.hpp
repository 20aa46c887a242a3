#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dartlab/tensor.hpp"

namespace dartlab {

using NodeId = std::int32_t;

// Define-by-run tape. Nodes are appended in execution order, which is a
// topological order by construction; backward walks the tape once in reverse.
// A Graph is rebuilt per forward pass and confined to one thread.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, NodeId)>;

    struct Node {
        Tensor value;
        std::vector<NodeId> inputs;
        BackwardFn backward; // empty for leaves
        bool is_param = false;
    };

    NodeId leaf(Tensor value, bool is_param = false) {
        return emplace(std::move(value), {}, nullptr, is_param);
    }
    NodeId constant(Tensor value) { return leaf(std::move(value), false); }

    std::size_t size() const { return nodes_.size(); }
    const Tensor& value(NodeId id) const { return nodes_[check_id(id)].value; }
    const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[check_id(id)].inputs; }

    // -- primitives ---------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        Tensor out = matmul_value(value(a), value(b));
        return emplace_checked("matmul", std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& av = g.value(in[0]);
            const Tensor& bv = g.value(in[1]);
            // dA = gO * B^T ; dB = A^T * gO
            Tensor& ga = g.grad_buf(in[0]);
            Tensor& gb = g.grad_buf(in[1]);
            const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double gij = go.at(i, j);
                    if (gij == 0.0) continue;
                    for (std::size_t l = 0; l < k; ++l) {
                        ga.at(i, l) += gij * bv.at(l, j);
                        gb.at(l, j) += gij * av.at(i, l);
                    }
                }
        });
    }

    NodeId add(NodeId a, NodeId b) {
        Tensor out = add_value(value(a), value(b));
        const bool broadcast = !value(a).same_shape(value(b));
        return emplace_checked("add", std::move(out), {a, b},
                               [broadcast](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            Tensor& ga = g.grad_buf(in[0]);
            Tensor& gb = g.grad_buf(in[1]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
            if (!broadcast) {
                for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i];
            } else {
                const std::size_t cols = gb.numel();
                for (std::size_t i = 0; i < go.numel(); ++i) gb[i % cols] += go[i];
            }
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        check(value(a).same_shape(value(b)), "sub: shape mismatch");
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= value(b)[i];
        return emplace_checked("sub", std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            Tensor& ga = g.grad_buf(in[0]);
            Tensor& gb = g.grad_buf(in[1]);
            for (std::size_t i = 0; i < go.numel(); ++i) {
                ga[i] += go[i];
                gb[i] -= go[i];
            }
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        check(value(a).same_shape(value(b)), "mul: shape mismatch");
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= value(b)[i];
        return emplace_checked("mul", std::move(out), {a, b}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& av = g.value(in[0]);
            const Tensor& bv = g.value(in[1]);
            Tensor& ga = g.grad_buf(in[0]);
            Tensor& gb = g.grad_buf(in[1]);
            for (std::size_t i = 0; i < go.numel(); ++i) {
                ga[i] += go[i] * bv[i];
                gb[i] += go[i] * av[i];
            }
        });
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
        return emplace_checked("scale", std::move(out), {a}, [c](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += c * go[i];
        });
    }

    NodeId relu(NodeId a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i)
            if (out[i] < 0.0) out[i] = 0.0;
        // subgradient at exactly 0 is 0
        return emplace_checked("relu", std::move(out), {a}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& av = g.value(in[0]);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i)
                if (av[i] > 0.0) ga[i] += go[i];
        });
    }

    NodeId sigmoid(NodeId a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            const double x = out[i];
            out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                              : std::exp(x) / (1.0 + std::exp(x));
        }
        return emplace_checked("sigmoid", std::move(out), {a}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& sv = g.value(self);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i)
                ga[i] += go[i] * sv[i] * (1.0 - sv[i]);
        });
    }

    NodeId log(NodeId a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
        return emplace_checked("log", std::move(out), {a}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& av = g.value(in[0]);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / av[i];
        });
    }

    NodeId exp(NodeId a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
        return emplace_checked("exp", std::move(out), {a}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& sv = g.value(self);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * sv[i];
        });
    }

    NodeId square(NodeId a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
        return emplace_checked("square", std::move(out), {a}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            const Tensor& av = g.value(in[0]);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += 2.0 * av[i] * go[i];
        });
    }

    NodeId mean(NodeId a) {
        const Tensor& av = value(a);
        double s = 0.0;
        for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
        const double inv_n = 1.0 / static_cast<double>(av.numel());
        return emplace_checked("mean", Tensor::scalar(s * inv_n), {a},
                               [inv_n](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const double go = g.grad(self)[0];
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += go * inv_n;
        });
    }

    NodeId sum(NodeId a) {
        const Tensor& av = value(a);
        double s = 0.0;
        for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
        return emplace_checked("sum", Tensor::scalar(s), {a}, [](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const double go = g.grad(self)[0];
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += go;
        });
    }

    // Mean cross-entropy of row-wise softmax against integer class labels.
    // Fused with the log-sum-exp shift so large logits stay finite.
    NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
        const Tensor& z = value(logits);
        std::size_t n, c;
        if (z.rank() == 2) {
            n = z.rows();
            c = z.cols();
        } else {
            check(z.rank() == 1, "softmax_cross_entropy: logits must be rank 1 or 2");
            n = 1;
            c = z.numel();
        }
        check(labels.size() == n, "softmax_cross_entropy: one label per row required");
        for (int y : labels)
            check(y >= 0 && static_cast<std::size_t>(y) < c,
                  "softmax_cross_entropy: label out of range");
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = z.data() + i * c;
            double m = row[0];
            for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
            double se = 0.0;
            for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - m);
            total += m + std::log(se) - row[static_cast<std::size_t>(labels[i])];
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        return emplace_checked("softmax_cross_entropy", Tensor::scalar(total * inv_n), {logits},
                               [labels = std::move(labels), n, c, inv_n](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const double go = g.grad(self)[0] * inv_n;
            const Tensor& z = g.value(in[0]);
            Tensor& gz = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = z.data() + i * c;
                double m = row[0];
                for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
                double se = 0.0;
                for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - m);
                for (std::size_t j = 0; j < c; ++j) {
                    const double p = std::exp(row[j] - m) / se;
                    const double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
                    gz[i * c + j] += go * (p - onehot);
                }
            }
        });
    }

    // Mean binary cross-entropy of probabilities against 0/1 labels, with a
    // 1e-12 floor inside each log.
    NodeId binary_cross_entropy(NodeId prob, std::vector<double> labels) {
        const Tensor& p = value(prob);
        check(labels.size() == p.numel(), "binary_cross_entropy: one label per probability");
        for (double y : labels)
            check(y == 0.0 || y == 1.0, "binary_cross_entropy: labels must be 0 or 1");
        constexpr double kEps = 1e-12;
        double total = 0.0;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            check(p[i] >= 0.0 && p[i] <= 1.0, "binary_cross_entropy: probability outside [0,1]");
            total -= labels[i] * std::log(std::max(p[i], kEps)) +
                     (1.0 - labels[i]) * std::log(std::max(1.0 - p[i], kEps));
        }
        const double inv_n = 1.0 / static_cast<double>(p.numel());
        return emplace_checked("binary_cross_entropy", Tensor::scalar(total * inv_n), {prob},
                               [labels = std::move(labels), inv_n](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const double go = g.grad(self)[0] * inv_n;
            const Tensor& p = g.value(in[0]);
            Tensor& gp = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                double d = 0.0;
                if (p[i] > kEps) d -= labels[i] / p[i];
                if (1.0 - p[i] > kEps) d += (1.0 - labels[i]) / (1.0 - p[i]);
                gp[i] += go * d;
            }
        });
    }

    NodeId concat_rows(NodeId a, NodeId b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        check(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.cols(),
              "concat_rows: rank-2 operands with equal column count required");
        Tensor out({av.rows() + bv.rows(), av.cols()});
        std::copy(av.data(), av.data() + av.numel(), out.data());
        std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
        const std::size_t na = av.numel();
        return emplace_checked("concat_rows", std::move(out), {a, b},
                               [na](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            Tensor& ga = g.grad_buf(in[0]);
            Tensor& gb = g.grad_buf(in[1]);
            for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
            for (std::size_t i = na; i < go.numel(); ++i) gb[i - na] += go[i];
        });
    }

    NodeId slice_rows(NodeId a, std::size_t begin, std::size_t end) {
        const Tensor& av = value(a);
        check(av.rank() == 2, "slice_rows: rank 2 required");
        check(begin <= end && end <= av.rows(), "slice_rows: range out of bounds");
        const std::size_t c = av.cols();
        Tensor out({end - begin, c});
        std::copy(av.data() + begin * c, av.data() + end * c, out.data());
        return emplace_checked("slice_rows", std::move(out), {a},
                               [begin, c](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[begin * c + i] += go[i];
        });
    }

    // Identity forward; backward multiplies the upstream gradient by -lambda.
    NodeId gradient_reversal(NodeId a, double lambda) {
        check(lambda > 0.0, "gradient_reversal: lambda must be positive");
        Tensor out = value(a);
        return emplace_checked("gradient_reversal", std::move(out), {a},
                               [lambda](Graph& g, NodeId self) {
            const auto& in = g.inputs(self);
            const Tensor& go = g.grad(self);
            Tensor& ga = g.grad_buf(in[0]);
            for (std::size_t i = 0; i < go.numel(); ++i) ga[i] -= lambda * go[i];
        });
    }

    // Fused operation with a hand-written backward (divergence proxies use this).
    NodeId custom(const std::string& name, Tensor value, std::vector<NodeId> in, BackwardFn fn) {
        return emplace_checked(name, std::move(value), std::move(in), std::move(fn));
    }

    // -- reverse pass --------------------------------------------------------

    std::vector<Tensor> backward(NodeId loss, std::span<const NodeId> wrt) {
        check(static_cast<std::size_t>(loss) < nodes_.size() && loss >= 0,
              "backward: loss is not a node of this graph");
        check(nodes_[loss].value.is_scalar(), "backward: loss must be scalar");
        for (NodeId id : wrt) check_id(id);

        grads_.clear();
        grads_.reserve(nodes_.size());
        for (const auto& node : nodes_) grads_.push_back(Tensor::zeros_like(node.value));
        touched_.assign(nodes_.size(), false);

        grads_[loss][0] = 1.0;
        touched_[loss] = true;
        for (NodeId id = loss; id >= 0; --id) {
            if (!touched_[id]) continue;
            if (nodes_[id].backward) nodes_[id].backward(*this, id);
        }

        std::vector<Tensor> out;
        out.reserve(wrt.size());
        for (NodeId id : wrt) out.push_back(grads_[id]);
        return out;
    }

    std::vector<Tensor> backward(NodeId loss, std::initializer_list<NodeId> wrt) {
        std::vector<NodeId> ids(wrt);
        return backward(loss, std::span<const NodeId>(ids));
    }

    const Tensor& grad(NodeId id) const { return grads_[check_id(id)]; }

    Tensor& grad_buf(NodeId id) {
        touched_[check_id(id)] = true;
        return grads_[id];
    }

private:
    NodeId check_id(NodeId id) const {
        check(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(),
              "node id does not belong to this graph");
        return id;
    }

    NodeId emplace(Tensor v, std::vector<NodeId> in, BackwardFn fn, bool is_param = false) {
        for (NodeId i : in) check_id(i);
        nodes_.push_back(Node{std::move(v), std::move(in), std::move(fn), is_param});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId emplace_checked(const std::string& op, Tensor v, std::vector<NodeId> in, BackwardFn fn) {
        check_runtime(v.all_finite(), op + ": non-finite output");
        return emplace(std::move(v), std::move(in), std::move(fn));
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> touched_;
};

// ---------------------------------------------------------------------------
// Composite expressions built from the primitives above.
// ---------------------------------------------------------------------------

inline NodeId const_filled(Graph& g, std::vector<std::size_t> shape, double v) {
    return g.constant(Tensor::filled(std::move(shape), v));
}

// Row-wise log-softmax via a constant row-max shift (softmax is shift
// invariant, so subtracting a constant leaves values and gradients intact).
inline NodeId log_softmax_rows(Graph& g, NodeId logits) {
    const Tensor& z = g.value(logits);
    check(z.rank() == 2, "log_softmax_rows: rank-2 logits required");
    const std::size_t n = z.rows(), c = z.cols();
    Tensor shift({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        double m = z.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, z.at(i, j));
        for (std::size_t j = 0; j < c; ++j) shift.at(i, j) = m;
    }
    NodeId s = g.sub(logits, g.constant(std::move(shift)));
    NodeId e = g.exp(s);
    NodeId row_sum = g.matmul(e, const_filled(g, {c, 1}, 1.0));       // [n x 1]
    NodeId log_row_sum = g.log(row_sum);                              // [n x 1]
    NodeId tiled = g.matmul(log_row_sum, const_filled(g, {1, c}, 1.0)); // [n x c]
    return g.sub(s, tiled);
}

inline NodeId softmax_rows(Graph& g, NodeId logits) { return g.exp(log_softmax_rows(g, logits)); }

// max(x, eps) expressed through relu: relu(x - eps) + eps.
inline NodeId floor_at(Graph& g, NodeId x, double eps) {
    NodeId e = const_filled(g, g.value(x).shape(), eps);
    return g.add(g.relu(g.sub(x, e)), e);
}

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)), with a 1e-12
// floor inside each log. Gradients flow through both arguments; pass the
// reference logits as a constant leaf to freeze that side.
inline NodeId softmax_kl_mean(Graph& g, NodeId p_logits, NodeId q_logits) {
    constexpr double kEps = 1e-12;
    check(g.value(p_logits).same_shape(g.value(q_logits)),
          "softmax_kl_mean: logit shapes differ");
    const std::size_t n = g.value(p_logits).rows();
    NodeId p = softmax_rows(g, p_logits);
    NodeId q = softmax_rows(g, q_logits);
    NodeId log_p = g.log(floor_at(g, p, kEps));
    NodeId log_q = g.log(floor_at(g, q, kEps));
    NodeId total = g.sum(g.mul(p, g.sub(log_p, log_q)));
    return g.scale(total, 1.0 / static_cast<double>(n));
}

} // namespace dartlab
