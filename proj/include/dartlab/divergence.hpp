#pragma once

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "dartlab/autodiff.hpp"
#include "dartlab/models.hpp"
#include "dartlab/tensor.hpp"

namespace dartlab {

enum class DivergenceTag { dann, mmd, coral, cmd };

struct DivergenceKind {
    DivergenceTag tag = DivergenceTag::dann;
    double sigma = 1.0; // mmd bandwidth
    int moments = 2;    // cmd K
    std::optional<std::pair<double, double>> box; // cmd range; absent = observed batch range

    void validate() const {
        if (tag == DivergenceTag::mmd) check(sigma > 0.0, "mmd: bandwidth must be positive");
        if (tag == DivergenceTag::cmd) {
            check(moments >= 1, "cmd: K must be >= 1");
            if (box) check(box->second > box->first, "cmd: box upper bound must exceed lower");
        }
    }
};

inline const char* divergence_name(DivergenceTag tag) {
    switch (tag) {
        case DivergenceTag::dann: return "dann";
        case DivergenceTag::mmd: return "mmd";
        case DivergenceTag::coral: return "coral";
        case DivergenceTag::cmd: return "cmd";
    }
    return "?";
}

namespace detail {

inline void check_feature_pair(const Tensor& fs, const Tensor& ft, const char* op) {
    check(fs.rank() == 2 && ft.rank() == 2, std::string(op) + ": rank-2 features required");
    check(fs.cols() == ft.cols(), std::string(op) + ": feature width mismatch");
    check(fs.rows() >= 1 && ft.rows() >= 1, std::string(op) + ": each set needs >= 1 sample");
}

inline Tensor column_means(const Tensor& x) {
    Tensor mu({x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) mu[j] += x.at(i, j);
    for (std::size_t j = 0; j < x.cols(); ++j) mu[j] /= static_cast<double>(x.rows());
    return mu;
}

inline Tensor centered(const Tensor& x, const Tensor& mu) {
    Tensor out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) -= mu[j];
    return out;
}

// Population covariance (1/n), mean subtracted.
inline Tensor covariance(const Tensor& centered_x) {
    const std::size_t n = centered_x.rows(), d = centered_x.cols();
    Tensor cov({d, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = centered_x.at(i, a);
            if (xa == 0.0) continue;
            for (std::size_t b = 0; b < d; ++b) cov.at(a, b) += xa * centered_x.at(i, b);
        }
    for (std::size_t i = 0; i < cov.numel(); ++i) cov[i] /= static_cast<double>(n);
    return cov;
}

inline double sq_dist_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) {
        const double d = a.at(i, k) - b.at(j, k);
        s += d * d;
    }
    return s;
}

} // namespace detail

// ---------------------------------------------------------------------------
// MMD with Gaussian kernel exp(-|u-v|^2 / (2 sigma^2)), biased V-statistic
// including the diagonal terms.
// ---------------------------------------------------------------------------

inline NodeId mmd_node(Graph& g, NodeId fs, NodeId ft, double sigma) {
    check(sigma > 0.0, "mmd: bandwidth must be positive");
    const Tensor& s = g.value(fs);
    const Tensor& t = g.value(ft);
    detail::check_feature_pair(s, t, "mmd");
    const std::size_t ns = s.rows(), nt = t.rows();
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);

    Tensor k_ss({ns, ns}), k_tt({nt, nt}), k_st({ns, nt});
    double sum_ss = 0.0, sum_tt = 0.0, sum_st = 0.0;
    for (std::size_t i = 0; i < ns; ++i)
        for (std::size_t j = 0; j < ns; ++j) {
            k_ss.at(i, j) = std::exp(-detail::sq_dist_rows(s, i, s, j) * inv_two_sigma2);
            sum_ss += k_ss.at(i, j);
        }
    for (std::size_t i = 0; i < nt; ++i)
        for (std::size_t j = 0; j < nt; ++j) {
            k_tt.at(i, j) = std::exp(-detail::sq_dist_rows(t, i, t, j) * inv_two_sigma2);
            sum_tt += k_tt.at(i, j);
        }
    for (std::size_t i = 0; i < ns; ++i)
        for (std::size_t j = 0; j < nt; ++j) {
            k_st.at(i, j) = std::exp(-detail::sq_dist_rows(s, i, t, j) * inv_two_sigma2);
            sum_st += k_st.at(i, j);
        }
    const double value = sum_ss / double(ns * ns) + sum_tt / double(nt * nt) -
                         2.0 * sum_st / double(ns * nt);
    const double inv_sigma2 = 1.0 / (sigma * sigma);

    return g.custom("mmd", Tensor::scalar(value), {fs, ft},
                    [k_ss = std::move(k_ss), k_tt = std::move(k_tt), k_st = std::move(k_st),
                     ns, nt, inv_sigma2](Graph& gr, NodeId self) {
        const auto& in = gr.inputs(self);
        const double go = gr.grad(self)[0];
        const Tensor& s = gr.value(in[0]);
        const Tensor& t = gr.value(in[1]);
        Tensor& gs = gr.grad_buf(in[0]);
        Tensor& gt = gr.grad_buf(in[1]);
        const std::size_t dim = s.cols();
        const double w_ss = 2.0 / double(ns * ns);
        const double w_tt = 2.0 / double(nt * nt);
        const double w_st = 2.0 / double(ns * nt);
        for (std::size_t a = 0; a < ns; ++a)
            for (std::size_t k = 0; k < dim; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < ns; ++j)
                    acc += w_ss * k_ss.at(a, j) * (s.at(j, k) - s.at(a, k));
                for (std::size_t j = 0; j < nt; ++j)
                    acc -= w_st * k_st.at(a, j) * (t.at(j, k) - s.at(a, k));
                gs.at(a, k) += go * acc * inv_sigma2;
            }
        for (std::size_t a = 0; a < nt; ++a)
            for (std::size_t k = 0; k < dim; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < nt; ++j)
                    acc += w_tt * k_tt.at(a, j) * (t.at(j, k) - t.at(a, k));
                for (std::size_t j = 0; j < ns; ++j)
                    acc -= w_st * k_st.at(j, a) * (s.at(j, k) - t.at(a, k));
                gt.at(a, k) += go * acc * inv_sigma2;
            }
    });
}

// ---------------------------------------------------------------------------
// CORAL: squared Frobenius distance between the 1/n population covariances.
// ---------------------------------------------------------------------------

inline NodeId coral_node(Graph& g, NodeId fs, NodeId ft) {
    const Tensor& s = g.value(fs);
    const Tensor& t = g.value(ft);
    detail::check_feature_pair(s, t, "coral");
    Tensor cs = detail::centered(s, detail::column_means(s));
    Tensor ct = detail::centered(t, detail::column_means(t));
    Tensor cov_s = detail::covariance(cs);
    Tensor cov_t = detail::covariance(ct);
    Tensor diff = cov_s; // C_s - C_t
    for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] -= cov_t[i];
    double value = 0.0;
    for (std::size_t i = 0; i < diff.numel(); ++i) value += diff[i] * diff[i];

    return g.custom("coral", Tensor::scalar(value), {fs, ft},
                    [cs = std::move(cs), ct = std::move(ct), diff = std::move(diff)](
                        Graph& gr, NodeId self) {
        const auto& in = gr.inputs(self);
        const double go = gr.grad(self)[0];
        Tensor& gs = gr.grad_buf(in[0]);
        Tensor& gt = gr.grad_buf(in[1]);
        // d/dX_s = (4/n_s) centered(X_s) (C_s - C_t); centering projector acts
        // as the identity because the rows of centered(X) sum to zero.
        Tensor ds = matmul_value(cs, diff);
        Tensor dt = matmul_value(ct, diff);
        const double ws = 4.0 / static_cast<double>(cs.rows());
        const double wt = 4.0 / static_cast<double>(ct.rows());
        for (std::size_t i = 0; i < ds.numel(); ++i) gs[i] += go * ws * ds[i];
        for (std::size_t i = 0; i < dt.numel(); ++i) gt[i] -= go * wt * dt[i];
    });
}

// ---------------------------------------------------------------------------
// CMD: (1/|b-a|) |mean_s - mean_t|_2 + sum_{k=2..K} (1/|b-a|^k) |C_k(S)-C_k(T)|_2
// with C_k the elementwise k-th central moment.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor central_moment(const Tensor& centered_x, int k) {
    Tensor m({centered_x.cols()});
    for (std::size_t i = 0; i < centered_x.rows(); ++i)
        for (std::size_t j = 0; j < centered_x.cols(); ++j)
            m[j] += std::pow(centered_x.at(i, j), k);
    for (std::size_t j = 0; j < centered_x.cols(); ++j)
        m[j] /= static_cast<double>(centered_x.rows());
    return m;
}

inline double norm2(const Tensor& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) s += v[i] * v[i];
    return std::sqrt(s);
}

} // namespace detail

inline NodeId cmd_node(Graph& g, NodeId fs, NodeId ft, int K, double a, double b) {
    check(K >= 1, "cmd: K must be >= 1");
    check(b > a, "cmd: box upper bound must exceed lower");
    const Tensor& s = g.value(fs);
    const Tensor& t = g.value(ft);
    detail::check_feature_pair(s, t, "cmd");
    const double width = b - a;

    Tensor mu_s = detail::column_means(s);
    Tensor mu_t = detail::column_means(t);
    Tensor cent_s = detail::centered(s, mu_s);
    Tensor cent_t = detail::centered(t, mu_t);

    // term k=1: mean difference, then central moments for k=2..K.
    std::vector<Tensor> diffs;   // d_k = C_k(S) - C_k(T), with d_1 = mu_s - mu_t
    std::vector<double> weights; // 1/|b-a|^k
    std::vector<Tensor> moments_s, moments_t; // C_{k-1} values needed in backward
    {
        Tensor d1 = mu_s;
        for (std::size_t j = 0; j < d1.numel(); ++j) d1[j] -= mu_t[j];
        diffs.push_back(std::move(d1));
        weights.push_back(1.0 / width);
        moments_s.push_back(Tensor({s.cols()})); // C_0 placeholder, unused for k=1
        moments_t.push_back(Tensor({t.cols()}));
    }
    for (int k = 2; k <= K; ++k) {
        Tensor ms = detail::central_moment(cent_s, k);
        Tensor mt = detail::central_moment(cent_t, k);
        Tensor dk = ms;
        for (std::size_t j = 0; j < dk.numel(); ++j) dk[j] -= mt[j];
        diffs.push_back(std::move(dk));
        weights.push_back(1.0 / std::pow(width, k));
        moments_s.push_back(detail::central_moment(cent_s, k - 1));
        moments_t.push_back(detail::central_moment(cent_t, k - 1));
    }

    double value = 0.0;
    std::vector<double> norms(diffs.size());
    for (std::size_t i = 0; i < diffs.size(); ++i) {
        norms[i] = detail::norm2(diffs[i]);
        value += weights[i] * norms[i];
    }

    return g.custom("cmd", Tensor::scalar(value), {fs, ft},
                    [diffs = std::move(diffs), weights = std::move(weights),
                     norms = std::move(norms), cent_s = std::move(cent_s),
                     cent_t = std::move(cent_t), moments_s = std::move(moments_s),
                     moments_t = std::move(moments_t)](Graph& gr, NodeId self) {
        const auto& in = gr.inputs(self);
        const double go = gr.grad(self)[0];
        Tensor& gs = gr.grad_buf(in[0]);
        Tensor& gt = gr.grad_buf(in[1]);
        const std::size_t ns = cent_s.rows(), nt = cent_t.rows(), dim = cent_s.cols();
        for (std::size_t term = 0; term < diffs.size(); ++term) {
            if (norms[term] == 0.0) continue; // flat term, subgradient 0
            const int k = static_cast<int>(term) + 1;
            const double w = weights[term] / norms[term];
            for (std::size_t j = 0; j < dim; ++j) {
                const double dir = w * diffs[term][j];
                if (k == 1) {
                    for (std::size_t i = 0; i < ns; ++i)
                        gs.at(i, j) += go * dir / static_cast<double>(ns);
                    for (std::size_t i = 0; i < nt; ++i)
                        gt.at(i, j) -= go * dir / static_cast<double>(nt);
                } else {
                    const double ks = static_cast<double>(k) / static_cast<double>(ns);
                    const double kt = static_cast<double>(k) / static_cast<double>(nt);
                    for (std::size_t i = 0; i < ns; ++i)
                        gs.at(i, j) += go * dir * ks *
                                       (std::pow(cent_s.at(i, j), k - 1) - moments_s[term][j]);
                    for (std::size_t i = 0; i < nt; ++i)
                        gt.at(i, j) -= go * dir * kt *
                                       (std::pow(cent_t.at(i, j), k - 1) - moments_t[term][j]);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// DANN: the negated loss of the domain classifier d (source labelled 1,
// target labelled 0), built from model forward + sigmoid + BCE so gradients
// reach d's weights and the features.
// ---------------------------------------------------------------------------

inline NodeId dann_domain_loss(Graph& g, const ParamBinding& binding, const ModelParams& p,
                               NodeId features_s, NodeId features_t) {
    detail::check_feature_pair(g.value(features_s), g.value(features_t), "dann_omega");
    NodeId logit_s = forward(g, binding, p, "d", features_s);
    NodeId logit_t = forward(g, binding, p, "d", features_t);
    NodeId bce_s = g.binary_cross_entropy(
        g.sigmoid(logit_s), std::vector<double>(g.value(features_s).rows(), 1.0));
    NodeId bce_t = g.binary_cross_entropy(
        g.sigmoid(logit_t), std::vector<double>(g.value(features_t).rows(), 0.0));
    return g.add(bce_s, bce_t);
}

inline NodeId dann_omega_node(Graph& g, const ParamBinding& binding, const ModelParams& p,
                              NodeId features_s, NodeId features_t) {
    return g.scale(dann_domain_loss(g, binding, p, features_s, features_t), -1.0);
}

// Resolves a DivergenceKind against a pair of feature nodes. For cmd with no
// explicit box the observed range over both batches is used (treated as a
// constant of the differentiation).
inline NodeId divergence_node(Graph& g, const DivergenceKind& kind, NodeId fs, NodeId ft,
                              const ParamBinding* binding = nullptr,
                              const ModelParams* params = nullptr) {
    kind.validate();
    switch (kind.tag) {
        case DivergenceTag::dann:
            check(binding != nullptr && params != nullptr,
                  "dann divergence requires discriminator parameters");
            return dann_omega_node(g, *binding, *params, fs, ft);
        case DivergenceTag::mmd:
            return mmd_node(g, fs, ft, kind.sigma);
        case DivergenceTag::coral:
            return coral_node(g, fs, ft);
        case DivergenceTag::cmd: {
            double a, b;
            if (kind.box) {
                a = kind.box->first;
                b = kind.box->second;
            } else {
                const Tensor& s = g.value(fs);
                const Tensor& t = g.value(ft);
                a = s[0];
                b = s[0];
                for (std::size_t i = 0; i < s.numel(); ++i) {
                    a = std::min(a, s[i]);
                    b = std::max(b, s[i]);
                }
                for (std::size_t i = 0; i < t.numel(); ++i) {
                    a = std::min(a, t[i]);
                    b = std::max(b, t[i]);
                }
                if (b - a < 1e-12) b = a + 1e-12;
            }
            return cmd_node(g, fs, ft, kind.moments, a, b);
        }
    }
    throw std::invalid_argument("unknown divergence tag");
}

// -- plain value wrappers (one code path: a scratch tape) --------------------

inline double mmd(const Tensor& fs, const Tensor& ft, double sigma) {
    Graph g;
    return g.value(mmd_node(g, g.leaf(fs), g.leaf(ft), sigma)).value();
}

inline double coral(const Tensor& fs, const Tensor& ft) {
    Graph g;
    return g.value(coral_node(g, g.leaf(fs), g.leaf(ft))).value();
}

inline double cmd(const Tensor& fs, const Tensor& ft, int K, double a, double b) {
    Graph g;
    return g.value(cmd_node(g, g.leaf(fs), g.leaf(ft), K, a, b)).value();
}

inline double dann_omega(const Tensor& fs, const Tensor& ft, const ModelParams& p) {
    Graph g;
    ParamBinding binding = bind_params(g, p);
    return g.value(dann_omega_node(g, binding, p, g.leaf(fs), g.leaf(ft))).value();
}

} // namespace dartlab
