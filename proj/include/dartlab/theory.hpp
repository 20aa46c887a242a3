#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dartlab/common.hpp"

namespace dartlab::theory {

using Point = std::vector<double>;

// Axis-aligned threshold with an orientation flag. Keeping both orientations
// in a class closes it under complement.
struct Hypothesis {
    int axis = 0;
    double threshold = 0.0;
    bool positive_above = true; // h(x) = 1 iff x[axis] > threshold; else the complement

    bool eval(const Point& x) const {
        const bool above = x[static_cast<std::size_t>(axis)] > threshold;
        return positive_above ? above : !above;
    }
};

struct FiniteHypothesisClass {
    std::vector<Hypothesis> hypotheses;

    // The derived symmetric-difference class: every ordered pair (h1, h2),
    // evaluated as h1(x) XOR h2(x).
    std::vector<std::pair<int, int>> xor_pairs() const {
        std::vector<std::pair<int, int>> out;
        const int m = static_cast<int>(hypotheses.size());
        out.reserve(static_cast<std::size_t>(m) * static_cast<std::size_t>(m));
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) out.emplace_back(a, b);
        return out;
    }

    static FiniteHypothesisClass thresholds_1d(const std::vector<double>& cuts) {
        FiniteHypothesisClass cls;
        for (double t : cuts) {
            cls.hypotheses.push_back(Hypothesis{0, t, true});
            cls.hypotheses.push_back(Hypothesis{0, t, false});
        }
        check(!cls.hypotheses.empty(), "hypothesis class must be nonempty");
        return cls;
    }

    static FiniteHypothesisClass stumps_2d(const std::vector<double>& cuts_x,
                                           const std::vector<double>& cuts_y) {
        FiniteHypothesisClass cls;
        for (double t : cuts_x) {
            cls.hypotheses.push_back(Hypothesis{0, t, true});
            cls.hypotheses.push_back(Hypothesis{0, t, false});
        }
        for (double t : cuts_y) {
            cls.hypotheses.push_back(Hypothesis{1, t, true});
            cls.hypotheses.push_back(Hypothesis{1, t, false});
        }
        check(!cls.hypotheses.empty(), "hypothesis class must be nonempty");
        return cls;
    }
};

namespace detail {

// Predictions of one hypothesis over a point list, packed into a 64-bit mask.
inline std::uint64_t prediction_mask(const Hypothesis& h, const std::vector<Point>& pts) {
    check(pts.size() <= 64, "theory enumeration is limited to 64 points per set");
    std::uint64_t m = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (h.eval(pts[i])) m |= (1ULL << i);
    return m;
}

inline int popcount(std::uint64_t x) { return __builtin_popcountll(x); }

} // namespace detail

// Smallest value over H-delta-H of #{x in X_S : h(x)=0} + #{x in X_T : h(x)=1},
// in integer counts.
inline long hdh_min_bracket_count(const std::vector<Point>& xs, const std::vector<Point>& xt,
                                  const FiniteHypothesisClass& cls) {
    check(xs.size() == xt.size(), "empirical_hdh: sample sizes must match");
    const long n = static_cast<long>(xs.size());
    std::vector<std::uint64_t> ms, mt;
    ms.reserve(cls.hypotheses.size());
    mt.reserve(cls.hypotheses.size());
    for (const auto& h : cls.hypotheses) {
        ms.push_back(detail::prediction_mask(h, xs));
        mt.push_back(detail::prediction_mask(h, xt));
    }
    long best = 2 * n + 1;
    for (auto [a, b] : cls.xor_pairs()) {
        const long src_zero = n - detail::popcount(ms[a] ^ ms[b]);
        const long tgt_one = detail::popcount(mt[a] ^ mt[b]);
        best = std::min(best, src_zero + tgt_one);
    }
    return best;
}

// Empirical H-delta-H divergence: 2 (1 - min bracket / n). Exact counts,
// single division at the end.
inline double empirical_hdh(const std::vector<Point>& xs, const std::vector<Point>& xt,
                            const FiniteHypothesisClass& cls) {
    const long n = static_cast<long>(xs.size());
    const long m = hdh_min_bracket_count(xs, xt, cls);
    return static_cast<double>(2 * n - 2 * m) / static_cast<double>(n);
}

inline long zero_one_errors(const Hypothesis& h, const std::vector<Point>& pts,
                            const std::vector<int>& labels) {
    long e = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (static_cast<int>(h.eval(pts[i])) != labels[i]) ++e;
    return e;
}

// Ideal joint loss: exact min over the base class of summed 0/1 errors on
// both labelled sets, in counts (divide by n for the loss value).
inline long ideal_joint_loss_count(const std::vector<Point>& ps, const std::vector<int>& ys,
                                   const std::vector<Point>& pt, const std::vector<int>& yt,
                                   const FiniteHypothesisClass& cls) {
    check(ps.size() == ys.size() && pt.size() == yt.size(),
          "ideal_joint_loss: labels must match points");
    long best = static_cast<long>(ps.size() + pt.size()) + 1;
    for (const auto& h : cls.hypotheses)
        best = std::min(best, zero_one_errors(h, ps, ys) + zero_one_errors(h, pt, yt));
    return best;
}

inline double ideal_joint_loss(const std::vector<Point>& ps, const std::vector<int>& ys,
                               const std::vector<Point>& pt, const std::vector<int>& yt,
                               const FiniteHypothesisClass& cls) {
    check(ps.size() == pt.size(), "ideal_joint_loss: sample sizes must match");
    return static_cast<double>(ideal_joint_loss_count(ps, ys, pt, yt, cls)) /
           static_cast<double>(ps.size());
}

// One explicit candidate list per target point; must contain the point itself.
struct DiscretePerturbationSet {
    std::vector<std::vector<Point>> candidates;

    void validate(const std::vector<Point>& targets) const {
        check(candidates.size() == targets.size(),
              "perturbation set: one candidate list per target point");
        for (std::size_t i = 0; i < targets.size(); ++i) {
            check(!candidates[i].empty(), "perturbation set: empty candidate list");
            bool found = false;
            for (const auto& c : candidates[i])
                if (c == targets[i]) found = true;
            check(found, "perturbation set: candidate list must contain the unperturbed point");
        }
    }

    double combinations() const {
        double c = 1.0;
        for (const auto& list : candidates) c *= static_cast<double>(list.size());
        return c;
    }
};

// Exact worst-case loss of one hypothesis: each point contributes 1 when any
// candidate perturbation is misclassified.
inline long adversarial_loss_count(const Hypothesis& h, const std::vector<Point>& pts,
                                   const std::vector<int>& labels,
                                   const DiscretePerturbationSet& perturb) {
    perturb.validate(pts);
    long e = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        for (const auto& cand : perturb.candidates[i])
            if (static_cast<int>(h.eval(cand)) != labels[i]) {
                ++e;
                break;
            }
    }
    return e;
}

inline double adversarial_loss_exact(const Hypothesis& h, const std::vector<Point>& pts,
                                     const std::vector<int>& labels,
                                     const DiscretePerturbationSet& perturb) {
    return static_cast<double>(adversarial_loss_count(h, pts, labels, perturb)) /
           static_cast<double>(pts.size());
}

struct WorstCaseSup {
    double value = 0.0;                   // max over assignments of d_hdh + 2 gamma
    long numerator = 0;                   // same, in units of 1/n
    std::vector<std::size_t> assignment;  // candidate index per target point
    long max_divergence_numerator = 0;    // max over assignments of n * d_hdh
};

// Enumerates every perturbation assignment and maximizes
// d_hdh(X_S, X~_T) + 2 gamma(Z_S, Z~_T) exactly. Also records the maximum of
// the divergence alone (needed for the adversarial-divergence comparison).
inline WorstCaseSup worst_case_sup(const std::vector<Point>& xs, const std::vector<int>& ys,
                                   const std::vector<Point>& xt, const std::vector<int>& yt,
                                   const DiscretePerturbationSet& perturb,
                                   const FiniteHypothesisClass& cls) {
    check(xs.size() == xt.size(), "worst_case_sup: sample sizes must match");
    perturb.validate(xt);
    check(perturb.combinations() <= 1e6, "worst_case_sup: enumeration too large");
    const std::size_t n = xt.size();
    const long ln = static_cast<long>(n);
    const std::size_t m = cls.hypotheses.size();

    // Fixed source-side masks and label mask.
    std::vector<std::uint64_t> src_mask(m);
    std::vector<long> src_errors(m);
    for (std::size_t h = 0; h < m; ++h) {
        src_mask[h] = detail::prediction_mask(cls.hypotheses[h], xs);
        src_errors[h] = zero_one_errors(cls.hypotheses[h], xs, ys);
    }
    std::uint64_t label_mask = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (yt[i]) label_mask |= (1ULL << i);

    // cand_bit[h][i][j] = h(B_i[j])
    std::vector<std::vector<std::vector<char>>> cand_bit(m);
    for (std::size_t h = 0; h < m; ++h) {
        cand_bit[h].resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            cand_bit[h][i].resize(perturb.candidates[i].size());
            for (std::size_t j = 0; j < perturb.candidates[i].size(); ++j)
                cand_bit[h][i][j] =
                    static_cast<char>(cls.hypotheses[h].eval(perturb.candidates[i][j]));
        }
    }

    WorstCaseSup best;
    best.numerator = -1;
    best.max_divergence_numerator = -1;

    std::vector<std::size_t> idx(n, 0);
    std::vector<std::uint64_t> tgt_mask(m);
    for (;;) {
        for (std::size_t h = 0; h < m; ++h) {
            std::uint64_t mask = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (cand_bit[h][i][idx[i]]) mask |= (1ULL << i);
            tgt_mask[h] = mask;
        }
        long min_bracket = 2 * ln + 1;
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < m; ++b) {
                const std::uint64_t xs_xor = src_mask[a] ^ src_mask[b];
                const std::uint64_t xt_xor = tgt_mask[a] ^ tgt_mask[b];
                const long bracket =
                    (ln - detail::popcount(xs_xor)) + detail::popcount(xt_xor);
                if (bracket < min_bracket) min_bracket = bracket;
            }
        long joint = 2 * ln + 1;
        for (std::size_t h = 0; h < m; ++h) {
            const long et = detail::popcount(tgt_mask[h] ^ label_mask);
            joint = std::min(joint, src_errors[h] + et);
        }
        const long d_num = 2 * ln - 2 * min_bracket;
        const long objective = d_num + 2 * joint;
        if (objective > best.numerator) {
            best.numerator = objective;
            best.assignment = idx;
        }
        best.max_divergence_numerator = std::max(best.max_divergence_numerator, d_num);

        std::size_t pos = 0;
        while (pos < n && ++idx[pos] == perturb.candidates[pos].size()) idx[pos++] = 0;
        if (pos == n) break;
    }
    best.value = static_cast<double>(best.numerator) / static_cast<double>(ln);
    return best;
}

// Empirical adversarial divergence: per-point sups inside the target average,
// absolute-value form, in units of 1/n (times 2).
inline long adversarial_divergence_numerator(const std::vector<Point>& xs,
                                             const std::vector<Point>& xt,
                                             const DiscretePerturbationSet& perturb,
                                             const FiniteHypothesisClass& cls) {
    check(xs.size() == xt.size(), "adversarial divergence: sample sizes must match");
    perturb.validate(xt);
    const std::size_t n = xt.size();
    const std::size_t m = cls.hypotheses.size();
    std::vector<std::uint64_t> src_mask(m);
    std::vector<std::uint64_t> any_mask(m); // bit i set when some candidate of B_i predicts 1
    for (std::size_t h = 0; h < m; ++h) {
        src_mask[h] = detail::prediction_mask(cls.hypotheses[h], xs);
        std::uint64_t mask = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (const auto& cand : perturb.candidates[i])
                if (cls.hypotheses[h].eval(cand)) {
                    mask |= (1ULL << i);
                    break;
                }
        any_mask[h] = mask;
    }
    long best = 0;
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b) {
            const long adv_t1 = detail::popcount(any_mask[a] ^ any_mask[b]);
            const long src_1 = detail::popcount(src_mask[a] ^ src_mask[b]);
            best = std::max(best, std::labs(adv_t1 - src_1));
        }
    return 2 * best;
}

// ---------------------------------------------------------------------------
// Bound checker
// ---------------------------------------------------------------------------

struct Instance {
    std::vector<Point> source_points;
    std::vector<int> source_labels;
    std::vector<Point> target_points;
    std::vector<int> target_labels;
    DiscretePerturbationSet perturb;
    FiniteHypothesisClass cls;

    void validate() const {
        check(source_points.size() == source_labels.size(), "instance: source labels mismatch");
        check(target_points.size() == target_labels.size(), "instance: target labels mismatch");
        check(source_points.size() == target_points.size(), "instance: sample sizes must match");
        check(!source_points.empty(), "instance: empty sample");
        for (int y : source_labels) check(y == 0 || y == 1, "instance: labels must be 0/1");
        for (int y : target_labels) check(y == 0 || y == 1, "instance: labels must be 0/1");
        perturb.validate(target_points);
    }
};

struct BoundRow {
    int hypothesis = 0;
    long lhs_count = 0; // n * adversarial target loss
    long rhs_count = 0; // n * (source loss + sup[d + 2 gamma])
    bool holds = true;
};

struct BoundReport {
    std::vector<BoundRow> rows;
    std::vector<int> violations;
    WorstCaseSup sup;
    long n = 0;
    long adv_divergence_numerator = 0; // n * d_adv
    long sup_divergence_numerator = 0; // n * max over assignments of d
    bool divergence_holds = true;

    bool all_hold() const { return violations.empty() && divergence_holds; }
};

// Checks, for every hypothesis in the base class and in exact integer
// arithmetic, that the adversarial target loss is at most the source loss plus
// the worst-case sup of d_hdh + 2 gamma; also checks that the adversarial
// divergence never exceeds the sup over perturbed targets of the plain
// divergence. Violations are reported, never silently passed.
inline BoundReport check_bound(const Instance& inst) {
    inst.validate();
    BoundReport report;
    report.n = static_cast<long>(inst.target_points.size());
    report.sup = worst_case_sup(inst.source_points, inst.source_labels, inst.target_points,
                                inst.target_labels, inst.perturb, inst.cls);
    for (std::size_t h = 0; h < inst.cls.hypotheses.size(); ++h) {
        BoundRow row;
        row.hypothesis = static_cast<int>(h);
        row.lhs_count = adversarial_loss_count(inst.cls.hypotheses[h], inst.target_points,
                                               inst.target_labels, inst.perturb);
        const long src = zero_one_errors(inst.cls.hypotheses[h], inst.source_points,
                                         inst.source_labels);
        row.rhs_count = src + report.sup.numerator;
        row.holds = row.lhs_count <= row.rhs_count;
        if (!row.holds) report.violations.push_back(row.hypothesis);
        report.rows.push_back(row);
    }
    report.adv_divergence_numerator = adversarial_divergence_numerator(
        inst.source_points, inst.target_points, inst.perturb, inst.cls);
    report.sup_divergence_numerator = report.sup.max_divergence_numerator;
    report.divergence_holds =
        report.adv_divergence_numerator <= report.sup_divergence_numerator;
    return report;
}

// ---------------------------------------------------------------------------
// Instance files and reports (theory-check CLI)
// ---------------------------------------------------------------------------

inline Instance instance_from_json(const nlohmann::json& doc) {
    Instance inst;
    auto load_points = [](const nlohmann::json& arr) {
        std::vector<Point> pts;
        for (const auto& p : arr) pts.push_back(p.get<Point>());
        return pts;
    };
    auto load_labels = [](const nlohmann::json& arr) {
        std::vector<int> ys;
        for (const auto& y : arr) {
            const double v = y.get<double>();
            ys.push_back(v > 0 ? 1 : 0); // accepts 0/1 and +-1
        }
        return ys;
    };
    inst.source_points = load_points(doc.at("source").at("points"));
    inst.source_labels = load_labels(doc.at("source").at("labels"));
    inst.target_points = load_points(doc.at("target").at("points"));
    inst.target_labels = load_labels(doc.at("target").at("labels"));
    for (const auto& lists : doc.at("perturbations"))
        inst.perturb.candidates.push_back(load_points(lists));
    const auto& cls = doc.at("hypothesis_class");
    const std::string type = cls.at("type").get<std::string>();
    if (type == "thresholds_1d") {
        inst.cls = FiniteHypothesisClass::thresholds_1d(cls.at("cuts").get<std::vector<double>>());
    } else if (type == "stumps_2d") {
        inst.cls = FiniteHypothesisClass::stumps_2d(
            cls.at("cuts")[0].get<std::vector<double>>(),
            cls.at("cuts")[1].get<std::vector<double>>());
    } else {
        throw std::invalid_argument("unknown hypothesis class type: " + type);
    }
    inst.validate();
    return inst;
}

inline nlohmann::json report_to_json(const BoundReport& report) {
    nlohmann::json doc;
    const double n = static_cast<double>(report.n);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows) {
        rows.push_back({{"hypothesis", row.hypothesis},
                        {"lhs", static_cast<double>(row.lhs_count) / n},
                        {"rhs", static_cast<double>(row.rhs_count) / n},
                        {"holds", row.holds}});
    }
    doc["per_hypothesis"] = std::move(rows);
    doc["violations"] = report.violations;
    doc["sup_value"] = report.sup.value;
    doc["sup_assignment"] = report.sup.assignment;
    doc["adversarial_divergence"] = static_cast<double>(report.adv_divergence_numerator) / n;
    doc["sup_divergence"] = static_cast<double>(report.sup_divergence_numerator) / n;
    doc["divergence_holds"] = report.divergence_holds;
    return doc;
}

} // namespace dartlab::theory
