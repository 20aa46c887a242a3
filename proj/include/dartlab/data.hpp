#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dartlab/common.hpp"
#include "dartlab/tensor.hpp"

namespace dartlab {

enum class Domain { source, target };
enum class Split { train, val, test };

struct LabeledSet {
    Tensor features; // [n x d]
    std::vector<int> labels;
    Domain domain = Domain::source;
    Split split = Split::train;

    std::size_t size() const { return features.rows(); }
};

// Features only: target training data crosses this boundary so trainer code
// cannot reach target labels.
struct UnlabeledSet {
    Tensor features;
    Domain domain = Domain::target;
    Split split = Split::train;

    std::size_t size() const { return features.rows(); }
};

inline UnlabeledSet strip_labels(const LabeledSet& s) {
    return UnlabeledSet{s.features, s.domain, s.split};
}

namespace detail {

inline void rotate_rows(Tensor& points, double degrees) {
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    for (std::size_t i = 0; i < points.rows(); ++i) {
        const double x = points.at(i, 0), y = points.at(i, 1);
        points.at(i, 0) = c * x - s * y;
        points.at(i, 1) = s * x + c * y;
    }
}

inline LabeledSet sample_two_moons(std::size_t n, double noise_std, Rng& rng) {
    Tensor points({n, 2});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        const double theta = rng.uniform(0.0, 3.14159265358979323846);
        double x, y;
        if (label == 0) {
            x = std::cos(theta);
            y = std::sin(theta);
        } else {
            x = 1.0 - std::cos(theta);
            y = 0.5 - std::sin(theta);
        }
        points.at(i, 0) = x + noise_std * rng.normal();
        points.at(i, 1) = y + noise_std * rng.normal();
        labels[i] = label;
    }
    return LabeledSet{std::move(points), std::move(labels), Domain::source, Split::train};
}

inline LabeledSet sample_blobs(std::size_t n, double noise_std, Rng& rng) {
    Tensor points({n, 2});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        const double mx = label == 0 ? -1.0 : 1.0;
        points.at(i, 0) = mx + noise_std * rng.normal();
        points.at(i, 1) = noise_std * rng.normal();
        labels[i] = label;
    }
    return LabeledSet{std::move(points), std::move(labels), Domain::source, Split::train};
}

} // namespace detail

// Interleaved half circles; the target domain is the same distribution rotated
// about the origin, sampled fresh. Target labels are retained for evaluation
// splits only and never reach trainers.
inline std::pair<LabeledSet, LabeledSet> gen_two_moons_shift(std::size_t n_per_domain,
                                                             double rotation_degrees,
                                                             double noise_std,
                                                             std::uint64_t seed) {
    check(n_per_domain >= 4, "gen_two_moons_shift: need at least 4 points per domain");
    check(noise_std >= 0.0, "gen_two_moons_shift: noise must be >= 0");
    Rng rng_s(derive_seed(seed, "two-moons-source"));
    Rng rng_t(derive_seed(seed, "two-moons-target"));
    LabeledSet source = detail::sample_two_moons(n_per_domain, noise_std, rng_s);
    LabeledSet target = detail::sample_two_moons(n_per_domain, noise_std, rng_t);
    detail::rotate_rows(target.features, rotation_degrees);
    target.domain = Domain::target;
    return {std::move(source), std::move(target)};
}

// Two Gaussian blobs per domain; the target's class means are translated.
// A linearly separable companion to the two-moons pair.
inline std::pair<LabeledSet, LabeledSet> gen_blobs_shift(std::size_t n_per_domain, double shift_x,
                                                         double shift_y, double noise_std,
                                                         std::uint64_t seed) {
    check(n_per_domain >= 4, "gen_blobs_shift: need at least 4 points per domain");
    check(noise_std >= 0.0, "gen_blobs_shift: noise must be >= 0");
    Rng rng_s(derive_seed(seed, "blobs-source"));
    Rng rng_t(derive_seed(seed, "blobs-target"));
    LabeledSet source = detail::sample_blobs(n_per_domain, noise_std, rng_s);
    LabeledSet target = detail::sample_blobs(n_per_domain, noise_std, rng_t);
    for (std::size_t i = 0; i < target.size(); ++i) {
        target.features.at(i, 0) += shift_x;
        target.features.at(i, 1) += shift_y;
    }
    target.domain = Domain::target;
    return {std::move(source), std::move(target)};
}

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

inline LabeledSet take_rows(const LabeledSet& s, const std::vector<std::size_t>& idx,
                            std::size_t begin, std::size_t end, Split split) {
    const std::size_t d = s.features.cols();
    Tensor feats({end - begin, d});
    std::vector<int> labels(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        for (std::size_t j = 0; j < d; ++j) feats.at(i - begin, j) = s.features.at(idx[i], j);
        labels[i - begin] = s.labels[idx[i]];
    }
    return LabeledSet{std::move(feats), std::move(labels), s.domain, split};
}

} // namespace detail

struct TargetSplits {
    UnlabeledSet train; // labels stripped
    LabeledSet val;
    LabeledSet test;
};

// 6:2:2 by default; sizes are floor(ratio * n) for val and test with the
// remainder going to train. Disjoint, exhaustive, shuffled by seed.
inline TargetSplits split_target(const LabeledSet& set,
                                 std::array<double, 3> ratios /* train,val,test */,
                                 std::uint64_t seed) {
    check(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) < 1e-9,
          "split_target: ratios must sum to 1");
    const std::size_t n = set.size();
    const std::size_t n_val = static_cast<std::size_t>(ratios[1] * static_cast<double>(n));
    const std::size_t n_test = static_cast<std::size_t>(ratios[2] * static_cast<double>(n));
    check(n_val >= 1 && n_test >= 1 && n > n_val + n_test, "split_target: a part would be empty");
    const std::size_t n_train = n - n_val - n_test;

    auto idx = detail::shuffled_indices(n, seed);
    LabeledSet train = detail::take_rows(set, idx, 0, n_train, Split::train);
    LabeledSet val = detail::take_rows(set, idx, n_train, n_train + n_val, Split::val);
    LabeledSet test = detail::take_rows(set, idx, n_train + n_val, n, Split::test);
    return TargetSplits{strip_labels(train), std::move(val), std::move(test)};
}

// Source keeps the leading fraction for training; the remainder is unused at
// this scale.
inline LabeledSet split_source_train(const LabeledSet& set, double fraction, std::uint64_t seed) {
    check(fraction > 0.0 && fraction <= 1.0, "split_source_train: fraction in (0, 1] required");
    const std::size_t n = set.size();
    const std::size_t n_train = static_cast<std::size_t>(fraction * static_cast<double>(n));
    check(n_train >= 1, "split_source_train: empty training part");
    auto idx = detail::shuffled_indices(n, seed);
    return detail::take_rows(set, idx, 0, n_train, Split::train);
}

// ---------------------------------------------------------------------------
// CSV: comma-separated decimals, integer label in the last column when
// labelled. Ragged rows are rejected with the offending line number.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<double>> parse_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    check_runtime(in.good(), "cannot open csv: " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            const char* begin = cell.c_str();
            char* end = nullptr;
            const double v = std::strtod(begin, &end);
            while (end && *end == ' ') ++end;
            check_runtime(end != begin && end && *end == '\0',
                          "csv parse failure at line " + std::to_string(line_no));
            row.push_back(v);
        }
        if (!rows.empty())
            check_runtime(row.size() == rows.front().size(),
                          "csv has ragged row at line " + std::to_string(line_no));
        rows.push_back(std::move(row));
    }
    check_runtime(!rows.empty(), "csv is empty: " + path.string());
    return rows;
}

} // namespace detail

inline LabeledSet load_labeled_csv(const std::filesystem::path& path,
                                   Domain domain = Domain::source, Split split = Split::train) {
    auto rows = detail::parse_csv(path);
    check_runtime(rows.front().size() >= 2, "labelled csv needs at least one feature column");
    const std::size_t d = rows.front().size() - 1;
    Tensor feats({rows.size(), d});
    std::vector<int> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) feats.at(i, j) = rows[i][j];
        const double lv = rows[i][d];
        check_runtime(lv == std::floor(lv) && lv >= 0,
                      "csv label is not a nonnegative integer at line " + std::to_string(i + 1));
        labels[i] = static_cast<int>(lv);
    }
    return LabeledSet{std::move(feats), std::move(labels), domain, split};
}

inline UnlabeledSet load_unlabeled_csv(const std::filesystem::path& path,
                                       Domain domain = Domain::target,
                                       Split split = Split::train) {
    auto rows = detail::parse_csv(path);
    const std::size_t d = rows.front().size();
    Tensor feats({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) feats.at(i, j) = rows[i][j];
    return UnlabeledSet{std::move(feats), domain, split};
}

inline void save_csv(const Tensor& features, const std::vector<int>* labels,
                     const std::filesystem::path& path) {
    check(features.rank() == 2, "save_csv: rank-2 features required");
    if (labels) check(labels->size() == features.rows(), "save_csv: label count mismatch");
    std::ostringstream out;
    char buf[64];
    for (std::size_t i = 0; i < features.rows(); ++i) {
        for (std::size_t j = 0; j < features.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", features.at(i, j));
            if (j) out << ',';
            out << buf;
        }
        if (labels) out << ',' << (*labels)[i];
        out << '\n';
    }
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        check_runtime(f.good(), "cannot open for writing: " + tmp.string());
        f << out.str();
    }
    fs::rename(tmp, path);
}

} // namespace dartlab
