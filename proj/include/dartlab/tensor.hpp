#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "dartlab/common.hpp"

namespace dartlab {

// Dense row-major array of 64-bit floats. Rank 0 (empty shape) is a scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check(data_.size() == shape_product(shape_), "tensor data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor row(std::initializer_list<double> vals) {
        return Tensor({vals.size()}, std::vector<double>(vals));
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> data) {
        return Tensor({r, c}, std::move(data));
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    static Tensor filled(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    std::size_t rows() const {
        check(rank() == 2, "rows(): tensor is not rank 2");
        return shape_[0];
    }
    std::size_t cols() const {
        check(rank() == 2, "cols(): tensor is not rank 2");
        return shape_[1];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double value() const {
        check(is_scalar(), "value(): tensor is not scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::size_t shape_product(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.raw() == b.raw();
}

// ---------------------------------------------------------------------------
// Value-level kernels shared by the tape primitives and plain evaluation.
// ---------------------------------------------------------------------------

inline Tensor matmul_value(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank 2");
    check(a.cols() == b.rows(), "matmul: inner extents differ");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out({n, m});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            if (av == 0.0) continue;
            const double* brow = pb + l * m;
            double* orow = po + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// a [n x k] gains b [k] per row, or elementwise when shapes match.
inline Tensor add_value(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
        return out;
    }
    check(a.rank() == 2 && b.rank() == 1 && a.cols() == b.numel(),
          "add: shapes must match or broadcast a row vector over the batch");
    Tensor out = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(i, j) += b[j];
    return out;
}

inline Tensor transpose_value(const Tensor& a) {
    check(a.rank() == 2, "transpose: rank 2 required");
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

inline Tensor sign_value(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = out[i] > 0.0 ? 1.0 : (out[i] < 0.0 ? -1.0 : 0.0);
    return out;
}

} // namespace dartlab
