#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "seqflow/errors.hpp"

namespace seqflow {

// Dense row-major tensor of doubles. Rank 0 (scalar, shape {}) through rank 3
// is all the flows need; most of the library works with vectors and matrices.
// Tensors are plain values: copying copies the data, and nothing here is
// shared, so they are safe to read from any number of threads.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(compute_numel(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (compute_numel(shape_) != static_cast<long long>(data_.size()))
            throw UsageError("Tensor: shape does not match data length");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor row(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return Tensor({1, n}, std::move(v));
    }

    static Tensor vec(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    long long numel() const { return static_cast<long long>(data_.size()); }
    bool empty() const { return data_.empty() && shape_.empty(); }

    int rows() const { return rank() == 2 ? shape_[0] : (rank() <= 1 ? 1 : shape_[0]); }
    int cols() const {
        if (rank() == 2) return shape_[1];
        if (rank() == 1) return shape_[0];
        if (rank() == 0) return 1;
        throw UsageError("Tensor::cols on rank-3 tensor");
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](long long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long long i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int i, int j) { return data_[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return data_[static_cast<size_t>(i) * cols() + j]; }

    double value() const {
        if (numel() != 1) throw UsageError("Tensor::value: not a scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        if (compute_numel(shape) != numel())
            throw UsageError("Tensor::reshaped: element count mismatch");
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static long long compute_numel(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            if (d <= 0) throw UsageError("Tensor: non-positive extent in shape");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

inline double l2_norm(const Tensor& t) {
    double s = 0.0;
    for (long long i = 0; i < t.numel(); ++i) s += t[i] * t[i];
    return std::sqrt(s);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw UsageError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (long long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace seqflow
