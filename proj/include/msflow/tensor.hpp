#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msflow/error.hpp"

namespace msflow {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ',';
        os << dims[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array; the last dimension is contiguous.
///
/// Rank-3 tensors are read as [channels, height, width] throughout the
/// library, rank-2 as [height, width].
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape dims, T fill = T(0)) : dims_(std::move(dims)), data_(shape_numel(dims_), fill) {
        check_dims();
    }

    Tensor(Shape dims, std::vector<T> values) : dims_(std::move(dims)), data_(std::move(values)) {
        check_dims();
        if (data_.size() != shape_numel(dims_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match dims " +
                             shape_string(dims_));
        }
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.dims_); }

    const Shape& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t dim(std::size_t i) const { return dims_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> values() & noexcept { return data_; }
    std::span<const T> values() const& noexcept { return data_; }
    std::span<const T> values() && = delete;  // would dangle
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // Rank-3 helpers.
    std::size_t channels() const { return dims_.at(0); }
    std::size_t height() const { return dims_.at(rank() - 2); }
    std::size_t width() const { return dims_.at(rank() - 1); }
    std::size_t plane() const { return height() * width(); }

    T& at(std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[(c * dims_[1] + y) * dims_[2] + x];
    }
    const T& at(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[(c * dims_[1] + y) * dims_[2] + x];
    }
    T& at(std::size_t y, std::size_t x) noexcept { return data_[y * dims_[1] + x]; }
    const T& at(std::size_t y, std::size_t x) const noexcept { return data_[y * dims_[1] + x]; }

    T* channel(std::size_t c) noexcept { return data_.data() + c * plane(); }
    const T* channel(std::size_t c) const noexcept { return data_.data() + c * plane(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape dims) const {
        Tensor out;
        out.dims_ = std::move(dims);
        out.check_dims();
        if (shape_numel(out.dims_) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(dims_) + " to " + shape_string(out.dims_));
        }
        out.data_ = data_;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> v(data_.size());
        std::transform(data_.begin(), data_.end(), v.begin(), [](T x) { return static_cast<U>(x); });
        return Tensor<U>(dims_, std::move(v));
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_dims(other, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    void require_same_dims(const Tensor& other, const char* op) const {
        if (dims_ != other.dims_) {
            throw ShapeError(std::string(op) + ": dims " + shape_string(dims_) + " vs " + shape_string(other.dims_));
        }
    }

    void require_rank(std::size_t r, const char* op) const {
        if (rank() != r) {
            throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got dims " +
                             shape_string(dims_));
        }
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.dims_ == b.dims_ && a.data_ == b.data_; }

private:
    void check_dims() const {
        for (auto d : dims_) {
            if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_string(dims_));
        }
    }

    Shape dims_;
    std::vector<T> data_;
};

/// Throws NumericError naming `where` if any value is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& t, const char* where) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i])) {
            throw NumericError(std::string(where) + ": non-finite value at flat index " + std::to_string(i) +
                               " of tensor " + shape_string(t.dims()));
        }
    }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same_dims(b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

template <typename T>
double squared_norm(const Tensor<T>& t) {
    double s = 0.0;
    for (auto v : t.values()) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
}

}  // namespace msflow
