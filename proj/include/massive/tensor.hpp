#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "error.hpp"

namespace massive {

using Shape = std::vector<std::size_t>;

enum class DType { f32, f64 };

template <class T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
constexpr DType dtype_of() {
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::string shape_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "x" : "") << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor. Owns a contiguous buffer; copies are deep.
template <Scalar T>
class Tensor {
public:
    using value_type = T;
    static constexpr DType dtype = dtype_of<T>();

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " elements");
        }
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<T> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    static Tensor vector(std::initializer_list<T> values) {
        return Tensor({values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const noexcept { return data_.empty(); }

    // Matrix view of a tensor: leading dims collapse into rows.
    std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const& {
        Tensor out = *this;
        return std::move(out).reshaped(std::move(s));
    }
    Tensor reshaped(Shape s) && {
        if (shape_numel(s) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
        }
        shape_ = std::move(s);
        return std::move(*this);
    }

    template <Scalar U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    // Value equality; -0.0 == 0.0.
    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

namespace detail {

// Fixed-order dot product with eight independent partial sums. The order is the
// same on every call so results are reproducible, and the independent lanes let
// the compiler vectorize without reassociating.
template <Scalar T>
inline T dot(const T* a, const T* b, std::size_t n) noexcept {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t j = 0; j < 8; ++j) {
            acc[j] += a[i + j] * b[i + j];
        }
    }
    T tail = 0;
    for (; i < n; ++i) {
        tail += a[i] * b[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

template <Scalar T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

template <Scalar T>
inline T silu(T x) noexcept {
    return x / (T{1} + std::exp(-x));
}

template <Scalar T>
inline T sigmoid(T x) noexcept {
    return T{1} / (T{1} + std::exp(-x));
}

inline void require_matrix(const Shape& s, const char* what) {
    if (s.size() != 2) {
        throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(s));
    }
}

// True when `b` broadcasts onto `a`: same shape, or a vector matching a's last extent.
inline bool trailing_broadcastable(const Shape& a, const Shape& b) {
    if (a == b) {
        return true;
    }
    return b.size() == 1 && !a.empty() && a.back() == b[0];
}

} // namespace detail

// c = a · b for a[m×k], b[k×n].
template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a.shape(), "matmul");
    detail::require_matrix(b.shape(), "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    Tensor<T> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c.ptr() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            detail::axpy(a.ptr()[i * k + t], b.ptr() + t * n, ci, n);
        }
    }
    return c;
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_matrix(a.shape(), "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out.ptr()[j * r + i] = a.ptr()[i * c + j];
        }
    }
    return out;
}

// y = x · wᵀ for x[m×in], w[out×in]; the layout every projection weight uses.
template <Scalar T>
Tensor<T> matmul_transposed(const Tensor<T>& x, const Tensor<T>& w) {
    detail::require_matrix(w.shape(), "matmul_transposed");
    const std::size_t in = w.dim(1), out = w.dim(0);
    if (x.cols() != in) {
        throw DimensionError("matmul_transposed inner extents differ: " + shape_string(x.shape()) + " x " +
                             shape_string(w.shape()) + "^T");
    }
    const std::size_t m = x.rows();
    Tensor<T> y({m, out});
    if (m == 1) {
        for (std::size_t o = 0; o < out; ++o) {
            y.ptr()[o] = detail::dot(x.ptr(), w.ptr() + o * in, in);
        }
        return y;
    }
    // row-by-row axpy over wᵀ keeps the inner loop contiguous and vectorizable
    const Tensor<T> wt = transpose(w);
    for (std::size_t i = 0; i < m; ++i) {
        const T* xi = x.ptr() + i * in;
        T* yi = y.ptr() + i * out;
        for (std::size_t t = 0; t < in; ++t) {
            detail::axpy(xi[t], wt.ptr() + t * out, yi, out);
        }
    }
    return y;
}

namespace detail {

template <Scalar T, class F>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what) {
    if (!trailing_broadcastable(a.shape(), b.shape())) {
        throw DimensionError(std::string(what) + " shapes not broadcast-compatible: " + shape_string(a.shape()) +
                             " and " + shape_string(b.shape()));
    }
    Tensor<T> out(a.shape());
    const std::size_t n = a.numel(), m = b.numel();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = f(a[i], b[i % m]);
    }
    return out;
}

template <Scalar T, class F>
Tensor<T> unary(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        out[i] = f(a[i]);
    }
    return out;
}

} // namespace detail

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, [](T x, T y) { return x + y; }, "add");
}

template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, [](T x, T y) { return x * y; }, "mul");
}

template <Scalar T>
Tensor<T> silu(const Tensor<T>& a) {
    return detail::unary(a, [](T x) { return detail::silu(x); });
}

template <Scalar T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary(a, [](T x) { return std::exp(x); });
}

template <Scalar T>
void softmax_inplace(std::span<T> row) {
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (T& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    const T inv = T{1} / sum;
    for (T& v : row) {
        v *= inv;
    }
}

template <Scalar T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
    Tensor<T> out = a;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        softmax_inplace(out.row(r));
    }
    return out;
}

// y = x / sqrt(mean(x²) + eps) · gain, row by row.
template <Scalar T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
    if (eps < 0) {
        throw ConfigError("rmsnorm eps must be non-negative");
    }
    if (gain.numel() != x.cols()) {
        throw DimensionError("rmsnorm gain " + shape_string(gain.shape()) + " vs input " + shape_string(x.shape()));
    }
    Tensor<T> out(x.shape());
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const T* xr = x.ptr() + r * n;
        const T ms = detail::dot(xr, xr, n) / static_cast<T>(n);
        const T inv = T{1} / std::sqrt(ms + static_cast<T>(eps));
        T* yr = out.ptr() + r * n;
        for (std::size_t i = 0; i < n; ++i) {
            yr[i] = xr[i] * inv * gain[i];
        }
    }
    return out;
}

template <Scalar T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
    if (eps < 0) {
        throw ConfigError("layernorm eps must be non-negative");
    }
    if (gain.numel() != x.cols() || bias.numel() != x.cols()) {
        throw DimensionError("layernorm affine parameters do not match input " + shape_string(x.shape()));
    }
    Tensor<T> out(x.shape());
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const T* xr = x.ptr() + r * n;
        T mean = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mean += xr[i];
        }
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            var += (xr[i] - mean) * (xr[i] - mean);
        }
        var /= static_cast<T>(n);
        const T inv = T{1} / std::sqrt(var + static_cast<T>(eps));
        T* yr = out.ptr() + r * n;
        for (std::size_t i = 0; i < n; ++i) {
            yr[i] = (xr[i] - mean) * inv * gain[i] + bias[i];
        }
    }
    return out;
}

// log softmax(row)[target], accumulated in double.
template <Scalar T>
double log_softmax_at(std::span<const T> row, std::uint32_t target) {
    const T mx = *std::max_element(row.begin(), row.end());
    double s = 0;
    for (T v : row) {
        s += std::exp(static_cast<double>(v - mx));
    }
    return static_cast<double>(row[target] - mx) - std::log(s);
}

template <Scalar T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff shapes differ: " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

} // namespace massive
