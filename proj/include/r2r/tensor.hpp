#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "r2r/rng.hpp"

namespace r2r {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;

template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Dense row-major tensor. Scalar type is a template parameter: float is the
// working precision of the pipeline, double is used by the finite-difference
// gradient oracles in the tests.
template <typename T>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), fill);
    }

    static TensorT from(std::vector<int64_t> s, std::vector<T> d) {
        TensorT t;
        if (count(s) != static_cast<int64_t>(d.size()))
            throw std::invalid_argument("tensor: data size does not match shape");
        t.shape = std::move(s);
        t.data = std::move(d);
        return t;
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 4d accessor, used by image/conv code
    T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    const T& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    T& at3(int64_t a, int64_t b, int64_t c) {
        return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    const T& at3(int64_t a, int64_t b, int64_t c) const {
        return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    T& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    const T& at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    TensorT reshaped(std::vector<int64_t> s) const {
        if (count(s) != numel()) throw std::invalid_argument("tensor: reshape element count mismatch");
        TensorT t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Eigen views over a [rows, cols] interpretation of the buffer
    MatMap<T> mat(int64_t rows, int64_t cols) {
        return MatMap<T>(data.data(), rows, cols);
    }
    ConstMatMap<T> mat(int64_t rows, int64_t cols) const {
        return ConstMatMap<T>(data.data(), rows, cols);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
        return t;
    }
};

using Tensor = TensorT<float>;

template <typename T>
TensorT<T> randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <typename T>
TensorT<T> rand_uniform(std::vector<int64_t> shape, Rng& rng, double lo, double hi) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double rel_error(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape(a, b, "rel_error");
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        num += d * d;
        double r = static_cast<double>(b[i]);
        den += r * r;
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

template <typename T>
double rms(const TensorT<T>& a) {
    double s = 0.0;
    for (T v : a.data) s += static_cast<double>(v) * static_cast<double>(v);
    return a.numel() > 0 ? std::sqrt(s / static_cast<double>(a.numel())) : 0.0;
}

template <typename T>
bool bit_equal(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

// FNV-1a 64-bit content hash over the raw buffer, used for checkpoints and
// run-report checksums.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
uint64_t content_hash(const TensorT<T>& t) {
    uint64_t h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t));
    return fnv1a64(t.data.data(), t.data.size() * sizeof(T), h);
}

}  // namespace r2r
