#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace iclp {

// Dense row-major tensor. Rank 0 (scalar), 1 or 2 is all the pipeline needs.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(count(shape)))
            throw std::invalid_argument("tensor data length does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 1 : shape[0]); }

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor<T>& operator+=(const Tensor& o) {
        assert(same_shape(o));
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

}  // namespace iclp
