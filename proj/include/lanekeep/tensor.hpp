#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lanekeep/errors.hpp"
#include "lanekeep/rng.hpp"

namespace lanekeep {

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); i++) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

inline long shape_numel(const std::vector<int>& shape) {
    long n = 1;
    for (int e : shape) n *= e;
    return n;
}

// Dense row-major tensor of 64-bit reals.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<long>(data.size()) != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        long n = shape_numel(s);
        t.shape = std::move(s);
        t.data.assign(static_cast<std::size_t>(n), 0.0);
        return t;
    }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t = zeros(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(s));
        for (double& x : t.data) x = rng.normal(0.0, stddev);
        return t;
    }

    long size() const { return static_cast<long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    double& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](long i) const { return data[static_cast<std::size_t>(i)]; }

    // 2-d accessor, row-major
    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

}  // namespace lanekeep
