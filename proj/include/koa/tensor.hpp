#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "koa/errors.hpp"

namespace koa {

/// N-dimensional array of 64-bit reals, row-major. Used for activations,
/// parameters, gradients and stacked feature matrices.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    static Tensor zeros(std::vector<size_t> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(t.shape_numel(), 0.0);
        return t;
    }

    static Tensor full(std::vector<size_t> s, double v) {
        Tensor t = zeros(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    size_t numel() const { return data.size(); }

    size_t rank() const { return shape.size(); }

    size_t dim(size_t i) const { return shape.at(i); }

    size_t shape_numel() const {
        size_t n = 1;
        for (size_t e : shape) n *= e;
        return n;
    }

    bool shape_equals(const Tensor& other) const { return shape == other.shape; }

    // 2-D accessors (rows x cols).
    double& at2(size_t i, size_t j) { return data[i * shape[1] + j]; }
    double at2(size_t i, size_t j) const { return data[i * shape[1] + j]; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

    void require_shape(const std::vector<size_t>& s, const std::string& what) const {
        if (shape != s) {
            Tensor want;
            want.shape = s;
            throw DataError(what + ": expected shape " + want.shape_str() + ", got " + shape_str());
        }
    }
};

}  // namespace koa
