#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "herbert/error.hpp"

namespace herbert {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor. Rank-2 tensors double as matrices, with row r
/// holding the embedding of token r where that applies.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(element_count(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != element_count(shape)) {
            throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_string(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.empty() ? 0 : data.size() / std::max<std::size_t>(shape[0], 1); }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

    bool all_finite() const {
        for (const T& x : data) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    }

    bool operator==(const Tensor&) const = default;
};

/// Named tensor collection. std::map keeps iteration (and serialization)
/// order deterministic.
template <class T>
using TensorMap = std::map<std::string, Tensor<T>>;

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.assign(t.data.begin(), t.data.end());
    return out;
}

template <class To, class From>
TensorMap<To> tensor_map_cast(const TensorMap<From>& m) {
    TensorMap<To> out;
    for (const auto& [name, t] : m) {
        out.emplace(name, tensor_cast<To>(t));
    }
    return out;
}

/// Map with the same names and shapes, all zeros.
template <class T>
TensorMap<T> zeros_like(const TensorMap<T>& m) {
    TensorMap<T> out;
    for (const auto& [name, t] : m) {
        out.emplace(name, Tensor<T>(t.shape));
    }
    return out;
}

template <class T>
std::size_t parameter_count(const TensorMap<T>& m) {
    std::size_t n = 0;
    for (const auto& [name, t] : m) {
        n += t.size();
    }
    return n;
}

} // namespace herbert
