#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "masf/errors.hpp"

namespace masf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major array of doubles.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vector(std::initializer_list<double> v) {
        return Tensor(Shape{v.size()}, std::vector<double>(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> v);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double item() const;
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols(), cols()};
    }

    bool operator==(const Tensor&) const = default;
};

}  // namespace masf
