#include "masf/tensor.hpp"

#include <numeric>

namespace masf {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
        throw ShapeError("tensor of shape " + to_string(shape) + " given " +
                         std::to_string(data.size()) + " values");
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> v) {
    return Tensor(Shape{rows, cols}, std::vector<double>(v));
}

std::size_t Tensor::rows() const {
    return shape.size() == 2 ? shape[0] : 1;
}

std::size_t Tensor::cols() const {
    if (shape.empty()) return 1;
    return shape.back();
}

double Tensor::item() const {
    if (data.size() != 1) {
        throw ShapeError("item() on tensor of shape " + to_string(shape));
    }
    return data[0];
}

}  // namespace masf
