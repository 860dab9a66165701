#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace lbt {

// Dense row-major tensor of doubles. Just shaped storage; the layer kernels
// in nn.cpp operate on the raw data.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    Tensor(std::initializer_list<int> s) : Tensor(std::vector<int>(s)) {}

    std::size_t numel() const { return v.size(); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    void fill(double x);

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }
};

std::size_t shape_numel(const std::vector<int>& shape);

}  // namespace lbt
