#include "lbt/tensor.hpp"

#include <algorithm>
#include <stdexcept>

namespace lbt {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("tensor shape dims must be >= 0");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(shape_numel(shape), 0.0);
}

void Tensor::fill(double x) {
    std::fill(v.begin(), v.end(), x);
}

}  // namespace lbt
