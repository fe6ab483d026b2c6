#include "objmask/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "objmask/errors.hpp"

namespace objmask {

std::string Shape::str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
        throw ConfigError("negative tensor dimension " + shape.str());
    }
    data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape.numel()) {
        throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape.str());
    }
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::item(int b) const {
    Shape s{1, shape_.c, shape_.h, shape_.w};
    const std::size_t len = s.numel();
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(len * b);
    return Tensor(s, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(len)));
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::size_t Tensor::count_zeros() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 0.0f));
}

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) return {};
    Shape s = items.front().shape();
    int total = 0;
    for (const auto& t : items) {
        const Shape& o = t.shape();
        if (o.c != s.c || o.h != s.h || o.w != s.w) {
            throw ConfigError("cannot stack " + o.str() + " with " + s.str());
        }
        total += o.n;
    }
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(total) * s.c * s.h * s.w);
    for (const auto& t : items) data.insert(data.end(), t.vec().begin(), t.vec().end());
    s.n = total;
    return Tensor(s, std::move(data));
}

}  // namespace objmask
