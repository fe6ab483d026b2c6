#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace objmask {

// (batch, channels, height, width), row-major.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    const Shape& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float* plane(int b, int ch) { return data_.data() + index(b, ch, 0, 0); }
    const float* plane(int b, int ch) const { return data_.data() + index(b, ch, 0, 0); }

    std::size_t index(int b, int ch, int y, int x) const {
        return ((static_cast<std::size_t>(b) * shape_.c + ch) * shape_.h + y) * shape_.w + x;
    }
    float& at(int b, int ch, int y, int x) { return data_[index(b, ch, y, x)]; }
    float at(int b, int ch, int y, int x) const { return data_[index(b, ch, y, x)]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    void fill(float v);
    // Copy of batch item b as a batch-1 tensor.
    Tensor item(int b) const;
    bool all_finite() const;
    std::size_t count_zeros() const;

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

// Concatenate batch-1 (or batch-k) tensors along the batch axis.
Tensor stack(std::span<const Tensor> items);

}  // namespace objmask
