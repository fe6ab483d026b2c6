#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "objmask/box.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

// Per-image {0,1} spatial map. stride is the downscale factor relative to the
// network input, so stride * height equals the input height.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int n, int h, int w, int stride = 1, std::uint8_t fill = 0);

    int n() const { return n_; }
    int h() const { return h_; }
    int w() const { return w_; }
    int stride() const { return stride_; }
    std::size_t size() const { return bits_.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }

    std::uint8_t at(int b, int y, int x) const { return bits_[index(b, y, x)]; }
    void set(int b, int y, int x, bool v) { bits_[index(b, y, x)] = v ? 1 : 0; }
    std::span<const std::uint8_t> data() const { return bits_; }
    std::span<std::uint8_t> data() { return bits_; }
    std::size_t index(int b, int y, int x) const {
        return (static_cast<std::size_t>(b) * h_ + y) * w_ + x;
    }

    std::size_t count_ones() const;
    BinaryMask item(int b) const;
    // (n, 1, h, w) float tensor of 0/1.
    Tensor to_tensor() const;
    // Pixels where t > threshold become 1; t must have one channel.
    static BinaryMask from_tensor(const Tensor& t, float threshold = 0.5f, int stride = 1);

    bool operator==(const BinaryMask&) const = default;

private:
    int n_ = 0, h_ = 0, w_ = 0, stride_ = 1;
    std::vector<std::uint8_t> bits_;
};

BinaryMask stack_masks(std::span<const BinaryMask> items);

// Square structuring element of side `kernel` (odd). Separable max filter.
BinaryMask dilate(const BinaryMask& mask, int kernel);

// Any-one pooling over factor x factor windows; output stride = stride * factor.
BinaryMask pool_mask(const BinaryMask& mask, int factor);

// x * mask broadcast over channels; spatial dims must already match.
Tensor apply_mask(const Tensor& x, const BinaryMask& mask);

// Fraction of ones, averaged over the batch. Empty masks report 0.
double fg_ratio(const BinaryMask& mask);

// Union of filled boxes: pixel (r, c) is set when its center lies inside a box.
BinaryMask boxes_to_mask(std::span<const Box> boxes, int h, int w);

// Elementwise OR of same-shaped masks.
BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);
bool is_subset(const BinaryMask& a, const BinaryMask& b);

// Binary PGM (P5), one file per batch item stacked vertically, 0/255.
void write_pgm(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_pgm(const std::filesystem::path& path, int n = 1);

// Raw format: "OMSK" magic, u32 n, h, w, stride (little endian), then the bits
// packed LSB-first in row-major order.
void write_mask_file(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask_file(const std::filesystem::path& path);
std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> bits);
std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> packed, std::size_t count);

}  // namespace objmask
