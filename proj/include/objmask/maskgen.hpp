#pragma once

#include <cstdint>
#include <string>

#include "objmask/mask.hpp"
#include "objmask/synth.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

struct SaliencyConfig {
    int resize_hw = 64;  // working resolution, power of two
    double smoothing_sigma = 2.5;
    double threshold = 0.08;

    void validate() const;
};

BinaryMask gt_instance_mask(const SyntheticScene& scene);
BinaryMask gt_box_mask(const SyntheticScene& scene);

// i.i.d. Bernoulli(target_fg) pixels.
BinaryMask random_mask(int h, int w, double target_fg, std::uint64_t seed);

// Normalized [0, 1] saliency at working resolution; all zeros for a constant image.
Tensor spectral_residual_saliency(const Tensor& image, const SaliencyConfig& cfg);
// Thresholded saliency resized (nearest) to the image resolution.
BinaryMask spectral_residual_mask(const Tensor& image, const SaliencyConfig& cfg);

// Luma of a (1, 3, h, w) image, or the single channel of a (1, 1, h, w) one.
Tensor to_grayscale(const Tensor& image);

}  // namespace objmask
