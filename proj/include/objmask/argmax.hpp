#pragma once

#include <string>

#include "objmask/mask.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

// soft: soft-argmax during training, hard argmax at inference.
// surrogate: hard argmax forward, soft-argmax Jacobian backward.
// hard: hard argmax with its true (zero) gradient.
enum class ArgmaxMode { Soft, Surrogate, Hard };

struct ArgmaxConfig {
    float beta = 5.0f;
    ArgmaxMode mode = ArgmaxMode::Surrogate;

    void validate() const;
};

ArgmaxMode parse_argmax_mode(const std::string& s);
std::string to_string(ArgmaxMode m);

// Expected class index under softmax(beta * x) over the channel axis.
// logits: (n, classes, h, w) -> (n, 1, h, w).
Tensor soft_argmax(const Tensor& logits, const ArgmaxConfig& cfg);

// Per-pixel argmax over channels. Ties go to the lowest index.
// Returns a mask of ones where the winner is class >= 1.
BinaryMask sg_argmax_forward(const Tensor& logits, const ArgmaxConfig& cfg);

// Jacobian of soft_argmax at the cached logits applied to grad_out (n, 1, h, w).
// Returns zeros in Hard mode.
Tensor sg_argmax_backward(const Tensor& grad_out, const Tensor& logits, const ArgmaxConfig& cfg);

// Mask values fed to the detector: soft_argmax in Soft mode while training,
// otherwise the hard 0/1 map as a float tensor.
Tensor binarize(const Tensor& logits, const ArgmaxConfig& cfg, bool training);

}  // namespace objmask
