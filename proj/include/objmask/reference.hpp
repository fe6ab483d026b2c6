#pragma once

// Serial, loop-per-index reference kernels. Kept for testing the parallel
// kernels and as the baseline in the benchmark; not used on any hot path.

#include "objmask/conv.hpp"

namespace objmask::reference {

Tensor conv2d_forward(const Tensor& x, const ConvWeights& w);
ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const ConvWeights& w);

}  // namespace objmask::reference
