#pragma once

#include <vector>

#include "objmask/tensor.hpp"

namespace objmask {

// Square-kernel convolution parameters. Kernel layout is (c_out, c_in, k, k);
// depthwise kernels are (c, 1, k, k).
struct ConvWeights {
    Tensor kernel;
    std::vector<float> bias;
    int stride = 1;
    int pad = 0;
    bool depthwise = false;

    int k() const { return kernel.h(); }
    int c_out() const { return kernel.n(); }
    int c_in() const { return depthwise ? kernel.n() : kernel.c(); }
    std::size_t param_count() const { return kernel.size() + bias.size(); }

    static ConvWeights dense(int c_in, int c_out, int k, int stride, int pad);
    static ConvWeights dw(int channels, int k, int stride, int pad);
};

struct ConvGrads {
    Tensor grad_in;
    Tensor grad_kernel;
    std::vector<float> grad_bias;
};

// floor((in + 2p - k) / s) + 1; throws if < 1.
int conv_out_dim(int in, int k, int stride, int pad);
Shape conv_out_shape(const Shape& in, const ConvWeights& w);

// Per output element the accumulation order is (c_in, ky, kx) ascending over
// in-bounds taps starting from 0, with the bias added last. The serial reference
// in reference.hpp uses the same order, so results are bit-identical.
Tensor conv2d_forward(const Tensor& x, const ConvWeights& w);
ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const ConvWeights& w);

namespace kernels {

// Accumulates the convolution of one input plane into one output plane
// (no bias). Shared by the dense and tiled paths.
void accumulate_plane(const float* in, int in_h, int in_w, const float* kern, int k, int stride,
                      int pad, float* out, int out_h, int out_w);

}  // namespace kernels

}  // namespace objmask
