#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "objmask/conv.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

Tensor relu(const Tensor& x);
// Gradient through relu given the forward input (or output; the sign test is the same).
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

// 2x2 window, stride 2. Ties route the gradient to the first maximum in
// row-major window order.
struct PoolResult {
    Tensor out;
    std::vector<std::uint32_t> argmax;  // flat input index per output element
};
PoolResult maxpool2(const Tensor& x);
Tensor maxpool2_backward(const Tensor& grad_out, const std::vector<std::uint32_t>& argmax, const Shape& in_shape);

// Half-pixel (align_corners = false) bilinear resampling; works for up- and
// down-scaling. Source coordinates below zero clamp to zero.
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear_backward(const Tensor& grad_out, const Shape& in_shape);

// x * m with m of shape (n, 1, h, w) broadcast across channels.
Tensor elementwise_mul(const Tensor& x, const Tensor& m);
struct MulGrads {
    Tensor grad_x;
    Tensor grad_m;
};
MulGrads elementwise_mul_backward(const Tensor& grad_out, const Tensor& x, const Tensor& m);

// Softmax cross-entropy over the channel axis of a (n, classes, h, w) tensor.
// labels/weights are per (n, h, w) position; the loss is sum_i weight_i * ce_i.
struct LossGrad {
    double loss = 0.0;
    Tensor grad;
};
LossGrad softmax_ce(const Tensor& logits, std::span<const int> labels, std::span<const float> weights);
// Per-position cross-entropy values, no reduction.
std::vector<float> softmax_ce_values(const Tensor& logits, std::span<const int> labels);

// Same, for a row-major (rows, classes) matrix. grad must have rows*classes entries.
double softmax_ce_rows(std::span<const float> logits, int classes, std::span<const int> labels,
                       std::span<const float> weights, std::span<float> grad);
float ce_row(const float* logits, int classes, int label);

// sum_i weight_i * smoothL1(pred_i - target_i), beta = 1.
double smooth_l1(std::span<const float> pred, std::span<const float> target, std::span<const float> weights,
                 std::span<float> grad);

// Ordered record of cached forward state. Backward pops in exact reverse order.
struct TapeEntry {
    std::string layer_id;
    std::vector<Tensor> cached;
    std::optional<Tensor> mask;
    std::vector<std::uint32_t> indices;
};

class LayerTape {
public:
    void push(TapeEntry e) { entries_.push_back(std::move(e)); }
    // Throws InternalError if the tape is empty or the top entry is not layer_id.
    TapeEntry pop(const std::string& layer_id);
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    std::vector<TapeEntry> entries_;
};

// Tape-driven variant: pops the entry for layer_id, whose cached[0] is the conv input.
ConvGrads conv2d_backward(const Tensor& grad_out, LayerTape& tape, const std::string& layer_id,
                          const ConvWeights& w);

}  // namespace objmask
