#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "objmask/layers.hpp"
#include "objmask/mask.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

// pos_units:neg_units. With P positives, floor(P * neg_units / pos_units) negatives are kept.
struct MiningRatio {
    int pos_units = 1;
    int neg_units = 3;
};

struct OmgLossConfig {
    int dilation_kernel = 21;
    std::optional<MiningRatio> ohnem = MiningRatio{1, 3};  // nullopt disables mining
    float foreground_weight = 3.0f;
    float background_weight = 1.0f;

    void validate() const;
};

// Negatives kept for an image without positives.
inline constexpr std::size_t kMinHardNegatives = 16;

// Selected flat indices (ascending). All positives; the K highest-loss negatives,
// ties broken by lower index.
std::vector<std::size_t> ohnem_select(std::span<const float> losses, std::span<const std::uint8_t> labels,
                                      const MiningRatio& ratio);

// Pixel-wise two-class cross-entropy weighted by class, averaged over the
// selected pixels of each image, then over the batch. logits: (n, 2, h, w).
LossGrad weighted_mask_loss(const Tensor& logits, const BinaryMask& target, const OmgLossConfig& cfg);

struct RecallBinning {
    // Upper edges (exclusive) of all bins but the last, in instance pixels.
    std::vector<std::size_t> edges = {64, 256, 1024};
    double threshold = 0.5;

    std::size_t bins() const { return edges.size() + 1; }
    std::size_t bin_of(std::size_t area) const;
    std::string label(std::size_t bin) const;
};

struct RecallResult {
    std::vector<std::size_t> recovered;
    std::vector<std::size_t> total;
    std::size_t overall_recovered = 0;
    std::size_t overall_total = 0;

    double recall(std::size_t bin) const;
    double overall() const;
    void merge(const RecallResult& o);
};

// An instance counts when strictly more than `threshold` of its pixels are
// foreground in pred (batch-1 masks).
RecallResult instance_recall(const BinaryMask& pred, std::span<const BinaryMask> instances,
                             const RecallBinning& binning = {});

}  // namespace objmask
