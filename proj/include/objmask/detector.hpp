#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "objmask/box.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

struct AnchorLevel {
    int stride = 8;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<std::array<float, 2>> sizes;  // (w, h) per anchor shape
};

// Anchors ordered by (level, y, x, shape), clipped to the image.
struct AnchorGrid {
    std::vector<AnchorLevel> levels;
    std::vector<Box> anchors;
    std::vector<std::size_t> level_offset;

    std::size_t size() const { return anchors.size(); }
    int per_cell(std::size_t level) const { return static_cast<int>(levels[level].sizes.size()); }

    // Square, tall 1:2 and wide 2:1 anchors of equal area at each level.
    static AnchorGrid build(int image_h, int image_w, const std::vector<int>& strides,
                            const std::vector<float>& relative_sizes);
};

struct Detection {
    Box box;
    int class_id = 0;
    float score = 0.0f;
    int image_id = 0;
};

enum class AnchorState { Negative, Ignored, Positive };

struct MatchResult {
    std::vector<AnchorState> state;
    std::vector<int> label;                   // 1 + class for positives, 0 otherwise
    std::vector<int> gt_index;                // -1 unless positive
    std::vector<std::array<float, 4>> target;  // encoded offsets for positives

    std::size_t num_positive() const;
};

// Center offsets over (0.1 * anchor size), log-size ratios over 0.2.
std::array<float, 4> encode_box(const Box& gt, const Box& anchor);
Box decode_box(const std::array<float, 4>& delta, const Box& anchor);

// Positive if IoU >= pos_iou with its best GT, or the forced best anchor of a GT;
// negative if max IoU < neg_iou; ignored otherwise.
MatchResult match_anchors(std::span<const Box> anchors, std::span<const Box> gt_boxes, std::span<const int> gt_labels,
                          float pos_iou = 0.5f, float neg_iou = 0.4f);

struct DetectionLoss {
    double loss = 0;
    double cls_loss = 0;
    double box_loss = 0;
    std::vector<float> grad_cls;  // (anchors, classes + 1) row-major
    std::vector<float> grad_box;  // (anchors, 4)
};

inline constexpr int kNegPerPos = 3;
inline constexpr std::size_t kMinDetNegatives = 16;

// Softmax CE on positives and the kNegPerPos * P hardest negatives (16 when P = 0),
// smooth-L1 on positive offsets, normalized by max(1, P).
DetectionLoss detection_loss(std::span<const float> cls_logits, std::span<const float> box_preds, int classes_with_bg,
                             const MatchResult& match);

// Greedy suppression by descending score; equal scores keep the lower index first.
// A box is suppressed when its IoU with a kept box exceeds iou_thresh.
std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_thresh = 0.5f);

struct DecodeConfig {
    float score_threshold = 0.05f;
    float nms_iou = 0.5f;
    std::size_t max_detections = 100;
};

// Per-class NMS over decoded anchors of one image.
std::vector<Detection> decode_detections(std::span<const float> cls_logits, std::span<const float> box_preds,
                                         int classes_with_bg, const AnchorGrid& grid, int image_h, int image_w,
                                         int image_id, const DecodeConfig& cfg = {});

struct GroundTruth {
    std::vector<Box> boxes;
    std::vector<int> labels;
};

struct ApResult {
    std::vector<double> ap;        // per class; NaN where the class has no GT
    std::vector<std::size_t> gts;  // GT count per class
    double map = 0;
};

// All-point interpolated AP per class (VOC 2010+), mAP over classes with GT.
ApResult evaluate_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gt, int num_classes,
                     float iou_thresh = 0.5f);

std::string detections_csv(const std::vector<Detection>& dets);

}  // namespace objmask
