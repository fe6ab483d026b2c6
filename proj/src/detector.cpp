#include "objmask/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "objmask/errors.hpp"
#include "objmask/layers.hpp"

namespace objmask {

AnchorGrid AnchorGrid::build(int image_h, int image_w, const std::vector<int>& strides,
                             const std::vector<float>& relative_sizes) {
    if (strides.empty() || strides.size() != relative_sizes.size()) throw ConfigError("anchor levels misconfigured");
    AnchorGrid g;
    const float side = static_cast<float>(std::min(image_h, image_w));
    for (std::size_t l = 0; l < strides.size(); ++l) {
        const int s = strides[l];
        if (s <= 0 || image_h % s != 0 || image_w % s != 0) throw ConfigError("anchor stride must divide image");
        AnchorLevel lv;
        lv.stride = s;
        lv.grid_h = image_h / s;
        lv.grid_w = image_w / s;
        const float a = relative_sizes[l] * side;
        const float r2 = std::sqrt(2.0f);
        lv.sizes = {{a, a}, {a / r2, a * r2}, {a * r2, a / r2}};
        g.level_offset.push_back(g.anchors.size());
        for (int y = 0; y < lv.grid_h; ++y)
            for (int x = 0; x < lv.grid_w; ++x) {
                const float cx = (x + 0.5f) * s, cy = (y + 0.5f) * s;
                for (const auto& wh : lv.sizes) {
                    Box b{cx - wh[0] / 2, cy - wh[1] / 2, cx + wh[0] / 2, cy + wh[1] / 2};
                    b.x1 = std::max(0.0f, b.x1);
                    b.y1 = std::max(0.0f, b.y1);
                    b.x2 = std::min(static_cast<float>(image_w), b.x2);
                    b.y2 = std::min(static_cast<float>(image_h), b.y2);
                    g.anchors.push_back(b);
                }
            }
        g.levels.push_back(lv);
    }
    return g;
}

std::size_t MatchResult::num_positive() const {
    return static_cast<std::size_t>(std::count(state.begin(), state.end(), AnchorState::Positive));
}

std::array<float, 4> encode_box(const Box& gt, const Box& a) {
    const float aw = a.width(), ah = a.height();
    const float acx = a.x1 + aw / 2, acy = a.y1 + ah / 2;
    const float gw = gt.width(), gh = gt.height();
    const float gcx = gt.x1 + gw / 2, gcy = gt.y1 + gh / 2;
    return {(gcx - acx) / (0.1f * aw), (gcy - acy) / (0.1f * ah), std::log(gw / aw) / 0.2f, std::log(gh / ah) / 0.2f};
}

Box decode_box(const std::array<float, 4>& d, const Box& a) {
    const float aw = a.width(), ah = a.height();
    const float acx = a.x1 + aw / 2, acy = a.y1 + ah / 2;
    const float cx = acx + d[0] * 0.1f * aw;
    const float cy = acy + d[1] * 0.1f * ah;
    // Clamp the log-size so exp cannot overflow.
    const float w = aw * std::exp(std::min(d[2] * 0.2f, 4.0f));
    const float h = ah * std::exp(std::min(d[3] * 0.2f, 4.0f));
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

MatchResult match_anchors(std::span<const Box> anchors, std::span<const Box> gt_boxes, std::span<const int> gt_labels,
                          float pos_iou, float neg_iou) {
    if (gt_boxes.size() != gt_labels.size()) throw ConfigError("GT boxes/labels size mismatch");
    const std::size_t na = anchors.size(), ng = gt_boxes.size();
    MatchResult m;
    m.state.assign(na, AnchorState::Negative);
    m.label.assign(na, 0);
    m.gt_index.assign(na, -1);
    m.target.assign(na, {0, 0, 0, 0});
    if (ng == 0) return m;

    std::vector<float> table(na * ng);
    for (std::size_t a = 0; a < na; ++a)
        for (std::size_t g = 0; g < ng; ++g) table[a * ng + g] = iou(anchors[a], gt_boxes[g]);

    for (std::size_t a = 0; a < na; ++a) {
        std::size_t best = 0;
        for (std::size_t g = 1; g < ng; ++g)
            if (table[a * ng + g] > table[a * ng + best]) best = g;
        const float v = table[a * ng + best];
        if (v >= pos_iou) {
            m.state[a] = AnchorState::Positive;
            m.gt_index[a] = static_cast<int>(best);
        } else if (v >= neg_iou) {
            m.state[a] = AnchorState::Ignored;
        }
    }
    // Every GT keeps at least one anchor: its best, or the next best not already
    // forced by an earlier GT.
    std::vector<bool> forced(na, false);
    for (std::size_t g = 0; g < ng; ++g) {
        std::size_t best = na;
        for (std::size_t a = 0; a < na; ++a) {
            if (forced[a]) continue;
            if (best == na || table[a * ng + g] > table[best * ng + g]) best = a;
        }
        if (best == na) continue;
        forced[best] = true;
        m.state[best] = AnchorState::Positive;
        m.gt_index[best] = static_cast<int>(g);
    }
    for (std::size_t a = 0; a < na; ++a) {
        if (m.state[a] != AnchorState::Positive) continue;
        const auto g = static_cast<std::size_t>(m.gt_index[a]);
        m.label[a] = 1 + gt_labels[g];
        m.target[a] = encode_box(gt_boxes[g], anchors[a]);
    }
    return m;
}

DetectionLoss detection_loss(std::span<const float> cls_logits, std::span<const float> box_preds, int classes_with_bg,
                             const MatchResult& match) {
    const std::size_t na = match.state.size();
    if (cls_logits.size() != na * static_cast<std::size_t>(classes_with_bg) || box_preds.size() != na * 4) {
        throw ConfigError("detection_loss: head outputs do not match anchor count");
    }
    DetectionLoss out;
    out.grad_cls.assign(cls_logits.size(), 0.0f);
    out.grad_box.assign(box_preds.size(), 0.0f);

    std::vector<std::size_t> neg;
    std::vector<float> neg_loss(na, 0.0f);
    std::size_t num_pos = 0;
    for (std::size_t a = 0; a < na; ++a) {
        if (match.state[a] == AnchorState::Positive) {
            ++num_pos;
        } else if (match.state[a] == AnchorState::Negative) {
            neg.push_back(a);
            neg_loss[a] = ce_row(cls_logits.data() + a * classes_with_bg, classes_with_bg, 0);
        }
    }
    std::size_t k = num_pos == 0 ? kMinDetNegatives : num_pos * kNegPerPos;
    k = std::min(k, neg.size());
    std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(k), neg.end(), [&](std::size_t a, std::size_t b) {
        return neg_loss[a] > neg_loss[b] || (neg_loss[a] == neg_loss[b] && a < b);
    });

    const float norm = 1.0f / static_cast<float>(std::max<std::size_t>(1, num_pos));
    std::vector<int> labels(na, 0);
    std::vector<float> weights(na, 0.0f);
    std::vector<float> box_w(na * 4, 0.0f);
    std::vector<float> box_t(na * 4, 0.0f);
    for (std::size_t a = 0; a < na; ++a) {
        if (match.state[a] != AnchorState::Positive) continue;
        labels[a] = match.label[a];
        weights[a] = norm;
        for (int j = 0; j < 4; ++j) {
            box_w[a * 4 + j] = norm;
            box_t[a * 4 + j] = match.target[a][static_cast<std::size_t>(j)];
        }
    }
    for (std::size_t i = 0; i < k; ++i) weights[neg[i]] = norm;
    out.cls_loss = softmax_ce_rows(cls_logits, classes_with_bg, labels, weights, out.grad_cls);
    out.box_loss = smooth_l1(box_preds, box_t, box_w, out.grad_box);
    out.loss = out.cls_loss + out.box_loss;
    return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_thresh) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    for (std::size_t i : order) {
        bool keep = true;
        for (const auto& k : kept)
            if (iou(k.box, dets[i].box) > iou_thresh) {
                keep = false;
                break;
            }
        if (keep) kept.push_back(dets[i]);
    }
    return kept;
}

std::vector<Detection> decode_detections(std::span<const float> cls_logits, std::span<const float> box_preds,
                                         int classes_with_bg, const AnchorGrid& grid, int image_h, int image_w,
                                         int image_id, const DecodeConfig& cfg) {
    const std::size_t na = grid.size();
    const int classes = classes_with_bg - 1;
    std::vector<std::vector<Detection>> per_class(static_cast<std::size_t>(classes));
    std::vector<double> p(static_cast<std::size_t>(classes_with_bg));
    for (std::size_t a = 0; a < na; ++a) {
        const float* z = cls_logits.data() + a * classes_with_bg;
        const float mx = *std::max_element(z, z + classes_with_bg);
        double sum = 0;
        for (int k = 0; k < classes_with_bg; ++k) sum += p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(z[k]) - mx);
        std::array<float, 4> d{box_preds[a * 4], box_preds[a * 4 + 1], box_preds[a * 4 + 2], box_preds[a * 4 + 3]};
        Box b = decode_box(d, grid.anchors[a]);
        b.x1 = std::clamp(b.x1, 0.0f, static_cast<float>(image_w));
        b.x2 = std::clamp(b.x2, 0.0f, static_cast<float>(image_w));
        b.y1 = std::clamp(b.y1, 0.0f, static_cast<float>(image_h));
        b.y2 = std::clamp(b.y2, 0.0f, static_cast<float>(image_h));
        if (!b.valid()) continue;
        for (int c = 0; c < classes; ++c) {
            const float score = static_cast<float>(p[static_cast<std::size_t>(c + 1)] / sum);
            if (score < cfg.score_threshold) continue;
            per_class[static_cast<std::size_t>(c)].push_back({b, c, score, image_id});
        }
    }
    std::vector<Detection> out;
    for (auto& dets : per_class) {
        auto kept = nms(dets, cfg.nms_iou);
        out.insert(out.end(), kept.begin(), kept.end());
    }
    std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (out.size() > cfg.max_detections) out.resize(cfg.max_detections);
    return out;
}

ApResult evaluate_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gt, int num_classes,
                     float iou_thresh) {
    ApResult r;
    r.ap.assign(static_cast<std::size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
    r.gts.assign(static_cast<std::size_t>(num_classes), 0);
    for (const auto& g : gt)
        for (int l : g.labels) {
            if (l < 0 || l >= num_classes) throw ConfigError("GT label out of range");
            ++r.gts[static_cast<std::size_t>(l)];
        }
    double sum = 0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        const std::size_t npos = r.gts[static_cast<std::size_t>(c)];
        if (npos == 0) continue;
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < dets.size(); ++i)
            if (dets[i].class_id == c) idx.push_back(i);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
        std::vector<std::vector<bool>> used(gt.size());
        for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].boxes.size(), false);
        std::vector<double> prec, rec;
        std::size_t tp = 0, fp = 0;
        for (std::size_t i : idx) {
            const Detection& d = dets[i];
            if (d.image_id < 0 || static_cast<std::size_t>(d.image_id) >= gt.size()) throw ConfigError("detection image id out of range");
            const auto& g = gt[static_cast<std::size_t>(d.image_id)];
            float best = -1.0f;
            std::size_t bj = 0;
            for (std::size_t j = 0; j < g.boxes.size(); ++j) {
                if (g.labels[j] != c) continue;
                const float v = iou(d.box, g.boxes[j]);
                if (v > best) {
                    best = v;
                    bj = j;
                }
            }
            if (best >= iou_thresh && !used[static_cast<std::size_t>(d.image_id)][bj]) {
                used[static_cast<std::size_t>(d.image_id)][bj] = true;
                ++tp;
            } else {
                ++fp;
            }
            prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
            rec.push_back(static_cast<double>(tp) / static_cast<double>(npos));
        }
        // Precision envelope, then area under the stepwise curve.
        for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
        double ap = 0, prev_r = 0;
        for (std::size_t i = 0; i < prec.size(); ++i) {
            ap += (rec[i] - prev_r) * prec[i];
            prev_r = rec[i];
        }
        r.ap[static_cast<std::size_t>(c)] = ap;
        sum += ap;
        ++counted;
    }
    r.map = counted ? sum / counted : 0.0;
    return r;
}

std::string detections_csv(const std::vector<Detection>& dets) {
    std::ostringstream os;
    os.precision(9);
    os << "image_id,class,score,x1,y1,x2,y2\n";
    for (const auto& d : dets) {
        os << d.image_id << ',' << d.class_id << ',' << d.score << ',' << d.box.x1 << ',' << d.box.y1 << ','
           << d.box.x2 << ',' << d.box.y2 << '\n';
    }
    return os.str();
}

}  // namespace objmask
