#include "objmask/omg_loss.hpp"

#include <algorithm>
#include <numeric>

#include "objmask/errors.hpp"

namespace objmask {

void OmgLossConfig::validate() const {
    if (dilation_kernel < 1 || dilation_kernel % 2 == 0) throw ConfigError("dilation kernel must be odd and >= 1");
    if (ohnem && (ohnem->pos_units <= 0 || ohnem->neg_units <= 0)) throw ConfigError("mining ratio must be positive");
    if (!(foreground_weight > 0) || !(background_weight > 0)) throw ConfigError("loss weights must be positive");
}

std::vector<std::size_t> ohnem_select(std::span<const float> losses, std::span<const std::uint8_t> labels,
                                      const MiningRatio& ratio) {
    if (losses.size() != labels.size()) throw ConfigError("ohnem_select: losses/labels size mismatch");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
    std::size_t k = pos.empty() ? kMinHardNegatives
                                : pos.size() * static_cast<std::size_t>(ratio.neg_units) /
                                      static_cast<std::size_t>(ratio.pos_units);
    k = std::min(k, neg.size());
    std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(k), neg.end(),
                      [&](std::size_t a, std::size_t b) { return losses[a] > losses[b] || (losses[a] == losses[b] && a < b); });
    std::vector<std::size_t> sel = pos;
    sel.insert(sel.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(sel.begin(), sel.end());
    return sel;
}

LossGrad weighted_mask_loss(const Tensor& logits, const BinaryMask& target, const OmgLossConfig& cfg) {
    cfg.validate();
    if (logits.c() != 2 || target.n() != logits.n() || target.h() != logits.h() || target.w() != logits.w()) {
        throw ConfigError("mask loss: logits " + logits.shape().str() + " do not match target");
    }
    const std::size_t plane = logits.shape().plane();
    std::vector<int> labels(target.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = target.data()[i];
    const std::vector<float> ce = softmax_ce_values(logits, labels);

    std::vector<float> weights(labels.size(), 0.0f);
    for (int b = 0; b < logits.n(); ++b) {
        const std::size_t off = plane * b;
        std::vector<std::size_t> sel;
        if (cfg.ohnem) {
            sel = ohnem_select(std::span(ce).subspan(off, plane), target.data().subspan(off, plane), *cfg.ohnem);
        } else {
            sel.resize(plane);
            std::iota(sel.begin(), sel.end(), std::size_t{0});
        }
        if (sel.empty()) continue;
        const float norm = 1.0f / (static_cast<float>(sel.size()) * logits.n());
        for (std::size_t i : sel) {
            weights[off + i] = (labels[off + i] ? cfg.foreground_weight : cfg.background_weight) * norm;
        }
    }
    return softmax_ce(logits, labels, weights);
}

std::size_t RecallBinning::bin_of(std::size_t area) const {
    for (std::size_t i = 0; i < edges.size(); ++i)
        if (area < edges[i]) return i;
    return edges.size();
}

std::string RecallBinning::label(std::size_t bin) const {
    if (bin == 0) return "<" + std::to_string(edges.front());
    if (bin >= edges.size()) return ">=" + std::to_string(edges.back());
    return std::to_string(edges[bin - 1]) + "-" + std::to_string(edges[bin]);
}

double RecallResult::recall(std::size_t bin) const {
    return total[bin] ? static_cast<double>(recovered[bin]) / static_cast<double>(total[bin]) : 0.0;
}

double RecallResult::overall() const {
    return overall_total ? static_cast<double>(overall_recovered) / static_cast<double>(overall_total) : 0.0;
}

void RecallResult::merge(const RecallResult& o) {
    if (recovered.empty()) {
        *this = o;
        return;
    }
    for (std::size_t i = 0; i < recovered.size(); ++i) {
        recovered[i] += o.recovered[i];
        total[i] += o.total[i];
    }
    overall_recovered += o.overall_recovered;
    overall_total += o.overall_total;
}

RecallResult instance_recall(const BinaryMask& pred, std::span<const BinaryMask> instances,
                             const RecallBinning& binning) {
    RecallResult r;
    r.recovered.assign(binning.bins(), 0);
    r.total.assign(binning.bins(), 0);
    for (const auto& inst : instances) {
        if (inst.size() != pred.size()) throw ConfigError("instance mask does not match prediction");
        std::size_t area = 0, covered = 0;
        for (std::size_t i = 0; i < inst.size(); ++i)
            if (inst.data()[i]) {
                ++area;
                covered += pred.data()[i];
            }
        if (area == 0) continue;
        const std::size_t bin = binning.bin_of(area);
        const bool hit = static_cast<double>(covered) > binning.threshold * static_cast<double>(area);
        r.total[bin] += 1;
        r.recovered[bin] += hit;
        r.overall_total += 1;
        r.overall_recovered += hit;
    }
    return r;
}

}  // namespace objmask
