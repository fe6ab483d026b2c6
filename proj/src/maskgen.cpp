#include "objmask/maskgen.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "objmask/errors.hpp"
#include "objmask/fft.hpp"
#include "objmask/layers.hpp"
#include "objmask/rng.hpp"

namespace objmask {

void SaliencyConfig::validate() const {
    if (!fft::is_pow2(resize_hw)) throw ConfigError("saliency working resolution must be a power of two");
    if (!(smoothing_sigma >= 0)) throw ConfigError("smoothing sigma must be non-negative");
    if (!(threshold >= 0.0 && threshold < 1.0)) throw ConfigError("saliency threshold must lie in [0, 1)");
}

BinaryMask gt_instance_mask(const SyntheticScene& scene) {
    BinaryMask m(1, scene.h(), scene.w());
    for (const auto& in : scene.instances) m = mask_union(m, in.mask);
    return m;
}

BinaryMask gt_box_mask(const SyntheticScene& scene) {
    const auto boxes = scene.boxes();
    return boxes_to_mask(boxes, scene.h(), scene.w());
}

BinaryMask random_mask(int h, int w, double target_fg, std::uint64_t seed) {
    if (!(target_fg >= 0.0 && target_fg <= 1.0)) throw ConfigError("target FG-ratio must lie in [0, 1]");
    Rng rng(seed);
    BinaryMask m(1, h, w);
    for (auto& v : m.data()) v = rng.bernoulli(target_fg) ? 1 : 0;
    return m;
}

Tensor to_grayscale(const Tensor& image) {
    if (image.n() != 1 || (image.c() != 3 && image.c() != 1)) {
        throw ConfigError("expected a (1, 3, h, w) or (1, 1, h, w) image, got " + image.shape().str());
    }
    if (image.c() == 1) return image;
    Tensor g({1, 1, image.h(), image.w()});
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = 0.299f * image.plane(0, 0)[i] + 0.587f * image.plane(0, 1)[i] + 0.114f * image.plane(0, 2)[i];
    }
    return g;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 0) return {1.0};
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0;
    for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    return k;
}

// Separable filter with edge replication.
std::vector<double> smooth(const std::vector<double>& src, int n, const std::vector<double>& k) {
    const int r = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(src.size()), out(src.size());
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * src[static_cast<std::size_t>(y * n + std::clamp(x + i, 0, n - 1))];
            tmp[static_cast<std::size_t>(y * n + x)] = acc;
        }
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = 0;
            for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, n - 1) * n + x)];
            out[static_cast<std::size_t>(y * n + x)] = acc;
        }
    return out;
}

}  // namespace

Tensor spectral_residual_saliency(const Tensor& image, const SaliencyConfig& cfg) {
    cfg.validate();
    const int n = cfg.resize_hw;
    const Tensor small = upsample_bilinear(to_grayscale(image), n, n);
    Tensor out({1, 1, n, n});
    const auto [lo, hi] = std::minmax_element(small.data().begin(), small.data().end());
    if (*hi - *lo <= 0.0f) return out;

    std::vector<std::complex<double>> spec(static_cast<std::size_t>(n) * n);
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] = small[i];
    fft::transform_2d(spec, n, n, false);

    std::vector<double> log_amp(spec.size()), phase(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) {
        log_amp[i] = std::log(std::abs(spec[i]) + 1e-12);
        phase[i] = std::arg(spec[i]);
    }
    // Residual: log amplitude minus its 3x3 box average (edge-replicated).
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const int y = static_cast<int>(i) / n, x = static_cast<int>(i) % n;
        double avg = 0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
                avg += log_amp[static_cast<std::size_t>(std::clamp(y + dy, 0, n - 1) * n + std::clamp(x + dx, 0, n - 1))];
        spec[i] = std::polar(std::exp(log_amp[i] - avg / 9.0), phase[i]);
    }
    fft::transform_2d(spec, n, n, true);

    std::vector<double> sal(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) sal[i] = std::norm(spec[i]);
    sal = smooth(sal, n, gaussian_kernel(cfg.smoothing_sigma));
    const auto [smin, smax] = std::minmax_element(sal.begin(), sal.end());
    const double range = *smax - *smin;
    if (!(range > 0)) return out;
    for (std::size_t i = 0; i < sal.size(); ++i) out[i] = static_cast<float>((sal[i] - *smin) / range);
    return out;
}

BinaryMask spectral_residual_mask(const Tensor& image, const SaliencyConfig& cfg) {
    const Tensor sal = spectral_residual_saliency(image, cfg);
    const int h = image.h(), w = image.w();
    BinaryMask m(1, h, w);
    const bool degenerate = std::all_of(sal.data().begin(), sal.data().end(), [](float v) { return v == 0.0f; });
    if (degenerate) return m;
    const int n = cfg.resize_hw;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int sy = std::min(n - 1, static_cast<int>((y + 0.5) * n / h));
            const int sx = std::min(n - 1, static_cast<int>((x + 0.5) * n / w));
            m.set(0, y, x, sal.at(0, 0, sy, sx) >= cfg.threshold);
        }
    return m;
}

}  // namespace objmask
