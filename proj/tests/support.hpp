#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "objmask/conv.hpp"
#include "objmask/mask.hpp"
#include "objmask/rng.hpp"
#include "objmask/tensor.hpp"

namespace testing {

using objmask::BinaryMask;
using objmask::ConvWeights;
using objmask::Rng;
using objmask::Shape;
using objmask::Tensor;

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

inline ConvWeights random_conv(int c_in, int c_out, int k, int stride, int pad, Rng& rng, bool depthwise = false) {
    ConvWeights w = depthwise ? ConvWeights::dw(c_in, k, stride, pad) : ConvWeights::dense(c_in, c_out, k, stride, pad);
    for (auto& v : w.kernel.vec()) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : w.bias) v = static_cast<float>(rng.uniform(-1, 1));
    return w;
}

inline BinaryMask random_binary(int n, int h, int w, double p, Rng& rng, int stride = 1) {
    BinaryMask m(n, h, w, stride);
    for (auto& v : m.data()) v = rng.bernoulli(p) ? 1 : 0;
    return m;
}

// Central difference of a double-valued function at x[i].
inline double central_diff(std::vector<double>& x, std::size_t i, double eps,
                           const std::function<double(const std::vector<double>&)>& f) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    return (up - down) / (2 * eps);
}

// Relative error with a small floor so values near zero are compared absolutely.
inline double rel_err(double a, double b, double floor = 1e-2) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

// Double-precision oracles of the layer forwards.
namespace oracle {

inline double at4(const std::vector<double>& v, const Shape& s, int b, int c, int y, int x) {
    return v[((static_cast<std::size_t>(b) * s.c + c) * s.h + y) * s.w + x];
}

inline std::vector<double> conv(const std::vector<double>& x, const Shape& xs, const std::vector<double>& kern,
                                const std::vector<double>& bias, int c_out, int k, int s, int p, bool dw,
                                Shape& out_shape) {
    const int oh = (xs.h + 2 * p - k) / s + 1;
    const int ow = (xs.w + 2 * p - k) / s + 1;
    out_shape = {xs.n, c_out, oh, ow};
    std::vector<double> y(out_shape.numel());
    const int cin = dw ? 1 : xs.c;
    for (int b = 0; b < xs.n; ++b)
        for (int co = 0; co < c_out; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * s - p + ky, ix = ox * s - p + kx;
                                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                                const int ch = dw ? co : ci;
                                acc += kern[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx] *
                                       at4(x, xs, b, ch, iy, ix);
                            }
                    y[((static_cast<std::size_t>(b) * c_out + co) * oh + oy) * ow + ox] = acc + bias[static_cast<std::size_t>(co)];
                }
    return y;
}

// align_corners = false, negative source clamped to 0.
inline std::vector<double> bilinear(const std::vector<double>& x, const Shape& xs, int oh, int ow) {
    std::vector<double> y(static_cast<std::size_t>(xs.n) * xs.c * oh * ow);
    auto src = [](int o, int in, int out, int& i0, int& i1, double& f) {
        double c = (o + 0.5) * in / out - 0.5;
        if (c < 0) c = 0;
        i0 = static_cast<int>(std::floor(c));
        if (i0 > in - 1) i0 = in - 1;
        i1 = std::min(i0 + 1, in - 1);
        f = c - i0;
    };
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    int y0, y1, x0, x1;
                    double fy, fx;
                    src(oy, xs.h, oh, y0, y1, fy);
                    src(ox, xs.w, ow, x0, x1, fx);
                    const double v = (1 - fy) * ((1 - fx) * at4(x, xs, b, c, y0, x0) + fx * at4(x, xs, b, c, y0, x1)) +
                                     fy * ((1 - fx) * at4(x, xs, b, c, y1, x0) + fx * at4(x, xs, b, c, y1, x1));
                    y[((static_cast<std::size_t>(b) * xs.c + c) * oh + oy) * ow + ox] = v;
                }
    return y;
}

inline double ce(const double* z, int classes, int label) {
    double mx = z[0];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, z[k]);
    double s = 0;
    for (int k = 0; k < classes; ++k) s += std::exp(z[k] - mx);
    return std::log(s) + mx - z[label];
}

inline double smooth_l1(double d) {
    const double a = std::abs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

}  // namespace oracle

}  // namespace testing
