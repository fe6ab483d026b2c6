#include "objmask/layers.hpp"

#include <algorithm>
#include <cmath>

#include "objmask/errors.hpp"

namespace objmask {

Tensor relu(const Tensor& x) {
    Tensor y(x.shape());
    const float* s = x.data().data();
    float* d = y.data().data();
    const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
    for (std::size_t i = 0; i < n; ++i) d[i] = s[i] > 0.0f ? s[i] : 0.0f;
    return y;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
    if (!(grad_out.shape() == x.shape())) throw ConfigError("relu gradient shape mismatch");
    Tensor g(x.shape());
    const float* go = grad_out.data().data();
    const float* s = x.data().data();
    float* d = g.data().data();
    const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
    for (std::size_t i = 0; i < n; ++i) d[i] = s[i] > 0.0f ? go[i] : 0.0f;
    return g;
}

PoolResult maxpool2(const Tensor& x) {
    if (x.h() % 2 != 0 || x.w() % 2 != 0) {
        throw ConfigError("maxpool2 needs even spatial dims, got " + x.shape().str());
    }
    const Shape os{x.n(), x.c(), x.h() / 2, x.w() / 2};
    PoolResult r{Tensor(os), std::vector<std::uint32_t>(os.numel())};
    const int planes = os.n * os.c;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const float* in = x.data().data() + static_cast<std::size_t>(p) * x.shape().plane();
        float* out = r.out.data().data() + static_cast<std::size_t>(p) * os.plane();
        std::uint32_t* am = r.argmax.data() + static_cast<std::size_t>(p) * os.plane();
        const std::uint32_t base = static_cast<std::uint32_t>(static_cast<std::size_t>(p) * x.shape().plane());
        for (int oy = 0; oy < os.h; ++oy)
            for (int ox = 0; ox < os.w; ++ox) {
                int best = (2 * oy) * x.w() + 2 * ox;
                const int cand[3] = {best + 1, best + x.w(), best + x.w() + 1};
                for (int c : cand)
                    if (in[c] > in[best]) best = c;
                out[oy * os.w + ox] = in[best];
                am[oy * os.w + ox] = base + static_cast<std::uint32_t>(best);
            }
    }
    return r;
}

Tensor maxpool2_backward(const Tensor& grad_out, const std::vector<std::uint32_t>& argmax, const Shape& in_shape) {
    if (argmax.size() != grad_out.size()) throw InternalError("maxpool2 argmax/gradient size mismatch");
    Tensor g(in_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
    return g;
}

namespace {

struct Tap {
    int i0, i1;
    float l0, l1;
};

std::vector<Tap> bilinear_taps(int in, int out) {
    std::vector<Tap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        const float l1 = static_cast<float>(src - i0);
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0f - l1, l1};
    }
    return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0 || x.h() <= 0 || x.w() <= 0) throw ConfigError("bilinear resize to empty shape");
    const auto ty = bilinear_taps(x.h(), out_h);
    const auto tx = bilinear_taps(x.w(), out_w);
    Tensor y({x.n(), x.c(), out_h, out_w});
    const int planes = x.n() * x.c();
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const float* in = x.data().data() + static_cast<std::size_t>(p) * x.shape().plane();
        float* out = y.data().data() + static_cast<std::size_t>(p) * y.shape().plane();
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[static_cast<std::size_t>(oy)];
            const float* r0 = in + static_cast<std::size_t>(a.i0) * x.w();
            const float* r1 = in + static_cast<std::size_t>(a.i1) * x.w();
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[static_cast<std::size_t>(ox)];
                const float top = b.l0 * r0[b.i0] + b.l1 * r0[b.i1];
                const float bot = b.l0 * r1[b.i0] + b.l1 * r1[b.i1];
                out[oy * out_w + ox] = a.l0 * top + a.l1 * bot;
            }
        }
    }
    return y;
}

Tensor upsample_bilinear_backward(const Tensor& grad_out, const Shape& in_shape) {
    const int out_h = grad_out.h();
    const int out_w = grad_out.w();
    const auto ty = bilinear_taps(in_shape.h, out_h);
    const auto tx = bilinear_taps(in_shape.w, out_w);
    Tensor g(in_shape);
    const int planes = in_shape.n * in_shape.c;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const float* go = grad_out.data().data() + static_cast<std::size_t>(p) * grad_out.shape().plane();
        float* gi = g.data().data() + static_cast<std::size_t>(p) * in_shape.plane();
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[static_cast<std::size_t>(ox)];
                const float v = go[oy * out_w + ox];
                gi[a.i0 * in_shape.w + b.i0] += a.l0 * b.l0 * v;
                gi[a.i0 * in_shape.w + b.i1] += a.l0 * b.l1 * v;
                gi[a.i1 * in_shape.w + b.i0] += a.l1 * b.l0 * v;
                gi[a.i1 * in_shape.w + b.i1] += a.l1 * b.l1 * v;
            }
        }
    }
    return g;
}

namespace {

void check_mask_shape(const Tensor& x, const Tensor& m) {
    if (m.n() != x.n() || m.c() != 1 || m.h() != x.h() || m.w() != x.w()) {
        throw ConfigError("mask " + m.shape().str() + " incompatible with tensor " + x.shape().str());
    }
}

}  // namespace

Tensor elementwise_mul(const Tensor& x, const Tensor& m) {
    check_mask_shape(x, m);
    Tensor y(x.shape());
    const std::size_t plane = x.shape().plane();
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < x.n(); ++b)
        for (int c = 0; c < x.c(); ++c) {
            const float* s = x.plane(b, c);
            const float* mm = m.plane(b, 0);
            float* d = y.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) d[i] = mm[i] == 0.0f ? 0.0f : s[i] * mm[i];
        }
    return y;
}

MulGrads elementwise_mul_backward(const Tensor& grad_out, const Tensor& x, const Tensor& m) {
    check_mask_shape(x, m);
    if (!(grad_out.shape() == x.shape())) throw ConfigError("mul gradient shape mismatch");
    MulGrads g{Tensor(x.shape()), Tensor(m.shape())};
    const std::size_t plane = x.shape().plane();
#pragma omp parallel for schedule(static)
    for (int b = 0; b < x.n(); ++b) {
        const float* mm = m.plane(b, 0);
        float* gm = g.grad_m.plane(b, 0);
        for (int c = 0; c < x.c(); ++c) {
            const float* go = grad_out.plane(b, c);
            const float* s = x.plane(b, c);
            float* gx = g.grad_x.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) {
                gx[i] = go[i] * mm[i];
                gm[i] += go[i] * s[i];
            }
        }
    }
    return g;
}

float ce_row(const float* logits, int classes, int label) {
    float mx = logits[0];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, logits[k]);
    double sum = 0.0;
    for (int k = 0; k < classes; ++k) sum += std::exp(static_cast<double>(logits[k]) - mx);
    return static_cast<float>(std::log(sum) + mx - logits[label]);
}

double softmax_ce_rows(std::span<const float> logits, int classes, std::span<const int> labels,
                       std::span<const float> weights, std::span<float> grad) {
    const std::size_t rows = labels.size();
    if (logits.size() != rows * static_cast<std::size_t>(classes) || weights.size() != rows ||
        grad.size() != logits.size()) {
        throw ConfigError("softmax_ce_rows: inconsistent sizes");
    }
    double loss = 0.0;
    std::vector<double> p(static_cast<std::size_t>(classes));
    for (std::size_t r = 0; r < rows; ++r) {
        const float* z = logits.data() + r * classes;
        float* g = grad.data() + r * classes;
        const float wgt = weights[r];
        if (wgt == 0.0f) {
            std::fill(g, g + classes, 0.0f);
            continue;
        }
        const int label = labels[r];
        if (label < 0 || label >= classes) throw ConfigError("label out of range");
        float mx = z[0];
        for (int k = 1; k < classes; ++k) mx = std::max(mx, z[k]);
        double sum = 0.0;
        for (int k = 0; k < classes; ++k) {
            p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(z[k]) - mx);
            sum += p[static_cast<std::size_t>(k)];
        }
        loss += wgt * (std::log(sum) + mx - z[label]);
        for (int k = 0; k < classes; ++k) {
            const double pk = p[static_cast<std::size_t>(k)] / sum;
            g[k] = static_cast<float>(wgt * (pk - (k == label ? 1.0 : 0.0)));
        }
    }
    return loss;
}

std::vector<float> softmax_ce_values(const Tensor& logits, std::span<const int> labels) {
    const std::size_t plane = logits.shape().plane();
    const std::size_t positions = static_cast<std::size_t>(logits.n()) * plane;
    if (labels.size() != positions) throw ConfigError("softmax_ce: label count mismatch");
    const int classes = logits.c();
    std::vector<float> out(positions);
    std::vector<float> row(static_cast<std::size_t>(classes));
    for (int b = 0; b < logits.n(); ++b)
        for (std::size_t i = 0; i < plane; ++i) {
            for (int k = 0; k < classes; ++k) row[static_cast<std::size_t>(k)] = logits.plane(b, k)[i];
            const std::size_t pos = static_cast<std::size_t>(b) * plane + i;
            out[pos] = ce_row(row.data(), classes, labels[pos]);
        }
    return out;
}

LossGrad softmax_ce(const Tensor& logits, std::span<const int> labels, std::span<const float> weights) {
    const std::size_t plane = logits.shape().plane();
    const std::size_t positions = static_cast<std::size_t>(logits.n()) * plane;
    if (labels.size() != positions || weights.size() != positions) {
        throw ConfigError("softmax_ce: expected " + std::to_string(positions) + " labels/weights for logits " +
                          logits.shape().str());
    }
    const int classes = logits.c();
    // Transpose to rows, reuse the row kernel, transpose back.
    std::vector<float> rows(positions * classes);
    for (int b = 0; b < logits.n(); ++b)
        for (int k = 0; k < classes; ++k) {
            const float* src = logits.plane(b, k);
            for (std::size_t i = 0; i < plane; ++i) rows[(b * plane + i) * classes + k] = src[i];
        }
    std::vector<float> grows(rows.size());
    LossGrad r;
    r.loss = softmax_ce_rows(rows, classes, labels, weights, grows);
    r.grad = Tensor(logits.shape());
    for (int b = 0; b < logits.n(); ++b)
        for (int k = 0; k < classes; ++k) {
            float* dst = r.grad.plane(b, k);
            for (std::size_t i = 0; i < plane; ++i) dst[i] = grows[(b * plane + i) * classes + k];
        }
    return r;
}

double smooth_l1(std::span<const float> pred, std::span<const float> target, std::span<const float> weights,
                 std::span<float> grad) {
    if (pred.size() != target.size() || pred.size() != weights.size() || grad.size() != pred.size()) {
        throw ConfigError("smooth_l1: inconsistent sizes");
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const float d = pred[i] - target[i];
        const float ad = std::fabs(d);
        if (ad < 1.0f) {
            loss += weights[i] * 0.5 * d * d;
            grad[i] = weights[i] * d;
        } else {
            loss += weights[i] * (ad - 0.5);
            grad[i] = weights[i] * (d > 0 ? 1.0f : -1.0f);
        }
    }
    return loss;
}

TapeEntry LayerTape::pop(const std::string& layer_id) {
    if (entries_.empty()) throw InternalError("tape empty while popping '" + layer_id + "'");
    if (entries_.back().layer_id != layer_id) {
        throw InternalError("tape order violated: expected '" + layer_id + "', found '" + entries_.back().layer_id + "'");
    }
    TapeEntry e = std::move(entries_.back());
    entries_.pop_back();
    return e;
}

ConvGrads conv2d_backward(const Tensor& grad_out, LayerTape& tape, const std::string& layer_id,
                          const ConvWeights& w) {
    TapeEntry e = tape.pop(layer_id);
    if (e.cached.empty()) throw InternalError("tape entry '" + layer_id + "' has no cached input");
    return conv2d_backward(grad_out, e.cached.front(), w);
}

}  // namespace objmask
