#include "objmask/conv.hpp"

#include <algorithm>

#include "objmask/errors.hpp"

namespace objmask {

ConvWeights ConvWeights::dense(int c_in, int c_out, int k, int stride, int pad) {
    if (c_in <= 0 || c_out <= 0 || k <= 0 || stride <= 0 || pad < 0) {
        throw ConfigError("invalid convolution geometry");
    }
    ConvWeights w;
    w.kernel = Tensor({c_out, c_in, k, k});
    w.bias.assign(static_cast<std::size_t>(c_out), 0.0f);
    w.stride = stride;
    w.pad = pad;
    return w;
}

ConvWeights ConvWeights::dw(int channels, int k, int stride, int pad) {
    ConvWeights w = dense(1, channels, k, stride, pad);
    w.depthwise = true;
    return w;
}

int conv_out_dim(int in, int k, int stride, int pad) {
    const int span = in + 2 * pad - k;
    if (span < 0) {
        throw ConfigError("convolution window " + std::to_string(k) + " larger than padded input " +
                          std::to_string(in + 2 * pad));
    }
    return span / stride + 1;
}

Shape conv_out_shape(const Shape& in, const ConvWeights& w) {
    if (w.kernel.h() != w.kernel.w()) throw ConfigError("kernel must be square");
    if (in.c != w.c_in()) {
        throw ConfigError("input " + in.str() + " does not match kernel " + w.kernel.shape().str());
    }
    return {in.n, w.c_out(), conv_out_dim(in.h, w.k(), w.stride, w.pad),
            conv_out_dim(in.w, w.k(), w.stride, w.pad)};
}

namespace {

// Output range [lo, hi) along one axis for which ox*s - p + kx lands in [0, in).
inline void valid_range(int in, int out, int kx, int stride, int pad, int& lo, int& hi) {
    const int a = pad - kx;  // need ox*s >= a
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    const int b = in - 1 + pad - kx;  // need ox*s <= b
    hi = b < 0 ? 0 : std::min(out, b / stride + 1);
    if (hi < lo) hi = lo;
}

}  // namespace

namespace kernels {

void accumulate_plane(const float* in, int in_h, int in_w, const float* kern, int k, int stride,
                      int pad, float* out, int out_h, int out_w) {
    for (int ky = 0; ky < k; ++ky) {
        int oy_lo, oy_hi;
        valid_range(in_h, out_h, ky, stride, pad, oy_lo, oy_hi);
        for (int kx = 0; kx < k; ++kx) {
            const float wv = kern[ky * k + kx];
            int ox_lo, ox_hi;
            valid_range(in_w, out_w, kx, stride, pad, ox_lo, ox_hi);
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const float* src = in + static_cast<std::ptrdiff_t>(oy * stride - pad + ky) * in_w - pad + kx;
                float* dst = out + static_cast<std::ptrdiff_t>(oy) * out_w;
                if (stride == 1) {
#pragma omp simd
                    for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += wv * src[ox];
                } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += wv * src[ox * stride];
                }
            }
        }
    }
}

}  // namespace kernels

namespace {

// Adjoint of accumulate_plane with respect to the input plane.
void scatter_plane(const float* gout, int out_h, int out_w, const float* kern, int k, int stride,
                   int pad, float* gin, int in_h, int in_w) {
    for (int ky = 0; ky < k; ++ky) {
        int oy_lo, oy_hi;
        valid_range(in_h, out_h, ky, stride, pad, oy_lo, oy_hi);
        for (int kx = 0; kx < k; ++kx) {
            const float wv = kern[ky * k + kx];
            int ox_lo, ox_hi;
            valid_range(in_w, out_w, kx, stride, pad, ox_lo, ox_hi);
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                float* dst = gin + static_cast<std::ptrdiff_t>(oy * stride - pad + ky) * in_w - pad + kx;
                const float* src = gout + static_cast<std::ptrdiff_t>(oy) * out_w;
                if (stride == 1) {
#pragma omp simd
                    for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += wv * src[ox];
                } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox * stride] += wv * src[ox];
                }
            }
        }
    }
}

// Gradient of one k*k kernel slice: correlation of an input plane with an output-gradient plane.
void kernel_grad_plane(const float* in, int in_h, int in_w, const float* gout, int out_h, int out_w,
                       int k, int stride, int pad, float* gk) {
    for (int ky = 0; ky < k; ++ky) {
        int oy_lo, oy_hi;
        valid_range(in_h, out_h, ky, stride, pad, oy_lo, oy_hi);
        for (int kx = 0; kx < k; ++kx) {
            int ox_lo, ox_hi;
            valid_range(in_w, out_w, kx, stride, pad, ox_lo, ox_hi);
            float acc = 0.0f;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const float* src = in + static_cast<std::ptrdiff_t>(oy * stride - pad + ky) * in_w - pad + kx;
                const float* g = gout + static_cast<std::ptrdiff_t>(oy) * out_w;
                if (stride == 1) {
#pragma omp simd reduction(+ : acc)
                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g[ox] * src[ox];
                } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g[ox] * src[ox * stride];
                }
            }
            gk[ky * k + kx] += acc;
        }
    }
}

}  // namespace

namespace {

// Column matrix of one image: row r = (ci * k + ky) * k + kx, column p = oy * out_w + ox.
// Out-of-bounds taps are zero.
void im2col(const float* in, int c, int in_h, int in_w, int k, int stride, int pad, int out_h, int out_w,
            float* col) {
    const std::size_t np = static_cast<std::size_t>(out_h) * out_w;
    for (int ci = 0; ci < c; ++ci) {
        const float* plane = in + static_cast<std::size_t>(ci) * in_h * in_w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * np;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* dst = row + static_cast<std::size_t>(oy) * out_w;
                    if (iy < 0 || iy >= in_h) {
                        std::fill(dst, dst + out_w, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * in_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < in_w) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const float* col, int c, int in_h, int in_w, int k, int stride, int pad, int out_h, int out_w,
                float* in) {
    const std::size_t np = static_cast<std::size_t>(out_h) * out_w;
    for (int ci = 0; ci < c; ++ci) {
        float* plane = in + static_cast<std::size_t>(ci) * in_h * in_w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * np;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= in_h) continue;
                    float* dst = plane + static_cast<std::size_t>(iy) * in_w;
                    const float* src = row + static_cast<std::size_t>(oy) * out_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < in_w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

constexpr int kRowBlock = 4;
constexpr int kColChunk = 64;

// out[i][p] = sum_r a[i][r] * b[r][p] for rows [i0, i0 + rows), columns [p0, p0 + len),
// r ascending from 0. a is row-major with stride lda, b with stride ldb.
inline void gemm_block(const float* a, std::size_t lda, const float* b, std::size_t ldb, int depth, int rows,
                       std::size_t p0, int len, float* out, std::size_t ldo) {
    float acc[kRowBlock][kColChunk];
    for (int i = 0; i < kRowBlock; ++i)
        for (int j = 0; j < kColChunk; ++j) acc[i][j] = 0.0f;
    for (int r = 0; r < depth; ++r) {
        const float* brow = b + static_cast<std::size_t>(r) * ldb + p0;
        for (int i = 0; i < rows; ++i) {
            const float av = a[static_cast<std::size_t>(i) * lda + r];
#pragma omp simd
            for (int j = 0; j < len; ++j) acc[i][j] += av * brow[j];
        }
    }
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < len; ++j) out[static_cast<std::size_t>(i) * ldo + p0 + j] = acc[i][j];
}

// Computes rows [i0, i0 + rows) of a * b for an (m x depth) a and (depth x n) b.
inline void gemm_rows(const float* a, std::size_t lda, const float* b, int depth, std::size_t n, int rows,
                      float* out) {
    for (std::size_t p0 = 0; p0 < n; p0 += kColChunk) {
        const int len = static_cast<int>(std::min<std::size_t>(kColChunk, n - p0));
        gemm_block(a, lda, b, n, depth, rows, p0, len, out, n);
    }
}

void depthwise_forward(const Tensor& x, const ConvWeights& w, Tensor& y) {
    const Shape& os = y.shape();
    const int k = w.k();
    const float* kern = w.kernel.data().data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < os.n; ++b) {
        for (int co = 0; co < os.c; ++co) {
            float* out = y.plane(b, co);
            kernels::accumulate_plane(x.plane(b, co), x.h(), x.w(), kern + static_cast<std::size_t>(co) * k * k, k,
                                      w.stride, w.pad, out, os.h, os.w);
            const float bv = w.bias[static_cast<std::size_t>(co)];
            for (std::size_t i = 0; i < os.plane(); ++i) out[i] += bv;
        }
    }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const ConvWeights& w) {
    const Shape os = conv_out_shape(x.shape(), w);
    if (w.bias.size() != static_cast<std::size_t>(os.c)) throw ConfigError("bias length mismatch");
    Tensor y(os);
    if (w.depthwise) {
        depthwise_forward(x, w, y);
        return y;
    }
    const int k = w.k();
    const int depth = x.c() * k * k;
    const std::size_t np = os.plane();
    const float* kern = w.kernel.data().data();
    std::vector<float> cols(static_cast<std::size_t>(os.n) * depth * np);

#pragma omp parallel for schedule(static)
    for (int b = 0; b < os.n; ++b) {
        im2col(x.plane(b, 0), x.c(), x.h(), x.w(), k, w.stride, w.pad, os.h, os.w,
               cols.data() + static_cast<std::size_t>(b) * depth * np);
    }
    const int blocks = (os.c + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < os.n; ++b) {
        for (int blk = 0; blk < blocks; ++blk) {
            const int co0 = blk * kRowBlock;
            const int rows = std::min(kRowBlock, os.c - co0);
            float* out = y.plane(b, co0);
            gemm_rows(kern + static_cast<std::size_t>(co0) * depth, static_cast<std::size_t>(depth),
                      cols.data() + static_cast<std::size_t>(b) * depth * np, depth, np, rows, out);
            for (int i = 0; i < rows; ++i) {
                const float bv = w.bias[static_cast<std::size_t>(co0 + i)];
                float* o = out + static_cast<std::size_t>(i) * np;
                for (std::size_t p = 0; p < np; ++p) o[p] += bv;
            }
        }
    }
    return y;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const ConvWeights& w) {
    const Shape os = conv_out_shape(x.shape(), w);
    if (!(grad_out.shape() == os)) {
        throw ConfigError("gradient shape " + grad_out.shape().str() + " does not match output " + os.str());
    }
    const int k = w.k();
    const int ci_n = x.c();
    const int co_n = os.c;
    const float* kern = w.kernel.data().data();

    ConvGrads g;
    g.grad_in = Tensor(x.shape());
    g.grad_kernel = Tensor(w.kernel.shape());
    g.grad_bias.assign(static_cast<std::size_t>(co_n), 0.0f);

    if (w.depthwise) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < co_n; ++c) {
            float* gk = g.grad_kernel.data().data() + static_cast<std::size_t>(c) * k * k;
            float gb = 0.0f;
            for (int b = 0; b < os.n; ++b) {
                const float* go = grad_out.plane(b, c);
                scatter_plane(go, os.h, os.w, kern + static_cast<std::size_t>(c) * k * k, k, w.stride, w.pad,
                              g.grad_in.plane(b, c), x.h(), x.w());
                kernel_grad_plane(x.plane(b, c), x.h(), x.w(), go, os.h, os.w, k, w.stride, w.pad, gk);
                for (std::size_t i = 0; i < os.plane(); ++i) gb += go[i];
            }
            g.grad_bias[static_cast<std::size_t>(c)] = gb;
        }
        return g;
    }

    const int depth = ci_n * k * k;
    const std::size_t np = os.plane();
    const std::size_t col_size = static_cast<std::size_t>(depth) * np;
    std::vector<float> cols(static_cast<std::size_t>(os.n) * col_size);
    // Kernel transposed to (depth, c_out) so grad columns come out of the same row kernel.
    std::vector<float> kern_t(static_cast<std::size_t>(depth) * co_n);
    for (int co = 0; co < co_n; ++co)
        for (int r = 0; r < depth; ++r)
            kern_t[static_cast<std::size_t>(r) * co_n + co] = kern[static_cast<std::size_t>(co) * depth + r];

#pragma omp parallel for schedule(static)
    for (int b = 0; b < os.n; ++b) {
        float* col = cols.data() + static_cast<std::size_t>(b) * col_size;
        im2col(x.plane(b, 0), ci_n, x.h(), x.w(), k, w.stride, w.pad, os.h, os.w, col);
    }

    // Input gradient: gcol = W^T * gout, then col2im; each thread owns one image.
#pragma omp parallel
    {
        std::vector<float> gcol(col_size);
#pragma omp for schedule(static)
        for (int b = 0; b < os.n; ++b) {
            const float* go = grad_out.plane(b, 0);
            for (int r0 = 0; r0 < depth; r0 += kRowBlock) {
                const int rows = std::min(kRowBlock, depth - r0);
                gemm_rows(kern_t.data() + static_cast<std::size_t>(r0) * co_n, static_cast<std::size_t>(co_n), go,
                          co_n, np, rows, gcol.data() + static_cast<std::size_t>(r0) * np);
            }
            col2im_add(gcol.data(), ci_n, x.h(), x.w(), k, w.stride, w.pad, os.h, os.w, g.grad_in.plane(b, 0));
        }
    }

    // Kernel and bias gradients; each thread owns output channels. Shallow
    // kernels use direct dot products, deep ones a blocked gout * col^T.
    if (depth < 64) {
#pragma omp parallel for schedule(static)
        for (int co = 0; co < co_n; ++co) {
            float* gk = g.grad_kernel.data().data() + static_cast<std::size_t>(co) * depth;
            float gb = 0.0f;
            for (int b = 0; b < os.n; ++b) {
                const float* go = grad_out.plane(b, co);
                const float* col = cols.data() + static_cast<std::size_t>(b) * col_size;
                for (int r = 0; r < depth; ++r) {
                    const float* row = col + static_cast<std::size_t>(r) * np;
                    float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
                    for (std::size_t p = 0; p < np; ++p) acc += go[p] * row[p];
                    gk[r] += acc;
                }
                for (std::size_t p = 0; p < np; ++p) gb += go[p];
            }
            g.grad_bias[static_cast<std::size_t>(co)] = gb;
        }
        return g;
    }
    std::vector<float> cols_t(cols.size());
#pragma omp parallel for schedule(static)
    for (int b = 0; b < os.n; ++b) {
        const float* col = cols.data() + static_cast<std::size_t>(b) * col_size;
        float* ct = cols_t.data() + static_cast<std::size_t>(b) * col_size;
        for (int r = 0; r < depth; ++r)
            for (std::size_t p = 0; p < np; ++p) ct[p * depth + r] = col[static_cast<std::size_t>(r) * np + p];
    }
    const int blocks = (co_n + kRowBlock - 1) / kRowBlock;
#pragma omp parallel
    {
        std::vector<float> part(static_cast<std::size_t>(kRowBlock) * depth);
#pragma omp for schedule(static)
        for (int blk = 0; blk < blocks; ++blk) {
            const int co0 = blk * kRowBlock;
            const int rows = std::min(kRowBlock, co_n - co0);
            float* gk = g.grad_kernel.data().data() + static_cast<std::size_t>(co0) * depth;
            for (int b = 0; b < os.n; ++b) {
                gemm_rows(grad_out.plane(b, co0), np, cols_t.data() + static_cast<std::size_t>(b) * col_size,
                          static_cast<int>(np), static_cast<std::size_t>(depth), rows, part.data());
                for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * depth; ++i) gk[i] += part[i];
            }
            for (int i = 0; i < rows; ++i) {
                float gb = 0.0f;
                for (int b = 0; b < os.n; ++b) {
                    const float* go = grad_out.plane(b, co0 + i);
                    for (std::size_t p = 0; p < np; ++p) gb += go[p];
                }
                g.grad_bias[static_cast<std::size_t>(co0 + i)] = gb;
            }
        }
    }
    return g;
}

}  // namespace objmask
