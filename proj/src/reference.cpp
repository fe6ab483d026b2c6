#include "objmask/reference.hpp"

#include "objmask/errors.hpp"

namespace objmask::reference {

namespace {

// Kernel index of tap (co, ci, ky, kx); depthwise kernels ignore ci.
inline std::size_t kidx(const ConvWeights& w, int co, int ci, int ky, int kx) {
    const int k = w.k();
    const int cin = w.depthwise ? 1 : w.c_in();
    const int cc = w.depthwise ? 0 : ci;
    return ((static_cast<std::size_t>(co) * cin + cc) * k + ky) * k + kx;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const ConvWeights& w) {
    const Shape os = conv_out_shape(x.shape(), w);
    Tensor y(os);
    const int k = w.k();
    for (int b = 0; b < os.n; ++b)
        for (int co = 0; co < os.c; ++co)
            for (int oy = 0; oy < os.h; ++oy)
                for (int ox = 0; ox < os.w; ++ox) {
                    float acc = 0.0f;
                    const int ci_lo = w.depthwise ? co : 0;
                    const int ci_hi = w.depthwise ? co + 1 : x.c();
                    for (int ci = ci_lo; ci < ci_hi; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * w.stride - w.pad + ky;
                                const int ix = ox * w.stride - w.pad + kx;
                                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                                acc += w.kernel[kidx(w, co, ci, ky, kx)] * x.at(b, ci, iy, ix);
                            }
                    y.at(b, co, oy, ox) = acc + w.bias[static_cast<std::size_t>(co)];
                }
    return y;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const ConvWeights& w) {
    const Shape os = conv_out_shape(x.shape(), w);
    if (!(grad_out.shape() == os)) throw ConfigError("gradient shape mismatch");
    ConvGrads g;
    g.grad_in = Tensor(x.shape());
    g.grad_kernel = Tensor(w.kernel.shape());
    g.grad_bias.assign(static_cast<std::size_t>(os.c), 0.0f);
    const int k = w.k();
    for (int b = 0; b < os.n; ++b)
        for (int co = 0; co < os.c; ++co)
            for (int oy = 0; oy < os.h; ++oy)
                for (int ox = 0; ox < os.w; ++ox) {
                    const float go = grad_out.at(b, co, oy, ox);
                    g.grad_bias[static_cast<std::size_t>(co)] += go;
                    const int ci_lo = w.depthwise ? co : 0;
                    const int ci_hi = w.depthwise ? co + 1 : x.c();
                    for (int ci = ci_lo; ci < ci_hi; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * w.stride - w.pad + ky;
                                const int ix = ox * w.stride - w.pad + kx;
                                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                                g.grad_in.at(b, ci, iy, ix) += go * w.kernel[kidx(w, co, ci, ky, kx)];
                                g.grad_kernel[kidx(w, co, ci, ky, kx)] += go * x.at(b, ci, iy, ix);
                            }
                }
    return g;
}

}  // namespace objmask::reference
