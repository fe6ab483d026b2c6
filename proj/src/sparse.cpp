#include "objmask/sparse.hpp"

#include <algorithm>

#include "objmask/errors.hpp"

namespace objmask {

int tile_size_for_stride(int stride) {
    int t = 8;
    for (int s = 1; s < stride && t > 2; s *= 2) t /= 2;
    return t;
}

TileIndexList reduce_mask(const BinaryMask& mask, int tile_size) {
    if (tile_size <= 0 || mask.h() % tile_size != 0 || mask.w() % tile_size != 0) {
        throw ConfigError("mask " + std::to_string(mask.h()) + "x" + std::to_string(mask.w()) +
                          " not divisible by tile size " + std::to_string(tile_size));
    }
    TileIndexList t{tile_size, mask.n(), mask.h(), mask.w(), {}};
    for (int b = 0; b < mask.n(); ++b)
        for (int ty = 0; ty < t.tiles_y(); ++ty)
            for (int tx = 0; tx < t.tiles_x(); ++tx) {
                bool any = false;
                for (int y = ty * tile_size; y < (ty + 1) * tile_size && !any; ++y)
                    for (int x = tx * tile_size; x < (tx + 1) * tile_size && !any; ++x) any = mask.at(b, y, x);
                if (any) t.indices.push_back({b, ty, tx});
            }
    return t;
}

BinaryMask tiles_to_mask(const TileIndexList& tiles) {
    BinaryMask m(tiles.batch, tiles.h, tiles.w);
    const int ts = tiles.tile_size;
    for (const auto& t : tiles.indices)
        for (int y = t.row * ts; y < (t.row + 1) * ts; ++y)
            for (int x = t.col * ts; x < (t.col + 1) * ts; ++x) m.set(t.b, y, x, true);
    return m;
}

std::size_t gathered_elements(const TileIndexList& tiles, int channels, int k) {
    const std::size_t p = static_cast<std::size_t>(tiles.tile_size + k - 1);
    return tiles.indices.size() * p * p * static_cast<std::size_t>(channels);
}

namespace {

void check_tiles(const Tensor& x, const ConvWeights& w, const TileIndexList& tiles) {
    if (w.stride != 1 || 2 * w.pad != w.k() - 1) {
        throw ConfigError("sparse path supports stride-1 same-padded convolutions only");
    }
    if (tiles.batch != x.n() || tiles.h != x.h() || tiles.w != x.w()) {
        throw ConfigError("tile list geometry does not match input " + x.shape().str());
    }
    if (tiles.tile_size <= 0 || x.h() % tiles.tile_size != 0 || x.w() % tiles.tile_size != 0) {
        throw ConfigError("input not divisible by tile size");
    }
    for (const auto& t : tiles.indices) {
        if (t.b < 0 || t.b >= tiles.batch || t.row < 0 || t.row >= tiles.tiles_y() || t.col < 0 ||
            t.col >= tiles.tiles_x()) {
            throw ConfigError("tile index out of bounds");
        }
    }
}

}  // namespace

Tensor sparse_conv(const Tensor& x, const ConvWeights& w, const TileIndexList& tiles) {
    const Shape os = conv_out_shape(x.shape(), w);
    check_tiles(x, w, tiles);
    Tensor y(os);
    for (int b = 0; b < os.n; ++b)
        for (int c = 0; c < os.c; ++c) std::fill_n(y.plane(b, c), os.plane(), w.bias[static_cast<std::size_t>(c)]);

    const int ts = tiles.tile_size;
    const int k = w.k();
    const int pad = w.pad;
    const int patch = ts + k - 1;
    const int ci_n = x.c();
    const int co_n = os.c;
    const int taps = w.depthwise ? 1 : ci_n;
    const float* kern = w.kernel.data().data();
    const int n_tiles = static_cast<int>(tiles.indices.size());

    // Kernel as (in_channel, ky, kx, out_channel) so the inner loop runs over output channels.
    std::vector<float> wt(static_cast<std::size_t>(taps) * k * k * co_n);
    for (int co = 0; co < co_n; ++co)
        for (int ci = 0; ci < taps; ++ci)
            for (int t = 0; t < k * k; ++t)
                wt[(static_cast<std::size_t>(ci) * k * k + t) * co_n + co] =
                    kern[(static_cast<std::size_t>(co) * taps + ci) * k * k + t];

#pragma omp parallel
    {
        // Patch as (py, px, channel); accumulators as (ty, tx, out_channel).
        std::vector<float> in_patch(static_cast<std::size_t>(patch) * patch * ci_n);
        std::vector<float> acc(static_cast<std::size_t>(ts) * ts * co_n);
#pragma omp for schedule(static)
        for (int t = 0; t < n_tiles; ++t) {
            const TileIndex& ti = tiles.indices[static_cast<std::size_t>(t)];
            const int y0 = ti.row * ts - pad;
            const int x0 = ti.col * ts - pad;
            // Gather with zero fill outside the image.
            for (int ci = 0; ci < ci_n; ++ci) {
                const float* src = x.plane(ti.b, ci);
                for (int py = 0; py < patch; ++py) {
                    const int iy = y0 + py;
                    for (int px = 0; px < patch; ++px) {
                        const int ix = x0 + px;
                        in_patch[(static_cast<std::size_t>(py) * patch + px) * ci_n + ci] =
                            (iy >= 0 && iy < x.h() && ix >= 0 && ix < x.w()) ? src[iy * x.w() + ix] : 0.0f;
                    }
                }
            }
            std::fill(acc.begin(), acc.end(), 0.0f);
            for (int ty = 0; ty < ts; ++ty)
                for (int tx = 0; tx < ts; ++tx) {
                    float* a = acc.data() + (static_cast<std::size_t>(ty) * ts + tx) * co_n;
                    if (w.depthwise) {
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const float* v = in_patch.data() + (static_cast<std::size_t>(ty + ky) * patch + tx + kx) * ci_n;
                                const float* wr = wt.data() + static_cast<std::size_t>(ky * k + kx) * co_n;
#pragma omp simd
                                for (int c = 0; c < co_n; ++c) a[c] += wr[c] * v[c];
                            }
                    } else {
                        for (int ci = 0; ci < ci_n; ++ci)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const float v =
                                        in_patch[(static_cast<std::size_t>(ty + ky) * patch + tx + kx) * ci_n + ci];
                                    const float* wr = wt.data() + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * co_n;
#pragma omp simd
                                    for (int co = 0; co < co_n; ++co) a[co] += wr[co] * v;
                                }
                    }
                }
            for (int co = 0; co < co_n; ++co) {
                const float bv = w.bias[static_cast<std::size_t>(co)];
                float* out = y.plane(ti.b, co);
                for (int ty = 0; ty < ts; ++ty)
                    for (int tx = 0; tx < ts; ++tx)
                        out[(ti.row * ts + ty) * os.w + ti.col * ts + tx] =
                            acc[(static_cast<std::size_t>(ty) * ts + tx) * co_n + co] + bv;
            }
        }
    }
    return y;
}

std::vector<SpeedupRow> estimate_speedup(const std::vector<SparseLayer>& layers) {
    std::vector<SpeedupRow> rows;
    for (const auto& l : layers) {
        SpeedupRow r;
        r.layer_id = l.layer_id;
        r.active_tiles = l.tiles.indices.size();
        r.total_tiles = l.tiles.total_tiles();
        if (r.total_tiles > 0) {
            r.mac_ratio = static_cast<double>(r.active_tiles) / static_cast<double>(r.total_tiles);
            const double dense_in = static_cast<double>(l.tiles.batch) * l.tiles.h * l.tiles.w * l.spec.c_i;
            r.gather_ratio = static_cast<double>(gathered_elements(l.tiles, l.spec.c_i, l.spec.k)) / dense_in;
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace objmask
