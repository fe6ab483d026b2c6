#include "objmask/mask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "objmask/bytes.hpp"
#include "objmask/errors.hpp"

namespace objmask {

BinaryMask::BinaryMask(int n, int h, int w, int stride, std::uint8_t fill)
    : n_(n), h_(h), w_(w), stride_(stride) {
    if (n < 0 || h < 0 || w < 0 || stride <= 0) throw ConfigError("invalid mask geometry");
    bits_.assign(static_cast<std::size_t>(n) * h * w, fill ? 1 : 0);
}

std::size_t BinaryMask::count_ones() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BinaryMask BinaryMask::item(int b) const {
    BinaryMask m(1, h_, w_, stride_);
    std::copy_n(bits_.begin() + static_cast<std::ptrdiff_t>(plane() * b), plane(), m.bits_.begin());
    return m;
}

Tensor BinaryMask::to_tensor() const {
    Tensor t({n_, 1, h_, w_});
    for (std::size_t i = 0; i < bits_.size(); ++i) t[i] = bits_[i] ? 1.0f : 0.0f;
    return t;
}

BinaryMask BinaryMask::from_tensor(const Tensor& t, float threshold, int stride) {
    if (t.c() != 1) throw ConfigError("mask tensor must have one channel, got " + t.shape().str());
    BinaryMask m(t.n(), t.h(), t.w(), stride);
    for (std::size_t i = 0; i < t.size(); ++i) m.bits_[i] = t[i] > threshold ? 1 : 0;
    return m;
}

BinaryMask stack_masks(std::span<const BinaryMask> items) {
    if (items.empty()) return {};
    const auto& f = items.front();
    int total = 0;
    for (const auto& m : items) {
        if (m.h() != f.h() || m.w() != f.w() || m.stride() != f.stride()) throw ConfigError("cannot stack masks");
        total += m.n();
    }
    BinaryMask out(total, f.h(), f.w(), f.stride());
    auto dst = out.data().begin();
    for (const auto& m : items) dst = std::copy(m.data().begin(), m.data().end(), dst);
    return out;
}

BinaryMask dilate(const BinaryMask& mask, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) {
        throw ConfigError("dilation kernel must be odd and >= 1, got " + std::to_string(kernel));
    }
    if (kernel == 1) return mask;
    const int r = kernel / 2;
    const int h = mask.h(), w = mask.w();
    BinaryMask rows(mask.n(), h, w, mask.stride());
    BinaryMask out(mask.n(), h, w, mask.stride());
    for (int b = 0; b < mask.n(); ++b) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool any = false;
                for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r) && !any; ++xx) any = mask.at(b, y, xx);
                rows.set(b, y, x, any);
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool any = false;
                for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r) && !any; ++yy) any = rows.at(b, yy, x);
                out.set(b, y, x, any);
            }
    }
    return out;
}

BinaryMask pool_mask(const BinaryMask& mask, int factor) {
    if (factor <= 0) throw ConfigError("pool factor must be positive");
    if (mask.h() % factor != 0 || mask.w() % factor != 0) {
        throw ConfigError("mask " + std::to_string(mask.h()) + "x" + std::to_string(mask.w()) +
                          " not divisible by pool factor " + std::to_string(factor));
    }
    const int oh = mask.h() / factor, ow = mask.w() / factor;
    BinaryMask out(mask.n(), oh, ow, mask.stride() * factor);
    for (int b = 0; b < mask.n(); ++b)
        for (int y = 0; y < mask.h(); ++y)
            for (int x = 0; x < mask.w(); ++x)
                if (mask.at(b, y, x)) out.set(b, y / factor, x / factor, true);
    return out;
}

Tensor apply_mask(const Tensor& x, const BinaryMask& mask) {
    if (mask.n() != x.n() || mask.h() != x.h() || mask.w() != x.w()) {
        throw ConfigError("mask (" + std::to_string(mask.n()) + "," + std::to_string(mask.h()) + "," +
                          std::to_string(mask.w()) + ") does not match tensor " + x.shape().str());
    }
    Tensor y(x.shape());
    const std::size_t plane = x.shape().plane();
    for (int b = 0; b < x.n(); ++b) {
        const std::uint8_t* m = mask.data().data() + plane * b;
        for (int c = 0; c < x.c(); ++c) {
            const float* s = x.plane(b, c);
            float* d = y.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) d[i] = m[i] ? s[i] : 0.0f;
        }
    }
    return y;
}

double fg_ratio(const BinaryMask& mask) {
    if (mask.n() == 0 || mask.plane() == 0) return 0.0;
    double sum = 0.0;
    for (int b = 0; b < mask.n(); ++b) {
        const auto first = mask.data().begin() + static_cast<std::ptrdiff_t>(mask.plane() * b);
        const auto ones = std::count(first, first + static_cast<std::ptrdiff_t>(mask.plane()), std::uint8_t{1});
        sum += static_cast<double>(ones) / static_cast<double>(mask.plane());
    }
    return sum / mask.n();
}

BinaryMask boxes_to_mask(std::span<const Box> boxes, int h, int w) {
    BinaryMask m(1, h, w);
    for (const Box& bx : boxes) {
        // Pixel centers c + 0.5 in [x1, x2).
        const int c0 = std::max(0, static_cast<int>(std::ceil(bx.x1 - 0.5f)));
        const int c1 = std::min(w, static_cast<int>(std::ceil(bx.x2 - 0.5f)));
        const int r0 = std::max(0, static_cast<int>(std::ceil(bx.y1 - 0.5f)));
        const int r1 = std::min(h, static_cast<int>(std::ceil(bx.y2 - 0.5f)));
        for (int r = r0; r < r1; ++r)
            for (int c = c0; c < c1; ++c) m.set(0, r, c, true);
    }
    return m;
}

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) throw ConfigError("mask union shape mismatch");
    BinaryMask out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] | b.data()[i];
    return out;
}

bool is_subset(const BinaryMask& a, const BinaryMask& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] && !b.data()[i]) return false;
    return true;
}

void write_pgm(const std::filesystem::path& path, const BinaryMask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << "P5\n" << mask.w() << " " << mask.h() * mask.n() << "\n255\n";
    for (std::uint8_t v : mask.data()) out.put(static_cast<char>(v ? 255 : 0));
}

BinaryMask read_pgm(const std::filesystem::path& path, int n) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    in.get();
    if (magic != "P5" || maxv != 255 || n <= 0 || h % n != 0) throw FormatError("not a mask PGM", 0);
    BinaryMask m(n, h / n, w);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const int c = in.get();
        if (c == EOF) throw FormatError("truncated PGM payload", static_cast<std::size_t>(in.tellg()));
        m.data()[i] = c > 127 ? 1 : 0;
    }
    return m;
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> bits) {
    std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    return out;
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> packed, std::size_t count) {
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = (packed[i / 8] >> (i % 8)) & 1u;
    return out;
}

void write_mask_file(const std::filesystem::path& path, const BinaryMask& mask) {
    ByteWriter w;
    w.magic("OMSK");
    w.u32(static_cast<std::uint32_t>(mask.n()));
    w.u32(static_cast<std::uint32_t>(mask.h()));
    w.u32(static_cast<std::uint32_t>(mask.w()));
    w.u32(static_cast<std::uint32_t>(mask.stride()));
    w.bytes(pack_bits(mask.data()));
    w.save(path);
}

BinaryMask read_mask_file(const std::filesystem::path& path) {
    ByteReader r = ByteReader::load(path);
    r.expect_magic("OMSK");
    const auto n = static_cast<int>(r.u32());
    const auto h = static_cast<int>(r.u32());
    const auto w = static_cast<int>(r.u32());
    const std::size_t at = r.offset();
    const auto stride = static_cast<int>(r.u32());
    if (stride <= 0 || n < 0 || h < 0 || w < 0) throw FormatError("invalid mask header", at);
    BinaryMask m(n, h, w, stride);
    const auto packed = r.bytes((m.size() + 7) / 8);
    const auto bits = unpack_bits(packed, m.size());
    std::copy(bits.begin(), bits.end(), m.data().begin());
    return m;
}

}  // namespace objmask
