#include "objmask/fft.hpp"

#include <cmath>
#include <numbers>
#include <utility>

#include "objmask/errors.hpp"

namespace objmask::fft {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

void transform(std::span<std::complex<double>> data, bool inverse) {
    const std::size_t n = data.size();
    if (!is_pow2(static_cast<int>(n))) throw ConfigError("FFT length must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(data[i], data[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const auto u = data[i + k];
                const auto v = data[i + k + len / 2] * w;
                data[i + k] = u + v;
                data[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& v : data) v /= static_cast<double>(n);
}

void transform_2d(std::vector<std::complex<double>>& grid, int rows, int cols, bool inverse) {
    if (grid.size() != static_cast<std::size_t>(rows) * cols) throw ConfigError("FFT grid size mismatch");
    for (int r = 0; r < rows; ++r) transform({grid.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}, inverse);
    std::vector<std::complex<double>> col(static_cast<std::size_t>(rows));
    for (int c = 0; c < cols; ++c) {
        for (int r = 0; r < rows; ++r) col[static_cast<std::size_t>(r)] = grid[static_cast<std::size_t>(r) * cols + c];
        transform(col, inverse);
        for (int r = 0; r < rows; ++r) grid[static_cast<std::size_t>(r) * cols + c] = col[static_cast<std::size_t>(r)];
    }
}

}  // namespace objmask::fft
