#pragma once

#include <complex>
#include <span>
#include <vector>

namespace objmask::fft {

// In-place iterative radix-2 transform. size must be a power of two.
// The inverse includes the 1/n scale.
void transform(std::span<std::complex<double>> data, bool inverse);

// Row-column 2-D transform of a row-major rows x cols grid.
void transform_2d(std::vector<std::complex<double>>& grid, int rows, int cols, bool inverse);

bool is_pow2(int n);

}  // namespace objmask::fft
