#pragma once

#include <string>
#include <vector>

#include "objmask/accounting.hpp"
#include "objmask/conv.hpp"
#include "objmask/mask.hpp"

namespace objmask {

struct TileIndex {
    int b = 0;
    int row = 0;
    int col = 0;
    bool operator==(const TileIndex&) const = default;
};

// Tiles of a mask that contain at least one foreground pixel, in (b, row, col) order.
struct TileIndexList {
    int tile_size = 8;
    int batch = 0;
    int h = 0;
    int w = 0;
    std::vector<TileIndex> indices;

    int tiles_y() const { return h / tile_size; }
    int tiles_x() const { return w / tile_size; }
    std::size_t total_tiles() const { return static_cast<std::size_t>(batch) * tiles_y() * tiles_x(); }
};

TileIndexList reduce_mask(const BinaryMask& mask, int tile_size);

// Mask that is 1 over every listed tile.
BinaryMask tiles_to_mask(const TileIndexList& tiles);

// Tile size used at a given feature stride: 8 at stride 1, halved per doubling, floor 2.
int tile_size_for_stride(int stride);

// Gathers each active tile plus a (k-1) halo, convolves it densely and scatters
// the result. Stride-1, same-padded (2p == k-1) convolutions only, dense or
// depthwise. Outputs outside every tile hold the bias.
Tensor sparse_conv(const Tensor& x, const ConvWeights& w, const TileIndexList& tiles);

// Input elements gathered by sparse_conv (tiles including halo, all channels).
std::size_t gathered_elements(const TileIndexList& tiles, int channels, int k);

struct SparseLayer {
    std::string layer_id;
    ConvSpec spec;
    TileIndexList tiles;
};

struct SpeedupRow {
    std::string layer_id;
    std::size_t active_tiles = 0;
    std::size_t total_tiles = 0;
    double mac_ratio = 0;     // tile MACs / dense MACs
    double gather_ratio = 0;  // gathered patch elements / dense input elements
};

std::vector<SpeedupRow> estimate_speedup(const std::vector<SparseLayer>& layers);

}  // namespace objmask
