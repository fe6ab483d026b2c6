#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "objmask/conv.hpp"
#include "objmask/mask.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

// Geometry of one convolution as seen by the MAC formulas.
struct ConvSpec {
    int w_i = 0, h_i = 0, c_i = 0, c_o = 0, k = 1, s = 1, p = 0;

    static ConvSpec of(const Shape& input, const ConvWeights& w);
    std::uint64_t input_elems() const { return static_cast<std::uint64_t>(w_i) * h_i * c_i; }
    bool operator==(const ConvSpec&) const = default;
};

// (w_i * h_i * c_i) * c_o * k^2 / s^2, input-centric and padding-free, rounded down.
std::uint64_t mac(const ConvSpec& spec);

// (w_i * h_i * c_i - zeros) * c_o * k^2 / s^2 for one input with `zeros` zero
// scalars. Kept unrounded so that mac_star_count(spec, z) == mac - z*c_o*k^2/s^2
// holds exactly whenever mac itself is integral.
double mac_star_count(const ConvSpec& spec, std::uint64_t zeros);

// Batch average of mac_star_count over the items of x (exact == 0 test).
double mac_star(const ConvSpec& spec, const Tensor& x);

// Multiply-accumulates the padded sliding window actually executes for one input.
std::uint64_t exact_mac(const ConvSpec& spec);

// Elements nonzero before masking that sit at mask-0 positions (all channels).
std::uint64_t zeros_by_mask(const Tensor& x_premask, const BinaryMask& mask);

// Per-image observation of one conv input.
struct LayerObservation {
    std::string layer_id;
    std::string group;  // "omg" or "od"
    ConvSpec spec;
    std::uint64_t zeros = 0;
    std::uint64_t zeros_by_mask = 0;
    std::uint64_t input_elems = 0;
    double mask_zero_fraction = 0.0;  // spatial fraction of mask-0 pixels at this layer
};

struct LayerAccount {
    std::string layer_id;
    std::string group;
    ConvSpec spec;
    double mac = 0;
    double mac_star = 0;
    double exact_mac = 0;
    double zeros = 0;
    double zeros_by_mask = 0;
    double input_elems = 0;
    double mask_zero_fraction = 0;

    double zero_fraction() const { return input_elems > 0 ? zeros / input_elems : 0.0; }
};

struct MacReport {
    std::vector<LayerAccount> layers;
    std::size_t images = 0;
    double total_mac = 0;
    double total_mac_star = 0;
    double omg_mac_star = 0;
    double od_mac_star = 0;
    double od_mac = 0;
    double omg_mac = 0;
    // Over detector conv inputs: sum(zeros) / sum(elements).
    double mean_zero_fraction = 0;
    double zeros_by_mask_fraction = 0;

    std::string to_csv() const;
    std::string to_json() const;
};

// Averages per-image observations into a MacReport. Images must present the
// same layer sequence.
class MacAccumulator {
public:
    void add_image(const std::vector<LayerObservation>& obs);
    MacReport finish() const;
    std::size_t images() const { return images_; }

private:
    std::vector<LayerAccount> sums_;
    std::size_t images_ = 0;
};

}  // namespace objmask
