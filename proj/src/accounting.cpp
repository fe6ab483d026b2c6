#include "objmask/accounting.hpp"

#include <json.hpp>
#include <sstream>

#include "objmask/errors.hpp"

namespace objmask {

// Depthwise convs are recorded with c_o = 1: each input scalar feeds k*k MACs.
ConvSpec ConvSpec::of(const Shape& input, const ConvWeights& w) {
    return {input.w, input.h, input.c, w.depthwise ? 1 : w.c_out(), w.k(), w.stride, w.pad};
}

std::uint64_t mac(const ConvSpec& spec) {
    const std::uint64_t num = spec.input_elems() * spec.c_o * spec.k * spec.k;
    return num / static_cast<std::uint64_t>(spec.s * spec.s);
}

double mac_star_count(const ConvSpec& spec, std::uint64_t zeros) {
    if (zeros > spec.input_elems()) throw ConfigError("zero count exceeds input size");
    const std::uint64_t num = (spec.input_elems() - zeros) * spec.c_o * spec.k * spec.k;
    return static_cast<double>(num) / static_cast<double>(spec.s * spec.s);
}

double mac_star(const ConvSpec& spec, const Tensor& x) {
    if (x.c() != spec.c_i || x.h() != spec.h_i || x.w() != spec.w_i) {
        throw ConfigError("tensor " + x.shape().str() + " does not match conv spec input");
    }
    if (x.n() == 0) return 0.0;
    const std::size_t per = static_cast<std::size_t>(x.c()) * x.shape().plane();
    double sum = 0.0;
    for (int b = 0; b < x.n(); ++b) {
        std::uint64_t z = 0;
        const float* d = x.plane(b, 0);
        for (std::size_t i = 0; i < per; ++i) z += d[i] == 0.0f;
        sum += mac_star_count(spec, z);
    }
    return sum / x.n();
}

std::uint64_t exact_mac(const ConvSpec& spec) {
    auto taps = [&](int in) {
        const int out = conv_out_dim(in, spec.k, spec.s, spec.p);
        std::uint64_t t = 0;
        for (int o = 0; o < out; ++o)
            for (int kk = 0; kk < spec.k; ++kk) {
                const int i = o * spec.s - spec.p + kk;
                t += (i >= 0 && i < in);
            }
        return t;
    };
    return taps(spec.h_i) * taps(spec.w_i) * spec.c_i * spec.c_o;
}

std::uint64_t zeros_by_mask(const Tensor& x_premask, const BinaryMask& mask) {
    if (mask.n() != x_premask.n() || mask.h() != x_premask.h() || mask.w() != x_premask.w()) {
        throw ConfigError("mask does not match tensor " + x_premask.shape().str());
    }
    std::uint64_t count = 0;
    const std::size_t plane = x_premask.shape().plane();
    for (int b = 0; b < x_premask.n(); ++b) {
        const std::uint8_t* m = mask.data().data() + plane * b;
        for (int c = 0; c < x_premask.c(); ++c) {
            const float* d = x_premask.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) count += (!m[i] && d[i] != 0.0f);
        }
    }
    return count;
}

void MacAccumulator::add_image(const std::vector<LayerObservation>& obs) {
    if (images_ == 0) {
        sums_.clear();
        for (const auto& o : obs) {
            LayerAccount a;
            a.layer_id = o.layer_id;
            a.group = o.group;
            a.spec = o.spec;
            sums_.push_back(a);
        }
    } else if (obs.size() != sums_.size()) {
        throw ConfigError("inconsistent layer sequence while profiling");
    }
    for (std::size_t i = 0; i < obs.size(); ++i) {
        const auto& o = obs[i];
        auto& a = sums_[i];
        if (o.layer_id != a.layer_id || !(o.spec == a.spec)) throw ConfigError("layer mismatch at " + o.layer_id);
        a.mac += static_cast<double>(mac(o.spec));
        a.mac_star += mac_star_count(o.spec, o.zeros);
        a.exact_mac += static_cast<double>(exact_mac(o.spec));
        a.zeros += static_cast<double>(o.zeros);
        a.zeros_by_mask += static_cast<double>(o.zeros_by_mask);
        a.input_elems += static_cast<double>(o.input_elems);
        a.mask_zero_fraction += o.mask_zero_fraction;
    }
    ++images_;
}

MacReport MacAccumulator::finish() const {
    if (images_ == 0) throw ConfigError("cannot profile an empty dataset");
    MacReport r;
    r.images = images_;
    const double n = static_cast<double>(images_);
    double od_zeros = 0, od_zbm = 0, od_elems = 0;
    for (auto a : sums_) {
        a.mac /= n;
        a.mac_star /= n;
        a.exact_mac /= n;
        a.zeros /= n;
        a.zeros_by_mask /= n;
        a.input_elems /= n;
        a.mask_zero_fraction /= n;
        r.total_mac += a.mac;
        r.total_mac_star += a.mac_star;
        if (a.group == "omg") {
            r.omg_mac_star += a.mac_star;
            r.omg_mac += a.mac;
        } else {
            r.od_mac_star += a.mac_star;
            r.od_mac += a.mac;
            od_zeros += a.zeros;
            od_zbm += a.zeros_by_mask;
            od_elems += a.input_elems;
        }
        r.layers.push_back(a);
    }
    r.mean_zero_fraction = od_elems > 0 ? od_zeros / od_elems : 0.0;
    r.zeros_by_mask_fraction = od_elems > 0 ? od_zbm / od_elems : 0.0;
    return r;
}

std::string MacReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "layer_id,mac,mac_star,zeros,zeros_by_mask,input_elems\n";
    for (const auto& a : layers) {
        os << a.layer_id << ',' << a.mac << ',' << a.mac_star << ',' << a.zeros << ',' << a.zeros_by_mask << ','
           << a.input_elems << '\n';
    }
    return os.str();
}

std::string MacReport::to_json() const {
    nlohmann::ordered_json j;
    j["images"] = images;
    j["total_mac"] = total_mac;
    j["total_mac_star"] = total_mac_star;
    j["omg_mac_star"] = omg_mac_star;
    j["od_mac_star"] = od_mac_star;
    j["omg_mac"] = omg_mac;
    j["od_mac"] = od_mac;
    j["mean_zero_fraction"] = mean_zero_fraction;
    j["zeros_by_mask_fraction"] = zeros_by_mask_fraction;
    auto& layers_j = j["layers"] = nlohmann::ordered_json::array();
    for (const auto& a : layers) {
        layers_j.push_back({{"layer_id", a.layer_id},
                            {"group", a.group},
                            {"mac", a.mac},
                            {"mac_star", a.mac_star},
                            {"exact_mac", a.exact_mac},
                            {"zero_fraction", a.zero_fraction()},
                            {"mask_zero_fraction", a.mask_zero_fraction}});
    }
    return j.dump(2);
}

}  // namespace objmask
