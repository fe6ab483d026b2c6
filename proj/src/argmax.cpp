#include "objmask/argmax.hpp"

#include <cmath>
#include <vector>

#include "objmask/errors.hpp"

namespace objmask {

void ArgmaxConfig::validate() const {
    if (!(beta > 0.0f) || !std::isfinite(beta)) throw ConfigError("argmax beta must be positive");
}

ArgmaxMode parse_argmax_mode(const std::string& s) {
    if (s == "soft") return ArgmaxMode::Soft;
    if (s == "surrogate") return ArgmaxMode::Surrogate;
    if (s == "hard") return ArgmaxMode::Hard;
    throw ConfigError("unknown argmax mode '" + s + "'");
}

std::string to_string(ArgmaxMode m) {
    switch (m) {
        case ArgmaxMode::Soft: return "soft";
        case ArgmaxMode::Surrogate: return "surrogate";
        case ArgmaxMode::Hard: return "hard";
    }
    return "?";
}

namespace {

void check_logits(const Tensor& logits) {
    if (logits.c() < 2) throw ConfigError("argmax needs at least two classes, got " + logits.shape().str());
}

// Softmax(beta * x) at one pixel into p; returns the expected index.
double pixel_softmax(const Tensor& logits, int b, std::size_t i, double beta, std::vector<double>& p) {
    const int classes = logits.c();
    double mx = logits.plane(b, 0)[i];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, static_cast<double>(logits.plane(b, k)[i]));
    double sum = 0.0;
    for (int k = 0; k < classes; ++k) {
        p[static_cast<std::size_t>(k)] = std::exp(beta * (logits.plane(b, k)[i] - mx));
        sum += p[static_cast<std::size_t>(k)];
    }
    double expect = 0.0;
    for (int k = 0; k < classes; ++k) {
        p[static_cast<std::size_t>(k)] /= sum;
        expect += p[static_cast<std::size_t>(k)] * k;
    }
    return expect;
}

}  // namespace

Tensor soft_argmax(const Tensor& logits, const ArgmaxConfig& cfg) {
    check_logits(logits);
    cfg.validate();
    Tensor out({logits.n(), 1, logits.h(), logits.w()});
    const std::size_t plane = logits.shape().plane();
#pragma omp parallel
    {
        std::vector<double> p(static_cast<std::size_t>(logits.c()));
#pragma omp for collapse(2) schedule(static)
        for (int b = 0; b < logits.n(); ++b)
            for (std::size_t i = 0; i < plane; ++i)
                out.plane(b, 0)[i] = static_cast<float>(pixel_softmax(logits, b, i, cfg.beta, p));
    }
    return out;
}

BinaryMask sg_argmax_forward(const Tensor& logits, const ArgmaxConfig& cfg) {
    check_logits(logits);
    cfg.validate();
    BinaryMask m(logits.n(), logits.h(), logits.w());
    const std::size_t plane = logits.shape().plane();
    for (int b = 0; b < logits.n(); ++b)
        for (std::size_t i = 0; i < plane; ++i) {
            int best = 0;
            float bv = logits.plane(b, 0)[i];
            for (int k = 1; k < logits.c(); ++k) {
                const float v = logits.plane(b, k)[i];
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            m.data()[static_cast<std::size_t>(b) * plane + i] = best >= 1 ? 1 : 0;
        }
    return m;
}

Tensor sg_argmax_backward(const Tensor& grad_out, const Tensor& logits, const ArgmaxConfig& cfg) {
    check_logits(logits);
    cfg.validate();
    if (grad_out.n() != logits.n() || grad_out.c() != 1 || grad_out.h() != logits.h() || grad_out.w() != logits.w()) {
        throw ConfigError("argmax gradient " + grad_out.shape().str() + " does not match logits " +
                          logits.shape().str());
    }
    Tensor g(logits.shape());
    if (cfg.mode == ArgmaxMode::Hard) return g;
    const std::size_t plane = logits.shape().plane();
    const double beta = cfg.beta;
#pragma omp parallel
    {
        std::vector<double> p(static_cast<std::size_t>(logits.c()));
#pragma omp for collapse(2) schedule(static)
        for (int b = 0; b < logits.n(); ++b)
            for (std::size_t i = 0; i < plane; ++i) {
                const double go = grad_out.plane(b, 0)[i];
                if (go == 0.0) continue;
                const double s = pixel_softmax(logits, b, i, beta, p);
                // d s / d x_j = beta * p_j * (j - s)
                for (int k = 0; k < logits.c(); ++k)
                    g.plane(b, k)[i] = static_cast<float>(go * beta * p[static_cast<std::size_t>(k)] * (k - s));
            }
    }
    return g;
}

Tensor binarize(const Tensor& logits, const ArgmaxConfig& cfg, bool training) {
    if (training && cfg.mode == ArgmaxMode::Soft) {
        Tensor s = soft_argmax(logits, cfg);
        // Only meaningful for two classes, where the expectation lies in [0, 1].
        return s;
    }
    return sg_argmax_forward(logits, cfg).to_tensor();
}

}  // namespace objmask
