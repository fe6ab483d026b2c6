#include "objmask/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "objmask/bytes.hpp"
#include "objmask/errors.hpp"
#include "objmask/json_keys.hpp"
#include "objmask/rng.hpp"

namespace objmask {

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2i(int v) {
    int l = 0;
    while ((1 << l) < v) ++l;
    return l;
}

void add_into(Tensor& dst, const Tensor& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    if (!(dst.shape() == src.shape())) throw InternalError("gradient shape mismatch " + dst.shape().str() + " vs " + src.shape().str());
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

std::uint64_t count_zeros_item(const Tensor& x, int b) {
    const std::size_t len = static_cast<std::size_t>(x.c()) * x.h() * x.w();
    const float* p = x.plane(b, 0);
    std::uint64_t z = 0;
    for (std::size_t i = 0; i < len; ++i) z += p[i] == 0.0f;
    return z;
}

LayerObservation observe(const std::string& id, const std::string& group, const Tensor& u, const ConvWeights& w,
                         int b) {
    LayerObservation o;
    o.layer_id = id;
    o.group = group;
    o.spec = ConvSpec::of(u.shape(), w);
    o.zeros = count_zeros_item(u, b);
    o.input_elems = o.spec.input_elems();
    return o;
}

void init_conv(ConvWeights& w, Rng& rng, double std) {
    for (auto& v : w.kernel.vec()) v = static_cast<float>(rng.normal() * std);
}

double he_std(const ConvWeights& w) {
    return std::sqrt(2.0 / (static_cast<double>(w.c_in()) * w.k() * w.k()));
}

}  // namespace

float TrainSchedule::lr_at(int step, int total) const {
    float f = 1.0f;
    if (warmup_steps > 0 && step < warmup_steps) f = static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
    if (total > 0) {
        if (step * 3 >= total * 2) f *= 0.1f;
        if (step * 12 >= total * 11) f *= 0.1f;
    }
    return lr * f;
}

void ModelConfig::validate() const {
    if (image_hw <= 0) throw ConfigError("image_hw must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (od_blocks.empty()) throw ConfigError("detector needs at least one block");
    for (const auto& b : od_blocks) {
        if (b.channels <= 0) throw ConfigError("block channels must be positive");
        if (!is_pow2(b.stride)) throw ConfigError("block stride must be a power of two");
    }
    for (std::size_t i = 0; i < od_blocks.size(); ++i) {
        const int s = block_output_stride(i);
        if (image_hw % s != 0) {
            throw ConfigError("block " + std::to_string(i + 1) + " stride " + std::to_string(s) +
                              " does not divide image size");
        }
    }
    if (head_blocks.empty()) throw ConfigError("at least one head level is required");
    for (std::size_t l = 0; l < head_blocks.size(); ++l) {
        const int hb = head_blocks[l];
        if (hb < 0 || static_cast<std::size_t>(hb) >= od_blocks.size()) throw ConfigError("head block out of range");
        if (l > 0 && hb <= head_blocks[l - 1]) throw ConfigError("head blocks must be ascending");
    }
    if (anchor_sizes.size() != head_blocks.size()) throw ConfigError("one anchor size per head level required");
    if (!(background_prior > 0.0f && background_prior < 1.0f)) throw ConfigError("background_prior must be in (0,1)");
    if (omg.channels.empty() || omg.channels.size() != omg.strides.size()) {
        throw ConfigError("omg channels/strides must be nonempty and of equal length");
    }
    for (std::size_t i = 0; i < omg.channels.size(); ++i) {
        if (omg.channels[i] <= 0 || omg.strides[i] <= 0) throw ConfigError("invalid omg layer");
    }
    const double hw = image_hw * omg.input_scale;
    if (!(omg.input_scale > 0.0 && omg.input_scale <= 1.0) || hw != std::floor(hw)) {
        throw ConfigError("omg input_scale must give an integral resolution");
    }
    if (!(omg.foreground_prior > 0.0 && omg.foreground_prior < 1.0)) throw ConfigError("omg foreground_prior must be in (0, 1)");
    int total = 1;
    for (int s : omg.strides) total *= s;
    if (omg_input_hw() % total != 0) throw ConfigError("omg strides must divide the omg input size");
    argmax.validate();
    omg_loss.validate();
    if (!(lambda_omg >= 0.0f)) throw ConfigError("lambda_omg must be >= 0");
    if (train.steps < 0 || train.batch < 1) throw ConfigError("train steps/batch invalid");
    if (!(train.lr >= 0.0f)) throw ConfigError("learning rate must be >= 0");
    if (!(train.momentum >= 0.0f && train.momentum < 1.0f)) throw ConfigError("momentum must be in [0,1)");
    if (!(train.e2e_step_factor > 0.0)) throw ConfigError("e2e_step_factor must be positive");
}

int ModelConfig::omg_input_hw() const { return static_cast<int>(std::lround(image_hw * omg.input_scale)); }

int ModelConfig::block_input_stride(std::size_t i) const { return i == 0 ? 1 : block_output_stride(i - 1); }

int ModelConfig::block_output_stride(std::size_t i) const {
    int s = 1;
    for (std::size_t j = 0; j <= i; ++j) s *= od_blocks[j].stride * (od_blocks[j].pool ? 2 : 1);
    return s;
}

std::vector<int> ModelConfig::head_strides() const {
    std::vector<int> out;
    for (int hb : head_blocks) out.push_back(block_output_stride(static_cast<std::size_t>(hb)));
    return out;
}

namespace {

// Shortest decimal that reads back as the same float.
double json_float(float f) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, f);
    return std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
}

std::vector<double> json_floats(const std::vector<float>& v) {
    std::vector<double> out;
    for (float f : v) out.push_back(json_float(f));
    return out;
}

}  // namespace

nlohmann::ordered_json ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["image_hw"] = image_hw;
    j["num_classes"] = num_classes;
    j["in_channels"] = in_channels;
    auto blocks = nlohmann::ordered_json::array();
    for (const auto& b : od_blocks) blocks.push_back({{"channels", b.channels}, {"stride", b.stride}, {"pool", b.pool}});
    j["od_blocks"] = blocks;
    j["head_blocks"] = head_blocks;
    j["anchor_sizes"] = json_floats(anchor_sizes);
    j["background_prior"] = json_float(background_prior);
    j["omg"] = {{"input_scale", omg.input_scale}, {"channels", omg.channels}, {"strides", omg.strides},
                {"foreground_prior", omg.foreground_prior}};
    j["argmax"] = {{"beta", json_float(argmax.beta)}, {"mode", to_string(argmax.mode)}};
    nlohmann::ordered_json ol;
    ol["dilation_kernel"] = omg_loss.dilation_kernel;
    if (omg_loss.ohnem) {
        ol["ohnem"] = {omg_loss.ohnem->pos_units, omg_loss.ohnem->neg_units};
    } else {
        ol["ohnem"] = nullptr;
    }
    ol["loss_weights"] = {json_float(omg_loss.foreground_weight), json_float(omg_loss.background_weight)};
    j["omg_loss"] = ol;
    j["lambda_omg"] = json_float(lambda_omg);
    j["train"] = {{"steps", train.steps},
                  {"batch", train.batch},
                  {"lr", json_float(train.lr)},
                  {"momentum", json_float(train.momentum)},
                  {"weight_decay", json_float(train.weight_decay)},
                  {"grad_clip", json_float(train.grad_clip)},
                  {"warmup_steps", train.warmup_steps},
                  {"e2e_step_factor", train.e2e_step_factor},
                  {"flip", train.flip},
                  {"log_every", train.log_every},
                  {"eval_every", train.eval_every},
                  {"seed", train.seed}};
    j["init_seed"] = init_seed;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    reject_unknown_keys(j, c.to_json());
    try {
        c.image_hw = j.value("image_hw", c.image_hw);
        c.num_classes = j.value("num_classes", c.num_classes);
        c.in_channels = j.value("in_channels", c.in_channels);
        if (j.contains("od_blocks")) {
            c.od_blocks.clear();
            for (const auto& b : j.at("od_blocks")) {
                c.od_blocks.push_back({b.at("channels").get<int>(), b.value("stride", 1), b.value("pool", false)});
            }
        }
        c.head_blocks = j.value("head_blocks", c.head_blocks);
        c.anchor_sizes = j.value("anchor_sizes", c.anchor_sizes);
        c.background_prior = j.value("background_prior", c.background_prior);
        if (j.contains("omg")) {
            const auto& o = j.at("omg");
            c.omg.input_scale = o.value("input_scale", c.omg.input_scale);
            c.omg.channels = o.value("channels", c.omg.channels);
            c.omg.strides = o.value("strides", c.omg.strides);
            c.omg.foreground_prior = o.value("foreground_prior", c.omg.foreground_prior);
        }
        if (j.contains("argmax")) {
            const auto& a = j.at("argmax");
            c.argmax.beta = a.value("beta", c.argmax.beta);
            if (a.contains("mode")) c.argmax.mode = parse_argmax_mode(a.at("mode").get<std::string>());
        }
        if (j.contains("omg_loss")) {
            const auto& o = j.at("omg_loss");
            c.omg_loss.dilation_kernel = o.value("dilation_kernel", c.omg_loss.dilation_kernel);
            if (o.contains("ohnem")) {
                if (o.at("ohnem").is_null()) {
                    c.omg_loss.ohnem.reset();
                } else {
                    const auto r = o.at("ohnem").get<std::vector<int>>();
                    if (r.size() != 2) throw ConfigError("ohnem ratio must be [pos, neg]");
                    c.omg_loss.ohnem = MiningRatio{r[0], r[1]};
                }
            }
            if (o.contains("loss_weights")) {
                const auto w = o.at("loss_weights").get<std::vector<float>>();
                if (w.size() != 2) throw ConfigError("loss_weights must be [fg, bg]");
                c.omg_loss.foreground_weight = w[0];
                c.omg_loss.background_weight = w[1];
            }
        }
        c.lambda_omg = j.value("lambda_omg", c.lambda_omg);
        if (j.contains("train")) {
            const auto& t = j.at("train");
            c.train.steps = t.value("steps", c.train.steps);
            c.train.batch = t.value("batch", c.train.batch);
            c.train.lr = t.value("lr", c.train.lr);
            c.train.momentum = t.value("momentum", c.train.momentum);
            c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
            c.train.grad_clip = t.value("grad_clip", c.train.grad_clip);
            c.train.warmup_steps = t.value("warmup_steps", c.train.warmup_steps);
            c.train.e2e_step_factor = t.value("e2e_step_factor", c.train.e2e_step_factor);
            c.train.flip = t.value("flip", c.train.flip);
            c.train.log_every = t.value("log_every", c.train.log_every);
            c.train.eval_every = t.value("eval_every", c.train.eval_every);
            c.train.seed = t.value("seed", c.train.seed);
        }
        c.init_seed = j.value("init_seed", c.init_seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

ForwardMode parse_forward_mode(const std::string& s) {
    if (s == "vanilla") return ForwardMode::Vanilla;
    if (s == "pipeline") return ForwardMode::Pipeline;
    if (s == "e2e") return ForwardMode::E2e;
    throw ConfigError("unknown forward mode '" + s + "'");
}

std::string to_string(ForwardMode m) {
    switch (m) {
        case ForwardMode::Vanilla: return "vanilla";
        case ForwardMode::Pipeline: return "pipeline";
        case ForwardMode::E2e: return "e2e";
    }
    return "?";
}

Execution parse_execution(const std::string& s) {
    if (s == "dense") return Execution::Dense;
    if (s == "sparse") return Execution::Sparse;
    throw ConfigError("unknown execution '" + s + "'");
}

std::string to_string(Execution e) { return e == Execution::Dense ? "dense" : "sparse"; }

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    int c_in = cfg_.in_channels;
    for (const auto& b : cfg_.od_blocks) {
        od.push_back(ConvWeights::dense(c_in, b.channels, 3, b.stride, 1));
        init_conv(od.back(), rng, he_std(od.back()));
        c_in = b.channels;
    }
    const int per_cell = cfg_.anchors_per_cell();
    const float bg_bias = std::log(cfg_.background_prior * static_cast<float>(cfg_.num_classes) /
                                   (1.0f - cfg_.background_prior));
    for (int hb : cfg_.head_blocks) {
        od.push_back(ConvWeights::dense(cfg_.od_blocks[static_cast<std::size_t>(hb)].channels, cfg_.head_channels(), 1, 1, 0));
        init_conv(od.back(), rng, 0.01);
        for (int a = 0; a < per_cell; ++a) od.back().bias[static_cast<std::size_t>(a * (cfg_.num_classes + 1))] = bg_bias;
    }
    c_in = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.omg.channels.size(); ++i) {
        omg.push_back(ConvWeights::dense(c_in, cfg_.omg.channels[i], 3, cfg_.omg.strides[i], 1));
        init_conv(omg.back(), rng, he_std(omg.back()));
        c_in = cfg_.omg.channels[i];
    }
    omg.push_back(ConvWeights::dense(c_in, 2, 1, 1, 0));
    init_conv(omg.back(), rng, 0.01);
    const double fp = cfg_.omg.foreground_prior;
    omg.back().bias[1] = static_cast<float>(std::log(fp / (1.0 - fp)) / cfg_.argmax.beta);

    std::vector<int> strides = cfg_.head_strides();
    anchors_ = AnchorGrid::build(cfg_.image_hw, cfg_.image_hw, strides, cfg_.anchor_sizes);
}

std::vector<std::string> Model::od_layer_ids() const {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cfg_.od_blocks.size(); ++i) ids.push_back("od.b" + std::to_string(i + 1));
    for (int s : cfg_.head_strides()) ids.push_back("od.head" + std::to_string(s));
    return ids;
}

std::vector<std::string> Model::omg_layer_ids() const {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cfg_.omg.channels.size(); ++i) ids.push_back("omg.c" + std::to_string(i + 1));
    ids.push_back("omg.logits");
    return ids;
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for (const auto& w : od) n += w.param_count();
    for (const auto& w : omg) n += w.param_count();
    return n;
}

Tensor Model::omg_forward(const Tensor& images, LayerTape* tape,
                          std::vector<std::vector<LayerObservation>>* obs) const {
    const int hw = cfg_.omg_input_hw();
    const auto ids = omg_layer_ids();
    Tensor x = (hw == images.h() && hw == images.w()) ? images : upsample_bilinear(images, hw, hw);
    const std::size_t n_conv = cfg_.omg.channels.size();
    for (std::size_t i = 0; i < n_conv; ++i) {
        if (obs) {
            for (int b = 0; b < x.n(); ++b) (*obs)[static_cast<std::size_t>(b)].push_back(observe(ids[i], "omg", x, omg[i], b));
        }
        Tensor y = conv2d_forward(x, omg[i]);
        if (tape) tape->push({ids[i], {x}, std::nullopt, {}});
        x = relu(y);
        if (tape) tape->push({ids[i] + ".relu", {std::move(y)}, std::nullopt, {}});
    }
    const Shape small = x.shape();
    Tensor up = upsample_bilinear(x, hw, hw);
    if (tape) tape->push({"omg.up", {}, std::nullopt, {static_cast<std::uint32_t>(small.c), static_cast<std::uint32_t>(small.h), static_cast<std::uint32_t>(small.w)}});
    if (obs) {
        for (int b = 0; b < up.n(); ++b) (*obs)[static_cast<std::size_t>(b)].push_back(observe(ids[n_conv], "omg", up, omg[n_conv], b));
    }
    Tensor logits = conv2d_forward(up, omg[n_conv]);
    if (tape) tape->push({ids[n_conv], {std::move(up)}, std::nullopt, {}});
    if (logits.h() == images.h() && logits.w() == images.w()) return logits;
    Tensor full = upsample_bilinear(logits, images.h(), images.w());
    if (tape) tape->push({"omg.resize", {}, std::nullopt, {static_cast<std::uint32_t>(logits.h()), static_cast<std::uint32_t>(logits.w())}});
    return full;
}

std::vector<ConvGrads> Model::omg_backward(const Tensor& grad_logits, LayerTape& tape) const {
    const auto ids = omg_layer_ids();
    const std::size_t n_conv = cfg_.omg.channels.size();
    std::vector<ConvGrads> grads(omg.size());
    const int n = grad_logits.n();
    const int hw = cfg_.omg_input_hw();
    Tensor g = grad_logits;
    if (grad_logits.h() != hw || grad_logits.w() != hw) {
        tape.pop("omg.resize");
        g = upsample_bilinear_backward(g, {n, 2, hw, hw});
    }
    grads[n_conv] = conv2d_backward(g, tape, ids[n_conv], omg[n_conv]);
    g = std::move(grads[n_conv].grad_in);
    const TapeEntry up = tape.pop("omg.up");
    g = upsample_bilinear_backward(g, {n, static_cast<int>(up.indices[0]), static_cast<int>(up.indices[1]),
                                       static_cast<int>(up.indices[2])});
    for (std::size_t i = n_conv; i-- > 0;) {
        const TapeEntry r = tape.pop(ids[i] + ".relu");
        g = relu_backward(g, r.cached[0]);
        grads[i] = conv2d_backward(g, tape, ids[i], omg[i]);
        g = std::move(grads[i].grad_in);
    }
    return grads;
}

ForwardResult Model::forward(const Tensor& images, const ForwardOptions& opt, LayerTape* tape) const {
    const int hw = cfg_.image_hw;
    if (images.c() != cfg_.in_channels || images.h() != hw || images.w() != hw) {
        throw ConfigError("image batch " + images.shape().str() + " does not match model resolution " +
                          std::to_string(hw));
    }
    const int n = images.n();
    const bool masked = opt.mode != ForwardMode::Vanilla;
    if (opt.exec == Execution::Sparse && !masked) throw ConfigError("sparse execution requires a masked model");
    if (opt.exec == Execution::Sparse && opt.training) throw ConfigError("sparse execution is inference-only");
    const bool mask_grad = tape && opt.mode == ForwardMode::E2e;

    ForwardResult fr;
    if (opt.observe) fr.observations.resize(static_cast<std::size_t>(n));
    auto* obs = opt.observe ? &fr.observations : nullptr;

    Tensor m1;
    if (opt.mode == ForwardMode::Pipeline) {
        if (!opt.mask) throw ConfigError("pipeline mode requires a mask");
        if (opt.mask->n() != n || opt.mask->h() != hw || opt.mask->w() != hw) {
            throw ConfigError("mask " + std::to_string(opt.mask->n()) + "x" + std::to_string(opt.mask->h()) + "x" +
                              std::to_string(opt.mask->w()) + " does not match image batch " + images.shape().str());
        }
        m1 = opt.mask->to_tensor();
    } else if (opt.mode == ForwardMode::E2e) {
        fr.omg_logits = omg_forward(images, tape, obs);
        m1 = binarize(fr.omg_logits, cfg_.argmax, opt.training);
        if (tape) tape->push({"argmax", {fr.omg_logits}, std::nullopt, {}});
    }

    // Mask pyramid: level l holds the mask at stride 2^l.
    std::vector<Tensor> pyramid;
    std::vector<BinaryMask> pyramid_bits;
    const int max_stride = cfg_.block_output_stride(cfg_.od_blocks.size() - 1);
    if (masked) {
        pyramid.push_back(m1);
        for (int l = 1; (1 << l) <= max_stride; ++l) {
            PoolResult pr = maxpool2(pyramid.back());
            if (mask_grad) {
                tape->push({"mask.pool" + std::to_string(l), {}, std::nullopt, std::move(pr.argmax)});
            }
            pyramid.push_back(std::move(pr.out));
        }
        if (opt.observe || opt.exec == Execution::Sparse) {
            for (std::size_t l = 0; l < pyramid.size(); ++l) {
                pyramid_bits.push_back(BinaryMask::from_tensor(pyramid[l], 0.5f, 1 << l));
            }
        }
        fr.mask = m1;
    }

    const auto ids = od_layer_ids();
    const std::size_t L = cfg_.od_blocks.size();

    auto run_conv = [&](const std::string& id, const Tensor& u, const ConvWeights& w, int stride) {
        const bool sparse_ok = opt.exec == Execution::Sparse && w.stride == 1 && 2 * w.pad == w.k() - 1;
        Tensor out;
        if (sparse_ok) {
            const auto& bits = pyramid_bits[static_cast<std::size_t>(log2i(stride))];
            TileIndexList tiles = reduce_mask(bits, tile_size_for_stride(stride));
            out = sparse_conv(u, w, tiles);
            fr.sparse_layers.push_back({id, ConvSpec::of(u.shape(), w), std::move(tiles)});
        } else {
            out = conv2d_forward(u, w);
        }
        if (opt.keep_outputs) {
            fr.conv_inputs.emplace_back(id, u);
            fr.conv_outputs.emplace_back(id, out);
        }
        return out;
    };
    auto record = [&](const std::string& id, const Tensor& x_pre, const Tensor& u, const ConvWeights& w, int stride) {
        if (!opt.observe) return;
        for (int b = 0; b < n; ++b) {
            LayerObservation o = observe(id, "od", u, w, b);
            if (masked) {
                const BinaryMask bm = pyramid_bits[static_cast<std::size_t>(log2i(stride))].item(b);
                o.zeros_by_mask = zeros_by_mask(x_pre.item(b), bm);
                o.mask_zero_fraction = 1.0 - fg_ratio(bm);
            }
            fr.observations[static_cast<std::size_t>(b)].push_back(std::move(o));
        }
    };
    auto mask_at = [&](const std::string& id, const Tensor& x, int stride) {
        const Tensor& m = pyramid[static_cast<std::size_t>(log2i(stride))];
        if (m.h() != x.h() || m.w() != x.w()) {
            throw InternalError("mask " + m.shape().str() + " does not match input " + x.shape().str() + " at " + id);
        }
        Tensor u = elementwise_mul(x, m);
        if (tape) tape->push({id + ".mask", {x, m}, std::nullopt, {}});
        return u;
    };

    // masked_inputs[i] is the (masked) input of block i; masked_inputs[L] the masked last output.
    std::vector<Tensor> masked_inputs(L + 1);
    std::vector<Tensor> pre_inputs(opt.observe ? L + 1 : 0);
    Tensor x = images;
    for (std::size_t i = 0; i < L; ++i) {
        const int s_in = cfg_.block_input_stride(i);
        Tensor u = masked ? mask_at(ids[i], x, s_in) : x;
        record(ids[i], x, u, od[i], s_in);
        Tensor c = run_conv(ids[i], u, od[i], s_in);
        if (tape) tape->push({ids[i], {u}, std::nullopt, {}});
        Tensor r = relu(c);
        if (tape) tape->push({ids[i] + ".relu", {std::move(c)}, std::nullopt, {}});
        if (cfg_.od_blocks[i].pool) {
            PoolResult pr = maxpool2(r);
            if (tape) tape->push({ids[i] + ".pool", {std::move(r)}, std::nullopt, std::move(pr.argmax)});
            r = std::move(pr.out);
        }
        if (opt.observe) pre_inputs[i] = x;
        masked_inputs[i] = std::move(u);
        x = std::move(r);
    }
    const std::size_t last_head = static_cast<std::size_t>(cfg_.head_blocks.back());
    if (opt.observe) pre_inputs[L] = x;
    if (last_head == L - 1) {
        masked_inputs[L] = masked ? mask_at("od.out", x, cfg_.block_output_stride(L - 1)) : x;
    }

    for (std::size_t l = 0; l < cfg_.head_blocks.size(); ++l) {
        const auto hb = static_cast<std::size_t>(cfg_.head_blocks[l]);
        const ConvWeights& w = od[L + l];
        const std::string& id = ids[L + l];
        const int s = cfg_.block_output_stride(hb);
        const Tensor& hin = masked_inputs[hb + 1];
        if (opt.observe) record(id, pre_inputs[hb + 1], hin, w, s);
        Tensor h = run_conv(id, hin, w, s);
        if (tape) tape->push({id, {hin}, std::nullopt, {}});
        fr.heads.push_back(std::move(h));
    }
    return fr;
}

ParamGrads Model::backward(const std::vector<Tensor>& grad_heads, const Tensor* grad_omg_logits,
                           const ForwardOptions& opt, LayerTape& tape) const {
    const std::size_t L = cfg_.od_blocks.size();
    const auto ids = od_layer_ids();
    const bool masked = opt.mode != ForwardMode::Vanilla;
    const bool mask_grad = opt.mode == ForwardMode::E2e;
    if (grad_heads.size() != cfg_.head_blocks.size()) throw InternalError("one head gradient per level required");

    ParamGrads pg;
    pg.od.resize(od.size());
    std::vector<Tensor> grad_u(L + 1);
    std::vector<Tensor> grad_m;

    for (std::size_t l = cfg_.head_blocks.size(); l-- > 0;) {
        const auto hb = static_cast<std::size_t>(cfg_.head_blocks[l]);
        pg.od[L + l] = conv2d_backward(grad_heads[l], tape, ids[L + l], od[L + l]);
        add_into(grad_u[hb + 1], pg.od[L + l].grad_in);
        pg.od[L + l].grad_in = Tensor();
    }

    auto mask_backward = [&](const std::string& id, const Tensor& g) {
        TapeEntry e = tape.pop(id + ".mask");
        MulGrads mg = elementwise_mul_backward(g, e.cached[0], e.cached[1]);
        if (mask_grad) {
            const auto lvl = static_cast<std::size_t>(log2i(cfg_.image_hw / e.cached[0].h()));
            if (grad_m.size() <= lvl) grad_m.resize(lvl + 1);
            add_into(grad_m[lvl], mg.grad_m);
        }
        return std::move(mg.grad_x);
    };

    Tensor g;  // gradient w.r.t. the current block output
    if (!grad_u[L].empty()) g = masked ? mask_backward("od.out", grad_u[L]) : std::move(grad_u[L]);
    for (std::size_t i = L; i-- > 0;) {
        if (cfg_.od_blocks[i].pool) {
            TapeEntry p = tape.pop(ids[i] + ".pool");
            g = g.empty() ? Tensor(p.cached[0].shape()) : maxpool2_backward(g, p.indices, p.cached[0].shape());
        }
        TapeEntry r = tape.pop(ids[i] + ".relu");
        if (g.empty()) g = Tensor(r.cached[0].shape());
        g = relu_backward(g, r.cached[0]);
        pg.od[i] = conv2d_backward(g, tape, ids[i], od[i]);
        g = std::move(pg.od[i].grad_in);
        pg.od[i].grad_in = Tensor();
        if (!grad_u[i].empty()) add_into(g, grad_u[i]);
        if (masked) g = mask_backward(ids[i], g);
    }

    if (!mask_grad) return pg;

    const int max_stride = cfg_.block_output_stride(L - 1);
    const int levels = log2i(max_stride) + 1;
    grad_m.resize(static_cast<std::size_t>(levels));
    const int n = grad_heads.front().n();
    for (int l = levels - 1; l >= 1; --l) {
        TapeEntry e = tape.pop("mask.pool" + std::to_string(l));
        const int s_prev = 1 << (l - 1);
        const Shape prev{n, 1, cfg_.image_hw / s_prev, cfg_.image_hw / s_prev};
        if (grad_m[static_cast<std::size_t>(l)].empty()) continue;
        add_into(grad_m[static_cast<std::size_t>(l - 1)], maxpool2_backward(grad_m[static_cast<std::size_t>(l)], e.indices, prev));
    }
    TapeEntry a = tape.pop("argmax");
    const Tensor& logits = a.cached[0];
    Tensor gm0 = grad_m[0].empty() ? Tensor({n, 1, cfg_.image_hw, cfg_.image_hw}) : grad_m[0];
    Tensor g_logits = sg_argmax_backward(gm0, logits, cfg_.argmax);
    if (grad_omg_logits) add_into(g_logits, *grad_omg_logits);
    pg.omg = omg_backward(g_logits, tape);
    for (auto& gr : pg.omg) gr.grad_in = Tensor();
    return pg;
}

HeadRows Model::head_rows(const ForwardResult& fr, int b) const {
    HeadRows rows;
    const int C1 = cfg_.num_classes + 1;
    const int A = cfg_.anchors_per_cell();
    rows.cls.reserve(anchors_.size() * static_cast<std::size_t>(C1));
    rows.box.reserve(anchors_.size() * 4);
    for (const auto& h : fr.heads) {
        for (int y = 0; y < h.h(); ++y)
            for (int x = 0; x < h.w(); ++x)
                for (int a = 0; a < A; ++a) {
                    for (int k = 0; k < C1; ++k) rows.cls.push_back(h.at(b, a * C1 + k, y, x));
                    for (int j = 0; j < 4; ++j) rows.box.push_back(h.at(b, A * C1 + a * 4 + j, y, x));
                }
    }
    return rows;
}

void Model::add_head_grad(const HeadRows& g, int b, std::vector<Tensor>& grad_heads) const {
    const int C1 = cfg_.num_classes + 1;
    const int A = cfg_.anchors_per_cell();
    std::size_t ci = 0, bi = 0;
    for (auto& h : grad_heads) {
        for (int y = 0; y < h.h(); ++y)
            for (int x = 0; x < h.w(); ++x)
                for (int a = 0; a < A; ++a) {
                    for (int k = 0; k < C1; ++k) h.at(b, a * C1 + k, y, x) += g.cls[ci++];
                    for (int j = 0; j < 4; ++j) h.at(b, A * C1 + a * 4 + j, y, x) += g.box[bi++];
                }
    }
}

std::vector<Detection> Model::detect(const ForwardResult& fr, int b, int image_id, const DecodeConfig& dc) const {
    const HeadRows rows = head_rows(fr, b);
    return decode_detections(rows.cls, rows.box, cfg_.num_classes + 1, anchors_, cfg_.image_hw, cfg_.image_hw,
                             image_id, dc);
}

std::vector<ConvWeights*> parameters(Model& m, bool od, bool omg) {
    std::vector<ConvWeights*> out;
    if (od)
        for (auto& w : m.od) out.push_back(&w);
    if (omg)
        for (auto& w : m.omg) out.push_back(&w);
    return out;
}

namespace {
constexpr const char* kCheckpointMagic = "OMCK";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void Model::save(const std::filesystem::path& path) const {
    ByteWriter w;
    w.magic(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    const std::string js = cfg_.to_json().dump();
    w.u32(static_cast<std::uint32_t>(js.size()));
    w.raw(js.data(), js.size());
    std::vector<std::pair<std::string, const ConvWeights*>> layers;
    const auto oid = od_layer_ids();
    const auto gid = omg_layer_ids();
    for (std::size_t i = 0; i < od.size(); ++i) layers.emplace_back(oid[i], &od[i]);
    for (std::size_t i = 0; i < omg.size(); ++i) layers.emplace_back(gid[i], &omg[i]);
    w.u32(static_cast<std::uint32_t>(layers.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, cw] : layers) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.u64(offset);
        w.u64(cw->param_count());
        offset += cw->param_count();
    }
    w.u64(offset);
    for (const auto& [name, cw] : layers) {
        w.floats(cw->kernel.data());
        w.floats(cw->bias);
    }
    w.save(path);
}

Model Model::load(const std::filesystem::path& path) {
    ByteReader r = ByteReader::load(path);
    r.expect_magic(kCheckpointMagic);
    const std::size_t vpos = r.offset();
    if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version", vpos);
    const std::uint32_t jlen = r.u32();
    const std::size_t jpos = r.offset();
    const auto jb = r.bytes(jlen);
    nlohmann::json j = nlohmann::json::parse(jb.begin(), jb.end(), nullptr, false);
    if (j.is_discarded()) throw FormatError("checkpoint config is not valid JSON", jpos);
    Model m(ModelConfig::from_json(j));
    std::vector<ConvWeights*> layers = parameters(m, true, true);
    auto names = m.od_layer_ids();
    const auto gid = m.omg_layer_ids();
    names.insert(names.end(), gid.begin(), gid.end());
    const std::size_t cpos = r.offset();
    if (r.u32() != layers.size()) throw FormatError("checkpoint layer count mismatch", cpos);
    std::uint64_t expect_offset = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::size_t pos = r.offset();
        const std::uint32_t len = r.u32();
        const auto nb = r.bytes(len);
        const std::string name(nb.begin(), nb.end());
        const std::uint64_t off = r.u64();
        const std::uint64_t cnt = r.u64();
        if (name != names[i] || off != expect_offset || cnt != layers[i]->param_count()) {
            throw FormatError("checkpoint layer table entry '" + name + "' does not match the config", pos);
        }
        expect_offset += cnt;
    }
    const std::size_t tpos = r.offset();
    if (r.u64() != expect_offset) throw FormatError("checkpoint parameter count mismatch", tpos);
    for (auto* cw : layers) {
        r.floats(cw->kernel.data());
        r.floats(cw->bias);
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
    return m;
}

bool Model::operator==(const Model& o) const {
    if (cfg_.to_json() != o.cfg_.to_json() || od.size() != o.od.size() || omg.size() != o.omg.size()) return false;
    auto same = [](const ConvWeights& a, const ConvWeights& b) { return a.kernel == b.kernel && a.bias == b.bias; };
    for (std::size_t i = 0; i < od.size(); ++i)
        if (!same(od[i], o.od[i])) return false;
    for (std::size_t i = 0; i < omg.size(); ++i)
        if (!same(omg[i], o.omg[i])) return false;
    return true;
}

double grad_norm(const std::vector<const ConvGrads*>& grads) {
    double s = 0;
    for (const auto* g : grads) {
        for (float v : g->grad_kernel.data()) s += static_cast<double>(v) * v;
        for (float v : g->grad_bias) s += static_cast<double>(v) * v;
    }
    return std::sqrt(s);
}

void Sgd::step(const std::vector<ConvWeights*>& params, const std::vector<const ConvGrads*>& grads, float lr,
               float scale) {
    if (params.size() != grads.size()) throw InternalError("parameter/gradient list mismatch");
    if (velocity_.empty()) {
        for (const auto* p : params) velocity_.emplace_back(p->param_count(), 0.0f);
    }
    if (velocity_.size() != params.size()) throw InternalError("optimizer parameter set changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
        ConvWeights& w = *params[i];
        const ConvGrads& g = *grads[i];
        auto& v = velocity_[i];
        auto kern = w.kernel.data();
        const auto gk = g.grad_kernel.data();
        for (std::size_t j = 0; j < kern.size(); ++j) {
            const float grad = gk[j] * scale + weight_decay_ * kern[j];
            v[j] = momentum_ * v[j] + grad;
            kern[j] -= lr * v[j];
        }
        const std::size_t off = kern.size();
        for (std::size_t j = 0; j < w.bias.size(); ++j) {
            const float grad = g.grad_bias[j] * scale;
            v[off + j] = momentum_ * v[off + j] + grad;
            w.bias[j] -= lr * v[off + j];
        }
    }
}

}  // namespace objmask
