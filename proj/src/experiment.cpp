#include "objmask/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "objmask/argmax.hpp"
#include "objmask/errors.hpp"
#include "objmask/json_keys.hpp"
#include "objmask/rng.hpp"

namespace objmask {

ForwardMode MaskSource::mode() const {
    switch (kind) {
        case MaskKind::Vanilla: return ForwardMode::Vanilla;
        case MaskKind::OmgE2e: return ForwardMode::E2e;
        default: return ForwardMode::Pipeline;
    }
}

std::string to_string(MaskKind k) {
    switch (k) {
        case MaskKind::Vanilla: return "vanilla";
        case MaskKind::GtInstance: return "gt_instance";
        case MaskKind::GtBox: return "gt_box";
        case MaskKind::Random: return "random";
        case MaskKind::Spectral: return "spectral";
        case MaskKind::OmgPipeline: return "omg_pipeline";
        case MaskKind::OmgE2e: return "omg_e2e";
    }
    return "?";
}

std::string MaskSource::name() const {
    std::ostringstream os;
    os << to_string(kind);
    if (kind == MaskKind::Random) os << "(" << random_p << ")";
    if (kind == MaskKind::Spectral) os << "(" << saliency.threshold << ")";
    return os.str();
}

MaskSource MaskSource::parse(const std::string& s) {
    MaskSource m;
    std::string head = s;
    std::optional<double> arg;
    const auto open = s.find('(');
    if (open != std::string::npos) {
        if (s.back() != ')') throw ConfigError("malformed mask source '" + s + "'");
        head = s.substr(0, open);
        try {
            arg = std::stod(s.substr(open + 1, s.size() - open - 2));
        } catch (const std::exception&) {
            throw ConfigError("malformed mask source argument in '" + s + "'");
        }
    }
    if (head == "vanilla") m.kind = MaskKind::Vanilla;
    else if (head == "gt_instance") m.kind = MaskKind::GtInstance;
    else if (head == "gt_box") m.kind = MaskKind::GtBox;
    else if (head == "random") m.kind = MaskKind::Random;
    else if (head == "spectral") m.kind = MaskKind::Spectral;
    else if (head == "omg_pipeline") m.kind = MaskKind::OmgPipeline;
    else if (head == "omg_e2e") m.kind = MaskKind::OmgE2e;
    else throw ConfigError("unknown mask source '" + s + "'");
    if (arg) {
        if (m.kind == MaskKind::Random) m.random_p = *arg;
        else if (m.kind == MaskKind::Spectral) m.saliency.threshold = *arg;
        else throw ConfigError("mask source '" + head + "' takes no argument");
    }
    if (!(m.random_p >= 0.0 && m.random_p <= 1.0)) throw ConfigError("random mask p must be in [0,1]");
    m.saliency.validate();
    return m;
}

BinaryMask scene_mask(const MaskSource& src, const SyntheticScene& scene, std::uint64_t seed) {
    switch (src.kind) {
        case MaskKind::GtInstance: return gt_instance_mask(scene);
        case MaskKind::GtBox: return gt_box_mask(scene);
        case MaskKind::Random: return random_mask(scene.h(), scene.w(), src.random_p, seed);
        case MaskKind::Spectral: return spectral_residual_mask(scene.image, src.saliency);
        case MaskKind::Vanilla: return BinaryMask(1, scene.h(), scene.w(), 1, 1);
        default: throw ConfigError("mask source " + src.name() + " is not a per-scene generator");
    }
}

BinaryMask omg_mask(const Model& m, const Tensor& images) {
    const Tensor logits = m.omg_forward(images, nullptr, nullptr);
    return sg_argmax_forward(logits, m.config().argmax);
}

BinaryMask omg_target(const SyntheticScene& scene, int dilation_kernel) {
    return dilate(gt_instance_mask(scene), dilation_kernel);
}

Tensor stack_images(const std::vector<const SyntheticScene*>& scenes) {
    std::vector<Tensor> items;
    items.reserve(scenes.size());
    for (const auto* s : scenes) items.push_back(s->image);
    return stack(items);
}

std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
    std::ostringstream os;
    os.precision(8);
    os << "step,det_loss,omg_loss,lr,map,mac_star,fg_ratio,instance_recall\n";
    auto opt = [&](const std::optional<double>& v) {
        os << ',';
        if (v) os << *v;
    };
    for (const auto& r : rows) {
        os << r.step << ',' << r.det_loss << ',' << r.omg_loss << ',' << r.lr;
        opt(r.map);
        opt(r.mac_star);
        opt(r.fg_ratio);
        opt(r.instance_recall);
        os << '\n';
    }
    return os.str();
}

int default_steps(const ModelConfig& cfg, const TrainOptions& opt) {
    if (opt.steps >= 0) return opt.steps;
    if (opt.target == TrainTarget::Detector && opt.source.kind == MaskKind::OmgE2e) {
        return static_cast<int>(std::lround(cfg.train.steps * cfg.train.e2e_step_factor));
    }
    return cfg.train.steps;
}

namespace {

// Epoch-wise shuffled index stream.
class Sampler {
public:
    Sampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}
    std::size_t next() {
        if (pos_ == order_.size()) reshuffle();
        return order_[pos_++];
    }

private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t i = n_; i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i - 1)));
            std::swap(order_[i - 1], order_[j]);
        }
        pos_ = 0;
    }
    std::size_t n_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

std::vector<const ConvGrads*> grad_ptrs(const std::vector<ConvGrads>& g) {
    std::vector<const ConvGrads*> out;
    for (const auto& x : g) out.push_back(&x);
    return out;
}

void check_finite(double v, const char* what, int step) {
    if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " is not finite", step);
}

}  // namespace

std::vector<TrainLogRow> train(Model& model, const std::vector<SyntheticScene>& data, const TrainOptions& opt) {
    if (data.empty()) throw ConfigError("training dataset is empty");
    const ModelConfig& cfg = model.config();
    const TrainSchedule& ts = cfg.train;
    const int total = default_steps(cfg, opt);
    const bool omg_only = opt.target == TrainTarget::OmgOnly;
    const ForwardMode mode = omg_only ? ForwardMode::E2e : opt.source.mode();
    if (!omg_only && opt.source.kind == MaskKind::OmgPipeline && !opt.mask_model) {
        throw ConfigError("omg_pipeline training needs a mask model");
    }

    std::vector<ConvWeights*> params;
    if (omg_only) {
        params = parameters(model, false, true);
    } else {
        params = parameters(model, true, mode == ForwardMode::E2e);
    }
    Sgd sgd(ts.momentum, ts.weight_decay);
    Sampler sampler(data.size(), mix_seed(ts.seed, 0x5EED));
    Rng aug(mix_seed(ts.seed, 0xF11B));

    std::vector<TrainLogRow> log;
    double det_acc = 0, omg_acc = 0;
    int acc_n = 0;
    LayerTape tape;

    for (int step = 0; step < total; ++step) {
        const float lr = ts.lr_at(step, total);
        std::vector<SyntheticScene> batch;
        batch.reserve(static_cast<std::size_t>(ts.batch));
        for (int i = 0; i < ts.batch; ++i) {
            const SyntheticScene& s = data[sampler.next()];
            const bool flip = ts.flip && aug.bernoulli(0.5);
            batch.push_back(flip ? flip_horizontal(s) : s);
        }
        std::vector<const SyntheticScene*> ptrs;
        for (const auto& s : batch) ptrs.push_back(&s);
        const Tensor images = stack_images(ptrs);
        const int n = images.n();

        std::optional<BinaryMask> target;
        if (mode == ForwardMode::E2e) {
            std::vector<BinaryMask> t;
            for (const auto& s : batch) t.push_back(omg_target(s, cfg.omg_loss.dilation_kernel));
            target = stack_masks(t);
        }

        double det_loss = 0, omg_loss = 0;
        std::vector<ConvGrads> grads;
        tape.clear();
        if (omg_only) {
            const Tensor logits = model.omg_forward(images, &tape, nullptr);
            LossGrad lg = weighted_mask_loss(logits, *target, cfg.omg_loss);
            omg_loss = lg.loss;
            check_finite(omg_loss, "mask loss", step);
            grads = model.omg_backward(lg.grad, tape);
        } else {
            std::optional<BinaryMask> mask;
            if (mode == ForwardMode::Pipeline) {
                if (opt.source.kind == MaskKind::OmgPipeline) {
                    mask = omg_mask(*opt.mask_model, images);
                } else {
                    std::vector<BinaryMask> ms;
                    for (int b = 0; b < n; ++b) {
                        ms.push_back(scene_mask(opt.source, batch[static_cast<std::size_t>(b)],
                                                mix_seed(mix_seed(ts.seed, static_cast<std::uint64_t>(step)), static_cast<std::uint64_t>(b))));
                    }
                    mask = stack_masks(ms);
                }
            }
            ForwardOptions fo;
            fo.mode = mode;
            fo.mask = mask ? &*mask : nullptr;
            fo.training = true;
            ForwardResult fr = model.forward(images, fo, &tape);

            std::vector<Tensor> grad_heads;
            for (const auto& h : fr.heads) grad_heads.emplace_back(h.shape());
            const float inv_n = 1.0f / static_cast<float>(n);
            for (int b = 0; b < n; ++b) {
                const auto& scene = batch[static_cast<std::size_t>(b)];
                const std::vector<Box> boxes = scene.boxes();
                const std::vector<int> labels = scene.labels();
                const MatchResult match = match_anchors(model.anchors().anchors, boxes, labels);
                HeadRows rows = model.head_rows(fr, b);
                DetectionLoss dl = detection_loss(rows.cls, rows.box, cfg.num_classes + 1, match);
                det_loss += dl.loss * inv_n;
                for (auto& v : dl.grad_cls) v *= inv_n;
                for (auto& v : dl.grad_box) v *= inv_n;
                model.add_head_grad({std::move(dl.grad_cls), std::move(dl.grad_box)}, b, grad_heads);
            }
            check_finite(det_loss, "detection loss", step);

            Tensor grad_aux;
            if (mode == ForwardMode::E2e && cfg.lambda_omg > 0.0f) {
                LossGrad lg = weighted_mask_loss(fr.omg_logits, *target, cfg.omg_loss);
                omg_loss = lg.loss;
                check_finite(omg_loss, "mask loss", step);
                for (auto& v : lg.grad.vec()) v *= cfg.lambda_omg;
                grad_aux = std::move(lg.grad);
            }
            ParamGrads pg = model.backward(grad_heads, grad_aux.empty() ? nullptr : &grad_aux, fo, tape);
            grads = std::move(pg.od);
            if (mode == ForwardMode::E2e) {
                for (auto& g : pg.omg) grads.push_back(std::move(g));
            }
        }

        const auto gp = grad_ptrs(grads);
        const double norm = grad_norm(gp);
        check_finite(norm, "gradient norm", step);
        float scale = 1.0f;
        if (ts.grad_clip > 0.0f && norm > ts.grad_clip) scale = static_cast<float>(ts.grad_clip / norm);
        sgd.step(params, gp, lr, scale);

        det_acc += det_loss;
        omg_acc += omg_loss;
        ++acc_n;
        const bool last = step + 1 == total;
        const bool log_now = (ts.log_every > 0 && (step + 1) % ts.log_every == 0) || last;
        const bool eval_now = opt.eval_set && !opt.eval_set->empty() && ts.eval_every > 0 &&
                              ((step + 1) % ts.eval_every == 0 || last);
        if (log_now || eval_now) {
            TrainLogRow row;
            row.step = step + 1;
            row.det_loss = det_acc / acc_n;
            row.omg_loss = omg_acc / acc_n;
            row.lr = lr;
            if (eval_now) {
                if (omg_only) {
                    const MaskQuality q = evaluate_omg_masks(model, *opt.eval_set);
                    row.fg_ratio = q.fg_ratio;
                    row.instance_recall = q.recall.overall();
                } else {
                    EvalOptions eo;
                    eo.source = opt.source;
                    eo.mask_model = opt.mask_model;
                    eo.seed = ts.seed;
                    const EvalResult er = evaluate(model, *opt.eval_set, eo);
                    row.map = er.ap.map;
                    row.mac_star = er.report.total_mac_star;
                    row.fg_ratio = er.fg_ratio;
                    row.instance_recall = er.recall.overall();
                }
            }
            det_acc = omg_acc = 0;
            acc_n = 0;
            if (opt.on_log) opt.on_log(row);
            log.push_back(std::move(row));
        }
    }
    return log;
}

EvalResult evaluate(const Model& model, const std::vector<SyntheticScene>& data, const EvalOptions& opt) {
    if (data.empty()) throw ConfigError("evaluation dataset is empty");
    if (opt.batch < 1) throw ConfigError("evaluation batch must be >= 1");
    const ForwardMode mode = opt.source.mode();
    if (opt.source.kind == MaskKind::OmgPipeline && !opt.mask_model) {
        throw ConfigError("omg_pipeline evaluation needs a mask model");
    }
    EvalResult res;
    MacAccumulator acc;
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    double fg_sum = 0;
    std::vector<SpeedupRow> speed_sum;
    std::size_t speed_images = 0;

    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(opt.batch)) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(opt.batch));
        std::vector<const SyntheticScene*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&data[i]);
        const Tensor images = stack_images(ptrs);
        const int n = images.n();

        std::optional<BinaryMask> mask;
        std::vector<std::vector<LayerObservation>> omg_obs(static_cast<std::size_t>(n));
        if (mode == ForwardMode::Pipeline) {
            if (opt.source.kind == MaskKind::OmgPipeline) {
                const Tensor logits = opt.mask_model->omg_forward(images, nullptr, &omg_obs);
                mask = sg_argmax_forward(logits, opt.mask_model->config().argmax);
            } else {
                std::vector<BinaryMask> ms;
                for (std::size_t i = start; i < end; ++i) {
                    ms.push_back(scene_mask(opt.source, data[i], mix_seed(opt.seed, i)));
                }
                mask = stack_masks(ms);
            }
        }
        ForwardOptions fo;
        fo.mode = mode;
        fo.mask = mask ? &*mask : nullptr;
        fo.exec = opt.exec;
        fo.observe = true;
        ForwardResult fr = model.forward(images, fo);

        BinaryMask applied = mode == ForwardMode::Vanilla ? BinaryMask(n, images.h(), images.w(), 1, 1)
                                                          : BinaryMask::from_tensor(fr.mask, 0.5f, 1);
        for (int b = 0; b < n; ++b) {
            const std::size_t idx = start + static_cast<std::size_t>(b);
            const SyntheticScene& s = data[idx];
            auto d = model.detect(fr, b, static_cast<int>(idx), opt.decode);
            dets.insert(dets.end(), d.begin(), d.end());
            gts.push_back({s.boxes(), s.labels()});

            std::vector<LayerObservation> obs = std::move(omg_obs[static_cast<std::size_t>(b)]);
            auto& od_obs = fr.observations[static_cast<std::size_t>(b)];
            obs.insert(obs.end(), od_obs.begin(), od_obs.end());
            acc.add_image(obs);

            const BinaryMask mb = applied.item(b);
            fg_sum += fg_ratio(mb);
            std::vector<BinaryMask> inst;
            for (const auto& in : s.instances) inst.push_back(in.mask);
            res.recall.merge(instance_recall(mb, inst, opt.binning));
        }
        if (opt.exec == Execution::Sparse) {
            const auto rows = estimate_speedup(fr.sparse_layers);
            if (speed_sum.empty()) {
                speed_sum = rows;
                for (auto& r : speed_sum) {
                    r.mac_ratio *= n;
                    r.gather_ratio *= n;
                }
            } else {
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    speed_sum[i].active_tiles += rows[i].active_tiles;
                    speed_sum[i].total_tiles += rows[i].total_tiles;
                    speed_sum[i].mac_ratio += rows[i].mac_ratio * n;
                    speed_sum[i].gather_ratio += rows[i].gather_ratio * n;
                }
            }
            speed_images += static_cast<std::size_t>(n);
        }
    }
    for (auto& r : speed_sum) {
        r.mac_ratio /= static_cast<double>(speed_images);
        r.gather_ratio /= static_cast<double>(speed_images);
    }
    res.speedup = std::move(speed_sum);
    res.images = data.size();
    res.ap = evaluate_ap(dets, gts, model.config().num_classes);
    res.report = acc.finish();
    res.fg_ratio = fg_sum / static_cast<double>(data.size());
    if (opt.keep_detections) res.detections = std::move(dets);
    return res;
}

MaskQuality evaluate_omg_masks(const Model& model, const std::vector<SyntheticScene>& data,
                               const RecallBinning& binning, int batch) {
    if (data.empty()) throw ConfigError("evaluation dataset is empty");
    MaskQuality q;
    double fg = 0;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch));
        std::vector<const SyntheticScene*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&data[i]);
        const BinaryMask m = omg_mask(model, stack_images(ptrs));
        for (std::size_t i = start; i < end; ++i) {
            const BinaryMask mb = m.item(static_cast<int>(i - start));
            fg += fg_ratio(mb);
            std::vector<BinaryMask> inst;
            for (const auto& in : data[i].instances) inst.push_back(in.mask);
            q.recall.merge(instance_recall(mb, inst, binning));
        }
    }
    q.fg_ratio = fg / static_cast<double>(data.size());
    return q;
}

namespace {

nlohmann::ordered_json num(double v) {
    if (!std::isfinite(v)) return nullptr;
    return v;
}

}  // namespace

nlohmann::ordered_json eval_json(const std::string& run, const EvalOptions& opt, const EvalResult& r) {
    nlohmann::ordered_json j;
    j["run"] = run;
    j["mode"] = to_string(opt.source.mode());
    j["mask_source"] = opt.source.name();
    j["execution"] = to_string(opt.exec);
    j["images"] = r.images;
    j["map"] = num(r.ap.map);
    auto ap = nlohmann::ordered_json::array();
    for (double v : r.ap.ap) ap.push_back(num(v));
    j["ap"] = ap;
    j["mac"] = r.report.total_mac;
    j["mac_star"] = {{"sum", r.report.total_mac_star}, {"omg", r.report.omg_mac_star}, {"od", r.report.od_mac_star}};
    j["od_mac"] = r.report.od_mac;
    j["omg_mac"] = r.report.omg_mac;
    j["mean_zero_fraction"] = r.report.mean_zero_fraction;
    j["zeros_by_mask_fraction"] = r.report.zeros_by_mask_fraction;
    j["fg_ratio"] = r.fg_ratio;
    nlohmann::ordered_json rec;
    auto bins = nlohmann::ordered_json::array();
    RecallBinning binning = opt.binning;
    for (std::size_t b = 0; b < r.recall.total.size(); ++b) {
        bins.push_back({{"bin", binning.label(b)},
                        {"recall", num(r.recall.recall(b))},
                        {"recovered", r.recall.recovered[b]},
                        {"total", r.recall.total[b]}});
    }
    rec["bins"] = bins;
    rec["overall"] = num(r.recall.overall());
    j["instance_recall"] = rec;
    auto blocks = nlohmann::ordered_json::array();
    for (const auto& l : r.report.layers) {
        blocks.push_back({{"layer_id", l.layer_id},
                          {"group", l.group},
                          {"mac", l.mac},
                          {"mac_star", l.mac_star},
                          {"zero_fraction", l.zero_fraction()},
                          {"mask_zero_fraction", l.mask_zero_fraction}});
    }
    j["layers"] = blocks;
    if (!r.speedup.empty()) {
        auto sp = nlohmann::ordered_json::array();
        for (const auto& s : r.speedup) {
            sp.push_back({{"layer_id", s.layer_id},
                          {"active_tiles", s.active_tiles},
                          {"total_tiles", s.total_tiles},
                          {"mac_ratio", s.mac_ratio},
                          {"gather_ratio", s.gather_ratio}});
        }
        j["sparse"] = sp;
    }
    return j;
}

void ExperimentConfig::validate() const {
    if (name.empty()) throw ConfigError("run name must not be empty");
    model.validate();
    if (exec == Execution::Sparse && source.kind == MaskKind::Vanilla) {
        throw ConfigError("sparse execution requires a masked model");
    }
    if (source.kind == MaskKind::OmgPipeline && source.omg_checkpoint.empty()) {
        throw ConfigError("omg_pipeline requires omg_checkpoint");
    }
    if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    reject_unknown_keys(j, c.to_json());
    try {
        c.name = j.value("name", c.name);
        c.train_data = j.value("train_data", std::string());
        c.eval_data = j.value("eval_data", std::string());
        c.output_dir = j.value("output_dir", c.output_dir.string());
        c.checkpoint = j.value("checkpoint", std::string());
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        c.source = MaskSource::parse(j.value("mask_source", std::string("vanilla")));
        c.source.omg_checkpoint = j.value("omg_checkpoint", std::string());
        if (j.contains("saliency")) {
            const auto& s = j.at("saliency");
            c.source.saliency.resize_hw = s.value("resize_hw", c.source.saliency.resize_hw);
            c.source.saliency.smoothing_sigma = s.value("smoothing_sigma", c.source.saliency.smoothing_sigma);
            c.source.saliency.threshold = s.value("threshold", c.source.saliency.threshold);
            c.source.saliency.validate();
        }
        c.exec = parse_execution(j.value("execution", std::string("dense")));
        const std::string target = j.value("target", std::string("detector"));
        if (target == "detector") c.target = TrainTarget::Detector;
        else if (target == "omg") c.target = TrainTarget::OmgOnly;
        else throw ConfigError("unknown train target '" + target + "'");
        c.steps = j.value("steps", c.steps);
        c.eval_batch = j.value("eval_batch", c.eval_batch);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    // The run seed drives initialization, sampling and augmentation.
    c.model.init_seed = c.seed;
    c.model.train.seed = c.seed;
    c.validate();
    return c;
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["train_data"] = train_data.string();
    j["eval_data"] = eval_data.string();
    j["output_dir"] = output_dir.string();
    j["checkpoint"] = checkpoint.string();
    j["mask_source"] = source.name();
    j["omg_checkpoint"] = source.omg_checkpoint.string();
    j["saliency"] = {{"resize_hw", source.saliency.resize_hw},
                     {"smoothing_sigma", source.saliency.smoothing_sigma},
                     {"threshold", source.saliency.threshold}};
    j["execution"] = to_string(exec);
    j["target"] = target == TrainTarget::Detector ? "detector" : "omg";
    j["steps"] = steps;
    j["eval_batch"] = eval_batch;
    j["seed"] = seed;
    j["model"] = model.to_json();
    return j;
}

void EquivReport::merge(const EquivReport& o) {
    if (layers.empty()) {
        layers = o.layers;
    } else {
        if (layers.size() != o.layers.size()) throw InternalError("sparse layer sequence changed between batches");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].max_abs = std::max(layers[i].max_abs, o.layers[i].max_abs);
            layers[i].active_tiles += o.layers[i].active_tiles;
            layers[i].total_tiles += o.layers[i].total_tiles;
        }
    }
    max_layer_deviation = std::max(max_layer_deviation, o.max_layer_deviation);
    max_output_deviation = std::max(max_output_deviation, o.max_output_deviation);
    images += o.images;
}

EquivReport equivalence_check(const Model& model, const Tensor& images, const BinaryMask& mask) {
    ForwardOptions dense;
    dense.mode = ForwardMode::Pipeline;
    dense.mask = &mask;
    ForwardOptions sparse = dense;
    sparse.exec = Execution::Sparse;
    sparse.keep_outputs = true;
    const ForwardResult d = model.forward(images, dense);
    const ForwardResult s = model.forward(images, sparse);

    EquivReport rep;
    rep.images = static_cast<std::size_t>(images.n());
    const auto ids = model.od_layer_ids();
    for (const auto& sl : s.sparse_layers) {
        const auto pos = std::find(ids.begin(), ids.end(), sl.layer_id);
        if (pos == ids.end()) throw InternalError("unknown sparse layer " + sl.layer_id);
        const ConvWeights& w = model.od[static_cast<std::size_t>(pos - ids.begin())];
        const Tensor* in = nullptr;
        const Tensor* out = nullptr;
        for (std::size_t i = 0; i < s.conv_inputs.size(); ++i) {
            if (s.conv_inputs[i].first == sl.layer_id) {
                in = &s.conv_inputs[i].second;
                out = &s.conv_outputs[i].second;
            }
        }
        if (!in) throw InternalError("missing kept output for " + sl.layer_id);
        const Tensor ref = conv2d_forward(*in, w);
        const BinaryMask cover = tiles_to_mask(sl.tiles);
        LayerDeviation dev{sl.layer_id, 0.0, sl.tiles.indices.size(), sl.tiles.total_tiles()};
        const std::size_t plane = ref.shape().plane();
        for (int b = 0; b < ref.n(); ++b) {
            const std::uint8_t* m = cover.data().data() + plane * static_cast<std::size_t>(b);
            for (int c = 0; c < ref.c(); ++c) {
                const float* r = ref.plane(b, c);
                const float* o = out->plane(b, c);
                for (std::size_t i = 0; i < plane; ++i)
                    if (m[i]) dev.max_abs = std::max(dev.max_abs, static_cast<double>(std::abs(r[i] - o[i])));
            }
        }
        rep.max_layer_deviation = std::max(rep.max_layer_deviation, dev.max_abs);
        rep.layers.push_back(dev);
    }
    for (std::size_t l = 0; l < d.heads.size(); ++l)
        for (std::size_t i = 0; i < d.heads[l].size(); ++i)
            rep.max_output_deviation =
                std::max(rep.max_output_deviation, static_cast<double>(std::abs(d.heads[l][i] - s.heads[l][i])));
    return rep;
}

}  // namespace objmask
