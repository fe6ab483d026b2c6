#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "objmask/errors.hpp"
#include "objmask/experiment.hpp"
#include "objmask/model.hpp"
#include "support.hpp"

using namespace objmask;
using namespace testing;

namespace {

std::vector<SyntheticScene> scenes(std::size_t n, std::uint64_t seed) {
    SceneConfig cfg;
    cfg.min_objects = 1;
    return generate_dataset(cfg, n, seed);
}

Tensor images_of(const std::vector<SyntheticScene>& s) {
    std::vector<const SyntheticScene*> p;
    for (const auto& x : s) p.push_back(&x);
    return stack_images(p);
}

BinaryMask gt_masks(const std::vector<SyntheticScene>& s, int dil = 1) {
    std::vector<BinaryMask> m;
    for (const auto& x : s) m.push_back(dil > 1 ? dilate(gt_instance_mask(x), dil) : gt_instance_mask(x));
    return stack_masks(m);
}

double image_loss(const Model& model, const SyntheticScene& s) {
    const Tensor img = images_of({s});
    ForwardResult fr = model.forward(img, {});
    HeadRows rows = model.head_rows(fr, 0);
    const auto boxes = s.boxes();
    const auto labels = s.labels();
    MatchResult m = match_anchors(model.anchors().anchors, boxes, labels);
    return detection_loss(rows.cls, rows.box, model.config().num_classes + 1, m).loss;
}

// Detection-loss gradients for every image of the batch.
std::vector<Tensor> head_grads(const Model& model, const ForwardResult& fr, const std::vector<SyntheticScene>& s) {
    std::vector<Tensor> g;
    for (const auto& h : fr.heads) g.emplace_back(h.shape());
    for (std::size_t b = 0; b < s.size(); ++b) {
        const auto boxes = s[b].boxes();
        const auto labels = s[b].labels();
        MatchResult m = match_anchors(model.anchors().anchors, boxes, labels);
        HeadRows rows = model.head_rows(fr, static_cast<int>(b));
        DetectionLoss dl = detection_loss(rows.cls, rows.box, model.config().num_classes + 1, m);
        model.add_head_grad({dl.grad_cls, dl.grad_box}, static_cast<int>(b), g);
    }
    return g;
}

double abs_sum(const std::vector<ConvGrads>& g) {
    double s = 0;
    for (const auto& c : g) {
        for (float v : c.grad_kernel.data()) s += std::abs(v);
        for (float v : c.grad_bias) s += std::abs(v);
    }
    return s;
}

}  // namespace

TEST_CASE("model config") {
    ModelConfig cfg;
    CHECK(cfg.head_channels() == 24);
    CHECK(cfg.head_strides() == std::vector<int>{8, 16});
    CHECK(cfg.omg_input_hw() == 48);
    ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());

    auto j = cfg.to_json();
    j["image_hw"] = 90;
    CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);
    j = cfg.to_json();
    j["argmax"]["beta"] = -1;
    CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);
    j = cfg.to_json();
    j["bogus_key"] = 1;
    CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);

    Model m(cfg);
    CHECK(m.od_layer_ids().size() == 8);
    CHECK(m.omg_layer_ids().back() == "omg.logits");
    // OMG compute stays small relative to the detector.
    ConvSpec spec;
    double omg = 0, od = 0;
    const Tensor img({1, 3, 96, 96}, 0.5f);
    ForwardOptions fo;
    fo.mode = ForwardMode::E2e;
    fo.observe = true;
    ForwardResult fr = m.forward(img, fo);
    for (const auto& o : fr.observations[0]) (o.group == "omg" ? omg : od) += static_cast<double>(mac(o.spec));
    CHECK(omg / od <= 0.10);
}

TEST_CASE("pipeline masking semantics") {
    Model model(ModelConfig{});
    auto s = scenes(3, 50);
    const Tensor img = images_of(s);
    ForwardResult van = model.forward(img, {});

    SUBCASE("all-ones mask equals vanilla bit-for-bit") {
        BinaryMask ones(3, 96, 96, 1, 1);
        ForwardOptions fo{ForwardMode::Pipeline, &ones};
        ForwardResult fr = model.forward(img, fo);
        for (std::size_t l = 0; l < van.heads.size(); ++l) CHECK(fr.heads[l] == van.heads[l]);
    }
    SUBCASE("all-zero mask zeroes every detector conv input") {
        BinaryMask zeros(3, 96, 96);
        ForwardOptions fo{ForwardMode::Pipeline, &zeros};
        fo.observe = true;
        ForwardResult fr = model.forward(img, fo);
        MacAccumulator acc;
        for (const auto& o : fr.observations) acc.add_image(o);
        MacReport r = acc.finish();
        CHECK(r.od_mac_star == 0.0);
        CHECK(r.od_mac > 0.0);
        // Heads emit the bias everywhere, identical across images.
        for (std::size_t l = 0; l < fr.heads.size(); ++l)
            for (int b = 1; b < 3; ++b)
                for (int c = 0; c < fr.heads[l].c(); ++c)
                    CHECK(std::equal(fr.heads[l].plane(b, c), fr.heads[l].plane(b, c) + fr.heads[l].shape().plane(),
                                     fr.heads[l].plane(0, c)));
    }
    SUBCASE("background pixels do not affect detections") {
        BinaryMask m = gt_masks(s, 5);
        Tensor noisy = img;
        Rng rng(9);
        for (int b = 0; b < 3; ++b)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < 96; ++y)
                    for (int x = 0; x < 96; ++x)
                        if (!m.at(b, y, x)) noisy.at(b, c, y, x) = static_cast<float>(rng.uniform());
        ForwardOptions fo{ForwardMode::Pipeline, &m};
        ForwardResult a = model.forward(img, fo), b = model.forward(noisy, fo);
        for (std::size_t l = 0; l < a.heads.size(); ++l) CHECK(a.heads[l] == b.heads[l]);
        for (int i = 0; i < 3; ++i) {
            auto da = model.detect(a, i, i), db = model.detect(b, i, i);
            REQUIRE(da.size() == db.size());
            for (std::size_t k = 0; k < da.size(); ++k) {
                CHECK(da[k].box == db[k].box);
                CHECK(da[k].score == db[k].score);
            }
        }
    }
    SUBCASE("masked conv inputs are zero at mask-0 positions") {
        BinaryMask m = gt_masks(s, 5);
        ForwardOptions fo{ForwardMode::Pipeline, &m};
        fo.observe = true;
        ForwardResult fr = model.forward(img, fo);
        for (const auto& per : fr.observations)
            for (const auto& o : per) {
                if (o.group != "od") continue;
                CHECK(o.zeros >= static_cast<std::uint64_t>(o.mask_zero_fraction * static_cast<double>(o.input_elems) + 0.5));
                CHECK(mac_star_count(o.spec, o.zeros) <= static_cast<double>(mac(o.spec)));
            }
    }
    SUBCASE("invalid requests") {
        ForwardOptions fo{ForwardMode::Pipeline, nullptr};
        CHECK_THROWS_AS(model.forward(img, fo), ConfigError);
        BinaryMask wrong(3, 48, 48, 1, 1);
        fo.mask = &wrong;
        CHECK_THROWS_AS(model.forward(img, fo), ConfigError);
        BinaryMask ok(3, 96, 96, 1, 1);
        fo.mask = &ok;
        fo.exec = Execution::Sparse;
        fo.training = true;
        LayerTape tape;
        CHECK_THROWS_AS(model.forward(img, fo, &tape), ConfigError);
        CHECK_THROWS_AS(model.forward(Tensor({1, 3, 64, 64}), {}), ConfigError);
    }
}

TEST_CASE("sparse execution equals dense") {
    Model model(ModelConfig{});
    auto s = scenes(4, 60);
    const Tensor img = images_of(s);
    BinaryMask m = gt_masks(s, 5);
    ForwardOptions dense{ForwardMode::Pipeline, &m};
    ForwardOptions sparse = dense;
    sparse.exec = Execution::Sparse;
    ForwardResult a = model.forward(img, dense), b = model.forward(img, sparse);
    for (std::size_t l = 0; l < a.heads.size(); ++l) CHECK(a.heads[l] == b.heads[l]);
    CHECK_FALSE(b.sparse_layers.empty());
    for (const auto& r : estimate_speedup(b.sparse_layers)) CHECK(r.mac_ratio <= 1.0);

    EquivReport rep = equivalence_check(model, img, m);
    CHECK(rep.images == 4);
    CHECK(rep.layers.size() == b.sparse_layers.size());
    CHECK(rep.max_layer_deviation <= 1e-5);
    CHECK(rep.max_output_deviation <= 1e-5);
    for (const auto& l : rep.layers) CHECK(l.active_tiles <= l.total_tiles);

    EquivReport none = equivalence_check(model, img, BinaryMask(4, img.h(), img.w()));
    for (const auto& l : none.layers) CHECK(l.active_tiles == 0);
    CHECK(none.max_output_deviation <= 1e-5);

    EquivReport twice = rep;
    twice.merge(none);
    CHECK(twice.images == 8);
    CHECK(twice.max_layer_deviation == std::max(rep.max_layer_deviation, none.max_layer_deviation));
}

TEST_CASE("end-to-end mode") {
    ModelConfig cfg;
    auto s = scenes(2, 70);
    const Tensor img = images_of(s);

    SUBCASE("all-foreground OMG equals vanilla") {
        Model model(cfg);
        ConvWeights& logits = model.omg.back();
        logits.kernel.fill(0.0f);
        logits.bias = {-10.0f, 10.0f};
        ForwardOptions fo;
        fo.mode = ForwardMode::E2e;
        ForwardResult e = model.forward(img, fo), v = model.forward(img, {});
        for (std::size_t l = 0; l < v.heads.size(); ++l) CHECK(e.heads[l] == v.heads[l]);
        CHECK(e.mask.count_zeros() == 0);
    }

    SUBCASE("gradient reaches the OMG through the surrogate only") {
        for (const ArgmaxMode mode : {ArgmaxMode::Surrogate, ArgmaxMode::Soft, ArgmaxMode::Hard}) {
            ModelConfig c = cfg;
            c.argmax.mode = mode;
            c.lambda_omg = 0.0f;
            Model model(c);
            ForwardOptions fo;
            fo.mode = ForwardMode::E2e;
            fo.training = true;
            LayerTape tape;
            ForwardResult fr = model.forward(img, fo, &tape);
            ParamGrads pg = model.backward(head_grads(model, fr, s), nullptr, fo, tape);
            CHECK(tape.empty());
            CHECK(abs_sum(pg.od) > 0.0);
            if (mode == ArgmaxMode::Hard)
                CHECK(abs_sum(pg.omg) == 0.0);
            else
                CHECK(abs_sum(pg.omg) > 0.0);
        }
    }

    SUBCASE("tape misuse is detected") {
        Model model(cfg);
        ForwardOptions fo;
        fo.mode = ForwardMode::E2e;
        fo.training = true;
        LayerTape tape;
        ForwardResult fr = model.forward(img, fo, &tape);
        tape.pop(tape.size() > 0 ? "od.head16" : "");
        CHECK_THROWS_AS(model.backward(head_grads(model, fr, s), nullptr, fo, tape), InternalError);
    }
}

TEST_CASE("optimizer behaviour") {
    auto s = scenes(4, 80);
    SUBCASE("lr 0 leaves parameters unchanged") {
        ModelConfig cfg;
        cfg.train.lr = 0.0f;
        cfg.train.batch = 2;
        Model model(cfg);
        const Model before = model;
        TrainOptions opt;
        opt.steps = 3;
        train(model, s, opt);
        CHECK(model == before);

        TrainOptions e2e;
        e2e.steps = 2;
        e2e.source = MaskSource::parse("omg_e2e");
        train(model, s, e2e);
        CHECK(model == before);
    }
    SUBCASE("one small step lowers the loss on its example") {
        Model model(ModelConfig{});
        const std::vector<SyntheticScene> one{s[0]};
        const double l0 = image_loss(model, s[0]);
        ForwardOptions fo;
        fo.training = true;
        LayerTape tape;
        ForwardResult fr = model.forward(images_of(one), fo, &tape);
        ParamGrads pg = model.backward(head_grads(model, fr, one), nullptr, fo, tape);
        std::vector<const ConvGrads*> gp;
        for (const auto& g : pg.od) gp.push_back(&g);
        Sgd sgd(0.0f, 0.0f);
        sgd.step(parameters(model, true, false), gp, 1e-4f);
        CHECK(image_loss(model, s[0]) < l0);
    }
    SUBCASE("training is deterministic") {
        ModelConfig cfg;
        cfg.train.batch = 2;
        TrainOptions opt;
        opt.steps = 3;
        Model a(cfg), b(cfg);
        auto la = train(a, s, opt), lb = train(b, s, opt);
        CHECK(a == b);
        CHECK(la.back().det_loss == lb.back().det_loss);
    }
    SUBCASE("divergence aborts") {
        ModelConfig cfg;
        cfg.train.batch = 2;
        cfg.train.grad_clip = 0.0f;
        cfg.train.warmup_steps = 0;
        cfg.train.lr = 1e12f;
        Model model(cfg);
        TrainOptions opt;
        opt.steps = 20;
        CHECK_THROWS_AS(train(model, s, opt), DivergenceError);
    }
    SUBCASE("schedule") {
        TrainSchedule ts;
        ts.warmup_steps = 10;
        ts.lr = 1.0f;
        CHECK(ts.lr_at(0, 120) == doctest::Approx(0.1));
        CHECK(ts.lr_at(50, 120) == 1.0f);
        CHECK(ts.lr_at(80, 120) == doctest::Approx(0.1));
        CHECK(ts.lr_at(110, 120) == doctest::Approx(0.01));
    }
}

TEST_CASE("checkpoints") {
    ModelConfig cfg;
    cfg.init_seed = 5;
    Model model(cfg);
    model.od[2].kernel[7] = 0.125f;
    const auto path = std::filesystem::temp_directory_path() / "objmask_test.ckpt";
    model.save(path);
    Model back = Model::load(path);
    CHECK(back == model);
    CHECK(back.config().to_json() == cfg.to_json());

    Model other(ModelConfig{});
    CHECK_FALSE(other == model);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 4);
    CHECK_THROWS_AS(Model::load(path), FormatError);
    {
        std::ofstream o(path, std::ios::binary);
        o << "NOPE";
    }
    CHECK_THROWS_AS(Model::load(path), FormatError);
    std::filesystem::remove(path);
}
