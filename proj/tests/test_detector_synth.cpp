#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "objmask/detector.hpp"
#include "objmask/errors.hpp"
#include "objmask/maskgen.hpp"
#include "objmask/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace objmask;
using namespace testing;

using oracle::random_box;

TEST_CASE("iou") {
    const Box a{0, 0, 1, 1};
    CHECK(iou(a, a) == 1.0f);
    CHECK(iou(a, Box{2, 2, 3, 3}) == 0.0f);
    CHECK(iou(a, Box{0.5f, 0, 1.5f, 1}) == doctest::Approx(1.0 / 3));
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        Box p = random_box(rng, 50), q = random_box(rng, 50);
        CHECK(iou(p, q) == doctest::Approx(oracle::iou_d(p, q)).epsilon(1e-5));
        CHECK(iou(p, q) == iou(q, p));
    }
}

TEST_CASE("anchor grid") {
    AnchorGrid g = AnchorGrid::build(96, 96, {8, 16}, {0.25f, 0.5f});
    CHECK(g.size() == 3u * (12 * 12 + 6 * 6));
    CHECK(g.level_offset[1] == 3u * 144);
    for (const Box& b : g.anchors) {
        CHECK(b.valid());
        CHECK(b.x1 >= 0);
        CHECK(b.y2 <= 96);
    }
    // First anchor of the first cell is the square one, centred at (4, 4), clipped.
    CHECK(g.anchors[0] == Box{0, 0, 16, 16});
    const Box sq = g.anchors[3 * (5 * 12 + 5)];
    CHECK(sq == Box{32, 32, 56, 56});
    const Box tall = g.anchors[3 * (5 * 12 + 5) + 1];
    CHECK(tall.height() / tall.width() == doctest::Approx(2.0));
    CHECK(tall.area() == doctest::Approx(sq.area()).epsilon(1e-4));
}

TEST_CASE("box encoding round trips") {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        Box a = random_box(rng, 96), g = random_box(rng, 96);
        Box d = decode_box(encode_box(g, a), a);
        CHECK(d.x1 == doctest::Approx(g.x1).epsilon(1e-4));
        CHECK(d.y2 == doctest::Approx(g.y2).epsilon(1e-4));
    }
    const Box a{10, 20, 30, 50};
    const auto z = encode_box(a, a);
    for (float v : z) CHECK(v == 0.0f);
}

TEST_CASE("match_anchors") {
    AnchorGrid g = AnchorGrid::build(96, 96, {8, 16}, {0.25f, 0.5f});
    MatchResult none = match_anchors(g.anchors, std::vector<Box>{}, std::vector<int>{});
    CHECK(none.num_positive() == 0);
    CHECK(std::all_of(none.state.begin(), none.state.end(), [](AnchorState s) { return s == AnchorState::Negative; }));

    const std::vector<Box> exact{g.anchors[100]};
    MatchResult m = match_anchors(g.anchors, exact, std::vector<int>{2});
    CHECK(m.state[100] == AnchorState::Positive);
    CHECK(m.label[100] == 3);
    for (float v : m.target[100]) CHECK(v == 0.0f);
    CHECK_THROWS_AS(match_anchors(g.anchors, exact, std::vector<int>{}), ConfigError);

    Rng rng(3);
    for (int t = 0; t < 40; ++t) {
        std::vector<Box> boxes;
        std::vector<int> labels;
        const int n = rng.uniform_int(1, 5);
        for (int i = 0; i < n; ++i) {
            boxes.push_back(random_box(rng, 96));
            labels.push_back(rng.uniform_int(0, 2));
        }
        MatchResult r = match_anchors(g.anchors, boxes, labels);
        const oracle::Matching o = oracle::match(g.anchors, boxes);
        const auto& st = o.state;
        const auto& owner = o.owner;
        CHECK(r.state == st);
        CHECK(r.gt_index == owner);
        for (std::size_t j = 0; j < boxes.size(); ++j)
            CHECK(std::count(r.gt_index.begin(), r.gt_index.end(), static_cast<int>(j)) >= 1);
        for (std::size_t a = 0; a < g.size(); ++a)
            if (owner[a] >= 0) CHECK(r.label[a] == 1 + labels[static_cast<std::size_t>(owner[a])]);
    }
}

TEST_CASE("detection_loss") {
    const int cls = 4;
    AnchorGrid g = AnchorGrid::build(32, 32, {8, 16}, {0.25f, 0.5f});
    const std::size_t na = g.size();
    SUBCASE("perfect prediction") {
        std::vector<Box> boxes{{4, 4, 14, 13}};
        MatchResult m = match_anchors(g.anchors, boxes, std::vector<int>{1});
        std::vector<float> logits(na * cls, 0.0f), box(na * 4, 0.0f);
        for (std::size_t a = 0; a < na; ++a) {
            logits[a * cls + static_cast<std::size_t>(m.label[a])] = 50.0f;
            for (int j = 0; j < 4; ++j) box[a * 4 + j] = m.target[a][static_cast<std::size_t>(j)];
        }
        CHECK(detection_loss(logits, box, cls, m).loss < 1e-12);
    }
    SUBCASE("zero positives use the 16 hardest negatives") {
        MatchResult m = match_anchors(g.anchors, std::vector<Box>{}, std::vector<int>{});
        Rng rng(4);
        std::vector<float> logits(na * cls), box(na * 4, 0.5f);
        for (auto& v : logits) v = static_cast<float>(rng.uniform(-2, 2));
        DetectionLoss l = detection_loss(logits, box, cls, m);
        std::size_t rows = 0;
        for (std::size_t a = 0; a < na; ++a)
            rows += std::any_of(l.grad_cls.begin() + static_cast<std::ptrdiff_t>(a * cls),
                                l.grad_cls.begin() + static_cast<std::ptrdiff_t>((a + 1) * cls), [](float v) { return v != 0; });
        CHECK(rows == kMinDetNegatives);
        CHECK(l.box_loss == 0.0);
        // They are the 16 largest background losses.
        std::vector<double> bg(na);
        for (std::size_t a = 0; a < na; ++a) bg[a] = oracle::ce(to_double(std::span(logits).subspan(a * cls, cls)).data(), cls, 0);
        std::vector<double> sorted = bg;
        std::sort(sorted.rbegin(), sorted.rend());
        double expect = 0;
        for (std::size_t i = 0; i < kMinDetNegatives; ++i) expect += sorted[i];
        CHECK(l.cls_loss == doctest::Approx(expect).epsilon(1e-5));
    }
    SUBCASE("gradients match finite differences") {
        Rng rng(5);
        std::vector<Box> boxes{{3, 2, 17, 15}, {12, 14, 30, 31}};
        MatchResult m = match_anchors(g.anchors, boxes, std::vector<int>{0, 2});
        REQUIRE(m.num_positive() > 0);
        std::vector<float> logits(na * cls), box(na * 4);
        for (auto& v : logits) v = static_cast<float>(rng.uniform(-2, 2));
        for (auto& v : box) v = static_cast<float>(rng.uniform(-2, 2));
        DetectionLoss l = detection_loss(logits, box, cls, m);
        // Selected rows are fixed from the analytic pass.
        std::vector<bool> sel(na);
        for (std::size_t a = 0; a < na; ++a)
            for (int k = 0; k < cls; ++k) sel[a] = sel[a] || l.grad_cls[a * cls + static_cast<std::size_t>(k)] != 0;
        const double norm = static_cast<double>(m.num_positive());
        const auto loss_cls = [&](const std::vector<double>& v) {
            double s = 0;
            for (std::size_t a = 0; a < na; ++a)
                if (sel[a]) s += oracle::ce(v.data() + a * cls, cls, m.label[a]);
            return s / norm;
        };
        const auto loss_box = [&](const std::vector<double>& v) {
            double s = 0;
            for (std::size_t a = 0; a < na; ++a)
                if (m.state[a] == AnchorState::Positive)
                    for (std::size_t j = 0; j < 4; ++j) s += oracle::smooth_l1(v[a * 4 + j] - m.target[a][j]);
            return s / norm;
        };
        std::vector<double> lc = to_double(logits), lb = to_double(box);
        CHECK(l.loss == doctest::Approx(loss_cls(lc) + loss_box(lb)).epsilon(1e-5));
        for (std::size_t i = 0; i < lc.size(); ++i) CHECK(rel_err(l.grad_cls[i], central_diff(lc, i, 1e-3, loss_cls)) < 1e-3);
        for (std::size_t i = 0; i < lb.size(); ++i) {
            const std::size_t a = i / 4;
            if (m.state[a] == AnchorState::Positive && std::abs(std::abs(box[i] - m.target[a][i % 4]) - 1.0) < 2e-3) continue;
            CHECK(rel_err(l.grad_box[i], central_diff(lb, i, 1e-3, loss_box)) < 1e-3);
        }
    }
}

TEST_CASE("nms") {
    std::vector<Detection> one{{{0, 0, 10, 10}, 0, 0.5f, 0}};
    CHECK(nms(one).size() == 1);
    std::vector<Detection> twin{{{0, 0, 10, 10}, 0, 0.4f, 0}, {{0, 0, 10, 10}, 0, 0.9f, 0}};
    auto kept = nms(twin);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9f);

    Rng rng(6);
    for (int t = 0; t < 30; ++t) {
        std::vector<Detection> d;
        for (int i = 0; i < 40; ++i)
            d.push_back({random_box(rng, 40), 0, static_cast<float>(rng.uniform_int(0, 10)) / 10.0f, 0});
        const auto expect = oracle::nms(d, 0.5f);
        auto got = nms(d, 0.5f);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].box == expect[i].box);
            CHECK(got[i].score == expect[i].score);
        }
    }
}

TEST_CASE("evaluate_ap") {
    std::vector<GroundTruth> gt{{{{0, 0, 10, 10}, {20, 20, 30, 30}}, {0, 0}}};
    std::vector<Detection> exact{{{0, 0, 10, 10}, 0, 1.0f, 0}, {{20, 20, 30, 30}, 0, 1.0f, 0}};
    ApResult r = evaluate_ap(exact, gt, 3);
    CHECK(r.map == 1.0);
    CHECK(std::isnan(r.ap[1]));
    CHECK(evaluate_ap({}, gt, 3).map == 0.0);

    // Hand-computed: TP, FP, TP -> precision envelope {1, 2/3, 2/3}, recall {.5, .5, 1}.
    std::vector<Detection> toy{{{0, 0, 10, 10}, 0, 0.9f, 0}, {{50, 50, 60, 60}, 0, 0.8f, 0}, {{21, 20, 30, 30}, 0, 0.7f, 0}};
    CHECK(evaluate_ap(toy, gt, 3).map == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
    // Duplicate detection of the same GT counts as FP.
    std::vector<Detection> dup{{{0, 0, 10, 10}, 0, 0.9f, 0}, {{0, 0, 10, 10}, 0, 0.8f, 0}};
    CHECK(evaluate_ap(dup, gt, 3).map == doctest::Approx(0.5));

    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
        std::vector<GroundTruth> gts(3);
        std::vector<Detection> dets;
        for (int im = 0; im < 3; ++im)
            for (int i = 0; i < 4; ++i) {
                gts[static_cast<std::size_t>(im)].boxes.push_back(random_box(rng, 60));
                gts[static_cast<std::size_t>(im)].labels.push_back(rng.uniform_int(0, 2));
                Box b = gts[static_cast<std::size_t>(im)].boxes.back();
                b.x1 += static_cast<float>(rng.uniform(-2, 2));
                dets.push_back({b, rng.uniform_int(0, 2), static_cast<float>(rng.uniform()), im});
                dets.push_back({random_box(rng, 60), rng.uniform_int(0, 2), static_cast<float>(rng.uniform()), im});
            }
        const double base = evaluate_ap(dets, gts, 3).map;
        CHECK(base >= 0.0);
        CHECK(base <= 1.0);
        for (auto& d : dets) d.score = std::exp(3.0f * d.score) - 7.0f;
        CHECK(evaluate_ap(dets, gts, 3).map == base);
    }
    CHECK(detections_csv(exact).rfind("image_id,class,score,x1,y1,x2,y2\n", 0) == 0);
}

TEST_CASE("synthetic scenes") {
    SceneConfig cfg;
    CHECK(generate_scene(cfg, 7) == generate_scene(cfg, 7));
    CHECK_FALSE(generate_scene(cfg, 7) == generate_scene(cfg, 8));

    SceneConfig empty = cfg;
    empty.max_objects = 0;
    SyntheticScene e = generate_scene(empty, 3);
    CHECK(e.instances.empty());
    CHECK(fg_ratio(gt_instance_mask(e)) == 0.0);

    SyntheticScene sq = render_scene(96, {{ShapeClass::Square, 48, 48, 32}}, {0.1f, 0.1f, 0.1f});
    REQUIRE(sq.instances.size() == 1);
    CHECK(fg_ratio(gt_instance_mask(sq)) == doctest::Approx(1024.0 / 9216.0));
    CHECK(fg_ratio(gt_instance_mask(sq)) == doctest::Approx(0.1111).epsilon(1e-3));

    double sum = 0;
    for (std::uint64_t s = 0; s < 2000; ++s) {
        SyntheticScene sc = generate_scene(cfg, scene_seed(1000, s));
        const auto [lo, hi] = std::minmax_element(sc.image.vec().begin(), sc.image.vec().end());
        CHECK(*lo >= 0.0f);
        CHECK(*hi <= 1.0f);
        const double fi = fg_ratio(gt_instance_mask(sc));
        CHECK(fg_ratio(gt_box_mask(sc)) >= fi);
        sum += fi;
        for (const auto& in : sc.instances) {
            CHECK(in.mask.count_ones() > 0);
            // Tight box oracle.
            int x1 = 96, y1 = 96, x2 = -1, y2 = -1;
            for (int y = 0; y < 96; ++y)
                for (int x = 0; x < 96; ++x)
                    if (in.mask.at(0, y, x)) {
                        x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
                    }
            CHECK(in.box == Box{float(x1), float(y1), float(x2 + 1), float(y2 + 1)});
        }
    }
    const double mean = sum / 2000;
    CHECK(mean >= 0.10);
    CHECK(mean <= 0.35);
}

TEST_CASE("dataset files") {
    const auto dir = std::filesystem::temp_directory_path() / "objmask_test_ds";
    std::filesystem::remove_all(dir);
    SceneConfig cfg;
    auto scenes = generate_dataset(cfg, 100, 42);
    CHECK(dataset_checksum(scenes) == dataset_checksum(generate_dataset(cfg, 100, 42)));
    CHECK(dataset_checksum(scenes) == 8495315022506463669ULL);
    write_dataset(dir, scenes, cfg, 42);
    auto back = read_dataset(dir);
    CHECK(back == scenes);
    CHECK(dataset_checksum(back) == dataset_checksum(scenes));

    SyntheticScene f = flip_horizontal(scenes[3]);
    CHECK(flip_horizontal(f) == scenes[3]);

    // Corrupt magic.
    {
        std::fstream io(dir / "scene_000000.bin", std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(0);
        io.put('X');
    }
    try {
        read_dataset(dir);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }

    std::filesystem::remove_all(dir);
    write_dataset(dir, {}, cfg, 1);
    CHECK(read_dataset(dir).empty());
    std::filesystem::remove_all(dir);
}
