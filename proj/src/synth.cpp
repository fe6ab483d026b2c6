#include "objmask/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "objmask/bytes.hpp"
#include "objmask/errors.hpp"
#include "objmask/layers.hpp"
#include "objmask/rng.hpp"

namespace objmask {

std::vector<Box> SyntheticScene::boxes() const {
    std::vector<Box> out;
    for (const auto& in : instances) out.push_back(in.box);
    return out;
}

std::vector<int> SyntheticScene::labels() const {
    std::vector<int> out;
    for (const auto& in : instances) out.push_back(in.class_id);
    return out;
}

bool SyntheticScene::operator==(const SyntheticScene& o) const {
    if (!(image == o.image) || seed != o.seed || instances.size() != o.instances.size()) return false;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto& a = instances[i];
        const auto& b = o.instances[i];
        if (a.class_id != b.class_id || !(a.mask == b.mask) || !(a.box == b.box)) return false;
    }
    return true;
}

void SceneConfig::validate() const {
    if (hw <= 0 || min_objects < 0 || max_objects < min_objects) throw ConfigError("invalid scene config");
    if (min_size < 2 || max_size < min_size || max_size > hw) {
        throw ConfigError("object size range must lie within the image");
    }
}

namespace {

using Color = std::array<float, 3>;

Color hsv(double h, double s, double v) {
    const double c = v * s;
    const double hp = std::fmod(h * 6.0, 6.0);
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    const double m = v - c;
    return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

Color background_color(Rng& rng) { return hsv(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.2, 0.9)); }
Color object_color(Rng& rng) { return hsv(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0)); }

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void paint_background(Tensor& img, Background kind, Rng& rng) {
    const int h = img.h(), w = img.w();
    const Color c0 = background_color(rng);
    const Color c1 = background_color(rng);
    switch (kind) {
        case Background::Noise: {
            const int g = rng.uniform_int(6, 12);
            Tensor coarse({1, 3, g, g});
            for (int y = 0; y < g; ++y)
                for (int x = 0; x < g; ++x) {
                    const double t = rng.uniform();
                    for (int c = 0; c < 3; ++c) coarse.at(0, c, y, x) = static_cast<float>(c0[c] * (1 - t) + c1[c] * t);
                }
            Tensor up = upsample_bilinear(coarse, h, w);
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) img.at(0, c, y, x) = clamp01(up.at(0, c, y, x) + 0.05 * rng.normal());
            break;
        }
        case Background::Gradient: {
            const double ang = rng.uniform(0.0, 6.283185307179586);
            const double dx = std::cos(ang), dy = std::sin(ang);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double u = ((x + 0.5) / w - 0.5) * dx + ((y + 0.5) / h - 0.5) * dy;
                    const double t = std::clamp(u / 1.4142135623730951 + 0.5, 0.0, 1.0);
                    const double n = 0.03 * rng.normal();
                    for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = clamp01(c0[c] * (1 - t) + c1[c] * t + n);
                }
            break;
        }
        case Background::Texture: {
            const double ang = rng.uniform(0.0, 3.141592653589793);
            const double freq = rng.uniform(3.0, 10.0);
            const double phase = rng.uniform(0.0, 6.283185307179586);
            const double dx = std::cos(ang), dy = std::sin(ang);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double u = (x * dx + y * dy) / w;
                    const double t = 0.5 + 0.5 * std::sin(6.283185307179586 * freq * u + phase);
                    const double n = 0.04 * rng.normal();
                    for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = clamp01(c0[c] * (1 - t) + c1[c] * t + n);
                }
            break;
        }
    }
}

bool inside(ShapeClass shape, int x0, int y0, int s, int r, int c) {
    const double px = c + 0.5, py = r + 0.5;
    switch (shape) {
        case ShapeClass::Square:
            return c >= x0 && c < x0 + s && r >= y0 && r < y0 + s;
        case ShapeClass::Circle: {
            const double cx = x0 + s / 2.0, cy = y0 + s / 2.0, rad = s / 2.0;
            return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= rad * rad;
        }
        case ShapeClass::Triangle: {
            if (py < y0 || py > y0 + s) return false;
            return std::fabs(px - (x0 + s / 2.0)) <= (py - y0) / 2.0;
        }
    }
    return false;
}

// Draws objects in order; later objects occlude earlier ones. Instances with
// no visible pixel are dropped.
void draw_objects(SyntheticScene& scene, const std::vector<ObjectSpec>& objects, Rng* noise) {
    const int h = scene.image.h(), w = scene.image.w();
    std::vector<Instance> drawn;
    for (const auto& o : objects) {
        Instance inst;
        inst.class_id = static_cast<int>(o.shape);
        inst.mask = BinaryMask(1, h, w);
        const int x0 = o.cx - o.size / 2;
        const int y0 = o.cy - o.size / 2;
        for (int r = std::max(0, y0); r < std::min(h, y0 + o.size + 1); ++r)
            for (int c = std::max(0, x0); c < std::min(w, x0 + o.size); ++c) {
                if (!inside(o.shape, x0, y0, o.size, r, c)) continue;
                inst.mask.set(0, r, c, true);
                for (auto& prev : drawn) prev.mask.set(0, r, c, false);
                const double n = noise ? 0.03 * noise->normal() : 0.0;
                for (int ch = 0; ch < 3; ++ch) scene.image.at(0, ch, r, c) = clamp01(o.color[ch] + n);
            }
        drawn.push_back(std::move(inst));
    }
    for (auto& inst : drawn) {
        int r0 = h, r1 = -1, c0 = w, c1 = -1;
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                if (inst.mask.at(0, r, c)) {
                    r0 = std::min(r0, r);
                    r1 = std::max(r1, r);
                    c0 = std::min(c0, c);
                    c1 = std::max(c1, c);
                }
        if (r1 < 0) continue;
        inst.box = {static_cast<float>(c0), static_cast<float>(r0), static_cast<float>(c1 + 1),
                    static_cast<float>(r1 + 1)};
        scene.instances.push_back(std::move(inst));
    }
}

}  // namespace

SyntheticScene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    SyntheticScene s;
    s.seed = seed;
    s.image = Tensor({1, 3, cfg.hw, cfg.hw});
    const Background bg = cfg.backgrounds.empty()
                              ? static_cast<Background>(rng.uniform_int(0, 2))
                              : cfg.backgrounds[static_cast<std::size_t>(
                                    rng.uniform_int(0, static_cast<int>(cfg.backgrounds.size()) - 1))];
    paint_background(s.image, bg, rng);
    const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    std::vector<ObjectSpec> objects;
    for (int i = 0; i < count; ++i) {
        ObjectSpec o;
        o.shape = static_cast<ShapeClass>(rng.uniform_int(0, kNumClasses - 1));
        o.size = rng.uniform_int(cfg.min_size, cfg.max_size);
        o.cx = rng.uniform_int(o.size / 2, cfg.hw - (o.size + 1) / 2);
        o.cy = rng.uniform_int(o.size / 2, cfg.hw - (o.size + 1) / 2);
        o.color = object_color(rng);
        objects.push_back(o);
    }
    draw_objects(s, objects, &rng);
    return s;
}

SyntheticScene render_scene(int hw, const std::vector<ObjectSpec>& objects, std::array<float, 3> background,
                            std::uint64_t seed) {
    SyntheticScene s;
    s.seed = seed;
    s.image = Tensor({1, 3, hw, hw});
    for (int c = 0; c < 3; ++c) std::fill_n(s.image.plane(0, c), s.image.shape().plane(), background[c]);
    draw_objects(s, objects, nullptr);
    return s;
}

std::vector<SyntheticScene> generate_dataset(const SceneConfig& cfg, std::size_t count, std::uint64_t base_seed) {
    std::vector<SyntheticScene> scenes(count);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < count; ++i) scenes[i] = generate_scene(cfg, scene_seed(base_seed, i));
    return scenes;
}

std::vector<std::uint8_t> encode_scene(const SyntheticScene& s) {
    ByteWriter w;
    w.magic("BABO1");
    w.u32(static_cast<std::uint32_t>(s.image.c()));
    w.u32(static_cast<std::uint32_t>(s.image.h()));
    w.u32(static_cast<std::uint32_t>(s.image.w()));
    w.u64(s.seed);
    w.u32(static_cast<std::uint32_t>(s.instances.size()));
    w.floats(s.image.data());
    for (const auto& in : s.instances) {
        w.u32(static_cast<std::uint32_t>(in.class_id));
        w.bytes(pack_bits(in.mask.data()));
    }
    for (const auto& in : s.instances) {
        w.f32(in.box.x1);
        w.f32(in.box.y1);
        w.f32(in.box.x2);
        w.f32(in.box.y2);
    }
    return w.buffer();
}

SyntheticScene decode_scene(std::vector<std::uint8_t> bytes) {
    ByteReader r(std::move(bytes));
    r.expect_magic("BABO1");
    const std::size_t hdr = r.offset();
    const auto c = static_cast<int>(r.u32());
    const auto h = static_cast<int>(r.u32());
    const auto w = static_cast<int>(r.u32());
    if (c != 3 || h <= 0 || w <= 0 || h > 65536 || w > 65536) throw FormatError("invalid scene shape", hdr);
    SyntheticScene s;
    s.seed = r.u64();
    const std::size_t count_at = r.offset();
    const auto count = r.u32();
    if (count > 4096) throw FormatError("implausible instance count", count_at);
    s.image = Tensor({1, c, h, w});
    r.floats(s.image.data());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::uint32_t i = 0; i < count; ++i) {
        Instance in;
        const std::size_t at = r.offset();
        in.class_id = static_cast<int>(r.u32());
        if (in.class_id < 0 || in.class_id >= kNumClasses) throw FormatError("class id out of range", at);
        in.mask = BinaryMask(1, h, w);
        const auto bits = unpack_bits(r.bytes((plane + 7) / 8), plane);
        std::copy(bits.begin(), bits.end(), in.mask.data().begin());
        s.instances.push_back(std::move(in));
    }
    for (auto& in : s.instances) {
        in.box.x1 = r.f32();
        in.box.y1 = r.f32();
        in.box.x2 = r.f32();
        in.box.y2 = r.f32();
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after scene record", r.offset());
    return s;
}

namespace {

std::string record_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%06zu.bin", i);
    return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticScene>& scenes,
                   const SceneConfig& cfg, std::uint64_t base_seed) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json m;
    m["format"] = "BABO1";
    m["count"] = scenes.size();
    m["hw"] = {scenes.empty() ? cfg.hw : scenes.front().h(), scenes.empty() ? cfg.hw : scenes.front().w()};
    m["base_seed"] = base_seed;
    auto& seeds = m["seeds"] = nlohmann::ordered_json::array();
    for (const auto& s : scenes) seeds.push_back(s.seed);
    m["class_names"] = kClassNames;
    m["config"] = {{"min_objects", cfg.min_objects},
                   {"max_objects", cfg.max_objects},
                   {"min_size", cfg.min_size},
                   {"max_size", cfg.max_size}};
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        ByteWriter w;
        w.bytes(encode_scene(scenes[i]));
        w.save(dir / record_name(i));
    }
    std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

std::vector<SyntheticScene> read_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing manifest.json in " + dir.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("manifest.json: ") + e.what(), e.byte);
    }
    const std::size_t count = m.at("count").get<std::size_t>();
    std::vector<SyntheticScene> scenes(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto path = dir / record_name(i);
        try {
            ByteReader r = ByteReader::load(path);
            scenes[i] = decode_scene(r.bytes(r.remaining()));
        } catch (const FormatError& e) {
            throw FormatError(path.filename().string() + ": " + e.what(), e.offset());
        }
    }
    return scenes;
}

SyntheticScene flip_horizontal(const SyntheticScene& s) {
    SyntheticScene f = s;
    const int h = s.h(), w = s.w();
    for (int c = 0; c < s.image.c(); ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) f.image.at(0, c, y, x) = s.image.at(0, c, y, w - 1 - x);
    for (std::size_t i = 0; i < s.instances.size(); ++i) {
        auto& fi = f.instances[i];
        const auto& si = s.instances[i];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) fi.mask.set(0, y, x, si.mask.at(0, y, w - 1 - x));
        fi.box = {w - si.box.x2, si.box.y1, w - si.box.x1, si.box.y2};
    }
    return f;
}

std::uint64_t dataset_checksum(const std::vector<SyntheticScene>& scenes) {
    std::uint64_t hsh = 1469598103934665603ull;
    for (const auto& s : scenes)
        for (std::uint8_t b : encode_scene(s)) {
            hsh ^= b;
            hsh *= 1099511628211ull;
        }
    return hsh;
}

}  // namespace objmask
