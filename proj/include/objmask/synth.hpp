#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "objmask/box.hpp"
#include "objmask/mask.hpp"
#include "objmask/tensor.hpp"

namespace objmask {

enum class ShapeClass { Circle = 0, Square = 1, Triangle = 2 };
inline constexpr int kNumClasses = 3;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"circle", "square", "triangle"};

enum class Background { Noise = 0, Gradient = 1, Texture = 2 };

struct Instance {
    int class_id = 0;
    BinaryMask mask;  // visible pixels, (1, h, w)
    Box box;          // tight box of the mask
};

struct SyntheticScene {
    Tensor image;  // (1, 3, h, w), values in [0, 1]
    std::vector<Instance> instances;
    std::uint64_t seed = 0;

    int h() const { return image.h(); }
    int w() const { return image.w(); }
    std::vector<Box> boxes() const;
    std::vector<int> labels() const;
    bool operator==(const SyntheticScene&) const;
};

struct SceneConfig {
    int hw = 96;
    int min_objects = 0;
    int max_objects = 5;
    int min_size = 16;
    int max_size = 40;
    // Empty means pick uniformly among all three.
    std::vector<Background> backgrounds;

    void validate() const;
};

// A single object placed explicitly; used for fixtures.
struct ObjectSpec {
    ShapeClass shape = ShapeClass::Square;
    int cx = 0, cy = 0, size = 0;
    std::array<float, 3> color = {1.0f, 0.0f, 0.0f};
};

SyntheticScene generate_scene(const SceneConfig& cfg, std::uint64_t seed);
SyntheticScene render_scene(int hw, const std::vector<ObjectSpec>& objects, std::array<float, 3> background,
                            std::uint64_t seed = 0);

// Seed of scene i in a dataset generated from base_seed.
inline std::uint64_t scene_seed(std::uint64_t base_seed, std::size_t index) { return base_seed ^ index; }
std::vector<SyntheticScene> generate_dataset(const SceneConfig& cfg, std::size_t count, std::uint64_t base_seed);

// Directory layout: manifest.json plus scene_NNNNNN.bin records
// ("BABO1" magic, u32 c/h/w, u64 seed, u32 instance count, f32 image,
// per instance u32 class + bit-packed mask, then f32 box table).
void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticScene>& scenes,
                   const SceneConfig& cfg = {}, std::uint64_t base_seed = 0);
std::vector<SyntheticScene> read_dataset(const std::filesystem::path& dir);

std::vector<std::uint8_t> encode_scene(const SyntheticScene& s);
SyntheticScene decode_scene(std::vector<std::uint8_t> bytes);

// Horizontal mirror of image, masks and boxes.
SyntheticScene flip_horizontal(const SyntheticScene& s);

// FNV-1a over the encoded records.
std::uint64_t dataset_checksum(const std::vector<SyntheticScene>& scenes);

}  // namespace objmask
