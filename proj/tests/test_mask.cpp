#include <doctest.h>

#include <filesystem>

#include "objmask/errors.hpp"
#include "objmask/layers.hpp"
#include "objmask/mask.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace objmask;
using namespace testing;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("objmask_test_" + name);
}

}  // namespace

TEST_CASE("dilate") {
    BinaryMask single(1, 9, 9);
    single.set(0, 4, 4, true);
    CHECK(dilate(single, 3).count_ones() == 9);
    CHECK(dilate(single, 5).count_ones() == 25);
    BinaryMask zeros(1, 9, 9);
    CHECK(dilate(zeros, 7) == zeros);
    CHECK(dilate(single, 1) == single);
    CHECK_THROWS_AS(dilate(single, 4), ConfigError);
    CHECK_THROWS_AS(dilate(single, 0), ConfigError);

    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        BinaryMask m = random_binary(2, 17, 23, 0.05, rng);
        for (int k : {3, 5, 9}) {
            BinaryMask d = dilate(m, k);
            CHECK(d == oracle::dilate(m, k));
            CHECK(is_subset(m, d));
            CHECK(is_subset(d, dilate(m, k + 2)));
            CHECK(dilate(d, k) == dilate(m, 2 * k - 1));
        }
    }
}

TEST_CASE("pool_mask") {
    BinaryMask m(1, 4, 4);
    m.set(0, 1, 0, true);
    BinaryMask p = pool_mask(m, 2);
    CHECK(p.h() == 2);
    CHECK(p.stride() == 2);
    CHECK(p.at(0, 0, 0) == 1);
    CHECK(p.count_ones() == 1);
    CHECK(pool_mask(BinaryMask(1, 4, 4, 1, 1), 2).count_ones() == 4);
    CHECK_THROWS_AS(pool_mask(BinaryMask(1, 5, 4), 2), ConfigError);

    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
        BinaryMask r = random_binary(2, 16, 24, 0.1, rng);
        CHECK(pool_mask(pool_mask(r, 2), 2) == pool_mask(r, 4));
        CHECK(fg_ratio(pool_mask(r, 2)) >= fg_ratio(r));
        CHECK(pool_mask(r, 4) == oracle::pool_any(r, 4));
    }
}

TEST_CASE("apply_mask") {
    Rng rng(3);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    CHECK(apply_mask(x, BinaryMask(2, 6, 6, 1, 1)) == x);
    Tensor z = apply_mask(x, BinaryMask(2, 6, 6));
    CHECK(z.count_zeros() == z.size());
    BinaryMask m = random_binary(2, 6, 6, 0.5, rng);
    Tensor y = apply_mask(x, m);
    CHECK(apply_mask(y, m) == y);
    CHECK(y == elementwise_mul(x, m.to_tensor()));
    CHECK_THROWS_AS(apply_mask(x, BinaryMask(2, 3, 3)), ConfigError);
    CHECK_THROWS_AS(apply_mask(x, BinaryMask(1, 6, 6)), ConfigError);
}

TEST_CASE("fg_ratio and boxes_to_mask") {
    CHECK(fg_ratio(BinaryMask(1, 4, 4, 1, 1)) == 1.0);
    CHECK(fg_ratio(BinaryMask(1, 4, 4)) == 0.0);
    BinaryMask half(1, 4, 4);
    for (int i = 0; i < 8; ++i) half.set(0, i / 4, i % 4, true);
    CHECK(fg_ratio(half) == 0.5);

    std::vector<Box> full{{0, 0, 12, 10}};
    CHECK(boxes_to_mask(full, 10, 12).count_ones() == 120);
    CHECK(boxes_to_mask(std::vector<Box>{}, 10, 12).count_ones() == 0);

    std::vector<Box> two{{2.0f, 3.0f, 9.5f, 8.0f}, {5.0f, 1.2f, 14.0f, 6.3f}};
    BinaryMask bm = boxes_to_mask(two, 16, 16);
    std::size_t inside = 0;
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) {
            const float px = c + 0.5f, py = r + 0.5f;
            bool in = false;
            for (const Box& b : two) in = in || (px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2);
            CHECK(bm.at(0, r, c) == (in ? 1 : 0));
            inside += in;
        }
    CHECK(fg_ratio(bm) == doctest::Approx(inside / 256.0));
}

TEST_CASE("mask serialization round trips") {
    Rng rng(4);
    BinaryMask m = random_binary(3, 13, 21, 0.4, rng, 2);
    const auto raw = temp_path("mask.bin");
    write_mask_file(raw, m);
    CHECK(read_mask_file(raw) == m);

    const auto pgm = temp_path("mask.pgm");
    write_pgm(pgm, m);
    BinaryMask back = read_pgm(pgm, 3);
    CHECK(std::equal(back.data().begin(), back.data().end(), m.data().begin(), m.data().end()));

    std::vector<std::uint8_t> bits(37);
    for (auto& b : bits) b = rng.bernoulli(0.5);
    CHECK(unpack_bits(pack_bits(bits), bits.size()) == bits);

    // Truncated file is rejected.
    std::filesystem::resize_file(raw, std::filesystem::file_size(raw) - 1);
    CHECK_THROWS(read_mask_file(raw));
    std::filesystem::remove(raw);
    std::filesystem::remove(pgm);
}
