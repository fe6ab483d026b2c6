#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objmask/errors.hpp"

namespace objmask {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void magic(std::string_view m) { raw(m.data(), m.size()); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void floats(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
    void bytes(std::span<const std::uint8_t> v) { raw(v.data(), v.size()); }

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    void save(const std::filesystem::path& path) const;

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<std::uint8_t> buf) : buf_(std::move(buf)) {}
    static ByteReader load(const std::filesystem::path& path);

    void expect_magic(std::string_view m) {
        need(m.size(), "magic");
        if (std::memcmp(buf_.data() + pos_, m.data(), m.size()) != 0) {
            throw FormatError("bad magic, expected '" + std::string(m) + "'", pos_);
        }
        pos_ += m.size();
    }
    std::uint32_t u32() { return scalar<std::uint32_t>("u32"); }
    std::uint64_t u64() { return scalar<std::uint64_t>("u64"); }
    float f32() { return scalar<float>("f32"); }
    void floats(std::span<float> out) {
        need(out.size_bytes(), "float array");
        std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }
    std::vector<std::uint8_t> bytes(std::size_t n) {
        need(n, "byte array");
        std::vector<std::uint8_t> v(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                    buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return v;
    }
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    template <typename T>
    T scalar(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n, const char* what) const {
        if (buf_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what, pos_);
    }

    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

}  // namespace objmask
