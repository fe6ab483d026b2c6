#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace objmask {

// Bad shapes, bad parameters, inconsistent configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed files. Carries the byte offset at which parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// Broken internal invariant (e.g. tape underflow).
class InternalError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

}  // namespace objmask
