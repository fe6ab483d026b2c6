#pragma once

#include <string>

#include <json.hpp>

#include "objmask/errors.hpp"

namespace objmask {

// Throws ConfigError for any key of `given` that the reference document lacks.
// Arrays of objects are checked element-wise against the first reference element.
template <class J1, class J2>
void reject_unknown_keys(const J1& given, const J2& known, const std::string& path = "") {
    if (given.is_object() && known.is_object()) {
        for (auto it = given.begin(); it != given.end(); ++it) {
            const std::string where = path.empty() ? it.key() : path + "." + it.key();
            if (!known.contains(it.key())) throw ConfigError("unknown config key '" + where + "'");
            reject_unknown_keys(it.value(), known.at(it.key()), where);
        }
    } else if (given.is_array() && known.is_array() && !known.empty() && known.front().is_object()) {
        for (const auto& e : given) reject_unknown_keys(e, known.front(), path + "[]");
    }
}

}  // namespace objmask
