// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace ntrm {

/// Config sections are strict: a misspelled key is an error, not a default.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& section) {
    if (!j.is_object()) {
        throw std::invalid_argument(section + ": expected an object");
    }
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known) {
            ok = ok || item.key() == k;
        }
        if (!ok) {
            throw std::invalid_argument(section + ": unknown key '" + item.key() + "'");
        }
    }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

}  // namespace ntrm
