#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace etm {

/// Throws std::invalid_argument on any key of `j` outside `allowed`.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                               std::string_view context) {
  if (!j.is_object()) throw std::invalid_argument(std::string(context) + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (auto key : allowed) known = known || item.key() == key;
    if (!known) throw std::invalid_argument(std::string(context) + ": unknown key '" + item.key() + "'");
  }
}

}  // namespace etm
