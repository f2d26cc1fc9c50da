// Loads the shared desk-scale experiment config.
#pragma once

#include <fstream>
#include <stdexcept>

#include "experiment.hpp"

#ifndef ADVCHECK_DESK_CONFIG
#error "ADVCHECK_DESK_CONFIG must name configs/desk.json"
#endif

namespace advcheck::testing {

inline nlohmann::json desk_config_json() {
  std::ifstream in(ADVCHECK_DESK_CONFIG);
  if (!in) throw std::runtime_error("cannot open " ADVCHECK_DESK_CONFIG);
  return nlohmann::json::parse(in);
}

/// The desk config restricted to the attacks whose kind is in `kinds`.
inline nlohmann::json desk_config_json(std::initializer_list<const char*> kinds) {
  auto j = desk_config_json();
  auto all = j["attacks"];
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : all)
    for (const char* k : kinds)
      if (a["kind"] == k) j["attacks"].push_back(a);
  return j;
}

}  // namespace advcheck::testing
