#pragma once

// Internal checkpoint container shared by the encoder and localizer-head
// states: one JSON header line (kind + config + ordered tensor directory),
// a NUL separator, then raw little-endian IEEE-754 64-bit values. Kept out
// of the public headers so the JSON dependency stays private to the core.

#include <string>

#include <nlohmann/json.hpp>

#include "bugloc/params.hpp"

namespace bugloc::ckpt {

void save(const std::string& path, const std::string& kind,
          const nlohmann::json& config, const ParamStore& params);

struct Loaded {
  std::string kind;
  nlohmann::json config;
  ParamStore params;
};

Loaded load(const std::string& path, const std::string& expected_kind);

}  // namespace bugloc::ckpt
