#pragma once

#include <string>

#include "json.hpp"

#include "dcl/trainer.hpp"

namespace dcl {

/// Full round-trippable serialization of a training configuration,
/// version-tagged. Enums become strings ("cosine", "denseclpp", ...).
nlohmann::json train_config_to_json(const TrainConfig& cfg);

/// Strict inverse: rejects an unsupported version and any key it does not
/// know about, at every nesting level, with the offending path in the error.
/// Absent keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

const char* method_name(Method m);
Method method_from_name(const std::string& name);

}  // namespace dcl
