#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "dcal/model.hpp"

namespace dcal {

inline constexpr const char* kCheckpointFormat = "dcal-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ResidualClassifier model;
  nlohmann::json extra;  // normalisation statistics, config echo, ...
};

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

/// JSON document: format tag, version, model spec, ensemble size, and every
/// parameter as {name, kind, shape, data}. Doubles round-trip exactly.
nlohmann::json checkpoint_to_json(const ResidualClassifier& model, const nlohmann::json& extra = {});
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

void save_checkpoint(const std::filesystem::path& path, const ResidualClassifier& model,
                     const nlohmann::json& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dcal
