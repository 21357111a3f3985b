#include "dcal/checkpoint.hpp"

#include <fstream>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

const char* kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::shared: return "shared";
    case ParamKind::adapter: return "adapter";
    case ParamKind::bias: return "bias";
  }
  return "?";
}

}  // namespace

nlohmann::json model_spec_to_json(const ModelSpec& spec) {
  return {{"in_channels", spec.in_channels}, {"image_size", spec.image_size}, {"width", spec.width},
          {"blocks", spec.blocks},           {"classes", spec.classes},       {"members", spec.members},
          {"ensemble", spec.ensemble},       {"stem_pool", spec.stem_pool}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.in_channels = j.value("in_channels", s.in_channels);
  s.image_size = j.value("image_size", s.image_size);
  s.width = j.value("width", s.width);
  s.blocks = j.value("blocks", s.blocks);
  s.classes = j.value("classes", s.classes);
  s.members = j.value("members", s.members);
  s.ensemble = j.value("ensemble", s.ensemble);
  s.stem_pool = j.value("stem_pool", s.stem_pool);
  return s;
}

nlohmann::json checkpoint_to_json(const ResidualClassifier& model, const nlohmann::json& extra) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    params.push_back({{"name", p.name},
                      {"kind", kind_name(p.kind)},
                      {"shape", p.tensor->shape()},
                      {"data", p.tensor->storage()}});
  }
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"model", model_spec_to_json(model.spec())},
          {"ensemble_size", model.members()},
          {"parameters", std::move(params)},
          {"extra", extra.is_null() ? nlohmann::json::object() : extra}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat) {
    throw FormatError("not a checkpoint document");
  }
  if (doc.value("version", 0) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + doc.value("version", nlohmann::json()).dump());
  }
  Checkpoint ck;
  ck.model = make_model_shell(model_spec_from_json(doc.at("model")));
  if (doc.value("ensemble_size", std::size_t{0}) != ck.model.members()) {
    throw ValidationError("checkpoint ensemble size disagrees with its model spec");
  }
  const auto& stored = doc.at("parameters");
  auto params = ck.model.parameters();
  if (stored.size() != params.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(stored.size()) + " parameters, model needs " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = stored[i];
    if (entry.at("name").get<std::string>() != params[i].name) {
      throw ValidationError("checkpoint parameter " + entry.at("name").get<std::string>() + " where " +
                            params[i].name + " was expected");
    }
    Shape shape = entry.at("shape").get<Shape>();
    if (shape != params[i].tensor->shape()) {
      throw ValidationError("checkpoint parameter " + params[i].name + " has shape " + shape_string(shape) +
                            ", model needs " + shape_string(params[i].tensor->shape()));
    }
    *params[i].tensor = Tensor(std::move(shape), entry.at("data").get<std::vector<double>>());
  }
  ck.extra = doc.value("extra", nlohmann::json::object());
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ResidualClassifier& model,
                     const nlohmann::json& extra) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(model, extra).dump();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(doc);
}

}  // namespace dcal
