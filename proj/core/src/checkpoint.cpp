#include "csim/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "csim/errors.hpp"

namespace csim {

namespace {

using nlohmann::json;

json config_json(const ModelConfig& c) {
  return json{{"grid", c.grid},
              {"patch", c.patch},
              {"channels", c.channels},
              {"qk_dim", c.qk_dim},
              {"mlp_hidden", c.mlp_hidden},
              {"classes", c.classes},
              {"topology", std::string(to_string(c.topology))},
              {"attention", std::string(to_string(c.attention))},
              {"matrix_mode", std::string(sd::to_string(c.matrix_mode))},
              {"residual", std::string(to_string(c.residual))},
              {"gamma", c.gamma},
              {"dropout", c.dropout},
              {"frozen_neg", c.frozen_neg}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.grid = j.at("grid").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.qk_dim = j.at("qk_dim").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
  c.topology = parse_topology(j.at("topology").get<std::string>());
  c.attention = parse_attention(j.at("attention").get<std::string>());
  c.matrix_mode = sd::parse_matrix_mode(j.at("matrix_mode").get<std::string>());
  c.residual = parse_residual(j.at("residual").get<std::string>());
  c.gamma = j.at("gamma").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.frozen_neg = j.at("frozen_neg").get<bool>();
  return c;
}

}  // namespace

std::string model_config_to_string(const ModelConfig& config) {
  return config_json(config).dump();
}

std::string serialize_checkpoint(const Model& model) {
  json params = json::array();
  for (const auto& e : model.parameters().entries()) {
    params.push_back({{"name", e.name},
                      {"shape", e.tensor.shape()},
                      {"values", std::vector<double>(e.tensor.values().begin(),
                                                     e.tensor.values().end())}});
  }
  json doc{{"format", "csim-checkpoint"},
           {"version", kCheckpointVersion},
           {"seed", model.seed()},
           {"config", config_json(model.config())},
           {"parameters", params}};
  return doc.dump(1);
}

Model deserialize_checkpoint(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (doc.at("format") != "csim-checkpoint") throw ConfigError("not a csim checkpoint");
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw ConfigError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    Model model(config_from_json(doc.at("config")), doc.at("seed").get<std::uint64_t>());
    const json& params = doc.at("parameters");
    auto& entries = model.parameters().entries();
    if (params.size() != entries.size()) {
      throw ConfigError("checkpoint holds " + std::to_string(params.size()) +
                        " parameters, model expects " + std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const json& p = params[i];
      const auto name = p.at("name").get<std::string>();
      if (name != entries[i].name) {
        throw ConfigError("parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                          entries[i].name + "'");
      }
      const auto shape = p.at("shape").get<Shape>();
      if (shape != entries[i].tensor.shape()) {
        throw ConfigError("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                          shape_str(entries[i].tensor.shape()));
      }
      const auto values = p.at("values").get<std::vector<double>>();
      if (values.size() != entries[i].tensor.numel()) {
        throw ConfigError("parameter '" + name + "' has the wrong number of values");
      }
      std::copy(values.begin(), values.end(), entries[i].tensor.mutable_values().begin());
    }
    return model;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << serialize_checkpoint(model);
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace csim
