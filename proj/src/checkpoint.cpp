#include <fstream>
#include <string>

#include "json.hpp"
#include "tdciv/errors.hpp"
#include "tdciv/model.hpp"

namespace tdciv::vae {
namespace {

using nlohmann::json;

constexpr int kCheckpointVersion = 1;

json config_to_json(const ModelConfig& c) {
  return json{{"dim_x", c.dim_x},
              {"dim_s", c.dim_s},
              {"dim_z", c.dim_z},
              {"hidden", c.hidden},
              {"fc_hidden", c.fc_hidden},
              {"alpha", c.alpha},
              {"beta", c.beta},
              {"kl_s_weight", c.kl_s_weight},
              {"keep_prob", c.keep_prob},
              {"binary_outcome", c.binary_outcome},
              {"init_sd", c.init_sd}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.dim_x = j.at("dim_x").get<std::size_t>();
  c.dim_s = j.at("dim_s").get<std::size_t>();
  c.dim_z = j.at("dim_z").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.fc_hidden = j.at("fc_hidden").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.kl_s_weight = j.value("kl_s_weight", 1.0);
  c.keep_prob = j.at("keep_prob").get<double>();
  c.binary_outcome = j.at("binary_outcome").get<bool>();
  c.init_sd = j.at("init_sd").get<double>();
  return c;
}

}  // namespace

void save_model(const TdcivModel& model, const std::string& path) {
  model.validate();
  json doc;
  doc["version"] = kCheckpointVersion;
  doc["kind"] = "tdciv-model";
  doc["config"] = config_to_json(model.config);
  json params = json::object();
  for (const auto& [name, array] : model.named_parameters()) {
    json entry;
    entry["shape"] = array->shape();
    entry["data"] = array->storage();
    params[name] = std::move(entry);
  }
  doc["params"] = std::move(params);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw ContractError("save_model: cannot open '" + path + "' for writing");
  out << doc.dump() << '\n';
  if (!out.good()) throw ContractError("save_model: write to '" + path + "' failed");
}

TdcivModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ParseError("load_model: cannot open '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError("load_model: '" + path + "' is not valid JSON: " + e.what());
  }

  try {
    if (!doc.contains("version") || !doc["version"].is_number_integer())
      throw ParseError("load_model: '" + path + "' has no integer version field");
    const int version = doc["version"].get<int>();
    if (version != kCheckpointVersion)
      throw ParseError("load_model: unsupported checkpoint version " + std::to_string(version) +
                       " (expected " + std::to_string(kCheckpointVersion) + ")");
    if (doc.at("kind").get<std::string>() != "tdciv-model")
      throw ParseError("load_model: '" + path + "' is not a model checkpoint");

    TdcivModel model;
    model.config = config_from_json(doc.at("config"));
    model.config.validate();

    const json& params = doc.at("params");
    const auto named = model.named_parameters();
    auto arrays = model.parameters();  // same order as named_parameters()
    if (params.size() != named.size())
      throw ParseError("load_model: checkpoint holds " + std::to_string(params.size()) +
                       " parameter arrays, expected " + std::to_string(named.size()));
    for (std::size_t k = 0; k < named.size(); ++k) {
      const std::string& name = named[k].first;
      if (!params.contains(name))
        throw ParseError("load_model: missing parameter '" + name + "'");
      const json& entry = params.at(name);
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      auto data = entry.at("data").get<std::vector<double>>();
      if (shape.size() == 1) {
        if (data.size() != shape[0])
          throw ParseError("load_model: parameter '" + name + "' data length mismatch");
        *arrays[k] = ad::Array::from_vector(std::move(data));
      } else if (shape.size() == 2) {
        if (data.size() != shape[0] * shape[1])
          throw ParseError("load_model: parameter '" + name + "' data length mismatch");
        *arrays[k] = ad::Array::from_matrix(shape[0], shape[1], std::move(data));
      } else {
        throw ParseError("load_model: parameter '" + name + "' has rank " +
                         std::to_string(shape.size()));
      }
    }
    model.validate();  // enforces shapes against the config and finiteness
    return model;
  } catch (const json::exception& e) {
    throw ParseError("load_model: '" + path + "' is malformed: " + e.what());
  }
}

}  // namespace tdciv::vae
