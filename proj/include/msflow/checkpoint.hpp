#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "msflow/error.hpp"
#include "msflow/model.hpp"
#include "msflow/tensor_io.hpp"

namespace msflow {

// Checkpoint directory:
//   model.json            architecture + parameter list
//   params/<name>.msft    one TensorFile per parameter ('/' -> '.')

inline std::string parameter_file_name(const std::string& name) {
    std::string f = name;
    for (auto& ch : f) {
        if (ch == '/') ch = '.';
    }
    return "params/" + f + ".msft";
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json scales = nlohmann::json::array();
    for (const auto& s : c.scales) {
        scales.push_back({{"channels", s.channels}, {"height", s.height}, {"width", s.width}, {"blocks", s.blocks}});
    }
    return {{"scales", scales},          {"pos_channels", c.pos_channels},
            {"clamp", c.clamp},          {"fusion", c.fusion},
            {"fusion_size", c.fusion_size}, {"hidden_channels", c.hidden_channels},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        for (const auto& s : j.at("scales")) {
            c.scales.push_back({s.at("channels").get<std::size_t>(), s.at("height").get<std::size_t>(),
                                s.at("width").get<std::size_t>(), s.at("blocks").get<std::size_t>()});
        }
        c.pos_channels = j.at("pos_channels").get<std::size_t>();
        c.clamp = j.at("clamp").get<double>();
        c.fusion = j.at("fusion").get<bool>();
        c.fusion_size = j.at("fusion_size").get<std::size_t>();
        c.hidden_channels = j.at("hidden_channels").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed model config: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& dir, const MSFlowModel<float>& model) {
    std::filesystem::create_directories(dir / "params");
    nlohmann::json params = nlohmann::json::array();
    for (const auto* p : model.parameters()) {
        const std::string file = parameter_file_name(p->name);
        write_tensor(dir / file, p->value);
        params.push_back({{"name", p->name}, {"file", file}, {"dims", p->value.dims()}});
    }
    nlohmann::json j{{"format", "msflow-checkpoint"}, {"version", 1}, {"model", model_config_to_json(model.config())},
                     {"parameters", params}};
    std::ofstream out(dir / "model.json", std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "model.json").string());
    out << j.dump(2) << '\n';
}

/// Rebuilds the architecture and overwrites every parameter from disk.
inline MSFlowModel<float> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "model.json");
    if (!in) throw DataError("no checkpoint at " + dir.string() + " (missing model.json)");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint model.json is not valid JSON: " + std::string(e.what()));
    }
    try {
        MSFlowModel<float> model(model_config_from_json(j.at("model")));
        auto params = model.parameters();
        const auto& listed = j.at("parameters");
        if (listed.size() != params.size()) {
            throw DataError("checkpoint lists " + std::to_string(listed.size()) + " parameters, architecture has " +
                            std::to_string(params.size()));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto name = listed[i].at("name").get<std::string>();
            if (name != params[i]->name) {
                throw DataError("checkpoint parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                                params[i]->name + "'");
            }
            Tensor<float> value = read_tensor(dir / listed[i].at("file").get<std::string>());
            if (value.dims() != params[i]->value.dims()) {
                throw DataError("checkpoint parameter '" + name + "' has dims " + shape_string(value.dims()) +
                                ", expected " + shape_string(params[i]->value.dims()));
            }
            params[i]->value = std::move(value);
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
    }
}

}  // namespace msflow
