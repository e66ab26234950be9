// Bit-exact checkpoint persistence. A checkpoint directory holds
// `model.safetensors` (8-byte little-endian header length, JSON header
// with sorted keys, then raw row-major f32 payloads) and `config.json`
// whose fields mirror ModelConfig verbatim. Writes are byte-deterministic
// so identical stores produce identical files.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>

#include "tli/keys.hpp"
#include "tli/model.hpp"
#include "tli/tensor.hpp"

namespace tli {

inline constexpr std::string_view kModelFileName = "model.safetensors";
inline constexpr std::string_view kConfigFileName = "config.json";

struct TensorStore {
    std::map<std::string, Tensorf> entries;
    std::map<std::string, std::string> metadata;

    bool has(const std::string& key) const { return entries.count(key) != 0; }
    const Tensorf& get(const std::string& key) const {
        auto it = entries.find(key);
        if (it == entries.end()) throw ValidationError("missing tensor key: " + key);
        return it->second;
    }
};

// Shape the schema assigns to a key, given the config.
Shape expected_shape(const std::string& key, const ModelConfig& config);

// Exact key-set and shape check; throws ValidationError naming every
// offending key.
void validate_store(const TensorStore& store, const ModelConfig& config);

void save(const TensorStore& store, const ModelConfig& config, const std::filesystem::path& dir);
std::pair<TensorStore, ModelConfig> load(const std::filesystem::path& dir);

std::string dump_config_json(const ModelConfig& config);
ModelConfig parse_config_json(const std::string& text);

TensorStore model_to_store(const ToyModel<float>& model);
ToyModel<float> model_from_store(const TensorStore& store, const ModelConfig& config);

}  // namespace tli
