#include "tli/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

namespace tli {

using nlohmann::json;

Shape expected_shape(const std::string& key, const ModelConfig& config) {
    const Index d = config.hidden_size;
    const Index v = config.vocab_size;
    const Index kv = config.kv_dim();
    const Index inter = config.intermediate_size;
    if (key == kEmbedKey || key == kLmHeadKey) return {v, d};
    if (key == kFinalNormKey) return {d};
    const auto tail = layer_key_tail(key);
    if (!tail) throw ValidationError("key not in schema: " + key);
    if (*tail == kLayerKeyTails[0] || *tail == kLayerKeyTails[5]) return {d};
    if (*tail == kLayerKeyTails[1]) return {d, d};
    if (*tail == kLayerKeyTails[2] || *tail == kLayerKeyTails[3]) return {kv, d};
    if (*tail == kLayerKeyTails[4]) return {d, d};
    if (*tail == kLayerKeyTails[6] || *tail == kLayerKeyTails[7]) return {inter, d};
    if (*tail == kLayerKeyTails[8]) return {d, inter};
    throw ValidationError("key not in schema: " + key);
}

void validate_store(const TensorStore& store, const ModelConfig& config) {
    config.validate();
    std::string problems;
    auto bad = [&](const std::string& p) { problems += problems.empty() ? p : ("; " + p); };
    for (const auto& key : schema_keys(config.num_layers, config.tie_word_embeddings)) {
        auto it = store.entries.find(key);
        if (it == store.entries.end()) {
            bad("missing key " + key);
            continue;
        }
        const Shape want = expected_shape(key, config);
        if (it->second.shape() != want) {
            bad("key " + key + " has shape " + shape_str(it->second.shape()) + ", expected " +
                shape_str(want));
        }
    }
    const std::size_t want_count =
        static_cast<std::size_t>(9 * config.num_layers + (config.tie_word_embeddings ? 2 : 3));
    if (store.entries.size() != want_count) {
        for (const auto& [key, t] : store.entries) {
            try {
                expected_shape(key, config);
                if (auto idx = layer_index_of(key); idx && *idx >= config.num_layers) {
                    bad("unexpected key " + key);
                }
            } catch (const ValidationError&) {
                bad("unexpected key " + key);
            }
        }
        bad("store has " + std::to_string(store.entries.size()) + " keys, schema expects " +
            std::to_string(want_count));
    }
    if (!problems.empty()) throw ValidationError("store/config mismatch: " + problems);
}

// --------------------------------------------------------------------------
// config.json
// --------------------------------------------------------------------------

std::string dump_config_json(const ModelConfig& config) {
    json j;
    j["vocab_size"] = config.vocab_size;
    j["hidden_size"] = config.hidden_size;
    j["num_layers"] = config.num_layers;
    j["num_heads"] = config.num_heads;
    j["num_kv_heads"] = config.num_kv_heads;
    j["intermediate_size"] = config.intermediate_size;
    j["rope_theta"] = config.rope_theta;
    j["rms_norm_eps"] = config.rms_norm_eps;
    j["max_seq_len"] = config.max_seq_len;
    j["requires_grad_layers"] = config.requires_grad_layers;
    j["tie_word_embeddings"] = config.tie_word_embeddings;
    return j.dump(2) + "\n";
}

ModelConfig parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config.json is not valid JSON: ") + e.what());
    }
    ModelConfig c;
    try {
        j.at("vocab_size").get_to(c.vocab_size);
        j.at("hidden_size").get_to(c.hidden_size);
        j.at("num_layers").get_to(c.num_layers);
        j.at("num_heads").get_to(c.num_heads);
        j.at("num_kv_heads").get_to(c.num_kv_heads);
        j.at("intermediate_size").get_to(c.intermediate_size);
        j.at("rope_theta").get_to(c.rope_theta);
        j.at("rms_norm_eps").get_to(c.rms_norm_eps);
        j.at("max_seq_len").get_to(c.max_seq_len);
        j.at("requires_grad_layers").get_to(c.requires_grad_layers);
        j.at("tie_word_embeddings").get_to(c.tie_word_embeddings);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config.json field error: ") + e.what());
    }
    c.validate();
    return c;
}

// --------------------------------------------------------------------------
// tensor container
// --------------------------------------------------------------------------

namespace {

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path.string());
    return os.str();
}

}  // namespace

void save(const TensorStore& store, const ModelConfig& config, const std::filesystem::path& dir) {
    validate_store(store, config);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

    // Header offsets count payload bytes in sorted key order.
    json header(json::value_t::object);
    std::uint64_t offset = 0;
    for (const auto& [key, tensor] : store.entries) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(tensor.numel()) * sizeof(float);
        json entry;
        entry["dtype"] = "F32";
        entry["shape"] = tensor.shape();
        entry["data_offsets"] = {offset, offset + bytes};
        header[key] = std::move(entry);
        offset += bytes;
    }
    if (!store.metadata.empty()) header["__metadata__"] = store.metadata;

    const std::string header_text = header.dump();
    std::string blob;
    blob.reserve(8 + header_text.size() + offset);
    std::uint64_t len = header_text.size();
    for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
    blob += header_text;
    for (const auto& [key, tensor] : store.entries) {
        const char* p = reinterpret_cast<const char*>(tensor.data());
        blob.append(p, p + tensor.numel() * sizeof(float));
    }
    write_file(dir / kModelFileName, blob);
    write_file(dir / kConfigFileName, dump_config_json(config));
}

std::pair<TensorStore, ModelConfig> load(const std::filesystem::path& dir) {
    const auto model_path = dir / kModelFileName;
    const auto config_path = dir / kConfigFileName;
    if (!std::filesystem::exists(config_path)) throw IoError("missing file: " + config_path.string());
    if (!std::filesystem::exists(model_path)) throw IoError("missing file: " + model_path.string());

    ModelConfig config = parse_config_json(read_file(config_path));

    const std::string blob = read_file(model_path);
    if (blob.size() < 8) throw FormatError("tensor file too small for header length field");
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) {
        header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[i])) << (8 * i);
    }
    if (8 + header_len > blob.size()) {
        throw FormatError("header length " + std::to_string(header_len) + " exceeds file size " +
                          std::to_string(blob.size()));
    }
    json header;
    try {
        header = json::parse(blob.begin() + 8, blob.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed tensor header: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("tensor header must be a JSON object");

    const std::uint64_t payload_size = blob.size() - 8 - header_len;
    const char* payload = blob.data() + 8 + header_len;

    TensorStore store;
    std::uint64_t covered = 0;
    for (const auto& [key, entry] : header.items()) {
        if (key == "__metadata__") {
            for (const auto& [mk, mv] : entry.items()) {
                if (!mv.is_string()) throw FormatError("__metadata__ values must be strings");
                store.metadata[mk] = mv.get<std::string>();
            }
            continue;
        }
        try {
            if (entry.at("dtype").get<std::string>() != "F32") {
                throw FormatError("tensor " + key + ": unsupported dtype " +
                                  entry.at("dtype").get<std::string>());
            }
            Shape shape = entry.at("shape").get<Shape>();
            const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2 || offsets[1] < offsets[0]) {
                throw FormatError("tensor " + key + ": bad data_offsets");
            }
            const std::uint64_t want = static_cast<std::uint64_t>(Tensorf::count(shape)) * sizeof(float);
            if (offsets[1] - offsets[0] != want) {
                throw FormatError("tensor " + key + ": payload length " +
                                  std::to_string(offsets[1] - offsets[0]) + " does not match shape " +
                                  shape_str(shape));
            }
            if (offsets[1] > payload_size) {
                throw FormatError("tensor " + key + ": payload truncated (need " +
                                  std::to_string(offsets[1]) + " bytes, have " +
                                  std::to_string(payload_size) + ")");
            }
            std::vector<float> data(static_cast<std::size_t>(Tensorf::count(shape)));
            std::memcpy(data.data(), payload + offsets[0], want);
            store.entries.emplace(key, Tensorf(std::move(shape), std::move(data)));
            covered += want;
        } catch (const json::exception& e) {
            throw FormatError("tensor " + key + ": malformed header entry: " + e.what());
        }
    }
    if (covered != payload_size) {
        throw FormatError("payload size " + std::to_string(payload_size) + " not fully covered by header (" +
                          std::to_string(covered) + " bytes mapped)");
    }

    validate_store(store, config);
    return {std::move(store), std::move(config)};
}

// --------------------------------------------------------------------------
// model <-> store binding
// --------------------------------------------------------------------------

TensorStore model_to_store(const ToyModel<float>& model) {
    TensorStore store;
    for_each_param(model, [&](const std::string& key, const Tensorf& t) { store.entries[key] = t; });
    return store;
}

ToyModel<float> model_from_store(const TensorStore& store, const ModelConfig& config) {
    validate_store(store, config);
    ToyModel<float> model;
    model.config = config;
    model.layers.resize(static_cast<std::size_t>(config.num_layers));
    for_each_param(model, [&](const std::string& key, Tensorf& t) { t = store.get(key); });
    return model;
}

}  // namespace tli
