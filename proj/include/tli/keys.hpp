// Canonical state-dict key schema. Nine weight tensors per decoder layer
// plus embeddings, final norm and (untied) lm head. Index parsing is
// anchored to the ".layers.{i}." segment so multi-digit indices never
// collide under rekeying.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tli/errors.hpp"

namespace tli {

inline constexpr std::array<std::string_view, 9> kLayerKeyTails = {
    "input_layernorm.weight",
    "self_attn.q_proj.weight",
    "self_attn.k_proj.weight",
    "self_attn.v_proj.weight",
    "self_attn.o_proj.weight",
    "post_attention_layernorm.weight",
    "mlp.gate_proj.weight",
    "mlp.up_proj.weight",
    "mlp.down_proj.weight",
};

inline constexpr std::string_view kEmbedKey = "model.embed_tokens.weight";
inline constexpr std::string_view kFinalNormKey = "model.norm.weight";
inline constexpr std::string_view kLmHeadKey = "lm_head.weight";
inline constexpr std::string_view kLayerPrefix = "model.layers.";

inline std::string layer_key(int layer, std::string_view tail) {
    return std::string(kLayerPrefix) + std::to_string(layer) + "." + std::string(tail);
}

// Index of the ".layers.{i}." segment, or nullopt for non-layer keys.
inline std::optional<int> layer_index_of(std::string_view key) {
    const std::string_view marker = ".layers.";
    const auto pos = key.find(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    std::size_t i = pos + marker.size();
    if (i >= key.size() || key[i] < '0' || key[i] > '9') return std::nullopt;
    long idx = 0;
    while (i < key.size() && key[i] >= '0' && key[i] <= '9') {
        idx = idx * 10 + (key[i] - '0');
        ++i;
    }
    if (i >= key.size() || key[i] != '.') return std::nullopt;
    return static_cast<int>(idx);
}

// Tail after "model.layers.{i}.", e.g. "mlp.down_proj.weight".
inline std::optional<std::string> layer_key_tail(std::string_view key) {
    const std::string_view marker = ".layers.";
    const auto pos = key.find(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    std::size_t i = pos + marker.size();
    while (i < key.size() && key[i] >= '0' && key[i] <= '9') ++i;
    if (i >= key.size() || key[i] != '.') return std::nullopt;
    return std::string(key.substr(i + 1));
}

// Swap the layer index, leaving prefix and tail untouched.
inline std::string rekey_layer(std::string_view key, int new_index) {
    const std::string_view marker = ".layers.";
    const auto pos = key.find(marker);
    if (pos == std::string_view::npos || !layer_index_of(key)) {
        throw UsageError("rekey_layer: '" + std::string(key) + "' is not a layer key");
    }
    std::size_t digits_begin = pos + marker.size();
    std::size_t digits_end = digits_begin;
    while (digits_end < key.size() && key[digits_end] >= '0' && key[digits_end] <= '9') ++digits_end;
    std::string out(key.substr(0, digits_begin));
    out += std::to_string(new_index);
    out += key.substr(digits_end);
    return out;
}

// Full sorted key set for a model with the given layer count.
inline std::vector<std::string> schema_keys(int num_layers, bool tie_word_embeddings) {
    std::vector<std::string> keys;
    keys.reserve(static_cast<std::size_t>(9 * num_layers + 3));
    keys.emplace_back(kEmbedKey);
    for (int i = 0; i < num_layers; ++i) {
        for (auto tail : kLayerKeyTails) keys.push_back(layer_key(i, tail));
    }
    keys.emplace_back(kFinalNormKey);
    if (!tie_word_embeddings) keys.emplace_back(kLmHeadKey);
    return keys;
}

inline bool is_zero_target_key(std::string_view key) {
    return key.find("down_proj") != std::string_view::npos ||
           key.find("o_proj") != std::string_view::npos;
}

}  // namespace tli
