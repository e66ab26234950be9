#include "tli/surgery.hpp"

#include <algorithm>

#include <json.hpp>

namespace tli {

using nlohmann::json;

InjectionPlan compute_injection_plan(int l_orig, int l_new) {
    if (l_orig < 1) throw PlanError("original layer count must be >= 1, got " + std::to_string(l_orig));
    if (l_new <= l_orig) {
        throw PlanError("target layer count " + std::to_string(l_new) +
                        " must exceed original " + std::to_string(l_orig) +
                        " (split = l_orig / (l_new - l_orig) needs a positive difference)");
    }
    const int diff = l_new - l_orig;
    if (l_orig % diff != 0) {
        throw PlanError("invalid target: l_new - l_orig = " + std::to_string(diff) +
                        " must divide l_orig = " + std::to_string(l_orig) +
                        " so that one layer is injected after every split = l_orig/(l_new - l_orig) layers");
    }
    if (l_new > 2 * l_orig) {
        throw PlanError("target layer count " + std::to_string(l_new) + " exceeds twice the original " +
                        std::to_string(l_orig) + "; at most one layer can be injected per original layer");
    }

    InjectionPlan plan;
    plan.l_orig = l_orig;
    plan.l_new = l_new;
    plan.split = l_orig / diff;

    int layer_cnt = 0;
    for (int i = 0; i < l_orig; ++i) {
        plan.copy_map.emplace_back(i, layer_cnt);
        ++layer_cnt;
        if ((i + 1) % plan.split == 0) {
            plan.injected.emplace_back(i, layer_cnt);
            ++layer_cnt;
        }
    }
    if (layer_cnt != l_new) {
        throw PlanError("layer counter finished at " + std::to_string(layer_cnt) + ", expected " +
                        std::to_string(l_new));
    }
    return plan;
}

namespace {

std::vector<int> sources_from_plan(const InjectionPlan& plan) {
    std::vector<int> sources(static_cast<std::size_t>(plan.l_new), -1);
    for (const auto& [src, dst] : plan.copy_map) sources[static_cast<std::size_t>(dst)] = src;
    for (const auto& [src, dst] : plan.injected) sources[static_cast<std::size_t>(dst)] = src;
    return sources;
}

// Copy every layer per dest->source, zeroing the listed keys, plus the
// non-layer keys unchanged.
TensorStore build_upscaled(const TensorStore& store, const std::vector<int>& sources,
                           SurgeryReport& report) {
    TensorStore out;
    out.metadata = store.metadata;
    const bool zero_injected = report.method == "tli";
    std::vector<bool> injected_dest(sources.size(), false);
    for (const auto& [src, dst] : report.plan.injected) injected_dest[static_cast<std::size_t>(dst)] = true;

    for (std::size_t dst = 0; dst < sources.size(); ++dst) {
        const int src = sources[dst];
        for (auto tail : kLayerKeyTails) {
            const std::string src_key = layer_key(src, tail);
            const std::string dst_key = layer_key(static_cast<int>(dst), tail);
            const Tensorf& tensor = store.get(src_key);
            if (zero_injected && injected_dest[dst] && is_zero_target_key(dst_key)) {
                out.entries[dst_key] = Tensorf::zeros(tensor.shape());
                report.zeroed_keys.push_back(dst_key);
            } else {
                out.entries[dst_key] = tensor;
            }
        }
    }
    for (const auto& [key, tensor] : store.entries) {
        if (!layer_index_of(key)) out.entries[key] = tensor;
    }
    report.keys_written = out.entries.size();
    std::sort(report.zeroed_keys.begin(), report.zeroed_keys.end());
    return out;
}

}  // namespace

std::tuple<TensorStore, ModelConfig, SurgeryReport> tli_inject(const TensorStore& store,
                                                               const ModelConfig& config,
                                                               int l_new) {
    validate_store(store, config);
    SurgeryReport report;
    report.method = "tli";
    report.plan = compute_injection_plan(config.num_layers, l_new);
    report.layer_sources = sources_from_plan(report.plan);
    for (const auto& [src, dst] : report.plan.injected) report.requires_grad_layers.push_back(dst);

    TensorStore out = build_upscaled(store, report.layer_sources, report);

    ModelConfig new_config = config;
    new_config.num_layers = l_new;
    new_config.requires_grad_layers = report.requires_grad_layers;
    validate_store(out, new_config);
    return {std::move(out), std::move(new_config), std::move(report)};
}

std::tuple<TensorStore, ModelConfig, SurgeryReport> dus_upscale(const TensorStore& store,
                                                                const ModelConfig& config,
                                                                int l_new) {
    validate_store(store, config);
    const int l_orig = config.num_layers;
    if (l_new % 2 != 0) throw PlanError("dus target layer count must be even, got " + std::to_string(l_new));
    if (l_new / 2 > l_orig || l_orig > l_new) {
        throw PlanError("dus requires l_new/2 <= l_orig <= l_new; got l_orig=" + std::to_string(l_orig) +
                        ", l_new=" + std::to_string(l_new));
    }

    SurgeryReport report;
    report.method = "dus";
    report.plan.l_orig = l_orig;
    report.plan.l_new = l_new;
    report.plan.split = 0;
    const int half = l_new / 2;
    for (int dst = 0; dst < half; ++dst) report.plan.copy_map.emplace_back(dst, dst);
    for (int dst = half; dst < l_new; ++dst) {
        report.plan.copy_map.emplace_back(l_orig - half + (dst - half), dst);
    }
    report.layer_sources = sources_from_plan(report.plan);

    TensorStore out = build_upscaled(store, report.layer_sources, report);

    ModelConfig new_config = config;
    new_config.num_layers = l_new;
    new_config.requires_grad_layers.clear();
    validate_store(out, new_config);
    return {std::move(out), std::move(new_config), std::move(report)};
}

std::vector<std::string> verify_surgery(const TensorStore& original,
                                        const TensorStore& upscaled,
                                        const SurgeryReport& report,
                                        const ModelConfig& original_config,
                                        const ModelConfig& upscaled_config) {
    std::vector<std::string> violations;
    auto flag = [&](const std::string& v) { violations.push_back(v); };

    if (upscaled_config.num_layers != report.plan.l_new) {
        flag("config num_layers " + std::to_string(upscaled_config.num_layers) +
             " does not match plan l_new " + std::to_string(report.plan.l_new));
    }
    if (original_config.num_layers != report.plan.l_orig) {
        flag("original config num_layers " + std::to_string(original_config.num_layers) +
             " does not match plan l_orig " + std::to_string(report.plan.l_orig));
    }
    if (upscaled_config.requires_grad_layers != report.requires_grad_layers) {
        flag("config requires_grad_layers does not match the plan's injected layers");
    }
    if (static_cast<int>(report.layer_sources.size()) != report.plan.l_new) {
        flag("report layer_sources has wrong length");
        return violations;
    }

    const std::vector<std::string> want_keys =
        schema_keys(report.plan.l_new, upscaled_config.tie_word_embeddings);
    for (const auto& key : want_keys) {
        if (!upscaled.has(key)) flag("missing key " + key);
    }
    for (const auto& [key, t] : upscaled.entries) {
        if (std::find(want_keys.begin(), want_keys.end(), key) == want_keys.end()) {
            flag("unexpected key " + key);
        }
    }

    auto is_zeroed = [&](const std::string& key) {
        return std::find(report.zeroed_keys.begin(), report.zeroed_keys.end(), key) !=
               report.zeroed_keys.end();
    };

    for (int dst = 0; dst < report.plan.l_new; ++dst) {
        const int src = report.layer_sources[static_cast<std::size_t>(dst)];
        for (auto tail : kLayerKeyTails) {
            const std::string dst_key = layer_key(dst, tail);
            const std::string src_key = layer_key(src, tail);
            if (!upscaled.has(dst_key) || !original.has(src_key)) continue;
            const Tensorf& got = upscaled.get(dst_key);
            if (is_zeroed(dst_key)) {
                if (got.shape() != original.get(src_key).shape()) {
                    flag("zeroed key " + dst_key + " has wrong shape");
                } else if (!all_zero(got)) {
                    flag("key " + dst_key + " must be a zero tensor");
                }
            } else if (!bits_equal(got, original.get(src_key))) {
                flag("key " + dst_key + " is not a bitwise copy of " + src_key);
            }
        }
    }

    for (const auto& [key, tensor] : original.entries) {
        if (layer_index_of(key)) continue;
        if (!upscaled.has(key)) continue;  // flagged as missing above
        if (!bits_equal(upscaled.get(key), tensor)) {
            flag("non-layer key " + key + " was modified");
        }
    }

    return violations;
}

// --------------------------------------------------------------------------
// report serialization
// --------------------------------------------------------------------------

namespace {

json pairs_to_json(const std::vector<std::pair<int, int>>& pairs) {
    json arr = json::array();
    for (const auto& [a, b] : pairs) arr.push_back({a, b});
    return arr;
}

std::vector<std::pair<int, int>> pairs_from_json(const json& arr) {
    std::vector<std::pair<int, int>> out;
    for (const auto& p : arr) out.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    return out;
}

}  // namespace

std::string report_to_json(const SurgeryReport& report) {
    json j;
    j["method"] = report.method;
    j["plan"]["l_orig"] = report.plan.l_orig;
    j["plan"]["l_new"] = report.plan.l_new;
    j["plan"]["split"] = report.plan.split;
    j["plan"]["copy_map"] = pairs_to_json(report.plan.copy_map);
    j["plan"]["injected"] = pairs_to_json(report.plan.injected);
    j["layer_sources"] = report.layer_sources;
    j["requires_grad_layers"] = report.requires_grad_layers;
    j["keys_written"] = report.keys_written;
    j["zeroed_keys"] = report.zeroed_keys;
    return j.dump(2) + "\n";
}

SurgeryReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("surgery report is not valid JSON: ") + e.what());
    }
    SurgeryReport r;
    try {
        j.at("method").get_to(r.method);
        j.at("plan").at("l_orig").get_to(r.plan.l_orig);
        j.at("plan").at("l_new").get_to(r.plan.l_new);
        j.at("plan").at("split").get_to(r.plan.split);
        r.plan.copy_map = pairs_from_json(j.at("plan").at("copy_map"));
        r.plan.injected = pairs_from_json(j.at("plan").at("injected"));
        j.at("layer_sources").get_to(r.layer_sources);
        j.at("requires_grad_layers").get_to(r.requires_grad_layers);
        j.at("keys_written").get_to(r.keys_written);
        j.at("zeroed_keys").get_to(r.zeroed_keys);
    } catch (const json::exception& e) {
        throw FormatError(std::string("surgery report field error: ") + e.what());
    }
    return r;
}

SurgeryReport reconstruct_report(const ModelConfig& original_config,
                                 const ModelConfig& upscaled_config) {
    const int l_orig = original_config.num_layers;
    const int l_new = upscaled_config.num_layers;
    if (!upscaled_config.requires_grad_layers.empty()) {
        SurgeryReport r;
        r.method = "tli";
        r.plan = compute_injection_plan(l_orig, l_new);
        r.layer_sources = sources_from_plan(r.plan);
        for (const auto& [src, dst] : r.plan.injected) {
            r.requires_grad_layers.push_back(dst);
            for (auto tail : kLayerKeyTails) {
                const std::string key = layer_key(dst, tail);
                if (is_zero_target_key(key)) r.zeroed_keys.push_back(key);
            }
        }
        std::sort(r.zeroed_keys.begin(), r.zeroed_keys.end());
        r.keys_written = static_cast<std::size_t>(9 * l_new + (upscaled_config.tie_word_embeddings ? 2 : 3));
        return r;
    }
    // No trainable layers recorded: assume the DUS construction.
    SurgeryReport r;
    r.method = "dus";
    r.plan.l_orig = l_orig;
    r.plan.l_new = l_new;
    r.plan.split = 0;
    if (l_new % 2 != 0 || l_new / 2 > l_orig || l_orig > l_new) {
        throw PlanError("cannot reconstruct a dus plan for l_orig=" + std::to_string(l_orig) +
                        ", l_new=" + std::to_string(l_new));
    }
    const int half = l_new / 2;
    for (int dst = 0; dst < half; ++dst) r.plan.copy_map.emplace_back(dst, dst);
    for (int dst = half; dst < l_new; ++dst) r.plan.copy_map.emplace_back(l_orig - half + (dst - half), dst);
    r.layer_sources = sources_from_plan(r.plan);
    r.keys_written = static_cast<std::size_t>(9 * l_new + (upscaled_config.tie_word_embeddings ? 2 : 3));
    return r;
}

}  // namespace tli
