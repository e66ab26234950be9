// Depth up-scaling surgeries over state dicts. TLI walks the original
// layers and, after every `split`-th one, appends a duplicate of the layer
// just copied with its residual-writing projections (o_proj, down_proj)
// zeroed, so the upscaled model computes exactly the same function at
// initialization. DUS concatenates the first and last layer ranges with no
// zeroing. Inputs are never mutated.
#pragma once

#include <string>
#include <tuple>
#include <vector>

#include "tli/checkpoint.hpp"

namespace tli {

struct InjectionPlan {
    int l_orig = 0;
    int l_new = 0;
    int split = 0;                              // injection interval; 0 for DUS plans
    std::vector<std::pair<int, int>> copy_map;  // (source_orig_index, dest_new_index)
    std::vector<std::pair<int, int>> injected;  // (source_orig_index, dest_new_index)
};

struct SurgeryReport {
    std::string method;                  // "tli" or "dus"
    InjectionPlan plan;
    std::vector<int> layer_sources;      // dest layer -> source layer, length l_new
    std::vector<int> requires_grad_layers;
    std::size_t keys_written = 0;
    std::vector<std::string> zeroed_keys;
};

// split = l_orig / (l_new - l_orig); the difference must divide l_orig
// exactly and l_new may at most double the depth, otherwise the counter
// walk cannot land on l_new.
InjectionPlan compute_injection_plan(int l_orig, int l_new);

std::tuple<TensorStore, ModelConfig, SurgeryReport> tli_inject(const TensorStore& store,
                                                               const ModelConfig& config,
                                                               int l_new);

// Baseline: output layers are sources [0, l_new/2) ++ [l_orig - l_new/2, l_orig).
std::tuple<TensorStore, ModelConfig, SurgeryReport> dus_upscale(const TensorStore& store,
                                                                const ModelConfig& config,
                                                                int l_new);

// Re-checks every surgery postcondition against the raw stores: layer
// count, bitwise copies, zero tensors, untouched non-layer keys, config
// consistency. Violations are returned as data, one string per offense.
std::vector<std::string> verify_surgery(const TensorStore& original,
                                        const TensorStore& upscaled,
                                        const SurgeryReport& report,
                                        const ModelConfig& original_config,
                                        const ModelConfig& upscaled_config);

std::string report_to_json(const SurgeryReport& report);
SurgeryReport report_from_json(const std::string& text);

// Rebuild the report a surgery would have produced, from the two configs
// alone (used when surgery-report.json is absent).
SurgeryReport reconstruct_report(const ModelConfig& original_config, const ModelConfig& upscaled_config);

}  // namespace tli
