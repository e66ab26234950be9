#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tli/eval.hpp"
#include "tli/surgery.hpp"

using namespace tli;

namespace {

ModelConfig toy_config(int layers, int hidden = 8, int vocab = 8, int inter = 8) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.hidden_size = hidden;
    cfg.num_layers = layers;
    cfg.num_heads = 2;
    cfg.num_kv_heads = 2;
    cfg.intermediate_size = inter;
    cfg.max_seq_len = 64;
    return cfg;
}

}  // namespace

TEST_CASE("injection plan for 32 -> 40") {
    const InjectionPlan plan = compute_injection_plan(32, 40);
    CHECK(plan.split == 4);
    const std::vector<int> want_dst = {4, 9, 14, 19, 24, 29, 34, 39};
    const std::vector<int> want_src = {3, 7, 11, 15, 19, 23, 27, 31};
    REQUIRE(plan.injected.size() == want_dst.size());
    for (std::size_t i = 0; i < want_dst.size(); ++i) {
        CHECK(plan.injected[i].second == want_dst[i]);
        CHECK(plan.injected[i].first == want_src[i]);
    }
}

TEST_CASE("injection plan for 8 -> 10") {
    const InjectionPlan plan = compute_injection_plan(8, 10);
    CHECK(plan.split == 4);
    REQUIRE(plan.injected.size() == 2);
    CHECK(plan.injected[0] == std::pair<int, int>{3, 4});
    CHECK(plan.injected[1] == std::pair<int, int>{7, 9});
    const std::vector<std::pair<int, int>> want_copy = {{0, 0}, {1, 1}, {2, 2}, {3, 3},
                                                        {4, 5}, {5, 6}, {6, 7}, {7, 8}};
    CHECK(plan.copy_map == want_copy);
}

TEST_CASE("injection plan edge cases") {
    CHECK_THROWS_AS(compute_injection_plan(8, 8), PlanError);   // zero difference
    CHECK_THROWS_AS(compute_injection_plan(8, 11), PlanError);  // 3 does not divide 8
    CHECK_THROWS_AS(compute_injection_plan(8, 17), PlanError);  // beyond doubling
    CHECK_THROWS_AS(compute_injection_plan(8, 7), PlanError);

    // 8 -> 9 is valid: split 8, single injection at the end
    const InjectionPlan plan = compute_injection_plan(8, 9);
    CHECK(plan.split == 8);
    REQUIRE(plan.injected.size() == 1);
    CHECK(plan.injected[0] == std::pair<int, int>{7, 8});

    // 8 -> 16 injects after every layer
    const InjectionPlan dense = compute_injection_plan(8, 16);
    CHECK(dense.split == 1);
    CHECK(dense.injected.size() == 8);
    for (int i = 0; i < 8; ++i) {
        CHECK(dense.injected[static_cast<std::size_t>(i)] == std::pair<int, int>{i, 2 * i + 1});
    }
}

TEST_CASE("tli_inject 8 -> 10 structure") {
    const ModelConfig cfg = toy_config(8);
    const TensorStore store = model_to_store(init_random<float>(cfg, 42));
    const auto [out, out_cfg, report] = tli_inject(store, cfg, 10);

    CHECK(out.entries.size() == 93);
    CHECK(out_cfg.num_layers == 10);
    CHECK(out_cfg.requires_grad_layers == std::vector<int>{4, 9});
    CHECK(report.requires_grad_layers == std::vector<int>{4, 9});
    CHECK(report.zeroed_keys.size() == 4);
    CHECK(report.keys_written == 93);

    // injected layers: zero residual writers, everything else copied from
    // the layer just before them in the new indexing
    for (const auto [zero_dst, copy_src] : {std::pair<int, int>{4, 3}, std::pair<int, int>{9, 8}}) {
        CHECK(all_zero(out.get(layer_key(zero_dst, "self_attn.o_proj.weight"))));
        CHECK(all_zero(out.get(layer_key(zero_dst, "mlp.down_proj.weight"))));
        for (auto tail : kLayerKeyTails) {
            if (is_zero_target_key(layer_key(zero_dst, tail))) continue;
            CHECK(bits_equal(out.get(layer_key(zero_dst, tail)), out.get(layer_key(copy_src, tail))));
        }
    }

    // non-layer keys untouched
    for (const auto key : {kEmbedKey, kFinalNormKey, kLmHeadKey}) {
        CHECK(bits_equal(out.get(std::string(key)), store.get(std::string(key))));
    }
}

TEST_CASE("tli output preserves logits exactly on random sequences") {
    const ModelConfig cfg = toy_config(4, 16, 16, 16);
    const auto model = init_random<float>(cfg, 11);
    const TensorStore store = model_to_store(model);
    const auto [out, out_cfg, report] = tli_inject(store, cfg, 6);
    const auto upscaled = model_from_store(out, out_cfg);

    const auto eq = logit_equivalence(model, upscaled, 8, 24, 5);
    CHECK(eq.max_abs_logit_diff <= 1e-5);
    CHECK(eq.mean_kl <= 1e-9);
}

TEST_CASE("dus output breaks logit identity on a random model") {
    const ModelConfig cfg = toy_config(8, 64, 64, 256);
    const auto model = init_random<float>(cfg, 42);
    const TensorStore store = model_to_store(model);
    const auto [out, out_cfg, report] = dus_upscale(store, cfg, 10);
    const auto upscaled = model_from_store(out, out_cfg);
    const auto eq = logit_equivalence(model, upscaled, 8, 32, 5);
    CHECK(eq.max_abs_logit_diff > 1e-3);
}

TEST_CASE("dus layer sources follow the top/bottom construction") {
    const ModelConfig cfg8 = toy_config(8);
    const TensorStore store8 = model_to_store(init_random<float>(cfg8, 1));

    const auto [out10, cfg10, rep10] = dus_upscale(store8, cfg8, 10);
    CHECK(rep10.layer_sources == std::vector<int>{0, 1, 2, 3, 4, 3, 4, 5, 6, 7});
    CHECK(cfg10.requires_grad_layers.empty());
    CHECK(rep10.zeroed_keys.empty());
    for (int dst = 0; dst < 10; ++dst) {
        const int src = rep10.layer_sources[static_cast<std::size_t>(dst)];
        for (auto tail : kLayerKeyTails) {
            CHECK(bits_equal(out10.get(layer_key(dst, tail)), store8.get(layer_key(src, tail))));
        }
    }

    const auto [out16, cfg16, rep16] = dus_upscale(store8, cfg8, 16);
    std::vector<int> want16;
    for (int i = 0; i < 8; ++i) want16.push_back(i);
    for (int i = 0; i < 8; ++i) want16.push_back(i);
    CHECK(rep16.layer_sources == want16);

    const ModelConfig cfg32 = toy_config(32);
    const TensorStore store32 = model_to_store(init_random<float>(cfg32, 2));
    const auto [out48, cfg48, rep48] = dus_upscale(store32, cfg32, 48);
    std::vector<int> want48;
    for (int i = 0; i < 24; ++i) want48.push_back(i);
    for (int i = 8; i < 32; ++i) want48.push_back(i);
    CHECK(rep48.layer_sources == want48);
}

TEST_CASE("dus rejects parity and range violations") {
    const ModelConfig cfg = toy_config(8);
    const TensorStore store = model_to_store(init_random<float>(cfg, 1));
    CHECK_THROWS_AS(dus_upscale(store, cfg, 9), PlanError);   // odd
    CHECK_THROWS_AS(dus_upscale(store, cfg, 18), PlanError);  // l_new/2 > l_orig
    CHECK_THROWS_AS(dus_upscale(store, cfg, 6), PlanError);   // shrink
}

TEST_CASE("surgery is lossless on the original weights") {
    const ModelConfig cfg = toy_config(6);
    const TensorStore store = model_to_store(init_random<float>(cfg, 33));
    const auto [out, out_cfg, report] = tli_inject(store, cfg, 9);

    // drop injected layers, undo the rekeying, compare bitwise
    TensorStore rebuilt;
    for (const auto& [src, dst] : report.plan.copy_map) {
        for (auto tail : kLayerKeyTails) {
            rebuilt.entries[layer_key(src, tail)] = out.get(layer_key(dst, tail));
        }
    }
    for (const auto& [key, tensor] : out.entries) {
        if (!layer_index_of(key)) rebuilt.entries[key] = tensor;
    }
    REQUIRE(rebuilt.entries.size() == store.entries.size());
    for (const auto& [key, tensor] : store.entries) {
        CHECK(bits_equal(tensor, rebuilt.get(key)));
    }
}

TEST_CASE("zeroed key count is twice the layer increase") {
    const ModelConfig cfg = toy_config(12);
    const TensorStore store = model_to_store(init_random<float>(cfg, 3));
    for (int l_new : {13, 14, 15, 16, 18, 24}) {
        const auto [out, out_cfg, report] = tli_inject(store, cfg, l_new);
        CHECK(report.zeroed_keys.size() == static_cast<std::size_t>(2 * (l_new - 12)));
        CHECK(report.requires_grad_layers.size() == static_cast<std::size_t>(l_new - 12));
    }
}

TEST_CASE("tli matches the brute-force reference construction") {
    // provenance comparison over every divisible target for small depths
    for (int l_orig = 2; l_orig <= 6; ++l_orig) {
        const ModelConfig cfg = toy_config(l_orig, 4, 4, 4);
        const TensorStore store = model_to_store(init_random<float>(cfg, 7));
        std::vector<std::string> input_keys;
        for (const auto& [key, t] : store.entries) input_keys.push_back(key);

        for (int diff = 1; diff <= l_orig; ++diff) {
            if (l_orig % diff != 0) continue;
            const int l_new = l_orig + diff;
            const auto ref = oracle::naive_tli_reference(input_keys, l_orig, l_new);
            const auto [out, out_cfg, report] = tli_inject(store, cfg, l_new);

            REQUIRE(out.entries.size() == ref.provenance.size());
            for (const auto& [key, src] : ref.provenance) {
                REQUIRE(out.has(key));
                if (src.empty()) {
                    CHECK(all_zero(out.get(key)));
                } else {
                    CHECK(bits_equal(out.get(key), store.get(src)));
                }
            }
            CHECK(report.requires_grad_layers == ref.requires_grad_layers);
            auto sorted_ref = ref.zeroed_keys;
            std::sort(sorted_ref.begin(), sorted_ref.end());
            CHECK(report.zeroed_keys == sorted_ref);
        }
    }
}

TEST_CASE("verify_surgery passes fresh output and flags single mutations") {
    const ModelConfig cfg = toy_config(8);
    const TensorStore store = model_to_store(init_random<float>(cfg, 9));
    auto [out, out_cfg, report] = tli_inject(store, cfg, 10);

    CHECK(verify_surgery(store, out, report, cfg, out_cfg).empty());

    // flip one value in a copied tensor
    {
        TensorStore tampered = out;
        Tensorf& t = tampered.entries.at("model.layers.6.mlp.up_proj.weight");
        t[3] += 1.0f;
        const auto violations = verify_surgery(store, tampered, report, cfg, out_cfg);
        REQUIRE(violations.size() == 1);
        CHECK(violations[0].find("model.layers.6.mlp.up_proj.weight") != std::string::npos);
    }

    // noise in a zeroed projection
    {
        TensorStore tampered = out;
        Tensorf& t = tampered.entries.at("model.layers.4.self_attn.o_proj.weight");
        t[0] = 0.25f;
        const auto violations = verify_surgery(store, tampered, report, cfg, out_cfg);
        REQUIRE(violations.size() == 1);
        CHECK(violations[0].find("zero") != std::string::npos);
        CHECK(violations[0].find("model.layers.4.self_attn.o_proj.weight") != std::string::npos);
    }

    // non-layer key modified
    {
        TensorStore tampered = out;
        tampered.entries.at("model.norm.weight")[0] += 0.5f;
        const auto violations = verify_surgery(store, tampered, report, cfg, out_cfg);
        REQUIRE(violations.size() == 1);
        CHECK(violations[0].find("model.norm.weight") != std::string::npos);
    }

    // config drifting from the plan
    {
        ModelConfig bad_cfg = out_cfg;
        bad_cfg.requires_grad_layers = {4};
        const auto violations = verify_surgery(store, out, report, cfg, bad_cfg);
        CHECK(!violations.empty());
    }
}

TEST_CASE("surgery report serializes to json and back") {
    const ModelConfig cfg = toy_config(8);
    const TensorStore store = model_to_store(init_random<float>(cfg, 10));
    const auto [out, out_cfg, report] = tli_inject(store, cfg, 12);

    const std::string text = report_to_json(report);
    const SurgeryReport back = report_from_json(text);
    CHECK(back.method == report.method);
    CHECK(back.plan.l_orig == report.plan.l_orig);
    CHECK(back.plan.l_new == report.plan.l_new);
    CHECK(back.plan.split == report.plan.split);
    CHECK(back.plan.copy_map == report.plan.copy_map);
    CHECK(back.plan.injected == report.plan.injected);
    CHECK(back.layer_sources == report.layer_sources);
    CHECK(back.requires_grad_layers == report.requires_grad_layers);
    CHECK(back.keys_written == report.keys_written);
    CHECK(back.zeroed_keys == report.zeroed_keys);

    CHECK_THROWS_AS(report_from_json("{"), FormatError);
    CHECK_THROWS_AS(report_from_json("{}"), FormatError);
}

TEST_CASE("reconstruct_report recovers tli and dus plans from configs") {
    const ModelConfig cfg = toy_config(8);
    const TensorStore store = model_to_store(init_random<float>(cfg, 12));

    const auto [tli_out, tli_cfg, tli_rep] = tli_inject(store, cfg, 10);
    const SurgeryReport tli_back = reconstruct_report(cfg, tli_cfg);
    CHECK(tli_back.method == "tli");
    CHECK(tli_back.layer_sources == tli_rep.layer_sources);
    CHECK(tli_back.zeroed_keys == tli_rep.zeroed_keys);
    CHECK(verify_surgery(store, tli_out, tli_back, cfg, tli_cfg).empty());

    const auto [dus_out, dus_cfg, dus_rep] = dus_upscale(store, cfg, 10);
    const SurgeryReport dus_back = reconstruct_report(cfg, dus_cfg);
    CHECK(dus_back.method == "dus");
    CHECK(dus_back.layer_sources == dus_rep.layer_sources);
    CHECK(verify_surgery(store, dus_out, dus_back, cfg, dus_cfg).empty());
}

TEST_CASE("injected layers receive gradient only through o_proj and down_proj") {
    const ModelConfig cfg = toy_config(4, 16, 16, 16);
    const auto base = init_random<float>(cfg, 31);
    const auto [up_store, up_cfg, report] = tli_inject(model_to_store(base), cfg, 6);
    const auto upscaled = model_from_store(up_store, up_cfg);

    FreezeMask all;
    for (const auto& key : schema_keys(up_cfg.num_layers, up_cfg.tie_word_embeddings)) {
        all.params[key] = true;
    }
    Rng rng(77);
    TokenBatch batch;
    batch.batch = 2;
    batch.seq = 24;
    for (int i = 0; i < 2 * 24; ++i) {
        batch.tokens.push_back(static_cast<std::int32_t>(rng.below(16)));
    }
    const auto [loss, grads] = loss_and_grads(upscaled, batch, all);

    for (int l : up_cfg.requires_grad_layers) {
        for (auto tail : kLayerKeyTails) {
            const std::string key = layer_key(l, tail);
            const float m = max_abs(grads.at(key));
            CAPTURE(key);
            if (is_zero_target_key(key)) {
                CHECK(m > 1e-8f);  // the residual writers break the symmetry
            } else {
                CHECK(m <= 1e-12f);  // everything upstream of the zeros is masked
            }
        }
    }
}

TEST_CASE("input stores are never mutated by surgery") {
    const ModelConfig cfg = toy_config(4);
    const TensorStore store = model_to_store(init_random<float>(cfg, 20));
    const TensorStore copy = store;
    (void)tli_inject(store, cfg, 6);
    (void)dus_upscale(store, cfg, 6);
    REQUIRE(store.entries.size() == copy.entries.size());
    for (const auto& [key, tensor] : copy.entries) CHECK(bits_equal(tensor, store.get(key)));
}
