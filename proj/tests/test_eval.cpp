#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "tli/checkpoint.hpp"
#include "tli/eval.hpp"
#include "tli/surgery.hpp"

using namespace tli;
namespace fs = std::filesystem;

namespace {

ModelConfig toy_config(int layers) {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.hidden_size = 16;
    cfg.num_layers = layers;
    cfg.num_heads = 2;
    cfg.num_kv_heads = 2;
    cfg.intermediate_size = 32;
    cfg.max_seq_len = 64;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("a model is logit-equivalent to itself with zero KL") {
    const auto model = init_random<float>(toy_config(3), 4);
    const auto eq = logit_equivalence(model, model, 4, 16, 9);
    CHECK(eq.max_abs_logit_diff == 0.0);
    CHECK(eq.mean_kl == 0.0);
    CHECK(eq.sequences_tested == 4);
}

TEST_CASE("tli upscale is logit-equivalent, dus upscale is not") {
    ModelConfig cfg = toy_config(8);
    const auto model = init_random<float>(cfg, 42);
    const TensorStore store = model_to_store(model);

    const auto [tli_store, tli_cfg, tli_rep] = tli_inject(store, cfg, 10);
    const auto tli_model = model_from_store(tli_store, tli_cfg);
    const auto eq_tli = logit_equivalence(model, tli_model, 8, 32, 3);
    CHECK(eq_tli.max_abs_logit_diff <= 1e-5);
    CHECK(eq_tli.mean_kl <= 1e-9);

    const auto [dus_store, dus_cfg, dus_rep] = dus_upscale(store, cfg, 10);
    const auto dus_model = model_from_store(dus_store, dus_cfg);
    const auto eq_dus = logit_equivalence(model, dus_model, 8, 32, 3);
    CHECK(eq_dus.max_abs_logit_diff > 1e-3);
}

TEST_CASE("logit equivalence rejects vocab mismatches") {
    const auto a = init_random<float>(toy_config(1), 1);
    ModelConfig other = toy_config(1);
    other.vocab_size = 16;
    const auto b = init_random<float>(other, 1);
    CHECK_THROWS_AS(logit_equivalence(a, b, 2, 8, 0), ComparisonError);
}

TEST_CASE("logit equivalence is deterministic for a fixed seed") {
    const auto a = init_random<float>(toy_config(2), 5);
    const auto b = init_random<float>(toy_config(2), 6);
    const auto r1 = logit_equivalence(a, b, 4, 16, 12);
    const auto r2 = logit_equivalence(a, b, 4, 16, 12);
    CHECK(r1.max_abs_logit_diff == r2.max_abs_logit_diff);
    CHECK(r1.mean_kl == r2.mean_kl);
}

TEST_CASE("init loss table anchors deltas at the original row") {
    const auto model = init_random<float>(toy_config(2), 7);
    const auto corpus = gen_markov_corpus(32, 3, 16384, 0.3);

    const auto solo = init_loss_table({{"original", &model}}, corpus, 4, 1);
    REQUIRE(solo.size() == 1);
    CHECK(solo[0].delta_vs_original == 0.0);

    const auto other = init_random<float>(toy_config(2), 8);
    const auto rows = init_loss_table({{"original", &model}, {"other", &other}}, corpus, 4, 1);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].delta_vs_original == 0.0);
    CHECK(rows[1].delta_vs_original == doctest::Approx(rows[1].loss - rows[0].loss).epsilon(1e-12));

    // permuting the list leaves each row's values unchanged
    const auto swapped = init_loss_table({{"other", &other}, {"original", &model}}, corpus, 4, 1);
    CHECK(swapped[0].model_label == "other");
    CHECK(swapped[0].loss == rows[1].loss);
    CHECK(swapped[0].delta_vs_original == rows[1].delta_vs_original);
    CHECK(swapped[1].loss == rows[0].loss);
    CHECK(swapped[1].delta_vs_original == 0.0);
}

TEST_CASE("tli rows in a loss table match the original to 1e-6") {
    ModelConfig cfg = toy_config(4);
    const auto model = init_random<float>(cfg, 10);
    const auto [tli_store, tli_cfg, rep] = tli_inject(model_to_store(model), cfg, 6);
    const auto tli_model = model_from_store(tli_store, tli_cfg);
    const auto corpus = gen_markov_corpus(32, 4, 16384, 0.3);
    const auto rows = init_loss_table({{"original", &model}, {"tli", &tli_model}}, corpus, 8, 2);
    CHECK(std::abs(rows[1].delta_vs_original) <= 1e-6);
}

TEST_CASE("csv export is header-stable, 9-digit, and byte-deterministic") {
    const std::vector<InitLossRow> rows = {{"original", 3.2217164446, 0.0},
                                           {"dus", 3.2219046888, 0.0001882442}};
    const fs::path a = fs::temp_directory_path() / "tli_eval_a.csv";
    const fs::path b = fs::temp_directory_path() / "tli_eval_b.csv";
    export_report(rows, ReportFormat::csv, a);
    export_report(rows, ReportFormat::csv, b);
    const std::string text = slurp(a);
    CHECK(text == slurp(b));
    CHECK(text.find("model_label,loss,delta_vs_original") != std::string::npos);
    CHECK(text.find("3.22171644") != std::string::npos);  // 9 significant digits
    CHECK(text.find("0.000188244") != std::string::npos);
}

TEST_CASE("empty row set exports a header-only csv") {
    const fs::path p = fs::temp_directory_path() / "tli_eval_empty.csv";
    export_report(std::vector<InitLossRow>{}, ReportFormat::csv, p);
    const std::string text = slurp(p);
    CHECK(text.find("model_label,loss,delta_vs_original\n") != std::string::npos);
    std::size_t lines = 0;
    for (char c : text) lines += c == '\n';
    CHECK(lines == 2);  // note line + header only
}

TEST_CASE("exports re-parse to the written values") {
    const std::vector<InitLossRow> rows = {{"original", 2.455532951, 0.0},
                                           {"tli", 2.455532951, 0.0}};
    const fs::path p = fs::temp_directory_path() / "tli_eval_reparse.csv";
    export_report(rows, ReportFormat::csv, p);
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);  // note
    std::getline(in, line);  // header
    std::getline(in, line);  // first row
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    CHECK(line.substr(0, c1) == "original");
    CHECK(std::abs(std::stod(line.substr(c1 + 1, c2 - c1 - 1)) - rows[0].loss) <= 1e-8);
}

TEST_CASE("json export carries the metrics note and round-trips") {
    const std::vector<EquivalenceResult> results = {{1.25e-7, 3.2e-10, 32}};
    const fs::path p = fs::temp_directory_path() / "tli_eval.json";
    export_report(results, ReportFormat::json, p);
    const std::string text = slurp(p);
    CHECK(text.find("\"note\"") != std::string::npos);
    CHECK(text.find("1.25e-07") != std::string::npos);
    CHECK(text.find("\"sequences_tested\": 32") != std::string::npos);
}

TEST_CASE("train report export writes the loss curve") {
    TrainReport report;
    report.stage = 1;
    report.steps = 3;
    report.loss_curve = {{0, 4.17}, {1, 4.05}, {2, 3.99}};
    report.updated_param_keys = {"model.layers.4.self_attn.o_proj.weight"};
    report.wall_time = 1.5;
    const fs::path csv = fs::temp_directory_path() / "tli_train.csv";
    export_report(report, ReportFormat::csv, csv);
    const std::string text = slurp(csv);
    CHECK(text.find("step,loss") != std::string::npos);
    CHECK(text.find("0,4.17") != std::string::npos);
    CHECK(text.find("2,3.99") != std::string::npos);

    const fs::path js = fs::temp_directory_path() / "tli_train.json";
    export_report(report, ReportFormat::json, js);
    const std::string jtext = slurp(js);
    CHECK(jtext.find("\"stage\": 1") != std::string::npos);
    CHECK(jtext.find("model.layers.4.self_attn.o_proj.weight") != std::string::npos);
}
