// tli: build, upscale, verify, train and compare toy decoder checkpoints.
//
// Exit codes: 0 success, 1 validation/plan error, 2 I/O error,
// 3 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tli/checkpoint.hpp"
#include "tli/eval.hpp"
#include "tli/model.hpp"
#include "tli/surgery.hpp"
#include "tli/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitVerifyFailed = 3;

struct NewToyArgs {
    int vocab = 64, hidden = 64, layers = 8, heads = 4, kv_heads = 0, intermediate = 256;
    double rope_theta = 10000.0, eps = 1e-5;
    int max_seq = 256;
    std::uint64_t seed = 42;
    std::string out;
};

struct NewCorpusArgs {
    int vocab = 64;
    std::int64_t length = 500000;
    std::uint64_t seed = 7;
    double concentration = 0.3;
    std::string out;
};

struct UpscaleArgs {
    std::string input, out;
    int target_layers = 0;
};

struct VerifyArgs {
    std::string original, upscaled;
    double tol = 1e-5;
    int seqs = 32, seq_len = 128;
    std::uint64_t seed = 1234;
};

struct TrainArgs {
    std::string model, corpus, out, report;
    int stage = 1, steps = 200, batch = 8, seq_len = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

struct CompareArgs {
    std::vector<std::string> models;
    std::vector<std::string> labels;
    std::string corpus, out;
    int batches = 16, batch = 8, seq_len = 64;
    std::uint64_t seed = 99;
};

struct InspectArgs {
    std::string model;
};

tli::ReportFormat format_from_path(const fs::path& path) {
    return path.extension() == ".json" ? tli::ReportFormat::json : tli::ReportFormat::csv;
}

int run_new_toy(const NewToyArgs& args) {
    if (args.layers < 1) {
        std::cerr << "error: --layers must be >= 1\n";
        return kExitUsage;
    }
    tli::ModelConfig config;
    config.vocab_size = args.vocab;
    config.hidden_size = args.hidden;
    config.num_layers = args.layers;
    config.num_heads = args.heads;
    config.num_kv_heads = args.kv_heads > 0 ? args.kv_heads : args.heads;
    config.intermediate_size = args.intermediate;
    config.rope_theta = args.rope_theta;
    config.rms_norm_eps = args.eps;
    config.max_seq_len = args.max_seq;
    config.validate();

    const auto model = tli::init_random<float>(config, args.seed);
    tli::save(tli::model_to_store(model), config, args.out);
    std::cout << "wrote " << args.out << " (" << 9 * config.num_layers + 3 << " tensors, seed "
              << args.seed << ")\n";
    return kExitOk;
}

int run_new_corpus(const NewCorpusArgs& args) {
    const auto corpus = tli::gen_markov_corpus(args.vocab, args.seed, args.length, args.concentration);
    tli::save_corpus(corpus, args.out);
    std::cout << "wrote " << args.out << " (" << corpus.tokens.size() << " tokens, entropy rate "
              << tli::entropy_rate(corpus) << " nats)\n";
    return kExitOk;
}

int run_upscale(const UpscaleArgs& args, bool dus) {
    auto [store, config] = tli::load(args.input);
    auto [out_store, out_config, report] =
        dus ? tli::dus_upscale(store, config, args.target_layers)
            : tli::tli_inject(store, config, args.target_layers);
    tli::save(out_store, out_config, args.out);
    std::ofstream rf(fs::path(args.out) / "surgery-report.json", std::ios::trunc);
    if (!rf) throw tli::IoError("cannot write surgery report in " + args.out);
    rf << tli::report_to_json(report);
    std::cout << report.method << ": " << report.plan.l_orig << " -> " << report.plan.l_new
              << " layers, " << report.keys_written << " keys written, " << report.zeroed_keys.size()
              << " zeroed";
    if (!report.requires_grad_layers.empty()) {
        std::cout << ", requires_grad_layers [";
        for (std::size_t i = 0; i < report.requires_grad_layers.size(); ++i) {
            std::cout << (i ? "," : "") << report.requires_grad_layers[i];
        }
        std::cout << "]";
    }
    std::cout << "\n";
    return kExitOk;
}

int run_verify(const VerifyArgs& args) {
    auto [orig_store, orig_config] = tli::load(args.original);
    auto [up_store, up_config] = tli::load(args.upscaled);

    tli::SurgeryReport report;
    const fs::path report_path = fs::path(args.upscaled) / "surgery-report.json";
    if (fs::exists(report_path)) {
        std::ifstream in(report_path);
        std::ostringstream os;
        os << in.rdbuf();
        report = tli::report_from_json(os.str());
    } else {
        report = tli::reconstruct_report(orig_config, up_config);
    }

    const auto violations = tli::verify_surgery(orig_store, up_store, report, orig_config, up_config);
    const auto orig_model = tli::model_from_store(orig_store, orig_config);
    const auto up_model = tli::model_from_store(up_store, up_config);
    const auto eq = tli::logit_equivalence(orig_model, up_model, args.seqs, args.seq_len, args.seed);

    std::cout << "structural violations: " << violations.size() << "\n";
    for (const auto& v : violations) std::cout << "  - " << v << "\n";
    std::printf("max_abs_logit_diff: %.9g\nmean_kl: %.9g\nsequences_tested: %d\n",
                eq.max_abs_logit_diff, eq.mean_kl, eq.sequences_tested);

    const bool pass = violations.empty() && eq.max_abs_logit_diff <= args.tol;
    std::cout << (pass ? "PASS" : "FAIL") << " (tol " << args.tol << ")\n";
    return pass ? kExitOk : kExitVerifyFailed;
}

int run_train(const TrainArgs& args) {
    auto [store, config] = tli::load(args.model);
    const auto model = tli::model_from_store(store, config);
    const auto corpus = tli::load_corpus(args.corpus);

    tli::TrainHyper hyper;
    hyper.lr = args.lr;
    hyper.steps = args.steps;
    hyper.batch = args.batch;
    hyper.seq_len = args.seq_len;
    hyper.seed = args.seed;

    auto [trained, report] = tli::train(model, corpus, args.stage, hyper);
    tli::save(tli::model_to_store(trained), trained.config, args.out);
    if (!args.report.empty()) {
        tli::export_report(report, format_from_path(args.report), args.report);
    }
    const double final_loss = report.loss_curve.empty() ? 0.0 : report.loss_curve.back().second;
    std::cout << "stage " << args.stage << ": " << args.steps << " steps, "
              << report.updated_param_keys.size() << " tensors updated";
    if (!report.loss_curve.empty()) std::printf(", final loss %.6f nats", final_loss);
    std::cout << "\nwrote " << args.out << "\n";
    return kExitOk;
}

int run_compare(const CompareArgs& args) {
    if (!args.labels.empty() && args.labels.size() != args.models.size()) {
        std::cerr << "error: --labels count must match --models count\n";
        return kExitUsage;
    }
    std::vector<tli::ToyModel<float>> loaded;
    loaded.reserve(args.models.size());
    for (const auto& dir : args.models) {
        auto [store, config] = tli::load(dir);
        loaded.push_back(tli::model_from_store(store, config));
    }
    std::vector<std::pair<std::string, const tli::ToyModel<float>*>> models;
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        const std::string label = args.labels.empty()
                                      ? fs::path(args.models[i]).filename().string()
                                      : args.labels[i];
        models.emplace_back(label, &loaded[i]);
    }
    const auto corpus = tli::load_corpus(args.corpus);
    const auto rows =
        tli::init_loss_table(models, corpus, args.batches, args.seed, args.batch, args.seq_len);
    tli::export_report(rows, format_from_path(args.out), args.out);
    for (const auto& row : rows) {
        std::printf("%-16s loss %.6f  delta %+.6f\n", row.model_label.c_str(), row.loss,
                    row.delta_vs_original);
    }
    std::cout << "wrote " << args.out << "\n";
    return kExitOk;
}

int run_inspect(const InspectArgs& args) {
    auto [store, config] = tli::load(args.model);
    std::cout << "layers: " << config.num_layers << "\n";
    std::cout << "vocab_size: " << config.vocab_size << ", hidden_size: " << config.hidden_size
              << ", heads: " << config.num_heads << "/" << config.num_kv_heads
              << ", intermediate_size: " << config.intermediate_size << "\n";
    std::cout << "tensors: " << store.entries.size() << "\n";
    std::cout << "requires_grad_layers: [";
    for (std::size_t i = 0; i < config.requires_grad_layers.size(); ++i) {
        std::cout << (i ? "," : "") << config.requires_grad_layers[i];
    }
    std::cout << "]\n";
    for (int l = 0; l < config.num_layers; ++l) {
        const bool zero_o = tli::all_zero(store.get(tli::layer_key(l, "self_attn.o_proj.weight")));
        const bool zero_down = tli::all_zero(store.get(tli::layer_key(l, "mlp.down_proj.weight")));
        std::cout << "layer " << l << ": ";
        if (zero_o && zero_down) {
            std::cout << "injected (zero o_proj/down_proj)";
        } else if (zero_o || zero_down) {
            std::cout << (zero_o ? "zero o_proj" : "zero down_proj");
        } else {
            std::cout << "dense";
        }
        std::cout << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy decoder checkpoint toolkit: depth upscaling via layer injection (tli) or "
                 "top/bottom duplication (dus), with verification and two-stage training"};
    app.require_subcommand(1);

    NewToyArgs new_toy;
    auto* cmd_new_toy = app.add_subcommand("new-toy", "create a seeded random toy checkpoint");
    cmd_new_toy->add_option("--vocab", new_toy.vocab, "vocabulary size")->capture_default_str();
    cmd_new_toy->add_option("--hidden", new_toy.hidden, "hidden size")->capture_default_str();
    cmd_new_toy->add_option("--layers", new_toy.layers, "decoder layer count")->capture_default_str();
    cmd_new_toy->add_option("--heads", new_toy.heads, "attention heads")->capture_default_str();
    cmd_new_toy->add_option("--kv-heads", new_toy.kv_heads, "kv heads (default: same as --heads)");
    cmd_new_toy->add_option("--intermediate", new_toy.intermediate, "mlp intermediate size")
        ->capture_default_str();
    cmd_new_toy->add_option("--rope-theta", new_toy.rope_theta, "rotary base")->capture_default_str();
    cmd_new_toy->add_option("--eps", new_toy.eps, "rms norm epsilon")->capture_default_str();
    cmd_new_toy->add_option("--max-seq", new_toy.max_seq, "max sequence length")->capture_default_str();
    cmd_new_toy->add_option("--seed", new_toy.seed, "init seed")->capture_default_str();
    cmd_new_toy->add_option("--out", new_toy.out, "output checkpoint directory")->required();

    NewCorpusArgs new_corpus;
    auto* cmd_new_corpus = app.add_subcommand("new-corpus", "generate a markov token corpus");
    cmd_new_corpus->add_option("--vocab", new_corpus.vocab, "vocabulary size")->capture_default_str();
    cmd_new_corpus->add_option("--length", new_corpus.length, "token count")->capture_default_str();
    cmd_new_corpus->add_option("--seed", new_corpus.seed, "generation seed")->capture_default_str();
    cmd_new_corpus->add_option("--concentration", new_corpus.concentration,
                               "dirichlet concentration per transition row")
        ->capture_default_str();
    cmd_new_corpus->add_option("--out", new_corpus.out, "output token file")->required();

    UpscaleArgs inject;
    auto* cmd_inject = app.add_subcommand("inject", "upscale by layer injection (zero-init o/down)");
    cmd_inject->add_option("--input", inject.input, "input checkpoint directory")->required();
    cmd_inject->add_option("--target-layers", inject.target_layers, "new layer count")->required();
    cmd_inject->add_option("--out", inject.out, "output checkpoint directory")->required();

    UpscaleArgs dus;
    auto* cmd_dus = app.add_subcommand("dus", "upscale by duplicating top and bottom layer ranges");
    cmd_dus->add_option("--input", dus.input, "input checkpoint directory")->required();
    cmd_dus->add_option("--target-layers", dus.target_layers, "new layer count")->required();
    cmd_dus->add_option("--out", dus.out, "output checkpoint directory")->required();

    VerifyArgs verify;
    auto* cmd_verify = app.add_subcommand("verify", "check an upscaled checkpoint against its source");
    cmd_verify->add_option("--original", verify.original, "original checkpoint directory")->required();
    cmd_verify->add_option("--upscaled", verify.upscaled, "upscaled checkpoint directory")->required();
    cmd_verify->add_option("--tol", verify.tol, "max abs logit difference tolerance")
        ->capture_default_str();
    cmd_verify->add_option("--seqs", verify.seqs, "random sequences to test")->capture_default_str();
    cmd_verify->add_option("--seq-len", verify.seq_len, "sequence length")->capture_default_str();
    cmd_verify->add_option("--seed", verify.seed, "sequence seed")->capture_default_str();

    TrainArgs train;
    auto* cmd_train = app.add_subcommand("train", "train a checkpoint on a corpus (stage 1 or 2)");
    cmd_train->add_option("--model", train.model, "input checkpoint directory")->required();
    cmd_train->add_option("--corpus", train.corpus, "corpus token file")->required();
    cmd_train->add_option("--stage", train.stage, "1 = injected layers only, 2 = everything")
        ->capture_default_str();
    cmd_train->add_option("--steps", train.steps, "optimizer steps")->capture_default_str();
    cmd_train->add_option("--lr", train.lr, "learning rate")->capture_default_str();
    cmd_train->add_option("--batch", train.batch, "sequences per step")->capture_default_str();
    cmd_train->add_option("--seq-len", train.seq_len, "tokens per sequence")->capture_default_str();
    cmd_train->add_option("--seed", train.seed, "batch sampling seed")->capture_default_str();
    cmd_train->add_option("--out", train.out, "output checkpoint directory")->required();
    cmd_train->add_option("--report", train.report, "write the loss curve here (.csv or .json)");

    CompareArgs compare;
    auto* cmd_compare = app.add_subcommand("compare", "initialization-loss table over shared batches");
    cmd_compare->add_option("--models", compare.models, "checkpoint directories")
        ->required()
        ->delimiter(',');
    cmd_compare->add_option("--labels", compare.labels, "row labels (default: directory names)")
        ->delimiter(',');
    cmd_compare->add_option("--corpus", compare.corpus, "corpus token file")->required();
    cmd_compare->add_option("--batches", compare.batches, "evaluation batches")->capture_default_str();
    cmd_compare->add_option("--batch", compare.batch, "sequences per batch")->capture_default_str();
    cmd_compare->add_option("--seq-len", compare.seq_len, "tokens per sequence")->capture_default_str();
    cmd_compare->add_option("--seed", compare.seed, "batch sampling seed")->capture_default_str();
    cmd_compare->add_option("--out", compare.out, "report path (.csv or .json)")->required();

    InspectArgs inspect;
    auto* cmd_inspect = app.add_subcommand("inspect", "print config and per-layer zero-tensor scan");
    cmd_inspect->add_option("--model", inspect.model, "checkpoint directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (cmd_new_toy->parsed()) return run_new_toy(new_toy);
        if (cmd_new_corpus->parsed()) return run_new_corpus(new_corpus);
        if (cmd_inject->parsed()) return run_upscale(inject, false);
        if (cmd_dus->parsed()) return run_upscale(dus, true);
        if (cmd_verify->parsed()) return run_verify(verify);
        if (cmd_train->parsed()) return run_train(train);
        if (cmd_compare->parsed()) return run_compare(compare);
        if (cmd_inspect->parsed()) return run_inspect(inspect);
    } catch (const tli::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const tli::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitIo;
    } catch (const tli::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
