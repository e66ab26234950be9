#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tli/checkpoint.hpp"
#include "tli/surgery.hpp"

using namespace tli;
namespace fs = std::filesystem;

namespace {

const char* kCli = TLI_CLI_PATH;

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

fs::path work_root() {
    static const fs::path root = [] {
        const fs::path p = fs::temp_directory_path() / "tli_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

RunResult run(const std::string& args) {
    static int counter = 0;
    const fs::path out = work_root() / ("out" + std::to_string(counter) + ".txt");
    const fs::path err = work_root() / ("err" + std::to_string(counter) + ".txt");
    ++counter;
    const std::string cmd =
        std::string(kCli) + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    RunResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    };
    res.out = slurp(out);
    res.err = slurp(err);
    return res;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string toy_flags() {
    return "--vocab 32 --hidden 32 --layers 8 --heads 4 --intermediate 64 --max-seq 128 --seed 3";
}

}  // namespace

TEST_CASE("help is exit 0 and documents flags; unknown flags are exit 1") {
    CHECK(run("--help").exit_code == 0);
    const RunResult inject_help = run("inject --help");
    CHECK(inject_help.exit_code == 0);
    CHECK(inject_help.out.find("--target-layers") != std::string::npos);
    CHECK(inject_help.out.find("--input") != std::string::npos);
    const RunResult train_help = run("train --help");
    CHECK(train_help.exit_code == 0);
    CHECK(train_help.out.find("--stage") != std::string::npos);

    CHECK(run("inject --no-such-flag").exit_code == 1);
    CHECK(run("frobnicate").exit_code == 1);
}

TEST_CASE("new-toy is byte-deterministic and validates flags") {
    const fs::path a = work_root() / "toy_a";
    const fs::path b = work_root() / "toy_b";
    CHECK(run("new-toy " + toy_flags() + " --out " + a.string()).exit_code == 0);
    CHECK(run("new-toy " + toy_flags() + " --out " + b.string()).exit_code == 0);
    CHECK(file_bytes(a / kModelFileName) == file_bytes(b / kModelFileName));
    CHECK(file_bytes(a / kConfigFileName) == file_bytes(b / kConfigFileName));

    const RunResult bad = run("new-toy --layers 0 --out " + (work_root() / "toy_zero").string());
    CHECK(bad.exit_code == 1);
    CHECK(!bad.err.empty());
}

TEST_CASE("inject writes the upscaled checkpoint and report") {
    const fs::path orig = work_root() / "toy_a";
    const fs::path out = work_root() / "tli10";
    const std::string before = file_bytes(orig / kModelFileName);

    const RunResult r = run("inject --input " + orig.string() + " --target-layers 10 --out " + out.string());
    CHECK(r.exit_code == 0);

    const auto [store, cfg] = load(out);
    CHECK(cfg.num_layers == 10);
    CHECK(cfg.requires_grad_layers == std::vector<int>{4, 9});
    CHECK(store.entries.size() == 93);
    CHECK(fs::exists(out / "surgery-report.json"));

    // inputs are never mutated
    CHECK(file_bytes(orig / kModelFileName) == before);
}

TEST_CASE("inject exit codes follow the divisibility rule") {
    const fs::path orig = work_root() / "toy_a";
    const RunResult bad = run("inject --input " + orig.string() + " --target-layers 11 --out " +
                              (work_root() / "tli11").string());
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.find("divide") != std::string::npos);

    // 8 -> 9 is a valid single-injection plan
    const RunResult ok = run("inject --input " + orig.string() + " --target-layers 9 --out " +
                             (work_root() / "tli9").string());
    CHECK(ok.exit_code == 0);
    const auto [store9, cfg9] = load(work_root() / "tli9");
    CHECK(cfg9.requires_grad_layers == std::vector<int>{8});

    CHECK(run("inject --input " + (work_root() / "absent").string() + " --target-layers 10 --out " +
              (work_root() / "x").string())
              .exit_code == 2);
}

TEST_CASE("dus records the top/bottom layer sequence in the report") {
    const fs::path orig = work_root() / "toy_a";
    const fs::path out = work_root() / "dus10";
    CHECK(run("dus --input " + orig.string() + " --target-layers 10 --out " + out.string()).exit_code == 0);

    std::ifstream in(out / "surgery-report.json");
    std::ostringstream os;
    os << in.rdbuf();
    const SurgeryReport report = report_from_json(os.str());
    CHECK(report.method == "dus");
    CHECK(report.layer_sources == std::vector<int>{0, 1, 2, 3, 4, 3, 4, 5, 6, 7});
    CHECK(run("dus --input " + orig.string() + " --target-layers 9 --out " +
              (work_root() / "dus9").string())
              .exit_code == 1);
}

TEST_CASE("verify passes tli output and fails dus output") {
    const fs::path orig = work_root() / "toy_a";
    const RunResult ok = run("verify --original " + orig.string() + " --upscaled " +
                             (work_root() / "tli10").string() + " --seqs 4 --seq-len 32");
    CHECK(ok.exit_code == 0);
    CHECK(ok.out.find("PASS") != std::string::npos);

    const RunResult fail = run("verify --original " + orig.string() + " --upscaled " +
                               (work_root() / "dus10").string() + " --seqs 4 --seq-len 32");
    CHECK(fail.exit_code == 3);
    CHECK(fail.out.find("FAIL") != std::string::npos);
}

TEST_CASE("verify rejects mismatched vocabularies with exit 1") {
    const fs::path other = work_root() / "toy_v16";
    CHECK(run("new-toy --vocab 16 --hidden 32 --layers 8 --heads 4 --intermediate 64 --seed 3 --out " +
              other.string())
              .exit_code == 0);
    CHECK(run("verify --original " + other.string() + " --upscaled " + (work_root() / "tli10").string() +
              " --seqs 2 --seq-len 16")
              .exit_code == 1);
}

TEST_CASE("train demands a trainable set and honors stage 1 freezing") {
    const fs::path corpus = work_root() / "corpus.bin";
    CHECK(run("new-corpus --vocab 32 --length 20000 --seed 5 --out " + corpus.string()).exit_code == 0);

    // dus checkpoints carry no requires_grad_layers: stage 1 refuses
    const RunResult nothing = run("train --model " + (work_root() / "dus10").string() + " --corpus " +
                                  corpus.string() + " --stage 1 --steps 1 --out " +
                                  (work_root() / "t_dus").string());
    CHECK(nothing.exit_code == 1);
    CHECK(nothing.err.find("nothing to train") != std::string::npos);

    // stage 1 on the tli checkpoint trains only the injected layers
    const fs::path tli10 = work_root() / "tli10";
    const fs::path trained = work_root() / "tli10_s1";
    const RunResult r = run("train --model " + tli10.string() + " --corpus " + corpus.string() +
                            " --stage 1 --steps 10 --batch 2 --seq-len 16 --seed 4 --out " +
                            trained.string() + " --report " + (work_root() / "s1.csv").string());
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(work_root() / "s1.csv"));

    const auto [in_store, in_cfg] = load(tli10);
    const auto [out_store, out_cfg] = load(trained);
    for (const auto& [key, tensor] : in_store.entries) {
        const auto idx = layer_index_of(key);
        const bool injected = idx && (*idx == 4 || *idx == 9);
        if (injected) continue;
        CHECK(bits_equal(tensor, out_store.get(key)));
    }
}

TEST_CASE("train with zero steps copies the checkpoint byte-identically") {
    const fs::path tli10 = work_root() / "tli10";
    const fs::path out = work_root() / "tli10_noop";
    const RunResult r = run("train --model " + tli10.string() + " --corpus " +
                            (work_root() / "corpus.bin").string() + " --stage 1 --steps 0 --out " +
                            out.string());
    CHECK(r.exit_code == 0);
    CHECK(file_bytes(tli10 / kModelFileName) == file_bytes(out / kModelFileName));
}

TEST_CASE("compare emits the loss table") {
    const fs::path orig = work_root() / "toy_a";
    const fs::path report = work_root() / "table.csv";
    const RunResult solo = run("compare --models " + orig.string() + " --labels original --corpus " +
                               (work_root() / "corpus.bin").string() +
                               " --batches 2 --batch 2 --seq-len 16 --out " + report.string());
    CHECK(solo.exit_code == 0);
    const std::string text = file_bytes(report);
    CHECK(text.find("original,") != std::string::npos);
    CHECK(text.find(",0\n") != std::string::npos);  // delta zero

    const RunResult pair = run("compare --models " + orig.string() + "," +
                               (work_root() / "tli10").string() + " --labels original,tli --corpus " +
                               (work_root() / "corpus.bin").string() +
                               " --batches 2 --batch 2 --seq-len 16 --out " + report.string());
    CHECK(pair.exit_code == 0);
    CHECK(file_bytes(report).find("tli,") != std::string::npos);
}

TEST_CASE("default flags produce a loadable model whose forward runs") {
    const fs::path out = work_root() / "toy_defaults";
    CHECK(run("new-toy --out " + out.string()).exit_code == 0);
    // self-verification loads the checkpoint and runs the forward pass
    const RunResult r = run("verify --original " + out.string() + " --upscaled " + out.string() +
                            " --seqs 2 --seq-len 16");
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("max_abs_logit_diff: 0") != std::string::npos);
}

TEST_CASE("inspect flags injected layers") {
    const RunResult r = run("inspect --model " + (work_root() / "tli10").string());
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("layer 4: injected (zero o_proj/down_proj)") != std::string::npos);
    CHECK(r.out.find("layer 9: injected (zero o_proj/down_proj)") != std::string::npos);
    CHECK(r.out.find("requires_grad_layers: [4,9]") != std::string::npos);
    CHECK(r.out.find("layer 0: dense") != std::string::npos);
}
