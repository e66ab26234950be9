// Measurement and reporting: logit equivalence between two checkpoints,
// initialization-loss tables over shared batches, and deterministic
// CSV/JSON export. KL is accumulated in double from f32 logits; reports
// carry loss/KL metrics only, not benchmark-task accuracy.
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tli/model.hpp"
#include "tli/train.hpp"

namespace tli {

struct EquivalenceResult {
    double max_abs_logit_diff = 0.0;
    double mean_kl = 0.0;  // nats, first model as reference
    int sequences_tested = 0;
};

// Evaluates both models on the same seeded random token sequences.
EquivalenceResult logit_equivalence(const ToyModel<float>& a, const ToyModel<float>& b,
                                    int n_seq, int seq_len, std::uint64_t seed);

struct InitLossRow {
    std::string model_label;
    double loss = 0.0;               // nats
    double delta_vs_original = 0.0;  // loss - reference loss
};

// Mean cross entropy of each model over the same seeded corpus batches.
// The row labeled "original" anchors the deltas; if no such label exists
// the first model is the reference.
std::vector<InitLossRow> init_loss_table(
    const std::vector<std::pair<std::string, const ToyModel<float>*>>& models,
    const MarkovCorpus& corpus, int n_batches, std::uint64_t seed, int batch_size = 8,
    int seq_len = 64);

enum class ReportFormat { csv, json };

// All exports use a stable column order and render floats with 9
// significant digits, so equal inputs produce byte-identical files.
void export_report(const std::vector<InitLossRow>& rows, ReportFormat format,
                   const std::filesystem::path& path);
void export_report(const std::vector<EquivalenceResult>& rows, ReportFormat format,
                   const std::filesystem::path& path);
void export_report(const TrainReport& report, ReportFormat format,
                   const std::filesystem::path& path);

}  // namespace tli
