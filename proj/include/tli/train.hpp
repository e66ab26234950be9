// Training harness: an order-1 Markov token source with an analytically
// known entropy rate (the loss floor), plus the two-stage schedule —
// stage 1 trains only the layers listed in requires_grad_layers, stage 2
// trains everything. Optimizer is AdamW with a fixed global-norm clip.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tli/model.hpp"
#include "tli/tensor.hpp"

namespace tli {

struct MarkovCorpus {
    int vocab_size = 0;
    int order = 1;
    double concentration = 0.0;
    std::uint64_t seed = 0;
    Tensor<double> transition;          // [V x V], rows sum to 1
    std::vector<std::int32_t> tokens;
};

// Rows drawn from a symmetric Dirichlet(concentration); the chain is then
// sampled with the same seed, so regeneration is bit-identical.
MarkovCorpus gen_markov_corpus(int vocab_size, std::uint64_t seed, std::int64_t length,
                               double concentration);

// Stationary distribution by power iteration (to 1e-12 L1), then
// H = sum_i pi_i sum_j -P_ij ln P_ij, in nats.
double entropy_rate(const MarkovCorpus& corpus);

// Binary token file (raw little-endian int32) plus a <path>.json sidecar
// carrying vocab, seed and the transition matrix.
void save_corpus(const MarkovCorpus& corpus, const std::filesystem::path& path);
MarkovCorpus load_corpus(const std::filesystem::path& path);

struct TrainHyper {
    double lr = 1e-3;
    int steps = 0;
    int batch = 8;
    int seq_len = 32;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
};

struct TrainReport {
    int stage = 0;
    int steps = 0;
    std::vector<std::pair<int, double>> loss_curve;  // (step, training loss in nats)
    std::vector<std::string> updated_param_keys;
    double wall_time = 0.0;                          // seconds; excluded from determinism
};

// One AdamW step (decoupled weight decay, bias-corrected moments) on a
// single tensor; t counts from 1.
void adamw_update(Tensorf& param, const Tensorf& grad, Tensorf& m, Tensorf& v, int t,
                  const TrainHyper& hyper);

// Returns the trained model and the report; the input model is untouched.
// Frozen parameters stay bit-identical. Loss turning NaN raises TrainError
// with the last finite step.
std::pair<ToyModel<float>, TrainReport> train(const ToyModel<float>& model,
                                              const MarkovCorpus& corpus,
                                              int stage,
                                              const TrainHyper& hyper);

std::string train_report_to_json(const TrainReport& report);

}  // namespace tli
