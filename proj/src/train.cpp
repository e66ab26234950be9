#include "tli/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tli/rng.hpp"

namespace tli {

using nlohmann::json;

MarkovCorpus gen_markov_corpus(int vocab_size, std::uint64_t seed, std::int64_t length,
                               double concentration) {
    if (vocab_size < 2) throw ConfigError("markov corpus needs vocab_size >= 2");
    if (length < 1) throw ConfigError("markov corpus needs length >= 1");
    if (concentration <= 0) throw ConfigError("markov corpus needs concentration > 0");

    MarkovCorpus corpus;
    corpus.vocab_size = vocab_size;
    corpus.concentration = concentration;
    corpus.seed = seed;

    Rng rng(seed);
    const Index v = vocab_size;
    corpus.transition = Tensor<double>({v, v});
    for (Index i = 0; i < v; ++i) {
        double sum = 0.0;
        for (Index j = 0; j < v; ++j) {
            const double g = rng.gamma(concentration);
            corpus.transition.at(i, j) = g;
            sum += g;
        }
        for (Index j = 0; j < v; ++j) corpus.transition.at(i, j) /= sum;
    }

    corpus.tokens.reserve(static_cast<std::size_t>(length));
    std::int32_t state = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(v)));
    corpus.tokens.push_back(state);
    for (std::int64_t n = 1; n < length; ++n) {
        const double u = rng.uniform();
        double cum = 0.0;
        std::int32_t next = static_cast<std::int32_t>(v - 1);
        for (Index j = 0; j < v; ++j) {
            cum += corpus.transition.at(state, j);
            if (u < cum) {
                next = static_cast<std::int32_t>(j);
                break;
            }
        }
        corpus.tokens.push_back(next);
        state = next;
    }
    return corpus;
}

double entropy_rate(const MarkovCorpus& corpus) {
    const Index v = corpus.vocab_size;
    if (corpus.transition.rank() != 2 || corpus.transition.dim(0) != v || corpus.transition.dim(1) != v) {
        throw ConfigError("corpus transition matrix has wrong shape");
    }
    std::vector<double> pi(static_cast<std::size_t>(v), 1.0 / double(v));
    std::vector<double> next(static_cast<std::size_t>(v), 0.0);
    const int max_iters = 200000;
    bool converged = false;
    for (int it = 0; it < max_iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (Index i = 0; i < v; ++i) {
            const double p = pi[static_cast<std::size_t>(i)];
            for (Index j = 0; j < v; ++j) next[static_cast<std::size_t>(j)] += p * corpus.transition.at(i, j);
        }
        double diff = 0.0;
        for (Index j = 0; j < v; ++j) diff += std::abs(next[static_cast<std::size_t>(j)] - pi[static_cast<std::size_t>(j)]);
        pi.swap(next);
        if (diff <= 1e-12) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        throw NumericError("stationary distribution power iteration did not converge; the chain may be periodic or reducible");
    }
    double h = 0.0;
    for (Index i = 0; i < v; ++i) {
        double row_h = 0.0;
        for (Index j = 0; j < v; ++j) {
            const double p = corpus.transition.at(i, j);
            if (p > 0.0) row_h -= p * std::log(p);
        }
        h += pi[static_cast<std::size_t>(i)] * row_h;
    }
    return h;
}

// --------------------------------------------------------------------------
// corpus persistence
// --------------------------------------------------------------------------

void save_corpus(const MarkovCorpus& corpus, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream bin(path, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot open for writing: " + path.string());
    for (std::int32_t t : corpus.tokens) {
        unsigned char b[4] = {static_cast<unsigned char>(t & 0xFF),
                              static_cast<unsigned char>((t >> 8) & 0xFF),
                              static_cast<unsigned char>((t >> 16) & 0xFF),
                              static_cast<unsigned char>((t >> 24) & 0xFF)};
        bin.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!bin) throw IoError("write failed: " + path.string());
    bin.close();

    json j;
    j["vocab_size"] = corpus.vocab_size;
    j["order"] = corpus.order;
    j["concentration"] = corpus.concentration;
    j["seed"] = corpus.seed;
    json rows = json::array();
    for (Index i = 0; i < corpus.vocab_size; ++i) {
        json row = json::array();
        for (Index k = 0; k < corpus.vocab_size; ++k) row.push_back(corpus.transition.at(i, k));
        rows.push_back(std::move(row));
    }
    j["transition"] = std::move(rows);
    std::ofstream side(path.string() + ".json", std::ios::trunc);
    if (!side) throw IoError("cannot open for writing: " + path.string() + ".json");
    side << j.dump(2) << "\n";
    if (!side) throw IoError("write failed: " + path.string() + ".json");
}

MarkovCorpus load_corpus(const std::filesystem::path& path) {
    const std::filesystem::path side_path = path.string() + ".json";
    if (!std::filesystem::exists(path)) throw IoError("missing corpus file: " + path.string());
    if (!std::filesystem::exists(side_path)) throw IoError("missing corpus sidecar: " + side_path.string());

    MarkovCorpus corpus;
    {
        std::ifstream side(side_path);
        std::ostringstream os;
        os << side.rdbuf();
        json j;
        try {
            j = json::parse(os.str());
        } catch (const json::exception& e) {
            throw FormatError(std::string("corpus sidecar is not valid JSON: ") + e.what());
        }
        try {
            j.at("vocab_size").get_to(corpus.vocab_size);
            j.at("order").get_to(corpus.order);
            j.at("concentration").get_to(corpus.concentration);
            j.at("seed").get_to(corpus.seed);
            const auto& rows = j.at("transition");
            const Index v = corpus.vocab_size;
            if (static_cast<Index>(rows.size()) != v) throw FormatError("corpus transition row count mismatch");
            corpus.transition = Tensor<double>({v, v});
            for (Index i = 0; i < v; ++i) {
                const auto& row = rows[static_cast<std::size_t>(i)];
                if (static_cast<Index>(row.size()) != v) throw FormatError("corpus transition column count mismatch");
                for (Index k = 0; k < v; ++k) corpus.transition.at(i, k) = row[static_cast<std::size_t>(k)].get<double>();
            }
        } catch (const json::exception& e) {
            throw FormatError(std::string("corpus sidecar field error: ") + e.what());
        }
    }

    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw IoError("cannot open: " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (bytes.size() % 4 != 0) throw FormatError("corpus token file length is not a multiple of 4");
    corpus.tokens.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < corpus.tokens.size(); ++i) {
        const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + 4 * i);
        corpus.tokens[i] = static_cast<std::int32_t>(static_cast<std::uint32_t>(b[0]) |
                                                     (static_cast<std::uint32_t>(b[1]) << 8) |
                                                     (static_cast<std::uint32_t>(b[2]) << 16) |
                                                     (static_cast<std::uint32_t>(b[3]) << 24));
    }
    for (std::int32_t t : corpus.tokens) {
        if (t < 0 || t >= corpus.vocab_size) {
            throw FormatError("corpus token " + std::to_string(t) + " out of range [0, " +
                              std::to_string(corpus.vocab_size) + ")");
        }
    }
    return corpus;
}

// --------------------------------------------------------------------------
// training
// --------------------------------------------------------------------------

namespace {

TokenBatch draw_batch(const MarkovCorpus& corpus, const TrainHyper& hyper, Rng& rng) {
    const std::int64_t len = static_cast<std::int64_t>(corpus.tokens.size());
    const std::int64_t window = hyper.seq_len;
    if (window > len) {
        throw ConfigError("corpus too short (" + std::to_string(len) + " tokens) for seq_len " +
                          std::to_string(hyper.seq_len));
    }
    TokenBatch batch;
    batch.batch = hyper.batch;
    batch.seq = hyper.seq_len;
    batch.tokens.reserve(static_cast<std::size_t>(hyper.batch * hyper.seq_len));
    for (int b = 0; b < hyper.batch; ++b) {
        const std::int64_t offset =
            static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(len - window + 1)));
        for (std::int64_t s = 0; s < window; ++s) {
            batch.tokens.push_back(corpus.tokens[static_cast<std::size_t>(offset + s)]);
        }
    }
    return batch;
}

}  // namespace

void adamw_update(Tensorf& param, const Tensorf& grad, Tensorf& m, Tensorf& v, int t,
                  const TrainHyper& hyper) {
    const double bc1 = 1.0 - std::pow(hyper.beta1, double(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, double(t));
    for (Index i = 0; i < grad.numel(); ++i) {
        const float gi = grad[i];
        m[i] = float(hyper.beta1) * m[i] + float(1.0 - hyper.beta1) * gi;
        v[i] = float(hyper.beta2) * v[i] + float(1.0 - hyper.beta2) * gi * gi;
        const double m_hat = double(m[i]) / bc1;
        const double v_hat = double(v[i]) / bc2;
        param[i] = float(double(param[i]) - hyper.lr * (m_hat / (std::sqrt(v_hat) + hyper.adam_eps) +
                                                        hyper.weight_decay * double(param[i])));
    }
}

std::pair<ToyModel<float>, TrainReport> train(const ToyModel<float>& model,
                                              const MarkovCorpus& corpus,
                                              int stage,
                                              const TrainHyper& hyper) {
    if (hyper.steps < 0) throw ConfigError("steps must be >= 0");
    if (hyper.batch < 1 || hyper.seq_len < 2) throw ConfigError("batch must be >= 1 and seq_len >= 2");
    if (hyper.lr <= 0) throw ConfigError("lr must be positive");
    if (corpus.vocab_size != model.config.vocab_size) {
        throw ConfigError("corpus vocab " + std::to_string(corpus.vocab_size) +
                          " does not match model vocab " + std::to_string(model.config.vocab_size));
    }
    const FreezeMask mask = apply_freeze_stage(model.config, stage);

    const auto t0 = std::chrono::steady_clock::now();
    ToyModel<float> trained = model;
    TrainReport report;
    report.stage = stage;
    report.steps = hyper.steps;

    GradMap<float> m_state, v_state;
    for (const auto& key : mask.trainable_keys()) {
        const Tensorf* p = param_by_key(trained, key);
        m_state.emplace(key, Tensorf::zeros(p->shape()));
        v_state.emplace(key, Tensorf::zeros(p->shape()));
    }

    Rng batch_rng(hyper.seed);
    for (int step = 0; step < hyper.steps; ++step) {
        const TokenBatch batch = draw_batch(corpus, hyper, batch_rng);
        auto [loss, grads] = loss_and_grads(trained, batch, mask);
        if (!std::isfinite(loss)) {
            throw TrainError("training diverged at step " + std::to_string(step) +
                                 " (loss is not finite)",
                             step - 1);
        }
        report.loss_curve.emplace_back(step, loss);

        // global-norm clip at clip_norm
        double sq = 0.0;
        for (const auto& [key, g] : grads) {
            for (Index i = 0; i < g.numel(); ++i) sq += double(g[i]) * double(g[i]);
        }
        const double gnorm = std::sqrt(sq);
        const float scale = gnorm > hyper.clip_norm ? float(hyper.clip_norm / gnorm) : 1.0f;

        for (auto& [key, g] : grads) {
            if (scale != 1.0f) {
                for (Index i = 0; i < g.numel(); ++i) g[i] *= scale;
            }
            adamw_update(*param_by_key(trained, key), g, m_state.at(key), v_state.at(key), step + 1,
                         hyper);
        }
    }

    for_each_param(model, [&](const std::string& key, const Tensorf& before) {
        const Tensorf* after = param_by_key(trained, key);
        if (!bits_equal(before, *after)) report.updated_param_keys.push_back(key);
    });
    report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(trained), std::move(report)};
}

std::string train_report_to_json(const TrainReport& report) {
    json j;
    j["stage"] = report.stage;
    j["steps"] = report.steps;
    json curve = json::array();
    for (const auto& [step, loss] : report.loss_curve) curve.push_back({json(step), json(loss)});
    j["loss_curve"] = std::move(curve);
    j["updated_param_keys"] = report.updated_param_keys;
    j["wall_time"] = report.wall_time;
    return j.dump(2) + "\n";
}

}  // namespace tli
