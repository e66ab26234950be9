#include "tli/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "tli/rng.hpp"

namespace tli {

namespace {

// log-softmax of one f32 logit row, accumulated in double.
std::vector<double> log_softmax_row(const float* row, Index v) {
    double m = row[0];
    for (Index j = 1; j < v; ++j) m = std::max(m, double(row[j]));
    double sum = 0.0;
    for (Index j = 0; j < v; ++j) sum += std::exp(double(row[j]) - m);
    const double lse = m + std::log(sum);
    std::vector<double> out(static_cast<std::size_t>(v));
    for (Index j = 0; j < v; ++j) out[static_cast<std::size_t>(j)] = double(row[j]) - lse;
    return out;
}

}  // namespace

EquivalenceResult logit_equivalence(const ToyModel<float>& a, const ToyModel<float>& b,
                                    int n_seq, int seq_len, std::uint64_t seed) {
    if (a.config.vocab_size != b.config.vocab_size) {
        throw ComparisonError("vocab mismatch: " + std::to_string(a.config.vocab_size) + " vs " +
                              std::to_string(b.config.vocab_size));
    }
    if (seq_len < 1 || seq_len > a.config.max_seq_len || seq_len > b.config.max_seq_len) {
        throw ComparisonError("seq_len " + std::to_string(seq_len) +
                              " outside both models' sequence limits");
    }
    if (n_seq < 1) throw ConfigError("n_seq must be >= 1");

    Rng rng(seed);
    const Index v = a.config.vocab_size;
    EquivalenceResult res;
    res.sequences_tested = n_seq;
    double kl_sum = 0.0;
    std::int64_t positions = 0;
    for (int s = 0; s < n_seq; ++s) {
        std::vector<std::int32_t> tokens(static_cast<std::size_t>(seq_len));
        for (auto& t : tokens) t = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(v)));
        const Tensorf la = forward(a, tokens);
        const Tensorf lb = forward(b, tokens);
        for (Index i = 0; i < la.numel(); ++i) {
            res.max_abs_logit_diff = std::max(res.max_abs_logit_diff, std::abs(double(la[i]) - double(lb[i])));
        }
        for (Index p = 0; p < seq_len; ++p) {
            const auto lpa = log_softmax_row(la.data() + p * v, v);
            const auto lpb = log_softmax_row(lb.data() + p * v, v);
            double kl = 0.0;
            for (Index j = 0; j < v; ++j) {
                const double pa = std::exp(lpa[static_cast<std::size_t>(j)]);
                kl += pa * (lpa[static_cast<std::size_t>(j)] - lpb[static_cast<std::size_t>(j)]);
            }
            // rounding can leave a tiny negative residue on identical models
            if (kl < 0.0 && kl >= -1e-9) kl = 0.0;
            kl_sum += kl;
            ++positions;
        }
    }
    res.mean_kl = kl_sum / double(positions);
    return res;
}

std::vector<InitLossRow> init_loss_table(
    const std::vector<std::pair<std::string, const ToyModel<float>*>>& models,
    const MarkovCorpus& corpus, int n_batches, std::uint64_t seed, int batch_size, int seq_len) {
    if (models.empty()) return {};
    if (n_batches < 1) throw ConfigError("n_batches must be >= 1");
    for (const auto& [label, model] : models) {
        if (model->config.vocab_size != corpus.vocab_size) {
            throw ComparisonError("model '" + label + "' vocab does not match corpus");
        }
        if (seq_len > model->config.max_seq_len) {
            throw ComparisonError("model '" + label + "' cannot take seq_len " + std::to_string(seq_len));
        }
    }

    // identical batches for every model
    std::vector<TokenBatch> batches;
    {
        Rng rng(seed);
        const std::int64_t len = static_cast<std::int64_t>(corpus.tokens.size());
        if (seq_len > len) throw ConfigError("corpus too short for seq_len " + std::to_string(seq_len));
        for (int n = 0; n < n_batches; ++n) {
            TokenBatch batch;
            batch.batch = batch_size;
            batch.seq = seq_len;
            for (int b = 0; b < batch_size; ++b) {
                const std::int64_t offset =
                    static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(len - seq_len + 1)));
                for (int s = 0; s < seq_len; ++s) {
                    batch.tokens.push_back(corpus.tokens[static_cast<std::size_t>(offset + s)]);
                }
            }
            batches.push_back(std::move(batch));
        }
    }

    std::vector<InitLossRow> rows;
    for (const auto& [label, model] : models) {
        double sum = 0.0;
        for (const auto& batch : batches) sum += eval_loss(*model, batch);
        rows.push_back({label, sum / double(n_batches), 0.0});
    }

    std::size_t ref = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].model_label == "original") {
            ref = i;
            break;
        }
    }
    for (auto& row : rows) row.delta_vs_original = row.loss - rows[ref].loss;
    return rows;
}

// --------------------------------------------------------------------------
// export
// --------------------------------------------------------------------------

namespace {

constexpr const char* kMetricsNote =
    "metrics are cross-entropy loss (nats) and KL divergence computed on synthetic batches; "
    "no benchmark-task accuracy is measured";

std::string fmt9(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void export_report(const std::vector<InitLossRow>& rows, ReportFormat format,
                   const std::filesystem::path& path) {
    std::string text;
    if (format == ReportFormat::csv) {
        text += std::string("# ") + kMetricsNote + "\n";
        text += "model_label,loss,delta_vs_original\n";
        for (const auto& r : rows) {
            text += r.model_label + "," + fmt9(r.loss) + "," + fmt9(r.delta_vs_original) + "\n";
        }
    } else {
        text += "{\n  \"note\": \"" + std::string(kMetricsNote) + "\",\n  \"rows\": [";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            text += i ? ",\n    " : "\n    ";
            text += "{\"model_label\": \"" + rows[i].model_label + "\", \"loss\": " + fmt9(rows[i].loss) +
                    ", \"delta_vs_original\": " + fmt9(rows[i].delta_vs_original) + "}";
        }
        text += rows.empty() ? "]\n}\n" : "\n  ]\n}\n";
    }
    write_text(path, text);
}

void export_report(const std::vector<EquivalenceResult>& rows, ReportFormat format,
                   const std::filesystem::path& path) {
    std::string text;
    if (format == ReportFormat::csv) {
        text += std::string("# ") + kMetricsNote + "\n";
        text += "max_abs_logit_diff,mean_kl,sequences_tested\n";
        for (const auto& r : rows) {
            text += fmt9(r.max_abs_logit_diff) + "," + fmt9(r.mean_kl) + "," +
                    std::to_string(r.sequences_tested) + "\n";
        }
    } else {
        text += "{\n  \"note\": \"" + std::string(kMetricsNote) + "\",\n  \"rows\": [";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            text += i ? ",\n    " : "\n    ";
            text += "{\"max_abs_logit_diff\": " + fmt9(rows[i].max_abs_logit_diff) +
                    ", \"mean_kl\": " + fmt9(rows[i].mean_kl) +
                    ", \"sequences_tested\": " + std::to_string(rows[i].sequences_tested) + "}";
        }
        text += rows.empty() ? "]\n}\n" : "\n  ]\n}\n";
    }
    write_text(path, text);
}

void export_report(const TrainReport& report, ReportFormat format,
                   const std::filesystem::path& path) {
    std::string text;
    if (format == ReportFormat::csv) {
        text += std::string("# ") + kMetricsNote + "\n";
        text += "step,loss\n";
        for (const auto& [step, loss] : report.loss_curve) {
            text += std::to_string(step) + "," + fmt9(loss) + "\n";
        }
    } else {
        text += "{\n  \"note\": \"" + std::string(kMetricsNote) + "\",\n";
        text += "  \"stage\": " + std::to_string(report.stage) + ",\n";
        text += "  \"steps\": " + std::to_string(report.steps) + ",\n";
        text += "  \"loss_curve\": [";
        for (std::size_t i = 0; i < report.loss_curve.size(); ++i) {
            text += i ? ", " : "";
            text += "[" + std::to_string(report.loss_curve[i].first) + ", " +
                    fmt9(report.loss_curve[i].second) + "]";
        }
        text += "],\n  \"updated_param_keys\": [";
        for (std::size_t i = 0; i < report.updated_param_keys.size(); ++i) {
            text += i ? ", " : "";
            text += "\"" + report.updated_param_keys[i] + "\"";
        }
        text += "],\n  \"wall_time\": " + fmt9(report.wall_time) + "\n}\n";
    }
    write_text(path, text);
}

}  // namespace tli
