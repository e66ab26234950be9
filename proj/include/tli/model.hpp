// LLaMA-style decoder-only toy model: pre-norm residual blocks with
// causal (grouped-query) attention, SwiGLU MLP, RMSNorm and rotary
// positions. Forward, loss and hand-derived backward are built from the
// kernels header; parameters bind 1:1 to the state-dict key schema.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tli/kernels.hpp"
#include "tli/keys.hpp"
#include "tli/rng.hpp"
#include "tli/tensor.hpp"

namespace tli {

struct ModelConfig {
    int vocab_size = 0;
    int hidden_size = 0;
    int num_layers = 0;
    int num_heads = 0;
    int num_kv_heads = 0;
    int intermediate_size = 0;
    double rope_theta = 10000.0;
    double rms_norm_eps = 1e-5;
    int max_seq_len = 256;
    std::vector<int> requires_grad_layers;
    bool tie_word_embeddings = false;

    int head_dim() const { return hidden_size / num_heads; }
    int kv_dim() const { return head_dim() * num_kv_heads; }

    // num_layers == 0 is tolerated (degenerate empty stack, useful for
    // exercising the embedding->norm->head path in isolation).
    void validate() const {
        std::string problems;
        auto bad = [&](const std::string& p) { problems += problems.empty() ? p : ("; " + p); };
        if (vocab_size < 1) bad("vocab_size must be positive");
        if (hidden_size < 1) bad("hidden_size must be positive");
        if (num_layers < 0) bad("num_layers must be >= 0");
        if (num_heads < 1) bad("num_heads must be positive");
        if (num_kv_heads < 1) bad("num_kv_heads must be positive");
        if (intermediate_size < 1) bad("intermediate_size must be positive");
        if (max_seq_len < 1) bad("max_seq_len must be positive");
        if (rope_theta <= 0) bad("rope_theta must be positive");
        if (rms_norm_eps <= 0) bad("rms_norm_eps must be positive");
        if (num_heads > 0 && hidden_size % num_heads != 0) bad("hidden_size not divisible by num_heads");
        if (num_kv_heads > 0 && num_heads % num_kv_heads != 0) bad("num_heads not divisible by num_kv_heads");
        if (num_heads > 0 && hidden_size % num_heads == 0 && (hidden_size / num_heads) % 2 != 0)
            bad("head_dim must be even for rotary embedding");
        int prev = -1;
        for (int l : requires_grad_layers) {
            if (l < 0 || l >= num_layers) bad("requires_grad_layers index " + std::to_string(l) + " out of range");
            if (l <= prev) bad("requires_grad_layers must be strictly increasing");
            prev = l;
        }
        if (!problems.empty()) throw ConfigError("invalid model config: " + problems);
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct LayerParams {
    Tensor<Scalar> input_layernorm;            // [d]
    Tensor<Scalar> q_proj;                     // [d x d]
    Tensor<Scalar> k_proj;                     // [kv_dim x d]
    Tensor<Scalar> v_proj;                     // [kv_dim x d]
    Tensor<Scalar> o_proj;                     // [d x d]
    Tensor<Scalar> post_attention_layernorm;   // [d]
    Tensor<Scalar> gate_proj;                  // [intermediate x d]
    Tensor<Scalar> up_proj;                    // [intermediate x d]
    Tensor<Scalar> down_proj;                  // [d x intermediate]
};

template <typename Scalar>
struct ToyModel {
    ModelConfig config;
    Tensor<Scalar> embed_tokens;               // [V x d]
    std::vector<LayerParams<Scalar>> layers;
    Tensor<Scalar> norm;                       // [d]
    Tensor<Scalar> lm_head;                    // [V x d]; empty when tied
};

// Visit every parameter with its state-dict key, in schema order.
template <typename Scalar, typename Fn>
void for_each_param(ToyModel<Scalar>& model, Fn&& fn) {
    fn(std::string(kEmbedKey), model.embed_tokens);
    for (int i = 0; i < model.config.num_layers; ++i) {
        auto& lp = model.layers[static_cast<std::size_t>(i)];
        fn(layer_key(i, kLayerKeyTails[0]), lp.input_layernorm);
        fn(layer_key(i, kLayerKeyTails[1]), lp.q_proj);
        fn(layer_key(i, kLayerKeyTails[2]), lp.k_proj);
        fn(layer_key(i, kLayerKeyTails[3]), lp.v_proj);
        fn(layer_key(i, kLayerKeyTails[4]), lp.o_proj);
        fn(layer_key(i, kLayerKeyTails[5]), lp.post_attention_layernorm);
        fn(layer_key(i, kLayerKeyTails[6]), lp.gate_proj);
        fn(layer_key(i, kLayerKeyTails[7]), lp.up_proj);
        fn(layer_key(i, kLayerKeyTails[8]), lp.down_proj);
    }
    fn(std::string(kFinalNormKey), model.norm);
    if (!model.config.tie_word_embeddings) fn(std::string(kLmHeadKey), model.lm_head);
}

template <typename Scalar, typename Fn>
void for_each_param(const ToyModel<Scalar>& model, Fn&& fn) {
    for_each_param(const_cast<ToyModel<Scalar>&>(model),
                   [&](const std::string& key, Tensor<Scalar>& t) {
                       fn(key, static_cast<const Tensor<Scalar>&>(t));
                   });
}

template <typename Scalar>
Tensor<Scalar>* param_by_key(ToyModel<Scalar>& model, const std::string& key) {
    Tensor<Scalar>* found = nullptr;
    for_each_param(model, [&](const std::string& k, Tensor<Scalar>& t) {
        if (k == key) found = &t;
    });
    return found;
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

// Matrices drawn N(0, 0.02^2); norm weights start at one. A fixed draw
// order makes equal seeds bit-identical.
template <typename Scalar>
ToyModel<Scalar> init_random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const Index d = config.hidden_size;
    const Index v = config.vocab_size;
    const Index kv = config.kv_dim();
    const Index inter = config.intermediate_size;
    auto randn = [&](Shape shape) {
        Tensor<Scalar> t(std::move(shape));
        for (Index i = 0; i < t.numel(); ++i) t[i] = Scalar(rng.normal(0.0, 0.02));
        return t;
    };

    ToyModel<Scalar> model;
    model.config = config;
    model.embed_tokens = randn({v, d});
    model.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (auto& lp : model.layers) {
        lp.input_layernorm = Tensor<Scalar>::full({d}, Scalar(1));
        lp.q_proj = randn({d, d});
        lp.k_proj = randn({kv, d});
        lp.v_proj = randn({kv, d});
        lp.o_proj = randn({d, d});
        lp.post_attention_layernorm = Tensor<Scalar>::full({d}, Scalar(1));
        lp.gate_proj = randn({inter, d});
        lp.up_proj = randn({inter, d});
        lp.down_proj = randn({d, inter});
    }
    model.norm = Tensor<Scalar>::full({d}, Scalar(1));
    if (!config.tie_word_embeddings) model.lm_head = randn({v, d});
    return model;
}

// ---------------------------------------------------------------------------
// freeze masks
// ---------------------------------------------------------------------------

struct FreezeMask {
    std::map<std::string, bool> params;  // key -> trainable

    bool trainable(const std::string& key) const {
        auto it = params.find(key);
        return it != params.end() && it->second;
    }
    std::vector<std::string> trainable_keys() const {
        std::vector<std::string> out;
        for (const auto& [k, t] : params) {
            if (t) out.push_back(k);
        }
        return out;
    }
    std::size_t num_trainable() const { return trainable_keys().size(); }
};

// Stage 1 trains only the layers named in requires_grad_layers; stage 2
// trains everything.
inline FreezeMask apply_freeze_stage(const ModelConfig& config, int stage) {
    config.validate();
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2, got " + std::to_string(stage));
    if (stage == 1 && config.requires_grad_layers.empty()) {
        throw ConfigError("stage 1: nothing to train (requires_grad_layers is empty)");
    }
    FreezeMask mask;
    for (const auto& key : schema_keys(config.num_layers, config.tie_word_embeddings)) {
        bool trainable = stage == 2;
        if (stage == 1) {
            if (auto idx = layer_index_of(key)) {
                for (int l : config.requires_grad_layers) {
                    if (l == *idx) trainable = true;
                }
            }
        }
        mask.params[key] = trainable;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// token batches
// ---------------------------------------------------------------------------

struct TokenBatch {
    Index batch = 0;
    Index seq = 0;
    std::vector<std::int32_t> tokens;  // row-major [batch x seq]

    std::int32_t at(Index b, Index s) const {
        return tokens[static_cast<std::size_t>(b * seq + s)];
    }
};

template <typename Scalar>
using GradMap = std::map<std::string, Tensor<Scalar>>;

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
struct LayerTrace {
    Tensor<Scalar> x1;                     // post input norm        [BS x d]
    Tensor<Scalar> q, k, v;                // q/k after rope         [BS x d/kv/kv]
    std::vector<Tensor<Scalar>> probs;     // per (b*H + h)          [S x S]
    Tensor<Scalar> ctx;                    // concatenated heads     [BS x d]
    Tensor<Scalar> h_mid;                  // after attention add    [BS x d]
    Tensor<Scalar> x2;                     // post attention norm    [BS x d]
    Tensor<Scalar> gate_pre, up_pre;       //                        [BS x I]
    Tensor<Scalar> hidden;                 // silu(gate) * up        [BS x I]
};

template <typename Scalar>
struct ForwardTrace {
    std::vector<Tensor<Scalar>> h;         // residual stream entering each layer; h[L] = final
    std::vector<LayerTrace<Scalar>> layers;
    Tensor<Scalar> x_final;                // post final norm        [BS x d]
    Tensor<Scalar> logits;                 //                        [BS x V]
};

template <typename Scalar>
void check_tokens(const ModelConfig& cfg, const TokenBatch& batch) {
    if (batch.seq < 1 || batch.batch < 1) throw LengthError("empty token batch");
    if (batch.seq > cfg.max_seq_len) {
        throw LengthError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    for (std::int32_t t : batch.tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw IndexError("token id " + std::to_string(t) + " out of range [0, " +
                             std::to_string(cfg.vocab_size) + ")");
        }
    }
}

// Rope over a [BS x width] activation seen as B sequences of [S x heads x hd].
template <typename Scalar>
Tensor<Scalar> rope_batched(const Tensor<Scalar>& x, Index b_count, Index s_len, Index heads,
                            double theta, bool inverse) {
    const Index hd = x.dim(1) / heads;
    Tensor<Scalar> out(x.shape());
    for (Index b = 0; b < b_count; ++b) {
        Tensor<Scalar> slice({s_len, heads, hd});
        std::copy(x.data() + b * s_len * x.dim(1), x.data() + (b + 1) * s_len * x.dim(1), slice.data());
        Tensor<Scalar> rot = inverse ? rope_unapply(slice, theta) : rope_apply(slice, theta);
        std::copy(rot.data(), rot.data() + rot.numel(), out.data() + b * s_len * x.dim(1));
    }
    return out;
}

template <typename Scalar>
void run_forward(const ToyModel<Scalar>& model, const TokenBatch& batch, ForwardTrace<Scalar>& tr) {
    const ModelConfig& cfg = model.config;
    check_tokens<Scalar>(cfg, batch);
    const Index B = batch.batch, S = batch.seq, BS = B * S;
    const Index d = cfg.hidden_size, H = cfg.num_heads, Hkv = cfg.num_kv_heads;
    const Index hd = cfg.head_dim(), kvd = cfg.kv_dim();
    const Index group = H / Hkv;
    const Scalar inv_sqrt_hd = Scalar(1.0 / std::sqrt(double(hd)));

    tr.h.assign(static_cast<std::size_t>(cfg.num_layers) + 1, Tensor<Scalar>());
    tr.layers.assign(static_cast<std::size_t>(cfg.num_layers), LayerTrace<Scalar>());

    // embedding lookup
    Tensor<Scalar> h({BS, d});
    for (Index b = 0; b < B; ++b) {
        for (Index s = 0; s < S; ++s) {
            const Index row = b * S + s;
            const Index tok = batch.at(b, s);
            std::copy(model.embed_tokens.data() + tok * d, model.embed_tokens.data() + (tok + 1) * d,
                      h.data() + row * d);
        }
    }
    tr.h[0] = h;

    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& lp = model.layers[static_cast<std::size_t>(l)];
        auto& lt = tr.layers[static_cast<std::size_t>(l)];

        lt.x1 = rms_norm(h, lp.input_layernorm, cfg.rms_norm_eps);
        lt.q = rope_batched(matmul_nt(lt.x1, lp.q_proj), B, S, H, cfg.rope_theta, false);
        lt.k = rope_batched(matmul_nt(lt.x1, lp.k_proj), B, S, Hkv, cfg.rope_theta, false);
        lt.v = matmul_nt(lt.x1, lp.v_proj);

        lt.ctx = Tensor<Scalar>({BS, d});
        lt.probs.assign(static_cast<std::size_t>(B * H), Tensor<Scalar>());
        auto q_m = lt.q.matrix(BS, d);
        auto k_m = lt.k.matrix(BS, kvd);
        auto v_m = lt.v.matrix(BS, kvd);
        auto ctx_m = lt.ctx.matrix(BS, d);
        for (Index b = 0; b < B; ++b) {
            for (Index hh = 0; hh < H; ++hh) {
                const Index g = hh / group;
                MatrixRM<Scalar> scores =
                    q_m.block(b * S, hh * hd, S, hd) * k_m.block(b * S, g * hd, S, hd).transpose() *
                    inv_sqrt_hd;
                // causal softmax: row i attends to positions <= i
                Tensor<Scalar> probs({S, S});
                auto p_m = probs.matrix(S, S);
                for (Index i = 0; i < S; ++i) {
                    Scalar m = scores(i, 0);
                    for (Index j = 1; j <= i; ++j) m = std::max(m, scores(i, j));
                    double sum = 0.0;
                    for (Index j = 0; j <= i; ++j) {
                        const double e = std::exp(double(scores(i, j)) - double(m));
                        p_m(i, j) = Scalar(e);
                        sum += e;
                    }
                    const Scalar inv = Scalar(1.0 / sum);
                    for (Index j = 0; j <= i; ++j) p_m(i, j) *= inv;
                    for (Index j = i + 1; j < S; ++j) p_m(i, j) = Scalar(0);
                }
                ctx_m.block(b * S, hh * hd, S, hd) = p_m * v_m.block(b * S, g * hd, S, hd);
                lt.probs[static_cast<std::size_t>(b * H + hh)] = std::move(probs);
            }
        }

        // residual adds; a zero o_proj/down_proj leaves h untouched
        Tensor<Scalar> attn_out = matmul_nt(lt.ctx, lp.o_proj);
        lt.h_mid = h;
        lt.h_mid.matrix(BS, d) += attn_out.matrix(BS, d);

        lt.x2 = rms_norm(lt.h_mid, lp.post_attention_layernorm, cfg.rms_norm_eps);
        lt.gate_pre = matmul_nt(lt.x2, lp.gate_proj);
        lt.up_pre = matmul_nt(lt.x2, lp.up_proj);
        lt.hidden = silu(lt.gate_pre);
        for (Index i = 0; i < lt.hidden.numel(); ++i) lt.hidden[i] *= lt.up_pre[i];
        Tensor<Scalar> mlp_out = matmul_nt(lt.hidden, lp.down_proj);

        h = lt.h_mid;
        h.matrix(BS, d) += mlp_out.matrix(BS, d);
        tr.h[static_cast<std::size_t>(l) + 1] = h;
    }

    tr.x_final = rms_norm(h, model.norm, cfg.rms_norm_eps);
    const Tensor<Scalar>& head = cfg.tie_word_embeddings ? model.embed_tokens : model.lm_head;
    tr.logits = matmul_nt(tr.x_final, head);
}

}  // namespace detail

// Logits for a single sequence, shape [seq x vocab].
template <typename Scalar>
Tensor<Scalar> forward(const ToyModel<Scalar>& model, const std::vector<std::int32_t>& tokens) {
    TokenBatch batch{1, static_cast<Index>(tokens.size()), tokens};
    detail::ForwardTrace<Scalar> tr;
    detail::run_forward(model, batch, tr);
    Tensor<Scalar> logits = std::move(tr.logits);
    logits.set_shape({batch.seq, model.config.vocab_size});
    return logits;
}

namespace detail {

// Slice out rows 0..S-2 of each sequence and the shifted targets.
template <typename Scalar>
std::pair<Tensor<Scalar>, std::vector<std::int32_t>> next_token_slice(const Tensor<Scalar>& logits,
                                                                      const TokenBatch& batch) {
    const Index B = batch.batch, S = batch.seq, V = logits.dim(1);
    if (S < 2) throw LengthError("next-token loss needs sequences of length >= 2");
    Tensor<Scalar> sliced({B * (S - 1), V});
    std::vector<std::int32_t> targets;
    targets.reserve(static_cast<std::size_t>(B * (S - 1)));
    for (Index b = 0; b < B; ++b) {
        for (Index s = 0; s + 1 < S; ++s) {
            std::copy(logits.data() + (b * S + s) * V, logits.data() + (b * S + s + 1) * V,
                      sliced.data() + (b * (S - 1) + s) * V);
            targets.push_back(batch.at(b, s + 1));
        }
    }
    return {std::move(sliced), std::move(targets)};
}

}  // namespace detail

// Mean next-token cross entropy in nats, no gradients.
template <typename Scalar>
double eval_loss(const ToyModel<Scalar>& model, const TokenBatch& batch) {
    detail::ForwardTrace<Scalar> tr;
    detail::run_forward(model, batch, tr);
    auto [sliced, targets] = detail::next_token_slice(tr.logits, batch);
    return cross_entropy(sliced, targets);
}

// Loss plus gradients for the trainable parameters only; frozen
// parameters receive no entry in the returned map.
template <typename Scalar>
std::pair<double, GradMap<Scalar>> loss_and_grads(const ToyModel<Scalar>& model,
                                                  const TokenBatch& batch,
                                                  const FreezeMask& mask) {
    const ModelConfig& cfg = model.config;
    detail::ForwardTrace<Scalar> tr;
    detail::run_forward(model, batch, tr);
    auto [sliced, targets] = detail::next_token_slice(tr.logits, batch);
    const double loss = cross_entropy(sliced, targets);
    Tensor<Scalar> dsliced = cross_entropy_backward(sliced, targets);

    const Index B = batch.batch, S = batch.seq, BS = B * S;
    const Index d = cfg.hidden_size, V = cfg.vocab_size, H = cfg.num_heads, Hkv = cfg.num_kv_heads;
    const Index hd = cfg.head_dim(), kvd = cfg.kv_dim();
    const Index group = H / Hkv;
    const Scalar inv_sqrt_hd = Scalar(1.0 / std::sqrt(double(hd)));

    // scatter next-token grads back onto the full logits grid
    Tensor<Scalar> dlogits({BS, V});
    for (Index b = 0; b < B; ++b) {
        for (Index s = 0; s + 1 < S; ++s) {
            std::copy(dsliced.data() + (b * (S - 1) + s) * V, dsliced.data() + (b * (S - 1) + s + 1) * V,
                      dlogits.data() + (b * S + s) * V);
        }
    }

    GradMap<Scalar> grads;
    auto want = [&](const std::string& key) { return mask.trainable(key); };
    auto add_grad = [&](const std::string& key, Tensor<Scalar>&& g) {
        auto it = grads.find(key);
        if (it == grads.end()) {
            grads.emplace(key, std::move(g));
        } else {
            auto m = it->second.matrix(it->second.dim(0), it->second.numel() / it->second.dim(0));
            m += g.matrix(g.dim(0), g.numel() / g.dim(0));
        }
    };

    const Tensor<Scalar>& head = cfg.tie_word_embeddings ? model.embed_tokens : model.lm_head;
    const std::string head_key = cfg.tie_word_embeddings ? std::string(kEmbedKey) : std::string(kLmHeadKey);
    if (want(head_key)) add_grad(head_key, matmul_tn(dlogits, tr.x_final));
    Tensor<Scalar> dx_final = matmul(dlogits, head);

    auto [dh, dnorm] = rms_norm_backward(tr.h[static_cast<std::size_t>(cfg.num_layers)], model.norm,
                                         cfg.rms_norm_eps, dx_final);
    if (want(std::string(kFinalNormKey))) add_grad(std::string(kFinalNormKey), std::move(dnorm));

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& lp = model.layers[static_cast<std::size_t>(l)];
        const auto& lt = tr.layers[static_cast<std::size_t>(l)];

        // MLP branch
        Tensor<Scalar> dhidden = matmul(dh, lp.down_proj);
        if (want(layer_key(l, kLayerKeyTails[8]))) {
            add_grad(layer_key(l, kLayerKeyTails[8]), matmul_tn(dh, lt.hidden));
        }
        Tensor<Scalar> silu_gate = silu(lt.gate_pre);
        Tensor<Scalar> dup(lt.up_pre.shape());
        Tensor<Scalar> dsilu(lt.gate_pre.shape());
        for (Index i = 0; i < dhidden.numel(); ++i) {
            dup[i] = dhidden[i] * silu_gate[i];
            dsilu[i] = dhidden[i] * lt.up_pre[i];
        }
        Tensor<Scalar> dgate = silu_backward(lt.gate_pre, dsilu);
        if (want(layer_key(l, kLayerKeyTails[7]))) add_grad(layer_key(l, kLayerKeyTails[7]), matmul_tn(dup, lt.x2));
        if (want(layer_key(l, kLayerKeyTails[6]))) add_grad(layer_key(l, kLayerKeyTails[6]), matmul_tn(dgate, lt.x2));
        Tensor<Scalar> dx2 = matmul(dup, lp.up_proj);
        dx2.matrix(BS, d) += matmul(dgate, lp.gate_proj).matrix(BS, d);

        auto [dh_mid_norm, dnorm2] =
            rms_norm_backward(lt.h_mid, lp.post_attention_layernorm, cfg.rms_norm_eps, dx2);
        if (want(layer_key(l, kLayerKeyTails[5]))) add_grad(layer_key(l, kLayerKeyTails[5]), std::move(dnorm2));
        Tensor<Scalar> dh_mid = dh;
        dh_mid.matrix(BS, d) += dh_mid_norm.matrix(BS, d);

        // attention branch
        if (want(layer_key(l, kLayerKeyTails[4]))) {
            add_grad(layer_key(l, kLayerKeyTails[4]), matmul_tn(dh_mid, lt.ctx));
        }
        Tensor<Scalar> dctx = matmul(dh_mid, lp.o_proj);
        Tensor<Scalar> dq_rot({BS, d});
        Tensor<Scalar> dk_rot({BS, kvd});
        Tensor<Scalar> dv({BS, kvd});
        {
            auto dctx_m = dctx.matrix(BS, d);
            auto q_m = lt.q.matrix(BS, d);
            auto k_m = lt.k.matrix(BS, kvd);
            auto v_m = lt.v.matrix(BS, kvd);
            auto dq_m = dq_rot.matrix(BS, d);
            auto dk_m = dk_rot.matrix(BS, kvd);
            auto dv_m = dv.matrix(BS, kvd);
            for (Index b = 0; b < B; ++b) {
                for (Index hh = 0; hh < H; ++hh) {
                    const Index g = hh / group;
                    const auto& probs = lt.probs[static_cast<std::size_t>(b * H + hh)];
                    auto p_m = probs.matrix(S, S);
                    MatrixRM<Scalar> dprobs = dctx_m.block(b * S, hh * hd, S, hd) *
                                              v_m.block(b * S, g * hd, S, hd).transpose();
                    dv_m.block(b * S, g * hd, S, hd) +=
                        p_m.transpose() * dctx_m.block(b * S, hh * hd, S, hd);
                    // softmax backward per row; masked columns carry zero probs
                    MatrixRM<Scalar> dscores(S, S);
                    for (Index i = 0; i < S; ++i) {
                        double dot = 0.0;
                        for (Index j = 0; j < S; ++j) dot += double(p_m(i, j)) * double(dprobs(i, j));
                        for (Index j = 0; j < S; ++j) {
                            dscores(i, j) = Scalar(double(p_m(i, j)) * (double(dprobs(i, j)) - dot));
                        }
                    }
                    dq_m.block(b * S, hh * hd, S, hd) +=
                        dscores * k_m.block(b * S, g * hd, S, hd) * inv_sqrt_hd;
                    dk_m.block(b * S, g * hd, S, hd) +=
                        dscores.transpose() * q_m.block(b * S, hh * hd, S, hd) * inv_sqrt_hd;
                }
            }
        }
        Tensor<Scalar> dq = detail::rope_batched(dq_rot, B, S, H, cfg.rope_theta, true);
        Tensor<Scalar> dk = detail::rope_batched(dk_rot, B, S, Hkv, cfg.rope_theta, true);
        if (want(layer_key(l, kLayerKeyTails[1]))) add_grad(layer_key(l, kLayerKeyTails[1]), matmul_tn(dq, lt.x1));
        if (want(layer_key(l, kLayerKeyTails[2]))) add_grad(layer_key(l, kLayerKeyTails[2]), matmul_tn(dk, lt.x1));
        if (want(layer_key(l, kLayerKeyTails[3]))) add_grad(layer_key(l, kLayerKeyTails[3]), matmul_tn(dv, lt.x1));
        Tensor<Scalar> dx1 = matmul(dq, lp.q_proj);
        dx1.matrix(BS, d) += matmul(dk, lp.k_proj).matrix(BS, d);
        dx1.matrix(BS, d) += matmul(dv, lp.v_proj).matrix(BS, d);

        auto [dh_in_norm, dnorm1] =
            rms_norm_backward(tr.h[static_cast<std::size_t>(l)], lp.input_layernorm, cfg.rms_norm_eps, dx1);
        if (want(layer_key(l, kLayerKeyTails[0]))) add_grad(layer_key(l, kLayerKeyTails[0]), std::move(dnorm1));
        dh = dh_mid;
        dh.matrix(BS, d) += dh_in_norm.matrix(BS, d);
    }

    // embedding rows
    if (want(std::string(kEmbedKey))) {
        Tensor<Scalar> dembed({V, d});
        for (Index b = 0; b < B; ++b) {
            for (Index s = 0; s < S; ++s) {
                const Index tok = batch.at(b, s);
                Scalar* dst = dembed.data() + tok * d;
                const Scalar* src = dh.data() + (b * S + s) * d;
                for (Index i = 0; i < d; ++i) dst[i] += src[i];
            }
        }
        add_grad(std::string(kEmbedKey), std::move(dembed));
    }

    return {loss, std::move(grads)};
}

}  // namespace tli
