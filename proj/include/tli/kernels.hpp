// Dense kernels for the toy transformer, forward and backward. Free
// functions over Tensor<Scalar>; Eigen supplies the matrix products,
// everything else is explicit loops with double accumulation where it
// buys stability. All kernels are pure and bitwise deterministic for
// fixed inputs (no threads, fixed reduction order).
#pragma once

#include <cmath>
#include <functional>
#include <utility>

#include "tli/rng.hpp"
#include "tli/tensor.hpp"

namespace tli {

namespace detail {

template <typename Scalar>
void require_rank2(const Tensor<Scalar>& t, const char* name) {
    if (t.rank() != 2) throw ShapeError(std::string(name) + " must be rank 2, got " + shape_str(t.shape()));
}

// Leading dims flattened to rows, innermost dim as columns.
template <typename Scalar>
std::pair<Index, Index> rows_cols(const Tensor<Scalar>& t) {
    if (t.rank() < 1) throw ShapeError("expected rank >= 1 tensor");
    const Index cols = t.dim(t.rank() - 1);
    return {t.numel() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matrix multiply
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::require_rank2(a, "matmul lhs");
    detail::require_rank2(b, "matmul rhs");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    }
    Tensor<Scalar> out({a.dim(0), b.dim(1)});
    out.matrix() = a.matrix() * b.matrix();
    return out;
}

// a . b^T with b stored [n x k]; the natural orientation for
// [out_features x in_features] projection weights.
template <typename Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::require_rank2(a, "matmul_nt lhs");
    detail::require_rank2(b, "matmul_nt rhs");
    if (a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_nt inner dimensions disagree: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
    }
    Tensor<Scalar> out({a.dim(0), b.dim(0)});
    out.matrix() = a.matrix() * b.matrix().transpose();
    return out;
}

// a^T . b with a stored [k x m].
template <typename Scalar>
Tensor<Scalar> matmul_tn(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::require_rank2(a, "matmul_tn lhs");
    detail::require_rank2(b, "matmul_tn rhs");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("matmul_tn inner dimensions disagree: " + shape_str(a.shape()) +
                         "^T x " + shape_str(b.shape()));
    }
    Tensor<Scalar> out({a.dim(1), b.dim(1)});
    out.matrix() = a.matrix().transpose() * b.matrix();
    return out;
}

// Given dC for C = A.B, produce dA = dC.B^T and dB = A^T.dC.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> matmul_backward(const Tensor<Scalar>& a,
                                                          const Tensor<Scalar>& b,
                                                          const Tensor<Scalar>& dc) {
    return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// ---------------------------------------------------------------------------
// RMS normalization
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> rms_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, double eps) {
    const auto [rows, d] = detail::rows_cols(x);
    if (weight.rank() != 1 || weight.dim(0) != d) {
        throw ShapeError("rms_norm weight " + shape_str(weight.shape()) +
                         " does not match innermost dim of " + shape_str(x.shape()));
    }
    if (eps < 0) throw ConfigError("rms_norm eps must be >= 0");
    Tensor<Scalar> out(x.shape());
    for (Index r = 0; r < rows; ++r) {
        const Scalar* xr = x.data() + r * d;
        Scalar* or_ = out.data() + r * d;
        double ms = 0.0;
        for (Index i = 0; i < d; ++i) ms += double(xr[i]) * double(xr[i]);
        const Scalar inv = Scalar(1.0 / std::sqrt(ms / double(d) + eps));
        for (Index i = 0; i < d; ++i) or_[i] = weight[i] * xr[i] * inv;
    }
    return out;
}

// Returns {dx, dweight}.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> rms_norm_backward(const Tensor<Scalar>& x,
                                                            const Tensor<Scalar>& weight,
                                                            double eps,
                                                            const Tensor<Scalar>& dy) {
    const auto [rows, d] = detail::rows_cols(x);
    if (!dy.same_shape(x)) throw ShapeError("rms_norm_backward dy shape mismatch");
    Tensor<Scalar> dx(x.shape());
    Tensor<Scalar> dw(weight.shape());
    for (Index r = 0; r < rows; ++r) {
        const Scalar* xr = x.data() + r * d;
        const Scalar* dyr = dy.data() + r * d;
        Scalar* dxr = dx.data() + r * d;
        double ms = 0.0;
        for (Index i = 0; i < d; ++i) ms += double(xr[i]) * double(xr[i]);
        const double inv = 1.0 / std::sqrt(ms / double(d) + eps);
        // dot = sum_i dy_i * w_i * x_i
        double dot = 0.0;
        for (Index i = 0; i < d; ++i) dot += double(dyr[i]) * double(weight[i]) * double(xr[i]);
        const double k = dot * inv * inv * inv / double(d);
        for (Index i = 0; i < d; ++i) {
            dxr[i] = Scalar(double(dyr[i]) * double(weight[i]) * inv - double(xr[i]) * k);
            dw[i] += Scalar(double(dyr[i]) * double(xr[i]) * inv);
        }
    }
    return {std::move(dx), std::move(dw)};
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
    const auto [rows, n] = detail::rows_cols(x);
    Tensor<Scalar> out(x.shape());
    for (Index r = 0; r < rows; ++r) {
        const Scalar* xr = x.data() + r * n;
        Scalar* or_ = out.data() + r * n;
        Scalar m = xr[0];
        for (Index i = 1; i < n; ++i) m = std::max(m, xr[i]);
        double sum = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double e = std::exp(double(xr[i]) - double(m));
            or_[i] = Scalar(e);
            sum += e;
        }
        const Scalar inv = Scalar(1.0 / sum);
        for (Index i = 0; i < n; ++i) or_[i] *= inv;
    }
    return out;
}

// dy through softmax whose output was y: dx = y * (dy - sum(y*dy)).
template <typename Scalar>
Tensor<Scalar> softmax_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& dy) {
    const auto [rows, n] = detail::rows_cols(y);
    if (!dy.same_shape(y)) throw ShapeError("softmax_backward dy shape mismatch");
    Tensor<Scalar> dx(y.shape());
    for (Index r = 0; r < rows; ++r) {
        const Scalar* yr = y.data() + r * n;
        const Scalar* dyr = dy.data() + r * n;
        Scalar* dxr = dx.data() + r * n;
        double dot = 0.0;
        for (Index i = 0; i < n; ++i) dot += double(yr[i]) * double(dyr[i]);
        for (Index i = 0; i < n; ++i) dxr[i] = Scalar(double(yr[i]) * (double(dyr[i]) - dot));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
    Tensor<Scalar> out(x.shape());
    for (Index i = 0; i < x.numel(); ++i) {
        const double v = double(x[i]);
        out[i] = Scalar(v / (1.0 + std::exp(-v)));
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> silu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
    if (!dy.same_shape(x)) throw ShapeError("silu_backward dy shape mismatch");
    Tensor<Scalar> dx(x.shape());
    for (Index i = 0; i < x.numel(); ++i) {
        const double v = double(x[i]);
        const double s = 1.0 / (1.0 + std::exp(-v));
        dx[i] = Scalar(double(dy[i]) * s * (1.0 + v * (1.0 - s)));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
Tensor<Scalar> rope_rotate(const Tensor<Scalar>& x, double theta, double direction) {
    if (x.rank() != 3) {
        throw ShapeError("rope expects [seq x heads x head_dim], got " + shape_str(x.shape()));
    }
    const Index seq = x.dim(0), heads = x.dim(1), hd = x.dim(2);
    if (hd % 2 != 0) throw ShapeError("rope head_dim must be even, got " + shape_str(x.shape()));
    if (theta <= 0) throw ConfigError("rope theta must be positive");
    Tensor<Scalar> out(x.shape());
    const Index half = hd / 2;
    for (Index p = 0; p < seq; ++p) {
        for (Index i = 0; i < half; ++i) {
            const double freq = std::pow(theta, -2.0 * double(i) / double(hd));
            const double ang = direction * double(p) * freq;
            const double c = std::cos(ang), s = std::sin(ang);
            for (Index h = 0; h < heads; ++h) {
                const Index base = (p * heads + h) * hd + 2 * i;
                const double a = double(x[base]), b = double(x[base + 1]);
                out[base] = Scalar(a * c - b * s);
                out[base + 1] = Scalar(a * s + b * c);
            }
        }
    }
    return out;
}

}  // namespace detail

// Rotates consecutive pairs (2i, 2i+1) by pos * theta^(-2i/head_dim).
template <typename Scalar>
Tensor<Scalar> rope_apply(const Tensor<Scalar>& x, double theta) {
    return detail::rope_rotate(x, theta, 1.0);
}

// The backward map is the inverse rotation (rotations are orthonormal).
template <typename Scalar>
Tensor<Scalar> rope_unapply(const Tensor<Scalar>& x, double theta) {
    return detail::rope_rotate(x, theta, -1.0);
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

// Mean over rows of -log softmax(logits)[target], in nats.
template <typename Scalar>
double cross_entropy(const Tensor<Scalar>& logits, const std::vector<std::int32_t>& targets) {
    detail::require_rank2(logits, "cross_entropy logits");
    const Index n = logits.dim(0), v = logits.dim(1);
    if (static_cast<Index>(targets.size()) != n) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    }
    double total = 0.0;
    for (Index r = 0; r < n; ++r) {
        const std::int32_t t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= v) {
            throw IndexError("cross_entropy target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
        const Scalar* row = logits.data() + r * v;
        double m = double(row[0]);
        for (Index j = 1; j < v; ++j) m = std::max(m, double(row[j]));
        double sum = 0.0;
        for (Index j = 0; j < v; ++j) sum += std::exp(double(row[j]) - m);
        total += m + std::log(sum) - double(row[t]);
    }
    return total / double(n);
}

// d(mean CE)/dlogits = (softmax(row) - onehot(target)) / n.
template <typename Scalar>
Tensor<Scalar> cross_entropy_backward(const Tensor<Scalar>& logits,
                                      const std::vector<std::int32_t>& targets) {
    detail::require_rank2(logits, "cross_entropy logits");
    const Index n = logits.dim(0), v = logits.dim(1);
    if (static_cast<Index>(targets.size()) != n) {
        throw ShapeError("cross_entropy_backward: target count mismatch");
    }
    Tensor<Scalar> dl(logits.shape());
    const double inv_n = 1.0 / double(n);
    for (Index r = 0; r < n; ++r) {
        const std::int32_t t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= v) {
            throw IndexError("cross_entropy target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
        const Scalar* row = logits.data() + r * v;
        Scalar* dr = dl.data() + r * v;
        double m = double(row[0]);
        for (Index j = 1; j < v; ++j) m = std::max(m, double(row[j]));
        double sum = 0.0;
        for (Index j = 0; j < v; ++j) sum += std::exp(double(row[j]) - m);
        for (Index j = 0; j < v; ++j) {
            const double p = std::exp(double(row[j]) - m) / sum;
            dr[j] = Scalar((p - (j == t ? 1.0 : 0.0)) * inv_n);
        }
    }
    return dl;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

// Central differences at n_probes seeded-random coordinates of param;
// returns the max relative error against analytic_grad. Relative error
// uses max(|analytic|, |numeric|, 1e-8) as denominator so zero-gradient
// coordinates compare cleanly.
template <typename Scalar>
double finite_diff_check(const std::function<double(const Tensor<Scalar>&)>& f,
                         const Tensor<Scalar>& param,
                         const Tensor<Scalar>& analytic_grad,
                         double h,
                         int n_probes,
                         std::uint64_t seed = 0) {
    if (h <= 0) throw ConfigError("finite_diff_check: h must be positive");
    if (!analytic_grad.same_shape(param)) {
        throw ShapeError("finite_diff_check: gradient shape " + shape_str(analytic_grad.shape()) +
                         " does not match parameter " + shape_str(param.shape()));
    }
    Rng rng(seed);
    Tensor<Scalar> probe = param;
    double worst = 0.0;
    for (int k = 0; k < n_probes; ++k) {
        const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(param.numel())));
        const Scalar saved = probe[i];
        probe[i] = Scalar(double(saved) + h);
        const double up = f(probe);
        probe[i] = Scalar(double(saved) - h);
        const double down = f(probe);
        probe[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = double(analytic_grad[i]);
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
    return worst;
}

}  // namespace tli
