// SPDX-License-Identifier: Apache-2.0

#include "mpdit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mpdit {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) {
            throw std::invalid_argument("tensor: non-positive extent in shape " + shape_str(s));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace {

thread_local Tape* g_active_tape = nullptr;

int last_dim(const Shape& s) {
    return s.empty() ? 1 : s.back();
}

// Broadcast mode for binary elementwise ops.
enum class Bcast { same, row_vector, scalar };

Bcast classify(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::scalar;
    if (b.rank() == 1 && b.dim(0) == last_dim(a.shape())) return Bcast::row_vector;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

} // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> v) {
    if (shape_numel(shape) != static_cast<std::int64_t>(v.size())) {
        throw std::invalid_argument("tensor: " + std::to_string(v.size()) +
                                    " values do not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(v);
    return t;
}

Tensor Tensor::scalar_value(double v) {
    return from_values(Shape{1}, std::vector<double>{v});
}

std::span<const double> Tensor::grad() const {
    if (node_->grad.empty()) {
        throw std::logic_error("tensor: gradient not populated");
    }
    return node_->grad;
}

std::span<double> Tensor::grad_mut() {
    if (node_->grad.empty()) {
        node_->grad.assign(node_->value.size(), 0.0);
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::scalar() const {
    if (size() != 1) {
        throw std::invalid_argument("tensor: scalar() on shape " + shape_str(shape()));
    }
    return node_->value[0];
}

// ---- Tape ------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    }
    Tensor seed = loss;
    seed.grad_mut()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        (*it)();
    }
}

// ---- primitive helpers ------------------------------------------------------

namespace {

Tensor result(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor::from_values(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

void record(std::function<void()> fn) {
    if (Tape* t = Tape::active()) {
        t->record(std::move(fn));
    }
}

bool out_has_grad(const Tensor& out) { return out.has_grad(); }

} // namespace

// ---- elementwise binary ----------------------------------------------------

namespace {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    const Bcast mode = classify(a, b, name);
    Tensor out = result(a.shape());
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    const std::size_t n = av.size();
    const std::size_t w = static_cast<std::size_t>(last_dim(a.shape()));
    switch (mode) {
        case Bcast::same:
            for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
            break;
        case Bcast::row_vector:
            for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i % w]);
            break;
        case Bcast::scalar:
            for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[0]);
            break;
    }
    record([a = a, b = b, out, mode, w, bwd_a, bwd_b]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto av = a.values();
        auto bv = b.values();
        auto ga = a.grad_mut();
        auto gb = b.grad_mut();
        const std::size_t n = av.size();
        switch (mode) {
            case Bcast::same:
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i] * bwd_a(av[i], bv[i]);
                    gb[i] += g[i] * bwd_b(av[i], bv[i]);
                }
                break;
            case Bcast::row_vector:
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i] * bwd_a(av[i], bv[i % w]);
                    gb[i % w] += g[i] * bwd_b(av[i], bv[i % w]);
                }
                break;
            case Bcast::scalar:
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i] * bwd_a(av[i], bv[0]);
                    gb[0] += g[i] * bwd_b(av[i], bv[0]);
                }
                break;
        }
    });
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = result(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    record([a = a, out, c]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = result(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + c;
    record([a = a, out]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

// ---- matmul ----------------------------------------------------------------

namespace {

void require_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got shape " +
                                    shape_str(t.shape()));
    }
}

// C[M,N] += A[M,K] * B[K,N]
void mm_nn(const double* a, const double* b, double* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * K;
        double* ci = c + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double aik = ai[k];
            const double* bk = b + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(const double* a, const double* b, double* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * K;
        double* ci = c + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += ai[k] * bj[k];
            ci[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
void mm_tn(const double* a, const double* b, double* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * K;
        const double* bi = b + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double aik = ai[k];
            double* ck = c + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) ck[j] += aik * bi[j];
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out = result({M, N});
    mm_nn(a.values().data(), b.values().data(), out.values_mut().data(), M, K, N);
    record([a = a, b = b, out, M, K, N]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        // dA = G * B^T ; dB = A^T * G
        mm_nt(g.data(), b.values().data(), a.grad_mut().data(), M, N, K);
        mm_tn(a.values().data(), g.data(), b.grad_mut().data(), M, K, N);
    });
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    if (a.dim(1) != b.dim(1)) {
        throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int M = a.dim(0), K = a.dim(1), N = b.dim(0);
    Tensor out = result({M, N});
    mm_nt(a.values().data(), b.values().data(), out.values_mut().data(), M, K, N);
    record([a = a, b = b, out, M, K, N]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        // dA = G * B ; dB = G^T * A
        mm_nn(g.data(), b.values().data(), a.grad_mut().data(), M, N, K);
        mm_tn(g.data(), a.values().data(), b.grad_mut().data(), M, N, K);
    });
    return out;
}

// ---- structure ops ----------------------------------------------------------

Tensor concat_last(const Tensor& a, const Tensor& b) {
    Shape lead_a(a.shape().begin(), a.shape().end() - 1);
    Shape lead_b(b.shape().begin(), b.shape().end() - 1);
    if (a.rank() == 0 || b.rank() == 0 || lead_a != lead_b) {
        throw std::invalid_argument("concat_last: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    const int wa = a.shape().back();
    const int wb = b.shape().back();
    Shape out_shape = a.shape();
    out_shape.back() = wa + wb;
    Tensor out = result(out_shape);
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    const std::size_t rows = av.size() / static_cast<std::size_t>(wa);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data() + r * wa, wa, ov.data() + r * (wa + wb));
        std::copy_n(bv.data() + r * wb, wb, ov.data() + r * (wa + wb) + wa);
    }
    record([a = a, b = b, out, wa, wb, rows]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto ga = a.grad_mut();
        auto gb = b.grad_mut();
        for (std::size_t r = 0; r < rows; ++r) {
            for (int i = 0; i < wa; ++i) ga[r * wa + i] += g[r * (wa + wb) + i];
            for (int i = 0; i < wb; ++i) gb[r * wb + i] += g[r * (wa + wb) + wa + i];
        }
    });
    return out;
}

Tensor slice_last(const Tensor& a, int start, int len) {
    const int w = a.shape().back();
    if (start < 0 || len <= 0 || start + len > w) {
        throw std::invalid_argument("slice_last: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of width " +
                                    std::to_string(w));
    }
    Shape out_shape = a.shape();
    out_shape.back() = len;
    Tensor out = result(out_shape);
    auto av = a.values();
    auto ov = out.values_mut();
    const std::size_t rows = av.size() / static_cast<std::size_t>(w);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data() + r * w + start, len, ov.data() + r * len);
    }
    record([a = a, out, start, len, w, rows]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto ga = a.grad_mut();
        for (std::size_t r = 0; r < rows; ++r) {
            for (int i = 0; i < len; ++i) ga[r * w + start + i] += g[r * len + i];
        }
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    }
    Tensor out = Tensor::from_values(std::move(shape),
                                     std::vector<double>(a.values().begin(), a.values().end()));
    record([a = a, out]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require_2d(a, "transpose2d");
    const int M = a.dim(0), N = a.dim(1);
    Tensor out = result({N, M});
    auto av = a.values();
    auto ov = out.values_mut();
    for (int i = 0; i < M; ++i) {
        for (int j = 0; j < N; ++j) ov[static_cast<std::size_t>(j) * M + i] = av[static_cast<std::size_t>(i) * N + j];
    }
    record([a = a, out, M, N]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto ga = a.grad_mut();
        for (int i = 0; i < M; ++i) {
            for (int j = 0; j < N; ++j) {
                ga[static_cast<std::size_t>(i) * N + j] += g[static_cast<std::size_t>(j) * M + i];
            }
        }
    });
    return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
    Tensor out = result({1});
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    out.values_mut()[0] = acc;
    record([a = a, out]() mutable {
        if (!out_has_grad(out)) return;
        const double g = out.grad()[0];
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    return out;
}

Tensor mean(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.size());
    Tensor out = result({1});
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    out.values_mut()[0] = acc * inv_n;
    record([a = a, out, inv_n]() mutable {
        if (!out_has_grad(out)) return;
        const double g = out.grad()[0] * inv_n;
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    return out;
}

// ---- elementwise unary -------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    Tensor out = result(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
    record([a = a, out, bwd]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto av = a.values();
        auto oval = out.values();
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(av[i], oval[i]);
    });
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.values()) {
        if (v < 0.0) throw std::invalid_argument("sqrt: negative input");
    }
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor silu_raw(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x * sigmoid(x); },
        [](double x, double) {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor leaky_relu_raw(const Tensor& a, double alpha) {
    if (alpha < 0.0) {
        throw std::invalid_argument("leaky_relu: negative slope must be >= 0");
    }
    return unary_op(
        a, [alpha](double x) { return x >= 0.0 ? x : alpha * x; },
        [alpha](double x, double) { return x >= 0.0 ? 1.0 : alpha; });
}

// ---- row-structured ops -------------------------------------------------------

Tensor row_normalize(const Tensor& a) {
    const int w = a.shape().back();
    Tensor out = result(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    const std::size_t rows = av.size() / static_cast<std::size_t>(w);
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (int i = 0; i < w; ++i) sq += av[r * w + i] * av[r * w + i];
        const double n = std::sqrt(sq);
        if (n == 0.0) {
            throw std::invalid_argument("row_normalize: zero row " + std::to_string(r) +
                                        " has undefined direction");
        }
        norms[r] = n;
        for (int i = 0; i < w; ++i) ov[r * w + i] = av[r * w + i] / n;
    }
    record([a = a, out, norms = std::move(norms), w, rows]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto oval = out.values();
        auto ga = a.grad_mut();
        // d(x/|x|) projects the incoming gradient onto the tangent plane.
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int i = 0; i < w; ++i) dot += g[r * w + i] * oval[r * w + i];
            for (int i = 0; i < w; ++i) {
                ga[r * w + i] += (g[r * w + i] - dot * oval[r * w + i]) / norms[r];
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& a, double eps) {
    const int w = a.shape().back();
    Tensor out = result(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    const std::size_t rows = av.size() / static_cast<std::size_t>(w);
    std::vector<double> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double m = 0.0;
        for (int i = 0; i < w; ++i) m += av[r * w + i];
        m /= w;
        double var = 0.0;
        for (int i = 0; i < w; ++i) {
            const double d = av[r * w + i] - m;
            var += d * d;
        }
        var /= w;
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = rs;
        for (int i = 0; i < w; ++i) ov[r * w + i] = (av[r * w + i] - m) * rs;
    }
    record([a = a, out, rstd = std::move(rstd), w, rows]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto oval = out.values();
        auto ga = a.grad_mut();
        for (std::size_t r = 0; r < rows; ++r) {
            double gm = 0.0, gxm = 0.0;
            for (int i = 0; i < w; ++i) {
                gm += g[r * w + i];
                gxm += g[r * w + i] * oval[r * w + i];
            }
            gm /= w;
            gxm /= w;
            for (int i = 0; i < w; ++i) {
                ga[r * w + i] += (g[r * w + i] - gm - oval[r * w + i] * gxm) * rstd[r];
            }
        }
    });
    return out;
}

Tensor softmax_rows(const Tensor& a, double beta) {
    if (beta <= 0.0) {
        throw std::invalid_argument("softmax: temperature must be positive, got " +
                                    std::to_string(beta));
    }
    const int w = a.shape().back();
    Tensor out = result(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    const std::size_t rows = av.size() / static_cast<std::size_t>(w);
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < w; ++i) {
            if (!std::isfinite(av[r * w + i])) {
                throw std::invalid_argument("softmax: non-finite logit in row " + std::to_string(r));
            }
            mx = std::max(mx, av[r * w + i]);
        }
        double z = 0.0;
        for (int i = 0; i < w; ++i) {
            const double e = std::exp((av[r * w + i] - mx) / beta);
            ov[r * w + i] = e;
            z += e;
        }
        for (int i = 0; i < w; ++i) ov[r * w + i] /= z;
    }
    record([a = a, out, beta, w, rows]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto p = out.values();
        auto ga = a.grad_mut();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int i = 0; i < w; ++i) dot += g[r * w + i] * p[r * w + i];
            for (int i = 0; i < w; ++i) {
                ga[r * w + i] += p[r * w + i] * (g[r * w + i] - dot) / beta;
            }
        }
    });
    return out;
}

Tensor embedding_row(const Tensor& table, int index) {
    require_2d(table, "embedding_row");
    const int rows = table.dim(0), w = table.dim(1);
    if (index < 0 || index >= rows) {
        throw std::invalid_argument("embedding_row: index " + std::to_string(index) +
                                    " out of range [0," + std::to_string(rows) + ")");
    }
    Tensor out = result({w});
    auto tv = table.values();
    auto ov = out.values_mut();
    std::copy_n(tv.data() + static_cast<std::size_t>(index) * w, w, ov.data());
    record([table = table, out, index, w]() mutable {
        if (!out_has_grad(out)) return;
        auto g = out.grad();
        auto gt = table.grad_mut();
        for (int i = 0; i < w; ++i) gt[static_cast<std::size_t>(index) * w + i] += g[i];
    });
    return out;
}

// ---- magnitude statistics -----------------------------------------------------

double expected_magnitude(std::span<const double> v) {
    if (v.empty()) {
        throw std::invalid_argument("expected_magnitude: empty input");
    }
    double sq = 0.0;
    for (double x : v) sq += x * x;
    return std::sqrt(sq / static_cast<double>(v.size()));
}

double expected_magnitude(const Tensor& x) {
    return expected_magnitude(x.values());
}

std::vector<double> expected_magnitude_over(const Tensor& x, std::span<const int> reduce_axes) {
    if (reduce_axes.empty()) {
        throw std::invalid_argument("expected_magnitude: reduce axis list is empty");
    }
    if (x.size() == 0) {
        throw std::invalid_argument("expected_magnitude: empty tensor");
    }
    const int rank = x.rank();
    std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
    for (int ax : reduce_axes) {
        if (ax < 0 || ax >= rank) {
            throw std::invalid_argument("expected_magnitude: axis " + std::to_string(ax) +
                                        " out of range for shape " + shape_str(x.shape()));
        }
        if (reduced[static_cast<std::size_t>(ax)]) {
            throw std::invalid_argument("expected_magnitude: repeated axis " + std::to_string(ax));
        }
        reduced[static_cast<std::size_t>(ax)] = true;
    }
    std::int64_t kept = 1, dropped = 1;
    for (int i = 0; i < rank; ++i) {
        (reduced[static_cast<std::size_t>(i)] ? dropped : kept) *= x.dim(i);
    }
    std::vector<double> sq(static_cast<std::size_t>(kept), 0.0);
    // Row-major walk, mapping each flat index to its kept-axes bucket.
    std::vector<std::int64_t> kept_stride(static_cast<std::size_t>(rank), 0);
    std::int64_t run = 1;
    for (int i = rank - 1; i >= 0; --i) {
        if (!reduced[static_cast<std::size_t>(i)]) {
            kept_stride[static_cast<std::size_t>(i)] = run;
            run *= x.dim(i);
        }
    }
    auto v = x.values();
    std::vector<int> idx(static_cast<std::size_t>(rank), 0);
    for (std::int64_t flat = 0; flat < x.size(); ++flat) {
        std::int64_t bucket = 0;
        for (int i = 0; i < rank; ++i) {
            if (!reduced[static_cast<std::size_t>(i)]) {
                bucket += idx[static_cast<std::size_t>(i)] * kept_stride[static_cast<std::size_t>(i)];
            }
        }
        sq[static_cast<std::size_t>(bucket)] += v[static_cast<std::size_t>(flat)] * v[static_cast<std::size_t>(flat)];
        for (int i = rank - 1; i >= 0; --i) {
            if (++idx[static_cast<std::size_t>(i)] < x.dim(i)) break;
            idx[static_cast<std::size_t>(i)] = 0;
        }
    }
    for (double& s : sq) s = std::sqrt(s / static_cast<double>(dropped));
    return sq;
}

std::vector<double> row_magnitudes(const Tensor& x) {
    const int w = x.shape().back();
    auto v = x.values();
    const std::size_t rows = v.size() / static_cast<std::size_t>(w);
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (int i = 0; i < w; ++i) sq += v[r * w + i] * v[r * w + i];
        out[r] = std::sqrt(sq / w);
    }
    return out;
}

} // namespace mpdit
