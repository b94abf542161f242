#pragma once

#include <cblas-openblas.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "masklam/errors.hpp"

namespace masklam {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorStorage {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until gradient flows here
    bool requires_grad = false;
};

// Shared-ownership handle; ops hold copies of their inputs inside backward
// closures, which keeps storage alive for the lifetime of the tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto s = std::make_shared<TensorStorage>();
        s->shape = std::move(shape);
        s->value.assign(static_cast<std::size_t>(shape_numel(s->shape)), 0.0f);
        s->requires_grad = requires_grad;
        return Tensor(std::move(s));
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data(), t.data() + t.numel(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("from(): " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        auto s = std::make_shared<TensorStorage>();
        s->shape = std::move(shape);
        s->value = std::move(values);
        s->requires_grad = requires_grad;
        return Tensor(std::move(s));
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->value.size()); }
    int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(s_->shape.size()); }

    float* data() { return s_->value.data(); }
    const float* data() const { return s_->value.data(); }
    std::vector<float>& values() { return s_->value; }
    const std::vector<float>& values() const { return s_->value; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool rg) { s_->requires_grad = rg; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::vector<float>& grad_vec() { return s_->grad; }
    const std::vector<float>& grad_vec() const { return s_->grad; }
    float* grad() { return s_->grad.data(); }
    const float* grad() const { return s_->grad.data(); }

    void ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0f);
    }
    void clear_grad() { s_->grad.clear(); }

    float item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return s_->value[0];
    }

    // New leaf sharing no autograd history (fresh storage, same values).
    Tensor detach() const {
        auto s = std::make_shared<TensorStorage>();
        s->shape = s_->shape;
        s->value = s_->value;
        s->requires_grad = false;
        return Tensor(std::move(s));
    }

    bool same_storage(const Tensor& o) const { return s_ == o.s_; }

    bool all_finite() const {
        for (float v : s_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
    std::shared_ptr<TensorStorage> s_;
};

// Ordered record of primitive ops; creation order is a topological order, so
// one reverse sweep visits every op exactly once.
class Tape {
public:
    void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }
    bool recording() const { return enabled_; }
    void set_recording(bool on) { enabled_ = on; }
    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    void run_backward() {
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> steps_;
    bool enabled_ = true;
};

inline void backward(Tensor loss, Tape& tape) {
    if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss");
    loss.ensure_grad();
    loss.grad()[0] += 1.0f;
    tape.run_backward();
}

namespace detail {

inline void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                  int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// cols is [C*kh*kw, n_batch*oh*ow]; column index = ((n*oh)+y)*ow + x.
inline void im2col(const float* src, int n_batch, int c, int h, int w, int kh, int kw, int stride,
                   int pad, int oh, int ow, float* cols) {
    const std::int64_t ncols = static_cast<std::int64_t>(n_batch) * oh * ow;
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                float* row = cols + (static_cast<std::int64_t>(ch) * kh * kw + ki * kw + kj) * ncols;
                for (int n = 0; n < n_batch; ++n) {
                    const float* img = src + (static_cast<std::int64_t>(n) * c + ch) * h * w;
                    for (int y = 0; y < oh; ++y) {
                        const int iy = y * stride - pad + ki;
                        float* dst = row + (static_cast<std::int64_t>(n) * oh + y) * ow;
                        if (iy < 0 || iy >= h) {
                            std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(ow));
                            continue;
                        }
                        const float* line = img + static_cast<std::int64_t>(iy) * w;
                        for (int x = 0; x < ow; ++x) {
                            const int ix = x * stride - pad + kj;
                            dst[x] = (ix >= 0 && ix < w) ? line[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into an image buffer.
inline void col2im(const float* cols, int n_batch, int c, int h, int w, int kh, int kw, int stride,
                   int pad, int oh, int ow, float* dst) {
    const std::int64_t ncols = static_cast<std::int64_t>(n_batch) * oh * ow;
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const float* row =
                    cols + (static_cast<std::int64_t>(ch) * kh * kw + ki * kw + kj) * ncols;
                for (int n = 0; n < n_batch; ++n) {
                    float* img = dst + (static_cast<std::int64_t>(n) * c + ch) * h * w;
                    for (int y = 0; y < oh; ++y) {
                        const int iy = y * stride - pad + ki;
                        if (iy < 0 || iy >= h) continue;
                        const float* srcline = row + (static_cast<std::int64_t>(n) * oh + y) * ow;
                        float* line = img + static_cast<std::int64_t>(iy) * w;
                        for (int x = 0; x < ow; ++x) {
                            const int ix = x * stride - pad + kj;
                            if (ix >= 0 && ix < w) line[ix] += srcline[x];
                        }
                    }
                }
            }
        }
    }
}

// [N,C,H,W] -> [C, N*H*W] (channel-major view used by the transpose conv GEMM)
inline void gather_channel_major(const float* src, int n_batch, int c, int hw, float* dst) {
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c; ++ch)
            std::memcpy(dst + (static_cast<std::int64_t>(ch) * n_batch + n) * hw,
                        src + (static_cast<std::int64_t>(n) * c + ch) * hw,
                        sizeof(float) * static_cast<std::size_t>(hw));
}

// [C, N*H*W] -> accumulate into [N,C,H,W]
inline void scatter_channel_major(const float* src, int n_batch, int c, int hw, float* dst) {
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c; ++ch) {
            const float* s = src + (static_cast<std::int64_t>(ch) * n_batch + n) * hw;
            float* d = dst + (static_cast<std::int64_t>(n) * c + ch) * hw;
            for (int i = 0; i < hw; ++i) d[i] += s[i];
        }
}

inline void check_4d(const Tensor& t, const char* what) {
    if (t.ndim() != 4) throw ShapeError(std::string(what) + " must be 4-D, got " + shape_str(t.shape()));
}

}  // namespace detail

// --------------------------------------------------------------------------
// Primitive ops. Each op computes forward values eagerly and, when the tape
// is recording and an input requires grad, records one backward step.
// --------------------------------------------------------------------------

// Cross-correlation, kernel [F,C,kH,kW], output [N,F,H',W'].
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride, int padding) {
    detail::check_4d(input, "conv2d input");
    detail::check_4d(kernel, "conv2d kernel");
    if (stride < 1) throw ShapeError("conv2d stride must be positive");
    if (padding < 0) throw ShapeError("conv2d padding must be nonnegative");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int f = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != c)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    if (kh > h + 2 * padding || kw > w + 2 * padding)
        throw ShapeError("conv2d kernel larger than padded input");
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;

    const int ckk = c * kh * kw;
    const std::int64_t ncols = static_cast<std::int64_t>(n) * oh * ow;
    std::vector<float> cols(static_cast<std::size_t>(ckk) * ncols);
    detail::im2col(input.data(), n, c, h, w, kh, kw, stride, padding, oh, ow, cols.data());

    // out_all [F, N*OH*OW] = kernel [F, CKK] x cols
    std::vector<float> out_all(static_cast<std::size_t>(f) * ncols);
    detail::sgemm(false, false, f, static_cast<int>(ncols), ckk, 1.0f, kernel.data(), ckk,
                  cols.data(), static_cast<int>(ncols), 0.0f, out_all.data(),
                  static_cast<int>(ncols));

    Tensor out = Tensor::zeros({n, f, oh, ow});
    const int ohw = oh * ow;
    for (int nn = 0; nn < n; ++nn)
        for (int ff = 0; ff < f; ++ff)
            std::memcpy(out.data() + (static_cast<std::int64_t>(nn) * f + ff) * ohw,
                        out_all.data() + (static_cast<std::int64_t>(ff) * n + nn) * ohw,
                        sizeof(float) * static_cast<std::size_t>(ohw));

    const bool rg = tape.recording() && (input.requires_grad() || kernel.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor in_c = input, k_c = kernel, out_c = out;
        tape.record([in_c, k_c, out_c, stride, padding, n, c, h, w, f, kh, kw, oh, ow]() mutable {
            if (!out_c.has_grad()) return;
            const int ckk = c * kh * kw;
            const int ohw = oh * ow;
            const std::int64_t ncols = static_cast<std::int64_t>(n) * oh * ow;
            std::vector<float> dout_all(static_cast<std::size_t>(f) * ncols);
            for (int nn = 0; nn < n; ++nn)
                for (int ff = 0; ff < f; ++ff)
                    std::memcpy(dout_all.data() + (static_cast<std::int64_t>(ff) * n + nn) * ohw,
                                out_c.grad() + (static_cast<std::int64_t>(nn) * f + ff) * ohw,
                                sizeof(float) * static_cast<std::size_t>(ohw));
            if (k_c.requires_grad()) {
                std::vector<float> cols(static_cast<std::size_t>(ckk) * ncols);
                detail::im2col(in_c.data(), n, c, h, w, kh, kw, stride, padding, oh, ow,
                               cols.data());
                k_c.ensure_grad();
                // dK [F,CKK] += dout_all x cols^T
                detail::sgemm(false, true, f, ckk, static_cast<int>(ncols), 1.0f, dout_all.data(),
                              static_cast<int>(ncols), cols.data(), static_cast<int>(ncols), 1.0f,
                              k_c.grad(), ckk);
            }
            if (in_c.requires_grad()) {
                std::vector<float> dcols(static_cast<std::size_t>(ckk) * ncols);
                // dcols = kernel^T x dout_all
                detail::sgemm(true, false, ckk, static_cast<int>(ncols), f, 1.0f, k_c.data(), ckk,
                              dout_all.data(), static_cast<int>(ncols), 0.0f, dcols.data(),
                              static_cast<int>(ncols));
                in_c.ensure_grad();
                detail::col2im(dcols.data(), n, c, h, w, kh, kw, stride, padding, oh, ow,
                               in_c.grad());
            }
        });
    }
    return out;
}

// kernel [C,F,kH,kW], output [N,F,(H-1)*stride-2*padding+kH, ...]; adjoint of
// conv2d for matching configurations.
inline Tensor conv_transpose2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride,
                               int padding) {
    detail::check_4d(input, "conv_transpose2d input");
    detail::check_4d(kernel, "conv_transpose2d kernel");
    if (stride < 1) throw ShapeError("conv_transpose2d stride must be positive");
    if (padding < 0) throw ShapeError("conv_transpose2d padding must be nonnegative");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int kc = kernel.dim(0), f = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != c)
        throw ShapeError("conv_transpose2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    const int oh = (h - 1) * stride - 2 * padding + kh;
    const int ow = (w - 1) * stride - 2 * padding + kw;
    if (oh < 1 || ow < 1) throw ShapeError("conv_transpose2d output would be empty");

    const int fkk = f * kh * kw;
    const int hw = h * w;
    const std::int64_t ncols = static_cast<std::int64_t>(n) * hw;
    std::vector<float> in_cm(static_cast<std::size_t>(c) * ncols);
    detail::gather_channel_major(input.data(), n, c, hw, in_cm.data());
    // cols [FKK, N*h*w] = kernel^T [FKK, C] x in_cm
    std::vector<float> cols(static_cast<std::size_t>(fkk) * ncols);
    detail::sgemm(true, false, fkk, static_cast<int>(ncols), c, 1.0f, kernel.data(), fkk,
                  in_cm.data(), static_cast<int>(ncols), 0.0f, cols.data(),
                  static_cast<int>(ncols));

    Tensor out = Tensor::zeros({n, f, oh, ow});
    detail::col2im(cols.data(), n, f, oh, ow, kh, kw, stride, padding, h, w, out.data());

    const bool rg = tape.recording() && (input.requires_grad() || kernel.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor in_c = input, k_c = kernel, out_c = out;
        tape.record([in_c, k_c, out_c, stride, padding, n, c, h, w, f, kh, kw, oh, ow]() mutable {
            if (!out_c.has_grad()) return;
            const int fkk = f * kh * kw;
            const int hw = h * w;
            const std::int64_t ncols = static_cast<std::int64_t>(n) * hw;
            // dcols = im2col of dOut over the output geometry
            std::vector<float> dcols(static_cast<std::size_t>(fkk) * ncols);
            detail::im2col(out_c.grad(), n, f, oh, ow, kh, kw, stride, padding, h, w,
                           dcols.data());
            if (k_c.requires_grad()) {
                std::vector<float> in_cm(static_cast<std::size_t>(c) * ncols);
                detail::gather_channel_major(in_c.data(), n, c, hw, in_cm.data());
                k_c.ensure_grad();
                // dK [C, FKK] += in_cm x dcols^T
                detail::sgemm(false, true, c, fkk, static_cast<int>(ncols), 1.0f, in_cm.data(),
                              static_cast<int>(ncols), dcols.data(), static_cast<int>(ncols), 1.0f,
                              k_c.grad(), fkk);
            }
            if (in_c.requires_grad()) {
                std::vector<float> din_cm(static_cast<std::size_t>(c) * ncols);
                // dIn_cm = kernel [C, FKK] x dcols
                detail::sgemm(false, false, c, static_cast<int>(ncols), fkk, 1.0f, k_c.data(), fkk,
                              dcols.data(), static_cast<int>(ncols), 0.0f, din_cm.data(),
                              static_cast<int>(ncols));
                in_c.ensure_grad();
                detail::scatter_channel_major(din_cm.data(), n, c, hw, in_c.grad());
            }
        });
    }
    return out;
}

// input [N,I] x weight [O,I] + bias [O] -> [N,O]
inline Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.ndim() != 2 || weight.ndim() != 2 || bias.ndim() != 1)
        throw ShapeError("linear expects input [N,I], weight [O,I], bias [O]");
    const int n = input.dim(0), i = input.dim(1);
    const int o = weight.dim(0);
    if (weight.dim(1) != i || bias.dim(0) != o)
        throw ShapeError("linear dimension mismatch: input " + shape_str(input.shape()) +
                         ", weight " + shape_str(weight.shape()) + ", bias " +
                         shape_str(bias.shape()));
    Tensor out = Tensor::zeros({n, o});
    detail::sgemm(false, true, n, o, i, 1.0f, input.data(), i, weight.data(), i, 0.0f, out.data(),
                  o);
    for (int nn = 0; nn < n; ++nn) {
        float* row = out.data() + static_cast<std::int64_t>(nn) * o;
        for (int oo = 0; oo < o; ++oo) row[oo] += bias.data()[oo];
    }
    const bool rg =
        tape.recording() && (input.requires_grad() || weight.requires_grad() || bias.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor in_c = input, w_c = weight, b_c = bias, out_c = out;
        tape.record([in_c, w_c, b_c, out_c, n, i, o]() mutable {
            if (!out_c.has_grad()) return;
            if (in_c.requires_grad()) {
                in_c.ensure_grad();
                detail::sgemm(false, false, n, i, o, 1.0f, out_c.grad(), o, w_c.data(), i, 1.0f,
                              in_c.grad(), i);
            }
            if (w_c.requires_grad()) {
                w_c.ensure_grad();
                detail::sgemm(true, false, o, i, n, 1.0f, out_c.grad(), o, in_c.data(), i, 1.0f,
                              w_c.grad(), i);
            }
            if (b_c.requires_grad()) {
                b_c.ensure_grad();
                for (int nn = 0; nn < n; ++nn) {
                    const float* g = out_c.grad() + static_cast<std::int64_t>(nn) * o;
                    for (int oo = 0; oo < o; ++oo) b_c.grad()[oo] += g[oo];
                }
            }
        });
    }
    return out;
}

// Elementwise leaky rectifier, negative slope 0.01.
inline Tensor activation(Tape& tape, const Tensor& input) {
    constexpr float kSlope = 0.01f;
    Tensor out = Tensor::zeros(input.shape());
    const std::int64_t n = input.numel();
    for (std::int64_t idx = 0; idx < n; ++idx) {
        const float v = input.data()[idx];
        out.data()[idx] = v > 0.0f ? v : kSlope * v;
    }
    const bool rg = tape.recording() && input.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        Tensor in_c = input, out_c = out;
        tape.record([in_c, out_c, n]() mutable {
            if (!out_c.has_grad()) return;
            in_c.ensure_grad();
            for (std::int64_t idx = 0; idx < n; ++idx) {
                const float v = in_c.data()[idx];
                in_c.grad()[idx] += out_c.grad()[idx] * (v > 0.0f ? 1.0f : kSlope);
            }
        });
    }
    return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    const bool rg = tape.recording() && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor a_c = a, b_c = b, out_c = out;
        tape.record([a_c, b_c, out_c, n]() mutable {
            if (!out_c.has_grad()) return;
            if (a_c.requires_grad()) {
                a_c.ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) a_c.grad()[i] += out_c.grad()[i];
            }
            if (b_c.requires_grad()) {
                b_c.ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) b_c.grad()[i] += out_c.grad()[i];
            }
        });
    }
    return out;
}

// x [N,C,H,W] + bias [C] broadcast over N,H,W
inline Tensor channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    detail::check_4d(x, "channel_bias input");
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape());
    for (int nn = 0; nn < n; ++nn)
        for (int cc = 0; cc < c; ++cc) {
            const float b = bias.data()[cc];
            const float* src = x.data() + (static_cast<std::int64_t>(nn) * c + cc) * hw;
            float* dst = out.data() + (static_cast<std::int64_t>(nn) * c + cc) * hw;
            for (int i = 0; i < hw; ++i) dst[i] = src[i] + b;
        }
    const bool rg = tape.recording() && (x.requires_grad() || bias.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor x_c = x, b_c = bias, out_c = out;
        tape.record([x_c, b_c, out_c, n, c, hw]() mutable {
            if (!out_c.has_grad()) return;
            if (x_c.requires_grad()) {
                x_c.ensure_grad();
                const std::int64_t total = static_cast<std::int64_t>(n) * c * hw;
                for (std::int64_t i = 0; i < total; ++i) x_c.grad()[i] += out_c.grad()[i];
            }
            if (b_c.requires_grad()) {
                b_c.ensure_grad();
                for (int nn = 0; nn < n; ++nn)
                    for (int cc = 0; cc < c; ++cc) {
                        const float* g =
                            out_c.grad() + (static_cast<std::int64_t>(nn) * c + cc) * hw;
                        float acc = 0.0f;
                        for (int i = 0; i < hw; ++i) acc += g[i];
                        b_c.grad()[cc] += acc;
                    }
            }
        });
    }
    return out;
}

// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]
inline Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_4d(a, "concat_channels a");
    detail::check_4d(b, "concat_channels b");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor out = Tensor::zeros({n, ca + cb, a.dim(2), a.dim(3)});
    for (int nn = 0; nn < n; ++nn) {
        std::memcpy(out.data() + static_cast<std::int64_t>(nn) * (ca + cb) * hw,
                    a.data() + static_cast<std::int64_t>(nn) * ca * hw,
                    sizeof(float) * static_cast<std::size_t>(ca) * hw);
        std::memcpy(out.data() + (static_cast<std::int64_t>(nn) * (ca + cb) + ca) * hw,
                    b.data() + static_cast<std::int64_t>(nn) * cb * hw,
                    sizeof(float) * static_cast<std::size_t>(cb) * hw);
    }
    const bool rg = tape.recording() && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor a_c = a, b_c = b, out_c = out;
        tape.record([a_c, b_c, out_c, n, ca, cb, hw]() mutable {
            if (!out_c.has_grad()) return;
            for (int nn = 0; nn < n; ++nn) {
                const float* g = out_c.grad() + static_cast<std::int64_t>(nn) * (ca + cb) * hw;
                if (a_c.requires_grad()) {
                    a_c.ensure_grad();
                    float* ga = a_c.grad() + static_cast<std::int64_t>(nn) * ca * hw;
                    for (int i = 0; i < ca * hw; ++i) ga[i] += g[i];
                }
                if (b_c.requires_grad()) {
                    b_c.ensure_grad();
                    float* gb = b_c.grad() + static_cast<std::int64_t>(nn) * cb * hw;
                    for (int i = 0; i < cb * hw; ++i) gb[i] += g[static_cast<std::int64_t>(ca) * hw + i];
                }
            }
        });
    }
    return out;
}

// z [N,D] -> [N,D,h,w], each spatial site carries the same vector
inline Tensor broadcast_spatial(Tape& tape, const Tensor& z, int h, int w) {
    if (z.ndim() != 2) throw ShapeError("broadcast_spatial expects [N,D]");
    const int n = z.dim(0), d = z.dim(1), hw = h * w;
    Tensor out = Tensor::zeros({n, d, h, w});
    for (int nn = 0; nn < n; ++nn)
        for (int dd = 0; dd < d; ++dd) {
            const float v = z.data()[static_cast<std::int64_t>(nn) * d + dd];
            float* dst = out.data() + (static_cast<std::int64_t>(nn) * d + dd) * hw;
            for (int i = 0; i < hw; ++i) dst[i] = v;
        }
    const bool rg = tape.recording() && z.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        Tensor z_c = z, out_c = out;
        tape.record([z_c, out_c, n, d, hw]() mutable {
            if (!out_c.has_grad()) return;
            z_c.ensure_grad();
            for (int nn = 0; nn < n; ++nn)
                for (int dd = 0; dd < d; ++dd) {
                    const float* g = out_c.grad() + (static_cast<std::int64_t>(nn) * d + dd) * hw;
                    float acc = 0.0f;
                    for (int i = 0; i < hw; ++i) acc += g[i];
                    z_c.grad()[static_cast<std::int64_t>(nn) * d + dd] += acc;
                }
        });
    }
    return out;
}

// [N,C,H,W] -> [N, C*H*W]
inline Tensor flatten2d(Tape& tape, const Tensor& x) {
    detail::check_4d(x, "flatten2d input");
    const int n = x.dim(0);
    const int rest = x.dim(1) * x.dim(2) * x.dim(3);
    Tensor out = Tensor::from({n, rest}, x.values());
    const bool rg = tape.recording() && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        Tensor x_c = x, out_c = out;
        tape.record([x_c, out_c]() mutable {
            if (!out_c.has_grad()) return;
            x_c.ensure_grad();
            const std::int64_t total = x_c.numel();
            for (std::int64_t i = 0; i < total; ++i) x_c.grad()[i] += out_c.grad()[i];
        });
    }
    return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.data()[i]);
    Tensor out = Tensor::from({1}, {static_cast<float>(acc)});
    const bool rg = tape.recording() && x.requires_grad();
    out.set_requires_grad(rg);
    if (rg) {
        Tensor x_c = x, out_c = out;
        tape.record([x_c, out_c, n]() mutable {
            if (!out_c.has_grad()) return;
            x_c.ensure_grad();
            const float g = out_c.grad()[0];
            for (std::int64_t i = 0; i < n; ++i) x_c.grad()[i] += g;
        });
    }
    return out;
}

// Mean over all elements of (pred-target)^2; accumulates in 64-bit.
inline Tensor mse(Tape& tape, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const float d = pred.data()[i] - target.data()[i];
        acc += static_cast<double>(d) * static_cast<double>(d);
    }
    const double denom = static_cast<double>(n);
    Tensor out = Tensor::from({1}, {static_cast<float>(acc / denom)});
    const bool rg = tape.recording() && (pred.requires_grad() || target.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor p_c = pred, t_c = target, out_c = out;
        tape.record([p_c, t_c, out_c, n, denom]() mutable {
            if (!out_c.has_grad()) return;
            const double scale = 2.0 / denom;
            const double g = static_cast<double>(out_c.grad()[0]);
            if (p_c.requires_grad()) {
                p_c.ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const float d = p_c.data()[i] - t_c.data()[i];
                    p_c.grad()[i] += static_cast<float>(g * scale * static_cast<double>(d));
                }
            }
            if (t_c.requires_grad()) {
                t_c.ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const float d = p_c.data()[i] - t_c.data()[i];
                    t_c.grad()[i] -= static_cast<float>(g * scale * static_cast<double>(d));
                }
            }
        });
    }
    return out;
}

// Sum of mask*(pred-target)^2 over all elements divided by (C * sum(mask)).
// mask is [N,1,H,W] with {0,1} entries, broadcast across channels. With an
// all-ones mask this reduces to mse bit-for-bit: the element order, the
// accumulator width, and the gradient expression are identical.
inline Tensor masked_mse(Tape& tape, const Tensor& pred, const Tensor& target, const Tensor& mask) {
    detail::check_4d(pred, "masked_mse pred");
    if (pred.shape() != target.shape())
        throw ShapeError("masked_mse shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    detail::check_4d(mask, "masked_mse mask");
    if (mask.dim(0) != pred.dim(0) || mask.dim(1) != 1 || mask.dim(2) != pred.dim(2) ||
        mask.dim(3) != pred.dim(3))
        throw ShapeError("masked_mse mask must be [N,1,H,W] matching pred " +
                         shape_str(pred.shape()) + ", got " + shape_str(mask.shape()));
    const int n = pred.dim(0), c = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
    double mask_sum = 0.0;
    for (std::int64_t i = 0; i < mask.numel(); ++i) {
        const float m = mask.data()[i];
        if (m != 0.0f && m != 1.0f)
            throw ContractError("masked_mse mask entries must be 0 or 1");
        mask_sum += static_cast<double>(m);
    }
    if (mask_sum == 0.0) throw DegenerateMaskError("mask sums to zero over the batch");

    double acc = 0.0;
    for (int nn = 0; nn < n; ++nn) {
        const float* mrow = mask.data() + static_cast<std::int64_t>(nn) * hw;
        for (int cc = 0; cc < c; ++cc) {
            const float* p = pred.data() + (static_cast<std::int64_t>(nn) * c + cc) * hw;
            const float* t = target.data() + (static_cast<std::int64_t>(nn) * c + cc) * hw;
            for (int i = 0; i < hw; ++i) {
                const float d = mrow[i] * (p[i] - t[i]);
                acc += static_cast<double>(d) * static_cast<double>(d);
            }
        }
    }
    const double denom = static_cast<double>(c) * mask_sum;
    Tensor out = Tensor::from({1}, {static_cast<float>(acc / denom)});
    const bool rg = tape.recording() && (pred.requires_grad() || target.requires_grad());
    out.set_requires_grad(rg);
    if (rg) {
        Tensor p_c = pred, t_c = target, m_c = mask, out_c = out;
        tape.record([p_c, t_c, m_c, out_c, n, c, hw, denom]() mutable {
            if (!out_c.has_grad()) return;
            const double scale = 2.0 / denom;
            const double g = static_cast<double>(out_c.grad()[0]);
            for (int nn = 0; nn < n; ++nn) {
                const float* mrow = m_c.data() + static_cast<std::int64_t>(nn) * hw;
                for (int cc = 0; cc < c; ++cc) {
                    const std::int64_t base = (static_cast<std::int64_t>(nn) * c + cc) * hw;
                    if (p_c.requires_grad()) {
                        p_c.ensure_grad();
                        for (int i = 0; i < hw; ++i) {
                            const float d = mrow[i] * (p_c.data()[base + i] - t_c.data()[base + i]);
                            p_c.grad()[base + i] +=
                                static_cast<float>(g * scale * static_cast<double>(d));
                        }
                    }
                    if (t_c.requires_grad()) {
                        t_c.ensure_grad();
                        for (int i = 0; i < hw; ++i) {
                            const float d = mrow[i] * (p_c.data()[base + i] - t_c.data()[base + i]);
                            t_c.grad()[base + i] -=
                                static_cast<float>(g * scale * static_cast<double>(d));
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace masklam
