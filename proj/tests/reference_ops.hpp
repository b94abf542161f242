#pragma once

// Double-precision reference implementations used as independent oracles for
// gradient checks. These mirror the mathematical definitions with naive loops
// and never touch the library's forward/backward paths.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace refops {

using dvec = std::vector<double>;

inline dvec conv2d(const dvec& in, int n, int c, int h, int w, const dvec& k, int f, int kh,
                   int kw, int stride, int pad, int& oh, int& ow) {
    oh = (h + 2 * pad - kh) / stride + 1;
    ow = (w + 2 * pad - kw) / stride + 1;
    dvec out(static_cast<std::size_t>(n) * f * oh * ow, 0.0);
    for (int nn = 0; nn < n; ++nn)
        for (int ff = 0; ff < f; ++ff)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    double acc = 0.0;
                    for (int cc = 0; cc < c; ++cc)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const int iy = y * stride - pad + ki;
                                const int ix = x * stride - pad + kj;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += in[((static_cast<std::size_t>(nn) * c + cc) * h + iy) * w + ix] *
                                       k[((static_cast<std::size_t>(ff) * c + cc) * kh + ki) * kw + kj];
                            }
                    out[((static_cast<std::size_t>(nn) * f + ff) * oh + y) * ow + x] = acc;
                }
    return out;
}

inline dvec conv_transpose2d(const dvec& in, int n, int c, int h, int w, const dvec& k, int f,
                             int kh, int kw, int stride, int pad, int& oh, int& ow) {
    oh = (h - 1) * stride - 2 * pad + kh;
    ow = (w - 1) * stride - 2 * pad + kw;
    dvec out(static_cast<std::size_t>(n) * f * oh * ow, 0.0);
    for (int nn = 0; nn < n; ++nn)
        for (int cc = 0; cc < c; ++cc)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double v = in[((static_cast<std::size_t>(nn) * c + cc) * h + y) * w + x];
                    for (int ff = 0; ff < f; ++ff)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const int oy = y * stride - pad + ki;
                                const int ox = x * stride - pad + kj;
                                if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                                out[((static_cast<std::size_t>(nn) * f + ff) * oh + oy) * ow + ox] +=
                                    v * k[((static_cast<std::size_t>(cc) * f + ff) * kh + ki) * kw + kj];
                            }
                }
    return out;
}

inline dvec linear(const dvec& in, int n, int i, const dvec& w, int o, const dvec& b) {
    dvec out(static_cast<std::size_t>(n) * o, 0.0);
    for (int nn = 0; nn < n; ++nn)
        for (int oo = 0; oo < o; ++oo) {
            double acc = b[oo];
            for (int ii = 0; ii < i; ++ii)
                acc += in[static_cast<std::size_t>(nn) * i + ii] * w[static_cast<std::size_t>(oo) * i + ii];
            out[static_cast<std::size_t>(nn) * o + oo] = acc;
        }
    return out;
}

inline dvec leaky_relu(const dvec& in) {
    dvec out(in.size());
    for (std::size_t idx = 0; idx < in.size(); ++idx)
        out[idx] = in[idx] > 0.0 ? in[idx] : 0.01 * in[idx];
    return out;
}

inline double mse(const dvec& p, const dvec& t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
    return acc / static_cast<double>(p.size());
}

// mask is [N,1,H,W], broadcast over c channels
inline double masked_mse(const dvec& p, const dvec& t, const dvec& m, int n, int c, int hw) {
    double acc = 0.0, msum = 0.0;
    for (double v : m) msum += v;
    for (int nn = 0; nn < n; ++nn)
        for (int cc = 0; cc < c; ++cc)
            for (int i = 0; i < hw; ++i) {
                const std::size_t idx = (static_cast<std::size_t>(nn) * c + cc) * hw + i;
                const double d = m[static_cast<std::size_t>(nn) * hw + i] * (p[idx] - t[idx]);
                acc += d * d;
            }
    return acc / (static_cast<double>(c) * msum);
}

// Central finite differences of a scalar function, step 1e-4.
inline dvec numeric_grad(dvec x, const std::function<double(const dvec&)>& f) {
    const double h = 1e-4;
    dvec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f(x);
        x[i] = keep - h;
        const double fm = f(x);
        x[i] = keep;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
    return std::fabs(a - b) / denom;
}

inline double max_rel_err(const std::vector<float>& analytic, const dvec& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i)
        worst = std::max(worst, rel_err(static_cast<double>(analytic[i]), numeric[i]));
    return worst;
}

}  // namespace refops
