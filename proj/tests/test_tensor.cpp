#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "masklam/rng.hpp"
#include "masklam/tensor.hpp"
#include "reference_ops.hpp"

using namespace masklam;
using refops::dvec;

namespace {

dvec to_dvec(const Tensor& t) {
    dvec out(t.values().begin(), t.values().end());
    return out;
}

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                     bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform_f(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("conv2d forward examples") {
    Tape tape;
    SECTION("1x1 identity kernel passes input through") {
        Rng rng(7);
        Tensor x = random_tensor({1, 1, 3, 3}, rng);
        Tensor k = Tensor::from({1, 1, 1, 1}, {1.0f});
        Tensor y = conv2d(tape, x, k, 1, 0);
        REQUIRE(y.shape() == Shape{1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) REQUIRE(y.data()[i] == x.data()[i]);
    }
    SECTION("2x2 ones kernel sums the window") {
        Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
        Tensor k = Tensor::full({1, 1, 2, 2}, 1.0f);
        Tensor y = conv2d(tape, x, k, 1, 0);
        REQUIRE(y.shape() == Shape{1, 1, 1, 1});
        REQUIRE(y.item() == 10.0f);
    }
    SECTION("output geometry follows floor((H+2p-k)/s)+1") {
        Rng rng(3);
        Tensor x = random_tensor({2, 3, 7, 6}, rng);
        Tensor k = random_tensor({4, 3, 3, 3}, rng);
        Tensor y = conv2d(tape, x, k, 2, 1);
        REQUIRE(y.shape() == Shape{2, 4, 4, 3});
    }
    SECTION("channel mismatch throws") {
        Tensor x = Tensor::zeros({1, 2, 4, 4});
        Tensor k = Tensor::zeros({1, 3, 2, 2});
        REQUIRE_THROWS_AS(conv2d(tape, x, k, 1, 0), ShapeError);
    }
    SECTION("kernel larger than padded input throws") {
        Tensor x = Tensor::zeros({1, 1, 3, 3});
        Tensor k = Tensor::zeros({1, 1, 5, 5});
        REQUIRE_THROWS_AS(conv2d(tape, x, k, 1, 0), ShapeError);
    }
}

TEST_CASE("conv2d matches double-precision reference forward") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(2));
        const int c = 1 + static_cast<int>(rng.below(3));
        const int f = 1 + static_cast<int>(rng.below(3));
        const int h = 4 + static_cast<int>(rng.below(4));
        const int w = 4 + static_cast<int>(rng.below(4));
        const int k = 1 + static_cast<int>(rng.below(3));
        const int s = 1 + static_cast<int>(rng.below(2));
        const int p = static_cast<int>(rng.below(2));
        Tensor x = random_tensor({n, c, h, w}, rng);
        Tensor kt = random_tensor({f, c, k, k}, rng);
        Tape tape;
        Tensor y = conv2d(tape, x, kt, s, p);
        int oh = 0, ow = 0;
        dvec ref = refops::conv2d(to_dvec(x), n, c, h, w, to_dvec(kt), f, k, k, s, p, oh, ow);
        REQUIRE(y.numel() == static_cast<std::int64_t>(ref.size()));
        for (std::size_t i = 0; i < ref.size(); ++i)
            REQUIRE(std::fabs(y.data()[i] - ref[i]) < 1e-4);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1, c = 2, f = 2;
        const int h = 5, w = 5;
        const int k = 1 + static_cast<int>(rng.below(3));
        const int s = 1 + static_cast<int>(rng.below(2));
        const int p = static_cast<int>(rng.below(2));
        Tensor x = random_tensor({n, c, h, w}, rng);
        Tensor kt = random_tensor({f, c, k, k}, rng);
        int oh = 0, ow = 0;
        dvec ref_out = refops::conv2d(to_dvec(x), n, c, h, w, to_dvec(kt), f, k, k, s, p, oh, ow);
        dvec target(ref_out.size());
        for (auto& v : target) v = rng.uniform(-1.0, 1.0);

        Tape tape;
        Tensor tgt = Tensor::from({n, f, oh, ow}, std::vector<float>(target.begin(), target.end()));
        Tensor loss = mse(tape, conv2d(tape, x, kt, s, p), tgt);
        backward(loss, tape);

        const dvec kd = to_dvec(kt);
        auto f_of_x = [&](const dvec& xv) {
            int a, b;
            dvec out = refops::conv2d(xv, n, c, h, w, kd, f, k, k, s, p, a, b);
            return refops::mse(out, target);
        };
        dvec fd_x = refops::numeric_grad(to_dvec(x), f_of_x);
        REQUIRE(refops::max_rel_err(x.grad_vec(), fd_x) <= 1e-3);

        const dvec xd = to_dvec(x);
        auto f_of_k = [&](const dvec& kv) {
            int a, b;
            dvec out = refops::conv2d(xd, n, c, h, w, kv, f, k, k, s, p, a, b);
            return refops::mse(out, target);
        };
        dvec fd_k = refops::numeric_grad(to_dvec(kt), f_of_k);
        REQUIRE(refops::max_rel_err(kt.grad_vec(), fd_k) <= 1e-3);
    }
}

TEST_CASE("conv_transpose2d forward examples") {
    Tape tape;
    SECTION("single pixel expands to the kernel footprint") {
        Tensor x = Tensor::from({1, 1, 1, 1}, {5.0f});
        Tensor k = Tensor::full({1, 1, 2, 2}, 1.0f);
        Tensor y = conv_transpose2d(tape, x, k, 1, 0);
        REQUIRE(y.shape() == Shape{1, 1, 2, 2});
        for (int i = 0; i < 4; ++i) REQUIRE(y.data()[i] == 5.0f);
    }
    SECTION("zero input gives zero output") {
        Rng rng(5);
        Tensor x = Tensor::zeros({2, 3, 4, 4});
        Tensor k = random_tensor({3, 2, 4, 4}, rng);
        Tensor y = conv_transpose2d(tape, x, k, 2, 1);
        REQUIRE(y.shape() == Shape{2, 2, 8, 8});
        for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(y.data()[i] == 0.0f);
    }
    SECTION("channel mismatch throws") {
        Tensor x = Tensor::zeros({1, 2, 4, 4});
        Tensor k = Tensor::zeros({3, 2, 2, 2});
        REQUIRE_THROWS_AS(conv_transpose2d(tape, x, k, 1, 0), ShapeError);
    }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1, c = 2, f = 3;
        const int h = 5, w = 5;
        const int k = 3, s = 2, p = 1;  // (5 + 2 - 3) % 2 == 0
        Tensor x = random_tensor({n, c, h, w}, rng, 0.1f, 1.0f);
        Tensor kt = random_tensor({f, c, k, k}, rng, 0.1f, 1.0f);
        Tape tape;
        tape.set_recording(false);
        Tensor cx = conv2d(tape, x, kt, s, p);
        Tensor y = random_tensor(cx.shape(), rng, 0.1f, 1.0f);
        // same buffer, read as a conv_transpose kernel (in=F, out=C)
        Tensor kt_swapped = Tensor::from({f, c, k, k}, kt.values());
        Tensor cty = conv_transpose2d(tape, y, kt_swapped, s, p);
        REQUIRE(cty.shape() == x.shape());

        double lhs = 0.0, rhs = 0.0;
        for (std::int64_t i = 0; i < cx.numel(); ++i)
            lhs += static_cast<double>(cx.data()[i]) * static_cast<double>(y.data()[i]);
        for (std::int64_t i = 0; i < x.numel(); ++i)
            rhs += static_cast<double>(x.data()[i]) * static_cast<double>(cty.data()[i]);
        REQUIRE(std::fabs(lhs - rhs) / std::max(std::fabs(lhs), std::fabs(rhs)) <= 1e-6);
    }
}

TEST_CASE("conv_transpose2d gradients match finite differences") {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1, c = 2, f = 2;
        const int h = 3 + static_cast<int>(rng.below(3));
        const int w = 3 + static_cast<int>(rng.below(3));
        const int k = 2 + static_cast<int>(rng.below(2));
        const int s = 1 + static_cast<int>(rng.below(2));
        const int p = static_cast<int>(rng.below(2));
        if ((h - 1) * s - 2 * p + k < 1) continue;
        Tensor x = random_tensor({n, c, h, w}, rng);
        Tensor kt = random_tensor({c, f, k, k}, rng);
        int oh = 0, ow = 0;
        dvec ref_out =
            refops::conv_transpose2d(to_dvec(x), n, c, h, w, to_dvec(kt), f, k, k, s, p, oh, ow);
        dvec target(ref_out.size());
        for (auto& v : target) v = rng.uniform(-1.0, 1.0);

        Tape tape;
        Tensor tgt = Tensor::from({n, f, oh, ow}, std::vector<float>(target.begin(), target.end()));
        Tensor loss = mse(tape, conv_transpose2d(tape, x, kt, s, p), tgt);
        backward(loss, tape);

        const dvec kd = to_dvec(kt);
        auto f_of_x = [&](const dvec& xv) {
            int a, b;
            dvec out = refops::conv_transpose2d(xv, n, c, h, w, kd, f, k, k, s, p, a, b);
            return refops::mse(out, target);
        };
        REQUIRE(refops::max_rel_err(x.grad_vec(), refops::numeric_grad(to_dvec(x), f_of_x)) <= 1e-3);

        const dvec xd = to_dvec(x);
        auto f_of_k = [&](const dvec& kv) {
            int a, b;
            dvec out = refops::conv_transpose2d(xd, n, c, h, w, kv, f, k, k, s, p, a, b);
            return refops::mse(out, target);
        };
        REQUIRE(refops::max_rel_err(kt.grad_vec(), refops::numeric_grad(to_dvec(kt), f_of_k)) <=
                1e-3);
    }
}

TEST_CASE("linear examples and gradients") {
    Tape tape;
    SECTION("identity weight, zero bias") {
        Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor w = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        Tensor b = Tensor::zeros({3});
        Tensor y = linear(tape, x, w, b);
        for (int i = 0; i < 6; ++i) REQUIRE(y.data()[i] == x.data()[i]);
    }
    SECTION("hand dot product") {
        Tensor x = Tensor::from({1, 2}, {1, 2});
        Tensor w = Tensor::from({1, 2}, {3, 4});
        Tensor b = Tensor::from({1}, {1});
        REQUIRE(linear(tape, x, w, b).item() == 12.0f);
    }
    SECTION("dimension mismatch throws") {
        Tensor x = Tensor::zeros({1, 3});
        Tensor w = Tensor::zeros({2, 4});
        Tensor b = Tensor::zeros({2});
        REQUIRE_THROWS_AS(linear(tape, x, w, b), ShapeError);
    }
    SECTION("finite-difference gradient check") {
        Rng rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 1 + static_cast<int>(rng.below(3));
            const int i = 1 + static_cast<int>(rng.below(4));
            const int o = 1 + static_cast<int>(rng.below(4));
            Tensor x = random_tensor({n, i}, rng);
            Tensor w = random_tensor({o, i}, rng);
            Tensor b = random_tensor({o}, rng);
            dvec target(static_cast<std::size_t>(n) * o);
            for (auto& v : target) v = rng.uniform(-1.0, 1.0);

            Tape t2;
            Tensor tgt = Tensor::from({n, o}, std::vector<float>(target.begin(), target.end()));
            Tensor loss = mse(t2, linear(t2, x, w, b), tgt);
            backward(loss, t2);

            const dvec wd = to_dvec(w), bd = to_dvec(b), xd = to_dvec(x);
            auto fx = [&](const dvec& v) { return refops::mse(refops::linear(v, n, i, wd, o, bd), target); };
            auto fw = [&](const dvec& v) { return refops::mse(refops::linear(xd, n, i, v, o, bd), target); };
            auto fb = [&](const dvec& v) { return refops::mse(refops::linear(xd, n, i, wd, o, v), target); };
            REQUIRE(refops::max_rel_err(x.grad_vec(), refops::numeric_grad(xd, fx)) <= 1e-3);
            REQUIRE(refops::max_rel_err(w.grad_vec(), refops::numeric_grad(wd, fw)) <= 1e-3);
            REQUIRE(refops::max_rel_err(b.grad_vec(), refops::numeric_grad(bd, fb)) <= 1e-3);
        }
    }
}

TEST_CASE("activation is the 0.01-slope leaky rectifier") {
    Tape tape;
    Tensor x = Tensor::from({3}, {0.0f, -1.0f, 2.0f});
    Tensor y = activation(tape, x);
    REQUIRE(y.data()[0] == 0.0f);
    REQUIRE(y.data()[1] == -0.01f);
    REQUIRE(y.data()[2] == 2.0f);

    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor v = random_tensor({7}, rng);
        dvec target(7);
        for (auto& t : target) t = rng.uniform(-1.0, 1.0);
        Tape t2;
        Tensor tgt = Tensor::from({7}, std::vector<float>(target.begin(), target.end()));
        Tensor loss = mse(t2, activation(t2, v), tgt);
        backward(loss, t2);
        auto f = [&](const dvec& vv) { return refops::mse(refops::leaky_relu(vv), target); };
        REQUIRE(refops::max_rel_err(v.grad_vec(), refops::numeric_grad(to_dvec(v), f)) <= 1e-3);
    }
}

TEST_CASE("mse examples and gradient") {
    Tape tape;
    SECTION("zero residual") {
        Tensor p = Tensor::from({2, 2}, {1, 2, 3, 4});
        REQUIRE(mse(tape, p, p).item() == 0.0f);
    }
    SECTION("hand value (1+9)/2") {
        Tensor p = Tensor::from({2}, {0, 0});
        Tensor t = Tensor::from({2}, {1, 3});
        REQUIRE(mse(tape, p, t).item() == 5.0f);
    }
    SECTION("shape mismatch throws") {
        REQUIRE_THROWS_AS(mse(tape, Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
    }
    SECTION("gradient is 2(pred-target)/numel and matches finite differences") {
        Rng rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 2 + static_cast<int>(rng.below(6));
            Tensor p = random_tensor({n}, rng);
            Tensor t = random_tensor({n}, rng, -1.0f, 1.0f, false);
            Tape t2;
            Tensor loss = mse(t2, p, t);
            backward(loss, t2);
            const dvec td = to_dvec(t);
            for (int i = 0; i < n; ++i) {
                const float expect = 2.0f * (p.data()[i] - t.data()[i]) / static_cast<float>(n);
                REQUIRE(std::fabs(p.grad()[i] - expect) < 1e-6);
            }
            auto f = [&](const dvec& pv) { return refops::mse(pv, td); };
            REQUIRE(refops::max_rel_err(p.grad_vec(), refops::numeric_grad(to_dvec(p), f)) <= 1e-3);
        }
    }
}

TEST_CASE("masked_mse examples") {
    Tape tape;
    SECTION("hand computation over 2 masked pixels") {
        Tensor target = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
        Tensor pred = Tensor::zeros({1, 1, 2, 2});
        Tensor mask = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
        REQUIRE(masked_mse(tape, pred, target, mask).item() == 1.0f);
    }
    SECTION("all-zero mask raises degenerate-mask error") {
        Tensor p = Tensor::zeros({1, 1, 2, 2});
        Tensor m = Tensor::zeros({1, 1, 2, 2});
        REQUIRE_THROWS_AS(masked_mse(tape, p, p, m), DegenerateMaskError);
    }
    SECTION("non-binary mask rejected") {
        Tensor p = Tensor::zeros({1, 1, 2, 2});
        Tensor m = Tensor::full({1, 1, 2, 2}, 0.5f);
        REQUIRE_THROWS_AS(masked_mse(tape, p, p, m), ContractError);
    }
    SECTION("mask shape must be [N,1,H,W]") {
        Tensor p = Tensor::zeros({1, 3, 2, 2});
        Tensor m = Tensor::full({1, 3, 2, 2}, 1.0f);
        REQUIRE_THROWS_AS(masked_mse(tape, p, p, m), ShapeError);
    }
}

TEST_CASE("masked_mse with full mask equals mse bit-for-bit") {
    Rng rng(37);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(3));
        const int c = 1 + static_cast<int>(rng.below(3));
        const int h = 2 + static_cast<int>(rng.below(4));
        const int w = 2 + static_cast<int>(rng.below(4));
        Tensor p = random_tensor({n, c, h, w}, rng);
        Tensor t = random_tensor({n, c, h, w}, rng, -1.0f, 1.0f, false);
        Tensor ones = Tensor::full({n, 1, h, w}, 1.0f);

        Tape ta, tb;
        Tensor la = masked_mse(ta, p, t, ones);
        Tensor lb = mse(tb, p, t);
        REQUIRE(la.item() == lb.item());

        // gradients are also identical bit-for-bit
        backward(la, ta);
        std::vector<float> ga = p.grad_vec();
        p.clear_grad();
        backward(lb, tb);
        for (std::int64_t i = 0; i < p.numel(); ++i) REQUIRE(ga[i] == p.grad()[i]);
        p.clear_grad();
    }
}

TEST_CASE("masked_mse gradient is exactly zero at masked-out pixels") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(2));
        const int c = 1 + static_cast<int>(rng.below(3));
        const int h = 3, w = 3;
        Tensor p = random_tensor({n, c, h, w}, rng);
        Tensor t = random_tensor({n, c, h, w}, rng, -1.0f, 1.0f, false);
        Tensor m = Tensor::zeros({n, 1, h, w});
        bool any = false;
        for (std::int64_t i = 0; i < m.numel(); ++i) {
            m.data()[i] = rng.below(2) ? 1.0f : 0.0f;
            any = any || m.data()[i] > 0.0f;
        }
        if (!any) m.data()[0] = 1.0f;

        Tape tape;
        Tensor loss = masked_mse(tape, p, t, m);
        backward(loss, tape);
        for (int nn = 0; nn < n; ++nn)
            for (int cc = 0; cc < c; ++cc)
                for (int i = 0; i < h * w; ++i) {
                    const float mask_v = m.data()[nn * h * w + i];
                    const float g = p.grad()[(nn * c + cc) * h * w + i];
                    if (mask_v == 0.0f) REQUIRE(g == 0.0f);
                }
    }
}

TEST_CASE("masked_mse gradient matches finite differences") {
    Rng rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1, c = 2, h = 3, w = 3;
        Tensor p = random_tensor({n, c, h, w}, rng);
        Tensor t = random_tensor({n, c, h, w}, rng, -1.0f, 1.0f, false);
        Tensor m = Tensor::zeros({n, 1, h, w});
        for (std::int64_t i = 0; i < m.numel(); ++i) m.data()[i] = rng.below(2) ? 1.0f : 0.0f;
        m.data()[4] = 1.0f;

        Tape tape;
        backward(masked_mse(tape, p, t, m), tape);

        const dvec td = to_dvec(t), md = to_dvec(m);
        auto f = [&](const dvec& pv) { return refops::masked_mse(pv, td, md, n, c, h * w); };
        REQUIRE(refops::max_rel_err(p.grad_vec(), refops::numeric_grad(to_dvec(p), f)) <= 1e-3);
    }
}

TEST_CASE("backward basics") {
    SECTION("sum over a vector gives unit gradients") {
        Tape tape;
        Tensor x = Tensor::from({3}, {5, -2, 0});
        x.set_requires_grad(true);
        backward(sum_all(tape, x), tape);
        for (int i = 0; i < 3; ++i) REQUIRE(x.grad()[i] == 1.0f);
    }
    SECTION("mse against zero on a singleton") {
        Tape tape;
        Tensor x = Tensor::from({1}, {2});
        x.set_requires_grad(true);
        backward(mse(tape, x, Tensor::zeros({1})), tape);
        REQUIRE(x.grad()[0] == 4.0f);
    }
    SECTION("non-scalar loss rejected") {
        Tape tape;
        Tensor x = Tensor::zeros({2}, true);
        REQUIRE_THROWS_AS(backward(x, tape), ContractError);
    }
    SECTION("shared subexpressions accumulate additively") {
        Rng rng(47);
        Tensor x = random_tensor({4}, rng);
        Tape tape;
        Tensor y = add(tape, x, x);  // y = 2x via sharing
        backward(sum_all(tape, y), tape);
        std::vector<float> shared = x.grad_vec();
        x.clear_grad();

        // unshared expansion: two independent copies of the same values
        Tensor x1 = Tensor::from({4}, x.values());
        x1.set_requires_grad(true);
        Tensor x2 = Tensor::from({4}, x.values());
        x2.set_requires_grad(true);
        Tape t2;
        backward(sum_all(t2, add(t2, x1, x2)), t2);
        for (int i = 0; i < 4; ++i) REQUIRE(shared[i] == x1.grad()[i] + x2.grad()[i]);
    }
}

TEST_CASE("structural ops gradient checks") {
    Rng rng(53);
    SECTION("add") {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor a = random_tensor({5}, rng);
            Tensor b = random_tensor({5}, rng);
            dvec target(5);
            for (auto& v : target) v = rng.uniform(-1.0, 1.0);
            Tape tape;
            Tensor tgt = Tensor::from({5}, std::vector<float>(target.begin(), target.end()));
            backward(mse(tape, add(tape, a, b), tgt), tape);
            const dvec bd = to_dvec(b);
            auto f = [&](const dvec& av) {
                dvec s(av.size());
                for (std::size_t i = 0; i < s.size(); ++i) s[i] = av[i] + bd[i];
                return refops::mse(s, target);
            };
            REQUIRE(refops::max_rel_err(a.grad_vec(), refops::numeric_grad(to_dvec(a), f)) <= 1e-3);
        }
    }
    SECTION("channel_bias, concat_channels, broadcast_spatial, flatten2d") {
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 1 + static_cast<int>(rng.below(2));
            const int c = 1 + static_cast<int>(rng.below(2));
            const int h = 2, w = 3;
            Tensor x = random_tensor({n, c, h, w}, rng);
            Tensor bias = random_tensor({c}, rng);
            Tensor z = random_tensor({n, 2}, rng);

            Tape tape;
            Tensor v1 = channel_bias(tape, x, bias);
            Tensor v2 = concat_channels(tape, v1, broadcast_spatial(tape, z, h, w));
            Tensor flat = flatten2d(tape, v2);
            dvec target(static_cast<std::size_t>(flat.numel()));
            for (auto& v : target) v = rng.uniform(-1.0, 1.0);
            Tensor tgt = Tensor::from(flat.shape(), std::vector<float>(target.begin(), target.end()));
            backward(mse(tape, flat, tgt), tape);

            auto compute = [&](const dvec& xv, const dvec& bv, const dvec& zv) {
                // channel_bias then concat with broadcast z then flatten
                dvec out;
                out.reserve(static_cast<std::size_t>(n) * (c + 2) * h * w);
                for (int nn = 0; nn < n; ++nn) {
                    for (int cc = 0; cc < c; ++cc)
                        for (int i = 0; i < h * w; ++i)
                            out.push_back(xv[(static_cast<std::size_t>(nn) * c + cc) * h * w + i] + bv[cc]);
                    for (int dd = 0; dd < 2; ++dd)
                        for (int i = 0; i < h * w; ++i)
                            out.push_back(zv[static_cast<std::size_t>(nn) * 2 + dd]);
                }
                return refops::mse(out, target);
            };
            const dvec xd = to_dvec(x), bd = to_dvec(bias), zd = to_dvec(z);
            auto fx = [&](const dvec& v) { return compute(v, bd, zd); };
            auto fb = [&](const dvec& v) { return compute(xd, v, zd); };
            auto fz = [&](const dvec& v) { return compute(xd, bd, v); };
            REQUIRE(refops::max_rel_err(x.grad_vec(), refops::numeric_grad(xd, fx)) <= 1e-3);
            REQUIRE(refops::max_rel_err(bias.grad_vec(), refops::numeric_grad(bd, fb)) <= 1e-3);
            REQUIRE(refops::max_rel_err(z.grad_vec(), refops::numeric_grad(zd, fz)) <= 1e-3);
        }
    }
}

TEST_CASE("detach severs gradient flow") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor y = add(tape, x, x);
    Tensor z = y.detach();
    REQUIRE_FALSE(z.requires_grad());
    REQUIRE(z.data()[0] == y.data()[0]);
    backward(sum_all(tape, y), tape);
    REQUIRE(x.has_grad());
}
