#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "masklam/rng.hpp"
#include "masklam/tensor.hpp"

namespace masklam {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform_f(-bound, bound);
    return t;
}

struct Conv {
    Tensor w, b;
    int stride = 1, pad = 0;

    Conv() = default;
    Conv(int c_in, int c_out, int k, int stride_, int pad_, Rng& rng) : stride(stride_), pad(pad_) {
        w = he_uniform({c_out, c_in, k, k}, c_in * k * k, rng);
        b = Tensor::zeros({c_out}, /*requires_grad=*/true);
    }

    Tensor forward(Tape& tape, const Tensor& x) const {
        return channel_bias(tape, conv2d(tape, x, w, stride, pad), b);
    }

    void collect(NamedTensors& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

struct Deconv {
    Tensor w, b;
    int stride = 1, pad = 0;

    Deconv() = default;
    Deconv(int c_in, int c_out, int k, int stride_, int pad_, Rng& rng) : stride(stride_), pad(pad_) {
        w = he_uniform({c_in, c_out, k, k}, c_in * k * k, rng);
        b = Tensor::zeros({c_out}, /*requires_grad=*/true);
    }

    Tensor forward(Tape& tape, const Tensor& x) const {
        return channel_bias(tape, conv_transpose2d(tape, x, w, stride, pad), b);
    }

    void collect(NamedTensors& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

struct Dense {
    Tensor w, b;

    Dense() = default;
    Dense(int d_in, int d_out, Rng& rng) {
        w = he_uniform({d_out, d_in}, d_in, rng);
        b = Tensor::zeros({d_out}, /*requires_grad=*/true);
    }

    Tensor forward(Tape& tape, const Tensor& x) const { return linear(tape, x, w, b); }

    void collect(NamedTensors& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

// Stride-2 residual downsampling block: main path conv3x3/s2 + conv3x3/s1,
// skip path conv1x1/s2, rectified sum.
struct ResBlock {
    Conv conv1, conv2, skip;

    ResBlock() = default;
    ResBlock(int c_in, int c_out, Rng& rng)
        : conv1(c_in, c_out, 3, 2, 1, rng),
          conv2(c_out, c_out, 3, 1, 1, rng),
          skip(c_in, c_out, 1, 2, 0, rng) {}

    Tensor forward(Tape& tape, const Tensor& x) const {
        Tensor h = activation(tape, conv1.forward(tape, x));
        h = conv2.forward(tape, h);
        return activation(tape, add(tape, h, skip.forward(tape, x)));
    }

    void collect(NamedTensors& out, const std::string& prefix) const {
        conv1.collect(out, prefix + ".conv1");
        conv2.collect(out, prefix + ".conv2");
        skip.collect(out, prefix + ".skip");
    }
};

// Three residual blocks, channels 16/32/64, each halving the resolution.
// Output is [N, 64, H/8, W/8].
struct Encoder {
    static constexpr int kOutChannels = 64;
    ResBlock rb1, rb2, rb3;

    Encoder() = default;
    Encoder(int c_in, Rng& rng) : rb1(c_in, 16, rng), rb2(16, 32, rng), rb3(32, 64, rng) {}

    Tensor forward(Tape& tape, const Tensor& x) const {
        return rb3.forward(tape, rb2.forward(tape, rb1.forward(tape, x)));
    }

    void collect(NamedTensors& out, const std::string& prefix) const {
        rb1.collect(out, prefix + ".rb1");
        rb2.collect(out, prefix + ".rb2");
        rb3.collect(out, prefix + ".rb3");
    }
};

inline std::vector<Tensor> tensors_of(const NamedTensors& named) {
    std::vector<Tensor> out;
    out.reserve(named.size());
    for (const auto& [name, t] : named) out.push_back(t);
    return out;
}

inline std::int64_t param_count(const NamedTensors& named) {
    std::int64_t n = 0;
    for (const auto& [name, t] : named) n += t.numel();
    return n;
}

}  // namespace masklam
