#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "masklam/errors.hpp"
#include "masklam/hash.hpp"
#include "masklam/rng.hpp"

namespace masklam {

struct Vec2 {
    float x = 0.0f, y = 0.0f;
};

inline float dist(Vec2 a, Vec2 b) {
    const float dx = a.x - b.x, dy = a.y - b.y;
    return std::sqrt(dx * dx + dy * dy);
}

// Acceleration command; components clamp to [-1,1] on ingestion.
struct Action {
    float x = 0.0f, y = 0.0f;
    Action() = default;
    Action(float x_, float y_)
        : x(std::clamp(x_, -1.0f, 1.0f)), y(std::clamp(y_, -1.0f, 1.0f)) {}
};

struct EnvConfig {
    int image_size = 32;   // H == W
    int agent_radius = 3;  // pixels
    float dt = 0.25f;
    float drag = 0.9f;
    int max_steps = 100;
    std::string distractor = "drift0";
    Vec2 goal{0.7f, 0.7f};
    float goal_jitter = 0.05f;

    void validate() const {
        if (agent_radius < 2) throw ContractError("agent_radius must be >= 2 px");
        if (image_size < 8 || image_size > 128)
            throw ContractError("image_size must be in [8, 128]");
        if (image_size % 8 != 0)
            throw ContractError("image_size must be divisible by 8 (three stride-2 stages)");
        if (max_steps < 2) throw ContractError("max_steps must be >= 2");
    }

    std::string canonical_text() const {
        std::string s;
        s += "agent_radius=" + std::to_string(agent_radius) + "\n";
        s += "distractor=" + distractor + "\n";
        s += "drag=" + fmt_float(drag) + "\n";
        s += "dt=" + fmt_float(dt) + "\n";
        s += "goal_jitter=" + fmt_float(goal_jitter) + "\n";
        s += "goal_x=" + fmt_float(goal.x) + "\n";
        s += "goal_y=" + fmt_float(goal.y) + "\n";
        s += "image_size=" + std::to_string(image_size) + "\n";
        s += "max_steps=" + std::to_string(max_steps) + "\n";
        return s;
    }
    std::uint64_t hash() const { return fnv1a64(canonical_text()); }
};

struct EnvState {
    Vec2 position{0.5f, 0.5f};
    Vec2 velocity{0.0f, 0.0f};
    int t = 0;
    Vec2 goal{0.7f, 0.7f};  // per-episode goal, jittered at reset
};

// Background family; the identifier fully determines the pixel sequence,
// ood_flag is evaluation metadata.
struct DistractorSet {
    std::string id = "drift0";
    bool ood = false;
};

struct Frame {
    std::vector<std::uint8_t> image;  // H*W*3, HWC
    std::vector<std::uint8_t> mask;   // H*W, one byte per pixel (0/1)
    float action[2] = {0.0f, 0.0f};   // action taken from this frame
    float reward = 0.0f;
};

namespace envdetail {

struct Grating {
    float amp;
    float weight[3];
    float fx, fy;     // spatial frequency, cycles per image
    float omega;      // mean temporal drift, cycles per step
    float jitter;     // spread of the per-step phase advance around omega
    float phase;
};

inline constexpr int kSlowGratings = 4;
inline constexpr int kFastGratings = 20;
inline constexpr int kNumGratings = kSlowGratings + kFastGratings;

// Per-step block noise layered over the gratings. Without it the whole
// background is a smooth function of t that a small deconv stack memorizes
// outright, and the global objective stops paying any attention tax for it.
inline constexpr int kNoiseBlock = 1;
inline constexpr float kNoiseAmp = 25.0f;

inline std::vector<Grating> grating_params(const std::string& id) {
    Rng rng(fnv1a64(id));
    std::vector<Grating> gs(kNumGratings);
    for (int g = 0; g < kNumGratings; ++g) {
        Grating& gr = gs[g];
        for (int c = 0; c < 3; ++c) gr.weight[c] = rng.uniform_f(0.3f, 1.0f);
        if (g < kSlowGratings) {
            // slow steady drift at low spatial frequency: keeps episode
            // progress linearly readable
            gr.fx = rng.uniform_f(0.5f, 2.0f) * (rng.below(2) ? 1.0f : -1.0f);
            gr.fy = rng.uniform_f(0.5f, 2.0f) * (rng.below(2) ? 1.0f : -1.0f);
            gr.amp = rng.uniform_f(16.0f, 22.0f);
            gr.omega = rng.uniform_f(0.002f, 0.006f) * (rng.below(2) ? 1.0f : -1.0f);
            gr.jitter = 0.0f;
        } else {
            // fast drift with a pseudo-random per-step advance: the phase
            // still only moves forward with t, but the next frame cannot be
            // predicted from the current one without knowing the step's
            // advance, which is what entangles a global reconstruction
            // objective with the background; many such gratings give the
            // background a state too wide to shortcut
            gr.fx = rng.uniform_f(2.0f, 6.0f) * (rng.below(2) ? 1.0f : -1.0f);
            gr.fy = rng.uniform_f(2.0f, 6.0f) * (rng.below(2) ? 1.0f : -1.0f);
            gr.amp = rng.uniform_f(7.0f, 12.0f);
            gr.omega = rng.uniform_f(0.22f, 0.28f);
            gr.jitter = rng.uniform_f(0.70f, 0.85f) * gr.omega;
        }
        gr.phase = rng.uniform_f(0.0f, 1.0f);
    }
    return gs;
}

// Decoy agents: ramp-textured discs on smooth closed paths, deterministic in
// (t, set) and shared across trajectories. They move like the agent and wear
// channel-permuted versions of its texture, so telling the real agent apart
// is the hard part of encoding these scenes.
inline constexpr int kNumSprites = 8;

struct Sprite {
    float cx0, cy0;    // path center
    float ax, ay;      // path amplitudes
    float w1, w2;      // path frequencies, cycles per step
    float p1, p2;      // path phases
    int radius;
    int perm;          // channel permutation index
};

inline std::vector<Sprite> sprite_params(const std::string& id) {
    Rng rng(mix_seed(fnv1a64(id), 0x5B127Eu));
    std::vector<Sprite> sp(kNumSprites);
    for (auto& s : sp) {
        s.cx0 = rng.uniform_f(0.4f, 0.7f);
        s.cy0 = rng.uniform_f(0.4f, 0.7f);
        s.ax = rng.uniform_f(0.08f, 0.22f);
        s.ay = rng.uniform_f(0.08f, 0.22f);
        s.w1 = rng.uniform_f(1.0f / 90.0f, 1.0f / 25.0f);
        s.w2 = rng.uniform_f(1.0f / 90.0f, 1.0f / 25.0f);
        s.p1 = rng.uniform_f(0.0f, 1.0f);
        s.p2 = rng.uniform_f(0.0f, 1.0f);
        s.radius = 2 + static_cast<int>(rng.below(3));
        s.perm = 1 + static_cast<int>(rng.below(5));  // never the identity
    }
    return sp;
}

// Phase of grating g at step t: the base phase plus t jittered advances.
inline float grating_phase(const std::string& id, const Grating& gr, int g, int t) {
    float phase = gr.phase + gr.omega * static_cast<float>(t);
    if (gr.jitter != 0.0f && t > 0) {
        std::uint64_t chain = mix_seed(fnv1a64(id), 0x9A5Eu, static_cast<std::uint64_t>(g));
        for (int s = 0; s < t; ++s) {
            const double u =
                (static_cast<double>(splitmix64(chain)) + 0.5) * (1.0 / 18446744073709551616.0);
            phase += gr.jitter * static_cast<float>(2.0 * u - 1.0);
        }
    }
    return phase;
}

}  // namespace envdetail

// Disc pixel color as a function of the offset from the continuous center
// (in units of the radius). The red/green channels ramp linearly with the
// x/y offset and the blue channel falls off radially, so the agent's
// appearance shifts with its subpixel position; reconstructing the masked
// region then requires knowing the exact motion, and intensity is linear in
// the center coordinates. A flat disc would be predictable without either.
inline void agent_color(float dx_over_r, float dy_over_r, std::uint8_t out[3]) {
    const float d2 = dx_over_r * dx_over_r + dy_over_r * dy_over_r;
    out[0] = static_cast<std::uint8_t>(190.0f + std::floor(60.0f * dx_over_r));
    out[1] = static_cast<std::uint8_t>(190.0f + std::floor(60.0f * dy_over_r));
    out[2] = static_cast<std::uint8_t>(230.0f - std::floor(120.0f * d2));
}

// The six non-identity orderings of an RGB triple; decoys use 1..5.
inline void permute_channels(const std::uint8_t in[3], int perm, std::uint8_t out[3]) {
    static constexpr int kPerm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                        {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    out[0] = in[kPerm[perm][0]];
    out[1] = in[kPerm[perm][1]];
    out[2] = in[kPerm[perm][2]];
}

inline void draw_disc(std::vector<std::uint8_t>& img, int h, int w, float cx, float cy, int radius,
                      int perm) {
    const float r2 = static_cast<float>(radius) * static_cast<float>(radius);
    const int j0 = std::max(0, static_cast<int>(std::floor(cx)) - radius - 1);
    const int j1 = std::min(w - 1, static_cast<int>(std::ceil(cx)) + radius + 1);
    const int i0 = std::max(0, static_cast<int>(std::floor(cy)) - radius - 1);
    const int i1 = std::min(h - 1, static_cast<int>(std::ceil(cy)) + radius + 1);
    for (int i = i0; i <= i1; ++i)
        for (int j = j0; j <= j1; ++j) {
            const float dx = static_cast<float>(j) - cx;
            const float dy = static_cast<float>(i) - cy;
            if (dx * dx + dy * dy <= r2) {
                std::uint8_t base[3], permuted[3];
                agent_color(dx / static_cast<float>(radius), dy / static_cast<float>(radius), base);
                permute_channels(base, perm, permuted);
                const std::size_t p = static_cast<std::size_t>(i) * w + j;
                img[p * 3 + 0] = permuted[0];
                img[p * 3 + 1] = permuted[1];
                img[p * 3 + 2] = permuted[2];
            }
        }
}

// Deterministic function of (t, set, size): shared across trajectories, so
// with a near-deterministic expert the background is correlated with actions.
inline std::vector<std::uint8_t> distractor_frame(int t, const DistractorSet& set,
                                                  const EnvConfig& config) {
    const int h = config.image_size, w = config.image_size;
    std::vector<std::uint8_t> img(static_cast<std::size_t>(h) * w * 3);
    if (set.id == "clean") {
        std::fill(img.begin(), img.end(), static_cast<std::uint8_t>(40));
        return img;
    }
    const auto gs = envdetail::grating_params(set.id);
    constexpr float kTwoPi = 6.28318530717958647692f;
    float phases[envdetail::kNumGratings];
    for (int g = 0; g < envdetail::kNumGratings; ++g)
        phases[g] = envdetail::grating_phase(set.id, gs[static_cast<std::size_t>(g)], g, t);
    const std::uint64_t noise_base = mix_seed(fnv1a64(set.id), 0xB10C5u, static_cast<std::uint64_t>(t));
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            float acc[3] = {127.5f, 127.5f, 127.5f};
            for (int g = 0; g < envdetail::kNumGratings; ++g) {
                const auto& gr = gs[static_cast<std::size_t>(g)];
                const float s = std::sin(kTwoPi * (gr.fx * static_cast<float>(j) / static_cast<float>(w) +
                                                   gr.fy * static_cast<float>(i) / static_cast<float>(h) +
                                                   phases[g]));
                for (int c = 0; c < 3; ++c) acc[c] += gr.amp * gr.weight[c] * s;
            }
            const int block = (i / envdetail::kNoiseBlock) * (w / envdetail::kNoiseBlock + 1) +
                              (j / envdetail::kNoiseBlock);
            std::uint64_t chain = noise_base ^ (static_cast<std::uint64_t>(block) * 0x9E3779B97F4A7C15ULL);
            for (int c = 0; c < 3; ++c) {
                const double u =
                    (static_cast<double>(splitmix64(chain)) + 0.5) * (1.0 / 18446744073709551616.0);
                acc[c] += envdetail::kNoiseAmp * static_cast<float>(2.0 * u - 1.0);
            }
            for (int c = 0; c < 3; ++c)
                img[(static_cast<std::size_t>(i) * w + j) * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp(acc[c], 0.0f, 255.0f));
        }
    }
    for (const auto& sp : envdetail::sprite_params(set.id)) {
        const float cx = (sp.cx0 + sp.ax * std::sin(kTwoPi * (sp.w1 * static_cast<float>(t) + sp.p1))) *
                         static_cast<float>(w);
        const float cy = (sp.cy0 + sp.ay * std::sin(kTwoPi * (sp.w2 * static_cast<float>(t) + sp.p2))) *
                         static_cast<float>(h);
        draw_disc(img, h, w, cx, cy, sp.radius, sp.perm);
    }
    return img;
}

// Fixed central start; the seed only perturbs the episode goal inside a
// small disc around the configured goal.
inline EnvState reset(const EnvConfig& config, std::uint64_t seed) {
    config.validate();
    EnvState st;
    st.position = {0.5f, 0.5f};
    st.velocity = {0.0f, 0.0f};
    st.t = 0;
    Rng rng(mix_seed(seed, 0xA11CEu));
    const float r = config.goal_jitter * std::sqrt(static_cast<float>(rng.uniform()));
    const float th = static_cast<float>(rng.uniform()) * 6.28318530717958647692f;
    st.goal.x = std::clamp(config.goal.x + r * std::cos(th), 0.05f, 0.95f);
    st.goal.y = std::clamp(config.goal.y + r * std::sin(th), 0.05f, 0.95f);
    return st;
}

inline std::pair<EnvState, float> step(const EnvState& state, Action action,
                                       const EnvConfig& config) {
    if (state.t >= config.max_steps)
        throw EpisodeFinishedError("step() at t=" + std::to_string(state.t));
    EnvState next = state;
    next.velocity.x = (1.0f - config.drag) * state.velocity.x + config.dt * action.x;
    next.velocity.y = (1.0f - config.drag) * state.velocity.y + config.dt * action.y;
    next.position.x = std::clamp(state.position.x + config.dt * next.velocity.x, 0.0f, 1.0f);
    next.position.y = std::clamp(state.position.y + config.dt * next.velocity.y, 0.0f, 1.0f);
    next.t = state.t + 1;
    const float reward = -dist(next.position, next.goal);
    return {next, reward};
}

// Paint the agent disc over a background; no anti-aliasing, so the mask is
// exactly the set of painted pixels.
inline void render_onto(const EnvState& state, const EnvConfig& config,
                        const std::vector<std::uint8_t>& background, Frame& frame) {
    const int h = config.image_size, w = config.image_size;
    frame.image = background;
    frame.mask.assign(static_cast<std::size_t>(h) * w, 0);
    const float cx = state.position.x * static_cast<float>(w);
    const float cy = state.position.y * static_cast<float>(h);
    const float r2 = static_cast<float>(config.agent_radius) * static_cast<float>(config.agent_radius);
    const int j0 = std::max(0, static_cast<int>(std::floor(cx)) - config.agent_radius - 1);
    const int j1 = std::min(w - 1, static_cast<int>(std::ceil(cx)) + config.agent_radius + 1);
    const int i0 = std::max(0, static_cast<int>(std::floor(cy)) - config.agent_radius - 1);
    const int i1 = std::min(h - 1, static_cast<int>(std::ceil(cy)) + config.agent_radius + 1);
    for (int i = i0; i <= i1; ++i)
        for (int j = j0; j <= j1; ++j) {
            const float dx = static_cast<float>(j) - cx;
            const float dy = static_cast<float>(i) - cy;
            const float d2 = dx * dx + dy * dy;
            if (d2 <= r2) {
                const std::size_t p = static_cast<std::size_t>(i) * w + j;
                const float r = static_cast<float>(config.agent_radius);
                agent_color(dx / r, dy / r, &frame.image[p * 3]);
                frame.mask[p] = 1;
            }
        }
}

inline Frame render(const EnvState& state, const EnvConfig& config) {
    Frame frame;
    render_onto(state, config, distractor_frame(state.t, DistractorSet{config.distractor}, config),
                frame);
    return frame;
}

// Proportional-derivative controller toward the episode goal.
inline Action expert_action(const EnvState& state, const EnvConfig&) {
    constexpr float kP = 4.0f, kD = 2.0f;
    return Action(kP * (state.goal.x - state.position.x) - kD * state.velocity.x,
                  kP * (state.goal.y - state.position.y) - kD * state.velocity.y);
}

// Backgrounds are a function of t only, so one episode's worth can be shared
// across every trajectory and rollout.
class BackgroundCache {
public:
    BackgroundCache(const EnvConfig& config, const DistractorSet& set) : config_(config), set_(set) {
        frames_.resize(static_cast<std::size_t>(config.max_steps));
    }
    const std::vector<std::uint8_t>& at(int t) {
        auto& f = frames_.at(static_cast<std::size_t>(t));
        if (f.empty()) f = distractor_frame(t, set_, config_);
        return f;
    }

private:
    EnvConfig config_;
    DistractorSet set_;
    std::vector<std::vector<std::uint8_t>> frames_;
};

}  // namespace masklam
