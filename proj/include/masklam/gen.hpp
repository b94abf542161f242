#pragma once

#include <cstdint>
#include <string>

#include "masklam/dataset.hpp"
#include "masklam/env.hpp"

namespace masklam {

inline constexpr float kExplorationSigma = 0.1f;

// Expert rollouts perturbed by clamped Gaussian exploration noise so actions
// vary across trajectories. Pure function of (config, n_traj, seed, set).
inline Dataset generate_dataset(const EnvConfig& config, int n_traj, std::uint64_t seed,
                                const DistractorSet& set, bool with_masks = true) {
    config.validate();
    if (n_traj < 1) throw ContractError("generate_dataset: n_traj must be >= 1");
    EnvConfig cfg = config;
    cfg.distractor = set.id;

    Dataset ds;
    DatasetHeader& h = ds.header;
    h.height = cfg.image_size;
    h.width = cfg.image_size;
    h.steps = cfg.max_steps;
    h.n_traj = n_traj;
    h.has_masks = with_masks;
    h.seed = seed;
    h.config_hash = cfg.hash();
    h.distractor_id = set.id;

    BackgroundCache backgrounds(cfg, set);
    const std::size_t stride = mask_stride_bytes(h.height, h.width);
    ds.trajectories.resize(static_cast<std::size_t>(n_traj));
    for (int k = 0; k < n_traj; ++k) {
        Trajectory& tr = ds.trajectories[static_cast<std::size_t>(k)];
        tr.images.reserve(static_cast<std::size_t>(h.steps) * h.height * h.width * 3);
        if (with_masks) tr.masks.reserve(static_cast<std::size_t>(h.steps) * stride);
        tr.actions.reserve(static_cast<std::size_t>(h.steps) * 2);
        tr.rewards.reserve(static_cast<std::size_t>(h.steps));

        EnvState st = reset(cfg, mix_seed(seed, static_cast<std::uint64_t>(k)));
        Rng noise(mix_seed(seed, static_cast<std::uint64_t>(k), 0x4017E5u));
        Frame frame;
        for (int t = 0; t < h.steps; ++t) {
            render_onto(st, cfg, backgrounds.at(t), frame);
            const Action expert = expert_action(st, cfg);
            const Action executed(
                expert.x + kExplorationSigma * static_cast<float>(noise.gauss()),
                expert.y + kExplorationSigma * static_cast<float>(noise.gauss()));
            auto [next, reward] = step(st, executed, cfg);

            tr.images.insert(tr.images.end(), frame.image.begin(), frame.image.end());
            if (with_masks) {
                const auto packed = pack_mask(frame.mask, h.height, h.width);
                tr.masks.insert(tr.masks.end(), packed.begin(), packed.end());
            }
            tr.actions.push_back(executed.x);
            tr.actions.push_back(executed.y);
            tr.rewards.push_back(reward);
            st = next;
        }
    }
    return ds;
}

}  // namespace masklam
