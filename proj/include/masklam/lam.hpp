#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "masklam/dataset.hpp"
#include "masklam/image.hpp"
#include "masklam/model_io.hpp"
#include "masklam/nn.hpp"
#include "masklam/optim.hpp"
#include "masklam/tensor.hpp"

namespace masklam {

enum class Objective { lapo, masklam };

inline const char* objective_name(Objective o) {
    return o == Objective::lapo ? "lapo" : "masklam";
}

inline Objective objective_from(const std::string& s) {
    if (s == "lapo") return Objective::lapo;
    if (s == "masklam") return Objective::masklam;
    throw ContractError("unknown objective '" + s + "' (expected lapo or masklam)");
}

// IDM encodes (o_t, o_{t+1}) through residual conv blocks into a linear
// bottleneck of width d; the FDM encodes o_t, tiles z over the coarse grid,
// and deconvolves back to a full-resolution prediction of o_{t+1}. A linear
// probe maps detached latents to ground-truth actions.
struct LamModel {
    int image_size = 0;
    int latent_dim = 0;

    Encoder idm_enc;
    Dense idm_bottleneck;
    Encoder fdm_enc;
    Deconv fdm_up1, fdm_up2, fdm_up3;
    Dense probe;
    // running input statistics for the probe; EMA-updated, not optimized
    Tensor probe_mu, probe_var;

    LamModel() = default;
    LamModel(int image_size_, int latent_dim_, std::uint64_t seed)
        : image_size(image_size_), latent_dim(latent_dim_) {
        if (image_size % 8 != 0 || image_size < 8)
            throw ContractError("image_size must be a positive multiple of 8");
        if (latent_dim < 1) throw ContractError("latent_dim must be >= 1");
        Rng rng(mix_seed(seed, 0x1A77u));
        const int grid = image_size / 8;
        idm_enc = Encoder(6, rng);
        idm_bottleneck = Dense(Encoder::kOutChannels * grid * grid, latent_dim, rng);
        fdm_enc = Encoder(3, rng);
        fdm_up1 = Deconv(Encoder::kOutChannels + latent_dim, 64, 4, 2, 1, rng);
        fdm_up2 = Deconv(64, 32, 4, 2, 1, rng);
        fdm_up3 = Deconv(32, 3, 4, 2, 1, rng);
        probe = Dense(latent_dim, 2, rng);
        probe_mu = Tensor::zeros({latent_dim});
        probe_var = Tensor::full({latent_dim}, 1.0f);
    }

    int grid() const { return image_size / 8; }

    NamedTensors lam_params() const {
        NamedTensors out;
        idm_enc.collect(out, "idm.enc");
        idm_bottleneck.collect(out, "idm.bottleneck");
        fdm_enc.collect(out, "fdm.enc");
        fdm_up1.collect(out, "fdm.up1");
        fdm_up2.collect(out, "fdm.up2");
        fdm_up3.collect(out, "fdm.up3");
        return out;
    }
    NamedTensors probe_params() const {
        NamedTensors out;
        probe.collect(out, "probe");
        return out;
    }
    NamedTensors all_params() const {
        NamedTensors out = lam_params();
        NamedTensors p = probe_params();
        out.insert(out.end(), p.begin(), p.end());
        out.emplace_back("probe.stats.mu", probe_mu);
        out.emplace_back("probe.stats.var", probe_var);
        return out;
    }
};

inline void check_obs(const Tensor& obs, int image_size, const char* what) {
    if (obs.ndim() != 4 || obs.dim(1) != 3 || obs.dim(2) != image_size || obs.dim(3) != image_size)
        throw ShapeError(std::string(what) + " must be [N,3," + std::to_string(image_size) + "," +
                         std::to_string(image_size) + "], got " + shape_str(obs.shape()));
}

inline Tensor idm_forward(Tape& tape, const LamModel& m, const Tensor& obs, const Tensor& next_obs) {
    check_obs(obs, m.image_size, "idm obs");
    check_obs(next_obs, m.image_size, "idm next_obs");
    if (obs.dim(0) != next_obs.dim(0)) throw ShapeError("idm batch dims disagree");
    Tensor x = concat_channels(tape, obs, next_obs);
    Tensor h = m.idm_enc.forward(tape, x);
    return m.idm_bottleneck.forward(tape, flatten2d(tape, h));
}

inline Tensor fdm_forward(Tape& tape, const LamModel& m, const Tensor& obs, const Tensor& z) {
    check_obs(obs, m.image_size, "fdm obs");
    if (z.ndim() != 2 || z.dim(1) != m.latent_dim)
        throw ShapeError("fdm z must be [N," + std::to_string(m.latent_dim) + "], got " +
                         shape_str(z.shape()));
    if (z.dim(0) != obs.dim(0)) throw ShapeError("fdm batch dims disagree");
    Tensor e = m.fdm_enc.forward(tape, obs);
    Tensor zb = broadcast_spatial(tape, z, m.grid(), m.grid());
    Tensor h = concat_channels(tape, e, zb);
    h = activation(tape, m.fdm_up1.forward(tape, h));
    h = activation(tape, m.fdm_up2.forward(tape, h));
    return m.fdm_up3.forward(tape, h);  // unconstrained reals; the loss handles range
}

inline Tensor lapo_loss(Tape& tape, const LamModel& m, const TransitionBatch& batch) {
    Tensor z = idm_forward(tape, m, batch.obs, batch.next_obs);
    Tensor pred = fdm_forward(tape, m, batch.obs, z);
    return mse(tape, pred, batch.next_obs);
}

// The weighting mask is the mask of the NEXT observation.
inline Tensor masklam_loss(Tape& tape, const LamModel& m, const TransitionBatch& batch) {
    if (!batch.next_mask.defined())
        throw ContractError("masklam_loss requires batch masks (dataset lacks them)");
    Tensor z = idm_forward(tape, m, batch.obs, batch.next_obs);
    Tensor pred = fdm_forward(tape, m, batch.obs, z);
    return masked_mse(tape, pred, batch.next_obs, batch.next_mask);
}

inline Tensor objective_loss(Tape& tape, const LamModel& m, const TransitionBatch& batch,
                             Objective obj) {
    return obj == Objective::lapo ? lapo_loss(tape, m, batch) : masklam_loss(tape, m, batch);
}

struct TrainReport {
    int step = 0;
    float loss = 0.0f;
    float probe_mse = 0.0f;
    double wall_s = 0.0;
};

struct TrainHyper {
    int batch = 16;
    AdamConfig adam;
};

// The probe is a linear head trained at the same cadence as the LAM; a hotter
// learning rate keeps the measurement from lagging the representation.
inline constexpr float kProbeLearningRate = 1e-2f;

inline AdamConfig probe_adam_config(const AdamConfig& base) {
    AdamConfig cfg = base;
    cfg.lr = kProbeLearningRate;
    return cfg;
}

// Held-out split: the last 10% of trajectories never enter training.
inline int heldout_count(const Dataset& ds) { return std::max(1, ds.header.n_traj / 10); }

inline std::vector<int> train_trajs(const Dataset& ds) {
    std::vector<int> v;
    const int n = ds.header.n_traj - heldout_count(ds);
    for (int i = 0; i < n; ++i) v.push_back(i);
    return v;
}

inline std::vector<int> heldout_trajs(const Dataset& ds) {
    std::vector<int> v;
    for (int i = ds.header.n_traj - heldout_count(ds); i < ds.header.n_traj; ++i) v.push_back(i);
    return v;
}

inline constexpr float kProbeStatsMomentum = 0.99f;
inline constexpr float kProbeStatsEps = 1e-6f;

// Standardize latents with the model's running statistics; the composition
// with the linear head is still a linear map of z.
inline Tensor probe_standardize(const LamModel& m, const Tensor& z) {
    const int n = z.dim(0), d = z.dim(1);
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.data()[i * d + j] =
                (z.data()[i * d + j] - m.probe_mu.data()[j]) /
                std::sqrt(m.probe_var.data()[j] + kProbeStatsEps);
    return out;
}

inline Tensor probe_predict(const LamModel& m, const Tensor& z) {
    Tape no_grad;
    no_grad.set_recording(false);
    return m.probe.forward(no_grad, probe_standardize(m, z));
}

// One probe update from detached latents; IDM/FDM parameters are untouched
// because gradient flow is severed at the bottleneck output.
inline float train_probe_step_from_z(LamModel& m, AdamState& probe_adam, const Tensor& z_detached,
                                     const Tensor& actions) {
    const int n = z_detached.dim(0), d = z_detached.dim(1);
    for (int j = 0; j < d; ++j) {
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < n; ++i) mean += static_cast<double>(z_detached.data()[i * d + j]);
        mean /= static_cast<double>(n);
        for (int i = 0; i < n; ++i) {
            const double dv = static_cast<double>(z_detached.data()[i * d + j]) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(n);
        m.probe_mu.data()[j] = kProbeStatsMomentum * m.probe_mu.data()[j] +
                               (1.0f - kProbeStatsMomentum) * static_cast<float>(mean);
        m.probe_var.data()[j] = kProbeStatsMomentum * m.probe_var.data()[j] +
                                (1.0f - kProbeStatsMomentum) * static_cast<float>(var);
    }
    Tape tape;
    Tensor loss = mse(tape, m.probe.forward(tape, probe_standardize(m, z_detached)), actions);
    backward(loss, tape);
    std::vector<Tensor> params = tensors_of(m.probe_params());
    adam_step(params, probe_adam);
    return loss.item();
}

inline float train_probe_step(LamModel& m, AdamState& probe_adam, const TransitionBatch& batch) {
    Tape no_grad;
    no_grad.set_recording(false);
    Tensor z = idm_forward(no_grad, m, batch.obs, batch.next_obs).detach();
    return train_probe_step_from_z(m, probe_adam, z, batch.actions);
}

template <typename Callback>
std::vector<TrainReport> train_lam_cb(LamModel& m, const Dataset& ds, Objective obj, int steps,
                                      std::uint64_t seed, const TrainHyper& hyper, Callback&& cb) {
    if (obj == Objective::masklam && !ds.header.has_masks)
        throw ContractError("masklam objective requires a dataset with masks");
    std::vector<Tensor> lam_params = tensors_of(m.lam_params());
    AdamState lam_adam(hyper.adam);
    lam_adam.attach(lam_params);
    AdamState probe_adam(probe_adam_config(hyper.adam));
    std::vector<Tensor> probe_params = tensors_of(m.probe_params());
    probe_adam.attach(probe_params);

    const std::vector<int> trainset = train_trajs(ds);
    std::vector<TrainReport> reports;
    reports.reserve(static_cast<std::size_t>(steps));
    const auto t0 = std::chrono::steady_clock::now();

    std::uint64_t epoch = 0;
    TransitionIter iter(ds, hyper.batch, mix_seed(seed, epoch), trainset);
    for (int step = 0; step < steps; ++step) {
        auto batch = iter.next();
        if (!batch) {
            ++epoch;
            iter = TransitionIter(ds, hyper.batch, mix_seed(seed, epoch), trainset);
            batch = iter.next();
        }
        Tape tape;
        Tensor z = idm_forward(tape, m, batch->obs, batch->next_obs);
        Tensor pred = fdm_forward(tape, m, batch->obs, z);
        Tensor loss = obj == Objective::lapo
                          ? mse(tape, pred, batch->next_obs)
                          : masked_mse(tape, pred, batch->next_obs, batch->next_mask);
        const float loss_v = loss.item();
        if (!std::isfinite(loss_v))
            throw DivergenceError("non-finite " + std::string(objective_name(obj)) +
                                  " loss at step " + std::to_string(step));
        backward(loss, tape);
        adam_step(lam_params, lam_adam);

        const float probe_mse_v = train_probe_step_from_z(m, probe_adam, z.detach(), batch->actions);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        reports.push_back(TrainReport{step, loss_v, probe_mse_v, wall});
        cb(reports.back());
    }
    return reports;
}

inline std::vector<TrainReport> train_lam(LamModel& m, const Dataset& ds, Objective obj, int steps,
                                          std::uint64_t seed, const TrainHyper& hyper = {}) {
    return train_lam_cb(m, ds, obj, steps, seed, hyper, [](const TrainReport&) {});
}

// Mean squared probe error over every held-out transition.
inline double probe_mse_eval(const LamModel& m, const Dataset& ds) {
    TransitionIter iter(ds, 64, 0, heldout_trajs(ds));
    double acc = 0.0;
    std::int64_t count = 0;
    while (auto batch = iter.next()) {
        Tape no_grad;
        no_grad.set_recording(false);
        Tensor z = idm_forward(no_grad, m, batch->obs, batch->next_obs);
        Tensor pred = probe_predict(m, z);
        for (std::int64_t i = 0; i < pred.numel(); ++i) {
            const double d = static_cast<double>(pred.data()[i]) -
                             static_cast<double>(batch->actions.data()[i]);
            acc += d * d;
        }
        count += pred.numel();
    }
    return acc / static_cast<double>(count);
}

// Latent-label every transition; the final step of each trajectory has no
// successor, so its slot is zero-filled and unusable by construction.
inline Dataset label_dataset(const LamModel& m, const Dataset& ds) {
    Dataset out = ds;
    out.header.latent_dim = m.latent_dim;
    out.header.has_latents = true;
    const DatasetHeader& h = out.header;
    const int hw = h.height * h.width;
    const int chunk = 64;
    for (int traj = 0; traj < h.n_traj; ++traj) {
        Trajectory& tr = out.trajectories[static_cast<std::size_t>(traj)];
        tr.latents.assign(static_cast<std::size_t>(h.steps) * m.latent_dim, 0.0f);
        for (int t0 = 0; t0 + 1 < h.steps; t0 += chunk) {
            const int b = std::min(chunk, h.steps - 1 - t0);
            Tensor obs = Tensor::zeros({b, 3, h.height, h.width});
            Tensor next_obs = Tensor::zeros({b, 3, h.height, h.width});
            for (int i = 0; i < b; ++i) {
                fill_chw(out.image(traj, t0 + i), h.height, h.width,
                         obs.data() + static_cast<std::size_t>(i) * 3 * hw);
                fill_chw(out.image(traj, t0 + i + 1), h.height, h.width,
                         next_obs.data() + static_cast<std::size_t>(i) * 3 * hw);
            }
            Tape no_grad;
            no_grad.set_recording(false);
            Tensor z = idm_forward(no_grad, m, obs, next_obs);
            std::memcpy(tr.latents.data() + static_cast<std::size_t>(t0) * m.latent_dim, z.data(),
                        static_cast<std::size_t>(b) * m.latent_dim * sizeof(float));
        }
    }
    return out;
}

// Per-region reconstruction error from one forward pass: mean squared error
// over pixels inside the next-observation mask vs outside it.
struct RegionMse {
    double inside = 0.0;
    double outside = 0.0;
};

inline RegionMse region_mse(const LamModel& m, const TransitionBatch& batch) {
    if (!batch.next_mask.defined()) throw ContractError("region_mse requires masks");
    Tape no_grad;
    no_grad.set_recording(false);
    Tensor z = idm_forward(no_grad, m, batch.obs, batch.next_obs);
    Tensor pred = fdm_forward(no_grad, m, batch.obs, z);
    const int n = pred.dim(0), c = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
    double in_acc = 0.0, out_acc = 0.0;
    std::int64_t in_n = 0, out_n = 0;
    for (int nn = 0; nn < n; ++nn) {
        const float* mask = batch.next_mask.data() + static_cast<std::size_t>(nn) * hw;
        for (int cc = 0; cc < c; ++cc) {
            const std::size_t base = (static_cast<std::size_t>(nn) * c + cc) * hw;
            for (int i = 0; i < hw; ++i) {
                const double d = static_cast<double>(pred.data()[base + i]) -
                                 static_cast<double>(batch.next_obs.data()[base + i]);
                if (mask[i] > 0.0f) {
                    in_acc += d * d;
                    ++in_n;
                } else {
                    out_acc += d * d;
                    ++out_n;
                }
            }
        }
    }
    return RegionMse{in_n ? in_acc / static_cast<double>(in_n) : 0.0,
                     out_n ? out_acc / static_cast<double>(out_n) : 0.0};
}

// Grid of (o_t, o_{t+1}, prediction) rows with 1-px separators, written as a
// lossless PPM.
inline void dump_reconstructions(const LamModel& m, const TransitionBatch& batch,
                                 const std::string& path) {
    Tape no_grad;
    no_grad.set_recording(false);
    Tensor z = idm_forward(no_grad, m, batch.obs, batch.next_obs);
    Tensor pred = fdm_forward(no_grad, m, batch.obs, z);

    const int rows = batch.size;
    const int h = m.image_size, w = m.image_size;
    const int grid_h = rows * h + (rows - 1);
    const int grid_w = 3 * w + 2;
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(grid_h) * grid_w * 3, 128);

    auto blit = [&](const Tensor& src, int row, int col) {
        const int y0 = row * (h + 1), x0 = col * (w + 1);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const float v =
                        src.data()[((static_cast<std::size_t>(row) * 3 + c) * h + i) * w + j];
                    const float q = std::clamp(v, 0.0f, 1.0f) * 255.0f;
                    grid[((static_cast<std::size_t>(y0 + i) * grid_w) + (x0 + j)) * 3 + c] =
                        static_cast<std::uint8_t>(std::lround(q));
                }
    };
    for (int row = 0; row < rows; ++row) {
        blit(batch.obs, row, 0);
        blit(batch.next_obs, row, 1);
        blit(pred, row, 2);
    }
    write_ppm(path, grid, grid_h, grid_w);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline void save_lam(const LamModel& m, const std::string& path) {
    save_params(path, "lam", {{"image_size", m.image_size}, {"latent_dim", m.latent_dim}},
                m.all_params());
}

inline LamModel load_lam(const std::string& path) {
    LoadedParams p = load_params(path);
    if (p.kind != "lam") throw FormatError(path + " holds a '" + p.kind + "' model, expected lam");
    LamModel m(require_meta(p, "image_size"), require_meta(p, "latent_dim"), 0);
    restore_into(p, m.all_params());
    return m;
}

}  // namespace masklam
