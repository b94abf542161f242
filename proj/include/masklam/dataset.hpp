#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "masklam/errors.hpp"
#include "masklam/rng.hpp"
#include "masklam/tensor.hpp"

namespace masklam {

// ---------------------------------------------------------------------------
// Bit-packed binary masks: LSB-first within each byte, one frame rounded up
// to a whole byte so per-frame offsets stay byte-aligned.
// ---------------------------------------------------------------------------

inline std::size_t mask_stride_bytes(int h, int w) {
    return (static_cast<std::size_t>(h) * w + 7) / 8;
}

inline std::vector<std::uint8_t> pack_mask(const std::vector<std::uint8_t>& bits, int h, int w) {
    std::vector<std::uint8_t> out(mask_stride_bytes(h, w), 0);
    for (std::size_t p = 0; p < static_cast<std::size_t>(h) * w; ++p)
        if (bits[p]) out[p >> 3] |= static_cast<std::uint8_t>(1u << (p & 7));
    return out;
}

inline std::vector<std::uint8_t> unpack_mask(const std::uint8_t* packed, int h, int w) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w);
    for (std::size_t p = 0; p < out.size(); ++p)
        out[p] = (packed[p >> 3] >> (p & 7)) & 1u;
    return out;
}

struct Trajectory {
    std::vector<std::uint8_t> images;  // T*H*W*3, HWC per frame
    std::vector<std::uint8_t> masks;   // T*mask_stride_bytes, bit-packed per frame
    std::vector<float> actions;        // T*2
    std::vector<float> rewards;        // T
    std::vector<float> latents;        // T*latent_dim or empty

    bool operator==(const Trajectory&) const = default;
};

struct DatasetHeader {
    std::uint16_t version = 1;
    int height = 0, width = 0, channels = 3;
    int steps = 0;       // T
    int n_traj = 0;
    int action_dim = 2;
    int latent_dim = 0;
    bool has_masks = false;
    bool has_latents = false;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::string distractor_id;  // stored in 16 bytes, zero padded

    bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
    DatasetHeader header;
    std::vector<Trajectory> trajectories;

    bool operator==(const Dataset&) const = default;

    std::uint8_t* image(int traj, int t) {
        return trajectories[static_cast<std::size_t>(traj)].images.data() +
               static_cast<std::size_t>(t) * header.height * header.width * 3;
    }
    const std::uint8_t* image(int traj, int t) const {
        return trajectories[static_cast<std::size_t>(traj)].images.data() +
               static_cast<std::size_t>(t) * header.height * header.width * 3;
    }
    const std::uint8_t* packed_mask(int traj, int t) const {
        return trajectories[static_cast<std::size_t>(traj)].masks.data() +
               static_cast<std::size_t>(t) * mask_stride_bytes(header.height, header.width);
    }
};

namespace iodetail {

constexpr char kDatasetMagic[4] = {'L', 'A', 'M', 'D'};
constexpr char kMaskMagic[4] = {'L', 'A', 'M', 'M'};
constexpr std::size_t kDistractorIdBytes = 16;
// magic + version + C + flags + 6 u32 + 2 u64 + distractor id
constexpr std::size_t kHeaderBytes = 4 + 2 + 1 + 1 + 6 * 4 + 2 * 8 + kDistractorIdBytes;

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    std::uint8_t u8() { return take(1)[0]; }
    std::uint16_t u16() {
        const std::uint8_t* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        const std::uint8_t* p = take(4);
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    std::uint64_t u64() {
        std::uint64_t lo = u32();
        std::uint64_t hi = u32();
        return lo | (hi << 32);
    }
    const std::uint8_t* take(std::size_t n) {
        if (pos_ + n > size_) throw CorruptionError("payload truncated");
        const std::uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }
    std::size_t remaining() const { return size_ - pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff n = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), n);
    if (!in) throw CorruptionError("short read on " + path);
    return buf;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write on " + path);
}

}  // namespace iodetail

inline void validate_header(const DatasetHeader& h, const std::vector<Trajectory>& trajs) {
    if (static_cast<int>(trajs.size()) != h.n_traj)
        throw FormatError("header n_traj does not match payload");
    const std::size_t img = static_cast<std::size_t>(h.steps) * h.height * h.width * 3;
    const std::size_t msk = static_cast<std::size_t>(h.steps) * mask_stride_bytes(h.height, h.width);
    for (const Trajectory& tr : trajs) {
        if (tr.images.size() != img) throw FormatError("trajectory image block size mismatch");
        if (h.has_masks ? tr.masks.size() != msk : !tr.masks.empty())
            throw FormatError("trajectory mask block inconsistent with header flag");
        if (tr.actions.size() != static_cast<std::size_t>(h.steps) * h.action_dim)
            throw FormatError("trajectory action block size mismatch");
        if (tr.rewards.size() != static_cast<std::size_t>(h.steps))
            throw FormatError("trajectory reward block size mismatch");
        const std::size_t lat = static_cast<std::size_t>(h.steps) * h.latent_dim;
        if (h.has_latents ? tr.latents.size() != lat : !tr.latents.empty())
            throw FormatError("trajectory latent block inconsistent with header flag");
    }
}

inline std::string serialize(const Dataset& ds) {
    using namespace iodetail;
    validate_header(ds.header, ds.trajectories);
    const DatasetHeader& h = ds.header;
    std::string out;
    out.reserve(kHeaderBytes);
    out.append(kDatasetMagic, 4);
    put_u16(out, h.version);
    out.push_back(static_cast<char>(h.channels));
    out.push_back(static_cast<char>((h.has_masks ? 1 : 0) | (h.has_latents ? 2 : 0)));
    put_u32(out, static_cast<std::uint32_t>(h.height));
    put_u32(out, static_cast<std::uint32_t>(h.width));
    put_u32(out, static_cast<std::uint32_t>(h.steps));
    put_u32(out, static_cast<std::uint32_t>(h.n_traj));
    put_u32(out, static_cast<std::uint32_t>(h.action_dim));
    put_u32(out, static_cast<std::uint32_t>(h.latent_dim));
    put_u64(out, h.seed);
    put_u64(out, h.config_hash);
    if (h.distractor_id.size() > kDistractorIdBytes)
        throw FormatError("distractor id longer than 16 bytes");
    std::string id = h.distractor_id;
    id.resize(kDistractorIdBytes, '\0');
    out += id;

    for (const Trajectory& tr : ds.trajectories) {
        out.append(reinterpret_cast<const char*>(tr.images.data()), tr.images.size());
        if (h.has_masks)
            out.append(reinterpret_cast<const char*>(tr.masks.data()), tr.masks.size());
        out.append(reinterpret_cast<const char*>(tr.actions.data()),
                   tr.actions.size() * sizeof(float));
        out.append(reinterpret_cast<const char*>(tr.rewards.data()),
                   tr.rewards.size() * sizeof(float));
        if (h.has_latents)
            out.append(reinterpret_cast<const char*>(tr.latents.data()),
                       tr.latents.size() * sizeof(float));
    }
    return out;
}

inline void save(const Dataset& ds, const std::string& path) {
    iodetail::write_file(path, serialize(ds));
}

inline Dataset deserialize(const std::uint8_t* data, std::size_t size) {
    using namespace iodetail;
    Reader r(data, size);
    const std::uint8_t* magic = r.take(4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0)
        throw FormatError("bad magic, not a dataset file");
    Dataset ds;
    DatasetHeader& h = ds.header;
    h.version = r.u16();
    if (h.version != 1) throw FormatError("unsupported dataset version " + std::to_string(h.version));
    h.channels = r.u8();
    const std::uint8_t flags = r.u8();
    h.has_masks = (flags & 1) != 0;
    h.has_latents = (flags & 2) != 0;
    h.height = static_cast<int>(r.u32());
    h.width = static_cast<int>(r.u32());
    h.steps = static_cast<int>(r.u32());
    h.n_traj = static_cast<int>(r.u32());
    h.action_dim = static_cast<int>(r.u32());
    h.latent_dim = static_cast<int>(r.u32());
    h.seed = r.u64();
    h.config_hash = r.u64();
    const std::uint8_t* idb = r.take(kDistractorIdBytes);
    std::size_t idlen = 0;
    while (idlen < kDistractorIdBytes && idb[idlen] != 0) ++idlen;
    h.distractor_id.assign(reinterpret_cast<const char*>(idb), idlen);
    if (h.channels != 3) throw FormatError("only 3-channel datasets supported");

    const std::size_t img = static_cast<std::size_t>(h.steps) * h.height * h.width * 3;
    const std::size_t msk = static_cast<std::size_t>(h.steps) * mask_stride_bytes(h.height, h.width);
    ds.trajectories.resize(static_cast<std::size_t>(h.n_traj));
    for (Trajectory& tr : ds.trajectories) {
        const std::uint8_t* p = r.take(img);
        tr.images.assign(p, p + img);
        if (h.has_masks) {
            p = r.take(msk);
            tr.masks.assign(p, p + msk);
        }
        const std::uint8_t* a = r.take(static_cast<std::size_t>(h.steps) * h.action_dim * sizeof(float));
        tr.actions.resize(static_cast<std::size_t>(h.steps) * h.action_dim);
        std::memcpy(tr.actions.data(), a, tr.actions.size() * sizeof(float));
        const std::uint8_t* rw = r.take(static_cast<std::size_t>(h.steps) * sizeof(float));
        tr.rewards.resize(static_cast<std::size_t>(h.steps));
        std::memcpy(tr.rewards.data(), rw, tr.rewards.size() * sizeof(float));
        if (h.has_latents) {
            const std::size_t lat = static_cast<std::size_t>(h.steps) * h.latent_dim;
            const std::uint8_t* l = r.take(lat * sizeof(float));
            tr.latents.resize(lat);
            std::memcpy(tr.latents.data(), l, lat * sizeof(float));
        }
    }
    if (r.remaining() != 0) throw CorruptionError("trailing bytes after payload");
    return ds;
}

inline Dataset load(const std::string& path) {
    const std::vector<std::uint8_t> buf = iodetail::read_file(path);
    return deserialize(buf.data(), buf.size());
}

// Deterministic sample without replacement; the selection for k is the first
// k entries of one seeded permutation, so sets nest as k grows.
inline std::vector<int> select_labelled(const Dataset& ds, int k, std::uint64_t seed) {
    const int n = ds.header.n_traj;
    if (k < 1 || k > n)
        throw InvalidCountError("k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0x5E1EC7u));
    rng.shuffle(perm);
    perm.resize(static_cast<std::size_t>(k));
    std::sort(perm.begin(), perm.end());
    return perm;
}

// One consecutive-observation training batch. The mask is the mask of the
// NEXT observation; images are scaled to [0,1] on emission.
struct TransitionBatch {
    Tensor obs;        // [B,3,H,W]
    Tensor next_obs;   // [B,3,H,W]
    Tensor next_mask;  // [B,1,H,W], defined only when the dataset has masks
    Tensor actions;    // [B,2]
    Tensor latents;    // [B,d], defined only when the dataset has latents
    std::vector<std::pair<int, int>> indices;  // (traj, t) per row
    int size = 0;
};

inline void fill_chw(const std::uint8_t* hwc, int h, int w, float* chw) {
    const float inv = 1.0f / 255.0f;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                chw[(static_cast<std::size_t>(c) * h + i) * w + j] =
                    static_cast<float>(hwc[(static_cast<std::size_t>(i) * w + j) * 3 + c]) * inv;
}

// Emits every within-trajectory (o_t, o_{t+1}) pair exactly once per pass;
// never pairs frames across a trajectory boundary.
class TransitionIter {
public:
    TransitionIter(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed)
        : TransitionIter(ds, batch_size, shuffle_seed, all_trajs(ds)) {}

    TransitionIter(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed,
                   std::vector<int> traj_subset)
        : ds_(&ds), batch_(batch_size) {
        if (ds.header.steps < 2) throw ContractError("iter_transitions requires T >= 2");
        order_.reserve(traj_subset.size() * static_cast<std::size_t>(ds.header.steps - 1));
        for (int traj : traj_subset)
            for (int t = 0; t + 1 < ds.header.steps; ++t) order_.emplace_back(traj, t);
        Rng rng(mix_seed(shuffle_seed, 0xBA7C4u));
        rng.shuffle(order_);
    }

    std::size_t total() const { return order_.size(); }

    std::optional<TransitionBatch> next() {
        if (pos_ >= order_.size()) return std::nullopt;
        const int b = static_cast<int>(std::min<std::size_t>(
            static_cast<std::size_t>(batch_), order_.size() - pos_));
        const DatasetHeader& h = ds_->header;
        const int hw = h.height * h.width;
        TransitionBatch out;
        out.size = b;
        out.obs = Tensor::zeros({b, 3, h.height, h.width});
        out.next_obs = Tensor::zeros({b, 3, h.height, h.width});
        out.actions = Tensor::zeros({b, 2});
        if (h.has_masks) out.next_mask = Tensor::zeros({b, 1, h.height, h.width});
        if (h.has_latents) out.latents = Tensor::zeros({b, h.latent_dim});
        for (int row = 0; row < b; ++row) {
            const auto [traj, t] = order_[pos_ + static_cast<std::size_t>(row)];
            out.indices.emplace_back(traj, t);
            fill_chw(ds_->image(traj, t), h.height, h.width,
                     out.obs.data() + static_cast<std::size_t>(row) * 3 * hw);
            fill_chw(ds_->image(traj, t + 1), h.height, h.width,
                     out.next_obs.data() + static_cast<std::size_t>(row) * 3 * hw);
            const Trajectory& tr = ds_->trajectories[static_cast<std::size_t>(traj)];
            out.actions.data()[row * 2 + 0] = tr.actions[static_cast<std::size_t>(t) * 2 + 0];
            out.actions.data()[row * 2 + 1] = tr.actions[static_cast<std::size_t>(t) * 2 + 1];
            if (h.has_masks) {
                const std::vector<std::uint8_t> bits =
                    unpack_mask(ds_->packed_mask(traj, t + 1), h.height, h.width);
                float* m = out.next_mask.data() + static_cast<std::size_t>(row) * hw;
                for (int p = 0; p < hw; ++p) m[p] = bits[static_cast<std::size_t>(p)] ? 1.0f : 0.0f;
            }
            if (h.has_latents)
                std::memcpy(out.latents.data() + static_cast<std::size_t>(row) * h.latent_dim,
                            tr.latents.data() + static_cast<std::size_t>(t) * h.latent_dim,
                            sizeof(float) * static_cast<std::size_t>(h.latent_dim));
        }
        pos_ += static_cast<std::size_t>(b);
        return out;
    }

private:
    static std::vector<int> all_trajs(const Dataset& ds) {
        std::vector<int> v(static_cast<std::size_t>(ds.header.n_traj));
        for (int i = 0; i < ds.header.n_traj; ++i) v[static_cast<std::size_t>(i)] = i;
        return v;
    }

    const Dataset* ds_;
    int batch_;
    std::vector<std::pair<int, int>> order_;
    std::size_t pos_ = 0;
};

// --------------------------------------------------------------------------
// Mask import/export ("LAMM"): dims header then bit-packed payload. Padding
// bits in each frame's final byte must be zero; anything else means the
// payload was not a binary image.
// --------------------------------------------------------------------------

inline void export_masks(const Dataset& ds, const std::string& path) {
    using namespace iodetail;
    if (!ds.header.has_masks) throw ContractError("dataset has no masks to export");
    std::string out;
    out.append(kMaskMagic, 4);
    put_u16(out, 1);
    put_u32(out, static_cast<std::uint32_t>(ds.header.n_traj));
    put_u32(out, static_cast<std::uint32_t>(ds.header.steps));
    put_u32(out, static_cast<std::uint32_t>(ds.header.height));
    put_u32(out, static_cast<std::uint32_t>(ds.header.width));
    for (const Trajectory& tr : ds.trajectories)
        out.append(reinterpret_cast<const char*>(tr.masks.data()), tr.masks.size());
    write_file(path, out);
}

inline Dataset import_masks(const Dataset& ds, const std::string& path) {
    using namespace iodetail;
    const std::vector<std::uint8_t> buf = read_file(path);
    Reader r(buf.data(), buf.size());
    const std::uint8_t* magic = r.take(4);
    if (std::memcmp(magic, kMaskMagic, 4) != 0) throw FormatError("bad magic, not a mask file");
    if (r.u16() != 1) throw FormatError("unsupported mask file version");
    const int n_traj = static_cast<int>(r.u32());
    const int steps = static_cast<int>(r.u32());
    const int height = static_cast<int>(r.u32());
    const int width = static_cast<int>(r.u32());
    if (n_traj != ds.header.n_traj || steps != ds.header.steps || height != ds.header.height ||
        width != ds.header.width)
        throw FormatError("mask file dimensions do not match dataset");

    const std::size_t stride = mask_stride_bytes(height, width);
    const int pixels = height * width;
    const int pad_bits = static_cast<int>(stride * 8) - pixels;
    Dataset out = ds;
    for (int traj = 0; traj < n_traj; ++traj) {
        const std::uint8_t* p = r.take(stride * static_cast<std::size_t>(steps));
        Trajectory& tr = out.trajectories[static_cast<std::size_t>(traj)];
        tr.masks.assign(p, p + stride * static_cast<std::size_t>(steps));
        if (pad_bits > 0) {
            for (int t = 0; t < steps; ++t) {
                const std::uint8_t last = tr.masks[static_cast<std::size_t>(t + 1) * stride - 1];
                if ((last >> (8 - pad_bits)) != 0)
                    throw FormatError("non-binary mask payload (padding bits set)");
            }
        }
    }
    if (r.remaining() != 0) throw CorruptionError("trailing bytes after mask payload");
    out.header.has_masks = true;
    return out;
}

}  // namespace masklam
