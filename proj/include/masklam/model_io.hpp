#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "masklam/dataset.hpp"
#include "masklam/errors.hpp"
#include "masklam/nn.hpp"

namespace masklam {

// "LAMP" container: kind tag + integer metadata + named float tensors.
// Used to hand trained parameters between CLI stages.

inline void save_params(const std::string& path, const std::string& kind,
                        const std::vector<std::pair<std::string, int>>& meta,
                        const NamedTensors& tensors) {
    using namespace iodetail;
    std::string out;
    out.append("LAMP", 4);
    put_u16(out, 1);
    put_u16(out, static_cast<std::uint16_t>(kind.size()));
    out += kind;
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [key, value] : meta) {
        put_u16(out, static_cast<std::uint16_t>(key.size()));
        out += key;
        put_u32(out, static_cast<std::uint32_t>(value));
    }
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put_u16(out, static_cast<std::uint16_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
        out.append(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::size_t>(t.numel()) * sizeof(float));
    }
    write_file(path, out);
}

struct LoadedParams {
    std::string kind;
    std::map<std::string, int> meta;
    std::map<std::string, Tensor> tensors;
};

inline LoadedParams load_params(const std::string& path) {
    using namespace iodetail;
    const std::vector<std::uint8_t> buf = read_file(path);
    Reader r(buf.data(), buf.size());
    if (std::memcmp(r.take(4), "LAMP", 4) != 0)
        throw FormatError(path + ": not a model parameter file");
    if (r.u16() != 1) throw FormatError("unsupported model file version");
    LoadedParams out;
    const std::size_t klen = r.u16();
    out.kind.assign(reinterpret_cast<const char*>(r.take(klen)), klen);
    const std::uint32_t nmeta = r.u32();
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        const std::size_t len = r.u16();
        std::string key(reinterpret_cast<const char*>(r.take(len)), len);
        out.meta[key] = static_cast<int>(r.u32());
    }
    const std::uint32_t ntensors = r.u32();
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        const std::size_t len = r.u16();
        std::string name(reinterpret_cast<const char*>(r.take(len)), len);
        const int ndim = r.u16();
        Shape shape(static_cast<std::size_t>(ndim));
        for (int d = 0; d < ndim; ++d) shape[static_cast<std::size_t>(d)] = static_cast<int>(r.u32());
        const std::size_t numel = static_cast<std::size_t>(shape_numel(shape));
        const std::uint8_t* data = r.take(numel * sizeof(float));
        std::vector<float> values(numel);
        std::memcpy(values.data(), data, numel * sizeof(float));
        out.tensors.emplace(name, Tensor::from(shape, std::move(values)));
    }
    if (r.remaining() != 0) throw CorruptionError("trailing bytes in model file");
    return out;
}

// Copy loaded values into a live model's named parameters; names and shapes
// must match exactly.
inline void restore_into(const LoadedParams& loaded, const NamedTensors& target) {
    if (loaded.tensors.size() != target.size())
        throw FormatError("model file tensor count mismatch");
    for (const auto& [name, t] : target) {
        auto it = loaded.tensors.find(name);
        if (it == loaded.tensors.end()) throw FormatError("model file missing tensor " + name);
        if (it->second.shape() != t.shape())
            throw FormatError("model file tensor " + name + " has shape " +
                              shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
        Tensor dst = t;
        std::memcpy(dst.data(), it->second.data(),
                    static_cast<std::size_t>(t.numel()) * sizeof(float));
    }
}

inline int require_meta(const LoadedParams& p, const std::string& key) {
    auto it = p.meta.find(key);
    if (it == p.meta.end()) throw FormatError("model file missing metadata " + key);
    return it->second;
}

}  // namespace masklam
