#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "masklam/errors.hpp"

namespace masklam {

// Binary PPM (P6), lossless and trivially diffable.
inline void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, int height,
                      int width) {
    if (rgb.size() != static_cast<std::size_t>(height) * width * 3)
        throw ContractError("write_ppm: buffer does not match dimensions");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw FormatError("short write on " + path);
}

struct PpmImage {
    int height = 0, width = 0;
    std::vector<std::uint8_t> rgb;
};

inline PpmImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw FormatError(path + " is not a P6 PPM");
    PpmImage img;
    int maxval = 0;
    in >> img.width >> img.height >> maxval;
    if (maxval != 255) throw FormatError("unsupported PPM maxval");
    in.get();
    img.rgb.resize(static_cast<std::size_t>(img.height) * img.width * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!in) throw CorruptionError("short PPM payload in " + path);
    return img;
}

}  // namespace masklam
