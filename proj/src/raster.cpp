#include "fieldseg/raster.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fieldseg::raster {

namespace {
constexpr char kMagic[8] = {'F', 'S', 'R', 'A', 'S', 'T', 'R', '1'};

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::u8: return "u8";
        case Dtype::i32: return "i32";
        case Dtype::f32: return "f32";
    }
    return "?";
}

Dtype dtype_from_name(const std::string& s) {
    if (s == "u8") return Dtype::u8;
    if (s == "i32") return Dtype::i32;
    if (s == "f32") return Dtype::f32;
    throw std::runtime_error("raster: unknown dtype '" + s + "'");
}

template <typename T>
void write_impl(const std::string& path, const Raster<T>& r, Dtype dtype) {
    nlohmann::json header{{"width", r.width},
                          {"height", r.height},
                          {"bands", r.bands},
                          {"dtype", dtype_name(dtype)},
                          {"origin", {r.origin_x, r.origin_y}},
                          {"res", r.res},
                          {"crs", r.crs},
                          {"extra", r.extra}};
    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("raster: cannot open '" + path + "' for writing");
    f.write(kMagic, sizeof(kMagic));
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char*>(r.data.data()),
            static_cast<std::streamsize>(r.data.size() * sizeof(T)));
    if (!f) throw std::runtime_error("raster: write failed for '" + path + "'");
}

nlohmann::json read_header(std::ifstream& f, const std::string& path) {
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("raster: '" + path + "' is not an FSR raster");
    }
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("raster: truncated header in '" + path + "'");
    return nlohmann::json::parse(hs);
}

template <typename T>
Raster<T> read_impl(const std::string& path, Dtype want) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("raster: cannot open '" + path + "'");
    nlohmann::json h = read_header(f, path);
    if (dtype_from_name(h.at("dtype").get<std::string>()) != want) {
        throw std::runtime_error("raster: '" + path + "' has dtype " +
                                 h.at("dtype").get<std::string>() + ", expected " +
                                 dtype_name(want));
    }
    Raster<T> r;
    r.width = h.at("width").get<int>();
    r.height = h.at("height").get<int>();
    r.bands = h.at("bands").get<int>();
    if (r.width <= 0 || r.height <= 0 || r.bands <= 0) {
        throw std::runtime_error("raster: bad dimensions in '" + path + "'");
    }
    auto origin = h.at("origin");
    r.origin_x = origin[0].get<double>();
    r.origin_y = origin[1].get<double>();
    r.res = h.at("res").get<double>();
    r.crs = h.value("crs", "");
    r.extra = h.value("extra", nlohmann::json::object());
    r.data.resize(static_cast<size_t>(r.width) * r.height * r.bands);
    f.read(reinterpret_cast<char*>(r.data.data()),
           static_cast<std::streamsize>(r.data.size() * sizeof(T)));
    if (!f) throw std::runtime_error("raster: truncated data in '" + path + "'");
    return r;
}
}  // namespace

void write_fsr(const std::string& path, const RasterU8& r) { write_impl(path, r, Dtype::u8); }
void write_fsr(const std::string& path, const RasterI32& r) { write_impl(path, r, Dtype::i32); }
void write_fsr(const std::string& path, const RasterF32& r) { write_impl(path, r, Dtype::f32); }

Dtype peek_dtype(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("raster: cannot open '" + path + "'");
    nlohmann::json h = read_header(f, path);
    return dtype_from_name(h.at("dtype").get<std::string>());
}

RasterU8 read_fsr_u8(const std::string& path) { return read_impl<uint8_t>(path, Dtype::u8); }
RasterI32 read_fsr_i32(const std::string& path) { return read_impl<int32_t>(path, Dtype::i32); }
RasterF32 read_fsr_f32(const std::string& path) { return read_impl<float>(path, Dtype::f32); }

RasterU8 resize_bilinear(const RasterU8& src, int out_w, int out_h) {
    if (src.width == out_w && src.height == out_h) return src;
    RasterU8 out = RasterU8::zeros(out_w, out_h, src.bands);
    out.crs = src.crs;
    out.extra = src.extra;
    if (src.has_georef()) {
        out.origin_x = src.origin_x;
        out.origin_y = src.origin_y;
        out.res = src.res * static_cast<double>(src.width) / out_w;
    }
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double ty = fy - y0;
        int y0c = std::clamp(y0, 0, src.height - 1);
        int y1c = std::clamp(y0 + 1, 0, src.height - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double tx = fx - x0;
            int x0c = std::clamp(x0, 0, src.width - 1);
            int x1c = std::clamp(x0 + 1, 0, src.width - 1);
            for (int b = 0; b < src.bands; ++b) {
                double v = (1 - ty) * ((1 - tx) * src.at(x0c, y0c, b) + tx * src.at(x1c, y0c, b)) +
                           ty * ((1 - tx) * src.at(x0c, y1c, b) + tx * src.at(x1c, y1c, b));
                out.at(ox, oy, b) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

RasterI32 resize_nearest(const RasterI32& src, int out_w, int out_h) {
    if (src.width == out_w && src.height == out_h) return src;
    RasterI32 out = RasterI32::zeros(out_w, out_h, src.bands);
    out.crs = src.crs;
    out.extra = src.extra;
    if (src.has_georef()) {
        out.origin_x = src.origin_x;
        out.origin_y = src.origin_y;
        out.res = src.res * static_cast<double>(src.width) / out_w;
    }
    for (int oy = 0; oy < out_h; ++oy) {
        int sy = std::clamp(static_cast<int>((oy + 0.5) * src.height / out_h), 0, src.height - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            int sx = std::clamp(static_cast<int>((ox + 0.5) * src.width / out_w), 0, src.width - 1);
            for (int b = 0; b < src.bands; ++b) out.at(ox, oy, b) = src.at(sx, sy, b);
        }
    }
    return out;
}

}  // namespace fieldseg::raster
