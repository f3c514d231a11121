#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace fieldseg::raster {

/// Dense raster, row-major, band-interleaved by pixel, optional georeference
/// (square pixels, north-up; origin is the top-left corner in world units).
template <typename T>
struct Raster {
    int width = 0;
    int height = 0;
    int bands = 1;
    std::vector<T> data;

    double origin_x = 0.0;
    double origin_y = 0.0;  // top edge (max y)
    double res = 0.0;       // world units per pixel; 0 means no georeference
    std::string crs;
    nlohmann::json extra;  // acquisition dates, month labels, nodata, ...

    static Raster zeros(int w, int h, int b) {
        Raster r;
        r.width = w;
        r.height = h;
        r.bands = b;
        r.data.assign(static_cast<size_t>(w) * h * b, T{});
        return r;
    }

    T& at(int x, int y, int b = 0) {
        return data[(static_cast<size_t>(y) * width + x) * bands + b];
    }
    T at(int x, int y, int b = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * bands + b];
    }
    bool has_georef() const { return res > 0.0; }

    double pixel_center_x(int x) const { return origin_x + (x + 0.5) * res; }
    double pixel_center_y(int y) const { return origin_y - (y + 0.5) * res; }
    /// World -> pixel column/row (may be out of range).
    int world_to_px(double wx) const { return static_cast<int>(std::floor((wx - origin_x) / res)); }
    int world_to_py(double wy) const { return static_cast<int>(std::floor((origin_y - wy) / res)); }

    nlohmann::json georef_json() const {
        return nlohmann::json{{"origin", {origin_x, origin_y}}, {"res", res}, {"crs", crs}};
    }
};

using RasterU8 = Raster<uint8_t>;
using RasterI32 = Raster<int32_t>;
using RasterF32 = Raster<float>;

enum class Dtype { u8, i32, f32 };

/// FSR container: 8-byte magic "FSRASTR1", u64 header length, JSON header
/// {width, height, bands, dtype, origin, res, crs, extra}, raw LE data.
void write_fsr(const std::string& path, const RasterU8& r);
void write_fsr(const std::string& path, const RasterI32& r);
void write_fsr(const std::string& path, const RasterF32& r);

Dtype peek_dtype(const std::string& path);
RasterU8 read_fsr_u8(const std::string& path);
RasterI32 read_fsr_i32(const std::string& path);
RasterF32 read_fsr_f32(const std::string& path);

RasterU8 resize_bilinear(const RasterU8& src, int out_w, int out_h);
RasterI32 resize_nearest(const RasterI32& src, int out_w, int out_h);

}  // namespace fieldseg::raster
