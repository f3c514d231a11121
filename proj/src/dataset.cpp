#include "fieldseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>

namespace fieldseg::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string source_name(Source s) { return s == Source::S2 ? "S2" : "HR"; }

Source source_from_name(const std::string& s) {
    if (s == "S2") return Source::S2;
    if (s == "HR") return Source::HR;
    throw std::invalid_argument("unknown source '" + s + "' (expected S2 or HR)");
}

std::vector<TilePlan> plan_tiles(const std::vector<ParcelRecord>& parcels,
                                 const std::string& province, std::mt19937& rng,
                                 double coverage_factor, double points_per_hectare) {
    if (parcels.empty()) throw std::invalid_argument("plan_tiles: empty parcel set");
    double total_area = 0.0;
    for (const auto& p : parcels) total_area += geom::polygon_area(p.geometry);
    if (total_area <= 0.0) throw std::invalid_argument("plan_tiles: zero total parcel area");

    const int k = static_cast<int>(std::ceil(coverage_factor * total_area / TilePlan::kAreaM2));

    std::vector<geom::Point> centers;
    if (k == 1) {
        // the continuum 1-means solution is the area-weighted centroid
        double wsum = 0.0;
        geom::Point acc{0, 0};
        for (const auto& p : parcels) {
            const double w = geom::polygon_area(p.geometry);
            const geom::Point c = geom::polygon_centroid(p.geometry);
            acc.x += w * c.x;
            acc.y += w * c.y;
            wsum += w;
        }
        centers.push_back({acc.x / wsum, acc.y / wsum});
    } else {
        // discretize the parcel area into points, then cluster
        std::vector<geom::Point> points;
        for (const auto& p : parcels) {
            const double area = geom::polygon_area(p.geometry);
            int n = std::max(1, static_cast<int>(std::lround(area * points_per_hectare / 1e4)));
            auto pts = geom::sample_points_inside(p.geometry, n, rng);
            points.insert(points.end(), pts.begin(), pts.end());
        }
        // k-means needs at least k points; densify if short
        while (static_cast<int>(points.size()) < k) {
            for (const auto& p : parcels) {
                auto pts = geom::sample_points_inside(p.geometry, 1, rng);
                points.push_back(pts[0]);
                if (static_cast<int>(points.size()) >= k) break;
            }
        }
        centers = geom::kmeans(points, k, rng);
    }

    std::vector<TilePlan> out;
    out.reserve(centers.size());
    for (const auto& c : centers) out.push_back({c, province});
    return out;
}

std::vector<ParcelRecord> filter_parcels(const std::vector<ParcelRecord>& parcels,
                                         const std::set<std::string>& exclusion_categories) {
    std::vector<ParcelRecord> out;
    out.reserve(parcels.size());
    for (const auto& p : parcels) {
        if (exclusion_categories.count(p.category)) continue;
        std::optional<geom::Polygon> repaired = geom::repair(p.geometry);
        if (!repaired) {
            std::cerr << "warning: dropping malformed parcel id=" << p.id << " ('" << p.category
                      << "')\n";
            continue;
        }
        ParcelRecord kept = p;
        kept.geometry = std::move(*repaired);
        out.push_back(std::move(kept));
    }
    return out;
}

raster::RasterI32 rasterize(const TilePlan& tile, const std::vector<ParcelRecord>& parcels,
                            double resolution_m) {
    if (resolution_m <= 0) throw std::invalid_argument("rasterize: resolution must be positive");
    const double px_d = TilePlan::kSideMeters / resolution_m;
    const int px = static_cast<int>(std::lround(px_d));
    if (std::abs(px_d - px) > 1e-9) {
        throw std::invalid_argument("rasterize: resolution must divide the tile extent exactly");
    }
    const geom::BBox tb = tile.bounds();
    raster::RasterI32 mask = raster::RasterI32::zeros(px, px, 1);
    mask.origin_x = tb.x0;
    mask.origin_y = tb.y1;
    mask.res = resolution_m;

    // candidates sorted so the largest parcel burns last and wins overlaps;
    // equal areas resolve to the higher id
    struct Cand {
        const ParcelRecord* parcel;
        double area;
    };
    std::vector<Cand> cands;
    for (const auto& p : parcels) {
        if (geom::polygon_bounds(p.geometry).intersects(tb)) {
            cands.push_back({&p, geom::polygon_area(p.geometry)});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.area != b.area) return a.area < b.area;
        return a.parcel->id < b.parcel->id;
    });

    std::vector<int64_t> burned_order;  // parcel ids in burn order
    for (const auto& c : cands) {
        const geom::BBox pb = geom::polygon_bounds(c.parcel->geometry);
        const int x_lo = std::max(0, mask.world_to_px(pb.x0));
        const int x_hi = std::min(px - 1, mask.world_to_px(pb.x1));
        const int y_lo = std::max(0, mask.world_to_py(pb.y1));
        const int y_hi = std::min(px - 1, mask.world_to_py(pb.y0));
        bool any = false;
        for (int y = y_lo; y <= y_hi; ++y) {
            const double wy = mask.pixel_center_y(y);
            for (int x = x_lo; x <= x_hi; ++x) {
                if (geom::point_in_polygon(c.parcel->geometry, mask.pixel_center_x(x), wy)) {
                    mask.at(x, y) = static_cast<int32_t>(c.parcel->id);
                    any = true;
                }
            }
        }
        if (any) burned_order.push_back(c.parcel->id);
    }

    // relabel surviving ids dense from 1, ascending by parcel id
    std::map<int32_t, int32_t> relabel;
    std::set<int32_t> surviving(
        [&mask] {
            std::set<int32_t> s;
            for (int32_t v : mask.data) {
                if (v != 0) s.insert(v);
            }
            return s;
        }());
    int32_t next = 1;
    for (int32_t id : surviving) relabel[id] = next++;
    for (auto& v : mask.data) {
        if (v != 0) v = relabel[v];
    }
    return mask;
}

Composite aggregate_quartile_mean(const ObservationStack& stack) {
    if (stack.width <= 0 || stack.height <= 0 || stack.bands <= 0) {
        throw std::invalid_argument("aggregate_quartile_mean: empty stack geometry");
    }
    for (const auto& o : stack.observations) {
        if (o.values.width != stack.width || o.values.height != stack.height ||
            o.values.bands != stack.bands ||
            o.valid.size() != static_cast<size_t>(stack.width) * stack.height) {
            throw std::invalid_argument("aggregate_quartile_mean: inconsistent observation shape");
        }
    }
    Composite out;
    out.image = raster::RasterF32::zeros(stack.width, stack.height, stack.bands);
    out.nodata.assign(static_cast<size_t>(stack.width) * stack.height, 0);

    std::vector<float> vals;
    for (int y = 0; y < stack.height; ++y) {
        for (int x = 0; x < stack.width; ++x) {
            const size_t pix = static_cast<size_t>(y) * stack.width + x;
            bool any_valid = false;
            for (const auto& o : stack.observations) {
                if (o.valid[pix]) {
                    any_valid = true;
                    break;
                }
            }
            if (!any_valid) {
                out.nodata[pix] = 1;
                continue;
            }
            for (int b = 0; b < stack.bands; ++b) {
                vals.clear();
                for (const auto& o : stack.observations) {
                    if (o.valid[pix]) vals.push_back(o.values.at(x, y, b));
                }
                std::sort(vals.begin(), vals.end());
                const size_t take = (vals.size() + 3) / 4;  // ceil(n/4), >= 1
                double acc = 0.0;
                for (size_t i = 0; i < take; ++i) acc += vals[i];
                out.image.at(x, y, b) = static_cast<float>(acc / static_cast<double>(take));
            }
        }
    }
    return out;
}

ag::Tensor normalize_image(const raster::RasterU8& image, const ModelConfig& cfg) {
    if (image.bands != 3) throw std::invalid_argument("normalize_image: expected 3 bands");
    ag::Tensor out({image.height, image.width, 3});
    size_t o = 0;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int b = 0; b < 3; ++b) {
                out[static_cast<int64_t>(o++)] =
                    (static_cast<float>(image.at(x, y, b)) - cfg.pixel_mean[static_cast<size_t>(b)]) /
                    cfg.pixel_std[static_cast<size_t>(b)];
            }
        }
    }
    return out;
}

ModelInput resize_for_model(const SampleRecord& sample, const ModelConfig& cfg) {
    if (sample.image.width != sample.image.height) {
        throw std::invalid_argument("resize_for_model: non-square input");
    }
    if (sample.instance_mask.width != sample.image.width ||
        sample.instance_mask.height != sample.image.height) {
        throw std::invalid_argument("resize_for_model: image/mask size mismatch");
    }
    const int s = cfg.image_size;
    ModelInput out;
    out.mask = resize_nearest(sample.instance_mask, s, s);
    out.image = normalize_image(resize_bilinear(sample.image, s, s), cfg);
    return out;
}

std::vector<prompting::BinaryMask> instance_masks(const raster::RasterI32& mask) {
    int32_t max_id = 0;
    for (int32_t v : mask.data) max_id = std::max(max_id, v);
    std::vector<prompting::BinaryMask> out;
    for (int32_t id = 1; id <= max_id; ++id) {
        prompting::BinaryMask m;
        m.width = mask.width;
        m.height = mask.height;
        m.data.resize(mask.data.size());
        bool any = false;
        for (size_t i = 0; i < mask.data.size(); ++i) {
            m.data[i] = mask.data[i] == id;
            any |= m.data[i] != 0;
        }
        if (any) out.push_back(std::move(m));
    }
    return out;
}

SplitScheme SplitScheme::parse(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw std::invalid_argument("split: expected '<scheme>:<key>', got '" + text + "'");
    }
    const std::string kind = text.substr(0, colon);
    SplitScheme s;
    s.key = text.substr(colon + 1);
    if (kind == "province_holdout") {
        s.kind = Kind::province_holdout;
    } else if (kind == "year_holdout") {
        s.kind = Kind::year_holdout;
    } else {
        throw std::invalid_argument("split: unknown scheme '" + kind + "'");
    }
    if (s.key.empty()) throw std::invalid_argument("split: empty key in '" + text + "'");
    return s;
}

std::string SplitScheme::str() const {
    return (kind == Kind::province_holdout ? std::string("province_holdout:")
                                           : std::string("year_holdout:")) +
           key;
}

std::pair<std::vector<size_t>, std::vector<size_t>> split(const std::vector<SampleRecord>& records,
                                                          const SplitScheme& scheme) {
    std::vector<size_t> train, val;
    for (size_t i = 0; i < records.size(); ++i) {
        const bool held_out = scheme.kind == SplitScheme::Kind::province_holdout
                                  ? records[i].province == scheme.key
                                  : records[i].year_quarter == scheme.key;
        (held_out ? val : train).push_back(i);
    }
    if (val.empty()) {
        throw std::invalid_argument("split: validation set is empty under " + scheme.str());
    }
    return {train, val};
}

std::pair<raster::RasterU8, raster::RasterI32> augment(const raster::RasterU8& image,
                                                       const raster::RasterI32& mask,
                                                       std::mt19937& rng,
                                                       const AugmentConfig& cfg) {
    if (image.width != mask.width || image.height != mask.height) {
        throw std::invalid_argument("augment: image/mask size mismatch");
    }
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const bool hflip = cfg.hflip_p > 0 && u01(rng) < cfg.hflip_p;
    const bool vflip = cfg.vflip_p > 0 && u01(rng) < cfg.vflip_p;
    int quarter_turns = 0;
    if (cfg.rot90) {
        std::uniform_int_distribution<int> dq(0, 3);
        quarter_turns = dq(rng);
    }
    double bright = 0.0, contrast = 1.0;
    if (cfg.brightness > 0) {
        std::uniform_real_distribution<double> d(-cfg.brightness, cfg.brightness);
        bright = d(rng) * 255.0;
    }
    if (cfg.contrast > 0) {
        std::uniform_real_distribution<double> d(1.0 - cfg.contrast, 1.0 + cfg.contrast);
        contrast = d(rng);
    }

    const int w = image.width, h = image.height;
    auto map_xy = [&](int x, int y) {
        if (hflip) x = w - 1 - x;
        if (vflip) y = h - 1 - y;
        for (int t = 0; t < quarter_turns; ++t) {
            // 90 degrees clockwise on a square grid
            int nx = h - 1 - y;
            int ny = x;
            x = nx;
            y = ny;
        }
        return std::pair<int, int>{x, y};
    };

    raster::RasterU8 oi = raster::RasterU8::zeros(w, h, image.bands);
    raster::RasterI32 om = raster::RasterI32::zeros(w, h, 1);
    oi.crs = image.crs;
    oi.extra = image.extra;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            auto [dx, dy] = map_xy(x, y);
            for (int b = 0; b < image.bands; ++b) {
                double v = image.at(x, y, b);
                if (bright != 0.0 || contrast != 1.0) {
                    v = (v - 127.5) * contrast + 127.5 + bright;
                }
                oi.at(dx, dy, b) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
            om.at(dx, dy) = mask.at(x, y);
        }
    }
    return {std::move(oi), std::move(om)};
}

namespace {
geom::Ring ring_from_json(const json& coords) {
    geom::Ring r;
    for (const auto& pt : coords) {
        r.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    return r;
}

geom::Polygon polygon_from_json(const json& coords) {
    geom::Polygon p;
    if (coords.empty()) throw std::runtime_error("geojson: polygon without rings");
    p.exterior = ring_from_json(coords[0]);
    for (size_t i = 1; i < coords.size(); ++i) p.holes.push_back(ring_from_json(coords[i]));
    return p;
}
}  // namespace

std::vector<ParcelRecord> read_parcels_geojson(const std::string& path, int default_year) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_parcels: cannot open '" + path + "'");
    json doc = json::parse(f);
    if (doc.value("type", "") != "FeatureCollection") {
        throw std::runtime_error("read_parcels: '" + path + "' is not a FeatureCollection");
    }
    std::vector<ParcelRecord> out;
    int64_t next_id = 1;
    for (const auto& feature : doc.at("features")) {
        const json props = feature.value("properties", json::object());
        const json& geometry = feature.at("geometry");
        const std::string type = geometry.at("type").get<std::string>();

        std::vector<geom::Polygon> polys;
        if (type == "Polygon") {
            polys.push_back(polygon_from_json(geometry.at("coordinates")));
        } else if (type == "MultiPolygon") {
            for (const auto& part : geometry.at("coordinates")) {
                polys.push_back(polygon_from_json(part));
            }
        } else {
            throw std::runtime_error("read_parcels: unsupported geometry type '" + type + "'");
        }
        for (auto& poly : polys) {
            ParcelRecord rec;
            rec.id = props.contains("id") && polys.size() == 1 ? props["id"].get<int64_t>()
                                                               : next_id;
            rec.category = props.value("category", "");
            rec.year = props.value("year", default_year);
            rec.geometry = std::move(poly);
            out.push_back(std::move(rec));
            ++next_id;
        }
    }
    return out;
}

void write_eras(const std::string& root, const std::vector<SampleRecord>& samples,
                double resolution_m, Source source) {
    fs::create_directories(fs::path(root) / "tiles");
    json manifest;
    manifest["schema"] = "eras-manifest/1";
    manifest["source"] = source_name(source);
    manifest["resolution_m"] = resolution_m;
    manifest["tile_size_px"] = samples.empty() ? 0 : samples.front().image.width;
    json tiles = json::array();
    for (const auto& s : samples) {
        const std::string img_rel = "tiles/" + s.tile_id + "_image.fsr";
        const std::string mask_rel = "tiles/" + s.tile_id + "_mask.fsr";
        raster::write_fsr((fs::path(root) / img_rel).string(), s.image);
        raster::write_fsr((fs::path(root) / mask_rel).string(), s.instance_mask);
        json entry;
        entry["id"] = s.tile_id;
        entry["province"] = s.province;
        entry["year_quarter"] = s.year_quarter;
        entry["image"] = img_rel;
        entry["mask"] = mask_rel;
        if (s.image.has_georef()) {
            entry["bounds"] = {s.image.origin_x, s.image.origin_y - s.image.res * s.image.height,
                               s.image.origin_x + s.image.res * s.image.width, s.image.origin_y};
        }
        tiles.push_back(std::move(entry));
    }
    manifest["tiles"] = tiles;
    std::ofstream mf(fs::path(root) / "manifest.json");
    if (!mf) throw std::runtime_error("write_eras: cannot write manifest under '" + root + "'");
    mf << manifest.dump(2) << "\n";
}

std::vector<SampleRecord> read_eras(const std::string& root) {
    std::ifstream mf(fs::path(root) / "manifest.json");
    if (!mf) throw std::runtime_error("read_eras: no manifest.json under '" + root + "'");
    json manifest = json::parse(mf);
    if (manifest.value("schema", "") != "eras-manifest/1") {
        throw std::runtime_error("read_eras: unknown manifest schema");
    }
    const Source source = source_from_name(manifest.value("source", "S2"));
    std::vector<SampleRecord> out;
    for (const auto& entry : manifest.at("tiles")) {
        SampleRecord s;
        s.tile_id = entry.at("id").get<std::string>();
        s.province = entry.at("province").get<std::string>();
        s.year_quarter = entry.at("year_quarter").get<std::string>();
        s.source = source;
        s.image = raster::read_fsr_u8((fs::path(root) / entry.at("image").get<std::string>()).string());
        s.instance_mask =
            raster::read_fsr_i32((fs::path(root) / entry.at("mask").get<std::string>()).string());
        out.push_back(std::move(s));
    }
    return out;
}

namespace {
constexpr const char* kAi4bImageSuffix = "_S2_10m_256.fsr";
constexpr const char* kAi4bMaskSuffix = "_S2label_10m_256.fsr";
}  // namespace

Ai4bReader::Ai4bReader(const std::string& root, int month_index) : month_index_(month_index) {
    const fs::path images = fs::path(root) / "images";
    const fs::path masks = fs::path(root) / "masks";
    if (!fs::is_directory(images) || !fs::is_directory(masks)) {
        throw std::runtime_error("ai4b: '" + root + "' lacks images/ and masks/ directories");
    }
    size_t discovered = 0;
    for (const auto& e : fs::recursive_directory_iterator(images)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name.size() <= std::strlen(kAi4bImageSuffix) ||
            name.substr(name.size() - std::strlen(kAi4bImageSuffix)) != kAi4bImageSuffix) {
            continue;
        }
        ++discovered;
        const std::string id = name.substr(0, name.size() - std::strlen(kAi4bImageSuffix));
        const fs::path rel = fs::relative(e.path().parent_path(), images);
        const fs::path mask_path = masks / rel / (id + kAi4bMaskSuffix);
        if (!fs::exists(mask_path)) {
            std::cerr << "warning: ai4b tile '" << id << "' has no mask, skipping\n";
            ++skipped_;
            continue;
        }
        entries_.push_back({e.path().string(), mask_path.string(), id});
    }
    if (discovered == 0) {
        throw std::runtime_error("ai4b: no image tiles found under '" + root + "'");
    }
    std::sort(entries_.begin(), entries_.end(),
              [](const Entry& a, const Entry& b) { return a.id < b.id; });

    // validate lazily-readable headers now so corrupt tiles surface early
    std::vector<Entry> ok;
    for (const auto& entry : entries_) {
        try {
            (void)raster::peek_dtype(entry.image_path);
            (void)raster::peek_dtype(entry.mask_path);
            ok.push_back(entry);
        } catch (const std::exception& ex) {
            std::cerr << "warning: ai4b tile '" << entry.id << "' unreadable (" << ex.what()
                      << "), skipping\n";
            ++skipped_;
        }
    }
    entries_ = std::move(ok);
    if (skipped_ * 20 > discovered) {  // > 5%
        throw std::runtime_error("ai4b: more than 5% of tiles unreadable under '" + root + "'");
    }
}

SampleRecord Ai4bReader::get(size_t i) const {
    const Entry& e = entries_.at(i);
    raster::RasterU8 img = raster::read_fsr_u8(e.image_path);
    if (img.bands % 3 != 0) {
        throw std::runtime_error("ai4b: tile '" + e.id + "' bands not a multiple of 3");
    }
    const int months = img.bands / 3;
    if (month_index_ < 0 || month_index_ >= months) {
        throw std::runtime_error("ai4b: month index " + std::to_string(month_index_) +
                                 " out of range for tile '" + e.id + "'");
    }
    SampleRecord s;
    s.image = raster::RasterU8::zeros(img.width, img.height, 3);
    s.image.origin_x = img.origin_x;
    s.image.origin_y = img.origin_y;
    s.image.res = img.res;
    s.image.crs = img.crs;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int b = 0; b < 3; ++b) {
                s.image.at(x, y, b) = img.at(x, y, month_index_ * 3 + b);
            }
        }
    }
    s.instance_mask = raster::read_fsr_i32(e.mask_path);
    s.tile_id = e.id;
    s.province = img.extra.value("region", "");
    s.year_quarter = img.extra.value("year_quarter", "2019-Q2");
    s.source = Source::S2;
    return s;
}

}  // namespace fieldseg::data
