#pragma once

#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fieldseg/geometry.hpp"
#include "fieldseg/raster.hpp"
#include "fieldseg/segmenter.hpp"

namespace fieldseg::data {

/// One self-declared agricultural parcel in a projected CRS (meters).
struct ParcelRecord {
    int64_t id = 0;
    std::string category;
    int year = 0;
    geom::Polygon geometry;
};

/// Square tile footprint: 2560 m sides (6.5536 km^2), centered on a k-means
/// centroid of the parcel area.
struct TilePlan {
    geom::Point centroid;
    std::string province;

    static constexpr double kSideMeters = 2560.0;
    static constexpr double kAreaM2 = kSideMeters * kSideMeters;  // 6.5536 km^2

    geom::BBox bounds() const {
        const double h = kSideMeters / 2.0;
        return {centroid.x - h, centroid.y - h, centroid.x + h, centroid.y + h};
    }
};

enum class Source { S2, HR };
std::string source_name(Source s);
Source source_from_name(const std::string& s);

/// One dataset tile: image raster + instance-id mask (0 background, ids dense
/// from 1) + metadata used by the split schemes.
struct SampleRecord {
    raster::RasterU8 image;        // H x W x 3
    raster::RasterI32 instance_mask;  // H x W x 1
    std::string tile_id;
    std::string province;
    std::string year_quarter;  // "YYYY-Qn"
    Source source = Source::S2;
};

/// Per-pixel observations across one quarter's acquisitions.
struct Observation {
    raster::RasterF32 values;    // H x W x bands
    std::vector<uint8_t> valid;  // H x W, per-pixel validity
};

struct ObservationStack {
    int width = 0, height = 0, bands = 0;
    std::vector<Observation> observations;
};

struct Composite {
    raster::RasterF32 image;      // H x W x bands
    std::vector<uint8_t> nodata;  // pixels with zero valid observations
};

// ---- construction ops ----

/// K = ceil(coverage_factor * total_parcel_area / tile_area); centroids from
/// k-means over points sampled inside the parcels (1 point/ha by default).
std::vector<TilePlan> plan_tiles(const std::vector<ParcelRecord>& parcels,
                                 const std::string& province, std::mt19937& rng,
                                 double coverage_factor = 1.10,
                                 double points_per_hectare = 1.0);

/// Drops excluded categories and parcels whose geometry cannot be repaired.
std::vector<ParcelRecord> filter_parcels(const std::vector<ParcelRecord>& parcels,
                                         const std::set<std::string>& exclusion_categories);

/// Burns parcel ids into a tile-aligned instance mask (pixel-center rule,
/// larger parcel wins overlaps, ids relabeled dense from 1).
raster::RasterI32 rasterize(const TilePlan& tile, const std::vector<ParcelRecord>& parcels,
                            double resolution_m);

/// Per band: mean of the lowest ceil(n/4) valid values (at least one).
Composite aggregate_quartile_mean(const ObservationStack& stack);

/// Model-ready pair: image bilinearly resampled to the model's native size and
/// normalized; mask nearest-resampled so ids survive.
struct ModelInput {
    ag::Tensor image;  // [S, S, 3] float, normalized
    raster::RasterI32 mask;
};
ModelInput resize_for_model(const SampleRecord& sample, const ModelConfig& cfg);

/// Normalization only (image already at native size).
ag::Tensor normalize_image(const raster::RasterU8& image, const ModelConfig& cfg);

/// Per-instance binary masks for ids 1..max, in id order.
std::vector<prompting::BinaryMask> instance_masks(const raster::RasterI32& mask);

// ---- splits ----

struct SplitScheme {
    enum class Kind { province_holdout, year_holdout } kind = Kind::province_holdout;
    std::string key;  // province code or "YYYY-Qn"

    /// Parses "province_holdout:RE" / "year_holdout:2024-Q1".
    static SplitScheme parse(const std::string& text);
    std::string str() const;
};

/// Disjoint, exhaustive (train, val) index partition keyed on metadata.
std::pair<std::vector<size_t>, std::vector<size_t>> split(const std::vector<SampleRecord>& records,
                                                          const SplitScheme& scheme);

// ---- augmentation ----

struct AugmentConfig {
    double hflip_p = 0.5;
    double vflip_p = 0.5;
    bool rot90 = true;
    double brightness = 0.1;  // additive jitter as a fraction of full scale
    double contrast = 0.1;    // multiplicative jitter around 1
};

/// Identical geometric transform on image and mask; photometric on image only.
std::pair<raster::RasterU8, raster::RasterI32> augment(const raster::RasterU8& image,
                                                       const raster::RasterI32& mask,
                                                       std::mt19937& rng,
                                                       const AugmentConfig& cfg = {});

// ---- vector input ----

/// GeoJSON-style FeatureCollection of Polygon/MultiPolygon features.
/// Properties: "category" (string), optional "year", optional "id".
std::vector<ParcelRecord> read_parcels_geojson(const std::string& path, int default_year = 0);

// ---- tile dataset layout (ERAS) ----

/// Layout: <root>/manifest.json + <root>/tiles/<tile_id>_{image,mask}.fsr
void write_eras(const std::string& root, const std::vector<SampleRecord>& samples,
                double resolution_m, Source source);
std::vector<SampleRecord> read_eras(const std::string& root);

// ---- AI4B-style layout ----

/// Reader over <root>/images/**/<id>_S2_10m_256.fsr (bands = 3 x months) and
/// <root>/masks/**/<id>_S2label_10m_256.fsr. Corrupt tiles are skipped with a
/// warning; more than 5% skipped is an error.
class Ai4bReader {
public:
    Ai4bReader(const std::string& root, int month_index = 0);
    size_t size() const { return entries_.size(); }
    SampleRecord get(size_t i) const;
    size_t skipped() const { return skipped_; }

private:
    struct Entry {
        std::string image_path, mask_path, id;
    };
    std::vector<Entry> entries_;
    size_t skipped_ = 0;
    int month_index_;
};

}  // namespace fieldseg::data
