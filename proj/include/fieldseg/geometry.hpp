#pragma once

#include <optional>
#include <random>
#include <vector>

namespace fieldseg::geom {

struct Point {
    double x = 0, y = 0;
};

using Ring = std::vector<Point>;  // vertices; closure is implicit

struct Polygon {
    Ring exterior;
    std::vector<Ring> holes;
};

struct BBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool intersects(const BBox& o) const {
        return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
    }
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
};

double ring_area_signed(const Ring& r);
double polygon_area(const Polygon& p);  // |exterior| - sum |holes|
Point polygon_centroid(const Polygon& p);
BBox polygon_bounds(const Polygon& p);

/// Even-odd ray cast over exterior and holes.
bool point_in_polygon(const Polygon& p, double x, double y);

/// Proper crossing between any two non-adjacent edges.
bool ring_self_intersects(const Ring& r);

/// Light repair: drops duplicate consecutive vertices, requires >= 3 distinct
/// vertices and positive area, rejects self-intersecting rings, normalizes
/// winding (exterior counter-clockwise). Returns nullopt when unrepairable.
std::optional<Polygon> repair(const Polygon& p);

/// Uniform rejection sampling inside the polygon (holes excluded).
std::vector<Point> sample_points_inside(const Polygon& p, int n, std::mt19937& rng);

/// Lloyd's k-means with k-means++ seeding; deterministic for a fixed rng.
std::vector<Point> kmeans(const std::vector<Point>& points, int k, std::mt19937& rng,
                          int max_iters = 50);

}  // namespace fieldseg::geom
