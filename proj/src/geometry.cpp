#include "fieldseg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fieldseg::geom {

double ring_area_signed(const Ring& r) {
    if (r.size() < 3) return 0.0;
    double acc = 0.0;
    for (size_t i = 0; i < r.size(); ++i) {
        const Point& a = r[i];
        const Point& b = r[(i + 1) % r.size()];
        acc += a.x * b.y - b.x * a.y;
    }
    return 0.5 * acc;
}

double polygon_area(const Polygon& p) {
    double a = std::abs(ring_area_signed(p.exterior));
    for (const auto& h : p.holes) a -= std::abs(ring_area_signed(h));
    return std::max(0.0, a);
}

Point polygon_centroid(const Polygon& p) {
    // area-weighted centroid of the exterior ring
    const Ring& r = p.exterior;
    if (r.size() < 3) throw std::invalid_argument("polygon_centroid: degenerate ring");
    double a = 0.0, cx = 0.0, cy = 0.0;
    for (size_t i = 0; i < r.size(); ++i) {
        const Point& p0 = r[i];
        const Point& p1 = r[(i + 1) % r.size()];
        const double cross = p0.x * p1.y - p1.x * p0.y;
        a += cross;
        cx += (p0.x + p1.x) * cross;
        cy += (p0.y + p1.y) * cross;
    }
    if (std::abs(a) < 1e-12) {
        // fall back to the vertex mean for near-zero-area rings
        double sx = 0, sy = 0;
        for (const auto& v : r) {
            sx += v.x;
            sy += v.y;
        }
        return {sx / static_cast<double>(r.size()), sy / static_cast<double>(r.size())};
    }
    return {cx / (3.0 * a), cy / (3.0 * a)};
}

BBox polygon_bounds(const Polygon& p) {
    BBox b{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
           std::numeric_limits<double>::lowest(), std::numeric_limits<double>::lowest()};
    for (const auto& v : p.exterior) {
        b.x0 = std::min(b.x0, v.x);
        b.y0 = std::min(b.y0, v.y);
        b.x1 = std::max(b.x1, v.x);
        b.y1 = std::max(b.y1, v.y);
    }
    return b;
}

namespace {
bool ray_crosses(const Point& a, const Point& b, double x, double y) {
    // horizontal ray toward +x; half-open rule avoids double counting at vertices
    if ((a.y > y) == (b.y > y)) return false;
    const double t = (y - a.y) / (b.y - a.y);
    return x < a.x + t * (b.x - a.x);
}

int crossings(const Ring& r, double x, double y) {
    int n = 0;
    for (size_t i = 0; i < r.size(); ++i) {
        if (ray_crosses(r[i], r[(i + 1) % r.size()], x, y)) ++n;
    }
    return n;
}
}  // namespace

bool point_in_polygon(const Polygon& p, double x, double y) {
    int n = crossings(p.exterior, x, y);
    for (const auto& h : p.holes) n += crossings(h, x, y);
    return (n % 2) == 1;
}

namespace {
int orientation(const Point& a, const Point& b, const Point& c) {
    const double v = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if (v > 1e-12) return 1;
    if (v < -1e-12) return -1;
    return 0;
}

bool segments_properly_cross(const Point& a, const Point& b, const Point& c, const Point& d) {
    const int o1 = orientation(a, b, c);
    const int o2 = orientation(a, b, d);
    const int o3 = orientation(c, d, a);
    const int o4 = orientation(c, d, b);
    return o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 && o1 != o2 && o3 != o4;
}
}  // namespace

bool ring_self_intersects(const Ring& r) {
    const size_t n = r.size();
    if (n < 4) return false;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            // skip adjacent edges (share a vertex)
            if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
            if (segments_properly_cross(r[i], r[(i + 1) % n], r[j], r[(j + 1) % n])) return true;
        }
    }
    return false;
}

namespace {
Ring dedupe(const Ring& r) {
    Ring out;
    for (const auto& v : r) {
        if (out.empty() || std::abs(out.back().x - v.x) > 1e-12 ||
            std::abs(out.back().y - v.y) > 1e-12) {
            out.push_back(v);
        }
    }
    // drop an explicit closing vertex
    if (out.size() > 1 && std::abs(out.front().x - out.back().x) < 1e-12 &&
        std::abs(out.front().y - out.back().y) < 1e-12) {
        out.pop_back();
    }
    return out;
}
}  // namespace

std::optional<Polygon> repair(const Polygon& p) {
    Polygon out;
    out.exterior = dedupe(p.exterior);
    if (out.exterior.size() < 3) return std::nullopt;
    if (ring_self_intersects(out.exterior)) return std::nullopt;
    const double signed_area = ring_area_signed(out.exterior);
    if (std::abs(signed_area) < 1e-9) return std::nullopt;
    if (signed_area < 0) std::reverse(out.exterior.begin(), out.exterior.end());
    for (const auto& h : p.holes) {
        Ring hh = dedupe(h);
        if (hh.size() < 3 || std::abs(ring_area_signed(hh)) < 1e-9) continue;  // drop degenerate
        if (ring_self_intersects(hh)) return std::nullopt;
        out.holes.push_back(std::move(hh));
    }
    if (polygon_area(out) <= 0.0) return std::nullopt;
    return out;
}

std::vector<Point> sample_points_inside(const Polygon& p, int n, std::mt19937& rng) {
    if (n < 1) return {};
    const BBox b = polygon_bounds(p);
    std::uniform_real_distribution<double> dx(b.x0, b.x1);
    std::uniform_real_distribution<double> dy(b.y0, b.y1);
    std::vector<Point> out;
    out.reserve(static_cast<size_t>(n));
    int64_t attempts = 0;
    const int64_t max_attempts = static_cast<int64_t>(n) * 10000 + 1000;
    while (static_cast<int>(out.size()) < n) {
        if (++attempts > max_attempts) {
            throw std::runtime_error("sample_points_inside: rejection sampling failed "
                                     "(degenerate polygon?)");
        }
        Point q{dx(rng), dy(rng)};
        if (point_in_polygon(p, q.x, q.y)) out.push_back(q);
    }
    return out;
}

namespace {
double sq_dist(const Point& a, const Point& b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return dx * dx + dy * dy;
}
}  // namespace

std::vector<Point> kmeans(const std::vector<Point>& points, int k, std::mt19937& rng,
                          int max_iters) {
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    if (static_cast<size_t>(k) > points.size()) {
        throw std::invalid_argument("kmeans: k exceeds number of points");
    }

    // k-means++ seeding
    std::vector<Point> centers;
    centers.reserve(static_cast<size_t>(k));
    std::uniform_int_distribution<size_t> first(0, points.size() - 1);
    centers.push_back(points[first(rng)]);
    std::vector<double> d2(points.size());
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < points.size(); ++i) {
            double best = std::numeric_limits<double>::max();
            for (const auto& c : centers) best = std::min(best, sq_dist(points[i], c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            // all remaining points coincide with a center
            centers.push_back(points[first(rng)]);
            continue;
        }
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng), acc = 0.0;
        size_t pick = points.size() - 1;
        for (size_t i = 0; i < points.size(); ++i) {
            acc += d2[i];
            if (acc >= target) {
                pick = i;
                break;
            }
        }
        centers.push_back(points[pick]);
    }

    std::vector<int> assign(points.size(), -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (size_t i = 0; i < points.size(); ++i) {
            int best = 0;
            double bd = sq_dist(points[i], centers[0]);
            for (int c = 1; c < k; ++c) {
                double d = sq_dist(points[i], centers[static_cast<size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;

        std::vector<Point> sums(static_cast<size_t>(k));
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (size_t i = 0; i < points.size(); ++i) {
            sums[static_cast<size_t>(assign[i])].x += points[i].x;
            sums[static_cast<size_t>(assign[i])].y += points[i].y;
            counts[static_cast<size_t>(assign[i])] += 1;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) {
                centers[static_cast<size_t>(c)] = {
                    sums[static_cast<size_t>(c)].x / counts[static_cast<size_t>(c)],
                    sums[static_cast<size_t>(c)].y / counts[static_cast<size_t>(c)]};
            } else {
                // reseed an empty cluster on the point farthest from its center
                size_t far = 0;
                double fd = -1.0;
                for (size_t i = 0; i < points.size(); ++i) {
                    double d = sq_dist(points[i], centers[static_cast<size_t>(assign[i])]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                centers[static_cast<size_t>(c)] = points[far];
            }
        }
    }
    return centers;
}

}  // namespace fieldseg::geom
