#pragma once

#include <cmath>
#include <vector>

namespace tokenplan::geom {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline Vec2 rotate(Vec2 v, double ang) {
  const double c = std::cos(ang), s = std::sin(ang);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

struct PolylineProjection {
  double s = 0.0;        // arc length of the closest point
  double lateral = 0.0;  // signed offset, left of travel positive
  double dist = 0.0;     // |lateral|
  int segment = 0;
  Vec2 point;            // closest point on the polyline
  Vec2 tangent;          // unit tangent of the containing segment
};

// Piecewise-linear reference curve with precomputed cumulative arc length.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> vertices);

  const std::vector<Vec2>& vertices() const { return verts_; }
  double length() const { return cum_.empty() ? 0.0 : cum_.back(); }
  std::size_t segment_count() const { return verts_.size() < 2 ? 0 : verts_.size() - 1; }

  PolylineProjection project(Vec2 p) const;
  // Point at clamped arc length s offset laterally (left positive).
  Vec2 point_at(double s, double lateral = 0.0) const;
  Vec2 tangent_at(double s) const;
  double heading_at(double s) const;

 private:
  std::vector<Vec2> verts_;
  std::vector<double> cum_;
};

struct OrientedRect {
  Vec2 center;
  double yaw = 0.0;
  double half_len = 0.0;  // along heading
  double half_wid = 0.0;

  std::vector<Vec2> corners() const;
  bool contains(Vec2 p) const;
};

double segment_distance(Vec2 a0, Vec2 a1, Vec2 b0, Vec2 b1);
bool rects_overlap(const OrientedRect& a, const OrientedRect& b);
// Euclidean gap between rectangle boundaries; 0 when overlapping.
double rect_distance(const OrientedRect& a, const OrientedRect& b);

}  // namespace tokenplan::geom
