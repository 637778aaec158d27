#include "tokenplan/geometry.hpp"

#include <algorithm>
#include <limits>

#include "tokenplan/common.hpp"

namespace tokenplan::geom {

Polyline::Polyline(std::vector<Vec2> vertices) : verts_(std::move(vertices)) {
  if (verts_.size() < 2) {
    throw ConfigError("Polyline: need at least 2 vertices");
  }
  cum_.resize(verts_.size());
  cum_[0] = 0.0;
  for (std::size_t i = 1; i < verts_.size(); ++i) {
    const double len = (verts_[i] - verts_[i - 1]).norm();
    if (len <= 0.0) {
      throw ConfigError("Polyline: zero-length segment");
    }
    cum_[i] = cum_[i - 1] + len;
  }
}

PolylineProjection Polyline::project(Vec2 p) const {
  PolylineProjection best;
  double best_d2 = std::numeric_limits<double>::max();
  for (std::size_t i = 0; i + 1 < verts_.size(); ++i) {
    const Vec2 a = verts_[i];
    const Vec2 b = verts_[i + 1];
    const Vec2 ab = b - a;
    const double len2 = dot(ab, ab);
    const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
    const Vec2 q = a + ab * t;
    const double d2 = dot(p - q, p - q);
    if (d2 < best_d2) {
      best_d2 = d2;
      const double len = std::sqrt(len2);
      best.segment = static_cast<int>(i);
      best.s = cum_[i] + t * len;
      best.point = q;
      best.tangent = ab * (1.0 / len);
      best.lateral = cross(best.tangent, p - q);
      best.dist = std::sqrt(d2);
    }
  }
  return best;
}

Vec2 Polyline::point_at(double s, double lateral) const {
  const double sc = std::clamp(s, 0.0, length());
  std::size_t i = 0;
  while (i + 2 < verts_.size() && cum_[i + 1] < sc) ++i;
  const Vec2 a = verts_[i];
  const Vec2 b = verts_[i + 1];
  const double seg_len = cum_[i + 1] - cum_[i];
  const double t = (sc - cum_[i]) / seg_len;
  const Vec2 tangent = (b - a) * (1.0 / seg_len);
  const Vec2 normal{-tangent.y, tangent.x};  // left of travel
  return a + (b - a) * t + normal * lateral;
}

Vec2 Polyline::tangent_at(double s) const {
  const double sc = std::clamp(s, 0.0, length());
  std::size_t i = 0;
  while (i + 2 < verts_.size() && cum_[i + 1] < sc) ++i;
  const Vec2 d = verts_[i + 1] - verts_[i];
  return d * (1.0 / d.norm());
}

double Polyline::heading_at(double s) const {
  const Vec2 t = tangent_at(s);
  return std::atan2(t.y, t.x);
}

std::vector<Vec2> OrientedRect::corners() const {
  std::vector<Vec2> out(4);
  const Vec2 ex = rotate({1.0, 0.0}, yaw) * half_len;
  const Vec2 ey = rotate({0.0, 1.0}, yaw) * half_wid;
  out[0] = center + ex + ey;
  out[1] = center + ex - ey;
  out[2] = center - ex - ey;
  out[3] = center - ex + ey;
  return out;
}

bool OrientedRect::contains(Vec2 p) const {
  const Vec2 d = rotate(p - center, -yaw);
  return std::abs(d.x) <= half_len && std::abs(d.y) <= half_wid;
}

double segment_distance(Vec2 a0, Vec2 a1, Vec2 b0, Vec2 b1) {
  const Vec2 da = a1 - a0;
  const Vec2 db = b1 - b0;
  // proper intersection test via orientation signs
  const double d1 = cross(db, a0 - b0);
  const double d2 = cross(db, a1 - b0);
  const double d3 = cross(da, b0 - a0);
  const double d4 = cross(da, b1 - a0);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return 0.0;
  }
  auto point_seg = [](Vec2 p, Vec2 s0, Vec2 s1) {
    const Vec2 d = s1 - s0;
    const double len2 = dot(d, d);
    const double t = len2 > 0.0 ? std::clamp(dot(p - s0, d) / len2, 0.0, 1.0) : 0.0;
    return (p - (s0 + d * t)).norm();
  };
  return std::min(std::min(point_seg(a0, b0, b1), point_seg(a1, b0, b1)),
                  std::min(point_seg(b0, a0, a1), point_seg(b1, a0, a1)));
}

bool rects_overlap(const OrientedRect& a, const OrientedRect& b) {
  // separating axis test over both rectangles' edge normals
  const std::vector<Vec2> ca = a.corners();
  const std::vector<Vec2> cb = b.corners();
  const Vec2 axes[4] = {rotate({1, 0}, a.yaw), rotate({0, 1}, a.yaw), rotate({1, 0}, b.yaw),
                        rotate({0, 1}, b.yaw)};
  for (const Vec2& ax : axes) {
    double amin = std::numeric_limits<double>::max(), amax = -amin;
    double bmin = amin, bmax = -amin;
    for (const Vec2& p : ca) {
      const double v = dot(p, ax);
      amin = std::min(amin, v);
      amax = std::max(amax, v);
    }
    for (const Vec2& p : cb) {
      const double v = dot(p, ax);
      bmin = std::min(bmin, v);
      bmax = std::max(bmax, v);
    }
    if (amax < bmin || bmax < amin) {
      return false;
    }
  }
  return true;
}

double rect_distance(const OrientedRect& a, const OrientedRect& b) {
  if (rects_overlap(a, b)) {
    return 0.0;
  }
  const std::vector<Vec2> ca = a.corners();
  const std::vector<Vec2> cb = b.corners();
  double best = std::numeric_limits<double>::max();
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      best = std::min(best, segment_distance(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]));
    }
  }
  return best;
}

}  // namespace tokenplan::geom
