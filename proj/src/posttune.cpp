#include "tokenplan/posttune.hpp"

#include <algorithm>
#include <cmath>

#include "tokenplan/common.hpp"

namespace tokenplan::post {

bool LaneLikelihoodMap::in_bounds(geom::Vec2 p) const {
  const double cx = (p.x - origin.x) / resolution;
  const double cy = (p.y - origin.y) / resolution;
  return cx >= 0.0 && cy >= 0.0 && cx <= width - 1.0 && cy <= height - 1.0;
}

namespace {

// Clamped grid read treating (row, col) = (y, x).
double grid_at(const LaneLikelihoodMap& m, int r, int c) {
  r = std::clamp(r, 0, m.height - 1);
  c = std::clamp(c, 0, m.width - 1);
  return m.at(r, c);
}

struct CellPos {
  int r0, c0;
  double fr, fc;
};

CellPos cell_pos(const LaneLikelihoodMap& m, geom::Vec2 p) {
  double cc = std::clamp((p.x - m.origin.x) / m.resolution, 0.0, m.width - 1.0);
  double cr = std::clamp((p.y - m.origin.y) / m.resolution, 0.0, m.height - 1.0);
  CellPos cp;
  cp.c0 = std::min(static_cast<int>(cc), m.width - 2 >= 0 ? m.width - 2 : 0);
  cp.r0 = std::min(static_cast<int>(cr), m.height - 2 >= 0 ? m.height - 2 : 0);
  cp.fc = cc - cp.c0;
  cp.fr = cr - cp.r0;
  return cp;
}

}  // namespace

double LaneLikelihoodMap::sample(geom::Vec2 p) const {
  const CellPos cp = cell_pos(*this, p);
  const double v00 = grid_at(*this, cp.r0, cp.c0);
  const double v01 = grid_at(*this, cp.r0, cp.c0 + 1);
  const double v10 = grid_at(*this, cp.r0 + 1, cp.c0);
  const double v11 = grid_at(*this, cp.r0 + 1, cp.c0 + 1);
  return v00 * (1 - cp.fr) * (1 - cp.fc) + v01 * (1 - cp.fr) * cp.fc + v10 * cp.fr * (1 - cp.fc) +
         v11 * cp.fr * cp.fc;
}

geom::Vec2 LaneLikelihoodMap::gradient(geom::Vec2 p) const {
  // central differences on grid nodes, bilinearly interpolated
  const CellPos cp = cell_pos(*this, p);
  auto gx = [&](int r, int c) { return (grid_at(*this, r, c + 1) - grid_at(*this, r, c - 1)) / 2.0; };
  auto gy = [&](int r, int c) { return (grid_at(*this, r + 1, c) - grid_at(*this, r - 1, c)) / 2.0; };
  auto bilin = [&](auto&& f) {
    return f(cp.r0, cp.c0) * (1 - cp.fr) * (1 - cp.fc) + f(cp.r0, cp.c0 + 1) * (1 - cp.fr) * cp.fc +
           f(cp.r0 + 1, cp.c0) * cp.fr * (1 - cp.fc) + f(cp.r0 + 1, cp.c0 + 1) * cp.fr * cp.fc;
  };
  // gradient in cells, converted to world units
  return geom::Vec2{bilin(gx) / resolution, bilin(gy) / resolution};
}

AnchorResult lane_anchor(const LaneLikelihoodMap& map, geom::Vec2 waypoint, double step_cells,
                         int max_iters) {
  AnchorResult res;
  res.point = waypoint;
  if (!map.in_bounds(waypoint)) {
    res.out_of_bounds = true;
    return res;
  }
  geom::Vec2 p = waypoint;
  // step_cells scales the per-cell gradient; the factor resolution^2 converts
  // the per-meter gradient and the cell-sized step into a world displacement
  const double scale = step_cells * map.resolution * map.resolution;
  for (int i = 0; i < max_iters; ++i) {
    const geom::Vec2 g = map.gradient(p);
    if (g.norm() * map.resolution < 1e-6) break;  // per-cell gradient norm
    p = p + g * scale;
    p.x = std::clamp(p.x, map.origin.x, map.origin.x + (map.width - 1) * map.resolution);
    p.y = std::clamp(p.y, map.origin.y, map.origin.y + (map.height - 1) * map.resolution);
  }
  res.point = p;
  return res;
}

std::vector<FrenetPoint> frenet_project(const std::vector<geom::Vec2>& waypoints,
                                        const geom::Polyline& reference) {
  std::vector<FrenetPoint> out;
  out.reserve(waypoints.size());
  for (const geom::Vec2& w : waypoints) {
    const geom::PolylineProjection pr = reference.project(w);
    out.push_back(FrenetPoint{pr.s, pr.lateral});
  }
  return out;
}

std::vector<geom::Vec2> frenet_lift(const std::vector<FrenetPoint>& points,
                                    const geom::Polyline& reference) {
  std::vector<geom::Vec2> out;
  out.reserve(points.size());
  for (const FrenetPoint& p : points) {
    out.push_back(reference.point_at(p.s, p.lateral));
  }
  return out;
}

namespace {

// Band storage for a symmetric pentadiagonal matrix: band[b][i] holds
// M(i, i-b); b in 0..2.
struct Band3 {
  std::vector<double> d0, d1, d2;
  explicit Band3(std::size_t n) : d0(n, 0.0), d1(n, 0.0), d2(n, 0.0) {}
};

Band3 normal_matrix(std::size_t n, double w1, double w2) {
  Band3 m(n);
  for (std::size_t i = 0; i < n; ++i) m.d0[i] = 1.0;
  // accumulate w1 * D1'D1: rows (-1, 1) at offsets (i, i+1)
  for (std::size_t r = 0; r + 1 < n; ++r) {
    m.d0[r] += w1;
    m.d0[r + 1] += w1;
    m.d1[r + 1] += -w1;
  }
  // accumulate w2 * D2'D2: rows (1, -2, 1)
  for (std::size_t r = 0; r + 2 < n; ++r) {
    m.d0[r] += w2;
    m.d0[r + 1] += 4.0 * w2;
    m.d0[r + 2] += w2;
    m.d1[r + 1] += -2.0 * w2;
    m.d1[r + 2] += -2.0 * w2;
    m.d2[r + 2] += w2;
  }
  return m;
}

// In-place banded Cholesky (L L', bandwidth 2) and solve.
std::vector<double> band_cholesky_solve(Band3 m, const std::vector<double>& rhs) {
  const std::size_t n = rhs.size();
  for (std::size_t i = 0; i < n; ++i) {
    double diag = m.d0[i];
    if (i >= 1) diag -= m.d1[i] * m.d1[i];
    if (i >= 2) diag -= m.d2[i] * m.d2[i];
    if (diag <= 0.0) {
      throw TrainingError("band_cholesky_solve: matrix not positive definite");
    }
    m.d0[i] = std::sqrt(diag);
    if (i + 1 < n) {
      double v = m.d1[i + 1];
      if (i >= 1) v -= m.d1[i] * m.d2[i + 1];
      m.d1[i + 1] = v / m.d0[i];
    }
    if (i + 2 < n) {
      m.d2[i + 2] = m.d2[i + 2] / m.d0[i];
    }
  }
  // forward substitution L y = rhs
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = rhs[i];
    if (i >= 1) v -= m.d1[i] * y[i - 1];
    if (i >= 2) v -= m.d2[i] * y[i - 2];
    y[i] = v / m.d0[i];
  }
  // back substitution L' x = y
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double v = y[ii];
    if (ii + 1 < n) v -= m.d1[ii + 1] * x[ii + 1];
    if (ii + 2 < n) v -= m.d2[ii + 2] * x[ii + 2];
    x[ii] = v / m.d0[ii];
  }
  return x;
}

}  // namespace

std::vector<double> solve_regularized(const std::vector<double>& rhs, double w1, double w2) {
  if (rhs.size() < 3) {
    throw SizeError("solve_regularized: need at least 3 samples");
  }
  if (w1 < 0.0 || w2 < 0.0) {
    throw ConfigError("solve_regularized: weights must be non-negative");
  }
  return band_cholesky_solve(normal_matrix(rhs.size(), w1, w2), rhs);
}

std::vector<double> solve_lateral(const std::vector<double>& gap, double w1, double w2) {
  return solve_regularized(gap, w1, w2);
}

std::vector<double> isotonic_non_decreasing(const std::vector<double>& v) {
  // pool adjacent violators with uniform weights
  std::vector<double> level;
  std::vector<std::size_t> count;
  for (double x : v) {
    level.push_back(x);
    count.push_back(1);
    while (level.size() >= 2 && level[level.size() - 2] > level.back()) {
      const double merged = (level[level.size() - 2] * count[count.size() - 2] +
                             level.back() * count.back()) /
                            (count[count.size() - 2] + count.back());
      count[count.size() - 2] += count.back();
      level[level.size() - 2] = merged;
      level.pop_back();
      count.pop_back();
    }
  }
  std::vector<double> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < level.size(); ++i) {
    out.insert(out.end(), count[i], level[i]);
  }
  return out;
}

std::vector<double> solve_longitudinal(const std::vector<double>& s_raw, double w1, double w2) {
  return isotonic_non_decreasing(solve_regularized(s_raw, w1, w2));
}

double smoothing_objective(const std::vector<double>& x, const std::vector<double>& target,
                           double w1, double w2) {
  const std::size_t n = x.size();
  double obj = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - target[i];
    obj += d * d;
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double d = x[i + 1] - x[i];
    obj += w1 * d * d;
  }
  for (std::size_t i = 0; i + 2 < n; ++i) {
    const double d = x[i + 2] - 2.0 * x[i + 1] + x[i];
    obj += w2 * d * d;
  }
  return obj;
}

std::vector<double> recompute_yaw(const std::vector<geom::Vec2>& waypoints, double rate_limit) {
  if (waypoints.size() < 2) {
    throw SizeError("recompute_yaw: need at least 2 waypoints");
  }
  const std::size_t n = waypoints.size();
  std::vector<double> raw(n);
  bool have_prev = false;
  double prev = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const geom::Vec2 d = waypoints[i + 1] - waypoints[i];
    if (d.norm() < 1e-12) {
      raw[i] = prev;  // duplicate points carry the previous heading
    } else {
      raw[i] = std::atan2(d.y, d.x);
      if (!have_prev) {
        // backfill any leading duplicates with the first real heading
        for (std::size_t j = 0; j < i; ++j) raw[j] = raw[i];
        have_prev = true;
      }
      prev = raw[i];
    }
  }
  raw[n - 1] = raw[n - 2];

  std::vector<double> out(n);
  out[0] = kin::wrap_angle(raw[0]);
  for (std::size_t i = 1; i < n; ++i) {
    const double delta = kin::wrap_angle(raw[i] - out[i - 1]);
    out[i] = kin::wrap_angle(out[i - 1] + std::clamp(delta, -rate_limit, rate_limit));
  }
  return out;
}

PosttuneResult posttune_pipeline(const std::vector<kin::EgoState>& trajectory,
                                 const LaneLikelihoodMap& map, const geom::Polyline& reference,
                                 const SmootherWeights& weights) {
  if (trajectory.size() < 3) {
    throw SizeError("posttune_pipeline: need at least 3 waypoints");
  }
  PosttuneResult res;

  std::vector<geom::Vec2> pts(trajectory.size());
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    pts[i] = geom::Vec2{trajectory[i].x, trajectory[i].y};
  }

  std::vector<geom::Vec2> anchors(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const AnchorResult ar = lane_anchor(map, pts[i], weights.ascent_step, weights.ascent_iters);
    anchors[i] = ar.point;
    if (ar.out_of_bounds) ++res.diagnostics.anchors_out_of_bounds;
  }

  const std::vector<FrenetPoint> traj_f = frenet_project(pts, reference);
  const std::vector<FrenetPoint> anchor_f = frenet_project(anchors, reference);

  std::vector<double> gap(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    gap[i] = anchor_f[i].lateral - traj_f[i].lateral;
  }
  const std::vector<double> delta_l = solve_lateral(gap, weights.w_l1, weights.w_l2);
  res.diagnostics.lateral_objective = smoothing_objective(delta_l, gap, weights.w_l1, weights.w_l2);

  std::vector<double> s_raw(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) s_raw[i] = traj_f[i].s;
  const std::vector<double> s_smooth = solve_longitudinal(s_raw, weights.w_s1, weights.w_s2);
  res.diagnostics.longitudinal_objective =
      smoothing_objective(s_smooth, s_raw, weights.w_s1, weights.w_s2);

  std::vector<FrenetPoint> refined(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    refined[i] = FrenetPoint{s_smooth[i], traj_f[i].lateral + delta_l[i]};
  }
  const std::vector<geom::Vec2> lifted = frenet_lift(refined, reference);
  const std::vector<double> yaws = recompute_yaw(lifted, weights.yaw_rate_limit);

  res.trajectory.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    res.trajectory[i] = kin::EgoState{lifted[i].x, lifted[i].y, yaws[i]};
    res.diagnostics.max_displacement =
        std::max(res.diagnostics.max_displacement, (lifted[i] - pts[i]).norm());
  }
  return res;
}

}  // namespace tokenplan::post
