#pragma once

#include <vector>

#include "tokenplan/geometry.hpp"
#include "tokenplan/kinematics.hpp"

namespace tokenplan::post {

// Lane-center likelihood raster in world coordinates. Value at world point p
// lives at fractional cell ((p - origin) / resolution).
struct LaneLikelihoodMap {
  int height = 0;
  int width = 0;
  double resolution = 0.5;
  geom::Vec2 origin;  // world position of cell (0, 0) corner
  std::vector<double> values;  // row-major, in [0, 1]

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  void set(int r, int c, double v) { values[static_cast<std::size_t>(r) * width + c] = v; }
  bool in_bounds(geom::Vec2 p) const;
  // Bilinear interpolation of the likelihood and its grid-sampled gradient.
  double sample(geom::Vec2 p) const;
  geom::Vec2 gradient(geom::Vec2 p) const;
};

struct FrenetPoint {
  double s = 0.0;
  double lateral = 0.0;
};

struct SmootherWeights {
  double w_l1 = 0.5;
  double w_l2 = 2.0;
  double w_s1 = 0.0;  // a first-difference penalty contracts arc length; off by default
  double w_s2 = 1.0;
  double yaw_rate_limit = 0.3;  // rad per step
  double ascent_step = 0.25;    // cells
  int ascent_iters = 50;
};

struct AnchorResult {
  geom::Vec2 point;
  bool out_of_bounds = false;
};

// Gradient ascent on the likelihood map from a waypoint; out-of-map waypoints
// are returned unchanged and flagged.
AnchorResult lane_anchor(const LaneLikelihoodMap& map, geom::Vec2 waypoint, double step_cells,
                         int max_iters);

std::vector<FrenetPoint> frenet_project(const std::vector<geom::Vec2>& waypoints,
                                        const geom::Polyline& reference);
std::vector<geom::Vec2> frenet_lift(const std::vector<FrenetPoint>& points,
                                    const geom::Polyline& reference);

// Solve (I + w1 D1'D1 + w2 D2'D2) x = rhs via banded Cholesky (bandwidth 2).
std::vector<double> solve_regularized(const std::vector<double>& rhs, double w1, double w2);

std::vector<double> solve_lateral(const std::vector<double>& gap, double w1, double w2);
// Longitudinal smoothing followed by an isotonic (non-decreasing) projection.
std::vector<double> solve_longitudinal(const std::vector<double>& s_raw, double w1, double w2);

double smoothing_objective(const std::vector<double>& x, const std::vector<double>& target,
                           double w1, double w2);

// Pool-adjacent-violators projection onto non-decreasing sequences.
std::vector<double> isotonic_non_decreasing(const std::vector<double>& v);

std::vector<double> recompute_yaw(const std::vector<geom::Vec2>& waypoints, double rate_limit);

struct PosttuneDiagnostics {
  double lateral_objective = 0.0;
  double longitudinal_objective = 0.0;
  double max_displacement = 0.0;
  int anchors_out_of_bounds = 0;
};

struct PosttuneResult {
  std::vector<kin::EgoState> trajectory;
  PosttuneDiagnostics diagnostics;
};

// Anchor extraction, Frenet smoothing (lateral then longitudinal), lift back
// to the world frame and rate-limited yaw recomputation.
PosttuneResult posttune_pipeline(const std::vector<kin::EgoState>& trajectory,
                                 const LaneLikelihoodMap& map, const geom::Polyline& reference,
                                 const SmootherWeights& weights);

}  // namespace tokenplan::post
