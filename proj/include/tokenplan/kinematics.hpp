#pragma once

#include <vector>

namespace tokenplan::kin {

// Planar pose sample at a fixed timestep.
struct EgoState {
  double x = 0.0;    // meters
  double y = 0.0;    // meters
  double yaw = 0.0;  // radians in (-pi, pi]
};

// Per-step curvature (1/m) and longitudinal acceleration (m/s^2).
struct KaPoint {
  double kappa = 0.0;
  double a = 0.0;
};

// Finite-difference rate estimates along a pose sequence.
struct RateSample {
  double v = 0.0;        // m/s
  double omega = 0.0;    // rad/s
  double alpha = 0.0;    // rad/s^2 (angular acceleration)
  double delta_a = 0.0;  // m/s^2 per-step acceleration variation
};

constexpr double kDefaultDt = 0.5;   // 2 Hz sampling
constexpr double kDefaultEps = 0.1;  // m/s floor in the curvature quotient

// Reduce an angle into (-pi, pi]. Idempotent and 2*pi periodic.
double wrap_angle(double theta);

// Convert a pose sequence into per-step (curvature, acceleration) pairs.
// Two forward differences are consumed: output length = input length - 2.
std::vector<KaPoint> states_to_ka(const std::vector<EgoState>& states, double dt,
                                  double eps = kDefaultEps);

// Forward-integrate (curvature, acceleration) controls from a start pose and
// speed. Positions advance along the mid-step heading; result includes the
// start, so its length is |ka| + 1.
std::vector<EgoState> ka_rollout(const EgoState& start, double v0,
                                 const std::vector<KaPoint>& ka, double dt);

// Speed, yaw rate, angular acceleration and acceleration variation by forward
// differences. Output length = input length - 2; delta_a of the first sample
// is defined as 0.
std::vector<RateSample> finite_diff_rates(const std::vector<EgoState>& states, double dt);

}  // namespace tokenplan::kin
