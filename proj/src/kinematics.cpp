#include "tokenplan/kinematics.hpp"

#include <cmath>
#include <cstdio>

#include "tokenplan/common.hpp"

namespace tokenplan {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace tokenplan

namespace tokenplan::kin {

namespace {
constexpr double kPi = 3.14159265358979323846;

void require_finite(const EgoState& s, const char* where) {
  if (!std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.yaw)) {
    throw DomainError(std::string(where) + ": non-finite ego state");
  }
}
}  // namespace

double wrap_angle(double theta) {
  if (!std::isfinite(theta)) {
    throw DomainError("wrap_angle: non-finite input");
  }
  double w = std::remainder(theta, 2.0 * kPi);
  if (w <= -kPi) {
    w += 2.0 * kPi;
  }
  return w;
}

std::vector<KaPoint> states_to_ka(const std::vector<EgoState>& states, double dt, double eps) {
  if (states.size() < 3) {
    throw SizeError("states_to_ka: need at least 3 states");
  }
  if (dt <= 0.0) {
    throw DomainError("states_to_ka: dt must be positive");
  }
  if (eps <= 0.0) {
    throw DomainError("states_to_ka: eps must be positive");
  }
  const std::size_t n = states.size() - 2;
  std::vector<double> v(n + 1);
  std::vector<double> omega(n + 1);
  for (std::size_t t = 0; t <= n; ++t) {
    require_finite(states[t], "states_to_ka");
    const double dx = states[t + 1].x - states[t].x;
    const double dy = states[t + 1].y - states[t].y;
    v[t] = std::sqrt(dx * dx + dy * dy) / dt;
    omega[t] = wrap_angle(states[t + 1].yaw - states[t].yaw) / dt;
  }
  require_finite(states[n + 1], "states_to_ka");

  std::vector<KaPoint> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    out[t].kappa = omega[t] / std::max(v[t], eps);
    out[t].a = (v[t + 1] - v[t]) / dt;
  }
  return out;
}

std::vector<EgoState> ka_rollout(const EgoState& start, double v0, const std::vector<KaPoint>& ka,
                                 double dt) {
  if (dt <= 0.0) {
    throw DomainError("ka_rollout: dt must be positive");
  }
  require_finite(start, "ka_rollout");
  if (!std::isfinite(v0)) {
    throw DomainError("ka_rollout: non-finite v0");
  }
  std::vector<EgoState> out;
  out.reserve(ka.size() + 1);
  out.push_back(start);
  double x = start.x, y = start.y, psi = start.yaw, v = v0;
  for (const KaPoint& p : ka) {
    if (!std::isfinite(p.kappa) || !std::isfinite(p.a)) {
      throw DomainError("ka_rollout: non-finite control");
    }
    const double dpsi = p.kappa * v * dt;
    const double mid = psi + 0.5 * dpsi;
    x += v * dt * std::cos(mid);
    y += v * dt * std::sin(mid);
    psi = wrap_angle(psi + dpsi);
    v += p.a * dt;
    out.push_back(EgoState{x, y, psi});
  }
  return out;
}

std::vector<RateSample> finite_diff_rates(const std::vector<EgoState>& states, double dt) {
  if (states.size() < 3) {
    throw SizeError("finite_diff_rates: need at least 3 states");
  }
  if (dt <= 0.0) {
    throw DomainError("finite_diff_rates: dt must be positive");
  }
  const std::size_t m = states.size() - 1;  // pairwise differences
  std::vector<double> v(m), omega(m);
  for (std::size_t t = 0; t < m; ++t) {
    require_finite(states[t], "finite_diff_rates");
    const double dx = states[t + 1].x - states[t].x;
    const double dy = states[t + 1].y - states[t].y;
    v[t] = std::sqrt(dx * dx + dy * dy) / dt;
    omega[t] = wrap_angle(states[t + 1].yaw - states[t].yaw) / dt;
  }
  require_finite(states[m], "finite_diff_rates");

  std::vector<RateSample> out(states.size() - 2);
  double prev_a = 0.0;
  for (std::size_t t = 0; t + 1 < m; ++t) {
    const double a = (v[t + 1] - v[t]) / dt;
    out[t].v = v[t];
    out[t].omega = omega[t];
    out[t].alpha = (omega[t + 1] - omega[t]) / dt;
    out[t].delta_a = (t == 0) ? 0.0 : a - prev_a;
    prev_a = a;
  }
  return out;
}

}  // namespace tokenplan::kin
