#include <doctest.h>

#include <cmath>
#include <random>

#include "tokenplan/common.hpp"
#include "tokenplan/kinematics.hpp"

using namespace tokenplan;
using namespace tokenplan::kin;

namespace {
constexpr double kPi = 3.14159265358979323846;

std::vector<EgoState> circle_path(double radius, double speed, double dt, int n) {
  std::vector<EgoState> out;
  for (int i = 0; i < n; ++i) {
    const double theta = speed * i * dt / radius;
    out.push_back(EgoState{radius * std::sin(theta), radius * (1.0 - std::cos(theta)),
                           wrap_angle(theta)});
  }
  return out;
}
}  // namespace

TEST_CASE("wrap_angle maps into (-pi, pi]") {
  CHECK(wrap_angle(0.0) == doctest::Approx(0.0));
  CHECK(wrap_angle(3.0 * kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(-3.0 * kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(-kPi) == doctest::Approx(kPi));
  CHECK_THROWS_AS(wrap_angle(std::nan("")), DomainError);
}

TEST_CASE("wrap_angle is idempotent and 2pi periodic") {
  Rng rng(7);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 2000; ++i) {
    const double x = u(rng);
    const double w = wrap_angle(x);
    CHECK(w > -kPi);
    CHECK(w <= kPi);
    CHECK(wrap_angle(w) == doctest::Approx(w).epsilon(1e-15));
    const int k = static_cast<int>(u(rng) / 10.0);
    CHECK(wrap_angle(x + 2.0 * kPi * k) == doctest::Approx(w).epsilon(1e-9));
  }
}

TEST_CASE("states_to_ka on a straight constant-speed line") {
  std::vector<EgoState> states;
  for (int i = 0; i < 10; ++i) {
    states.push_back(EgoState{2.0 * i, 0.0, 0.0});
  }
  const auto ka = states_to_ka(states, 0.5);
  CHECK(ka.size() == states.size() - 2);
  for (const KaPoint& p : ka) {
    CHECK(p.kappa == doctest::Approx(0.0));
    CHECK(p.a == doctest::Approx(0.0));
  }
}

TEST_CASE("states_to_ka keeps curvature finite at standstill") {
  std::vector<EgoState> states(5, EgoState{1.0, 2.0, 0.3});
  const auto ka = states_to_ka(states, 0.5, 0.1);
  for (const KaPoint& p : ka) {
    CHECK(p.kappa == doctest::Approx(0.0));
    CHECK(p.a == doctest::Approx(0.0));
  }
}

TEST_CASE("states_to_ka size error") {
  std::vector<EgoState> two(2);
  CHECK_THROWS_AS(states_to_ka(two, 0.5), SizeError);
}

TEST_CASE("states_to_ka recovers curvature of an analytic circle") {
  const double radius = 20.0, speed = 5.0, dt = 0.01;
  const auto states = circle_path(radius, speed, dt, 50);
  const auto ka = states_to_ka(states, dt);
  for (const KaPoint& p : ka) {
    CHECK(p.kappa == doctest::Approx(1.0 / radius).epsilon(1e-4));
    CHECK(std::abs(p.a) < 1e-6);
  }
}

TEST_CASE("states_to_ka is invariant under rigid transforms") {
  Rng rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<EgoState> states;
  double x = 0, y = 0, yaw = 0.2;
  for (int i = 0; i < 12; ++i) {
    states.push_back(EgoState{x, y, wrap_angle(yaw)});
    yaw += 0.1 * u(rng);
    x += 3.0 * std::cos(yaw);
    y += 3.0 * std::sin(yaw);
  }
  const auto base = states_to_ka(states, 0.5);

  const double ang = 1.234, tx = 40.0, ty = -7.0;
  std::vector<EgoState> moved;
  for (const EgoState& s : states) {
    moved.push_back(EgoState{tx + s.x * std::cos(ang) - s.y * std::sin(ang),
                             ty + s.x * std::sin(ang) + s.y * std::cos(ang),
                             wrap_angle(s.yaw + ang)});
  }
  const auto transformed = states_to_ka(moved, 0.5);
  REQUIRE(base.size() == transformed.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(transformed[i].kappa == doctest::Approx(base[i].kappa).epsilon(1e-10));
    CHECK(transformed[i].a == doctest::Approx(base[i].a).epsilon(1e-10));
  }
}

TEST_CASE("ka_rollout identities") {
  const EgoState start{1.0, 2.0, 0.5};
  CHECK(ka_rollout(start, 3.0, {}, 0.5).size() == 1);

  const std::vector<KaPoint> zeros(4);
  const auto line = ka_rollout(EgoState{0, 0, 0.7}, 2.0, zeros, 0.5);
  REQUIRE(line.size() == 5);
  const double dist = std::hypot(line.back().x, line.back().y);
  CHECK(dist == doctest::Approx(4.0));
  CHECK(std::atan2(line.back().y, line.back().x) == doctest::Approx(0.7));
}

TEST_CASE("ka round trip: controls recovered from rolled-out poses") {
  Rng rng(3);
  std::uniform_real_distribution<double> uk(-0.15, 0.15), ua(-0.8, 0.8);
  std::vector<KaPoint> ka;
  for (int i = 0; i < 10; ++i) {
    ka.push_back(KaPoint{uk(rng), ua(rng)});
  }
  const double v0 = 6.0, dt = 0.5;
  const auto states = ka_rollout(EgoState{0, 0, 0}, v0, ka, dt);
  // two extra poses so every control is observable
  auto extended = ka;
  extended.push_back(KaPoint{0, 0});
  const auto states2 = ka_rollout(EgoState{0, 0, 0}, v0, extended, dt);
  const auto rec = states_to_ka(states2, dt);
  REQUIRE(rec.size() >= ka.size());
  for (std::size_t i = 0; i < ka.size(); ++i) {
    CHECK(rec[i].kappa == doctest::Approx(ka[i].kappa).epsilon(1e-9));
    CHECK(rec[i].a == doctest::Approx(ka[i].a).epsilon(1e-9));
  }
  (void)states;
}

TEST_CASE("pose round trip on smooth continuous trajectories stays under the oracle bound") {
  // oracle: integrate a smooth continuous-time unicycle at fine resolution,
  // subsample at dt, then measure the reconstruction displacement
  Rng rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double dt = 0.5;
  double worst_ade = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double k0 = 0.08 * u(rng), k1 = 0.05 * u(rng);
    const double a0 = 0.4 * u(rng);
    const double fine = 1e-3;
    double x = 0, y = 0, yaw = 0, v = 6.0 + u(rng);
    std::vector<EgoState> coarse;
    std::vector<double> speeds;
    const int steps_per_frame = static_cast<int>(dt / fine);
    for (int f = 0; f < 11; ++f) {
      coarse.push_back(EgoState{x, y, wrap_angle(yaw)});
      speeds.push_back(v);
      for (int s = 0; s < steps_per_frame; ++s) {
        const double t = f * dt + s * fine;
        const double kappa = k0 + k1 * std::sin(0.3 * t);
        const double acc = a0 * std::cos(0.2 * t);
        x += v * fine * std::cos(yaw);
        y += v * fine * std::sin(yaw);
        yaw += kappa * v * fine;
        v = std::max(v + acc * fine, 0.0);
      }
    }
    const auto ka = states_to_ka(coarse, dt);
    const auto rec = ka_rollout(coarse[0], speeds[0], ka, dt);
    double ade = 0.0;
    for (std::size_t i = 1; i < rec.size(); ++i) {
      ade += std::hypot(rec[i].x - coarse[i].x, rec[i].y - coarse[i].y);
    }
    ade /= static_cast<double>(rec.size() - 1);
    worst_ade = std::max(worst_ade, ade);
  }
  // measured oracle bound for this trajectory family (5 s horizon): 0.235
  CHECK(worst_ade < 0.30);
}

TEST_CASE("finite_diff_rates on constant velocity and constant acceleration") {
  std::vector<EgoState> line;
  for (int i = 0; i < 8; ++i) line.push_back(EgoState{1.5 * i, 0, 0});
  const auto rates = finite_diff_rates(line, 0.5);
  CHECK(rates.size() == line.size() - 2);
  for (const RateSample& r : rates) {
    CHECK(r.v == doctest::Approx(3.0));
    CHECK(r.omega == doctest::Approx(0.0));
    CHECK(r.alpha == doctest::Approx(0.0));
    CHECK(r.delta_a == doctest::Approx(0.0));
  }

  // x(t) = t^2/2 -> unit acceleration
  const double dt = 0.5;
  std::vector<EgoState> acc;
  for (int i = 0; i < 10; ++i) {
    const double t = i * dt;
    acc.push_back(EgoState{0.5 * t * t + 2.0 * t, 0, 0});
  }
  const auto r2 = finite_diff_rates(acc, dt);
  for (std::size_t i = 0; i + 1 < r2.size(); ++i) {
    CHECK(r2[i + 1].v - r2[i].v == doctest::Approx(dt).epsilon(1e-9));
    CHECK(r2[i].delta_a == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("finite_diff_rates matches the symbolic derivative of a polynomial path") {
  // x(t) = 1 + 2t + 0.3 t^2, y(t) = 0.5 t + 0.1 t^3, yaw = atan2(y', x')
  const double dt = 0.01;
  auto xd = [](double t) { return 2.0 + 0.6 * t; };
  auto yd = [](double t) { return 0.5 + 0.3 * t * t; };
  std::vector<EgoState> states;
  for (int i = 0; i < 40; ++i) {
    const double t = i * dt;
    states.push_back(EgoState{1.0 + 2.0 * t + 0.3 * t * t, 0.5 * t + 0.1 * t * t * t,
                              std::atan2(yd(t), xd(t))});
  }
  const auto rates = finite_diff_rates(states, dt);
  for (std::size_t i = 0; i < rates.size(); ++i) {
    const double t = i * dt;
    const double v_true = std::hypot(xd(t), yd(t));
    CHECK(rates[i].v == doctest::Approx(v_true).epsilon(0.01));
  }
  CHECK_THROWS_AS(finite_diff_rates({EgoState{}, EgoState{}}, dt), SizeError);
}
