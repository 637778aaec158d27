#include <doctest.h>

#include <cmath>
#include <random>

#include "tokenplan/common.hpp"
#include "tokenplan/posttune.hpp"

using namespace tokenplan;
using namespace tokenplan::post;

namespace {

// dense reference: build M = I + w1 D1'D1 + w2 D2'D2 and solve by Gaussian
// elimination with partial pivoting
std::vector<double> dense_solve(const std::vector<double>& rhs, double w1, double w2) {
  const int n = static_cast<int>(rhs.size());
  std::vector<std::vector<double>> m(n, std::vector<double>(n + 1, 0.0));
  for (int i = 0; i < n; ++i) m[i][i] = 1.0;
  for (int r = 0; r + 1 < n; ++r) {
    const int idx[2] = {r, r + 1};
    const double co[2] = {-1.0, 1.0};
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        m[idx[a]][idx[b]] += w1 * co[a] * co[b];
      }
    }
  }
  for (int r = 0; r + 2 < n; ++r) {
    const int idx[3] = {r, r + 1, r + 2};
    const double co[3] = {1.0, -2.0, 1.0};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        m[idx[a]][idx[b]] += w2 * co[a] * co[b];
      }
    }
  }
  for (int i = 0; i < n; ++i) m[i][n] = rhs[i];
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    }
    std::swap(m[col], m[piv]);
    for (int r = 0; r < n; ++r) {
      if (r == col || m[r][col] == 0.0) continue;
      const double f = m[r][col] / m[col][col];
      for (int cc = col; cc <= n; ++cc) m[r][cc] -= f * m[col][cc];
    }
  }
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) x[i] = m[i][n] / m[i][i];
  return x;
}

LaneLikelihoodMap gaussian_ridge_map(double ridge_y, double sigma_cells) {
  LaneLikelihoodMap map;
  map.height = 40;
  map.width = 40;
  map.resolution = 1.0;
  map.origin = geom::Vec2{0.0, 0.0};
  map.values.resize(40 * 40);
  for (int r = 0; r < 40; ++r) {
    for (int c = 0; c < 40; ++c) {
      const double dy = (r - ridge_y) / sigma_cells;
      map.set(r, c, std::exp(-0.5 * dy * dy));
    }
  }
  return map;
}

}  // namespace

TEST_CASE("lane_anchor") {
  SUBCASE("constant map is a fixed point everywhere") {
    LaneLikelihoodMap map;
    map.height = map.width = 16;
    map.resolution = 0.5;
    map.origin = geom::Vec2{0, 0};
    map.values.assign(256, 0.7);
    const AnchorResult r = lane_anchor(map, {3.0, 3.0}, 0.25, 50);
    CHECK_FALSE(r.out_of_bounds);
    CHECK(r.point.x == doctest::Approx(3.0));
    CHECK(r.point.y == doctest::Approx(3.0));
  }
  SUBCASE("ascent converges onto a gaussian ridge") {
    const LaneLikelihoodMap map = gaussian_ridge_map(20.0, 1.5);
    const AnchorResult r = lane_anchor(map, {15.0, 19.0}, 0.25, 200);
    CHECK(std::abs(r.point.y - 20.0) < 1e-2);  // within 0.01 cells of the crest
    CHECK(r.point.x == doctest::Approx(15.0));  // no lateral drift on an axis ridge
  }
  SUBCASE("a waypoint on the crest stays put") {
    const LaneLikelihoodMap map = gaussian_ridge_map(20.0, 1.5);
    const AnchorResult r = lane_anchor(map, {15.0, 20.0}, 0.25, 200);
    CHECK(std::abs(r.point.y - 20.0) < 1e-9);
  }
  SUBCASE("out-of-map waypoint is returned unchanged and flagged") {
    const LaneLikelihoodMap map = gaussian_ridge_map(20.0, 1.5);
    const AnchorResult r = lane_anchor(map, {-5.0, 100.0}, 0.25, 50);
    CHECK(r.out_of_bounds);
    CHECK(r.point.x == doctest::Approx(-5.0));
  }
}

TEST_CASE("frenet projection and lift") {
  SUBCASE("axis-aligned reference") {
    const geom::Polyline ref({{0, 0}, {10, 0}});
    const auto f = frenet_project({{3.0, 0.4}}, ref);
    CHECK(f[0].s == doctest::Approx(3.0));
    CHECK(f[0].lateral == doctest::Approx(0.4));  // left of travel is positive
    const auto back = frenet_lift(f, ref);
    CHECK(back[0].x == doctest::Approx(3.0));
    CHECK(back[0].y == doctest::Approx(0.4));
  }
  SUBCASE("points on the reference have zero lateral offset") {
    const geom::Polyline ref({{0, 0}, {4, 1}, {8, -1}});
    const auto f = frenet_project({{2.0, 0.5}, {6, 0}}, ref);
    CHECK(std::abs(f[0].lateral) < 1e-9);
  }
  SUBCASE("round trip on a random smooth reference") {
    Rng rng(61);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<geom::Vec2> verts;
    double x = 0, y = 0, yaw = 0;
    for (int i = 0; i < 30; ++i) {
      verts.push_back({x, y});
      yaw += 0.1 * u(rng);
      x += 2.0 * std::cos(yaw);
      y += 2.0 * std::sin(yaw);
    }
    const geom::Polyline ref(verts);
    std::vector<geom::Vec2> pts;
    for (int i = 0; i < 20; ++i) {
      const double s = 3.0 + 2.5 * i;
      pts.push_back(ref.point_at(s, 0.8 * u(rng)));
    }
    const auto lifted = frenet_lift(frenet_project(pts, ref), ref);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(std::abs(lifted[i].x - pts[i].x) < 1e-9);
      CHECK(std::abs(lifted[i].y - pts[i].y) < 1e-9);
    }
  }
  CHECK_THROWS_AS(geom::Polyline({{0, 0}}), ConfigError);
}

TEST_CASE("regularized banded solves") {
  SUBCASE("zero gap gives zero correction") {
    const auto x = solve_lateral(std::vector<double>(10, 0.0), 0.5, 2.0);
    for (double v : x) CHECK(v == doctest::Approx(0.0));
  }
  SUBCASE("no regularization snaps to the target") {
    const std::vector<double> gap = {0.3, -0.2, 0.5, 0.1};
    const auto x = solve_lateral(gap, 0.0, 0.0);
    for (std::size_t i = 0; i < gap.size(); ++i) {
      CHECK(x[i] == doctest::Approx(gap[i]));
    }
  }
  SUBCASE("matches the dense solver and certifies optimality") {
    Rng rng(67);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (const int n : {3, 10, 50, 200}) {
      std::vector<double> gap(n);
      for (double& g : gap) g = u(rng);
      const double w1 = 0.5, w2 = 2.0;
      const auto x = solve_lateral(gap, w1, w2);
      const auto xd = dense_solve(gap, w1, w2);
      double rel = 0.0, scale = 0.0;
      for (int i = 0; i < n; ++i) {
        rel += (x[i] - xd[i]) * (x[i] - xd[i]);
        scale += xd[i] * xd[i];
      }
      CHECK(std::sqrt(rel) <= 1e-8 * std::max(1.0, std::sqrt(scale)));

      const double obj = smoothing_objective(x, gap, w1, w2);
      CHECK(obj <= smoothing_objective(std::vector<double>(n, 0.0), gap, w1, w2) + 1e-12);
      CHECK(obj <= smoothing_objective(gap, gap, w1, w2) + 1e-12);
    }
  }
  CHECK_THROWS_AS(solve_lateral({1.0, 2.0}, 0.5, 2.0), SizeError);
}

TEST_CASE("longitudinal smoothing") {
  SUBCASE("a linear ramp is a fixed point of second-difference-only smoothing") {
    std::vector<double> s(12);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = 1.5 + 2.0 * i;
    const auto out = solve_longitudinal(s, 0.0, 1.0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(out[i] == doctest::Approx(s[i]).epsilon(1e-9));
    }
  }
  SUBCASE("zero weights reduce to the monotone projection") {
    const std::vector<double> s = {0.0, 1.0, 0.5, 2.0};
    const auto out = solve_longitudinal(s, 0.0, 0.0);
    const auto iso = isotonic_non_decreasing(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(out[i] == doctest::Approx(iso[i]));
    }
    CHECK(iso[1] == doctest::Approx(0.75));
    CHECK(iso[2] == doctest::Approx(0.75));
  }
  SUBCASE("result is always non-decreasing") {
    Rng rng(71);
    std::uniform_real_distribution<double> u(-0.3, 1.0);
    std::vector<double> s(30);
    double acc = 0.0;
    for (double& v : s) {
      acc += u(rng);
      v = acc;
    }
    const auto out = solve_longitudinal(s, 0.1, 1.0);
    for (std::size_t i = 1; i < out.size(); ++i) {
      CHECK(out[i] >= out[i - 1] - 1e-12);
    }
  }
}

TEST_CASE("recompute_yaw") {
  SUBCASE("straight +x path") {
    const auto yaw = recompute_yaw({{0, 0}, {1, 0}, {2, 0}, {3, 0}}, 0.3);
    for (double y : yaw) CHECK(y == doctest::Approx(0.0));
  }
  SUBCASE("rate limit holds at a sharp corner") {
    const auto yaw = recompute_yaw({{0, 0}, {1, 0}, {2, 0}, {2, 1}, {2, 2}}, M_PI / 8.0);
    for (std::size_t i = 1; i < yaw.size(); ++i) {
      CHECK(std::abs(kin::wrap_angle(yaw[i] - yaw[i - 1])) <= M_PI / 8.0 + 1e-12);
    }
  }
  SUBCASE("duplicate points carry the previous heading") {
    const auto yaw = recompute_yaw({{0, 0}, {1, 0}, {1, 0}, {2, 0}}, 0.5);
    CHECK(yaw[1] == doctest::Approx(0.0));
    CHECK(yaw[2] == doctest::Approx(0.0));
  }
  SUBCASE("circular path matches the tangent angle") {
    std::vector<geom::Vec2> pts;
    const double radius = 30.0;
    for (int i = 0; i < 40; ++i) {
      const double th = 0.02 * i;
      pts.push_back({radius * std::sin(th), radius * (1 - std::cos(th))});
    }
    const auto yaw = recompute_yaw(pts, 1.0);
    for (std::size_t i = 0; i + 1 < yaw.size(); ++i) {
      const double tangent = 0.02 * i + 0.01;  // midpoint heading of the chord
      CHECK(std::abs(kin::wrap_angle(yaw[i] - tangent)) < 0.02);
    }
  }
}

TEST_CASE("posttune pipeline") {
  // reference along +x, lane ridge map aligned with it
  std::vector<geom::Vec2> verts;
  for (int i = 0; i <= 40; ++i) verts.push_back({static_cast<double>(i), 0.0});
  const geom::Polyline ref(verts);

  LaneLikelihoodMap map;
  map.height = 80;
  map.width = 80;
  map.resolution = 0.5;
  map.origin = geom::Vec2{0.0, -20.0};
  map.values.resize(80 * 80);
  for (int r = 0; r < 80; ++r) {
    for (int c = 0; c < 80; ++c) {
      const double y = map.origin.y + r * map.resolution;
      map.set(r, c, std::exp(-0.5 * y * y));
    }
  }
  SmootherWeights weights;

  SUBCASE("identity scenario stays put") {
    std::vector<kin::EgoState> traj;
    for (int i = 0; i < 10; ++i) traj.push_back(kin::EgoState{2.0 + 2.0 * i, 0.0, 0.0});
    const PosttuneResult res = posttune_pipeline(traj, map, ref, weights);
    for (std::size_t i = 0; i < traj.size(); ++i) {
      CHECK(std::abs(res.trajectory[i].x - traj[i].x) < 1e-6);
      CHECK(std::abs(res.trajectory[i].y - traj[i].y) < 1e-6);
    }
  }

  SUBCASE("zig-zag input loses second-difference energy") {
    std::vector<kin::EgoState> traj;
    for (int i = 0; i < 14; ++i) {
      traj.push_back(kin::EgoState{2.0 + 2.0 * i, (i % 2 == 0) ? 0.5 : -0.5, 0.0});
    }
    const PosttuneResult res = posttune_pipeline(traj, map, ref, weights);
    auto d2_energy = [](const std::vector<kin::EgoState>& t) {
      double acc = 0.0;
      for (std::size_t i = 0; i + 2 < t.size(); ++i) {
        const double d2 = t[i + 2].y - 2.0 * t[i + 1].y + t[i].y;
        acc += d2 * d2;
      }
      return acc;
    };
    CHECK(d2_energy(res.trajectory) < d2_energy(traj));
    CHECK(res.diagnostics.max_displacement > 0.0);
  }

  SUBCASE("pipeline is idempotent within tolerance") {
    std::vector<kin::EgoState> traj;
    Rng rng(73);
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    for (int i = 0; i < 12; ++i) {
      traj.push_back(kin::EgoState{2.0 + 2.0 * i, u(rng), 0.0});
    }
    const PosttuneResult once = posttune_pipeline(traj, map, ref, weights);
    const PosttuneResult twice = posttune_pipeline(once.trajectory, map, ref, weights);
    double second_move = 0.0;
    for (std::size_t i = 0; i < traj.size(); ++i) {
      second_move = std::max(second_move,
                             std::hypot(twice.trajectory[i].x - once.trajectory[i].x,
                                        twice.trajectory[i].y - once.trajectory[i].y));
    }
    CHECK(second_move <= 10.0 * std::max(once.diagnostics.max_displacement, 1e-9));
  }

  SUBCASE("refined arc length is non-decreasing and yaw rate-limited") {
    std::vector<kin::EgoState> traj;
    Rng rng(79);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (int i = 0; i < 12; ++i) {
      traj.push_back(kin::EgoState{2.0 + 1.5 * i + 0.3 * u(rng), u(rng), 0.0});
    }
    const PosttuneResult res = posttune_pipeline(traj, map, ref, weights);
    const auto f = frenet_project(
        [&] {
          std::vector<geom::Vec2> pts;
          for (const auto& s : res.trajectory) pts.push_back({s.x, s.y});
          return pts;
        }(),
        ref);
    for (std::size_t i = 1; i < f.size(); ++i) {
      CHECK(f[i].s >= f[i - 1].s - 1e-9);
      CHECK(std::abs(kin::wrap_angle(res.trajectory[i].yaw - res.trajectory[i - 1].yaw)) <=
            weights.yaw_rate_limit + 1e-12);
    }
  }
}
