#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "tokenplan/common.hpp"
#include "tokenplan/tokenize.hpp"

using namespace tokenplan;
using namespace tokenplan::tok;

TEST_CASE("uniform grid follows the bins = range/step convention") {
  const UniformGrid g = UniformGrid::make(-0.22, 0.22, 0.01);
  CHECK(g.bins == 44);
  CHECK(g.quantize(-0.22) == 0);
  CHECK(g.quantize(0.22) == 43);
  CHECK_THROWS_AS(UniformGrid::make(1.0, 0.0, 0.1), ConfigError);
  CHECK_THROWS_AS(UniformGrid::make(0.0, 1.0, 0.3), ConfigError);
}

TEST_CASE("grid round-trip error is at most half a step, and quantize is monotone") {
  const UniformGrid g = UniformGrid::make(-16.0, 16.0, 0.5);
  Rng rng(13);
  std::uniform_real_distribution<double> u(-16.0, 16.0);
  double prev_x = -17.0;
  int prev_q = 0;
  double worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = u(rng);
    const int q = g.quantize(x);
    worst = std::max(worst, std::abs(g.dequantize(q) - x));
    if (x >= prev_x) {
      CHECK(q >= prev_q);
    }
    prev_x = x;
    prev_q = q;
  }
  CHECK(worst <= 0.25 + 1e-12);
  CHECK(worst < 0.25);  // random in-range draws
}

TEST_CASE("codebook sizes reproduce the published table") {
  CHECK(ka_fb_config('A').codebook_size() == 1144);  // table states 1146; 44*26 under the
                                                     // stated bin convention is 1144
  CHECK(ka_fb_config('B').codebook_size() == 3648);
  CHECK(ka_fb_config('C').codebook_size() == 4576);
  CHECK(ka_fb_config('D').codebook_size() == 14592);
  CHECK(xy_fb_config('A').codebook_size() == 45056);
  CHECK(xy_fb_config('B').codebook_size() == 278784);
  CHECK(xy_fb_config('C').codebook_size() == 360448);
  CHECK(xy_fb_config('D').codebook_size() == 2230272);
  CHECK(dct_xy_config('A', 10).codebook_size() == 256000);
  CHECK(dct_xy_config('B', 10).codebook_size() == 720000);
  CHECK(dct_ka_config('C', 10).codebook_size() == 6400);
  CHECK(dct_ka_config('D', 10).codebook_size() == 25600);
}

TEST_CASE("pack_token formula and bijection") {
  CHECK(pack_token(0, 0, 26, 44).value == 0);
  CHECK(pack_token(2, 3, 26, 44).value == 55);
  CHECK_THROWS_AS(pack_token(44, 0, 26, 44), DomainError);
  CHECK_THROWS_AS(pack_token(0, 26, 26, 44), DomainError);

  std::set<std::int32_t> seen;
  for (int ik = 0; ik < 44; ++ik) {
    for (int ia = 0; ia < 26; ++ia) {
      const TrajTokenId t = pack_token(ik, ia, 26, 44);
      CHECK(t.value >= 0);
      CHECK(t.value < 1144);
      seen.insert(t.value);
      const auto [rk, ra] = unpack_token(t, 26, 44);
      CHECK(rk == ik);
      CHECK(ra == ia);
    }
  }
  CHECK(seen.size() == 1144);
}

TEST_CASE("ka tokenization of a straight constant-speed trajectory is constant") {
  std::vector<kin::EgoState> states;
  for (int i = 0; i < 8; ++i) states.push_back(kin::EgoState{3.0 * i, 0, 0});
  const KaGridConfig cfg = ka_fb_config('A');
  const auto tokens = ka_tokenize(states, 0.5, cfg);
  const TrajTokenId expected =
      pack_token(cfg.kappa_grid.quantize(0.0), cfg.a_grid.quantize(0.0), cfg.a_grid.bins,
                 cfg.kappa_grid.bins);
  for (const TrajTokenId& t : tokens) {
    CHECK(t.value == expected.value);
  }
}

TEST_CASE("out-of-range curvature saturates and is counted") {
  std::vector<kin::EgoState> states;
  double x = 0, y = 0, yaw = 0;
  const double v = 4.0, dt = 0.5, kappa = 0.9;  // hairpin beyond the grid max 0.48
  for (int i = 0; i < 6; ++i) {
    states.push_back(kin::EgoState{x, y, kin::wrap_angle(yaw)});
    x += v * dt * std::cos(yaw);
    y += v * dt * std::sin(yaw);
    yaw += kappa * v * dt;
  }
  int sat = 0;
  const auto tokens = ka_tokenize(states, dt, ka_fb_config('D'), kin::kDefaultEps, &sat);
  CHECK(sat > 0);
  const auto [ik, ia] = unpack_token(tokens[0], 76, 192);
  CHECK(ik == 191);  // pinned to the top curvature bin
  (void)ia;
}

TEST_CASE("dct forward/inverse is an exact orthonormal pair") {
  SUBCASE("constant sequence concentrates in the DC coefficient") {
    const std::vector<double> x(7, 3.25);
    const auto c = dct_forward(x);
    CHECK(c[0] == doctest::Approx(3.25 * std::sqrt(7.0)));
    for (std::size_t i = 1; i < c.size(); ++i) {
      CHECK(std::abs(c[i]) < 1e-12);
    }
  }
  SUBCASE("unit impulse round trip") {
    std::vector<double> x(4, 0.0);
    x[2] = 1.0;
    const auto rec = dct_inverse(dct_forward(x));
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(rec[i] == doctest::Approx(x[i]).epsilon(1e-12));
    }
  }
  SUBCASE("random sequence matches the direct cosine-sum oracle") {
    Rng rng(17);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    std::vector<double> x(20);
    for (double& v : x) v = u(rng);
    const auto c = dct_forward(x);
    // independent direct summation
    const std::size_t n = x.size();
    for (std::size_t k = 0; k < n; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += x[i] * std::cos(M_PI * (2.0 * i + 1.0) * k / (2.0 * n));
      }
      acc *= (k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n));
      CHECK(std::abs(c[k] - acc) < 1e-10);
    }
    const auto rec = dct_inverse(c);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(rec[i] - x[i]) < 1e-10);
    }
  }
}

TEST_CASE("dct coefficient quantization") {
  CHECK(dct_quantize({0.0}, 2.0, 80)[0] == 0);
  // q=2, L=80: representable range [-80, 78]
  CHECK(dct_quantize({-1000.0}, 2.0, 80)[0] == -40);
  CHECK(dct_quantize({1000.0}, 2.0, 80)[0] == 39);
  CHECK(dct_dequantize({-40}, 2.0)[0] == doctest::Approx(-80.0));
  CHECK(dct_dequantize({39}, 2.0)[0] == doctest::Approx(78.0));

  Rng rng(23);
  std::uniform_real_distribution<double> u(-70.0, 70.0);
  for (int i = 0; i < 20000; ++i) {
    const double c = u(rng);
    const double rec = dct_dequantize(dct_quantize({c}, 2.0, 80), 2.0)[0];
    CHECK(std::abs(rec - c) <= 1.0 + 1e-12);
  }
  CHECK_THROWS_AS(dct_quantize({0.0}, 2.0, 79), ConfigError);
}

TEST_CASE("vocabulary ranges are a disjoint contiguous bijection") {
  const VocabLayout layout{4, 128, 1144};
  CHECK(vocab_map(layout, Modality::command, 0) == 0);
  CHECK(vocab_map(layout, Modality::traj, 0) == 132);
  CHECK_THROWS_AS(vocab_map(layout, Modality::command, 4), DomainError);

  for (int id = 0; id < layout.total(); ++id) {
    const auto [m, local] = vocab_unmap(layout, id);
    CHECK(vocab_map(layout, m, local) == id);
  }
  CHECK_THROWS_AS(vocab_unmap(layout, layout.total()), DomainError);
}

namespace {

std::vector<std::vector<kin::EgoState>> smooth_windows(int count, int len, double dt) {
  Rng rng(29);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<std::vector<kin::EgoState>> windows;
  for (int w = 0; w < count; ++w) {
    const double k0 = 0.06 * u(rng), k1 = 0.05 * u(rng);
    double x = 0, y = 0, yaw = 0.5 * u(rng), v = 6.5 + 1.5 * u(rng);
    std::vector<kin::EgoState> win;
    for (int i = 0; i < len; ++i) {
      win.push_back(kin::EgoState{x, y, kin::wrap_angle(yaw)});
      const double kappa = k0 + k1 * std::sin(0.4 * i);
      const double acc = 0.5 * u(rng);
      x += v * dt * std::cos(yaw + 0.5 * kappa * v * dt);
      y += v * dt * std::sin(yaw + 0.5 * kappa * v * dt);
      yaw += kappa * v * dt;
      v = std::max(v + acc * dt, 0.0);
    }
    windows.push_back(std::move(win));
  }
  return windows;
}

}  // namespace

TEST_CASE("recon_benchmark basics") {
  const double dt = 0.5;
  const auto windows = smooth_windows(60, 10, dt);

  SUBCASE("identity codec reports zero error") {
    const auto codec = make_identity_codec();
    const auto rep = recon_benchmark(windows, *codec, {1.0, 4.0}, dt, {0.95});
    for (const auto& hr : rep.horizons) {
      CHECK(hr.mean.ade == doctest::Approx(0.0));
      CHECK(hr.mean.fde == doctest::Approx(0.0));
      CHECK(hr.mean.ahe == doctest::Approx(0.0));
    }
  }

  SUBCASE("99% CI contains the 95% CI for every metric") {
    const auto codec = make_ka_fb_codec("B", ka_fb_config('B'));
    const auto rep = recon_benchmark(windows, *codec, {4.0}, dt, {0.95, 0.99});
    const auto& cis = rep.horizons[0].cis;
    REQUIRE(cis.size() == 2);
    CHECK(cis[1].lo.ade <= cis[0].lo.ade + 1e-12);
    CHECK(cis[1].hi.ade >= cis[0].hi.ade - 1e-12);
    CHECK(cis[1].lo.fde <= cis[0].lo.fde + 1e-12);
    CHECK(cis[1].hi.fde >= cis[0].hi.fde - 1e-12);
    CHECK(cis[1].lo.ahe <= cis[0].lo.ahe + 1e-12);
    CHECK(cis[1].hi.ahe >= cis[0].hi.ahe - 1e-12);
  }

  SUBCASE("empty dataset raises a size error") {
    const auto codec = make_identity_codec();
    CHECK_THROWS_AS(recon_benchmark({}, *codec, {1.0}, dt, {0.95}), SizeError);
  }

  SUBCASE("finer ka grid does not reconstruct worse") {
    const auto coarse = make_ka_fb_codec("B", ka_fb_config('B'));
    const auto fine = make_ka_fb_codec("D", ka_fb_config('D'));
    const auto rb = recon_benchmark(windows, *coarse, {4.0}, dt, {0.95});
    const auto rd = recon_benchmark(windows, *fine, {4.0}, dt, {0.95});
    CHECK(rd.horizons[0].mean.ade <= rb.horizons[0].mean.ade + 1e-12);
  }

  SUBCASE("AHE is invariant under a global heading shift of 2pi") {
    auto shifted = windows;
    for (auto& win : shifted) {
      for (auto& s : win) s.yaw = kin::wrap_angle(s.yaw + 2.0 * M_PI);
    }
    const auto codec = make_xy_fb_codec("A", xy_fb_config('A'));
    const auto a = recon_benchmark(windows, *codec, {4.0}, dt, {0.95});
    const auto b = recon_benchmark(shifted, *codec, {4.0}, dt, {0.95});
    CHECK(a.horizons[0].mean.ahe == doctest::Approx(b.horizons[0].mean.ahe).epsilon(1e-12));
  }
}

TEST_CASE("ka codec round trip isolates grid error against the continuous path") {
  const double dt = 0.5;
  const auto windows = smooth_windows(40, 10, dt);
  const auto codec = make_ka_fb_codec("B", ka_fb_config('B'));
  const auto rep = recon_benchmark(windows, *codec, {4.0}, dt, {0.95});
  // quantization-free round trip of the same windows
  double base_ade = 0.0;
  for (const auto& win : windows) {
    const auto ka = kin::states_to_ka(win, dt);
    const double v0 = std::hypot(win[1].x - win[0].x, win[1].y - win[0].y) / dt;
    const auto rec = kin::ka_rollout(win[0], v0, ka, dt);
    double acc = 0.0;
    for (int t = 1; t <= 8; ++t) {
      acc += std::hypot(rec[t].x - win[t].x, rec[t].y - win[t].y);
    }
    base_ade += acc / 8.0;
  }
  base_ade /= windows.size();
  CHECK(rep.horizons[0].mean.ade >= base_ade - 1e-12);
  CHECK(rep.horizons[0].mean.ade < 1.0);  // grid error stays modest on smooth data
}
