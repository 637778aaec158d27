#include <doctest.h>

#include <cmath>
#include <random>

#include "tokenplan/common.hpp"
#include "tokenplan/nnops.hpp"
#include "tokenplan/rl.hpp"

using namespace tokenplan;
using namespace tokenplan::rl;

TEST_CASE("geometry rewards follow the hinge formulas") {
  CHECK(reward_centerline(0.0, 1.5) == doctest::Approx(1.0));
  CHECK(reward_centerline(1.5, 1.5) == doctest::Approx(0.0));
  CHECK(reward_centerline(3.0, 1.5) == doctest::Approx(0.0));
  CHECK_THROWS_AS(reward_centerline(-0.1, 1.5), DomainError);

  CHECK(reward_clearance(0.0, 3.0) == doctest::Approx(0.0));
  CHECK(reward_clearance(3.0, 3.0) == doctest::Approx(1.0));
  CHECK(reward_clearance(9.0, 3.0) == doctest::Approx(3.0));
  CHECK_THROWS_AS(reward_clearance(-1.0, 3.0), DomainError);

  RewardWeights w;
  w.lambda_da = 1.0;
  w.lambda_alpha = 2.0;
  w.eps_spd = 0.1;
  CHECK(reward_comfort(0.5, 0.25, 5.0, w) == doctest::Approx(-1.0));
  CHECK(reward_comfort(10.0, 10.0, 0.05, w) == doctest::Approx(0.0));  // low-speed mask
  CHECK(reward_comfort(0.0, 0.0, 5.0, w) == doctest::Approx(0.0));
}

TEST_CASE("reward_total is the weighted sum, checked against recomputation") {
  RewardWeights w;
  CHECK(reward_total({1.0, 1.0, 0.0}, w) == doctest::Approx(2.0));
  RewardWeights zero;
  zero.w_ctr = zero.w_clr = zero.w_comf = 0.0;
  CHECK(reward_total({0.7, 2.0, -0.4}, zero) == doctest::Approx(0.0));

  Rng rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    RewardWeights rw;
    rw.w_ctr = u(rng);
    rw.w_clr = u(rng);
    rw.w_comf = u(rng);
    const RewardComponents c{std::abs(u(rng)), std::abs(u(rng)), -std::abs(u(rng))};
    const double expect = rw.w_ctr * c.r_ctr + rw.w_clr * c.r_clr + rw.w_comf * c.r_comf;
    CHECK(reward_total(c, rw) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("sac_target identities") {
  SUBCASE("single action with zero entropy weight") {
    const double y = sac_target(0.5, {1.0}, {2.0}, 0.9, 0.0, false);
    CHECK(y == doctest::Approx(0.5 + 0.9 * 2.0));
  }
  SUBCASE("terminal transitions bootstrap nothing") {
    CHECK(sac_target(0.7, {0.25, 0.25, 0.25, 0.25}, {5, 5, 5, 5}, 0.9, 1.0, true) ==
          doctest::Approx(0.7));
  }
  SUBCASE("uniform policy over four actions with constant targets") {
    const double c = 3.0, r = 0.1, gamma = 0.9, alpha = 1.0;
    const double y = sac_target(r, {0.25, 0.25, 0.25, 0.25}, {c, c, c, c}, gamma, alpha, false);
    CHECK(y == doctest::Approx(r + gamma * (c + std::log(4.0))));
  }
  SUBCASE("unnormalized policies are rejected") {
    CHECK_THROWS_AS(sac_target(0.0, {0.5, 0.6}, {0, 0}, 0.9, 0.1, false), TrainingError);
  }
}

TEST_CASE("critic loss value") {
  SUBCASE("exact fit with no conservative term is zero") {
    CHECK(critic_loss_value({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}, 1, 2.0, 0.0) ==
          doctest::Approx(0.0));
  }
  SUBCASE("uniform Q makes the CQL term 2 ln K") {
    const int k = 10;
    const std::vector<double> q(k, 0.7);
    const double loss = critic_loss_value(q, q, 3, 0.7, 1.0);
    CHECK(loss == doctest::Approx(2.0 * std::log(static_cast<double>(k))));
  }
  SUBCASE("the CQL term is non-negative on random batches") {
    Rng rng(7);
    std::normal_distribution<double> n01(0.0, 2.0);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> q1(6), q2(6);
      for (double& v : q1) v = n01(rng);
      for (double& v : q2) v = n01(rng);
      const int taken = static_cast<int>(rng() % 6);
      const double with = critic_loss_value(q1, q2, taken, q1[taken], 1.0);
      const double without = critic_loss_value(q1, q2, taken, q1[taken], 0.0);
      CHECK(with - without >= -1e-12);  // logsumexp dominates any component
    }
  }
}

TEST_CASE("actor loss is minimized by the Boltzmann distribution of min Q") {
  const double alpha = 0.7;
  const std::vector<double> min_q = {1.0, -0.5, 0.3, 2.0};

  std::vector<double> pi(min_q.size());
  for (std::size_t a = 0; a < pi.size(); ++a) pi[a] = min_q[a] / alpha;
  nn::softmax_inplace(pi.data(), static_cast<int>(pi.size()));

  // numeric gradient of the loss w.r.t. policy logits at the Boltzmann point
  auto loss_of_logits = [&](const std::vector<double>& z) {
    std::vector<double> p = z;
    nn::softmax_inplace(p.data(), static_cast<int>(p.size()));
    return actor_loss_value(p, min_q, alpha);
  };
  std::vector<double> z(pi.size());
  for (std::size_t a = 0; a < z.size(); ++a) z[a] = std::log(pi[a]);
  const double eps = 1e-6;
  for (std::size_t a = 0; a < z.size(); ++a) {
    std::vector<double> zp = z, zm = z;
    zp[a] += eps;
    zm[a] -= eps;
    const double g = (loss_of_logits(zp) - loss_of_logits(zm)) / (2.0 * eps);
    CHECK(std::abs(g) <= 1e-5);  // stationary at the known minimizer
  }

  SUBCASE("alpha = 0 prefers the argmax policy") {
    std::vector<double> greedy(min_q.size(), 0.0);
    greedy[3] = 1.0;
    const std::vector<double> uniform(min_q.size(), 0.25);
    CHECK(actor_loss_value(greedy, min_q, 0.0) < actor_loss_value(uniform, min_q, 0.0));
  }
  SUBCASE("uniform Q is minimized by the uniform policy") {
    const std::vector<double> flat_q(4, 1.0);
    const std::vector<double> uniform(4, 0.25);
    std::vector<double> skew = {0.6, 0.2, 0.1, 0.1};
    CHECK(actor_loss_value(uniform, flat_q, 0.5) < actor_loss_value(skew, flat_q, 0.5));
  }
}

TEST_CASE("value-aware behavior cloning weights") {
  const std::vector<double> pi = {0.1, 0.2, 0.3, 0.4};
  SUBCASE("zero advantage gives a plain NLL") {
    const std::vector<double> flat_q(4, 2.0);
    double adv = 0, w = 0;
    const double loss = bc_loss_value(pi, 2, flat_q, 1.0, 20.0, &adv, &w);
    CHECK(adv == doctest::Approx(0.0));
    CHECK(w == doctest::Approx(1.0));
    CHECK(loss == doctest::Approx(-std::log(0.3)));
  }
  SUBCASE("infinite temperature flattens the weights to 1") {
    const std::vector<double> q = {0.0, 10.0, -3.0, 2.0};
    double w = 0;
    bc_loss_value(pi, 1, q, 1e12, 20.0, nullptr, &w);
    CHECK(w == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("weights are positive and respect the clip") {
    Rng rng(11);
    std::normal_distribution<double> n01(0.0, 5.0);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> q(4);
      for (double& v : q) v = n01(rng);
      double w = 0;
      bc_loss_value(pi, static_cast<int>(rng() % 4), q, 0.7, 20.0, nullptr, &w);
      CHECK(w > 0.0);
      CHECK(w <= 20.0);
    }
  }
  SUBCASE("perfect imitation has zero loss") {
    const std::vector<double> sharp = {0.0, 1.0, 0.0, 0.0};
    const std::vector<double> flat_q(4, 1.0);
    CHECK(bc_loss_value(sharp, 1, flat_q, 1.0, 20.0) == doctest::Approx(0.0));
  }
}

TEST_CASE("critic head gradients match finite differences") {
  CriticHead critic = CriticHead::init(8, 12, 5, 123);
  Rng rng(13);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> h(8);
  for (double& x : h) x = n01(rng);
  std::vector<double> dq(5);
  for (double& x : dq) x = n01(rng);

  critic.p.zero_grad();
  critic.backward(h.data(), dq);
  const std::vector<double> analytic = critic.p.grad;

  auto loss = [&]() {
    const std::vector<double> q = critic.forward(h.data());
    double acc = 0.0;
    for (int i = 0; i < 5; ++i) acc += dq[i] * q[i];
    return acc;
  };
  const double eps = 1e-6;
  double max_rel = 0.0;
  for (std::size_t i = 0; i < critic.p.value.size(); i += 3) {
    const double orig = critic.p.value[i];
    critic.p.value[i] = orig + eps;
    const double lp = loss();
    critic.p.value[i] = orig - eps;
    const double lm = loss();
    critic.p.value[i] = orig;
    const double fd = (lp - lm) / (2.0 * eps);
    max_rel = std::max(max_rel,
                       std::abs(fd - analytic[i]) / std::max(std::abs(fd) + std::abs(analytic[i]),
                                                             1e-8));
  }
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("polyak updates move targets by the exact convex combination") {
  TwinCritics tc = TwinCritics::init(6, 8, 4, 17);
  // perturb the trainable critics away from the targets
  for (double& v : tc.q1.p.value) v += 0.5;
  for (double& v : tc.q2.p.value) v -= 0.25;
  const std::vector<double> t1_before = tc.t1.p.value;
  const double tau = 0.25;
  tc.polyak(tau);
  for (std::size_t i = 0; i < t1_before.size(); ++i) {
    CHECK(tc.t1.p.value[i] ==
          doctest::Approx((1 - tau) * t1_before[i] + tau * tc.q1.p.value[i]).epsilon(1e-12));
  }
  SUBCASE("tau = 1 is a hard copy") {
    tc.polyak(1.0);
    CHECK(tc.t1.p.value == tc.q1.p.value);
    CHECK(tc.t2.p.value == tc.q2.p.value);
    CHECK(tc.target_drift() == doctest::Approx(0.0));
  }
}

namespace {

// a 3-state, 4-action bandit exercised through the full SAC-BC machinery:
// contexts are bare command tokens, rewards are known per (state, action)
struct BanditFixture {
  ar::ModelConfig cfg;
  std::vector<rl::TransitionWindow> windows;
  double reward[3][4] = {{0.1, 0.9, 0.2, 0.0},    // optimal action 1
                         {0.8, 0.1, 0.05, 0.3},   // optimal action 0
                         {0.0, 0.2, 0.25, 0.95}};  // optimal action 3
  int expert[3] = {1, 2, 3};  // suboptimal demonstration in state 1

  BanditFixture() {
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.n_experts = 1;
    cfg.top_k = 1;
    cfg.d_ff = 32;
    cfg.vocab = tok::VocabLayout{3, 0, 4};
    cfg.history_frames = 0;
    cfg.bev_tokens_per_frame = 0;
    cfg.max_seq_len = 8;
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 4; ++a) {
        rl::TransitionWindow w;
        w.seq = ar::assemble_sequence(cfg.vocab, s, {ar::FrameTokens{{}, a}});
        w.decision_pos = {0, 1};
        w.action_local = {a};
        w.expert_local = {expert[s]};
        w.reward = {reward[s][a]};
        w.done = {1};
        windows.push_back(std::move(w));
      }
    }
  }
};

}  // namespace

TEST_CASE("sacbc_step degenerate cases") {
  BanditFixture fx;
  ar::Model policy = ar::init_model(fx.cfg, 19);
  rl::TwinCritics critics = rl::TwinCritics::init(fx.cfg.d_model, 16, 4, 23);
  ar::AdamState popt, c1, c2;

  SUBCASE("pure BC reduces to weighted cross-entropy on trajectory tokens") {
    SacBcConfig sc;
    sc.lambda_critic = 0.0;
    sc.lambda_actor = 0.0;
    sc.lambda_bc = 1.0;
    sc.lambda_awac = 1e12;  // weights ~ 1
    sc.lambda_bev = 0.0;
    const SacBcRecord rec = sacbc_step(policy, popt, critics, c1, c2, fx.windows, sc);
    CHECK(rec.mean_w == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(rec.l_bc > 0.0);
    CHECK(rec.n_transitions == 12);
  }

  SUBCASE("tau = 1 copies the critics into the targets after the step") {
    SacBcConfig sc;
    sc.tau = 1.0;
    sacbc_step(policy, popt, critics, c1, c2, fx.windows, sc);
    CHECK(critics.target_drift() == doctest::Approx(0.0));
  }
}

TEST_CASE("sacbc learns the reward-optimal action on the enumerable bandit") {
  BanditFixture fx;
  ar::Model policy = ar::init_model(fx.cfg, 29);
  rl::TwinCritics critics = rl::TwinCritics::init(fx.cfg.d_model, 16, 4, 31);
  ar::AdamState popt, c1, c2;
  SacBcConfig sc;
  sc.policy_lr = 3e-3;
  sc.critic_lr = 3e-3;
  sc.alpha = 0.02;
  sc.alpha_cql = 0.1;
  sc.lambda_bc = 0.3;
  sc.lambda_bev = 0.0;
  sc.tau = 0.05;

  for (int step = 0; step < 800; ++step) {
    sacbc_step(policy, popt, critics, c1, c2, fx.windows, sc);
  }
  for (int s = 0; s < 3; ++s) {
    const ar::TokenSequence ctx = [&] {
      ar::TokenSequence t;
      t.push(s, tok::Modality::command, -1);
      return t;
    }();
    const std::vector<double> logits = ar::forward(policy, ctx, nullptr);
    const int off = fx.cfg.vocab.traj_offset();
    int best = 0;
    for (int a = 1; a < 4; ++a) {
      if (logits[off + a] > logits[off + best]) best = a;
    }
    int optimal = 0;
    for (int a = 1; a < 4; ++a) {
      if (fx.reward[s][a] > fx.reward[s][optimal]) optimal = a;
    }
    CHECK(best == optimal);
  }
}
