#pragma once

#include <cstdint>
#include <vector>

#include "tokenplan/armodel.hpp"

namespace tokenplan::rl {

struct RewardWeights {
  double w_ctr = 1.0;
  double w_clr = 1.0;
  double w_comf = 1.0;
  double sigma_ctr = 1.5;    // m
  double sigma_clr = 3.0;    // m
  double lambda_da = 0.1;
  double lambda_alpha = 0.1;
  double eps_spd = 0.3;      // m/s low-speed mask
};

// r_ctr = [1 - d/sigma]_+
double reward_centerline(double d_ctr, double sigma_ctr);
// r_clr = [d/sigma]_+ (linear above 1 by construction)
double reward_clearance(double d_clr, double sigma_clr);
// -(lambda_da |da| + lambda_alpha |alpha|) masked below eps_spd
double reward_comfort(double delta_a, double alpha, double v, const RewardWeights& w);

struct RewardComponents {
  double r_ctr = 0.0;
  double r_clr = 0.0;
  double r_comf = 0.0;
};

double reward_total(const RewardComponents& c, const RewardWeights& w);

struct SacBcConfig {
  double gamma = 0.95;
  double alpha = 0.05;       // fixed entropy weight
  double alpha_cql = 0.5;
  double lambda_critic = 1.0;
  double lambda_actor = 1.0;
  double lambda_bc = 1.0;
  double lambda_awac = 1.0;
  double awac_clip = 20.0;
  double tau = 0.01;         // Polyak rate
  double lambda_bev = 0.1;   // stage-II BEV supervision weight
  int critic_hidden = 64;
  double critic_lr = 1e-3;
  double policy_lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;

  void validate() const;
};

// Two-layer value head over a (detached) context embedding.
struct CriticHead {
  int d_in = 0;
  int hidden = 0;
  int n_actions = 0;
  ar::ParamStore p;
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;

  static CriticHead init(int d_in, int hidden, int n_actions, std::uint64_t seed);
  std::vector<double> forward(const double* h) const;
  // Accumulates parameter gradients for dL/dq; the embedding is constant.
  void backward(const double* h, const std::vector<double>& dq);
};

struct TwinCritics {
  CriticHead q1, q2;   // trainable
  CriticHead t1, t2;   // targets, updated only by Polyak steps

  static TwinCritics init(int d_in, int hidden, int n_actions, std::uint64_t seed);
  void polyak(double tau);
  // L2 distance between target and trainable parameters.
  double target_drift() const;
  std::vector<double> min_q(const double* h) const;         // trainable heads
  std::vector<double> min_target_q(const double* h) const;  // target heads
};

// y = r + gamma (1-done) sum_a pi(a) [min_q_next(a) - alpha ln pi(a)], exact
// over the discrete action set.
double sac_target(double r, const std::vector<double>& pi_next,
                  const std::vector<double>& min_q_next, double gamma, double alpha, bool done);

double critic_loss_value(const std::vector<double>& q1_all, const std::vector<double>& q2_all,
                         int taken, double y, double alpha_cql);

double actor_loss_value(const std::vector<double>& pi, const std::vector<double>& min_q,
                        double alpha);

double bc_loss_value(const std::vector<double>& pi, int expert_action,
                     const std::vector<double>& min_q, double lambda_awac, double clip,
                     double* adv_out = nullptr, double* weight_out = nullptr);

// One offline transition inside a shared window forward pass. Decision
// positions index the token whose logits emit A_t.
struct TransitionWindow {
  ar::TokenSequence seq;
  std::vector<int> decision_pos;   // n_transitions + 1 entries (last = bootstrap frame)
  std::vector<int> action_local;   // taken trajectory token per transition
  std::vector<int> expert_local;   // expert trajectory token per transition
  std::vector<double> reward;
  std::vector<char> done;
};

struct SacBcRecord {
  double l_critic = 0.0;
  double l_actor = 0.0;
  double l_bc = 0.0;
  double l_bev = 0.0;
  double mean_reward = 0.0;
  double mean_adv = 0.0;
  double mean_w = 0.0;
  double target_drift = 0.0;
  long n_transitions = 0;
};

// One critic update and one policy update from a batch of windows, then a
// Polyak step on the target critics. BEV positions stay supervised; the actor
// and BC gradients touch only trajectory-token logits.
SacBcRecord sacbc_step(ar::Model& policy, ar::AdamState& policy_opt, TwinCritics& critics,
                       ar::AdamState& critic1_opt, ar::AdamState& critic2_opt,
                       const std::vector<TransitionWindow>& batch, const SacBcConfig& cfg);

}  // namespace tokenplan::rl
