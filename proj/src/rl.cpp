#include "tokenplan/rl.hpp"

#include <cmath>
#include <cstring>

#include "tokenplan/nnops.hpp"

namespace tokenplan::rl {

double reward_centerline(double d_ctr, double sigma_ctr) {
  if (d_ctr < 0.0 || !std::isfinite(d_ctr)) {
    throw DomainError("reward_centerline: distance must be non-negative");
  }
  return std::max(1.0 - d_ctr / sigma_ctr, 0.0);
}

double reward_clearance(double d_clr, double sigma_clr) {
  if (d_clr < 0.0 || !std::isfinite(d_clr)) {
    throw DomainError("reward_clearance: distance must be non-negative");
  }
  return std::max(d_clr / sigma_clr, 0.0);
}

double reward_comfort(double delta_a, double alpha, double v, const RewardWeights& w) {
  if (std::abs(v) <= w.eps_spd) {
    return 0.0;
  }
  return -(w.lambda_da * std::abs(delta_a) + w.lambda_alpha * std::abs(alpha));
}

double reward_total(const RewardComponents& c, const RewardWeights& w) {
  return w.w_ctr * c.r_ctr + w.w_clr * c.r_clr + w.w_comf * c.r_comf;
}

void SacBcConfig::validate() const {
  if (gamma <= 0.0 || gamma >= 1.0) throw ConfigError("SacBcConfig: gamma must lie in (0,1)");
  if (alpha < 0.0) throw ConfigError("SacBcConfig: alpha must be non-negative");
  if (alpha_cql < 0.0) throw ConfigError("SacBcConfig: alpha_cql must be non-negative");
  if (tau <= 0.0 || tau > 1.0) throw ConfigError("SacBcConfig: tau must lie in (0,1]");
  if (lambda_awac <= 0.0) throw ConfigError("SacBcConfig: lambda_awac must be positive");
  if (awac_clip <= 0.0) throw ConfigError("SacBcConfig: awac_clip must be positive");
  if (critic_hidden < 1) throw ConfigError("SacBcConfig: critic_hidden must be positive");
}

CriticHead CriticHead::init(int d_in, int hidden, int n_actions, std::uint64_t seed) {
  CriticHead c;
  c.d_in = d_in;
  c.hidden = hidden;
  c.n_actions = n_actions;
  c.w1 = c.p.add("w1", hidden, d_in);
  c.b1 = c.p.add("b1", 1, hidden);
  c.w2 = c.p.add("w2", n_actions, hidden);
  c.b2 = c.p.add("b2", 1, n_actions);
  Rng rng(substream_seed(seed, "critic"));
  std::normal_distribution<double> normal(0.0, 0.02);
  for (std::size_t i = 0; i < static_cast<std::size_t>(hidden) * d_in; ++i) {
    c.p.value[c.w1 + i] = normal(rng);
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_actions) * hidden; ++i) {
    c.p.value[c.w2 + i] = normal(rng);
  }
  c.p.zero_grad();
  return c;
}

std::vector<double> CriticHead::forward(const double* h) const {
  std::vector<double> pre(hidden), act(hidden), q(n_actions);
  nn::linear_fwd(p.value.data() + w1, p.value.data() + b1, h, pre.data(), hidden, d_in);
  for (int i = 0; i < hidden; ++i) act[i] = nn::gelu(pre[i]);
  nn::linear_fwd(p.value.data() + w2, p.value.data() + b2, act.data(), q.data(), n_actions, hidden);
  return q;
}

void CriticHead::backward(const double* h, const std::vector<double>& dq) {
  std::vector<double> pre(hidden), act(hidden);
  nn::linear_fwd(p.value.data() + w1, p.value.data() + b1, h, pre.data(), hidden, d_in);
  for (int i = 0; i < hidden; ++i) act[i] = nn::gelu(pre[i]);
  std::vector<double> dact(hidden, 0.0), dpre(hidden);
  nn::linear_bwd(p.value.data() + w2, act.data(), dq.data(), p.grad.data() + w2,
                 p.grad.data() + b2, dact.data(), n_actions, hidden);
  for (int i = 0; i < hidden; ++i) dpre[i] = dact[i] * nn::gelu_grad(pre[i]);
  nn::linear_bwd(p.value.data() + w1, h, dpre.data(), p.grad.data() + w1, p.grad.data() + b1,
                 nullptr, hidden, d_in);
}

TwinCritics TwinCritics::init(int d_in, int hidden, int n_actions, std::uint64_t seed) {
  TwinCritics t;
  t.q1 = CriticHead::init(d_in, hidden, n_actions, substream_seed(seed, "q1"));
  t.q2 = CriticHead::init(d_in, hidden, n_actions, substream_seed(seed, "q2"));
  t.t1 = t.q1;
  t.t2 = t.q2;
  return t;
}

void TwinCritics::polyak(double tau) {
  for (std::size_t i = 0; i < q1.p.value.size(); ++i) {
    t1.p.value[i] = (1.0 - tau) * t1.p.value[i] + tau * q1.p.value[i];
    t2.p.value[i] = (1.0 - tau) * t2.p.value[i] + tau * q2.p.value[i];
  }
}

double TwinCritics::target_drift() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < q1.p.value.size(); ++i) {
    const double d1 = t1.p.value[i] - q1.p.value[i];
    const double d2 = t2.p.value[i] - q2.p.value[i];
    acc += d1 * d1 + d2 * d2;
  }
  return std::sqrt(acc);
}

std::vector<double> TwinCritics::min_q(const double* h) const {
  std::vector<double> a = q1.forward(h);
  const std::vector<double> b = q2.forward(h);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::min(a[i], b[i]);
  return a;
}

std::vector<double> TwinCritics::min_target_q(const double* h) const {
  std::vector<double> a = t1.forward(h);
  const std::vector<double> b = t2.forward(h);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::min(a[i], b[i]);
  return a;
}

double sac_target(double r, const std::vector<double>& pi_next,
                  const std::vector<double>& min_q_next, double gamma, double alpha, bool done) {
  if (pi_next.size() != min_q_next.size() || pi_next.empty()) {
    throw SizeError("sac_target: policy and value sizes disagree");
  }
  double sum_pi = 0.0;
  for (double p : pi_next) sum_pi += p;
  if (std::abs(sum_pi - 1.0) > 1e-6) {
    throw TrainingError("sac_target: policy not normalized");
  }
  if (done) {
    return r;
  }
  double exp_v = 0.0;
  for (std::size_t a = 0; a < pi_next.size(); ++a) {
    if (pi_next[a] > 0.0) {
      exp_v += pi_next[a] * (min_q_next[a] - alpha * std::log(pi_next[a]));
    }
  }
  return r + gamma * exp_v;
}

double critic_loss_value(const std::vector<double>& q1_all, const std::vector<double>& q2_all,
                         int taken, double y, double alpha_cql) {
  const double e1 = q1_all[taken] - y;
  const double e2 = q2_all[taken] - y;
  double loss = 0.5 * (e1 * e1 + e2 * e2);
  loss += alpha_cql * (nn::logsumexp(q1_all.data(), static_cast<int>(q1_all.size())) - q1_all[taken]);
  loss += alpha_cql * (nn::logsumexp(q2_all.data(), static_cast<int>(q2_all.size())) - q2_all[taken]);
  return loss;
}

double actor_loss_value(const std::vector<double>& pi, const std::vector<double>& min_q,
                        double alpha) {
  double ent_term = 0.0, value_term = 0.0;
  for (std::size_t a = 0; a < pi.size(); ++a) {
    if (pi[a] > 0.0) ent_term += pi[a] * std::log(pi[a]);
    value_term += pi[a] * min_q[a];
  }
  return alpha * ent_term - value_term;
}

double bc_loss_value(const std::vector<double>& pi, int expert_action,
                     const std::vector<double>& min_q, double lambda_awac, double clip,
                     double* adv_out, double* weight_out) {
  double baseline = 0.0;
  for (std::size_t a = 0; a < pi.size(); ++a) baseline += pi[a] * min_q[a];
  const double adv = min_q[expert_action] - baseline;
  const double w = std::min(std::exp(adv / lambda_awac), clip);
  if (adv_out != nullptr) *adv_out = adv;
  if (weight_out != nullptr) *weight_out = w;
  return w * (-std::log(std::max(pi[expert_action], 1e-300)));
}

SacBcRecord sacbc_step(ar::Model& policy, ar::AdamState& policy_opt, TwinCritics& critics,
                       ar::AdamState& critic1_opt, ar::AdamState& critic2_opt,
                       const std::vector<TransitionWindow>& batch, const SacBcConfig& cfg) {
  cfg.validate();
  if (batch.empty()) {
    throw SizeError("sacbc_step: empty batch");
  }
  const tok::VocabLayout& layout = policy.cfg.vocab;
  const int v = layout.total();
  const int n_act = layout.n_traj;
  const int traj_off = layout.traj_offset();
  const int d = policy.cfg.d_model;

  SacBcRecord rec;
  long n_bev_targets = 0;
  for (const TransitionWindow& w : batch) {
    rec.n_transitions += static_cast<long>(w.action_local.size());
    for (std::size_t pos = 1; pos < w.seq.size(); ++pos) {
      if (w.seq.modality[pos] == tok::Modality::bev) ++n_bev_targets;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(rec.n_transitions);
  const double bev_w =
      (n_bev_targets > 0 && cfg.lambda_bev != 0.0) ? cfg.lambda_bev / n_bev_targets : 0.0;

  policy.p.zero_grad();
  critics.q1.p.zero_grad();
  critics.q2.p.zero_grad();

  ar::ForwardCache cache;
  std::vector<double> dlogits;
  std::vector<double> dq1(n_act), dq2(n_act);
  double sum_bev_nll = 0.0;

  for (const TransitionWindow& w : batch) {
    if (w.decision_pos.size() != w.action_local.size() + 1) {
      throw SizeError("sacbc_step: decision positions must cover the bootstrap frame");
    }
    const std::vector<double> logits = ar::forward(policy, w.seq, &cache);
    const std::vector<double>& hidden = ar::final_hidden(cache);
    dlogits.assign(logits.size(), 0.0);

    // next-frame policies for targets (no gradient)
    std::vector<std::vector<double>> pis(w.decision_pos.size());
    for (std::size_t k = 0; k < w.decision_pos.size(); ++k) {
      const double* row = logits.data() + static_cast<std::size_t>(w.decision_pos[k]) * v;
      pis[k].assign(row + traj_off, row + traj_off + n_act);
      nn::softmax_inplace(pis[k].data(), n_act);
    }

    for (std::size_t k = 0; k < w.action_local.size(); ++k) {
      const int pos = w.decision_pos[k];
      const double* h_t = hidden.data() + static_cast<std::size_t>(pos) * d;
      const double* h_next = hidden.data() + static_cast<std::size_t>(w.decision_pos[k + 1]) * d;
      const int taken = w.action_local[k];
      const int expert = w.expert_local[k];
      const std::vector<double>& pi = pis[k];

      const std::vector<double> q1_all = critics.q1.forward(h_t);
      const std::vector<double> q2_all = critics.q2.forward(h_t);
      std::vector<double> min_q(n_act);
      for (int a = 0; a < n_act; ++a) min_q[a] = std::min(q1_all[a], q2_all[a]);

      const std::vector<double> min_tq = critics.min_target_q(h_next);
      const double y =
          sac_target(w.reward[k], pis[k + 1], min_tq, cfg.gamma, cfg.alpha, w.done[k] != 0);

      rec.l_critic += critic_loss_value(q1_all, q2_all, taken, y, cfg.alpha_cql) * inv_n;
      rec.l_actor += actor_loss_value(pi, min_q, cfg.alpha) * inv_n;
      double adv = 0.0, awac_w = 0.0;
      rec.l_bc += bc_loss_value(pi, expert, min_q, cfg.lambda_awac, cfg.awac_clip, &adv, &awac_w) *
                  inv_n;
      rec.mean_reward += w.reward[k] * inv_n;
      rec.mean_adv += adv * inv_n;
      rec.mean_w += awac_w * inv_n;

      // critic gradients: MSE + CQL (softmax(q) - onehot on the taken action)
      std::copy(q1_all.begin(), q1_all.end(), dq1.begin());
      std::copy(q2_all.begin(), q2_all.end(), dq2.begin());
      nn::softmax_inplace(dq1.data(), n_act);
      nn::softmax_inplace(dq2.data(), n_act);
      for (int a = 0; a < n_act; ++a) {
        dq1[a] *= cfg.alpha_cql;
        dq2[a] *= cfg.alpha_cql;
      }
      dq1[taken] += (q1_all[taken] - y) - cfg.alpha_cql;
      dq2[taken] += (q2_all[taken] - y) - cfg.alpha_cql;
      for (int a = 0; a < n_act; ++a) {
        dq1[a] *= cfg.lambda_critic * inv_n;
        dq2[a] *= cfg.lambda_critic * inv_n;
      }
      critics.q1.backward(h_t, dq1);
      critics.q2.backward(h_t, dq2);

      // policy gradients on the trajectory-token logits only
      double* drow = dlogits.data() + static_cast<std::size_t>(pos) * v + traj_off;
      // actor: dL/dz = pi * (g - sum pi g), g_a = alpha (ln pi_a + 1) - min_q_a
      double g_mean = 0.0;
      std::vector<double> g(n_act);
      for (int a = 0; a < n_act; ++a) {
        const double lp = std::log(std::max(pi[a], 1e-300));
        g[a] = cfg.alpha * (lp + 1.0) - min_q[a];
        g_mean += pi[a] * g[a];
      }
      for (int a = 0; a < n_act; ++a) {
        drow[a] += cfg.lambda_actor * inv_n * pi[a] * (g[a] - g_mean);
      }
      // value-aware BC: w (pi - onehot_expert), no gradient through w
      for (int a = 0; a < n_act; ++a) {
        drow[a] += cfg.lambda_bc * inv_n * awac_w * (pi[a] - (a == expert ? 1.0 : 0.0));
      }
    }

    // BEV positions stay under next-token cross-entropy supervision
    if (bev_w > 0.0) {
      for (std::size_t pos = 1; pos < w.seq.size(); ++pos) {
        if (w.seq.modality[pos] != tok::Modality::bev) continue;
        const double* row = logits.data() + (pos - 1) * v;
        double mx = row[0];
        for (int i = 1; i < v; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (int i = 0; i < v; ++i) sum += std::exp(row[i] - mx);
        const int target = w.seq.ids[pos];
        sum_bev_nll -= row[target] - mx - std::log(sum);
        double* drow = dlogits.data() + (pos - 1) * v;
        const double inv = 1.0 / sum;
        for (int i = 0; i < v; ++i) drow[i] += bev_w * std::exp(row[i] - mx) * inv;
        drow[target] -= bev_w;
      }
    }

    ar::backward_from_dlogits(policy, w.seq, cache, dlogits);
  }
  rec.l_bev = n_bev_targets > 0 && cfg.lambda_bev != 0.0
                  ? sum_bev_nll / static_cast<double>(n_bev_targets)
                  : 0.0;

  if (!std::isfinite(rec.l_critic) || !std::isfinite(rec.l_actor) || !std::isfinite(rec.l_bc)) {
    throw TrainingError("sacbc_step: non-finite loss");
  }

  ar::TrainConfig copt;
  copt.lr = cfg.critic_lr;
  copt.weight_decay = cfg.weight_decay;
  copt.grad_clip = cfg.grad_clip;
  ar::adamw_update(critics.q1.p, critic1_opt, copt);
  ar::adamw_update(critics.q2.p, critic2_opt, copt);

  ar::TrainConfig popt;
  popt.lr = cfg.policy_lr;
  popt.weight_decay = cfg.weight_decay;
  popt.grad_clip = cfg.grad_clip;
  ar::adamw_update(policy.p, policy_opt, popt);

  critics.polyak(cfg.tau);
  rec.target_drift = critics.target_drift();
  return rec;
}

}  // namespace tokenplan::rl
