#include "tokenplan/runconfig.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace tokenplan::cfg {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError("config section '" + where + "' must be an object");
  }
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw ConfigError("unknown config key '" + where + "." + item.key() + "'");
    }
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    j.at(key).get_to(out);
  }
}

}  // namespace

RunConfig default_config() { return RunConfig{}; }

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig c;
  check_keys(j, {"seed", "out_dir", "jobs", "sim", "bev", "tokenizer", "model", "train", "sacbc",
                 "rewards", "smoother", "eval", "bench"},
             "root");
  maybe(j, "seed", c.seed);
  maybe(j, "out_dir", c.out_dir);
  maybe(j, "jobs", c.jobs);

  if (j.contains("sim")) {
    const json& s = j["sim"];
    check_keys(s, {"n_episodes", "max_frames", "dt", "difficulties"}, "sim");
    maybe(s, "n_episodes", c.sim.n_episodes);
    maybe(s, "max_frames", c.sim.max_frames);
    maybe(s, "dt", c.sim.dt);
    maybe(s, "difficulties", c.sim.difficulties);
  }
  if (j.contains("bev")) {
    const json& s = j["bev"];
    check_keys(s, {"grid", "resolution", "lane_band", "patch", "codebook_k", "kmeans_iters",
                   "fit_subsample"},
               "bev");
    maybe(s, "grid", c.bev.grid);
    maybe(s, "resolution", c.bev.resolution);
    maybe(s, "lane_band", c.bev.lane_band);
    maybe(s, "patch", c.bev.patch);
    maybe(s, "codebook_k", c.bev.codebook_k);
    maybe(s, "kmeans_iters", c.bev.kmeans_iters);
    maybe(s, "fit_subsample", c.bev.fit_subsample);
  }
  if (j.contains("tokenizer")) {
    const json& s = j["tokenizer"];
    check_keys(s, {"ka_variant", "eps"}, "tokenizer");
    maybe(s, "ka_variant", c.tokenizer.ka_variant);
    maybe(s, "eps", c.tokenizer.eps);
  }
  if (j.contains("model")) {
    const json& s = j["model"];
    check_keys(s, {"d_model", "n_layers", "n_heads", "n_experts", "top_k", "d_ff",
                   "history_frames", "max_seq_len", "aux_load_balance", "use_bev_tokens"},
               "model");
    maybe(s, "d_model", c.model.d_model);
    maybe(s, "n_layers", c.model.n_layers);
    maybe(s, "n_heads", c.model.n_heads);
    maybe(s, "n_experts", c.model.n_experts);
    maybe(s, "top_k", c.model.top_k);
    maybe(s, "d_ff", c.model.d_ff);
    maybe(s, "history_frames", c.model.history_frames);
    maybe(s, "max_seq_len", c.model.max_seq_len);
    maybe(s, "aux_load_balance", c.model.aux_load_balance);
    maybe(s, "use_bev_tokens", c.model.use_bev_tokens);
  }
  if (j.contains("train")) {
    const json& s = j["train"];
    check_keys(s, {"lambda_traj", "lambda_bev", "lr", "weight_decay", "grad_clip", "batch_size",
                   "epochs", "bc_epochs", "ramp_epochs", "p_max", "n_step", "window_stride",
                   "holdout_fraction", "max_steps_per_epoch", "resume_from"},
               "train");
    maybe(s, "lambda_traj", c.train.lambda_traj);
    maybe(s, "lambda_bev", c.train.lambda_bev);
    maybe(s, "lr", c.train.lr);
    maybe(s, "weight_decay", c.train.weight_decay);
    maybe(s, "grad_clip", c.train.grad_clip);
    maybe(s, "batch_size", c.train.batch_size);
    maybe(s, "epochs", c.train.epochs);
    maybe(s, "bc_epochs", c.train.bc_epochs);
    maybe(s, "ramp_epochs", c.train.ramp_epochs);
    maybe(s, "p_max", c.train.p_max);
    maybe(s, "n_step", c.train.n_step);
    maybe(s, "window_stride", c.train.window_stride);
    maybe(s, "holdout_fraction", c.train.holdout_fraction);
    maybe(s, "max_steps_per_epoch", c.train.max_steps_per_epoch);
    maybe(s, "resume_from", c.train.resume_from);
  }
  if (j.contains("sacbc")) {
    const json& s = j["sacbc"];
    check_keys(s, {"gamma", "alpha", "alpha_cql", "lambda_critic", "lambda_actor", "lambda_bc",
                   "lambda_awac", "awac_clip", "tau", "lambda_bev", "critic_hidden", "critic_lr",
                   "policy_lr", "weight_decay", "grad_clip", "steps", "batch_windows"},
               "sacbc");
    maybe(s, "gamma", c.sacbc.gamma);
    maybe(s, "alpha", c.sacbc.alpha);
    maybe(s, "alpha_cql", c.sacbc.alpha_cql);
    maybe(s, "lambda_critic", c.sacbc.lambda_critic);
    maybe(s, "lambda_actor", c.sacbc.lambda_actor);
    maybe(s, "lambda_bc", c.sacbc.lambda_bc);
    maybe(s, "lambda_awac", c.sacbc.lambda_awac);
    maybe(s, "awac_clip", c.sacbc.awac_clip);
    maybe(s, "tau", c.sacbc.tau);
    maybe(s, "lambda_bev", c.sacbc.lambda_bev);
    maybe(s, "critic_hidden", c.sacbc.critic_hidden);
    maybe(s, "critic_lr", c.sacbc.critic_lr);
    maybe(s, "policy_lr", c.sacbc.policy_lr);
    maybe(s, "weight_decay", c.sacbc.weight_decay);
    maybe(s, "grad_clip", c.sacbc.grad_clip);
    maybe(s, "steps", c.sacbc.steps);
    maybe(s, "batch_windows", c.sacbc.batch_windows);
  }
  if (j.contains("rewards")) {
    const json& s = j["rewards"];
    check_keys(s, {"w_ctr", "w_clr", "w_comf", "sigma_ctr", "sigma_clr", "lambda_da",
                   "lambda_alpha", "eps_spd"},
               "rewards");
    maybe(s, "w_ctr", c.rewards.w_ctr);
    maybe(s, "w_clr", c.rewards.w_clr);
    maybe(s, "w_comf", c.rewards.w_comf);
    maybe(s, "sigma_ctr", c.rewards.sigma_ctr);
    maybe(s, "sigma_clr", c.rewards.sigma_clr);
    maybe(s, "lambda_da", c.rewards.lambda_da);
    maybe(s, "lambda_alpha", c.rewards.lambda_alpha);
    maybe(s, "eps_spd", c.rewards.eps_spd);
  }
  if (j.contains("smoother")) {
    const json& s = j["smoother"];
    check_keys(s, {"w_l1", "w_l2", "w_s1", "w_s2", "yaw_rate_limit", "ascent_step",
                   "ascent_iters"},
               "smoother");
    maybe(s, "w_l1", c.smoother.w_l1);
    maybe(s, "w_l2", c.smoother.w_l2);
    maybe(s, "w_s1", c.smoother.w_s1);
    maybe(s, "w_s2", c.smoother.w_s2);
    maybe(s, "yaw_rate_limit", c.smoother.yaw_rate_limit);
    maybe(s, "ascent_step", c.smoother.ascent_step);
    maybe(s, "ascent_iters", c.smoother.ascent_iters);
  }
  if (j.contains("eval")) {
    const json& s = j["eval"];
    check_keys(s, {"horizons_s", "n_scenes", "closed_horizon_steps", "ttc_threshold",
                   "comfort_da", "comfort_alpha", "plan_frames", "anchor_stride"},
               "eval");
    maybe(s, "horizons_s", c.eval.horizons_s);
    maybe(s, "n_scenes", c.eval.n_scenes);
    maybe(s, "closed_horizon_steps", c.eval.closed_horizon_steps);
    maybe(s, "ttc_threshold", c.eval.ttc_threshold);
    maybe(s, "comfort_da", c.eval.comfort_da);
    maybe(s, "comfort_alpha", c.eval.comfort_alpha);
    maybe(s, "plan_frames", c.eval.plan_frames);
    maybe(s, "anchor_stride", c.eval.anchor_stride);
  }
  if (j.contains("bench")) {
    const json& s = j["bench"];
    check_keys(s, {"schemes", "horizons_s", "ci_levels", "n_windows"}, "bench");
    maybe(s, "schemes", c.bench.schemes);
    maybe(s, "horizons_s", c.bench.horizons_s);
    maybe(s, "ci_levels", c.bench.ci_levels);
    maybe(s, "n_windows", c.bench.n_windows);
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw IoError("load_config: cannot open " + path);
  }
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json_text(ss.str());
}

std::string config_to_json_text(const RunConfig& c) {
  const json j = {
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"jobs", c.jobs},
      {"sim",
       {{"n_episodes", c.sim.n_episodes},
        {"max_frames", c.sim.max_frames},
        {"dt", c.sim.dt},
        {"difficulties", c.sim.difficulties}}},
      {"bev",
       {{"grid", c.bev.grid},
        {"resolution", c.bev.resolution},
        {"lane_band", c.bev.lane_band},
        {"patch", c.bev.patch},
        {"codebook_k", c.bev.codebook_k},
        {"kmeans_iters", c.bev.kmeans_iters},
        {"fit_subsample", c.bev.fit_subsample}}},
      {"tokenizer", {{"ka_variant", c.tokenizer.ka_variant}, {"eps", c.tokenizer.eps}}},
      {"model",
       {{"d_model", c.model.d_model},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"n_experts", c.model.n_experts},
        {"top_k", c.model.top_k},
        {"d_ff", c.model.d_ff},
        {"history_frames", c.model.history_frames},
        {"max_seq_len", c.model.max_seq_len},
        {"aux_load_balance", c.model.aux_load_balance},
        {"use_bev_tokens", c.model.use_bev_tokens}}},
      {"train",
       {{"lambda_traj", c.train.lambda_traj},
        {"lambda_bev", c.train.lambda_bev},
        {"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"grad_clip", c.train.grad_clip},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"bc_epochs", c.train.bc_epochs},
        {"ramp_epochs", c.train.ramp_epochs},
        {"p_max", c.train.p_max},
        {"n_step", c.train.n_step},
        {"window_stride", c.train.window_stride},
        {"holdout_fraction", c.train.holdout_fraction},
        {"max_steps_per_epoch", c.train.max_steps_per_epoch},
        {"resume_from", c.train.resume_from}}},
      {"sacbc",
       {{"gamma", c.sacbc.gamma},
        {"alpha", c.sacbc.alpha},
        {"alpha_cql", c.sacbc.alpha_cql},
        {"lambda_critic", c.sacbc.lambda_critic},
        {"lambda_actor", c.sacbc.lambda_actor},
        {"lambda_bc", c.sacbc.lambda_bc},
        {"lambda_awac", c.sacbc.lambda_awac},
        {"awac_clip", c.sacbc.awac_clip},
        {"tau", c.sacbc.tau},
        {"lambda_bev", c.sacbc.lambda_bev},
        {"critic_hidden", c.sacbc.critic_hidden},
        {"critic_lr", c.sacbc.critic_lr},
        {"policy_lr", c.sacbc.policy_lr},
        {"weight_decay", c.sacbc.weight_decay},
        {"grad_clip", c.sacbc.grad_clip},
        {"steps", c.sacbc.steps},
        {"batch_windows", c.sacbc.batch_windows}}},
      {"rewards",
       {{"w_ctr", c.rewards.w_ctr},
        {"w_clr", c.rewards.w_clr},
        {"w_comf", c.rewards.w_comf},
        {"sigma_ctr", c.rewards.sigma_ctr},
        {"sigma_clr", c.rewards.sigma_clr},
        {"lambda_da", c.rewards.lambda_da},
        {"lambda_alpha", c.rewards.lambda_alpha},
        {"eps_spd", c.rewards.eps_spd}}},
      {"smoother",
       {{"w_l1", c.smoother.w_l1},
        {"w_l2", c.smoother.w_l2},
        {"w_s1", c.smoother.w_s1},
        {"w_s2", c.smoother.w_s2},
        {"yaw_rate_limit", c.smoother.yaw_rate_limit},
        {"ascent_step", c.smoother.ascent_step},
        {"ascent_iters", c.smoother.ascent_iters}}},
      {"eval",
       {{"horizons_s", c.eval.horizons_s},
        {"n_scenes", c.eval.n_scenes},
        {"closed_horizon_steps", c.eval.closed_horizon_steps},
        {"ttc_threshold", c.eval.ttc_threshold},
        {"comfort_da", c.eval.comfort_da},
        {"comfort_alpha", c.eval.comfort_alpha},
        {"plan_frames", c.eval.plan_frames},
        {"anchor_stride", c.eval.anchor_stride}}},
      {"bench",
       {{"schemes", c.bench.schemes},
        {"horizons_s", c.bench.horizons_s},
        {"ci_levels", c.bench.ci_levels},
        {"n_windows", c.bench.n_windows}}},
  };
  return j.dump(2);
}

std::string config_hash(const RunConfig& c) {
  // out_dir and jobs are execution environment, not semantics: two runs that
  // differ only there must produce byte-identical artifacts
  RunConfig canon = c;
  canon.out_dir.clear();
  canon.jobs = 1;
  const std::uint64_t h = fnv1a64(config_to_json_text(canon));
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

tok::KaGridConfig ka_grid(const RunConfig& c) {
  if (c.tokenizer.ka_variant.size() != 1) {
    throw ConfigError("tokenizer.ka_variant must be one of A,B,C,D");
  }
  return tok::ka_fb_config(c.tokenizer.ka_variant[0]);
}

int bev_tokens_per_frame(const RunConfig& c) {
  if (!c.model.use_bev_tokens) return 0;
  if (c.bev.patch <= 0 || c.bev.grid % c.bev.patch != 0) {
    throw ConfigError("bev.grid must be divisible by bev.patch");
  }
  const int side = c.bev.grid / c.bev.patch;
  return side * side;
}

tok::VocabLayout vocab_layout(const RunConfig& c) {
  tok::VocabLayout layout;
  layout.n_command = sim::kNumCommands;
  layout.n_bev = c.model.use_bev_tokens ? c.bev.codebook_k : 0;
  layout.n_traj = static_cast<int>(ka_grid(c).codebook_size());
  return layout;
}

ar::ModelConfig model_config(const RunConfig& c) {
  ar::ModelConfig m;
  m.d_model = c.model.d_model;
  m.n_layers = c.model.n_layers;
  m.n_heads = c.model.n_heads;
  m.n_experts = c.model.n_experts;
  m.top_k = c.model.top_k;
  m.d_ff = c.model.d_ff;
  m.vocab = vocab_layout(c);
  m.history_frames = c.model.history_frames;
  m.bev_tokens_per_frame = bev_tokens_per_frame(c);
  m.max_seq_len = c.model.max_seq_len;
  m.aux_load_balance = c.model.aux_load_balance;
  m.seed = c.seed;
  m.validate();
  return m;
}

ar::TrainConfig train_config(const RunConfig& c) {
  ar::TrainConfig t;
  t.lambda_traj = c.train.lambda_traj;
  t.lambda_bev = c.train.lambda_bev;
  t.lr = c.train.lr;
  t.weight_decay = c.train.weight_decay;
  t.grad_clip = c.train.grad_clip;
  t.batch_size = c.train.batch_size;
  t.epochs = c.train.epochs;
  t.bc_epochs = c.train.bc_epochs;
  t.ramp_epochs = c.train.ramp_epochs;
  t.p_max = c.train.p_max;
  t.n_step = c.train.n_step;
  return t;
}

rl::SacBcConfig sacbc_config(const RunConfig& c) {
  rl::SacBcConfig s;
  s.gamma = c.sacbc.gamma;
  s.alpha = c.sacbc.alpha;
  s.alpha_cql = c.sacbc.alpha_cql;
  s.lambda_critic = c.sacbc.lambda_critic;
  s.lambda_actor = c.sacbc.lambda_actor;
  s.lambda_bc = c.sacbc.lambda_bc;
  s.lambda_awac = c.sacbc.lambda_awac;
  s.awac_clip = c.sacbc.awac_clip;
  s.tau = c.sacbc.tau;
  s.lambda_bev = c.sacbc.lambda_bev;
  s.critic_hidden = c.sacbc.critic_hidden;
  s.critic_lr = c.sacbc.critic_lr;
  s.policy_lr = c.sacbc.policy_lr;
  s.weight_decay = c.sacbc.weight_decay;
  s.grad_clip = c.sacbc.grad_clip;
  s.validate();
  return s;
}

rl::RewardWeights reward_weights(const RunConfig& c) {
  rl::RewardWeights w;
  w.w_ctr = c.rewards.w_ctr;
  w.w_clr = c.rewards.w_clr;
  w.w_comf = c.rewards.w_comf;
  w.sigma_ctr = c.rewards.sigma_ctr;
  w.sigma_clr = c.rewards.sigma_clr;
  w.lambda_da = c.rewards.lambda_da;
  w.lambda_alpha = c.rewards.lambda_alpha;
  w.eps_spd = c.rewards.eps_spd;
  return w;
}

post::SmootherWeights smoother_weights(const RunConfig& c) {
  post::SmootherWeights w;
  w.w_l1 = c.smoother.w_l1;
  w.w_l2 = c.smoother.w_l2;
  w.w_s1 = c.smoother.w_s1;
  w.w_s2 = c.smoother.w_s2;
  w.yaw_rate_limit = c.smoother.yaw_rate_limit;
  w.ascent_step = c.smoother.ascent_step;
  w.ascent_iters = c.smoother.ascent_iters;
  return w;
}

sim::BevParams bev_params(const RunConfig& c) {
  sim::BevParams b;
  b.grid = c.bev.grid;
  b.resolution = c.bev.resolution;
  b.lane_band = c.bev.lane_band;
  return b;
}

sim::ClosedLoopParams closed_loop_params(const RunConfig& c) {
  sim::ClosedLoopParams p;
  p.horizon_steps = c.eval.closed_horizon_steps;
  p.dt = c.sim.dt;
  p.ttc_threshold = c.eval.ttc_threshold;
  p.comfort_da = c.eval.comfort_da;
  p.comfort_alpha = c.eval.comfort_alpha;
  return p;
}

}  // namespace tokenplan::cfg
