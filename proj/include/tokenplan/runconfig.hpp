#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokenplan/armodel.hpp"
#include "tokenplan/posttune.hpp"
#include "tokenplan/rl.hpp"
#include "tokenplan/simworld.hpp"
#include "tokenplan/tokenize.hpp"

namespace tokenplan::cfg {

// Nested run configuration. Every field has a default; unknown keys in a
// config file are hard errors; the canonical hash is recorded in all outputs.
struct RunConfig {
  std::uint64_t seed = 17;
  std::string out_dir = "out";
  int jobs = 1;

  struct Sim {
    int n_episodes = 200;
    int max_frames = 44;
    double dt = 0.5;
    std::vector<std::string> difficulties = {"easy", "medium", "hard"};
  } sim;

  struct Bev {
    int grid = 64;
    double resolution = 0.5;
    double lane_band = 0.3;
    int patch = 8;
    int codebook_k = 128;
    int kmeans_iters = 25;
    int fit_subsample = 4000;
  } bev;

  struct Tokenizer {
    std::string ka_variant = "A";
    double eps = 0.1;
  } tokenizer;

  struct Model {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int n_experts = 2;
    int top_k = 1;
    int d_ff = 128;
    int history_frames = 2;
    int max_seq_len = 1024;
    double aux_load_balance = 0.0;
    bool use_bev_tokens = true;  // false: trajectory-only ablation
  } model;

  struct Train {
    double lambda_traj = 1.0;
    double lambda_bev = 0.1;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double grad_clip = 1.0;
    int batch_size = 8;
    int epochs = 16;
    int bc_epochs = 4;
    int ramp_epochs = 12;
    double p_max = 1.0;
    int n_step = 3;
    int window_stride = 2;
    double holdout_fraction = 0.2;
    int max_steps_per_epoch = 0;  // 0: no cap
    std::string resume_from;
  } train;

  struct Sacbc {
    double gamma = 0.95;
    double alpha = 0.05;
    double alpha_cql = 0.5;
    double lambda_critic = 1.0;
    double lambda_actor = 1.0;
    double lambda_bc = 1.0;
    double lambda_awac = 1.0;
    double awac_clip = 20.0;
    double tau = 0.01;
    double lambda_bev = 0.1;
    int critic_hidden = 64;
    double critic_lr = 1e-3;
    double policy_lr = 1e-4;
    double weight_decay = 1e-4;
    double grad_clip = 1.0;
    int steps = 300;
    int batch_windows = 4;
  } sacbc;

  struct Rewards {
    double w_ctr = 1.0;
    double w_clr = 1.0;
    double w_comf = 1.0;
    double sigma_ctr = 1.5;
    double sigma_clr = 3.0;
    double lambda_da = 0.1;
    double lambda_alpha = 0.1;
    double eps_spd = 0.3;
  } rewards;

  struct Smoother {
    double w_l1 = 0.5;
    double w_l2 = 2.0;
    double w_s1 = 0.0;
    double w_s2 = 1.0;
    double yaw_rate_limit = 0.3;
    double ascent_step = 0.25;
    int ascent_iters = 50;
  } smoother;

  struct Eval {
    std::vector<double> horizons_s = {1.0, 2.0, 3.0, 4.0};
    int n_scenes = 20;
    int closed_horizon_steps = 40;
    double ttc_threshold = 2.0;
    double comfort_da = 0.6;
    double comfort_alpha = 0.4;
    int plan_frames = 3;  // replan horizon for post-tuned execution
    int anchor_stride = 10;
  } eval;

  struct Bench {
    std::vector<std::string> schemes = {"identity", "fb-ka-A", "fb-ka-B", "fb-ka-C", "fb-ka-D",
                                        "fb-xy-A",  "fb-xy-B", "fb-xy-C", "fb-xy-D",
                                        "dct-xy-A", "dct-xy-B", "dct-ka-C", "dct-ka-D"};
    std::vector<double> horizons_s = {1.0, 2.0, 3.0, 4.0};
    std::vector<double> ci_levels = {0.95, 0.99};
    int n_windows = 400;
  } bench;
};

RunConfig default_config();
RunConfig load_config(const std::string& path);
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& c);
// FNV-1a of the canonical serialization, as 16 hex digits.
std::string config_hash(const RunConfig& c);

// Derived component configurations.
tok::KaGridConfig ka_grid(const RunConfig& c);
tok::VocabLayout vocab_layout(const RunConfig& c);
ar::ModelConfig model_config(const RunConfig& c);
ar::TrainConfig train_config(const RunConfig& c);
rl::SacBcConfig sacbc_config(const RunConfig& c);
rl::RewardWeights reward_weights(const RunConfig& c);
post::SmootherWeights smoother_weights(const RunConfig& c);
sim::BevParams bev_params(const RunConfig& c);
sim::ClosedLoopParams closed_loop_params(const RunConfig& c);
int bev_tokens_per_frame(const RunConfig& c);

}  // namespace tokenplan::cfg
