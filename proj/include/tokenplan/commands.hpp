#pragma once

#include <string>
#include <vector>

#include "tokenplan/runconfig.hpp"

namespace tokenplan::cmd {

struct DatasetInfo {
  std::string dir;
  std::string config_hash;
  std::uint64_t seed = 0;
  double dt = 0.5;
  bevq::Codebook codebook;
  std::vector<sim::Episode> episodes;
};

// gen-data: deterministic episode files + fitted codebook + manifest.
std::string cmd_gen_data(const cfg::RunConfig& c);
DatasetInfo load_dataset(const std::string& dir);

// Windowed training sequences; holdout episodes go to the tail split.
struct BcWindows {
  std::vector<ar::TokenSequence> train;
  std::vector<ar::TokenSequence> holdout;
  std::vector<int> train_episodes;
  std::vector<int> holdout_episodes;
};
BcWindows build_bc_windows(const DatasetInfo& ds, const cfg::RunConfig& c);

std::vector<rl::TransitionWindow> build_transition_windows(const DatasetInfo& ds,
                                                           const cfg::RunConfig& c);

// Stage-I behavior cloning with the scheduled-sampling ramp. Epoch-granular
// state makes checkpoint resume exact.
struct TrainState {
  ar::Model model;
  ar::AdamState opt;
  long completed_epochs = 0;
};
TrainState train_bc_epochs(const cfg::RunConfig& c, const DatasetInfo& ds, TrainState state,
                           int until_epoch, std::vector<ar::StepRecord>* log = nullptr);
ar::Model train_bc_model(const cfg::RunConfig& c, const DatasetInfo& ds,
                         std::vector<ar::StepRecord>* log = nullptr);
std::string cmd_train_bc(const cfg::RunConfig& c, const std::string& dataset_dir,
                         const std::string& out_ckpt);

// Stage-II offline SAC-BC fine-tuning starting from a stage-I model.
ar::Model train_sacbc_model(const cfg::RunConfig& c, const DatasetInfo& ds, ar::Model model,
                            std::vector<rl::SacBcRecord>* log = nullptr);
std::string cmd_train_sacbc(const cfg::RunConfig& c, const std::string& dataset_dir,
                            const std::string& ckpt_in, const std::string& out_ckpt);

// Open-loop metrics for a model over the holdout episodes.
std::vector<sim::OpenLoopRow> open_loop_model_eval(const cfg::RunConfig& c, const DatasetInfo& ds,
                                                   const ar::Model& model, bool holdout_only);

struct ClosedLoopAggregate {
  std::vector<sim::ClosedLoopResult> per_scene;
  sim::ClosedLoopResult mean;
};
// Closed-loop evaluation over freshly built scenes; posttuned=true refines the
// generated short-horizon plan before executing its first step.
ClosedLoopAggregate closed_loop_model_eval(const cfg::RunConfig& c, const DatasetInfo& ds,
                                           const ar::Model& model, bool posttuned);

std::string cmd_eval(const cfg::RunConfig& c, const std::string& dataset_dir,
                     const std::string& ckpt, const std::string& mode, bool posttune,
                     const std::string& out_csv);

std::string cmd_tok_bench(const cfg::RunConfig& c, const std::string& out_csv);

std::string cmd_posttune(const cfg::RunConfig& c, const std::string& traj_in,
                         std::uint64_t scene_seed, const std::string& difficulty,
                         const std::string& out_csv);

// Expert pose windows on synthetic scenes, for tokenizer benchmarking.
std::vector<std::vector<kin::EgoState>> bench_windows(const cfg::RunConfig& c, int window_len);

}  // namespace tokenplan::cmd
