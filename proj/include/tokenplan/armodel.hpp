#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokenplan/common.hpp"
#include "tokenplan/tokenize.hpp"

namespace tokenplan::ar {

using tok::Modality;
using tok::VocabLayout;

// Interleaved global-vocabulary token stream: one command token, then per
// frame M BEV tokens followed by one trajectory token. A trailing BEV-only
// partial frame is allowed for decision-point contexts.
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<Modality> modality;
  std::vector<std::int32_t> frame;  // -1 for the command position

  std::size_t size() const { return ids.size(); }
  void push(std::int32_t id, Modality m, std::int32_t f);
  void validate(const VocabLayout& layout, int bev_per_frame, bool allow_partial = false) const;
};

struct FrameTokens {
  std::vector<int> bev_local;
  int traj_local = -1;
};

TokenSequence assemble_sequence(const VocabLayout& layout, int command_local,
                                const std::vector<FrameTokens>& frames);
// Context ending after the current frame's BEV tokens (the policy decision
// point for that frame's trajectory token).
TokenSequence assemble_context(const VocabLayout& layout, int command_local,
                               const std::vector<FrameTokens>& past_frames,
                               const std::vector<int>& current_bev);

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_experts = 2;
  int top_k = 1;
  int d_ff = 128;
  VocabLayout vocab;
  int history_frames = 2;
  int bev_tokens_per_frame = 16;
  int max_seq_len = 512;
  double aux_load_balance = 0.0;
  std::uint64_t seed = 0;

  int frame_tokens() const { return bev_tokens_per_frame + 1; }
  void validate() const;
};

// One flat buffer per model; tensors are named views used for counting,
// checkpointing and gradient checks.
struct TensorView {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct ParamStore {
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<TensorView> tensors;

  std::size_t add(const std::string& name, int rows, int cols);
  std::size_t size() const { return value.size(); }
  void zero_grad();
  double grad_global_norm() const;
};

struct Model {
  struct ExpertOffsets {
    std::size_t w1, b1, w2, b2;
  };
  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    std::size_t ln2_g, ln2_b, w_gate, b_gate;
    std::vector<ExpertOffsets> experts;
  };

  ModelConfig cfg;
  ParamStore p;
  std::size_t wte = 0, wpe = 0, wtype = 0, lnf_g = 0, lnf_b = 0, w_out = 0;
  std::vector<LayerOffsets> layers;

  std::size_t n_params() const { return p.size(); }
};

// Deterministic initialization given (config, seed).
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

// Activation tape for one sequence; reused across calls of equal shape.
struct ForwardCache {
  int seq_len = 0;
  std::vector<double> x0;  // embeddings, T x d
  struct LayerCache {
    std::vector<double> ln1_out, ln1_mean, ln1_rstd;
    std::vector<double> qkv;        // T x 3d
    std::vector<double> att_probs;  // heads x T x T
    std::vector<double> att_ctx;    // T x d (heads concatenated)
    std::vector<double> res1;       // T x d, after attention residual
    std::vector<double> ln2_out, ln2_mean, ln2_rstd;
    std::vector<double> gate_logits, gate_probs;  // T x E
    std::vector<int> sel;                          // T x top_k
    std::vector<double> sel_w;                     // T x top_k (renormalized)
    std::vector<double> expert_pre, expert_act;    // T x top_k x ff
    std::vector<double> expert_out;                // T x top_k x d
    std::vector<double> res2;                      // T x d, layer output
  };
  std::vector<LayerCache> layers;
  std::vector<double> lnf_out, lnf_mean, lnf_rstd;  // T x d
};

// Strictly causal forward pass over the unified vocabulary. Returns logits
// as a T x V_all row-major matrix; fills the cache when given.
std::vector<double> forward(const Model& model, const TokenSequence& seq,
                            ForwardCache* cache = nullptr);

// Final-layer-norm hidden states (T x d) recomputed from a filled cache.
const std::vector<double>& final_hidden(const ForwardCache& cache);

// Accumulate parameter gradients for an upstream dL/dlogits.
void backward_from_dlogits(Model& model, const TokenSequence& seq, const ForwardCache& cache,
                           const std::vector<double>& dlogits);

// Apply one layer's MoE feed-forward block to a single hidden vector.
std::vector<double> moe_ffn(const Model& model, int layer, const std::vector<double>& h);

struct LossBreakdown {
  double total = 0.0;
  double l_bev = 0.0;
  double l_traj = 0.0;
  long n_bev = 0;
  long n_traj = 0;
};

// Weighted next-token cross-entropy with per-token normalization inside each
// head. Scheduled sampling replaces context tokens (never the command) with
// the model's greedy predictions independently per position with probability
// p_mix before the supervised pass; targets stay the ground-truth ids.
LossBreakdown joint_loss(Model& model, const std::vector<TokenSequence>& batch,
                         double lambda_traj, double lambda_bev, double p_mix, Rng& rng,
                         bool accumulate_grad);

struct TrainConfig {
  double lambda_traj = 1.0;
  double lambda_bev = 0.1;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  int epochs = 16;
  int bc_epochs = 4;      // pure teacher forcing before the sampling ramp
  int ramp_epochs = 12;   // linear p ramp length after bc_epochs
  double p_max = 1.0;
  int n_step = 3;  // future frames unrolled per training window
};

// Scheduled-sampling ratio for an epoch: 0 during pure BC, then a linear,
// monotone non-decreasing ramp to p_max.
double scheduled_p(const TrainConfig& cfg, int epoch);

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

struct StepRecord {
  double total = 0.0;
  double l_bev = 0.0;
  double l_traj = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
  double p_mix = 0.0;
};

// One AdamW update with global-norm gradient clipping.
StepRecord train_step(Model& model, AdamState& opt, const std::vector<TokenSequence>& batch,
                      const TrainConfig& cfg, double p_mix, Rng& rng);

// Clip + AdamW over an explicit store (shared by critics and the policy).
double adamw_update(ParamStore& p, AdamState& opt, const TrainConfig& cfg);

enum class GenMode { greedy, sample };

// Per future frame, M BEV tokens then one trajectory token, each sampled
// inside its reserved vocabulary range.
std::vector<FrameTokens> generate(const Model& model, const TokenSequence& context,
                                  int horizon_frames, GenMode mode, double temperature, Rng* rng);

// Max relative error between analytic and central finite-difference gradients
// over up to max_checked parameters (deterministic stride subsample).
double grad_check(Model& model, const std::vector<TokenSequence>& batch, double epsilon,
                  std::size_t max_checked = 10000);

void save_checkpoint(const std::string& path, const Model& model, const AdamState& opt,
                     std::uint64_t seed, long step_count, const std::string& config_hash);
struct Checkpoint {
  Model model;
  AdamState opt;
  std::uint64_t seed = 0;
  long step_count = 0;
  std::string config_hash;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tokenplan::ar
