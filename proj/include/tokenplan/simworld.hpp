#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tokenplan/armodel.hpp"
#include "tokenplan/bevq.hpp"
#include "tokenplan/geometry.hpp"
#include "tokenplan/kinematics.hpp"
#include "tokenplan/rl.hpp"

namespace tokenplan::sim {

enum class Difficulty { straight, easy, medium, hard };
Difficulty difficulty_from_string(const std::string& s);
std::string to_string(Difficulty d);

constexpr int kNumCommands = 4;  // follow, turn-left, turn-right, stop
constexpr int kNumBevClasses = 5;  // background, drivable, lane band, obstacle, ego
constexpr double kEgoHalfLen = 2.25;
constexpr double kEgoHalfWid = 0.95;

struct Obstacle {
  geom::OrientedRect rect;
};

// Constant-velocity rectangle; position advances linearly with time.
struct Agent {
  geom::Vec2 pos0;
  double yaw = 0.0;
  geom::Vec2 vel;
  double half_len = 2.25;
  double half_wid = 0.95;

  geom::OrientedRect rect_at(double time) const;
};

struct Scene {
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::easy;
  double lane_half_width = 2.5;
  std::vector<geom::Vec2> centerline;  // ~1 m vertex spacing
  std::vector<double> headings;        // per vertex
  double route_length = 0.0;
  std::vector<Obstacle> obstacles;
  std::vector<Agent> agents;
  int command = 0;

  geom::Polyline route() const { return geom::Polyline(centerline); }
  geom::OrientedRect ego_rect(const kin::EgoState& ego) const;
};

// Deterministic given the seed; difficulty controls curvature range,
// obstacle density and agent count.
Scene build_scene(std::uint64_t seed, Difficulty difficulty);

struct ExpertParams {
  double cruise_speed = 7.0;
  double lookahead_base = 4.0;
  double lookahead_gain = 1.0;  // seconds of travel added to the base
  double max_kappa = 0.22;      // matches the default curvature grid range
  double max_accel = 1.3;
  double max_decel = 1.3;
  double idm_min_gap = 6.0;
  double idm_time_headway = 1.5;
  double idm_decel = 2.0;
  double lat_accel_max = 1.8;   // curve speed cap
};

struct ExpertAction {
  kin::KaPoint ka;
  bool off_corridor = false;
};

// Pure-pursuit steering toward a lookahead point plus IDM-style longitudinal
// control, bounded by the trajectory grid ranges.
ExpertAction expert_policy(const Scene& scene, const kin::EgoState& state, double v, double time,
                           double dt, const ExpertParams& params = {});

struct BevParams {
  int grid = 64;
  double resolution = 0.5;
  double lane_band = 0.3;  // half width of the lane-center band, meters
};

// Ego-centric, ego-aligned semantic raster. Row index grows along the ego
// heading, column index to the ego's left.
bevq::BevGrid rasterize_bev(const Scene& scene, const kin::EgoState& ego, double time,
                            const BevParams& params = {});

// (d_ctr, d_clr): centerline distance of the ego center and the nearest
// rectangle gap, capped at clearance_cap.
std::pair<double, double> distances(const Scene& scene, const kin::EgoState& ego, double time,
                                    double clearance_cap = 16.0);

struct WorldState {
  kin::EgoState ego;
  double v = 0.0;
  double time = 0.0;
};

struct StepFlags {
  bool collision = false;
  bool offroad = false;
};

WorldState step(const Scene& scene, const WorldState& ws, const kin::KaPoint& action, double dt,
                StepFlags* flags);

// Per-frame reward components for a pose sequence: geometry terms from the
// scene, comfort terms from finite differences (zero where undefined).
std::vector<rl::RewardComponents> frame_rewards(const Scene& scene,
                                                const std::vector<kin::EgoState>& states,
                                                double dt, const rl::RewardWeights& weights,
                                                double clearance_cap = 16.0);

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeFrame {
  kin::EgoState pose;
  double v = 0.0;
  rl::RewardComponents rewards;
  double r_total = 0.0;
  bevq::BevGrid bev;
};

struct Episode {
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::easy;
  int command = 0;
  double dt = kin::kDefaultDt;
  std::vector<EpisodeFrame> frames;
};

Episode run_expert_episode(const Scene& scene, int max_frames, double dt,
                           const rl::RewardWeights& weights, const BevParams& bev_params,
                           const ExpertParams& expert_params = {});

void save_episode(const Episode& ep, const std::string& path, const std::string& config_hash);
Episode load_episode(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics

// PDMS = NC * DAC * (5 EP + 5 TTC + 2 C) / 12, all inputs in [0, 1].
double pdms(double nc, double dac, double ttc, double c, double ep);

struct ClosedLoopParams {
  int horizon_steps = 40;
  double dt = kin::kDefaultDt;
  double ttc_threshold = 2.0;   // s
  double ttc_probe_horizon = 3.0;
  double ttc_probe_dt = 0.1;
  double comfort_da = 0.6;      // |delta a| bound per step
  double comfort_alpha = 0.4;   // |alpha| bound
  double clearance_cap = 16.0;
};

struct ClosedLoopResult {
  double nc = 1.0, dac = 1.0, ttc = 1.0, c = 1.0, ep = 0.0;
  double pdms_score = 0.0;
  double mean_reward = 0.0;
  int collisions = 0;
  int invalid_actions = 0;
  int steps = 0;
};

struct RolloutTrace {
  std::vector<WorldState> states;  // length steps + 1 including the start
  std::vector<StepFlags> flags;    // per executed step
  std::vector<double> min_ttc;     // per executed step, +inf when clear
  int invalid_actions = 0;
};

// Sampled constant-velocity forward projection; +inf when no contact occurs
// within the probe horizon, 0 when already overlapping.
double ttc_estimate(const Scene& scene, const WorldState& ws, double probe_horizon,
                    double probe_dt);

double expert_progress(const Scene& scene, int horizon_steps, double dt,
                       const ExpertParams& params = {});

ClosedLoopResult score_rollout(const Scene& scene, const RolloutTrace& trace,
                               const ClosedLoopParams& params, const rl::RewardWeights& weights,
                               double expert_progress_m);

// Policy over token contexts ending after the current frame's BEV block;
// returns the local trajectory token to execute. Out-of-range returns are
// scored as an in-place action and flagged.
using TokenPolicy = std::function<int(const ar::TokenSequence&)>;

ClosedLoopResult closed_loop_run(const Scene& scene, const bevq::Codebook& codebook,
                                 const tok::VocabLayout& layout, const tok::KaGridConfig& ka_cfg,
                                 const TokenPolicy& policy, int history_frames,
                                 const rl::RewardWeights& weights, const ClosedLoopParams& params,
                                 const BevParams& bev_params);

// Rollout of a token policy (same context protocol), returning the trace for
// callers that add their own scoring or refinement.
RolloutTrace rollout_token_policy(const Scene& scene, const bevq::Codebook& codebook,
                                  const tok::VocabLayout& layout, const tok::KaGridConfig& ka_cfg,
                                  const TokenPolicy& policy, int history_frames,
                                  const ClosedLoopParams& params, const BevParams& bev_params);

// ---------------------------------------------------------------------------
// Open-loop evaluation

struct OpenLoopRow {
  double horizon_s = 0.0;
  int steps = 0;
  double ade = 0.0;
  double fde = 0.0;
  double ahe = 0.0;
  long count = 0;  // anchors aggregated
};

// Produces future frame tokens from a decision-point context; the model's
// generate() and ground-truth replay both fit this shape.
using FutureGenerator =
    std::function<std::vector<ar::FrameTokens>(const ar::TokenSequence&, int frames)>;

// Per-frame tokenization of an episode under a codebook and trajectory grid.
struct TokenizedEpisode {
  std::vector<ar::FrameTokens> frames;  // actions defined up to F-3
  int command = 0;
};
TokenizedEpisode tokenize_episode(const Episode& ep, const bevq::Codebook& codebook,
                                  const tok::KaGridConfig& ka_cfg, int bev_tokens_per_frame,
                                  double eps = kin::kDefaultEps);

// Optional hook refining a predicted pose sequence before scoring.
using PredRefiner = std::function<std::vector<kin::EgoState>(std::size_t episode_idx,
                                                             const std::vector<kin::EgoState>&)>;

// Teacher-forced contexts at anchor frames; generated futures are detokenized
// from the episode state at the anchor and compared against the expert
// continuation.
std::vector<OpenLoopRow> open_loop_eval(const std::vector<Episode>& episodes,
                                        const std::vector<TokenizedEpisode>& tokenized,
                                        const tok::VocabLayout& layout,
                                        const tok::KaGridConfig& ka_cfg,
                                        const FutureGenerator& future, int history_frames,
                                        const std::vector<double>& horizons_s, int anchor_stride,
                                        const PredRefiner& refiner = nullptr);

}  // namespace tokenplan::sim
