#include "tokenplan/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace tokenplan::cmd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) {
    throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) {
    throw IoError("cannot open " + p.string() + " for writing");
  }
  return f;
}

sim::Difficulty pick_difficulty(const cfg::RunConfig& c, std::size_t index) {
  const auto& names = c.sim.difficulties;
  if (names.empty()) {
    throw ConfigError("sim.difficulties must not be empty");
  }
  return sim::difficulty_from_string(names[index % names.size()]);
}

// Deterministic fan-out over an index range with ordered collection.
template <typename Fn>
void parallel_for(int jobs, std::size_t n, Fn&& fn) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::future<void>> workers;
  const int lanes = std::min<std::size_t>(jobs, n);
  for (int w = 0; w < lanes; ++w) {
    workers.push_back(std::async(std::launch::async, [&]() {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    }));
  }
  for (auto& f : workers) f.get();
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset generation

std::string cmd_gen_data(const cfg::RunConfig& c) {
  const std::string hash = cfg::config_hash(c);
  const fs::path dir = fs::path(c.out_dir) / "dataset";
  ensure_dir(dir);

  const rl::RewardWeights weights = cfg::reward_weights(c);
  const sim::BevParams bev = cfg::bev_params(c);

  std::vector<sim::Episode> episodes(static_cast<std::size_t>(std::max(c.sim.n_episodes, 0)));
  parallel_for(c.jobs, episodes.size(), [&](std::size_t i) {
    const std::uint64_t scene_seed = substream_seed(c.seed, "data") + i;
    const sim::Scene scene = sim::build_scene(scene_seed, pick_difficulty(c, i));
    episodes[i] = sim::run_expert_episode(scene, c.sim.max_frames, c.sim.dt, weights, bev);
  });

  // fit the patch codebook on a deterministic subsample of all patches
  bool have_codebook = false;
  bevq::Codebook codebook;
  {
    std::vector<std::vector<double>> patches;
    std::size_t total = 0;
    for (const sim::Episode& ep : episodes) total += ep.frames.size();
    const std::size_t per_frame =
        static_cast<std::size_t>((c.bev.grid / c.bev.patch) * (c.bev.grid / c.bev.patch));
    const std::size_t stride = std::max<std::size_t>(
        1, total * per_frame / static_cast<std::size_t>(std::max(c.bev.fit_subsample, 1)));
    std::size_t gi = 0;
    for (const sim::Episode& ep : episodes) {
      for (const sim::EpisodeFrame& fr : ep.frames) {
        const auto vecs = bevq::patchify(fr.bev, c.bev.patch, c.bev.patch);
        for (const auto& v : vecs) {
          if (gi % stride == 0) patches.push_back(v);
          ++gi;
        }
      }
    }
    if (patches.size() >= static_cast<std::size_t>(c.bev.codebook_k)) {
      codebook = bevq::fit_codebook(patches, c.bev.codebook_k, substream_seed(c.seed, "init"),
                                    c.bev.patch, c.bev.patch, sim::kNumBevClasses,
                                    c.bev.kmeans_iters);
      bevq::save_codebook(codebook, (dir / "codebook.bin").string());
      have_codebook = true;
    }
  }

  json manifest;
  manifest["format"] = "tokenplan-dataset-v1";
  manifest["config_hash"] = hash;
  manifest["seed"] = c.seed;
  manifest["dt"] = c.sim.dt;
  manifest["n_episodes"] = episodes.size();
  manifest["codebook"] = have_codebook ? json("codebook.bin") : json(nullptr);
  manifest["bev"] = {{"grid", c.bev.grid},
                     {"resolution", c.bev.resolution},
                     {"patch", c.bev.patch},
                     {"codebook_k", c.bev.codebook_k},
                     {"classes", sim::kNumBevClasses}};
  json eplist = json::array();
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "ep_%04zu.txt", i);
    sim::save_episode(episodes[i], (dir / name).string(), hash);
    eplist.push_back({{"path", name},
                      {"seed", episodes[i].seed},
                      {"difficulty", sim::to_string(episodes[i].difficulty)},
                      {"command", episodes[i].command},
                      {"frames", episodes[i].frames.size()}});
  }
  manifest["episodes"] = eplist;
  open_out(dir / "manifest.json") << manifest.dump(2) << "\n";
  return dir.string();
}

DatasetInfo load_dataset(const std::string& dir) {
  const fs::path base(dir);
  std::ifstream mf(base / "manifest.json");
  if (!mf) {
    throw IoError("load_dataset: cannot open " + (base / "manifest.json").string());
  }
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::parse_error& e) {
    throw IoError("load_dataset: bad manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "tokenplan-dataset-v1") {
    throw ConfigError("load_dataset: unknown manifest format");
  }
  DatasetInfo ds;
  ds.dir = dir;
  ds.config_hash = manifest.at("config_hash");
  ds.seed = manifest.at("seed");
  ds.dt = manifest.at("dt");
  if (!manifest.at("codebook").is_null()) {
    ds.codebook = bevq::load_codebook((base / manifest.at("codebook").get<std::string>()).string());
  }
  for (const json& e : manifest.at("episodes")) {
    ds.episodes.push_back(sim::load_episode((base / e.at("path").get<std::string>()).string()));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Windowing

BcWindows build_bc_windows(const DatasetInfo& ds, const cfg::RunConfig& c) {
  const ar::ModelConfig mc = cfg::model_config(c);
  const tok::KaGridConfig kg = cfg::ka_grid(c);
  const int window_frames = mc.history_frames + 1 + c.train.n_step;
  const int stride = std::max(c.train.window_stride, 1);

  BcWindows out;
  const std::size_t n_eps = ds.episodes.size();
  const std::size_t holdout_start = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_eps) * (1.0 - c.train.holdout_fraction)));
  for (std::size_t e = 0; e < n_eps; ++e) {
    const bool is_holdout = e >= holdout_start;
    (is_holdout ? out.holdout_episodes : out.train_episodes).push_back(static_cast<int>(e));
    const sim::Episode& ep = ds.episodes[e];
    if (ep.frames.size() < 3) continue;
    const sim::TokenizedEpisode te =
        sim::tokenize_episode(ep, ds.codebook, kg, mc.bev_tokens_per_frame, c.tokenizer.eps);
    const int n_actions = static_cast<int>(te.frames.size());
    for (int f0 = 0; f0 + window_frames <= n_actions; f0 += stride) {
      std::vector<ar::FrameTokens> frames(te.frames.begin() + f0,
                                          te.frames.begin() + f0 + window_frames);
      ar::TokenSequence seq = ar::assemble_sequence(mc.vocab, te.command, frames);
      (is_holdout ? out.holdout : out.train).push_back(std::move(seq));
    }
  }
  if (out.train.empty()) {
    throw SizeError("build_bc_windows: no training windows (episodes too short?)");
  }
  return out;
}

std::vector<rl::TransitionWindow> build_transition_windows(const DatasetInfo& ds,
                                                           const cfg::RunConfig& c) {
  const ar::ModelConfig mc = cfg::model_config(c);
  const tok::KaGridConfig kg = cfg::ka_grid(c);
  const int h = mc.history_frames;
  const int n_step = std::max(c.train.n_step, 1);
  const int window_frames = h + 1 + n_step;  // last frame only bootstraps
  const int frame_tokens = mc.frame_tokens();
  const int stride = std::max(c.train.window_stride, 1);

  std::vector<rl::TransitionWindow> out;
  for (const sim::Episode& ep : ds.episodes) {
    if (ep.frames.size() < 3) continue;
    const sim::TokenizedEpisode te =
        sim::tokenize_episode(ep, ds.codebook, kg, mc.bev_tokens_per_frame, c.tokenizer.eps);
    const int n_actions = static_cast<int>(te.frames.size());
    for (int f0 = 0; f0 + window_frames <= n_actions; f0 += stride) {
      rl::TransitionWindow w;
      std::vector<ar::FrameTokens> frames(te.frames.begin() + f0,
                                          te.frames.begin() + f0 + window_frames);
      w.seq = ar::assemble_sequence(mc.vocab, te.command, frames);
      for (int k = 0; k <= n_step; ++k) {
        const int wf = h + k;  // window-frame index of the transition
        w.decision_pos.push_back(1 + wf * frame_tokens + mc.bev_tokens_per_frame - 1);
        if (k < n_step) {
          const int f = f0 + wf;
          w.action_local.push_back(te.frames[f].traj_local);
          w.expert_local.push_back(te.frames[f].traj_local);
          w.reward.push_back(ep.frames[f + 1].r_total);
          w.done.push_back(f + 1 >= n_actions - 1 ? 1 : 0);
        }
      }
      out.push_back(std::move(w));
    }
  }
  if (out.empty()) {
    throw SizeError("build_transition_windows: no windows");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage-I training

TrainState train_bc_epochs(const cfg::RunConfig& c, const DatasetInfo& ds, TrainState state,
                           int until_epoch, std::vector<ar::StepRecord>* log) {
  const ar::TrainConfig tc = cfg::train_config(c);
  BcWindows windows = build_bc_windows(ds, c);

  for (int epoch = static_cast<int>(state.completed_epochs); epoch < until_epoch; ++epoch) {
    std::vector<std::size_t> order(windows.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(c.seed, "data", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const double p = ar::scheduled_p(tc, epoch);
    const int batch = std::max(tc.batch_size, 1);
    long step_in_epoch = 0;
    for (std::size_t i = 0; i + batch <= order.size(); i += batch) {
      if (c.train.max_steps_per_epoch > 0 && step_in_epoch >= c.train.max_steps_per_epoch) break;
      std::vector<ar::TokenSequence> b;
      b.reserve(batch);
      for (int k = 0; k < batch; ++k) b.push_back(windows.train[order[i + k]]);
      Rng step_rng = make_rng(c.seed, "sampling",
                              static_cast<std::uint64_t>(epoch) * 1000000 + step_in_epoch);
      const ar::StepRecord rec = ar::train_step(state.model, state.opt, b, tc, p, step_rng);
      if (log != nullptr) log->push_back(rec);
      ++step_in_epoch;
    }
    state.completed_epochs = epoch + 1;
  }
  return state;
}

ar::Model train_bc_model(const cfg::RunConfig& c, const DatasetInfo& ds,
                         std::vector<ar::StepRecord>* log) {
  TrainState state;
  state.model = ar::init_model(cfg::model_config(c), c.seed);
  state = train_bc_epochs(c, ds, std::move(state), c.train.epochs, log);
  return std::move(state.model);
}

std::string cmd_train_bc(const cfg::RunConfig& c, const std::string& dataset_dir,
                         const std::string& out_ckpt) {
  const DatasetInfo ds = load_dataset(dataset_dir);
  const std::string hash = cfg::config_hash(c);
  if (ds.config_hash != hash) {
    throw ConfigError("cmd_train_bc: dataset was generated under a different config (hash " +
                      ds.config_hash + " vs " + hash + ")");
  }

  TrainState state;
  if (!c.train.resume_from.empty()) {
    ar::Checkpoint ck = ar::load_checkpoint(c.train.resume_from);
    if (ck.config_hash != hash) {
      throw ConfigError("cmd_train_bc: checkpoint config hash mismatch");
    }
    state.model = std::move(ck.model);
    state.opt = std::move(ck.opt);
    state.completed_epochs = ck.step_count;
  } else {
    state.model = ar::init_model(cfg::model_config(c), c.seed);
  }

  std::vector<ar::StepRecord> log;
  state = train_bc_epochs(c, ds, std::move(state), c.train.epochs, &log);

  ensure_dir(fs::path(out_ckpt).parent_path().empty() ? fs::path(".")
                                                      : fs::path(out_ckpt).parent_path());
  ar::save_checkpoint(out_ckpt, state.model, state.opt, c.seed, state.completed_epochs, hash);

  std::ofstream csv = open_out(out_ckpt + ".log.csv");
  csv << "# config_hash=" << hash << " seed=" << c.seed << "\n";
  csv << "step,total,l_traj,l_bev,p,grad_norm\n";
  for (std::size_t i = 0; i < log.size(); ++i) {
    csv << i << ',' << fmt_g9(log[i].total) << ',' << fmt_g9(log[i].l_traj) << ','
        << fmt_g9(log[i].l_bev) << ',' << fmt_g9(log[i].p_mix) << ',' << fmt_g9(log[i].grad_norm)
        << "\n";
  }
  return out_ckpt;
}

// ---------------------------------------------------------------------------
// Stage-II training

ar::Model train_sacbc_model(const cfg::RunConfig& c, const DatasetInfo& ds, ar::Model model,
                            std::vector<rl::SacBcRecord>* log) {
  const rl::SacBcConfig sc = cfg::sacbc_config(c);
  const std::vector<rl::TransitionWindow> windows = build_transition_windows(ds, c);

  rl::TwinCritics critics = rl::TwinCritics::init(model.cfg.d_model, sc.critic_hidden,
                                                  model.cfg.vocab.n_traj,
                                                  substream_seed(c.seed, "rl"));
  ar::AdamState policy_opt, c1_opt, c2_opt;
  const int batch = std::max(c.sacbc.batch_windows, 1);
  for (int step = 0; step < c.sacbc.steps; ++step) {
    Rng rng = make_rng(c.seed, "rl", static_cast<std::uint64_t>(step));
    std::vector<rl::TransitionWindow> b;
    b.reserve(batch);
    for (int k = 0; k < batch; ++k) {
      b.push_back(windows[rng() % windows.size()]);
    }
    const rl::SacBcRecord rec = rl::sacbc_step(model, policy_opt, critics, c1_opt, c2_opt, b, sc);
    if (log != nullptr) log->push_back(rec);
  }
  return model;
}

std::string cmd_train_sacbc(const cfg::RunConfig& c, const std::string& dataset_dir,
                            const std::string& ckpt_in, const std::string& out_ckpt) {
  const DatasetInfo ds = load_dataset(dataset_dir);
  const std::string hash = cfg::config_hash(c);
  ar::Checkpoint ck = ar::load_checkpoint(ckpt_in);
  if (ck.config_hash != hash) {
    throw ConfigError("cmd_train_sacbc: checkpoint config hash mismatch");
  }

  std::vector<rl::SacBcRecord> log;
  ar::Model model = train_sacbc_model(c, ds, std::move(ck.model), &log);

  ar::AdamState fresh;
  ar::save_checkpoint(out_ckpt, model, fresh, c.seed, c.sacbc.steps, hash);
  std::ofstream csv = open_out(out_ckpt + ".log.csv");
  csv << "# config_hash=" << hash << " seed=" << c.seed << "\n";
  csv << "step,l_critic,l_actor,l_bc,mean_reward,mean_adv,mean_w,target_drift\n";
  for (std::size_t i = 0; i < log.size(); ++i) {
    csv << i << ',' << fmt_g9(log[i].l_critic) << ',' << fmt_g9(log[i].l_actor) << ','
        << fmt_g9(log[i].l_bc) << ',' << fmt_g9(log[i].mean_reward) << ','
        << fmt_g9(log[i].mean_adv) << ',' << fmt_g9(log[i].mean_w) << ','
        << fmt_g9(log[i].target_drift) << "\n";
  }
  return out_ckpt;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

post::LaneLikelihoodMap local_lane_map(const sim::Scene& scene, geom::Vec2 center, double span,
                                       double resolution) {
  post::LaneLikelihoodMap map;
  map.resolution = resolution;
  map.width = map.height = static_cast<int>(std::ceil(span / resolution));
  map.origin = geom::Vec2{center.x - span / 2.0, center.y - span / 2.0};
  map.values.resize(static_cast<std::size_t>(map.width) * map.height);
  const geom::Polyline route = scene.route();
  const double sigma = 1.0;
  for (int r = 0; r < map.height; ++r) {
    for (int col = 0; col < map.width; ++col) {
      const geom::Vec2 p{map.origin.x + col * resolution, map.origin.y + r * resolution};
      const double d = route.project(p).dist;
      map.set(r, col, std::exp(-d * d / (2.0 * sigma * sigma)));
    }
  }
  return map;
}

sim::RolloutTrace rollout_posttuned(const sim::Scene& scene, const ar::Model& model,
                                    const bevq::Codebook& codebook,
                                    const tok::KaGridConfig& ka_cfg, const cfg::RunConfig& c,
                                    const sim::ClosedLoopParams& params,
                                    const sim::BevParams& bev_params) {
  const tok::VocabLayout& layout = model.cfg.vocab;
  const post::SmootherWeights smoother = cfg::smoother_weights(c);
  const int plan_frames = std::max(c.eval.plan_frames, 2);
  const geom::Polyline route = scene.route();

  sim::RolloutTrace trace;
  sim::WorldState ws;
  ws.ego = kin::EgoState{scene.centerline[0].x, scene.centerline[0].y, scene.headings[0]};
  trace.states.push_back(ws);

  std::vector<ar::FrameTokens> history;
  for (int stepi = 0; stepi < params.horizon_steps; ++stepi) {
    const bevq::BevGrid bev = sim::rasterize_bev(scene, ws.ego, ws.time, bev_params);
    std::vector<int> bev_local;
    if (model.cfg.bev_tokens_per_frame > 0) {
      const bevq::BevTokenGrid tg = bevq::encode(bev, codebook);
      bev_local.assign(tg.idx.begin(), tg.idx.end());
    }
    const ar::TokenSequence ctx = ar::assemble_context(layout, scene.command, history, bev_local);
    const std::vector<ar::FrameTokens> plan =
        ar::generate(model, ctx, plan_frames, ar::GenMode::greedy, 1.0, nullptr);

    std::vector<kin::KaPoint> ka(plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const auto [ik, ia] = tok::unpack_token(tok::TrajTokenId{plan[i].traj_local},
                                              ka_cfg.a_grid.bins, ka_cfg.kappa_grid.bins);
      ka[i] = kin::KaPoint{ka_cfg.kappa_grid.dequantize(ik), ka_cfg.a_grid.dequantize(ia)};
    }
    const std::vector<kin::EgoState> raw_plan = kin::ka_rollout(ws.ego, ws.v, ka, params.dt);

    // refine the short-horizon plan against lane evidence, then execute its
    // first step
    const post::LaneLikelihoodMap map =
        local_lane_map(scene, {ws.ego.x, ws.ego.y}, 40.0, bev_params.resolution);
    kin::KaPoint exec = ka[0];
    try {
      const post::PosttuneResult refined = post::posttune_pipeline(raw_plan, map, route, smoother);
      const std::vector<kin::KaPoint> refined_ka =
          kin::states_to_ka(refined.trajectory, params.dt, c.tokenizer.eps);
      if (!refined_ka.empty()) {
        exec = refined_ka[0];
        exec.kappa = std::clamp(exec.kappa, ka_cfg.kappa_grid.lo, ka_cfg.kappa_grid.hi);
        exec.a = std::clamp(exec.a, ka_cfg.a_grid.lo, ka_cfg.a_grid.hi);
      }
    } catch (const std::runtime_error&) {
      ++trace.invalid_actions;  // refinement failed; fall back to the raw plan
    }

    trace.min_ttc.push_back(
        sim::ttc_estimate(scene, ws, params.ttc_probe_horizon, params.ttc_probe_dt));
    sim::StepFlags flags;
    ws = sim::step(scene, ws, exec, params.dt, &flags);
    trace.states.push_back(ws);
    trace.flags.push_back(flags);

    // context carries the executed action, quantized back onto the grid
    const int exec_token =
        tok::pack_token(ka_cfg.kappa_grid.quantize(exec.kappa), ka_cfg.a_grid.quantize(exec.a),
                        ka_cfg.a_grid.bins, ka_cfg.kappa_grid.bins)
            .value;
    history.push_back(ar::FrameTokens{bev_local, exec_token});
    if (static_cast<int>(history.size()) > model.cfg.history_frames) {
      history.erase(history.begin());
    }
  }
  return trace;
}

sim::ClosedLoopResult mean_result(const std::vector<sim::ClosedLoopResult>& rs) {
  sim::ClosedLoopResult m;
  m.nc = m.dac = m.ttc = m.c = m.ep = m.pdms_score = m.mean_reward = 0.0;
  for (const sim::ClosedLoopResult& r : rs) {
    m.nc += r.nc;
    m.dac += r.dac;
    m.ttc += r.ttc;
    m.c += r.c;
    m.ep += r.ep;
    m.pdms_score += r.pdms_score;
    m.mean_reward += r.mean_reward;
    m.collisions += r.collisions;
    m.invalid_actions += r.invalid_actions;
    m.steps += r.steps;
  }
  const double n = static_cast<double>(rs.size());
  m.nc /= n;
  m.dac /= n;
  m.ttc /= n;
  m.c /= n;
  m.ep /= n;
  m.pdms_score /= n;
  m.mean_reward /= n;
  return m;
}

std::vector<sim::OpenLoopRow> open_loop_eval_impl(const cfg::RunConfig& c, const DatasetInfo& ds,
                                                  const ar::Model& model, bool holdout_only,
                                                  bool refine) {
  const tok::KaGridConfig kg = cfg::ka_grid(c);
  const ar::ModelConfig& mc = model.cfg;

  const std::size_t n_eps = ds.episodes.size();
  const std::size_t holdout_start = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_eps) * (1.0 - c.train.holdout_fraction)));
  std::vector<sim::Episode> eval_eps;
  for (std::size_t e = holdout_only ? holdout_start : 0; e < n_eps; ++e) {
    eval_eps.push_back(ds.episodes[e]);
  }
  if (eval_eps.empty()) {
    throw SizeError("open_loop_model_eval: empty evaluation split");
  }
  std::vector<sim::TokenizedEpisode> tokenized(eval_eps.size());
  for (std::size_t e = 0; e < eval_eps.size(); ++e) {
    tokenized[e] = sim::tokenize_episode(eval_eps[e], ds.codebook, kg, mc.bev_tokens_per_frame,
                                         c.tokenizer.eps);
  }
  const sim::FutureGenerator future = [&model](const ar::TokenSequence& ctx, int frames) {
    return ar::generate(model, ctx, frames, ar::GenMode::greedy, 1.0, nullptr);
  };
  sim::PredRefiner refiner;
  std::vector<sim::Scene> scenes;
  if (refine) {
    scenes.reserve(eval_eps.size());
    for (const sim::Episode& ep : eval_eps) {
      scenes.push_back(sim::build_scene(ep.seed, ep.difficulty));
    }
    const post::SmootherWeights smoother = cfg::smoother_weights(c);
    refiner = [&scenes, &c, smoother](std::size_t e, const std::vector<kin::EgoState>& pred) {
      const sim::Scene& scene = scenes[e];
      geom::Vec2 lo{pred[0].x, pred[0].y}, hi = lo;
      for (const kin::EgoState& s : pred) {
        lo.x = std::min(lo.x, s.x);
        lo.y = std::min(lo.y, s.y);
        hi.x = std::max(hi.x, s.x);
        hi.y = std::max(hi.y, s.y);
      }
      const double span = std::max(hi.x - lo.x, hi.y - lo.y) + 16.0;
      const post::LaneLikelihoodMap map = local_lane_map(
          scene, geom::Vec2{(lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0}, span, c.bev.resolution);
      return post::posttune_pipeline(pred, map, scene.route(), smoother).trajectory;
    };
  }
  return sim::open_loop_eval(eval_eps, tokenized, mc.vocab, kg, future, mc.history_frames,
                             c.eval.horizons_s, c.eval.anchor_stride, refiner);
}

}  // namespace

std::vector<sim::OpenLoopRow> open_loop_model_eval(const cfg::RunConfig& c, const DatasetInfo& ds,
                                                   const ar::Model& model, bool holdout_only) {
  return open_loop_eval_impl(c, ds, model, holdout_only, false);
}

ClosedLoopAggregate closed_loop_model_eval(const cfg::RunConfig& c, const DatasetInfo& ds,
                                           const ar::Model& model, bool posttuned) {
  const tok::KaGridConfig kg = cfg::ka_grid(c);
  const rl::RewardWeights weights = cfg::reward_weights(c);
  const sim::ClosedLoopParams params = cfg::closed_loop_params(c);
  const sim::BevParams bev = cfg::bev_params(c);
  const int v = model.cfg.vocab.total();
  const int traj_off = model.cfg.vocab.traj_offset();

  ClosedLoopAggregate agg;
  agg.per_scene.resize(static_cast<std::size_t>(std::max(c.eval.n_scenes, 1)));
  parallel_for(c.jobs, agg.per_scene.size(), [&](std::size_t i) {
    const sim::Scene scene =
        sim::build_scene(substream_seed(c.seed, "eval-scenes") + i, pick_difficulty(c, i));
    if (posttuned) {
      const sim::RolloutTrace trace = rollout_posttuned(scene, model, ds.codebook, kg, c, params, bev);
      const double ref = sim::expert_progress(scene, params.horizon_steps, params.dt);
      agg.per_scene[i] = sim::score_rollout(scene, trace, params, weights, ref);
    } else {
      const sim::TokenPolicy policy = [&](const ar::TokenSequence& ctx) {
        const std::vector<double> logits = ar::forward(model, ctx, nullptr);
        const double* row = logits.data() + (ctx.size() - 1) * v + traj_off;
        int best = 0;
        for (int a = 1; a < model.cfg.vocab.n_traj; ++a) {
          if (row[a] > row[best]) best = a;
        }
        return best;
      };
      agg.per_scene[i] = sim::closed_loop_run(scene, ds.codebook, model.cfg.vocab, kg, policy,
                                              model.cfg.history_frames, weights, params, bev);
    }
  });
  agg.mean = mean_result(agg.per_scene);
  return agg;
}

std::string cmd_eval(const cfg::RunConfig& c, const std::string& dataset_dir,
                     const std::string& ckpt, const std::string& mode, bool posttune,
                     const std::string& out_csv) {
  if (mode != "open" && mode != "closed") {
    throw UsageError("cmd_eval: mode must be 'open' or 'closed'");
  }
  const DatasetInfo ds = load_dataset(dataset_dir);
  ar::Checkpoint ck = ar::load_checkpoint(ckpt);
  const std::string hash = cfg::config_hash(c);

  std::ofstream csv = open_out(out_csv);
  csv << "# config_hash=" << hash << " seed=" << c.seed << "\n";
  if (mode == "open") {
    const std::vector<sim::OpenLoopRow> raw = open_loop_eval_impl(c, ds, ck.model, true, false);
    std::vector<sim::OpenLoopRow> pt;
    if (posttune) {
      pt = open_loop_eval_impl(c, ds, ck.model, true, true);
    }
    csv << "horizon_s,ade_raw_m,fde_raw_m,ahe_raw_rad,ade_pt_m,fde_pt_m,ahe_pt_rad\n";
    for (std::size_t i = 0; i < raw.size(); ++i) {
      csv << fmt_g9(raw[i].horizon_s) << ',' << fmt_g9(raw[i].ade) << ',' << fmt_g9(raw[i].fde)
          << ',' << fmt_g9(raw[i].ahe);
      if (posttune) {
        csv << ',' << fmt_g9(pt[i].ade) << ',' << fmt_g9(pt[i].fde) << ',' << fmt_g9(pt[i].ahe);
      } else {
        csv << ",,,";
      }
      csv << "\n";
    }
  } else {
    const ClosedLoopAggregate raw = closed_loop_model_eval(c, ds, ck.model, false);
    ClosedLoopAggregate pt;
    if (posttune) {
      pt = closed_loop_model_eval(c, ds, ck.model, true);
    }
    csv << "scene,nc,dac,ttc,c,ep,pdms,mean_reward,collisions,invalid";
    if (posttune) csv << ",nc_pt,dac_pt,ttc_pt,c_pt,ep_pt,pdms_pt,mean_reward_pt,collisions_pt,invalid_pt";
    csv << "\n";
    auto row = [&](std::ostream& os, const sim::ClosedLoopResult& r) {
      os << ',' << fmt_g9(r.nc) << ',' << fmt_g9(r.dac) << ',' << fmt_g9(r.ttc) << ','
         << fmt_g9(r.c) << ',' << fmt_g9(r.ep) << ',' << fmt_g9(r.pdms_score) << ','
         << fmt_g9(r.mean_reward) << ',' << r.collisions << ',' << r.invalid_actions;
    };
    for (std::size_t i = 0; i < raw.per_scene.size(); ++i) {
      csv << i;
      row(csv, raw.per_scene[i]);
      if (posttune) row(csv, pt.per_scene[i]);
      csv << "\n";
    }
    csv << "mean";
    row(csv, raw.mean);
    if (posttune) row(csv, pt.mean);
    csv << "\n";
  }
  return out_csv;
}

// ---------------------------------------------------------------------------
// Tokenizer benchmark

std::vector<std::vector<kin::EgoState>> bench_windows(const cfg::RunConfig& c, int window_len) {
  std::vector<std::vector<kin::EgoState>> windows;
  std::size_t scene_idx = 0;
  while (static_cast<int>(windows.size()) < c.bench.n_windows) {
    const sim::Scene scene =
        sim::build_scene(substream_seed(c.seed, "bench") + scene_idx, pick_difficulty(c, scene_idx));
    ++scene_idx;
    sim::WorldState ws;
    ws.ego = kin::EgoState{scene.centerline[0].x, scene.centerline[0].y, scene.headings[0]};
    std::vector<kin::EgoState> states;
    for (int f = 0; f < c.sim.max_frames; ++f) {
      states.push_back(ws.ego);
      const sim::ExpertAction act = sim::expert_policy(scene, ws.ego, ws.v, ws.time, c.sim.dt);
      ws = sim::step(scene, ws, act.ka, c.sim.dt, nullptr);
    }
    for (std::size_t f0 = 0; f0 + window_len <= states.size() &&
                             static_cast<int>(windows.size()) < c.bench.n_windows;
         f0 += std::max(window_len / 2, 1)) {
      windows.emplace_back(states.begin() + f0, states.begin() + f0 + window_len);
    }
    if (scene_idx > static_cast<std::size_t>(c.bench.n_windows) + 1000) {
      throw SizeError("bench_windows: could not assemble the requested corpus");
    }
  }
  return windows;
}

namespace {

std::unique_ptr<tok::TrajCodec> make_codec(const std::string& name, int window_len) {
  if (name == "identity") return tok::make_identity_codec();
  const auto dash = name.rfind('-');
  if (dash != std::string::npos && dash + 2 == name.size()) {
    const char variant = name[dash + 1];
    const std::string family = name.substr(0, dash);
    if (family == "fb-ka") return tok::make_ka_fb_codec(std::string(1, variant), tok::ka_fb_config(variant));
    if (family == "fb-xy") return tok::make_xy_fb_codec(std::string(1, variant), tok::xy_fb_config(variant));
    if (family == "dct-xy")
      return tok::make_dct_xy_codec(std::string(1, variant), tok::dct_xy_config(variant, window_len));
    if (family == "dct-ka")
      return tok::make_dct_ka_codec(std::string(1, variant), tok::dct_ka_config(variant, window_len));
  }
  throw UsageError("unknown tokenizer scheme: " + name);
}

}  // namespace

std::string cmd_tok_bench(const cfg::RunConfig& c, const std::string& out_csv) {
  double max_h = 0.0;
  for (double h : c.bench.horizons_s) max_h = std::max(max_h, h);
  const int window_len = static_cast<int>(std::llround(max_h / c.sim.dt)) + 2;
  const std::vector<std::vector<kin::EgoState>> windows = bench_windows(c, window_len);

  std::ofstream csv = open_out(out_csv);
  csv << "# config_hash=" << cfg::config_hash(c) << " seed=" << c.seed << "\n";
  csv << "scheme,config,codebook_size,horizon_s,ade_m,fde_m,ahe_rad,ci_level,ci_lo,ci_hi\n";
  for (const std::string& name : c.bench.schemes) {
    const std::unique_ptr<tok::TrajCodec> codec = make_codec(name, window_len);
    const tok::SchemeReport report =
        tok::recon_benchmark(windows, *codec, c.bench.horizons_s, c.sim.dt, c.bench.ci_levels);
    for (const tok::HorizonReport& hr : report.horizons) {
      for (const tok::CiInterval& ci : hr.cis) {
        csv << report.scheme << ',' << report.config << ',' << report.codebook_size << ','
            << fmt_g9(hr.horizon_s) << ',' << fmt_g9(hr.mean.ade) << ',' << fmt_g9(hr.mean.fde)
            << ',' << fmt_g9(hr.mean.ahe) << ',' << fmt_g9(ci.level) << ',' << fmt_g9(ci.lo.ade)
            << ',' << fmt_g9(ci.hi.ade) << "\n";
      }
    }
  }
  return out_csv;
}

// ---------------------------------------------------------------------------
// Standalone post-tuning

std::string cmd_posttune(const cfg::RunConfig& c, const std::string& traj_in,
                         std::uint64_t scene_seed, const std::string& difficulty,
                         const std::string& out_csv) {
  std::ifstream f(traj_in);
  if (!f) {
    throw IoError("cmd_posttune: cannot open " + traj_in);
  }
  std::vector<kin::EgoState> traj;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("x,", 0) == 0) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    kin::EgoState s;
    if (ss >> s.x >> s.y >> s.yaw) {
      traj.push_back(s);
    }
  }
  if (traj.size() < 3) {
    throw SizeError("cmd_posttune: need at least 3 waypoints");
  }

  const sim::Scene scene = sim::build_scene(scene_seed, sim::difficulty_from_string(difficulty));
  geom::Vec2 lo{traj[0].x, traj[0].y}, hi = lo;
  for (const kin::EgoState& s : traj) {
    lo.x = std::min(lo.x, s.x);
    lo.y = std::min(lo.y, s.y);
    hi.x = std::max(hi.x, s.x);
    hi.y = std::max(hi.y, s.y);
  }
  const double span = std::max(hi.x - lo.x, hi.y - lo.y) + 20.0;
  const post::LaneLikelihoodMap map = local_lane_map(
      scene, geom::Vec2{(lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0}, span, c.bev.resolution);
  const post::PosttuneResult res =
      post::posttune_pipeline(traj, map, scene.route(), cfg::smoother_weights(c));

  std::ofstream csv = open_out(out_csv);
  csv << "# config_hash=" << cfg::config_hash(c) << " seed=" << c.seed
      << " lateral_objective=" << fmt_g9(res.diagnostics.lateral_objective)
      << " longitudinal_objective=" << fmt_g9(res.diagnostics.longitudinal_objective)
      << " max_displacement=" << fmt_g9(res.diagnostics.max_displacement)
      << " anchors_out_of_bounds=" << res.diagnostics.anchors_out_of_bounds << "\n";
  csv << "x,y,yaw\n";
  for (const kin::EgoState& s : res.trajectory) {
    csv << fmt_g17(s.x) << ',' << fmt_g17(s.y) << ',' << fmt_g17(s.yaw) << "\n";
  }
  return out_csv;
}

}  // namespace tokenplan::cmd
