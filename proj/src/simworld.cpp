#include "tokenplan/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "tokenplan/common.hpp"

namespace tokenplan::sim {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}
}  // namespace

Difficulty difficulty_from_string(const std::string& s) {
  if (s == "straight") return Difficulty::straight;
  if (s == "easy") return Difficulty::easy;
  if (s == "medium") return Difficulty::medium;
  if (s == "hard") return Difficulty::hard;
  throw ConfigError("unknown difficulty: " + s);
}

std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::straight: return "straight";
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
  }
  return "?";
}

geom::OrientedRect Agent::rect_at(double time) const {
  return geom::OrientedRect{pos0 + vel * time, yaw, half_len, half_wid};
}

geom::OrientedRect Scene::ego_rect(const kin::EgoState& ego) const {
  return geom::OrientedRect{{ego.x, ego.y}, ego.yaw, kEgoHalfLen, kEgoHalfWid};
}

Scene build_scene(std::uint64_t seed, Difficulty difficulty) {
  Rng rng(substream_seed(seed, "scene"));
  Scene scene;
  scene.seed = seed;
  scene.difficulty = difficulty;
  scene.lane_half_width = 2.5;

  double kappa_max = 0.0;
  int obst_min = 0, obst_max = 0, agents_max = 0;
  switch (difficulty) {
    case Difficulty::straight: break;
    case Difficulty::easy:
      kappa_max = 0.05; obst_min = 0; obst_max = 2; agents_max = 1;
      break;
    case Difficulty::medium:
      kappa_max = 0.10; obst_min = 1; obst_max = 3; agents_max = 1;
      break;
    case Difficulty::hard:
      kappa_max = 0.15; obst_min = 2; obst_max = 5; agents_max = 2;
      break;
  }

  const bool stop_scene =
      difficulty != Difficulty::straight && uniform(rng, 0.0, 1.0) < 0.15;
  scene.route_length = stop_scene ? 45.0 : 120.0;

  // piecewise-constant curvature centerline at 1 m spacing, heading bounded
  // to keep the route simple
  const double heading_bound = 1.9;
  double x = 0.0, y = 0.0, heading = 0.0;
  scene.centerline.push_back({x, y});
  scene.headings.push_back(heading);
  double seg_left = 0.0, kappa = 0.0;
  const int n_steps = static_cast<int>(scene.route_length);
  for (int i = 0; i < n_steps; ++i) {
    if (seg_left <= 0.0) {
      seg_left = uniform(rng, 12.0, 25.0);
      kappa = kappa_max > 0.0 ? uniform(rng, -kappa_max, kappa_max) : 0.0;
      if (std::abs(heading + kappa * seg_left) > heading_bound) {
        kappa = -kappa;
      }
    }
    const double mid = heading + 0.5 * kappa;
    x += std::cos(mid);
    y += std::sin(mid);
    heading += kappa;
    seg_left -= 1.0;
    scene.centerline.push_back({x, y});
    scene.headings.push_back(heading);
  }

  if (stop_scene) {
    scene.command = 3;
  } else if (heading > 0.6) {
    scene.command = 1;
  } else if (heading < -0.6) {
    scene.command = 2;
  } else {
    scene.command = 0;
  }

  const geom::Polyline route(scene.centerline);
  const int n_obst = obst_max > 0 ? static_cast<int>(uniform(rng, obst_min, obst_max + 1)) : 0;
  for (int i = 0; i < n_obst; ++i) {
    const double s = uniform(rng, 20.0, scene.route_length - 8.0);
    const double half_len = uniform(rng, 1.0, 2.5);
    const double half_wid = uniform(rng, 0.6, 1.0);
    const double reach = std::sqrt(half_len * half_len + half_wid * half_wid);
    const double side = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
    // center offset keeps the whole rectangle clear of the driving corridor
    const double lat = side * (scene.lane_half_width + reach + 0.3 + uniform(rng, 0.0, 2.5));
    const geom::Vec2 pos = route.point_at(s, lat);
    const double yaw = route.heading_at(s) + uniform(rng, -0.3, 0.3);
    scene.obstacles.push_back(Obstacle{geom::OrientedRect{pos, yaw, half_len, half_wid}});
  }

  // agents whose straight-line motion would re-enter the corridor from the
  // side or behind are rejected (slower first, then dropped)
  const auto agent_safe = [&](const Agent& a) {
    double prev_s = -1.0;
    for (double tau = 0.0; tau <= 25.0; tau += 0.5) {
      const geom::PolylineProjection p = route.project(a.rect_at(tau).center);
      if (std::abs(p.lateral) <= scene.lane_half_width + 3.0) {
        if (p.s < prev_s - 0.5) return false;
        prev_s = std::max(prev_s, p.s);
      }
    }
    return true;
  };
  const int n_agents = agents_max > 0 ? static_cast<int>(uniform(rng, 0.0, agents_max + 1)) : 0;
  double agent_s = 25.0;
  for (int i = 0; i < n_agents; ++i) {
    agent_s += uniform(rng, 0.0, 20.0) + 15.0 * i;
    if (agent_s > scene.route_length - 10.0) break;
    Agent a;
    a.pos0 = route.point_at(agent_s);
    a.yaw = route.heading_at(agent_s);
    double speed = uniform(rng, 2.5, 5.5);
    a.vel = geom::rotate({1.0, 0.0}, a.yaw) * speed;
    if (!agent_safe(a)) {
      speed *= 0.5;
      a.vel = geom::rotate({1.0, 0.0}, a.yaw) * speed;
    }
    if (agent_safe(a)) {
      scene.agents.push_back(a);
    }
  }
  return scene;
}

ExpertAction expert_policy(const Scene& scene, const kin::EgoState& state, double v, double time,
                           double dt, const ExpertParams& params) {
  const geom::Polyline route = scene.route();
  const geom::PolylineProjection proj = route.project({state.x, state.y});
  const double remaining = scene.route_length - proj.s;

  ExpertAction out;
  out.off_corridor = proj.dist > scene.lane_half_width;

  double kappa = 0.0;
  if (remaining > 3.0) {
    const double lookahead = std::max(params.lookahead_base, v * params.lookahead_gain);
    const geom::Vec2 target = route.point_at(proj.s + lookahead);
    const double bearing = std::atan2(target.y - state.y, target.x - state.x);
    const double alpha = kin::wrap_angle(bearing - state.yaw);
    // feedforward road curvature plus pure-pursuit correction
    const double kappa_ff = kin::wrap_angle(route.heading_at(proj.s + 2.0) -
                                            route.heading_at(proj.s)) /
                            2.0;
    kappa = kappa_ff + 2.0 * std::sin(alpha - 0.5 * kappa_ff * lookahead) / lookahead;
    kappa = std::clamp(kappa, -params.max_kappa, params.max_kappa);
  }

  // allowed speed: cruise, tightest curvature over the next stretch, and the
  // stopping envelope toward the route end
  double kappa_ahead = 1e-6;
  for (double d = 2.0; d <= 10.0; d += 2.0) {
    const double dh = kin::wrap_angle(route.heading_at(proj.s + d) -
                                      route.heading_at(proj.s + d - 2.0));
    kappa_ahead = std::max(kappa_ahead, std::abs(dh) / 2.0);
  }
  double v_allow = std::min(params.cruise_speed, std::sqrt(params.lat_accel_max / kappa_ahead));
  v_allow = std::min(v_allow, std::sqrt(2.0 * 0.8 * std::max(remaining - 2.0, 0.0)));
  double accel = std::clamp((v_allow - v) / dt, -params.max_decel, params.max_accel);

  // IDM gap control against agents ahead along the route, plus a forward
  // probe that yields to agents whose straight-line motion crosses the lane
  for (const Agent& agent : scene.agents) {
    const geom::OrientedRect ar = agent.rect_at(time);
    const geom::PolylineProjection ap = route.project(ar.center);
    if (ap.s > proj.s && std::abs(ap.lateral) <= scene.lane_half_width + 2.5) {
      const double gap = ap.s - proj.s - (kEgoHalfLen + agent.half_len) - 0.5;
      if (gap <= 0.3) {
        accel = -params.max_decel;
      } else {
        const double v_agent = agent.vel.norm();
        const double dv = v - v_agent;
        const double s_star =
            std::max(params.idm_min_gap + v * params.idm_time_headway +
                         v * dv / (2.0 * std::sqrt(params.max_accel * params.idm_decel)),
                     0.0);
        const double idm = params.max_accel * (1.0 - std::pow(v / std::max(v_allow, 0.1), 4.0) -
                                               (s_star / gap) * (s_star / gap));
        accel = std::min(accel, idm);
      }
    }
    for (double tau = 0.5; tau <= 4.0; tau += 0.5) {
      const geom::PolylineProjection fp = route.project(agent.rect_at(time + tau).center);
      if (fp.s > proj.s - 2.0 && std::abs(fp.lateral) <= scene.lane_half_width + 1.2) {
        const double dist = fp.s - proj.s - (kEgoHalfLen + agent.half_len + 1.0);
        const double v_yield = std::sqrt(2.0 * 0.8 * std::max(dist, 0.0));
        if (v_yield < v_allow) {
          v_allow = v_yield;
          accel = std::min(accel, std::clamp((v_allow - v) / dt, -params.max_decel,
                                             params.max_accel));
        }
        break;
      }
    }
  }

  accel = std::clamp(accel, -params.max_decel, params.max_accel);
  if (v + accel * dt < 0.0) {
    accel = -v / dt;  // no reverse
  }
  out.ka = kin::KaPoint{kappa, accel};
  return out;
}

bevq::BevGrid rasterize_bev(const Scene& scene, const kin::EgoState& ego, double time,
                            const BevParams& params) {
  bevq::BevGrid grid =
      bevq::BevGrid::filled(params.grid, params.grid, kNumBevClasses, params.resolution, 0);
  const double yaw = kin::wrap_angle(ego.yaw);
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double half = params.grid / 2.0;
  const geom::Polyline route = scene.route();
  const geom::OrientedRect ego_rect = scene.ego_rect(ego);

  std::vector<geom::OrientedRect> solids;
  for (const Obstacle& o : scene.obstacles) solids.push_back(o.rect);
  for (const Agent& a : scene.agents) solids.push_back(a.rect_at(time));

  for (int r = 0; r < params.grid; ++r) {
    const double fwd = (r + 0.5 - half) * params.resolution;
    for (int col = 0; col < params.grid; ++col) {
      const double lat = (col + 0.5 - half) * params.resolution;
      const geom::Vec2 p{ego.x + c * fwd - s * lat, ego.y + s * fwd + c * lat};
      std::uint8_t cls = 0;
      bool solid = false;
      for (const geom::OrientedRect& rect : solids) {
        if (rect.contains(p)) {
          solid = true;
          break;
        }
      }
      if (solid) {
        cls = 3;
      } else if (ego_rect.contains(p)) {
        cls = 4;
      } else {
        const double d = route.project(p).dist;
        if (d <= params.lane_band) {
          cls = 2;
        } else if (d <= scene.lane_half_width) {
          cls = 1;
        }
      }
      grid.set(r, col, cls);
    }
  }
  return grid;
}

std::pair<double, double> distances(const Scene& scene, const kin::EgoState& ego, double time,
                                    double clearance_cap) {
  const geom::Polyline route = scene.route();
  const double d_ctr = route.project({ego.x, ego.y}).dist;
  const geom::OrientedRect er = scene.ego_rect(ego);
  double d_clr = clearance_cap;
  for (const Obstacle& o : scene.obstacles) {
    d_clr = std::min(d_clr, geom::rect_distance(er, o.rect));
  }
  for (const Agent& a : scene.agents) {
    d_clr = std::min(d_clr, geom::rect_distance(er, a.rect_at(time)));
  }
  return {d_ctr, d_clr};
}

WorldState step(const Scene& scene, const WorldState& ws, const kin::KaPoint& action, double dt,
                StepFlags* flags) {
  if (dt <= 0.0) {
    throw DomainError("step: dt must be positive");
  }
  const std::vector<kin::EgoState> rolled = kin::ka_rollout(ws.ego, ws.v, {action}, dt);
  WorldState next;
  next.ego = rolled.back();
  next.v = std::max(ws.v + action.a * dt, 0.0);
  next.time = ws.time + dt;
  if (flags != nullptr) {
    flags->collision = false;
    flags->offroad = false;
    const geom::OrientedRect er = scene.ego_rect(next.ego);
    for (const Obstacle& o : scene.obstacles) {
      if (geom::rects_overlap(er, o.rect)) flags->collision = true;
    }
    for (const Agent& a : scene.agents) {
      if (geom::rects_overlap(er, a.rect_at(next.time))) flags->collision = true;
    }
    flags->offroad = scene.route().project({next.ego.x, next.ego.y}).dist > scene.lane_half_width;
  }
  return next;
}

std::vector<rl::RewardComponents> frame_rewards(const Scene& scene,
                                                const std::vector<kin::EgoState>& states,
                                                double dt, const rl::RewardWeights& weights,
                                                double clearance_cap) {
  std::vector<rl::RewardComponents> out(states.size());
  std::vector<kin::RateSample> rates;
  if (states.size() >= 3) {
    rates = kin::finite_diff_rates(states, dt);
  }
  for (std::size_t f = 0; f < states.size(); ++f) {
    const auto [d_ctr, d_clr] = distances(scene, states[f], static_cast<double>(f) * dt,
                                          clearance_cap);
    out[f].r_ctr = rl::reward_centerline(d_ctr, weights.sigma_ctr);
    out[f].r_clr = rl::reward_clearance(d_clr, weights.sigma_clr);
    if (f < rates.size()) {
      out[f].r_comf = rl::reward_comfort(rates[f].delta_a, rates[f].alpha, rates[f].v, weights);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

Episode run_expert_episode(const Scene& scene, int max_frames, double dt,
                           const rl::RewardWeights& weights, const BevParams& bev_params,
                           const ExpertParams& expert_params) {
  Episode ep;
  ep.seed = scene.seed;
  ep.difficulty = scene.difficulty;
  ep.command = scene.command;
  ep.dt = dt;

  WorldState ws;
  ws.ego = kin::EgoState{scene.centerline[0].x, scene.centerline[0].y, scene.headings[0]};
  ws.v = 0.0;

  std::vector<kin::EgoState> states;
  std::vector<double> speeds;
  const geom::Polyline route = scene.route();
  for (int f = 0; f < max_frames; ++f) {
    states.push_back(ws.ego);
    speeds.push_back(ws.v);
    if (route.project({ws.ego.x, ws.ego.y}).s > scene.route_length - 1.5 && ws.v < 0.05) {
      break;  // parked at the route end
    }
    const ExpertAction act = expert_policy(scene, ws.ego, ws.v, ws.time, dt, expert_params);
    ws = step(scene, ws, act.ka, dt, nullptr);
  }

  const std::vector<rl::RewardComponents> rewards = frame_rewards(scene, states, dt, weights);
  ep.frames.resize(states.size());
  for (std::size_t f = 0; f < states.size(); ++f) {
    ep.frames[f].pose = states[f];
    ep.frames[f].v = speeds[f];
    ep.frames[f].rewards = rewards[f];
    ep.frames[f].r_total = rl::reward_total(rewards[f], weights);
    ep.frames[f].bev = rasterize_bev(scene, states[f], static_cast<double>(f) * dt, bev_params);
  }
  return ep;
}

namespace {

void write_rle(std::ostream& os, const bevq::BevGrid& grid) {
  std::size_t i = 0;
  while (i < grid.cells.size()) {
    std::size_t j = i;
    while (j < grid.cells.size() && grid.cells[j] == grid.cells[i]) ++j;
    os << ' ' << static_cast<int>(grid.cells[i]) << '*' << (j - i);
    i = j;
  }
}

}  // namespace

void save_episode(const Episode& ep, const std::string& path, const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) {
    throw IoError("save_episode: cannot open " + path);
  }
  f << "# tokenplan-episode v1\n";
  const bevq::BevGrid& b0 = ep.frames.empty()
                                ? bevq::BevGrid::filled(1, 1, kNumBevClasses, 0.5)
                                : ep.frames[0].bev;
  f << "meta seed=" << ep.seed << " difficulty=" << to_string(ep.difficulty)
    << " command=" << ep.command << " dt=" << fmt_g17(ep.dt) << " frames=" << ep.frames.size()
    << " bev_h=" << b0.height << " bev_w=" << b0.width << " bev_classes=" << b0.n_classes
    << " bev_res=" << fmt_g17(b0.resolution) << " config_hash=" << config_hash << "\n";
  for (std::size_t i = 0; i < ep.frames.size(); ++i) {
    const EpisodeFrame& fr = ep.frames[i];
    f << "frame " << i << ' ' << fmt_g17(fr.pose.x) << ' ' << fmt_g17(fr.pose.y) << ' '
      << fmt_g17(fr.pose.yaw) << ' ' << fmt_g17(fr.v) << ' ' << fmt_g17(fr.rewards.r_ctr) << ' '
      << fmt_g17(fr.rewards.r_clr) << ' ' << fmt_g17(fr.rewards.r_comf) << ' '
      << fmt_g17(fr.r_total);
    write_rle(f, fr.bev);
    f << "\n";
  }
  if (!f) {
    throw IoError("save_episode: write failed for " + path);
  }
}

Episode load_episode(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw IoError("load_episode: cannot open " + path);
  }
  std::string line;
  if (!std::getline(f, line) || line != "# tokenplan-episode v1") {
    throw IoError("load_episode: bad header in " + path);
  }
  if (!std::getline(f, line)) {
    throw IoError("load_episode: missing meta line in " + path);
  }
  Episode ep;
  int bev_h = 0, bev_w = 0, bev_classes = 0;
  double bev_res = 0.5;
  std::size_t n_frames = 0;
  {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag != "meta") throw IoError("load_episode: bad meta line");
    std::string kv;
    while (ss >> kv) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = kv.substr(0, eq);
      const std::string v = kv.substr(eq + 1);
      if (k == "seed") ep.seed = std::stoull(v);
      else if (k == "difficulty") ep.difficulty = difficulty_from_string(v);
      else if (k == "command") ep.command = std::stoi(v);
      else if (k == "dt") ep.dt = std::stod(v);
      else if (k == "frames") n_frames = std::stoul(v);
      else if (k == "bev_h") bev_h = std::stoi(v);
      else if (k == "bev_w") bev_w = std::stoi(v);
      else if (k == "bev_classes") bev_classes = std::stoi(v);
      else if (k == "bev_res") bev_res = std::stod(v);
    }
  }
  ep.frames.reserve(n_frames);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    std::size_t idx = 0;
    ss >> tag >> idx;
    if (tag != "frame") throw IoError("load_episode: bad frame line");
    EpisodeFrame fr;
    ss >> fr.pose.x >> fr.pose.y >> fr.pose.yaw >> fr.v >> fr.rewards.r_ctr >> fr.rewards.r_clr >>
        fr.rewards.r_comf >> fr.r_total;
    fr.bev = bevq::BevGrid::filled(bev_h, bev_w, bev_classes, bev_res, 0);
    std::size_t cell = 0;
    std::string run;
    while (ss >> run) {
      const std::size_t star = run.find('*');
      if (star == std::string::npos) throw IoError("load_episode: bad RLE token");
      const int cls = std::stoi(run.substr(0, star));
      const std::size_t count = std::stoul(run.substr(star + 1));
      for (std::size_t k = 0; k < count; ++k) {
        fr.bev.cells[cell++] = static_cast<std::uint8_t>(cls);
      }
    }
    if (cell != fr.bev.cells.size()) {
      throw IoError("load_episode: RLE length mismatch in " + path);
    }
    ep.frames.push_back(std::move(fr));
  }
  if (ep.frames.size() != n_frames) {
    throw IoError("load_episode: frame count mismatch in " + path);
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Metrics

double pdms(double nc, double dac, double ttc, double c, double ep) {
  for (double v : {nc, dac, ttc, c, ep}) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError("pdms: subscores must lie in [0,1]");
    }
  }
  return nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * c) / 12.0;
}

double ttc_estimate(const Scene& scene, const WorldState& ws, double probe_horizon,
                    double probe_dt) {
  const geom::Vec2 ego_vel = geom::rotate({1.0, 0.0}, ws.ego.yaw) * ws.v;
  for (double tau = 0.0; tau <= probe_horizon + 1e-9; tau += probe_dt) {
    geom::OrientedRect er = scene.ego_rect(ws.ego);
    er.center = er.center + ego_vel * tau;
    bool hit = false;
    for (const Obstacle& o : scene.obstacles) {
      if (geom::rects_overlap(er, o.rect)) {
        hit = true;
        break;
      }
    }
    if (!hit) {
      for (const Agent& a : scene.agents) {
        if (geom::rects_overlap(er, a.rect_at(ws.time + tau))) {
          hit = true;
          break;
        }
      }
    }
    if (hit) return tau;
  }
  return kInf;
}

double expert_progress(const Scene& scene, int horizon_steps, double dt,
                       const ExpertParams& params) {
  WorldState ws;
  ws.ego = kin::EgoState{scene.centerline[0].x, scene.centerline[0].y, scene.headings[0]};
  const geom::Polyline route = scene.route();
  const double s0 = route.project({ws.ego.x, ws.ego.y}).s;
  for (int i = 0; i < horizon_steps; ++i) {
    const ExpertAction act = expert_policy(scene, ws.ego, ws.v, ws.time, dt, params);
    ws = step(scene, ws, act.ka, dt, nullptr);
  }
  return route.project({ws.ego.x, ws.ego.y}).s - s0;
}

ClosedLoopResult score_rollout(const Scene& scene, const RolloutTrace& trace,
                               const ClosedLoopParams& params, const rl::RewardWeights& weights,
                               double expert_progress_m) {
  ClosedLoopResult res;
  const int steps = static_cast<int>(trace.flags.size());
  res.steps = steps;
  res.invalid_actions = trace.invalid_actions;
  if (steps == 0) {
    throw SizeError("score_rollout: empty trace");
  }

  int off_count = 0;
  double min_ttc = kInf;
  for (int i = 0; i < steps; ++i) {
    if (trace.flags[i].collision) ++res.collisions;
    if (trace.flags[i].offroad) ++off_count;
    min_ttc = std::min(min_ttc, trace.min_ttc[i]);
  }
  res.nc = res.collisions > 0 ? 0.0 : 1.0;
  res.dac = 1.0 - static_cast<double>(off_count) / steps;
  res.ttc = min_ttc >= params.ttc_threshold
                ? 1.0
                : std::clamp(min_ttc / params.ttc_threshold, 0.0, 1.0);

  std::vector<kin::EgoState> states(trace.states.size());
  for (std::size_t i = 0; i < trace.states.size(); ++i) states[i] = trace.states[i].ego;

  // comfort: fraction of rate samples inside the configured bounds
  if (states.size() >= 3) {
    const std::vector<kin::RateSample> rates = kin::finite_diff_rates(states, params.dt);
    int ok = 0;
    for (const kin::RateSample& r : rates) {
      if (std::abs(r.delta_a) <= params.comfort_da && std::abs(r.alpha) <= params.comfort_alpha) {
        ++ok;
      }
    }
    res.c = rates.empty() ? 1.0 : static_cast<double>(ok) / rates.size();
  }

  const geom::Polyline route = scene.route();
  const double progress = route.project({states.back().x, states.back().y}).s -
                          route.project({states.front().x, states.front().y}).s;
  res.ep = expert_progress_m < 0.1 ? 1.0 : std::clamp(progress / expert_progress_m, 0.0, 1.0);

  const std::vector<rl::RewardComponents> rewards =
      frame_rewards(scene, states, params.dt, weights, params.clearance_cap);
  double acc = 0.0;
  for (std::size_t f = 1; f < rewards.size(); ++f) {
    acc += rl::reward_total(rewards[f], weights);
  }
  res.mean_reward = acc / steps;
  res.pdms_score = pdms(res.nc, res.dac, res.ttc, res.c, res.ep);
  return res;
}

RolloutTrace rollout_token_policy(const Scene& scene, const bevq::Codebook& codebook,
                                  const tok::VocabLayout& layout, const tok::KaGridConfig& ka_cfg,
                                  const TokenPolicy& policy, int history_frames,
                                  const ClosedLoopParams& params, const BevParams& bev_params) {
  RolloutTrace trace;
  WorldState ws;
  ws.ego = kin::EgoState{scene.centerline[0].x, scene.centerline[0].y, scene.headings[0]};
  trace.states.push_back(ws);

  std::vector<ar::FrameTokens> history;
  for (int stepi = 0; stepi < params.horizon_steps; ++stepi) {
    const bevq::BevGrid bev = rasterize_bev(scene, ws.ego, ws.time, bev_params);
    const bevq::BevTokenGrid tokens = bevq::encode(bev, codebook);
    std::vector<int> bev_local(tokens.idx.begin(), tokens.idx.end());

    const ar::TokenSequence ctx =
        ar::assemble_context(layout, scene.command, history, bev_local);
    int action_local = policy(ctx);

    kin::KaPoint ka{0.0, 0.0};
    bool valid = action_local >= 0 && action_local < layout.n_traj;
    if (valid) {
      const auto [ik, ia] = tok::unpack_token(tok::TrajTokenId{action_local},
                                              ka_cfg.a_grid.bins, ka_cfg.kappa_grid.bins);
      ka = kin::KaPoint{ka_cfg.kappa_grid.dequantize(ik), ka_cfg.a_grid.dequantize(ia)};
    } else {
      ++trace.invalid_actions;
      action_local = 0;  // scored as an in-place action
      ka = kin::KaPoint{0.0, ws.v > 0.0 ? -ws.v / params.dt : 0.0};
    }

    trace.min_ttc.push_back(ttc_estimate(scene, ws, params.ttc_probe_horizon, params.ttc_probe_dt));

    StepFlags flags;
    ws = step(scene, ws, ka, params.dt, &flags);
    trace.states.push_back(ws);
    trace.flags.push_back(flags);

    history.push_back(ar::FrameTokens{bev_local, action_local});
    if (static_cast<int>(history.size()) > history_frames) {
      history.erase(history.begin());
    }
  }
  return trace;
}

ClosedLoopResult closed_loop_run(const Scene& scene, const bevq::Codebook& codebook,
                                 const tok::VocabLayout& layout, const tok::KaGridConfig& ka_cfg,
                                 const TokenPolicy& policy, int history_frames,
                                 const rl::RewardWeights& weights, const ClosedLoopParams& params,
                                 const BevParams& bev_params) {
  const RolloutTrace trace = rollout_token_policy(scene, codebook, layout, ka_cfg, policy,
                                                  history_frames, params, bev_params);
  const double ref = expert_progress(scene, params.horizon_steps, params.dt);
  return score_rollout(scene, trace, params, weights, ref);
}

// ---------------------------------------------------------------------------
// Open-loop evaluation

TokenizedEpisode tokenize_episode(const Episode& ep, const bevq::Codebook& codebook,
                                  const tok::KaGridConfig& ka_cfg, int bev_tokens_per_frame,
                                  double eps) {
  TokenizedEpisode out;
  out.command = ep.command;
  if (ep.frames.size() < 3) {
    throw SizeError("tokenize_episode: episode too short");
  }
  const std::size_t n_actions = ep.frames.size() - 2;
  out.frames.resize(n_actions);
  for (std::size_t f = 0; f < n_actions; ++f) {
    if (bev_tokens_per_frame > 0) {
      const bevq::BevTokenGrid tg = bevq::encode(ep.frames[f].bev, codebook);
      if (static_cast<int>(tg.idx.size()) != bev_tokens_per_frame) {
        throw ConfigError("tokenize_episode: latent grid does not match bev_tokens_per_frame");
      }
      out.frames[f].bev_local.assign(tg.idx.begin(), tg.idx.end());
    }
    const std::vector<kin::EgoState> triple = {ep.frames[f].pose, ep.frames[f + 1].pose,
                                               ep.frames[f + 2].pose};
    const std::vector<tok::TrajTokenId> token = tok::ka_tokenize(triple, ep.dt, ka_cfg, eps);
    out.frames[f].traj_local = token[0].value;
  }
  return out;
}

std::vector<OpenLoopRow> open_loop_eval(const std::vector<Episode>& episodes,
                                        const std::vector<TokenizedEpisode>& tokenized,
                                        const tok::VocabLayout& layout,
                                        const tok::KaGridConfig& ka_cfg,
                                        const FutureGenerator& future, int history_frames,
                                        const std::vector<double>& horizons_s, int anchor_stride,
                                        const PredRefiner& refiner) {
  if (episodes.empty() || episodes.size() != tokenized.size()) {
    throw SizeError("open_loop_eval: empty or mismatched episode set");
  }
  if (horizons_s.empty()) {
    throw SizeError("open_loop_eval: no horizons requested");
  }
  const double dt = episodes[0].dt;
  std::vector<OpenLoopRow> rows;
  int max_steps = 0;
  for (double hs : horizons_s) {
    OpenLoopRow r;
    r.horizon_s = hs;
    r.steps = static_cast<int>(std::llround(hs / dt));
    if (r.steps < 1) {
      throw ConfigError("open_loop_eval: horizon below one step");
    }
    max_steps = std::max(max_steps, r.steps);
    rows.push_back(r);
  }

  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode& ep = episodes[e];
    const TokenizedEpisode& te = tokenized[e];
    const int n_frames = static_cast<int>(ep.frames.size());
    const int n_actions = static_cast<int>(te.frames.size());
    for (int c = history_frames; c + max_steps < n_frames && c < n_actions;
         c += std::max(anchor_stride, 1)) {
      std::vector<ar::FrameTokens> past(te.frames.begin() + (c - history_frames),
                                        te.frames.begin() + c);
      const ar::TokenSequence ctx =
          ar::assemble_context(layout, te.command, past, te.frames[c].bev_local);
      const std::vector<ar::FrameTokens> gen = future(ctx, max_steps);
      if (static_cast<int>(gen.size()) != max_steps) {
        throw SizeError("open_loop_eval: generator returned wrong horizon");
      }
      std::vector<kin::KaPoint> ka(max_steps);
      for (int i = 0; i < max_steps; ++i) {
        const auto [ik, ia] = tok::unpack_token(tok::TrajTokenId{gen[i].traj_local},
                                                ka_cfg.a_grid.bins, ka_cfg.kappa_grid.bins);
        ka[i] = kin::KaPoint{ka_cfg.kappa_grid.dequantize(ik), ka_cfg.a_grid.dequantize(ia)};
      }
      std::vector<kin::EgoState> pred =
          kin::ka_rollout(ep.frames[c].pose, ep.frames[c].v, ka, dt);
      if (refiner) {
        pred = refiner(e, pred);
      }
      for (OpenLoopRow& r : rows) {
        double sum_d = 0.0, sum_h = 0.0, fde = 0.0;
        for (int t = 1; t <= r.steps; ++t) {
          const kin::EgoState& gt = ep.frames[c + t].pose;
          const double dx = pred[t].x - gt.x;
          const double dy = pred[t].y - gt.y;
          const double d = std::sqrt(dx * dx + dy * dy);
          sum_d += d;
          sum_h += std::abs(kin::wrap_angle(pred[t].yaw - gt.yaw));
          if (t == r.steps) fde = d;
        }
        r.ade += sum_d / r.steps;
        r.fde += fde;
        r.ahe += sum_h / r.steps;
        ++r.count;
      }
    }
  }
  for (OpenLoopRow& r : rows) {
    if (r.count == 0) {
      throw SizeError("open_loop_eval: no usable anchors (episodes too short)");
    }
    r.ade /= r.count;
    r.fde /= r.count;
    r.ahe /= r.count;
  }
  return rows;
}

}  // namespace tokenplan::sim
