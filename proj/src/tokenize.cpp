#include "tokenplan/tokenize.hpp"

#include <algorithm>
#include <cmath>

#include "tokenplan/common.hpp"

namespace tokenplan::tok {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

UniformGrid UniformGrid::make(double lo, double hi, double step) {
  if (!(hi > lo)) {
    throw ConfigError("UniformGrid: hi must exceed lo");
  }
  if (!(step > 0.0)) {
    throw ConfigError("UniformGrid: step must be positive");
  }
  const double ratio = (hi - lo) / step;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, std::abs(ratio)) || rounded < 1.0) {
    throw ConfigError("UniformGrid: range must be an integer multiple of step");
  }
  UniformGrid g;
  g.lo = lo;
  g.hi = hi;
  g.step = step;
  g.bins = static_cast<int>(rounded);
  return g;
}

int UniformGrid::quantize(double x) const {
  if (!std::isfinite(x)) {
    throw DomainError("UniformGrid::quantize: non-finite input");
  }
  const int i = static_cast<int>(std::floor((x - lo) / step));
  return std::clamp(i, 0, bins - 1);
}

double UniformGrid::dequantize(int index) const {
  if (index < 0 || index >= bins) {
    throw DomainError("UniformGrid::dequantize: index out of range");
  }
  return lo + (index + 0.5) * step;
}

std::int64_t KaGridConfig::codebook_size() const {
  return static_cast<std::int64_t>(kappa_grid.bins) * a_grid.bins;
}

std::int64_t XyGridConfig::codebook_size() const {
  return static_cast<std::int64_t>(x_grid.bins) * y_grid.bins * yaw_grid.bins;
}

std::int64_t DctConfig::codebook_size() const {
  std::int64_t n = 1;
  for (const DctChannel& c : channels) {
    n *= c.levels;
  }
  return n;
}

TrajTokenId pack_token(int i_kappa, int i_a, int a_bins, int kappa_bins) {
  if (i_a < 0 || i_a >= a_bins || i_kappa < 0 || i_kappa >= kappa_bins) {
    throw DomainError("pack_token: index out of range");
  }
  return TrajTokenId{static_cast<std::int32_t>(i_kappa) * a_bins + i_a};
}

std::pair<int, int> unpack_token(TrajTokenId token, int a_bins, int kappa_bins) {
  const std::int64_t total = static_cast<std::int64_t>(a_bins) * kappa_bins;
  if (token.value < 0 || token.value >= total) {
    throw DomainError("unpack_token: token out of range");
  }
  return {token.value / a_bins, token.value % a_bins};
}

std::vector<TrajTokenId> ka_tokenize(const std::vector<kin::EgoState>& states, double dt,
                                     const KaGridConfig& config, double eps, int* saturations) {
  const std::vector<kin::KaPoint> ka = kin::states_to_ka(states, dt, eps);
  std::vector<TrajTokenId> out;
  out.reserve(ka.size());
  int sat = 0;
  for (const kin::KaPoint& p : ka) {
    if (!config.kappa_grid.in_range(p.kappa)) ++sat;
    if (!config.a_grid.in_range(p.a)) ++sat;
    out.push_back(pack_token(config.kappa_grid.quantize(p.kappa), config.a_grid.quantize(p.a),
                             config.a_grid.bins, config.kappa_grid.bins));
  }
  if (saturations != nullptr) {
    *saturations += sat;
  }
  return out;
}

std::vector<kin::EgoState> ka_detokenize(const std::vector<TrajTokenId>& tokens,
                                         const kin::EgoState& start, double v0, double dt,
                                         const KaGridConfig& config) {
  std::vector<kin::KaPoint> ka;
  ka.reserve(tokens.size());
  for (const TrajTokenId& t : tokens) {
    const auto [ik, ia] = unpack_token(t, config.a_grid.bins, config.kappa_grid.bins);
    ka.push_back(kin::KaPoint{config.kappa_grid.dequantize(ik), config.a_grid.dequantize(ia)});
  }
  return kin::ka_rollout(start, v0, ka, dt);
}

std::vector<double> dct_forward(const std::vector<double>& seq) {
  const std::size_t n = seq.size();
  if (n == 0) {
    throw SizeError("dct_forward: empty sequence");
  }
  std::vector<double> out(n, 0.0);
  const double s0 = std::sqrt(1.0 / static_cast<double>(n));
  const double sk = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += seq[i] * std::cos(kPi * (2.0 * i + 1.0) * k / (2.0 * n));
    }
    out[k] = (k == 0 ? s0 : sk) * acc;
  }
  return out;
}

std::vector<double> dct_inverse(const std::vector<double>& coeffs) {
  const std::size_t n = coeffs.size();
  if (n == 0) {
    throw SizeError("dct_inverse: empty sequence");
  }
  std::vector<double> out(n, 0.0);
  const double s0 = std::sqrt(1.0 / static_cast<double>(n));
  const double sk = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double acc = s0 * coeffs[0];
    for (std::size_t k = 1; k < n; ++k) {
      acc += sk * coeffs[k] * std::cos(kPi * (2.0 * i + 1.0) * k / (2.0 * n));
    }
    out[i] = acc;
  }
  return out;
}

std::vector<int> dct_quantize(const std::vector<double>& coeffs, double q, int levels) {
  if (levels <= 0 || levels % 2 != 0) {
    throw ConfigError("dct_quantize: level count must be positive and even");
  }
  if (!(q > 0.0)) {
    throw ConfigError("dct_quantize: step must be positive");
  }
  std::vector<int> out(coeffs.size());
  const int lo = -levels / 2;
  const int hi = levels / 2 - 1;
  for (std::size_t i = 0; i < coeffs.size(); ++i) {
    const long idx = std::lround(coeffs[i] / q);
    out[i] = static_cast<int>(std::clamp(idx, static_cast<long>(lo), static_cast<long>(hi)));
  }
  return out;
}

std::vector<double> dct_dequantize(const std::vector<int>& indices, double q) {
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out[i] = indices[i] * q;
  }
  return out;
}

int VocabLayout::offset(Modality m) const {
  switch (m) {
    case Modality::command:
      return command_offset();
    case Modality::bev:
      return bev_offset();
    case Modality::traj:
      return traj_offset();
  }
  throw DomainError("VocabLayout::offset: bad modality");
}

int VocabLayout::size(Modality m) const {
  switch (m) {
    case Modality::command:
      return n_command;
    case Modality::bev:
      return n_bev;
    case Modality::traj:
      return n_traj;
  }
  throw DomainError("VocabLayout::size: bad modality");
}

int vocab_map(const VocabLayout& layout, Modality modality, int local_index) {
  if (local_index < 0 || local_index >= layout.size(modality)) {
    throw DomainError("vocab_map: local index out of range");
  }
  return layout.offset(modality) + local_index;
}

std::pair<Modality, int> vocab_unmap(const VocabLayout& layout, int global_id) {
  if (global_id < 0 || global_id >= layout.total()) {
    throw DomainError("vocab_unmap: id out of range");
  }
  if (global_id < layout.bev_offset()) {
    return {Modality::command, global_id};
  }
  if (global_id < layout.traj_offset()) {
    return {Modality::bev, global_id - layout.bev_offset()};
  }
  return {Modality::traj, global_id - layout.traj_offset()};
}

// ---------------------------------------------------------------------------
// Codecs

namespace {

// Transform a window into the frame of its first pose (and back).
struct LocalFrame {
  double ox, oy, oyaw, c, s;

  explicit LocalFrame(const kin::EgoState& origin)
      : ox(origin.x), oy(origin.y), oyaw(origin.yaw), c(std::cos(origin.yaw)),
        s(std::sin(origin.yaw)) {}

  kin::EgoState to_local(const kin::EgoState& w) const {
    const double dx = w.x - ox;
    const double dy = w.y - oy;
    return kin::EgoState{c * dx + s * dy, -s * dx + c * dy, kin::wrap_angle(w.yaw - oyaw)};
  }
  kin::EgoState to_world(const kin::EgoState& l) const {
    return kin::EgoState{ox + c * l.x - s * l.y, oy + s * l.x + c * l.y,
                         kin::wrap_angle(l.yaw + oyaw)};
  }
};

double initial_speed(const std::vector<kin::EgoState>& window, double dt) {
  const double dx = window[1].x - window[0].x;
  const double dy = window[1].y - window[0].y;
  return std::sqrt(dx * dx + dy * dy) / dt;
}

std::vector<double> unwrap_yaw(const std::vector<kin::EgoState>& states) {
  std::vector<double> out(states.size());
  if (states.empty()) return out;
  out[0] = states[0].yaw;
  for (std::size_t i = 1; i < states.size(); ++i) {
    out[i] = out[i - 1] + kin::wrap_angle(states[i].yaw - states[i - 1].yaw);
  }
  return out;
}

class IdentityCodec final : public TrajCodec {
 public:
  std::string scheme() const override { return "identity"; }
  std::string config_name() const override { return "-"; }
  std::int64_t codebook_size() const override { return 0; }
  CodecResult roundtrip(const std::vector<kin::EgoState>& window, double) const override {
    return CodecResult{window, 0};
  }
};

class KaFbCodec final : public TrajCodec {
 public:
  KaFbCodec(std::string name, KaGridConfig cfg) : name_(std::move(name)), cfg_(cfg) {}
  std::string scheme() const override { return "fb-ka"; }
  std::string config_name() const override { return name_; }
  std::int64_t codebook_size() const override { return cfg_.codebook_size(); }
  std::size_t extra_states() const override { return 2; }
  CodecResult roundtrip(const std::vector<kin::EgoState>& window, double dt) const override {
    CodecResult res;
    const std::vector<TrajTokenId> tokens =
        ka_tokenize(window, dt, cfg_, kin::kDefaultEps, &res.saturations);
    res.recon = ka_detokenize(tokens, window[0], initial_speed(window, dt), dt, cfg_);
    return res;
  }

 private:
  std::string name_;
  KaGridConfig cfg_;
};

class XyFbCodec final : public TrajCodec {
 public:
  XyFbCodec(std::string name, XyGridConfig cfg) : name_(std::move(name)), cfg_(cfg) {}
  std::string scheme() const override { return "fb-xy"; }
  std::string config_name() const override { return name_; }
  std::int64_t codebook_size() const override { return cfg_.codebook_size(); }
  CodecResult roundtrip(const std::vector<kin::EgoState>& window, double) const override {
    CodecResult res;
    res.recon.reserve(window.size());
    const LocalFrame frame(window[0]);
    for (const kin::EgoState& w : window) {
      const kin::EgoState l = frame.to_local(w);
      if (!cfg_.x_grid.in_range(l.x)) ++res.saturations;
      if (!cfg_.y_grid.in_range(l.y)) ++res.saturations;
      if (!cfg_.yaw_grid.in_range(l.yaw)) ++res.saturations;
      const kin::EgoState q{cfg_.x_grid.dequantize(cfg_.x_grid.quantize(l.x)),
                            cfg_.y_grid.dequantize(cfg_.y_grid.quantize(l.y)),
                            cfg_.yaw_grid.dequantize(cfg_.yaw_grid.quantize(l.yaw))};
      res.recon.push_back(frame.to_world(q));
    }
    return res;
  }

 private:
  std::string name_;
  XyGridConfig cfg_;
};

class DctXyCodec final : public TrajCodec {
 public:
  DctXyCodec(std::string name, DctConfig cfg) : name_(std::move(name)), cfg_(std::move(cfg)) {
    if (cfg_.channels.size() != 3) {
      throw ConfigError("DctXyCodec: expected x,y,yaw channels");
    }
  }
  std::string scheme() const override { return "dct-xy"; }
  std::string config_name() const override { return name_; }
  std::int64_t codebook_size() const override { return cfg_.codebook_size(); }
  CodecResult roundtrip(const std::vector<kin::EgoState>& window, double) const override {
    const std::size_t n = window.size();
    const LocalFrame frame(window[0]);
    std::vector<double> xs(n), ys(n);
    std::vector<kin::EgoState> local(n);
    for (std::size_t i = 0; i < n; ++i) {
      local[i] = frame.to_local(window[i]);
      xs[i] = local[i].x;
      ys[i] = local[i].y;
    }
    const std::vector<double> yaws = unwrap_yaw(local);

    CodecResult res;
    const std::vector<double> rx = channel_roundtrip(xs, cfg_.channels[0], &res.saturations);
    const std::vector<double> ry = channel_roundtrip(ys, cfg_.channels[1], &res.saturations);
    const std::vector<double> ryaw = channel_roundtrip(yaws, cfg_.channels[2], &res.saturations);
    res.recon.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      res.recon[i] = frame.to_world(kin::EgoState{rx[i], ry[i], kin::wrap_angle(ryaw[i])});
    }
    return res;
  }

  static std::vector<double> channel_roundtrip(const std::vector<double>& seq,
                                               const DctChannel& ch, int* saturations) {
    const std::vector<double> coeffs = dct_forward(seq);
    const double cmax = (ch.levels / 2 - 1) * ch.q;
    const double cmin = -(ch.levels / 2) * ch.q;
    for (double c : coeffs) {
      if (c < cmin - 0.5 * ch.q || c > cmax + 0.5 * ch.q) ++*saturations;
    }
    return dct_inverse(dct_dequantize(dct_quantize(coeffs, ch.q, ch.levels), ch.q));
  }

 private:
  std::string name_;
  DctConfig cfg_;
};

class DctKaCodec final : public TrajCodec {
 public:
  DctKaCodec(std::string name, DctConfig cfg) : name_(std::move(name)), cfg_(std::move(cfg)) {
    if (cfg_.channels.size() != 2) {
      throw ConfigError("DctKaCodec: expected kappa,a channels");
    }
  }
  std::string scheme() const override { return "dct-ka"; }
  std::string config_name() const override { return name_; }
  std::int64_t codebook_size() const override { return cfg_.codebook_size(); }
  std::size_t extra_states() const override { return 2; }
  CodecResult roundtrip(const std::vector<kin::EgoState>& window, double dt) const override {
    const std::vector<kin::KaPoint> ka = kin::states_to_ka(window, dt);
    std::vector<double> kappa(ka.size()), acc(ka.size());
    for (std::size_t i = 0; i < ka.size(); ++i) {
      kappa[i] = ka[i].kappa;
      acc[i] = ka[i].a;
    }
    CodecResult res;
    const std::vector<double> rk =
        DctXyCodec::channel_roundtrip(kappa, cfg_.channels[0], &res.saturations);
    const std::vector<double> ra =
        DctXyCodec::channel_roundtrip(acc, cfg_.channels[1], &res.saturations);
    std::vector<kin::KaPoint> rka(ka.size());
    for (std::size_t i = 0; i < ka.size(); ++i) {
      rka[i] = kin::KaPoint{rk[i], ra[i]};
    }
    res.recon = kin::ka_rollout(window[0], initial_speed(window, dt), rka, dt);
    return res;
  }

 private:
  std::string name_;
  DctConfig cfg_;
};

}  // namespace

std::unique_ptr<TrajCodec> make_identity_codec() { return std::make_unique<IdentityCodec>(); }
std::unique_ptr<TrajCodec> make_ka_fb_codec(std::string config_name, const KaGridConfig& cfg) {
  return std::make_unique<KaFbCodec>(std::move(config_name), cfg);
}
std::unique_ptr<TrajCodec> make_xy_fb_codec(std::string config_name, const XyGridConfig& cfg) {
  return std::make_unique<XyFbCodec>(std::move(config_name), cfg);
}
std::unique_ptr<TrajCodec> make_dct_xy_codec(std::string config_name, const DctConfig& cfg) {
  return std::make_unique<DctXyCodec>(std::move(config_name), cfg);
}
std::unique_ptr<TrajCodec> make_dct_ka_codec(std::string config_name, const DctConfig& cfg) {
  return std::make_unique<DctKaCodec>(std::move(config_name), cfg);
}

KaGridConfig ka_fb_config(char variant) {
  switch (variant) {
    case 'A':
      return KaGridConfig{UniformGrid::make(-0.22, 0.22, 0.01), UniformGrid::make(-1.3, 1.3, 0.10)};
    case 'B':
      return KaGridConfig{UniformGrid::make(-0.48, 0.48, 0.01), UniformGrid::make(-1.9, 1.9, 0.10)};
    case 'C':
      return KaGridConfig{UniformGrid::make(-0.22, 0.22, 0.005),
                          UniformGrid::make(-1.3, 1.3, 0.05)};
    case 'D':
      return KaGridConfig{UniformGrid::make(-0.48, 0.48, 0.005),
                          UniformGrid::make(-1.9, 1.9, 0.05)};
    default:
      throw ConfigError("ka_fb_config: unknown variant");
  }
}

XyGridConfig xy_fb_config(char variant) {
  switch (variant) {
    case 'A':
      return XyGridConfig{UniformGrid::make(-16, 16, 0.5), UniformGrid::make(-16, 16, 0.5),
                          UniformGrid::make(-0.11, 0.11, 0.02)};
    case 'B':
      return XyGridConfig{UniformGrid::make(-22, 22, 0.5), UniformGrid::make(-22, 22, 0.5),
                          UniformGrid::make(-0.36, 0.36, 0.02)};
    case 'C':
      return XyGridConfig{UniformGrid::make(-16, 16, 0.25), UniformGrid::make(-16, 16, 0.25),
                          UniformGrid::make(-0.11, 0.11, 0.01)};
    case 'D':
      return XyGridConfig{UniformGrid::make(-22, 22, 0.25), UniformGrid::make(-22, 22, 0.25),
                          UniformGrid::make(-0.36, 0.36, 0.01)};
    default:
      throw ConfigError("xy_fb_config: unknown variant");
  }
}

DctConfig dct_xy_config(char variant, int horizon) {
  switch (variant) {
    case 'A':
      return DctConfig{{{"x", 2.0, 80}, {"y", 2.0, 80}, {"yaw", 0.01, 40}}, horizon};
    case 'B':
      return DctConfig{{{"x", 2.0, 120}, {"y", 2.0, 120}, {"yaw", 0.01, 50}}, horizon};
    default:
      throw ConfigError("dct_xy_config: unknown variant");
  }
}

DctConfig dct_ka_config(char variant, int horizon) {
  switch (variant) {
    case 'C':
      return DctConfig{{{"kappa", 0.01, 80}, {"a", 0.10, 80}}, horizon};
    case 'D':
      return DctConfig{{{"kappa", 0.008, 160}, {"a", 0.08, 160}}, horizon};
    default:
      throw ConfigError("dct_ka_config: unknown variant");
  }
}

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double pos = q * (static_cast<double>(v.size()) - 1.0);
  const std::size_t i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  if (i + 1 >= v.size()) return v.back();
  return v[i] * (1.0 - frac) + v[i + 1] * frac;
}

}  // namespace

SchemeReport recon_benchmark(const std::vector<std::vector<kin::EgoState>>& windows,
                             const TrajCodec& codec, const std::vector<double>& horizons_s,
                             double dt, const std::vector<double>& ci_levels) {
  if (windows.empty()) {
    throw SizeError("recon_benchmark: empty dataset");
  }
  SchemeReport report;
  report.scheme = codec.scheme();
  report.config = codec.config_name();
  report.codebook_size = codec.codebook_size();

  std::vector<CodecResult> results;
  results.reserve(windows.size());
  for (const auto& w : windows) {
    results.push_back(codec.roundtrip(w, dt));
    report.saturations += results.back().saturations;
  }

  for (double hs : horizons_s) {
    const int steps = static_cast<int>(std::llround(hs / dt));
    if (steps < 1) {
      throw ConfigError("recon_benchmark: horizon below one step");
    }
    HorizonReport hr;
    hr.horizon_s = hs;
    hr.steps = steps;
    std::vector<double> ades, fdes, ahes;
    ades.reserve(windows.size());
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
      const auto& gt = windows[wi];
      const auto& rec = results[wi].recon;
      if (rec.size() < static_cast<std::size_t>(steps) + 1) {
        throw SizeError("recon_benchmark: window shorter than horizon");
      }
      double sum_d = 0.0, sum_h = 0.0;
      double fde = 0.0;
      for (int t = 1; t <= steps; ++t) {
        const double dx = rec[t].x - gt[t].x;
        const double dy = rec[t].y - gt[t].y;
        const double d = std::sqrt(dx * dx + dy * dy);
        sum_d += d;
        sum_h += std::abs(kin::wrap_angle(rec[t].yaw - gt[t].yaw));
        if (t == steps) fde = d;
      }
      ades.push_back(sum_d / steps);
      fdes.push_back(fde);
      ahes.push_back(sum_h / steps);
    }
    double n = static_cast<double>(ades.size());
    for (std::size_t i = 0; i < ades.size(); ++i) {
      hr.mean.ade += ades[i] / n;
      hr.mean.fde += fdes[i] / n;
      hr.mean.ahe += ahes[i] / n;
    }
    for (double level : ci_levels) {
      if (level <= 0.0 || level >= 1.0) {
        throw ConfigError("recon_benchmark: ci level must be in (0,1)");
      }
      const double qlo = (1.0 - level) / 2.0;
      const double qhi = 1.0 - qlo;
      CiInterval ci;
      ci.level = level;
      ci.lo = ReconMetrics{quantile(ades, qlo), quantile(fdes, qlo), quantile(ahes, qlo)};
      ci.hi = ReconMetrics{quantile(ades, qhi), quantile(fdes, qhi), quantile(ahes, qhi)};
      hr.cis.push_back(ci);
    }
    report.horizons.push_back(std::move(hr));
  }
  return report;
}

}  // namespace tokenplan::tok
