#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tokenplan/kinematics.hpp"

namespace tokenplan::tok {

// Uniform scalar grid following the bins = range/step convention (no +1).
// Dequantization returns bin centers; out-of-range inputs saturate.
struct UniformGrid {
  double lo = 0.0;
  double hi = 0.0;
  double step = 0.0;
  int bins = 0;

  static UniformGrid make(double lo, double hi, double step);

  int quantize(double x) const;
  double dequantize(int index) const;
  bool in_range(double x) const { return x >= lo && x <= hi; }
};

struct KaGridConfig {
  UniformGrid kappa_grid;
  UniformGrid a_grid;
  std::int64_t codebook_size() const;
};

struct XyGridConfig {
  UniformGrid x_grid;
  UniformGrid y_grid;
  UniformGrid yaw_grid;
  std::int64_t codebook_size() const;
};

// Per-channel DCT coefficient quantizer: uniform step q with L (even) integer
// levels producing indices in [-L/2, L/2-1].
struct DctChannel {
  std::string name;
  double q = 0.0;
  int levels = 0;
};

struct DctConfig {
  std::vector<DctChannel> channels;  // {x,y,yaw} or {kappa,a}
  int horizon = 0;                   // frame count the transform spans
  std::int64_t codebook_size() const;
};

// Packed per-step trajectory token: value = i_kappa * A + i_a.
struct TrajTokenId {
  std::int32_t value = 0;
};

TrajTokenId pack_token(int i_kappa, int i_a, int a_bins, int kappa_bins);
std::pair<int, int> unpack_token(TrajTokenId token, int a_bins, int kappa_bins);

std::vector<TrajTokenId> ka_tokenize(const std::vector<kin::EgoState>& states, double dt,
                                     const KaGridConfig& config, double eps = kin::kDefaultEps,
                                     int* saturations = nullptr);
std::vector<kin::EgoState> ka_detokenize(const std::vector<TrajTokenId>& tokens,
                                         const kin::EgoState& start, double v0, double dt,
                                         const KaGridConfig& config);

// Orthonormal DCT-II forward / DCT-III inverse pair.
std::vector<double> dct_forward(const std::vector<double>& seq);
std::vector<double> dct_inverse(const std::vector<double>& coeffs);

std::vector<int> dct_quantize(const std::vector<double>& coeffs, double q, int levels);
std::vector<double> dct_dequantize(const std::vector<int>& indices, double q);

// Unified vocabulary: disjoint contiguous ranges, command ids first, then BEV,
// then trajectory.
enum class Modality { command = 0, bev = 1, traj = 2 };

struct VocabLayout {
  int n_command = 0;
  int n_bev = 0;
  int n_traj = 0;

  int command_offset() const { return 0; }
  int bev_offset() const { return n_command; }
  int traj_offset() const { return n_command + n_bev; }
  int total() const { return n_command + n_bev + n_traj; }
  int offset(Modality m) const;
  int size(Modality m) const;
};

int vocab_map(const VocabLayout& layout, Modality modality, int local_index);
std::pair<Modality, int> vocab_unmap(const VocabLayout& layout, int global_id);

// ---------------------------------------------------------------------------
// Reconstruction benchmarking over pose windows.

struct CodecResult {
  std::vector<kin::EgoState> recon;  // aligned with window indices from 0
  int saturations = 0;
};

class TrajCodec {
 public:
  virtual ~TrajCodec() = default;
  virtual std::string scheme() const = 0;
  virtual std::string config_name() const = 0;
  virtual std::int64_t codebook_size() const = 0;
  // Minimum window length the codec can reconstruct a full horizon from.
  virtual std::size_t extra_states() const { return 0; }
  virtual CodecResult roundtrip(const std::vector<kin::EgoState>& window, double dt) const = 0;
};

std::unique_ptr<TrajCodec> make_identity_codec();
std::unique_ptr<TrajCodec> make_ka_fb_codec(std::string config_name, const KaGridConfig& cfg);
std::unique_ptr<TrajCodec> make_xy_fb_codec(std::string config_name, const XyGridConfig& cfg);
std::unique_ptr<TrajCodec> make_dct_xy_codec(std::string config_name, const DctConfig& cfg);
std::unique_ptr<TrajCodec> make_dct_ka_codec(std::string config_name, const DctConfig& cfg);

// Named configurations from the discretization study tables.
KaGridConfig ka_fb_config(char variant);   // 'A'..'D'
XyGridConfig xy_fb_config(char variant);   // 'A'..'D'
DctConfig dct_xy_config(char variant, int horizon);  // 'A','B'
DctConfig dct_ka_config(char variant, int horizon);  // 'C','D'

struct ReconMetrics {
  double ade = 0.0;  // mean displacement, meters
  double fde = 0.0;  // final displacement, meters
  double ahe = 0.0;  // mean absolute wrapped heading error, radians
};

struct CiInterval {
  double level = 0.0;
  ReconMetrics lo;
  ReconMetrics hi;
};

struct HorizonReport {
  double horizon_s = 0.0;
  int steps = 0;
  ReconMetrics mean;
  std::vector<CiInterval> cis;
};

struct SchemeReport {
  std::string scheme;
  std::string config;
  std::int64_t codebook_size = 0;
  int saturations = 0;
  std::vector<HorizonReport> horizons;
};

// Tokenize/detokenize each window and measure displacement and heading errors
// per requested horizon; confidence intervals are empirical two-sided
// quantiles over per-window metrics.
SchemeReport recon_benchmark(const std::vector<std::vector<kin::EgoState>>& windows,
                             const TrajCodec& codec, const std::vector<double>& horizons_s,
                             double dt, const std::vector<double>& ci_levels);

}  // namespace tokenplan::tok
