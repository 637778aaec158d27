#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tokenplan::bevq {

// Semantic class raster. Cells are row-major, cell (r, c) = cells[r*width+c].
struct BevGrid {
  int height = 0;
  int width = 0;
  int n_classes = 0;
  double resolution = 0.5;  // meters per cell
  std::vector<std::uint8_t> cells;

  static BevGrid filled(int height, int width, int n_classes, double resolution,
                        std::uint8_t value = 0);
  std::uint8_t at(int r, int c) const { return cells[static_cast<std::size_t>(r) * width + c]; }
  void set(int r, int c, std::uint8_t v) { cells[static_cast<std::size_t>(r) * width + c] = v; }
};

// Nearest-neighbor patch codebook. Entries are flattened one-hot patch
// vectors of dimension patch_h * patch_w * n_classes.
struct Codebook {
  int k = 0;
  int dim = 0;
  int patch_h = 0;
  int patch_w = 0;
  int n_classes = 0;
  std::vector<double> entries;  // k * dim, row-major

  const double* entry(int i) const { return entries.data() + static_cast<std::size_t>(i) * dim; }
};

// Latent grid of codebook indices, h = H/patch_h by w = W/patch_w.
struct BevTokenGrid {
  int h = 0;
  int w = 0;
  std::vector<std::int32_t> idx;

  std::int32_t at(int r, int c) const { return idx[static_cast<std::size_t>(r) * w + c]; }
};

// One-hot flatten each patch into a d-vector, patches in row-major order.
std::vector<std::vector<double>> patchify(const BevGrid& grid, int patch_h, int patch_w);

// Inverse of patchify for one-hot-like vectors: argmax class per cell.
BevGrid unpatchify(const std::vector<std::vector<double>>& vectors, int height, int width,
                   int patch_h, int patch_w, int n_classes, double resolution);

// Deterministic k-means (seeded k-means++ init, fixed iteration cap, empty
// clusters reseeded to farthest points).
Codebook fit_codebook(const std::vector<std::vector<double>>& vectors, int k, std::uint64_t seed,
                      int patch_h, int patch_w, int n_classes, int max_iters = 25);

double kmeans_objective(const std::vector<std::vector<double>>& vectors, const Codebook& cb);

// Nearest-neighbor assignment per patch, ties broken to the lowest index.
BevTokenGrid encode(const BevGrid& grid, const Codebook& cb);

// Reconstruct a class raster: argmax class per cell of each selected entry.
BevGrid decode(const BevTokenGrid& tokens, const Codebook& cb, double resolution);

// Fraction of cells whose class matches.
double recon_accuracy(const BevGrid& a, const BevGrid& b);

void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

}  // namespace tokenplan::bevq
