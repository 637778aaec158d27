#include "tokenplan/bevq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "tokenplan/common.hpp"

namespace tokenplan::bevq {

BevGrid BevGrid::filled(int height, int width, int n_classes, double resolution,
                        std::uint8_t value) {
  if (height <= 0 || width <= 0 || n_classes <= 0 || value >= n_classes) {
    throw ConfigError("BevGrid: bad dimensions");
  }
  BevGrid g;
  g.height = height;
  g.width = width;
  g.n_classes = n_classes;
  g.resolution = resolution;
  g.cells.assign(static_cast<std::size_t>(height) * width, value);
  return g;
}

std::vector<std::vector<double>> patchify(const BevGrid& grid, int patch_h, int patch_w) {
  if (patch_h <= 0 || patch_w <= 0 || grid.height % patch_h != 0 || grid.width % patch_w != 0) {
    throw SizeError("patchify: grid dimensions not divisible by patch size");
  }
  const int h = grid.height / patch_h;
  const int w = grid.width / patch_w;
  const int dim = patch_h * patch_w * grid.n_classes;
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(h) * w);
  for (int pr = 0; pr < h; ++pr) {
    for (int pc = 0; pc < w; ++pc) {
      std::vector<double> v(dim, 0.0);
      for (int r = 0; r < patch_h; ++r) {
        for (int c = 0; c < patch_w; ++c) {
          const std::uint8_t cls = grid.at(pr * patch_h + r, pc * patch_w + c);
          if (cls >= grid.n_classes) {
            throw DomainError("patchify: cell class out of range");
          }
          v[(static_cast<std::size_t>(r) * patch_w + c) * grid.n_classes + cls] = 1.0;
        }
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

BevGrid unpatchify(const std::vector<std::vector<double>>& vectors, int height, int width,
                   int patch_h, int patch_w, int n_classes, double resolution) {
  const int h = height / patch_h;
  const int w = width / patch_w;
  if (h * patch_h != height || w * patch_w != width ||
      vectors.size() != static_cast<std::size_t>(h) * w) {
    throw SizeError("unpatchify: shape mismatch");
  }
  BevGrid g = BevGrid::filled(height, width, n_classes, resolution, 0);
  for (int pr = 0; pr < h; ++pr) {
    for (int pc = 0; pc < w; ++pc) {
      const std::vector<double>& v = vectors[static_cast<std::size_t>(pr) * w + pc];
      for (int r = 0; r < patch_h; ++r) {
        for (int c = 0; c < patch_w; ++c) {
          const double* scores = v.data() + (static_cast<std::size_t>(r) * patch_w + c) * n_classes;
          int best = 0;
          for (int k = 1; k < n_classes; ++k) {
            if (scores[k] > scores[best]) best = k;
          }
          g.set(pr * patch_h + r, pc * patch_w + c, static_cast<std::uint8_t>(best));
        }
      }
    }
  }
  return g;
}

namespace {

double sq_dist(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

int nearest_entry(const double* v, const Codebook& cb) {
  int best = 0;
  double best_d = sq_dist(v, cb.entry(0), cb.dim);
  for (int k = 1; k < cb.k; ++k) {
    const double d = sq_dist(v, cb.entry(k), cb.dim);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

Codebook fit_codebook(const std::vector<std::vector<double>>& vectors, int k, std::uint64_t seed,
                      int patch_h, int patch_w, int n_classes, int max_iters) {
  if (k < 1) {
    throw ConfigError("fit_codebook: k must be positive");
  }
  if (vectors.size() < static_cast<std::size_t>(k)) {
    throw ConfigError("fit_codebook: fewer samples than codebook entries");
  }
  const int dim = static_cast<int>(vectors[0].size());
  const std::size_t n = vectors.size();

  Codebook cb;
  cb.k = k;
  cb.dim = dim;
  cb.patch_h = patch_h;
  cb.patch_w = patch_w;
  cb.n_classes = n_classes;
  cb.entries.assign(static_cast<std::size_t>(k) * dim, 0.0);

  // k-means++ seeding
  Rng rng(seed);
  std::vector<double> min_d(n, std::numeric_limits<double>::max());
  std::size_t first = rng() % n;
  std::memcpy(cb.entries.data(), vectors[first].data(), sizeof(double) * dim);
  for (int ki = 1; ki < k; ++ki) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = sq_dist(vectors[i].data(), cb.entry(ki - 1), dim);
      min_d[i] = std::min(min_d[i], d);
      total += min_d[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng() % n;  // all points coincide with chosen centers
    } else {
      const double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_d[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    }
    std::memcpy(cb.entries.data() + static_cast<std::size_t>(ki) * dim, vectors[pick].data(),
                sizeof(double) * dim);
  }

  std::vector<int> assign(n, 0);
  std::vector<double> sums(static_cast<std::size_t>(k) * dim);
  std::vector<std::size_t> counts(k);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = nearest_entry(vectors[i].data(), cb);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      double* s = sums.data() + static_cast<std::size_t>(assign[i]) * dim;
      const double* v = vectors[i].data();
      for (int d = 0; d < dim; ++d) s[d] += v[d];
      ++counts[assign[i]];
    }
    for (int ki = 0; ki < k; ++ki) {
      double* e = cb.entries.data() + static_cast<std::size_t>(ki) * dim;
      if (counts[ki] == 0) {
        // reseed to the point farthest from its centroid
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(vectors[i].data(), cb.entry(assign[i]), dim);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        std::memcpy(e, vectors[far].data(), sizeof(double) * dim);
        changed = true;
      } else {
        for (int d = 0; d < dim; ++d) e[d] = sums[static_cast<std::size_t>(ki) * dim + d] / counts[ki];
      }
    }
    if (!changed && iter > 0) break;
  }
  return cb;
}

double kmeans_objective(const std::vector<std::vector<double>>& vectors, const Codebook& cb) {
  double total = 0.0;
  for (const auto& v : vectors) {
    const int a = nearest_entry(v.data(), cb);
    total += sq_dist(v.data(), cb.entry(a), cb.dim);
  }
  return total;
}

BevTokenGrid encode(const BevGrid& grid, const Codebook& cb) {
  if (cb.n_classes != grid.n_classes || grid.height % cb.patch_h != 0 ||
      grid.width % cb.patch_w != 0) {
    throw ConfigError("encode: codebook does not match grid");
  }
  if (cb.dim != cb.patch_h * cb.patch_w * cb.n_classes) {
    throw ConfigError("encode: codebook dimension mismatch");
  }
  BevTokenGrid out;
  out.h = grid.height / cb.patch_h;
  out.w = grid.width / cb.patch_w;
  out.idx.resize(static_cast<std::size_t>(out.h) * out.w);

  // ||z - e||^2 = ||z||^2 + ||e||^2 - 2<z,e>; z is one-hot per cell, so the
  // dot product is a sparse gather over the patch's class indices.
  const int cells = cb.patch_h * cb.patch_w;
  std::vector<double> entry_sq(cb.k);
  for (int k = 0; k < cb.k; ++k) {
    double acc = 0.0;
    const double* e = cb.entry(k);
    for (int d = 0; d < cb.dim; ++d) acc += e[d] * e[d];
    entry_sq[k] = acc;
  }
  std::vector<int> hot(cells);
  for (int pr = 0; pr < out.h; ++pr) {
    for (int pc = 0; pc < out.w; ++pc) {
      for (int r = 0; r < cb.patch_h; ++r) {
        for (int c = 0; c < cb.patch_w; ++c) {
          const std::uint8_t cls = grid.at(pr * cb.patch_h + r, pc * cb.patch_w + c);
          if (cls >= grid.n_classes) {
            throw DomainError("encode: cell class out of range");
          }
          hot[r * cb.patch_w + c] = (r * cb.patch_w + c) * cb.n_classes + cls;
        }
      }
      int best = 0;
      double best_d = std::numeric_limits<double>::max();
      for (int k = 0; k < cb.k; ++k) {
        const double* e = cb.entry(k);
        double dot = 0.0;
        for (int i = 0; i < cells; ++i) dot += e[hot[i]];
        const double d = entry_sq[k] + cells - 2.0 * dot;
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      out.idx[static_cast<std::size_t>(pr) * out.w + pc] = best;
    }
  }
  return out;
}

BevGrid decode(const BevTokenGrid& tokens, const Codebook& cb, double resolution) {
  BevGrid g = BevGrid::filled(tokens.h * cb.patch_h, tokens.w * cb.patch_w, cb.n_classes,
                              resolution, 0);
  for (int pr = 0; pr < tokens.h; ++pr) {
    for (int pc = 0; pc < tokens.w; ++pc) {
      const std::int32_t k = tokens.at(pr, pc);
      if (k < 0 || k >= cb.k) {
        throw DomainError("decode: token index out of range");
      }
      const double* e = cb.entry(k);
      for (int r = 0; r < cb.patch_h; ++r) {
        for (int c = 0; c < cb.patch_w; ++c) {
          const double* scores = e + (static_cast<std::size_t>(r) * cb.patch_w + c) * cb.n_classes;
          int best = 0;
          for (int cls = 1; cls < cb.n_classes; ++cls) {
            if (scores[cls] > scores[best]) best = cls;
          }
          g.set(pr * cb.patch_h + r, pc * cb.patch_w + c, static_cast<std::uint8_t>(best));
        }
      }
    }
  }
  return g;
}

double recon_accuracy(const BevGrid& a, const BevGrid& b) {
  if (a.height != b.height || a.width != b.width) {
    throw SizeError("recon_accuracy: shape mismatch");
  }
  std::size_t match = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    if (a.cells[i] == b.cells[i]) ++match;
  }
  return static_cast<double>(match) / static_cast<double>(a.cells.size());
}

namespace {
constexpr char kMagic[8] = {'T', 'P', 'B', 'Q', '0', '0', '0', '1'};
}

void save_codebook(const Codebook& cb, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("save_codebook: cannot open " + path);
  }
  f.write(kMagic, sizeof(kMagic));
  const std::int32_t header[5] = {cb.k, cb.dim, cb.patch_h, cb.patch_w, cb.n_classes};
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  f.write(reinterpret_cast<const char*>(cb.entries.data()),
          static_cast<std::streamsize>(cb.entries.size() * sizeof(double)));
  if (!f) {
    throw IoError("save_codebook: write failed for " + path);
  }
}

Codebook load_codebook(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("load_codebook: cannot open " + path);
  }
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("load_codebook: bad magic in " + path);
  }
  std::int32_t header[5];
  f.read(reinterpret_cast<char*>(header), sizeof(header));
  Codebook cb;
  cb.k = header[0];
  cb.dim = header[1];
  cb.patch_h = header[2];
  cb.patch_w = header[3];
  cb.n_classes = header[4];
  if (cb.k <= 0 || cb.dim <= 0 || cb.dim != cb.patch_h * cb.patch_w * cb.n_classes) {
    throw IoError("load_codebook: inconsistent header in " + path);
  }
  cb.entries.resize(static_cast<std::size_t>(cb.k) * cb.dim);
  f.read(reinterpret_cast<char*>(cb.entries.data()),
         static_cast<std::streamsize>(cb.entries.size() * sizeof(double)));
  if (!f) {
    throw IoError("load_codebook: truncated file " + path);
  }
  return cb;
}

}  // namespace tokenplan::bevq
