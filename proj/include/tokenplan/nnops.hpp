#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace tokenplan::nn {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y = W x + b with W row-major (out x in)
inline void linear_fwd(const double* w, const double* b, const double* x, double* y, int out,
                       int in) {
  for (int o = 0; o < out; ++o) {
    const double* wr = w + static_cast<std::size_t>(o) * in;
    double acc = b != nullptr ? b[o] : 0.0;
    for (int i = 0; i < in; ++i) acc += wr[i] * x[i];
    y[o] = acc;
  }
}

inline void linear_bwd(const double* w, const double* x, const double* dy, double* dw, double* db,
                       double* dx, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    double* dwr = dw + static_cast<std::size_t>(o) * in;
    const double* wr = w + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) dwr[i] += g * x[i];
    if (db != nullptr) db[o] += g;
    if (dx != nullptr) {
      for (int i = 0; i < in; ++i) dx[i] += g * wr[i];
    }
  }
}

inline void layernorm_fwd(const double* g, const double* b, const double* x, double* y,
                          double* mean_out, double* rstd_out, int d) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + 1e-5);
  for (int i = 0; i < d; ++i) {
    y[i] = (x[i] - mean) * rstd * g[i] + b[i];
  }
  *mean_out = mean;
  *rstd_out = rstd;
}

inline void layernorm_bwd(const double* g, const double* x, double mean, double rstd,
                          const double* dy, double* dg, double* db, double* dx, int d) {
  double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
  }
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    dx[i] += rstd * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
  }
}

inline void softmax_inplace(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

inline double logsumexp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  return mx + std::log(sum);
}

}  // namespace tokenplan::nn
