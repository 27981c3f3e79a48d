#pragma once

// Straight-from-the-definition reference versions of the loss and metric
// functions, written without the library's helpers.

#include <algorithm>
#include <cmath>
#include <vector>

namespace pap::oracle {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// align_corners=false bilinear sample of an h x w grid at output (r, c) of H x W
inline double bilinear(const std::vector<double>& in, std::size_t h, std::size_t w, std::size_t H, std::size_t W,
                       std::size_t r, std::size_t c) {
  auto src = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    return s < 0 ? 0.0 : s;
  };
  const double sy = src(r, h, H), sx = src(c, w, W);
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ly = sy - static_cast<double>(y0), lx = sx - static_cast<double>(x0);
  return (1 - ly) * ((1 - lx) * in[y0 * w + x0] + lx * in[y0 * w + x1]) +
         ly * ((1 - lx) * in[y1 * w + x0] + lx * in[y1 * w + x1]);
}

// sum of the upsampled map over mask pixels (all pixels when mask is empty)
inline double footprint_sum(const std::vector<double>& S, std::size_t h, std::size_t w, std::size_t H, std::size_t W,
                            const std::vector<std::uint8_t>& mask) {
  double acc = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      if (mask.empty() || mask[r * W + c]) acc += bilinear(S, h, w, H, W, r, c);
  return acc;
}

// sorted, long double accumulation
inline std::pair<double, double> mae_mse(const std::vector<double>& p, const std::vector<double>& g) {
  std::vector<double> a, s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    a.push_back(std::fabs(g[i] - p[i]));
    s.push_back((g[i] - p[i]) * (g[i] - p[i]));
  }
  std::sort(a.begin(), a.end());
  std::sort(s.begin(), s.end());
  long double sa = 0, ss = 0;
  for (double v : a) sa += v;
  for (double v : s) ss += v;
  const auto n = static_cast<long double>(p.size());
  return {static_cast<double>(sa / n), std::sqrt(static_cast<double>(ss / n))};
}

// share of diffs strictly above gamma
inline double exceed_fraction(const std::vector<double>& diffs, double gamma) {
  double hit = 0;
  for (double d : diffs) hit += d > gamma ? 1.0 : 0.0;
  return hit / static_cast<double>(diffs.size());
}

// piecewise-linear through (0,1), (E/4,1), (E/2,0.5), (E,0.5)
inline double lambda_at(double e, double E) {
  const double xs[4] = {0, E / 4, E / 2, E}, ys[4] = {1, 1, 0.5, 0.5};
  for (int k = 0; k < 3; ++k)
    if (e >= xs[k] && e <= xs[k + 1]) return ys[k] + (ys[k + 1] - ys[k]) * (e - xs[k]) / (xs[k + 1] - xs[k]);
  return 0.5;
}

}  // namespace pap::oracle
