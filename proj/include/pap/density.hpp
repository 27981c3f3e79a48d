#pragma once

// Ground-truth density maps from head annotations, with geometry-adaptive
// or constant Gaussian kernels, plus resolution alignment and file formats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/io.hpp"
#include "pap/tensor.hpp"

namespace pap {

struct Point {
  double x = 0;  // column, px
  double y = 0;  // row, px
  friend bool operator==(const Point&, const Point&) = default;
};

struct PointSet {
  std::vector<Point> points;
  std::size_t image_w = 0;
  std::size_t image_h = 0;

  std::size_t size() const { return points.size(); }

  void validate() const {
    for (const auto& p : points)
      if (!(p.x >= 0 && p.x < static_cast<double>(image_w) && p.y >= 0 && p.y < static_cast<double>(image_h)))
        throw std::invalid_argument("point (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                                    ") outside image");
  }
  friend bool operator==(const PointSet&, const PointSet&) = default;
};

struct DensityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t scale = 1;  // source pixels per cell along each axis
  std::vector<float> values;

  DensityMap() = default;
  DensityMap(std::size_t h, std::size_t w, std::size_t s = 1) : height(h), width(w), scale(s), values(h * w, 0.0f) {}

  float& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  float at(std::size_t r, std::size_t c) const { return values[r * width + c]; }

  double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

  template <class T>
  Tensor<T> to_tensor() const {
    return Tensor<T>(Shape{1, 1, height, width}, std::vector<T>(values.begin(), values.end()));
  }

  friend bool operator==(const DensityMap&, const DensityMap&) = default;
};

template <class T>
DensityMap density_from_tensor(const Tensor<T>& t, std::size_t scale = 1) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
    throw ShapeError("density map tensor must be [1,1,H,W], got " + to_string(t.shape()));
  DensityMap m(t.dim(2), t.dim(3), scale);
  std::transform(t.data().begin(), t.data().end(), m.values.begin(), [](T v) { return static_cast<float>(v); });
  return m;
}

// One training example: image [1,C,H,W] and its ground truth already
// downsampled (mass-preserving) to the model's output resolution.
template <class T>
struct Sample {
  Tensor<T> image;
  DensityMap target;
};

// Mean Euclidean distance from each point to its min(k, N-1) nearest others.
inline std::vector<double> knn_avg_distance(const PointSet& ps, std::size_t k) {
  const std::size_t n = ps.size();
  if (n < 2) throw std::invalid_argument("knn_avg_distance needs at least 2 points");
  if (k == 0) throw std::invalid_argument("knn_avg_distance: k must be positive");
  const std::size_t kk = std::min(k, n - 1);
  std::vector<double> out(n);
  std::vector<double> d;
  d.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    d.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.push_back(std::hypot(ps.points[i].x - ps.points[j].x, ps.points[i].y - ps.points[j].y));
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(kk), d.end());
    out[i] = std::accumulate(d.begin(), d.begin() + static_cast<long>(kk), 0.0) / static_cast<double>(kk);
  }
  return out;
}

enum class KernelMode { adaptive, constant };

struct DensityConfig {
  KernelMode mode = KernelMode::adaptive;
  double beta = 0.3;
  std::size_t k = 3;
  double sigma_const = 15.0;
  // Adaptive sigmas are floored here so coincident heads stay a finite impulse.
  double min_sigma = 0.25;
};

// Adaptive when the scene has at least 4 heads, constant otherwise.
inline KernelMode default_kernel_mode(std::size_t n_heads) {
  return n_heads >= 4 ? KernelMode::adaptive : KernelMode::constant;
}

namespace detail {

// Accumulates a unit-mass Gaussian truncated at radius ceil(4 sigma) around
// pixel (floor(y), floor(x)). Window cells outside the image are dropped
// after normalisation.
inline void splat_gaussian(DensityMap& map, const Point& p, double sigma) {
  const long R = static_cast<long>(std::ceil(4.0 * sigma));
  const long cx = static_cast<long>(std::floor(p.x));
  const long cy = static_cast<long>(std::floor(p.y));
  const std::size_t side = static_cast<std::size_t>(2 * R + 1);
  std::vector<double> win(side * side);
  double z = 0;
  for (long di = -R; di <= R; ++di)
    for (long dj = -R; dj <= R; ++dj) {
      const double dy = static_cast<double>(cy + di) - p.y;
      const double dx = static_cast<double>(cx + dj) - p.x;
      const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      win[static_cast<std::size_t>((di + R) * (2 * R + 1) + (dj + R))] = g;
      z += g;
    }
  for (long di = -R; di <= R; ++di) {
    const long r = cy + di;
    if (r < 0 || r >= static_cast<long>(map.height)) continue;
    for (long dj = -R; dj <= R; ++dj) {
      const long c = cx + dj;
      if (c < 0 || c >= static_cast<long>(map.width)) continue;
      map.values[static_cast<std::size_t>(r) * map.width + static_cast<std::size_t>(c)] +=
          static_cast<float>(win[static_cast<std::size_t>((di + R) * (2 * R + 1) + (dj + R))] / z);
    }
  }
}

}  // namespace detail

inline std::vector<double> kernel_sigmas(const PointSet& ps, const DensityConfig& cfg) {
  std::vector<double> sig(ps.size(), cfg.sigma_const);
  if (cfg.mode == KernelMode::adaptive) {
    if (!(cfg.beta > 0)) throw std::invalid_argument("beta must be positive");
    if (ps.size() < 2) throw std::invalid_argument("adaptive kernels need at least 2 heads");
    const auto d = knn_avg_distance(ps, cfg.k);
    for (std::size_t i = 0; i < d.size(); ++i) sig[i] = std::max(cfg.beta * d[i], cfg.min_sigma);
  } else if (!(cfg.sigma_const > 0)) {
    throw std::invalid_argument("sigma_const must be positive");
  }
  return sig;
}

inline DensityMap gen_density_map(const PointSet& ps, const DensityConfig& cfg) {
  ps.validate();
  DensityMap map(ps.image_h, ps.image_w, 1);
  if (ps.size() == 0) {
    if (cfg.mode == KernelMode::constant && !(cfg.sigma_const > 0))
      throw std::invalid_argument("sigma_const must be positive");
    return map;
  }
  const auto sig = kernel_sigmas(ps, cfg);
  for (std::size_t i = 0; i < ps.size(); ++i) detail::splat_gaussian(map, ps.points[i], sig[i]);
  return map;
}

// Block-sums factor x factor cells; total mass is unchanged.
inline DensityMap downsample_preserving_sum(const DensityMap& m, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("downsample factor must be positive");
  if (m.height % factor != 0 || m.width % factor != 0)
    throw std::invalid_argument("map " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                                " not divisible by " + std::to_string(factor));
  DensityMap out(m.height / factor, m.width / factor, m.scale * factor);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) {
      double acc = 0;
      for (std::size_t i = 0; i < factor; ++i)
        for (std::size_t j = 0; j < factor; ++j) acc += m.at(r * factor + i, c * factor + j);
      out.at(r, c) = static_cast<float>(acc);
    }
  return out;
}

// ---------------------------------------------------------------------------
// PAPD1: "PAPD1", u32 h, u32 w, h*w f32 row-major.

inline std::string encode_density(const DensityMap& m) {
  io::Writer w;
  w.magic("PAPD1");
  w.u32(static_cast<std::uint32_t>(m.height));
  w.u32(static_cast<std::uint32_t>(m.width));
  for (float v : m.values) w.f32(v);
  return w.str();
}

inline DensityMap decode_density(std::string bytes) {
  io::Reader r(std::move(bytes), "PAPD1");
  r.expect_magic("PAPD1");
  const std::size_t h = r.u32();
  const std::size_t w = r.u32();
  DensityMap m(h, w, 1);
  for (auto& v : m.values) v = r.f32();
  return m;
}

inline void save_density(const std::filesystem::path& p, const DensityMap& m) { io::write_file(p, encode_density(m)); }
inline DensityMap load_density(const std::filesystem::path& p) { return decode_density(io::read_file(p)); }

// ---------------------------------------------------------------------------
// Annotation file: one JSON object per line, {"image": path, "points": [[x,y],...]}.

struct Annotation {
  std::string image;
  std::vector<Point> points;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

inline nlohmann::json points_to_json(const std::vector<Point>& pts) {
  auto arr = nlohmann::json::array();
  for (const auto& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

inline std::vector<Point> points_from_json(const nlohmann::json& j) {
  std::vector<Point> pts;
  for (const auto& e : j) pts.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
  return pts;
}

inline std::string encode_annotations(const std::vector<Annotation>& anns) {
  std::string out;
  for (const auto& a : anns) {
    nlohmann::json j;
    j["image"] = a.image;
    j["points"] = points_to_json(a.points);
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<Annotation> decode_annotations(const std::string& text) {
  std::vector<Annotation> anns;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    anns.push_back({j.at("image").get<std::string>(), points_from_json(j.at("points"))});
  }
  return anns;
}

}  // namespace pap
