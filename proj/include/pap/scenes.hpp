#pragma once

// Synthetic crowd scenes: radially shaded dark head blobs of varying size on
// a procedural background, with optional non-head clutter. Deterministic
// from (seed, split, index).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pap/density.hpp"
#include "pap/io.hpp"
#include "pap/tensor.hpp"

namespace pap {

struct SceneConfig {
  std::size_t height = 96;
  std::size_t width = 96;
  std::size_t channels = 1;
  std::size_t min_heads = 5;
  std::size_t max_heads = 40;
  double min_radius = 2.5;
  double max_radius = 5.0;
  // Clutter: dark hard-edged squares and bright discs with no annotation.
  std::size_t min_distractors = 0;
  std::size_t max_distractors = 0;
  double negative_fraction = 0.0;  // share of scenes with zero heads
  std::size_t max_retries = 400;   // placement attempts per head

  void validate() const {
    if (height % 8 != 0 || width % 8 != 0) throw std::invalid_argument("scene dims must be divisible by 8");
    if (channels != 1 && channels != 3) throw std::invalid_argument("scene channels must be 1 or 3");
    if (min_heads > max_heads) throw std::invalid_argument("head count range inverted");
    if (!(min_radius > 0) || min_radius > max_radius) throw std::invalid_argument("radius range must be positive");
    if (min_distractors > max_distractors) throw std::invalid_argument("distractor range inverted");
  }

  nlohmann::json to_json() const {
    return {{"height", height}, {"width", width}, {"channels", channels}, {"min_heads", min_heads},
            {"max_heads", max_heads}, {"min_radius", min_radius}, {"max_radius", max_radius},
            {"min_distractors", min_distractors}, {"max_distractors", max_distractors},
            {"negative_fraction", negative_fraction}, {"max_retries", max_retries}};
  }
};

struct Blob {
  double x, y, rx, ry;
};

struct Scene {
  Image image;
  PointSet points;
  std::vector<Blob> heads;  // rendered heads, one per annotation
  std::vector<Blob> distractors;
  bool negative = false;
};

namespace detail {

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace detail

template <class Rng>
Scene gen_scene(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width, C = cfg.channels;
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };

  Scene sc;
  sc.image = Image{C, H, W, std::vector<float>(C * H * W)};
  sc.points.image_w = W;
  sc.points.image_h = H;

  // Background: base tone, three low-frequency waves, mild per-pixel grain.
  std::vector<double> bg(H * W);
  const double base = uni(0.55, 0.8);
  double wave[3][4];
  for (auto& w : wave) {
    w[0] = uni(0.02, 0.07);                         // amplitude
    w[1] = uni(0.02, 0.12) * (U(rng) < 0.5 ? -1 : 1);  // fx
    w[2] = uni(0.02, 0.12);                         // fy
    w[3] = uni(0.0, 6.283185307179586);             // phase
  }
  std::normal_distribution<double> grain(0.0, 0.02);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      double v = base;
      for (const auto& w : wave) v += w[0] * std::sin(w[1] * double(j) + w[2] * double(i) + w[3]);
      bg[i * W + j] = v + grain(rng);
    }
  std::vector<double> tint(C, 1.0);
  if (C == 3)
    for (auto& t : tint) t = uni(0.9, 1.1);

  sc.negative = cfg.negative_fraction > 0 && U(rng) < cfg.negative_fraction;
  std::size_t n_heads = 0;
  if (!sc.negative) {
    std::uniform_int_distribution<std::size_t> cnt(cfg.min_heads, cfg.max_heads);
    n_heads = cnt(rng);
  }
  std::size_t n_distract = 0;
  if (cfg.max_distractors > 0) {
    std::uniform_int_distribution<std::size_t> cnt(cfg.min_distractors, cfg.max_distractors);
    n_distract = cnt(rng);
  }

  std::vector<double> img = bg;

  // Distractors first so heads are drawn over them.
  for (std::size_t d = 0; d < n_distract; ++d) {
    const double r = uni(cfg.min_radius, cfg.max_radius * 1.2);
    const double cx = uni(r, double(W) - r), cy = uni(r, double(H) - r);
    const bool square = U(rng) < 0.5;
    const double level = square ? uni(0.15, 0.3) : uni(0.9, 1.0);
    sc.distractors.push_back({cx, cy, r, r});
    for (long i = long(cy - r) - 1; i <= long(cy + r) + 1; ++i)
      for (long j = long(cx - r) - 1; j <= long(cx + r) + 1; ++j) {
        if (i < 0 || j < 0 || i >= long(H) || j >= long(W)) continue;
        const double dy = double(i) + 0.5 - cy, dx = double(j) + 0.5 - cx;
        const bool inside = square ? (std::abs(dx) <= r && std::abs(dy) <= r) : (dx * dx + dy * dy <= r * r);
        if (inside) img[std::size_t(i) * W + std::size_t(j)] = level;
      }
  }

  for (std::size_t h = 0; h < n_heads; ++h) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      const double r = uni(cfg.min_radius, cfg.max_radius);
      const double rx = r * uni(0.85, 1.15), ry = r * uni(0.85, 1.15);
      const double cx = uni(rx, double(W) - rx), cy = uni(ry, double(H) - ry);
      bool clear = true;
      for (const auto& o : sc.heads) {
        const double need = 0.75 * (std::max(rx, ry) + std::max(o.rx, o.ry));
        if (std::hypot(cx - o.x, cy - o.y) < need) { clear = false; break; }
      }
      if (!clear) continue;
      const double depth = uni(0.55, 0.8);
      for (long i = long(cy - ry) - 1; i <= long(cy + ry) + 1; ++i)
        for (long j = long(cx - rx) - 1; j <= long(cx + rx) + 1; ++j) {
          if (i < 0 || j < 0 || i >= long(H) || j >= long(W)) continue;
          const double dy = (double(i) + 0.5 - cy) / ry, dx = (double(j) + 0.5 - cx) / rx;
          const double q = dx * dx + dy * dy;
          if (q >= 1.0) continue;
          auto& px = img[std::size_t(i) * W + std::size_t(j)];
          px = std::min(px, bg[std::size_t(i) * W + std::size_t(j)] * (1.0 - depth * (1.0 - q)));
        }
      sc.heads.push_back({cx, cy, rx, ry});
      sc.points.points.push_back({cx, cy});
      placed = true;
    }
    if (!placed) throw std::runtime_error("scene overcrowded: could not place head " + std::to_string(h));
  }

  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < H * W; ++p)
      sc.image.values[c * H * W + p] = static_cast<float>(detail::quantize8(img[p] * tint[c]));
  return sc;
}

inline std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

template <class T>
Tensor<T> image_tensor(const Image& img) {
  return Tensor<T>(Shape{1, img.channels, img.height, img.width}, std::vector<T>(img.values.begin(), img.values.end()));
}

template <class T>
Image tensor_image(const Tensor<T>& t) {
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("expected [1,C,H,W] image tensor");
  Image img{t.dim(1), t.dim(2), t.dim(3), std::vector<float>(t.data().begin(), t.data().end())};
  return img;
}

// ---------------------------------------------------------------------------
// Presets and datasets

struct DatasetConfig {
  std::string preset = "standard";
  SceneConfig train;
  SceneConfig test;
  std::size_t n_train = 64;
  std::size_t n_test = 32;
  DensityConfig density{KernelMode::adaptive, 0.3, 3, 4.0, 0.25};

  nlohmann::json to_json() const {
    return {{"preset", preset}, {"train", train.to_json()}, {"test", test.to_json()}, {"n_train", n_train},
            {"n_test", n_test},
            {"density", {{"beta", density.beta}, {"k", density.k}, {"sigma_const", density.sigma_const}}}};
  }
};

// "standard", "scale-shift" (small heads in train, mixed in test),
// "clutter" (distractors everywhere, a quarter of scenes head-free) and
// "dense" (250-400 small heads per scene).
inline DatasetConfig preset_config(const std::string& name) {
  DatasetConfig d;
  d.preset = name;
  if (name == "standard") {
    return d;
  }
  if (name == "scale-shift") {
    d.train.min_radius = 2.0;
    d.train.max_radius = 3.0;
    d.test.min_radius = 2.0;
    d.test.max_radius = 6.0;
    return d;
  }
  if (name == "clutter") {
    for (auto* s : {&d.train, &d.test}) {
      s->min_distractors = 3;
      s->max_distractors = 8;
      s->negative_fraction = 0.25;
    }
    return d;
  }
  if (name == "dense") {
    // congested crowds of small, distant heads: a 10 px patch covers ~4 of them
    for (auto* s : {&d.train, &d.test}) {
      s->min_heads = 250;
      s->max_heads = 400;
      s->min_radius = 1.5;
      s->max_radius = 3.0;
    }
    return d;
  }
  throw std::invalid_argument("unknown scene preset: " + name);
}

struct LabeledScene {
  std::string split;
  std::size_t index = 0;
  Image image;
  PointSet points;
  DensityMap density;  // image resolution
  bool negative = false;
};

inline DensityMap scene_density(const PointSet& ps, DensityConfig cfg) {
  cfg.mode = default_kernel_mode(ps.size());
  return gen_density_map(ps, cfg);
}

inline LabeledScene make_labeled_scene(const DatasetConfig& d, const std::string& split, std::size_t index,
                                       std::uint64_t seed) {
  auto rng = scene_rng(seed, split == "train" ? 0 : 1, index);
  auto sc = gen_scene(split == "train" ? d.train : d.test, rng);
  LabeledScene ls{split, index, std::move(sc.image), std::move(sc.points), {}, sc.negative};
  ls.density = scene_density(ls.points, d.density);
  return ls;
}

// In-memory equivalent of gen_dataset.
inline std::vector<LabeledScene> make_split(const DatasetConfig& d, const std::string& split, std::uint64_t seed) {
  const std::size_t n = split == "train" ? d.n_train : d.n_test;
  std::vector<LabeledScene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_labeled_scene(d, split, i, seed));
  return out;
}

// Writes images/, densities/, {train,test}.jsonl and manifest.json under dir.
inline nlohmann::json gen_dataset(const DatasetConfig& d, std::uint64_t seed, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "densities");
  nlohmann::json manifest = {{"seed", seed}, {"config", d.to_json()}, {"scenes", nlohmann::json::array()}};
  for (const std::string split : {"train", "test"}) {
    std::vector<Annotation> anns;
    for (const auto& s : make_split(d, split, seed)) {
      char stem[64];
      std::snprintf(stem, sizeof stem, "%s_%04zu", split.c_str(), s.index);
      const std::string img_rel = std::string("images/") + stem + ".ppm";
      const std::string den_rel = std::string("densities/") + stem + ".papd";
      const std::string img_bytes = encode_ppm(s.image);
      const std::string den_bytes = encode_density(s.density);
      io::write_file(dir / img_rel, img_bytes);
      io::write_file(dir / den_rel, den_bytes);
      anns.push_back({img_rel, s.points.points});
      manifest["scenes"].push_back({{"split", split},
                                    {"image", img_rel},
                                    {"points", points_to_json(s.points.points)},
                                    {"density", den_rel},
                                    {"negative", s.negative},
                                    {"sha256", io::sha256_hex(img_bytes)},
                                    {"density_sha256", io::sha256_hex(den_bytes)}});
    }
    io::write_file(dir / (split + ".jsonl"), encode_annotations(anns));
  }
  io::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

// Loads one split of a dataset written by gen_dataset.
inline std::vector<LabeledScene> load_split(const std::filesystem::path& dir, const std::string& split) {
  const auto manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  const std::size_t channels = manifest.at("config").at("train").at("channels").get<std::size_t>();
  std::vector<LabeledScene> out;
  std::size_t idx = 0;
  for (const auto& e : manifest.at("scenes")) {
    if (e.at("split").get<std::string>() != split) continue;
    LabeledScene s;
    s.split = split;
    s.index = idx++;
    s.image = decode_ppm(io::read_file(dir / e.at("image").get<std::string>()), channels == 1);
    s.points.image_w = s.image.width;
    s.points.image_h = s.image.height;
    s.points.points = points_from_json(e.at("points"));
    s.density = load_density(dir / e.at("density").get<std::string>());
    s.negative = e.value("negative", false);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("no '" + split + "' scenes in " + dir.string());
  return out;
}

// Image tensors paired with ground truth block-summed to output resolution.
template <class T>
std::vector<Sample<T>> to_samples(const std::vector<LabeledScene>& scenes, std::size_t stride) {
  std::vector<Sample<T>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({image_tensor<T>(s.image), downsample_preserving_sum(s.density, stride)});
  return out;
}

}  // namespace pap
